//! Color-histogram evaluation: KL divergence and Hellinger distance between
//! the joint RGB histograms of a result and its reference, plus convergence
//! curves over the optimization trace.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::optimizer::Snapshot;

/// Default bins per channel (8^3 = 512 joint bins).
pub const DEFAULT_BINS: usize = 8;
/// Default additive smoothing mass per bin.
pub const DEFAULT_SMOOTHING: f64 = 1e-8;

/// Smoothed, L1-normalized joint RGB histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins^3` probabilities, index `(r * bins + g) * bins + b`.
    pub counts: Vec<f64>,
    pub bins: usize,
    pub smoothing_eps: f64,
}

/// Joint 3-D color histogram of an image in `[0, 1]`.
pub fn color_histogram(img: &Image, bins: usize, eps: f64) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::invalid_argument("need at least 2 bins per channel"));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid_argument("smoothing must be >= 0"));
    }
    let mut counts = vec![eps; bins * bins * bins];
    let data = img.data();
    let (h, w, _) = data.dim();
    let bin_of = |v: f32| -> usize {
        let b = (v.clamp(0.0, 1.0) as f64 * bins as f64) as usize;
        b.min(bins - 1)
    };
    for y in 0..h {
        for x in 0..w {
            let r = bin_of(data[(y, x, 0)]);
            let g = bin_of(data[(y, x, 1)]);
            let b = bin_of(data[(y, x, 2)]);
            counts[(r * bins + g) * bins + b] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    for c in counts.iter_mut() {
        *c /= total;
    }
    Ok(Histogram {
        counts,
        bins,
        smoothing_eps: eps,
    })
}

fn check_compatible(p: &Histogram, q: &Histogram) -> Result<()> {
    if p.bins != q.bins || p.counts.len() != q.counts.len() {
        return Err(Error::invalid_argument(format!(
            "histogram bin counts differ: {} vs {}",
            p.bins, q.bins
        )));
    }
    Ok(())
}

/// `sum p ln(p/q)`; requires both histograms smoothed (no zero entries).
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_compatible(p, q)?;
    let mut kl = 0.0;
    for (&pv, &qv) in p.counts.iter().zip(q.counts.iter()) {
        if pv > 0.0 {
            kl += pv * (pv / qv).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// `(1/sqrt(2)) * ||sqrt(p) - sqrt(q)||_2`, bounded in [0, 1].
pub fn hellinger(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_compatible(p, q)?;
    let ss: f64 = p
        .counts
        .iter()
        .zip(q.counts.iter())
        .map(|(&pv, &qv)| {
            let d = pv.sqrt() - qv.sqrt();
            d * d
        })
        .sum();
    Ok((ss / 2.0).sqrt())
}

/// Convenience: CH metrics between two images.
pub fn ch_metrics(result: &Image, reference: &Image, bins: usize, eps: f64) -> Result<(f64, f64)> {
    let p = color_histogram(result, bins, eps)?;
    let q = color_histogram(reference, bins, eps)?;
    Ok((kl_divergence(&p, &q)?, hellinger(&p, &q)?))
}

/// One row of a convergence curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurveRow {
    pub scale_index: usize,
    pub iteration: usize,
    pub ch_kl: f64,
    pub ch_hellinger: f64,
}

/// Color-histogram trajectory of the captured snapshots against the
/// reference (resized per scale so histograms compare like with like).
pub fn convergence_curve(
    snapshots: &[Snapshot],
    reference: &Image,
    bins: usize,
    eps: f64,
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let r = crate::img::resize(reference, snap.image.height(), snap.image.width())?;
        let (ch_kl, ch_hellinger) = ch_metrics(&snap.image, &r, bins, eps)?;
        rows.push(CurveRow {
            scale_index: snap.scale_index,
            iteration: snap.iteration,
            ch_kl,
            ch_hellinger,
        });
    }
    Ok(rows)
}

/// Serialize curve rows as CSV (`scale,iter,ch_kl,ch_hellinger`).
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("scale,iter,ch_kl,ch_hellinger\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e}\n",
            r.scale_index, r.iteration, r.ch_kl, r.ch_hellinger
        ));
    }
    out
}

/// Medians of consecutive (non-overlapping) windows; the trailing partial
/// window counts. Used for smoothed-descent checks on noisy traces.
pub fn window_medians(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    values
        .chunks(window)
        .map(|chunk| {
            let mut v: Vec<f64> = chunk.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        })
        .collect()
}

/// True if `values` is non-increasing within `slack`.
pub fn non_increasing(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + slack)
}

/// Histogram of an arbitrary flat array in [0,1] — helper for tests.
pub fn histogram_total(h: &Histogram) -> f64 {
    h.counts.iter().sum()
}

#[allow(dead_code)]
fn _assert_serializable(h: &Histogram) -> ArrayD<f64> {
    ArrayD::from_shape_vec(ndarray::IxDyn(&[h.counts.len()]), h.counts.clone()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())).unwrap()
    }

    #[test]
    fn black_image_mass_in_first_bin() {
        let img = Image::zeros(4, 4);
        let h = color_histogram(&img, 8, 1e-8).unwrap();
        assert!(h.counts[0] > 0.999);
        assert!((histogram_total(&h) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_normalizes_and_floors() {
        let img = random_image(16, 16, 1);
        let h = color_histogram(&img, 8, 1e-8).unwrap();
        assert!((histogram_total(&h) - 1.0).abs() < 1e-9);
        let floor = 1e-8 / (256.0 + 512.0 * 1e-8);
        assert!(h.counts.iter().all(|&c| c >= floor * 0.99));
    }

    #[test]
    fn histogram_is_permutation_invariant() {
        let img = random_image(8, 8, 2);
        let mut shuffled = img.clone();
        {
            let data = shuffled.data_mut();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..200 {
                let (a, b) = (
                    (rng.random_range(0..8), rng.random_range(0..8)),
                    (rng.random_range(0..8), rng.random_range(0..8)),
                );
                for c in 0..3 {
                    let tmp = data[(a.0, a.1, c)];
                    data[(a.0, a.1, c)] = data[(b.0, b.1, c)];
                    data[(b.0, b.1, c)] = tmp;
                }
            }
        }
        let ha = color_histogram(&img, 8, 1e-8).unwrap();
        let hb = color_histogram(&shuffled, 8, 1e-8).unwrap();
        assert_eq!(ha.counts, hb.counts);
    }

    #[test]
    fn uniform_noise_spreads_over_bins() {
        // With B=2 each of the 8 joint bins gets ~1/8 of the mass.
        let img = random_image(64, 64, 4);
        let h = color_histogram(&img, 2, 0.0).unwrap();
        let n = (64 * 64) as f64;
        let p = 1.0 / 8.0;
        let sigma = (p * (1.0 - p) / n).sqrt();
        for (i, &c) in h.counts.iter().enumerate() {
            assert!(
                (c - p).abs() < 3.0 * sigma,
                "bin {i}: {c} vs {p} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn kl_properties_and_closed_form() {
        let a = random_image(8, 8, 5);
        let b = random_image(8, 8, 6);
        let ha = color_histogram(&a, 8, 1e-8).unwrap();
        let hb = color_histogram(&b, 8, 1e-8).unwrap();
        assert_eq!(kl_divergence(&ha, &ha).unwrap(), 0.0);
        assert!(kl_divergence(&ha, &hb).unwrap() >= 0.0);

        // Hand-built two-bin histograms: 0.9 ln(1.8) + 0.1 ln(0.2).
        let p = Histogram {
            counts: vec![0.9, 0.1],
            bins: 2,
            smoothing_eps: 0.0,
        };
        let q = Histogram {
            counts: vec![0.5, 0.5],
            bins: 2,
            smoothing_eps: 0.0,
        };
        let got = kl_divergence(&p, &q).unwrap();
        let want = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((want - 0.368).abs() < 1e-3);
    }

    #[test]
    fn hellinger_properties() {
        let a = random_image(8, 8, 7);
        let b = random_image(8, 8, 8);
        let ha = color_histogram(&a, 8, 1e-8).unwrap();
        let hb = color_histogram(&b, 8, 1e-8).unwrap();
        assert_eq!(hellinger(&ha, &ha).unwrap(), 0.0);
        let hab = hellinger(&ha, &hb).unwrap();
        let hba = hellinger(&hb, &ha).unwrap();
        assert_eq!(hab, hba);
        assert!((0.0..=1.0).contains(&hab));

        // Disjoint supports: distance 1 up to smoothing.
        let black = color_histogram(&Image::zeros(4, 4), 2, 1e-9).unwrap();
        let white = color_histogram(&Image::constant(4, 4, [1.0; 3]), 2, 1e-9).unwrap();
        let d = hellinger(&black, &white).unwrap();
        assert!(d > 1.0 - 1e-4, "disjoint hellinger {d}");
    }

    #[test]
    fn bin_mismatch_is_an_error() {
        let a = color_histogram(&Image::zeros(2, 2), 4, 1e-8).unwrap();
        let b = color_histogram(&Image::zeros(2, 2), 8, 1e-8).unwrap();
        assert!(kl_divergence(&a, &b).is_err());
        assert!(hellinger(&a, &b).is_err());
    }

    #[test]
    fn curve_rows_and_csv() {
        let reference = random_image(16, 16, 9);
        let snaps = vec![
            Snapshot {
                scale_index: 1,
                iteration: 0,
                image: random_image(8, 8, 10),
            },
            Snapshot {
                scale_index: 1,
                iteration: 5,
                image: crate::img::resize(&reference, 8, 8).unwrap(),
            },
        ];
        let rows = convergence_curve(&snaps, &reference, 8, 1e-8).unwrap();
        assert_eq!(rows.len(), 2);
        // Snapshot equal to the (resized) reference scores ~0 on both.
        assert!(rows[1].ch_kl < 1e-9);
        assert!(rows[1].ch_hellinger < 1e-6);
        assert!(rows[0].ch_kl > rows[1].ch_kl);
        let csv = curve_csv(&rows);
        assert!(csv.starts_with("scale,iter,ch_kl,ch_hellinger\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn window_median_machinery() {
        let v = [5.0, 4.0, 6.0, 3.0, 2.0, 2.5, 1.0];
        let m = window_medians(&v, 2);
        assert_eq!(m, vec![4.5, 4.5, 2.25, 1.0]);
        assert!(!non_increasing(&m, 0.0));
        assert!(non_increasing(&[3.0, 2.0, 2.0, 1.5], 0.0));
        assert!(!non_increasing(&[1.0, 1.1], 0.0));
        assert!(non_increasing(&[1.0, 1.1], 0.2));
    }
}

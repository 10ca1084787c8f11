//! Pretrained feature extraction.
//!
//! Two frozen networks drive the losses: a 16-layer convolutional
//! recognition stack whose intermediate activations form a multi-level
//! hypercolumn (color/appearance statistics), and a small 8-pixel-patch
//! vision transformer whose block outputs capture scene structure while
//! staying close to invariant under color changes.
//!
//! Both run on the autodiff tape so gradients reach the input image; the
//! network parameters themselves are constants.

pub mod vgg;
pub mod vit;

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::img::{normalize_for_network, Image, NORM_MEAN, NORM_STD};
use crate::kernels::BilinearPlan;
use crate::tensor::{sc, Scalar};
use crate::weights::{synthetic_vgg16, synthetic_vit_s8, TensorMap};

pub use vgg::VggFeatures;
pub use vit::VitFeatures;

/// Hypercolumn layer indices: the ReLU outputs of conv 1_1, 1_2, 2_1, 2_2,
/// 3_1, 3_2, 3_3, 4_3 and 5_3.
pub const DEFAULT_FDA_LAYERS: [usize; 9] = [1, 3, 6, 8, 11, 13, 15, 22, 29];

/// Seed for the synthetic weight generators when no checkpoint is given.
/// Fixed independently of the run seed so results stay comparable.
pub const DEFAULT_SYNTHETIC_SEED: u64 = 1234;

/// Where extractor parameters come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsSource {
    /// Tensor archives produced by `scripts/fetch_weights.py`.
    Files { vgg: PathBuf, vit: PathBuf },
    /// Seeded synthetic stand-ins (see [`crate::weights`]).
    Synthetic { seed: u64 },
}

impl Default for WeightsSource {
    fn default() -> Self {
        WeightsSource::Synthetic {
            seed: DEFAULT_SYNTHETIC_SEED,
        }
    }
}

/// Extraction configuration: which hypercolumn layers to use and where the
/// weights come from. All 12 transformer blocks are always used.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExtractorConfig {
    pub fda_layers: Vec<usize>,
    pub weights: WeightsSource,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            fda_layers: DEFAULT_FDA_LAYERS.to_vec(),
            weights: WeightsSource::default(),
        }
    }
}

/// Both frozen extractors, loaded once and shared across runs.
pub struct Extractors<T: Scalar> {
    pub vgg: VggFeatures<T>,
    pub vit: VitFeatures<T>,
}

impl<T: Scalar> Extractors<T> {
    pub fn load(cfg: &ExtractorConfig) -> Result<Self> {
        let (vgg_map, vit_map) = match &cfg.weights {
            WeightsSource::Files { vgg, vit } => (TensorMap::read(vgg)?, TensorMap::read(vit)?),
            WeightsSource::Synthetic { seed } => (synthetic_vgg16(*seed), synthetic_vit_s8(*seed)),
        };
        Ok(Extractors {
            vgg: VggFeatures::from_tensors(&vgg_map)?,
            vit: VitFeatures::from_tensors(&vit_map)?,
        })
    }

    /// Checksums over the parameters actually held in memory, for verifying
    /// that optimization never touches them.
    pub fn checksums(&self) -> (u64, u64) {
        (self.vgg.param_checksum(), self.vit.param_checksum())
    }
}

/// Per-layer feature maps (channel-major), conceptually upsampled to
/// `target_hw`; the upsampling is applied lazily at sampling time.
pub struct FeatureSet<T: Scalar> {
    pub maps: Vec<Array3<T>>,
    pub layer_ids: Vec<usize>,
    pub target_hw: (usize, usize),
}

impl<T: Scalar> FeatureSet<T> {
    /// Summed channel dimension of the hypercolumn.
    pub fn feature_dim(&self) -> usize {
        self.maps.iter().map(|m| m.dim().0).sum()
    }
}

/// `n` sampled hypercolumn vectors of dimension `m`.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<T: Scalar> {
    pub vectors: Array2<T>,
    pub sample_seed: u64,
}

/// Draw `n` distinct flat positions from an `h x w` grid (partial
/// Fisher-Yates over a seeded ChaCha stream; stable across platforms).
pub fn sample_positions(h: usize, w: usize, n: usize, seed: u64) -> Result<Vec<u32>> {
    let total = h * w;
    if n < 1 || n > total {
        return Err(Error::invalid_argument(format!(
            "cannot sample {n} positions from a {h}x{w} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<u32> = (0..total as u32).collect();
    for i in 0..n {
        let j = i + rng.random_range(0..(total - i));
        idx.swap(i, j);
    }
    idx.truncate(n);
    Ok(idx)
}

/// Bilinear tap plans that sample each layer map at the sub-pixel location
/// corresponding to the given target-grid positions.
pub fn sampling_plans(
    target_hw: (usize, usize),
    layer_hws: &[(usize, usize)],
    positions: &[u32],
) -> Vec<BilinearPlan> {
    let (th, tw) = target_hw;
    layer_hws
        .iter()
        .map(|&(lh, lw)| {
            let pts: Vec<(f64, f64)> = positions
                .iter()
                .map(|&p| {
                    let (y, x) = ((p as usize) / tw, (p as usize) % tw);
                    (
                        crate::kernels::map_coord(y, th, lh),
                        crate::kernels::map_coord(x, tw, lw),
                    )
                })
                .collect();
            BilinearPlan::for_points(lh, lw, &pts)
        })
        .collect()
}

/// Sample a hypercolumn matrix from a feature set: positions are drawn on
/// the target grid, and each layer is read at the matching sub-pixel spot
/// (equivalent to upsampling every map to `target_hw` first).
pub fn sample_points<T: Scalar>(fs: &FeatureSet<T>, n: usize, seed: u64) -> Result<FeatureMatrix<T>> {
    if fs.maps.is_empty() {
        return Err(Error::invalid_argument("empty feature set"));
    }
    let (th, tw) = fs.target_hw;
    if n < 2 {
        return Err(Error::invalid_argument("need at least 2 sample points"));
    }
    let positions = sample_positions(th, tw, n, seed)?;
    let layer_hws: Vec<(usize, usize)> = fs
        .maps
        .iter()
        .map(|m| (m.dim().1, m.dim().2))
        .collect();
    let plans = sampling_plans((th, tw), &layer_hws, &positions);
    let parts: Vec<Array2<T>> = fs
        .maps
        .iter()
        .zip(plans.iter())
        .map(|(m, plan)| plan.gather(m))
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let vectors = ndarray::concatenate(ndarray::Axis(1), &views)
        .map_err(|e| Error::structure(format!("hypercolumn concat: {e}")))?;
    Ok(FeatureMatrix {
        vectors,
        sample_seed: seed,
    })
}

/// Put a normalized image on a tape as a constant or trainable leaf is the
/// caller's business; this helper normalizes a plain image and wraps it.
pub fn normalized_constant<T: Scalar>(tape: &mut Tape<T>, img: &Image) -> Var {
    let normalized = normalize_for_network(img);
    tape.constant(normalized.to_chw::<T>().into_dyn())
}

/// Tape-side normalization of an already-registered [0,1] image node.
pub fn normalize_on_tape<T: Scalar>(tape: &mut Tape<T>, img: Var) -> Var {
    let mean = NORM_MEAN.map(|v| sc::<T>(v as f64));
    let std = NORM_STD.map(|v| sc::<T>(v as f64));
    tape.channel_affine(img, mean, std)
}

/// Extract the hypercolumn feature set of an image (no gradients retained).
pub fn extract_hypercolumn<T: Scalar>(
    extractors: &Extractors<T>,
    cfg: &ExtractorConfig,
    img: &Image,
    target_hw: (usize, usize),
) -> Result<FeatureSet<T>> {
    if (img.height(), img.width()) != target_hw {
        return Err(Error::invalid_argument(format!(
            "target {}x{} does not match image {}x{}",
            target_hw.0,
            target_hw.1,
            img.height(),
            img.width()
        )));
    }
    let mut tape = Tape::<T>::new();
    let input = normalized_constant(&mut tape, img);
    let vars = extractors.vgg.forward(&mut tape, input, &cfg.fda_layers)?;
    let maps = vars
        .into_iter()
        .map(|v| {
            tape.value(v)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("feature maps are 3-d")
        })
        .collect();
    Ok(FeatureSet {
        maps,
        layer_ids: cfg.fda_layers.clone(),
        target_hw,
    })
}

/// Extract the 12 transformer block outputs (no gradients retained).
/// Maps come back as `(embed_dim, grid_h, grid_w)`.
pub fn extract_structure<T: Scalar>(
    extractors: &Extractors<T>,
    img: &Image,
) -> Result<FeatureSet<T>> {
    let mut tape = Tape::<T>::new();
    let input = normalized_constant(&mut tape, img);
    let vars = extractors
        .vit
        .forward(&mut tape, input, (img.height(), img.width()))?;
    let grid = extractors.vit.grid_for((img.height(), img.width()));
    let d = crate::weights::VIT_EMBED;
    let maps = vars
        .into_iter()
        .map(|v| {
            let tokens = tape
                .value(v)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("token matrix is 2-d");
            let mut map = Array3::<T>::zeros((d, grid.0, grid.1));
            for t in 0..grid.0 * grid.1 {
                for c in 0..d {
                    map[(c, t / grid.1, t % grid.1)] = tokens[(t, c)];
                }
            }
            map
        })
        .collect();
    Ok(FeatureSet {
        maps,
        layer_ids: (0..crate::weights::VIT_DEPTH).collect(),
        target_hw: grid,
    })
}

/// Mean cosine distance between two feature sets, per matching position and
/// layer. Used for the structure-extractor comparisons.
pub fn mean_cosine_distance<T: Scalar>(a: &FeatureSet<T>, b: &FeatureSet<T>) -> f64 {
    assert_eq!(a.maps.len(), b.maps.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (ma, mb) in a.maps.iter().zip(b.maps.iter()) {
        assert_eq!(ma.dim(), mb.dim());
        let (c, h, w) = ma.dim();
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for ch in 0..c {
                    let (va, vb) = (ma[(ch, y, x)].f64_(), mb[(ch, y, x)].f64_());
                    dot += va * vb;
                    na += va * va;
                    nb += vb * vb;
                }
                let denom = (na.sqrt() * nb.sqrt()).max(1e-12);
                total += 1.0 - dot / denom;
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
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
    fn position_sampling_is_seeded_and_exhaustive() {
        let a = sample_positions(8, 8, 10, 5).unwrap();
        let b = sample_positions(8, 8, 10, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_positions(8, 8, 10, 6).unwrap();
        assert_ne!(a, c);

        let all = sample_positions(4, 4, 16, 1).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<u32>>());

        assert!(sample_positions(4, 4, 17, 1).is_err());
        assert!(sample_positions(4, 4, 0, 1).is_err());
    }

    #[test]
    fn sample_points_constant_features_ignore_seed() {
        let fs = FeatureSet::<f64> {
            maps: vec![Array3::from_elem((4, 6, 6), 0.25)],
            layer_ids: vec![1],
            target_hw: (12, 12),
        };
        let m1 = sample_points(&fs, 8, 1).unwrap();
        let m2 = sample_points(&fs, 8, 2).unwrap();
        assert_eq!(m1.vectors.dim(), (8, 4));
        assert!(m1
            .vectors
            .iter()
            .zip(m2.vectors.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn sample_points_same_seed_reproduces() {
        let extr = Extractors::<f32>::load(&ExtractorConfig::default()).unwrap();
        let cfg = ExtractorConfig {
            fda_layers: vec![1, 3],
            ..Default::default()
        };
        let img = random_image(16, 16, 3);
        let fs = extract_hypercolumn(&extr, &cfg, &img, (16, 16)).unwrap();
        assert_eq!(fs.feature_dim(), 128);
        let a = sample_points(&fs, 32, 9).unwrap();
        let b = sample_points(&fs, 32, 9).unwrap();
        assert_eq!(a.vectors, b.vectors);
    }
}

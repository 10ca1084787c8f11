//! Laplacian pyramid decomposition/reconstruction and the frozen-band
//! parameterization used to pin high-frequency detail during optimization.
//!
//! `down` is a 5-tap binomial blur followed by 2x decimation; `up` is
//! zero-insertion followed by the same blur with x4 gain. Each band stores
//! the exact residual `x_j - up(down(x_j))`, so reconstruction is exactly
//! inverse regardless of the filter choice.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::img::Image;
use crate::kernels::{down2, half, up2};
use crate::tensor::{sc, Scalar};

/// Band-pass levels plus a low-frequency residual, stored channel-major.
#[derive(Debug, Clone)]
pub struct Pyramid {
    bands: Vec<Array3<f32>>,
    residual: Array3<f32>,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, j: usize) -> &Array3<f32> {
        &self.bands[j]
    }

    pub fn bands(&self) -> &[Array3<f32>] {
        &self.bands
    }

    pub fn residual(&self) -> &Array3<f32> {
        &self.residual
    }

    pub fn band_image(&self, j: usize) -> Image {
        Image::from_chw(&self.bands[j]).expect("band is a valid image plane")
    }

    /// Spatial shape `(h, w)` of band `j`.
    pub fn band_shape(&self, j: usize) -> (usize, usize) {
        let (_, h, w) = self.bands[j].dim();
        (h, w)
    }
}

/// Largest level count that keeps the residual comfortably non-degenerate:
/// `min(levels, floor(log2(min_dim)) - 1)`, at least 1.
pub fn effective_levels(min_dim: usize, levels: usize) -> usize {
    assert!(min_dim >= 2, "pyramid needs at least a 2x2 image");
    let budget = (usize::BITS - 1 - min_dim.leading_zeros()) as usize; // floor(log2)
    levels.min(budget.saturating_sub(1)).max(1)
}

/// Decompose into `levels` band-pass images plus a residual.
pub fn decompose(img: &Image, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(Error::invalid_argument("pyramid needs at least one level"));
    }
    let min_dim = img.height().min(img.width());
    if levels >= usize::BITS as usize || (min_dim >> levels) == 0 {
        return Err(Error::invalid_argument(format!(
            "{levels} levels too deep for a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let mut current = img.to_chw::<f32>();
    let mut bands = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (_, h, w) = current.dim();
        let down = down2(&current);
        let band = &current - &up2(&down, h, w);
        bands.push(band);
        current = down;
    }
    Ok(Pyramid {
        bands,
        residual: current,
    })
}

/// Sum the bands back together: `x_j = band_j + up(x_{j+1})`.
pub fn reconstruct(p: &Pyramid) -> Result<Image> {
    validate_chain(p)?;
    let mut current = p.residual.clone();
    for band in p.bands.iter().rev() {
        let (_, h, w) = band.dim();
        current = band + &up2(&current, h, w);
    }
    Image::from_chw(&current)
}

fn validate_chain(p: &Pyramid) -> Result<()> {
    if p.bands.is_empty() {
        return Err(Error::structure("pyramid has no bands"));
    }
    for j in 0..p.bands.len() {
        let (c, h, w) = p.bands[j].dim();
        if c != 3 {
            return Err(Error::structure(format!("band {j} has {c} channels")));
        }
        let next = if j + 1 < p.bands.len() {
            let (_, nh, nw) = p.bands[j + 1].dim();
            (nh, nw)
        } else {
            let (_, nh, nw) = p.residual.dim();
            (nh, nw)
        };
        if (half(h), half(w)) != next {
            return Err(Error::structure(format!(
                "band {j} shape {h}x{w} does not halve to {}x{}",
                next.0, next.1
            )));
        }
    }
    Ok(())
}

/// One-level high-pass: `img - up(down(img))`.
pub fn high_frequency(img: &Image) -> Result<Image> {
    if img.height() < 2 || img.width() < 2 {
        return Err(Error::invalid_argument(
            "high_frequency needs at least a 2x2 image",
        ));
    }
    let x = img.to_chw::<f32>();
    let (_, h, w) = x.dim();
    let hf = &x - &up2(&down2(&x), h, w);
    Image::from_chw(&hf)
}

/// A pyramid split into frozen high-frequency bands and trainable coarse
/// bands plus the residual. The frozen bands are never handed to the
/// optimizer, which makes their invariance structural.
#[derive(Debug, Clone)]
pub struct FrozenPyramid {
    pyramid: Pyramid,
    n_frozen: usize,
}

/// Tape handles for one reconstruction pass over a [`FrozenPyramid`].
pub struct PyramidVars {
    /// Trainable band leaves, ordered `[band_{n_frozen}, ..., band_{L-1}]`.
    pub bands: Vec<Var>,
    /// Trainable residual leaf.
    pub residual: Var,
    /// Full-resolution reconstruction.
    pub image: Var,
}

impl FrozenPyramid {
    pub fn new(pyramid: Pyramid, n_frozen: usize) -> Result<Self> {
        if n_frozen >= pyramid.levels() {
            return Err(Error::invalid_argument(format!(
                "cannot freeze {n_frozen} of {} bands",
                pyramid.levels()
            )));
        }
        Ok(FrozenPyramid { pyramid, n_frozen })
    }

    pub fn n_frozen(&self) -> usize {
        self.n_frozen
    }

    pub fn levels(&self) -> usize {
        self.pyramid.levels()
    }

    pub fn pyramid(&self) -> &Pyramid {
        &self.pyramid
    }

    pub fn frozen_bands(&self) -> &[Array3<f32>] {
        &self.pyramid.bands[..self.n_frozen]
    }

    /// Number of trainable tensors (coarse bands plus residual).
    pub fn trainable_len(&self) -> usize {
        self.pyramid.levels() - self.n_frozen + 1
    }

    /// Trainable tensors in the same order as [`PyramidVars::bands`] with the
    /// residual last.
    pub fn trainable(&self) -> Vec<&Array3<f32>> {
        let mut out: Vec<&Array3<f32>> = self.pyramid.bands[self.n_frozen..].iter().collect();
        out.push(&self.pyramid.residual);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Array3<f32>> {
        let mut out: Vec<&mut Array3<f32>> =
            self.pyramid.bands[self.n_frozen..].iter_mut().collect();
        out.push(&mut self.pyramid.residual);
        out
    }

    /// Plain (non-differentiable) reconstruction of the current state.
    pub fn reconstruct_image(&self) -> Image {
        reconstruct(&self.pyramid).expect("frozen pyramid stays well-formed")
    }

    /// Build the reconstruction on a tape: frozen bands enter as constants,
    /// trainable bands and the residual as gradient leaves.
    pub fn reconstruct_on_tape<T: Scalar>(&self, tape: &mut Tape<T>) -> PyramidVars {
        let to_t = |a: &Array3<f32>| a.mapv(|v| sc::<T>(v as f64)).into_dyn();
        let mut band_vars = Vec::with_capacity(self.pyramid.levels());
        let mut trainable = Vec::new();
        for (j, band) in self.pyramid.bands.iter().enumerate() {
            let v = if j < self.n_frozen {
                tape.constant(to_t(band))
            } else {
                let v = tape.leaf_grad(to_t(band));
                trainable.push(v);
                v
            };
            band_vars.push(v);
        }
        let residual = tape.leaf_grad(to_t(&self.pyramid.residual));
        let mut current = residual;
        for (j, &band) in band_vars.iter().enumerate().rev() {
            let (h, w) = self.pyramid.band_shape(j);
            let up = tape.up2(current, h, w);
            current = tape.add(band, up);
        }
        PyramidVars {
            bands: trainable,
            residual,
            image: current,
        }
    }
}

/// Mark the leading `n_frozen` bands constant, the rest trainable.
pub fn freeze_top_bands(pyramid: Pyramid, n_frozen: usize) -> Result<FrozenPyramid> {
    FrozenPyramid::new(pyramid, n_frozen)
}

//! Image container, file I/O, resampling and network-input normalization.
//!
//! Images are `H x W x 3` float rasters nominally in `[0, 1]`. Values are
//! allowed to leave that range while an optimization is running; they are
//! clamped only when a scale's output is finalized and when saving.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::kernels::BilinearPlan;
use crate::tensor::{sc, Scalar};

/// Per-channel mean of the pretraining corpus normalization.
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel standard deviation of the pretraining corpus normalization.
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Rec. 601 luma weights, used for grayscale conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// An `H x W x 3` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Wrap an `H x W x 3` array. Errors on empty dimensions, a channel
    /// count other than 3, or non-finite values.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::invalid_argument(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid_argument("image dimensions must be >= 1"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image contains NaN or Inf".into()));
        }
        Ok(Image { data })
    }

    /// Constant-valued image.
    pub fn constant(h: usize, w: usize, value: [f32; 3]) -> Self {
        let data = Array3::from_shape_fn((h, w, 3), |(_, _, c)| value[c]);
        Image { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            data: Array3::zeros((h, w, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Channel-major copy (`3 x H x W`) in the requested scalar type.
    pub fn to_chw<T: Scalar>(&self) -> Array3<T> {
        let (h, w, _) = self.data.dim();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| sc::<T>(self.data[(y, x, c)] as f64))
    }

    /// Build an image from a channel-major array, without clamping.
    pub fn from_chw<T: Scalar>(chw: &Array3<T>) -> Result<Self> {
        let (c, h, w) = chw.dim();
        if c != 3 {
            return Err(Error::invalid_argument(format!("expected 3 channels, got {c}")));
        }
        let data = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| chw[(ch, y, x)].f32());
        Image::new(data)
    }

    /// Clamp all values into `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Replace RGB with the Rec. 601 luma replicated across channels.
    pub fn to_grayscale(&self) -> Image {
        let (h, w, _) = self.data.dim();
        let data = Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
            LUMA[0] * self.data[(y, x, 0)]
                + LUMA[1] * self.data[(y, x, 1)]
                + LUMA[2] * self.data[(y, x, 2)]
        });
        Image { data }
    }

    /// True if all three channels are identical everywhere.
    pub fn is_grayscale(&self) -> bool {
        let (h, w, _) = self.data.dim();
        for y in 0..h {
            for x in 0..w {
                let r = self.data[(y, x, 0)];
                if self.data[(y, x, 1)] != r || self.data[(y, x, 2)] != r {
                    return false;
                }
            }
        }
        true
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f32 {
        self.data.mean().unwrap_or(0.0)
    }
}

/// Load a PNG or JPEG into `[0, 1]`. Single-channel files are replicated to
/// three identical channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynimg = image::open(path)?;
    let img = match dynimg {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
            });
            Image { data }
        }
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32).0[0] as f32 / 65535.0
            });
            Image { data }
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
            });
            Image { data }
        }
    };
    if !img.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: non-finite pixel", path.display())));
    }
    Ok(img)
}

/// Save as 8-bit PNG or JPEG (by extension), clamping to `[0, 1]` and
/// quantizing round-half-up.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, _) = img.data.dim();
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| quantize_u8(img.data[(y, x, c)]));
            buf.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Round-half-up quantization of a clamped unit-range value.
#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Bilinear resize to `h x w` (half-pixel-centered sampling, edge clamped).
pub fn resize(img: &Image, h: usize, w: usize) -> Result<Image> {
    if h == 0 || w == 0 {
        return Err(Error::invalid_argument("resize target must be >= 1x1"));
    }
    let (sh, sw, _) = img.data.dim();
    if (sh, sw) == (h, w) {
        return Ok(img.clone());
    }
    let plan = BilinearPlan::for_resize(sh, sw, h, w);
    let chw = img.to_chw::<f32>();
    let sampled = plan.gather(&chw); // (h*w, 3)
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| sampled[(y * w + x, c)]);
    Ok(Image { data })
}

/// Per-channel affine map `(x - mean_c) / std_c` expected by the pretrained
/// feature extractors.
pub fn normalize_for_network(img: &Image) -> Image {
    let data = img
        .data
        .indexed_iter()
        .map(|((_, _, c), v)| (v - NORM_MEAN[c]) / NORM_STD[c])
        .collect::<Vec<_>>();
    let (h, w, _) = img.data.dim();
    Image {
        data: Array3::from_shape_vec((h, w, 3), data).unwrap(),
    }
}

/// Inverse of [`normalize_for_network`].
pub fn denormalize_from_network(img: &Image) -> Image {
    let (h, w, _) = img.data.dim();
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        img.data[(y, x, c)] * NORM_STD[c] + NORM_MEAN[c]
    });
    Image { data }
}

/// RGB -> (luma, Cb, Cr) planes, full-range BT.601. Linear and exactly
/// invertible; used by the chroma-only ablation.
pub fn rgb_to_ycbcr(img: &Image) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let (h, w, _) = img.data.dim();
    let mut yp = Array2::zeros((h, w));
    let mut cb = Array2::zeros((h, w));
    let mut cr = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (
                img.data[(y, x, 0)],
                img.data[(y, x, 1)],
                img.data[(y, x, 2)],
            );
            yp[(y, x)] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb[(y, x)] = -0.168736 * r - 0.331264 * g + 0.5 * b;
            cr[(y, x)] = 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    }
    (yp, cb, cr)
}

/// Inverse of [`rgb_to_ycbcr`].
pub fn ycbcr_to_rgb(yp: &Array2<f32>, cb: &Array2<f32>, cr: &Array2<f32>) -> Image {
    let (h, w) = yp.dim();
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let (l, u, v) = (yp[(y, x)], cb[(y, x)], cr[(y, x)]);
        match c {
            0 => l + 1.402 * v,
            1 => l - 0.344136 * u - 0.714136 * v,
            _ => l + 1.772 * u,
        }
    });
    Image { data }
}

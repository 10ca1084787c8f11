//! Reference-based old photo colorization.
//!
//! Colorizes a grayscale photo from a single color reference by iteratively
//! optimizing the output image so that its deep-feature distribution aligns
//! with the reference's, while a structure-preserving mechanism (a
//! transformer-feature perceptual term plus a frozen-band Laplacian pyramid
//! parameterization) keeps the original content intact. The optimization runs
//! coarse-to-fine over multiple scales.

pub mod check;
pub mod error;
pub mod features;
pub mod graph;
pub mod img;
pub mod losses;
pub mod kernels;
pub mod metrics;
pub mod optimizer;

pub mod pyramid;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use img::{load_image, normalize_for_network, resize, save_image, Image};

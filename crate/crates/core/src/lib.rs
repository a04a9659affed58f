//! Segmentation-free license plate recognition built on deformable part
//! models.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`imaging`]: decoding, channel handling, cropping and resampling.
//! - [`hog`]: histogram-of-gradients cells and multi-scale feature pyramids.
//! - [`dpm`]: tree-structured part models, configuration scoring, the
//!   generalized distance transform and dynamic-programming inference.
//! - [`train`]: latent-SVM training with hard negative mining.
//! - [`synth`]: synthetic plate rendering and dataset generation.
//! - [`pipeline`]: plate localization and the plate assembly rules.
//! - [`eval`]: detection/recognition metrics and timing.
//! - [`cli`]: the `platedpm` command line front end.

pub mod cli;
pub mod dpm;
pub mod error;
pub mod eval;
pub mod hog;
pub mod imaging;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use imaging::{BoundingBox, ImageBuffer};

/// The 33 recognisable character classes: ten digits followed by the Latin
/// letters without `Q`, `W` and `X`.
pub const ALPHABET: &str = "0123456789ABCDEFGHIJKLMNOPRSTUVYZ";

/// Returns true if `c` is one of the 33 character classes.
pub fn in_alphabet(c: char) -> bool {
    ALPHABET.contains(c)
}

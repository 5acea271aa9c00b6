//! Image colorization with a conditional adversarial network.
//!
//! The crate is self-contained: a small dense-tensor engine with
//! reverse-mode differentiation ([`tensor`]), CIE L\*a\*b\* conversion
//! ([`colorspace`]), the U-Net generator, convolutional discriminator and
//! L1 baseline ([`networks`]), the training procedures ([`training`]),
//! dataset ingestion ([`data`]) and evaluation helpers ([`eval`]).

pub mod colorspace;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod networks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::{Rgb, RgbImage};
pub use tensor::Tensor;

//! Cross-scale three-branch decoder network for salient object detection,
//! trained from scratch on CPU with a small reverse-mode autograd engine.

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{CtdError, Result};

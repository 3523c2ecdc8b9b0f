//! Crafting adversarial WebAssembly binaries against image-based malware
//! classifiers.
//!
//! The pipeline inserts payload-carrying gadgets into a module, renders
//! the binary as a 100x100 greyscale image, runs a masked gradient attack
//! against a substitute CNN and writes the perturbation back into the
//! payload bytes.

pub mod attack;
pub mod cnn;
pub mod dataset;
pub mod error;
pub mod gadgets;
pub mod imaging;
pub mod report;
pub mod scalar;
pub mod wasm;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model = cnn::CnnModel<f64>;
pub type Image = imaging::GreyImage<f64>;
pub type Tensor = cnn::Tensor<f64>;
pub type EditMask = attack::EditMask<f64>;

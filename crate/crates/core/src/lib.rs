//! Sparse-view CT simulation and coarse-to-fine reconstruction with a
//! texture-guided diffusion bridge.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod dsb;
pub mod error;
pub mod experiment;
pub mod fanbeam;
pub mod formats;
pub mod image;
pub mod metrics;
pub mod networks;
pub mod noise;
pub mod optim;
pub mod phantoms;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{PtdError, Result};
pub use image::Image;
pub use tensor::Tensor;

//! Face super-resolution guided by rendered 3D morphable-model priors.
//!
//! Two cooperating branches built on a small reverse-mode tensor engine:
//!
//! * a render branch that regresses 239 morphable-model coefficients
//!   (identity 80, expression 64, texture 80, illumination 9, pose 6) from a
//!   low-resolution face and renders them into an explicit face prior, and
//! * a spatial-attention SR branch that consumes the rendered prior plus
//!   coefficient feature maps through spatial feature transform layers,
//!   residual channel attention blocks, and progressive transposed-conv
//!   upscaling.
//!
//! Everything runs on the CPU in `f32`; the gradient-check harness
//! instantiates the same generic kernels in `f64`.

pub mod adam;
pub mod bicubic;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod metrics;
pub mod morphable;
pub mod networks;
pub mod priors;
pub mod raster;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, VarId};
pub use tensor::{Real, Tensor};

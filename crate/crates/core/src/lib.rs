//! Flow-guided dynamic filtering (FGDF) and the FRMA refinement network for
//! joint video super-resolution and deblurring, with a synthetic degradation
//! simulator and a small training harness.

pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod conv;
pub mod dynfilter;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
mod linalg;
pub mod optim;
pub mod params;
pub mod resample;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod warp;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

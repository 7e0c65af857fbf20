//! Multi-task building extraction and height estimation on a self-contained
//! f64 autodiff core with selective state-space blocks.

pub mod blocks;
pub mod config;
pub mod error;
pub mod fpn;
pub mod gradcheck;
pub mod heads;
pub mod layers;
pub mod losses;
pub mod mam;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod render;
pub mod scan2d;
pub mod ssm;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

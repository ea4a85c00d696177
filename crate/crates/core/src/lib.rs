pub mod ablation;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod coord_query;
pub mod data;
pub mod decoders;
pub mod error;
pub mod ffc;
pub mod gradcheck;
pub mod image_io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param_gen;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

pub mod error;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamRole, ParamTensor, Tensor};
pub mod neuron;
pub mod config;
pub mod network;
pub mod oracle;
pub mod training;
pub mod data;
pub mod analysis;
pub mod checkpoint;

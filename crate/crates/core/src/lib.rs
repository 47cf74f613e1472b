pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod finetune;
pub mod interpolate;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod sketch;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type ScheduleF64 = schedule::NoiseSchedule<f64>;
pub type ScheduleF32 = schedule::NoiseSchedule<f32>;
pub type TapeF64 = autodiff::Tape<f64>;
pub type TapeF32 = autodiff::Tape<f32>;
pub type NetworkF64 = nn::Network<f64>;
pub type NetworkF32 = nn::Network<f32>;

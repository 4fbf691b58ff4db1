//! Task-driven enhancement of images degraded by rain and haze.

pub mod autograd;
pub mod checkpoint;
pub mod enhance;
pub mod error;
pub mod fie;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod task_head;
pub mod trainer;
pub mod tensor;
pub mod weather;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

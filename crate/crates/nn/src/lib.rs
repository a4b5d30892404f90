//! Scalar-generic tensors, reverse-mode autodiff and a few layers.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Models train in
//! `f32`; gradient checks instantiate the same code in `f64`.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Grads, Graph, Var};
pub use nn::{Conv2d, GroupNorm, Linear, ParamId, ParamStore};
pub use optim::Adam;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

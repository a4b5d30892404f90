//! Counterfactual trajectories through a latent diffusion model and concept
//! discovery over them: synthetic data, classifier, latent codec, diffusion,
//! guided counterfactuals, metrics, VAE and latent concept search.

pub mod classifier;
pub mod codec;
pub mod concepts;
pub mod counterfactual;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod seed;
pub mod util;
pub mod vae;

pub use ctraj_nn::{Scalar, Tensor};
pub use error::{Error, Result};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Classifier32 = classifier::Classifier<f32>;
pub type Classifier64 = classifier::Classifier<f64>;
pub type Codec32 = codec::Codec<f32>;
pub type Codec64 = codec::Codec<f64>;
pub type Diffusion32 = diffusion::DiffusionModel<f32>;
pub type Diffusion64 = diffusion::DiffusionModel<f64>;
pub type Vae32 = vae::Vae<f32>;
pub type Vae64 = vae::Vae<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;

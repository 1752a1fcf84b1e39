pub mod autograd;
pub mod checkpoint;
pub mod classify;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generate;
pub mod latent;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pe;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vae;

pub use autograd::{Gradients, Graph, Var};
pub use config::{AdapterKind, AdapterSpec, InfusionMode, LatentConstruction, ModelConfig};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use pe::TrainMode;
pub use tensor::Tensor;
pub use vae::AdaVae;

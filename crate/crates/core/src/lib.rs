pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod fixture;
pub mod gradcheck;
pub mod gradsuite;
pub mod image;
pub mod kernels;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Activation, ActivationKind, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Jcrnet, ModelConfig};
pub use params::{Ctx, ParamStore, Registry};
pub use tensor::{Real, Tensor};

pub mod autograd;
pub mod data;
pub mod dtw;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod hypergraph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

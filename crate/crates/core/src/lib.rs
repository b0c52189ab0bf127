pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod optim;
pub mod probe;
pub mod seeds;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod video;

pub use autograd::{GradStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

pub mod checkpoint;
pub mod lstm;
pub mod mlp;

pub use lstm::{Gate, LstmForwardCache, LstmGradBuffer, LstmGradients, LstmModel};
pub use mlp::{DenseLayer, MlpForwardCache, MlpGradBuffer, MlpGradients, MlpModel};

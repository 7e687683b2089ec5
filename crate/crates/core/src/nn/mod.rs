//! Minimal reverse-mode machinery for the small convolutional networks used by
//! the uncertainty model, the LR encoder and the noise predictor.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, LrSchedule, TrainConfig};
pub use params::{NamedTensor, NetworkParams, ParamGrads};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use params::ParamInit;
pub(crate) use tape::sigmoid;

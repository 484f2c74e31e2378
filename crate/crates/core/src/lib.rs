pub mod error;
pub mod tensor;
pub mod volume;
pub mod hierarchy;
pub mod network;
pub mod objective;
pub mod optim;
pub mod config;
pub mod checkpoint;
pub mod trainer;
pub mod probe;
pub mod checks;

pub use checkpoint::{Checkpoint, TrainState};
pub use config::{Preset, TrainConfig};
pub use error::{MimError, Result};
pub use tensor::{Graph, Tensor, Var};

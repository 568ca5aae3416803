//! Minimal reverse-mode tensor core and the recurrent reconstruction network.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod network;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{Gradients, Graph, Var};
pub use network::{
    convlstm_step, e2vid_forward, residual_block, BnRecord, BoundWeights, LstmState, LstmVars,
    Mode, ModelWeights, NetworkConfig, RecurrentState, ResidualVars, SkipMode, StepContext,
};
pub use tensor::Tensor4;

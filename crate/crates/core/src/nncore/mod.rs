//! Small dense numeric core shared by the neural modules.

mod gradcheck;
mod matrix;
pub mod ops;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use params::{
    load_checkpoint, save_checkpoint, AdamConfig, Grads, Param, ParamStore, CHECKPOINT_VERSION,
};

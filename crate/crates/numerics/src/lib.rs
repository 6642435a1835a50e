//! Small dense-tensor autodiff engine.
//!
//! Everything is `f64`. A [`Tape`] records one forward pass; parameters live
//! in a [`ParameterStore`] and are bound onto the tape per pass. After
//! [`Tape::backward`], gradients are copied back with
//! [`ParameterStore::absorb_grads`] and applied by
//! [`ParameterStore::adam_step`].

pub mod error;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use params::{load_checkpoint, save_checkpoint, AdamConfig, ParameterStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

/// Lower/upper clamp for probabilities entering `log`.
pub const PROB_EPS: f64 = 1e-7;

//! Core of the forgetting lab: a tiny autoregressive model with analytic
//! gradients, synthetic tasks, the diagonal-Fisher forgetting confidence,
//! the periodic unlearning trainer, evaluation metrics and a closed-form
//! linear-Gaussian oracle.

pub mod elicit;
pub mod error;
pub mod fisher;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod tasks;
pub mod trainer;

pub use error::{LwfError, Result};
pub use model::{Differentiable, Example, ParamVector, TinyLm, TinyLmConfig, Token};

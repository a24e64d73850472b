//! Reverse-mode differentiable kernel: the tape, MLP denoisers and Adam/EMA.

mod denoiser;
pub mod graph;
mod mlp;
mod optim;

pub use denoiser::{
    velocity_from_denoised, DenoiseFn, Denoiser, DenoiserConfig, Mode, Parameterization, Recorded,
    TimeEmbedding, VelocityEval, T_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{Activation, Dropout, Mlp};
pub use optim::{AdamConfig, OptimizerState, StepOutcome};

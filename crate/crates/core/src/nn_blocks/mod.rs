//! Network building blocks and the losses defined on their outputs.

mod attention;
mod block;
pub mod checkpoint;
mod decompose;
mod layers;
pub mod objective;
pub mod perceptual;
mod scln;
mod velocity;

pub use attention::{AttentionTrace, RetinexAttention, PRIOR_DIM, PRIOR_REX, TAU_MAX, TAU_MIN};
pub use block::{BlockOutput, FeedForward, ToyBlock, FFN_EXPANSION};
pub use checkpoint::{load_params, save_params};
pub use decompose::{fit_decomposition, reconstruction_error_on_tape, DecompositionNet};
pub use layers::{Conv3x3, Linear};
pub use objective::{teacher_objective, ObjectiveWeights, PhysicsParams, TeacherInputs, TeacherLoss};
pub use perceptual::FeatureExtractor;
pub use scln::{Scln, SCLN_EPS};
pub use velocity::VelocityPredictor;

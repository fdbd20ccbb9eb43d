use crate::autodiff::{Binding, ParamId, ParamSet, Tape, Var};
use crate::error::{shape_err, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

pub const SCLN_EPS: f64 = 1e-5;

/// Normalization by per-sample statistics over all of `(C,H,W)`, followed
/// by a learnable per-channel scale `γ`.
#[derive(Clone, Debug)]
pub struct Scln {
    pub gamma: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl Scln {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        Self { gamma, channels, eps: SCLN_EPS }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(shape_err("scln", format!("input {shape:?}, gamma length {}", self.channels)));
        }
        let y = self.normalize(tape, x)?;
        let g = tape.reshape(bind.var(self.gamma), &[1, self.channels, 1, 1])?;
        tape.mul(y, g)
    }

    /// The pre-γ part: `(x − μ)/sqrt(σ² + eps)` with per-sample `μ`, `σ²`.
    pub fn normalize<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        let flat = tape.reshape(x, &[shape[0], shape[1..].iter().product()])?;
        let n = tape.layer_norm(flat, 1, T::lit(self.eps))?;
        tape.reshape(n, &shape)
    }
}

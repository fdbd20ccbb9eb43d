//! Learnable anisotropic diffusion operator `A(I) = ∇·(c(|∇I|)∇I)` with
//! `c = exp(−|∇I|²/s²)`, and the texture and illumination losses on it.
//!
//! Discretization: forward differences for ∇ (last row/column 0) and the
//! negative adjoint, a backward difference, for ∇·. With this pair the
//! boundary carries zero flux and `Σ A(I) = 0` holds exactly.

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::ndtensor::{dims4, Tensor};
use crate::scalar::Scalar;

pub const S_MIN: f64 = 0.01;
pub const S_MAX: f64 = 1.0;
pub const S_INIT: f64 = 0.1;
const GRAD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionParams<T = f64> {
    pub s: T,
}

impl<T: Scalar> Default for DiffusionParams<T> {
    fn default() -> Self {
        Self { s: T::lit(S_INIT) }
    }
}

impl<T: Scalar> DiffusionParams<T> {
    /// `s` is clamped into `[0.01, 1]`.
    pub fn new(s: T) -> Self {
        Self { s: s.max(T::lit(S_MIN)).min(T::lit(S_MAX)) }
    }

    pub fn register(&self, params: &mut ParamSet<T>, name: &str) -> ParamId {
        params.add_bounded(name, Tensor::scalar(self.s), T::lit(S_MIN), T::lit(S_MAX))
    }
}

fn check_image<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let d = dims4(tape.value(x)?, op)?;
    if d[2] < 2 || d[3] < 2 {
        return Err(arg_err(op, format!("spatial dims {}x{} below 2x2", d[2], d[3])));
    }
    Ok(d)
}

/// Forward difference along `axis` (2 = rows, 3 = columns), zero in the last slot.
fn forward_diff<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(x)?;
    let n = shape[axis];
    let hi = tape.slice(x, axis, 1, n)?;
    let lo = tape.slice(x, axis, 0, n - 1)?;
    let d = tape.sub(hi, lo)?;
    let mut zshape = shape;
    zshape[axis] = 1;
    let z = tape.constant(Tensor::zeros(&zshape))?;
    tape.concat(&[d, z], axis)
}

/// `p[j] − p[j−1]` with `p[−1] = 0`.
fn backward_diff<T: Scalar>(tape: &mut Tape<T>, p: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(p)?;
    let n = shape[axis];
    let mut zshape = shape;
    zshape[axis] = 1;
    let z = tape.constant(Tensor::zeros(&zshape))?;
    let head = tape.slice(p, axis, 0, n - 1)?;
    let shifted = tape.concat(&[z, head], axis)?;
    tape.sub(p, shifted)
}

pub fn spatial_gradients_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    check_image(tape, x, "spatial_gradients")?;
    Ok((forward_diff(tape, x, 3)?, forward_diff(tape, x, 2)?))
}

/// `(gx, gy)` with `gx[i,j] = x[i,j+1] − x[i,j]` and `gy[i,j] = x[i+1,j] − x[i,j]`.
pub fn spatial_gradients<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone())?;
    let (gx, gy) = spatial_gradients_on_tape(&mut tape, v)?;
    Ok((tape.value(gx)?.clone(), tape.value(gy)?.clone()))
}

/// Records `A(x)` for a sensitivity `s` of shape `[1]`.
pub fn anisotropic_operator_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, s: Var) -> Result<Var> {
    let (gx, gy) = spatial_gradients_on_tape(tape, x)?;
    let gx2 = tape.square(gx)?;
    let gy2 = tape.square(gy)?;
    let mag2 = tape.add(gx2, gy2)?;
    let s2 = tape.square(s)?;
    let r = tape.div(mag2, s2)?;
    let r = tape.neg(r)?;
    let c = tape.exp(r)?;
    let fx = tape.mul(c, gx)?;
    let fy = tape.mul(c, gy)?;
    let dx = backward_diff(tape, fx, 3)?;
    let dy = backward_diff(tape, fy, 2)?;
    tape.add(dx, dy)
}

pub fn anisotropic_operator<T: Scalar>(x: &Tensor<T>, params: &DiffusionParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone())?;
    let s = tape.constant(Tensor::scalar(params.s))?;
    let a = anisotropic_operator_on_tape(&mut tape, v, s)?;
    Ok(tape.value(a)?.clone())
}

/// `mean |A(input) − A(r_pred)|`.
pub fn texture_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, input: Var, r_pred: Var, s: Var) -> Result<Var> {
    let (a, b) = (tape.shape(input)?, tape.shape(r_pred)?);
    if a != b {
        return Err(shape_err("texture_loss", format!("{a:?} vs {b:?}")));
    }
    let ai = anisotropic_operator_on_tape(tape, input, s)?;
    let ar = anisotropic_operator_on_tape(tape, r_pred, s)?;
    let d = tape.sub(ai, ar)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

pub fn texture_loss<T: Scalar>(input: &Tensor<T>, r_pred: &Tensor<T>, params: &DiffusionParams<T>) -> Result<T> {
    let mut tape = Tape::new();
    let i = tape.constant(input.clone())?;
    let r = tape.constant(r_pred.clone())?;
    let s = tape.constant(Tensor::scalar(params.s))?;
    let l = texture_loss_on_tape(&mut tape, i, r, s)?;
    tape.item(l)
}

/// `mean exp(−|∇L|)·(gx² + gy²)` with `|∇L| = sqrt(gx² + gy² + 1e-12)`.
pub fn illumination_smoothness_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, l: Var) -> Result<Var> {
    let [_, c, _, _] = check_image(tape, l, "illumination_smoothness_loss")?;
    if c != 1 {
        return Err(shape_err("illumination_smoothness_loss", format!("expected 1 channel, got {c}")));
    }
    let (gx, gy) = spatial_gradients_on_tape(tape, l)?;
    let gx2 = tape.square(gx)?;
    let gy2 = tape.square(gy)?;
    let g2 = tape.add(gx2, gy2)?;
    let mag = tape.add_scalar(g2, T::lit(GRAD_EPS))?;
    let mag = tape.sqrt(mag)?;
    let w = tape.neg(mag)?;
    let w = tape.exp(w)?;
    let e = tape.mul(w, g2)?;
    tape.mean(e)
}

pub fn illumination_smoothness_loss<T: Scalar>(l: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.constant(l.clone())?;
    let out = illumination_smoothness_loss_on_tape(&mut tape, v)?;
    tape.item(out)
}

use crate::autodiff::{Binding, ParamId, ParamSet, Tape, Var};
use crate::error::{shape_err, Result};
use crate::ndtensor::{Rng, Tensor};
use crate::scalar::Scalar;

/// Dense layer `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Weights `N(0, gain²/in)`, zero bias.
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, inp: usize, out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (inp as f64).sqrt();
        let w = ps.add(format!("{name}.w"), rng.normal_tensor::<T>(&[inp, out]).scale(T::lit(std)));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out]));
        Self { w, b, inp, out }
    }

    pub fn zeroed<T: Scalar>(ps: &mut ParamSet<T>, name: &str, inp: usize, out: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[inp, out]));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out]));
        Self { w, b, inp, out }
    }

    /// `x` is `(..., in)`; leading dims are flattened and restored.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        let last = *shape.last().unwrap_or(&0);
        if last != self.inp {
            return Err(shape_err("linear", format!("input {shape:?}, expected last dim {}", self.inp)));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, self.inp])? };
        let y = tape.matmul(flat, bind.var(self.w))?;
        let y = tape.add(y, bind.var(self.b))?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out;
        tape.reshape(y, &out_shape)
    }

    /// Per-pixel application on `(B, in, H, W)`, i.e. a 1×1 convolution.
    pub fn forward_pixels<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(tape, bind, y)?;
        tape.permute(y, &[0, 3, 1, 2])
    }
}

/// 3×3 convolution, stride 1, zero padding 1, with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Conv3x3 {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, inp: usize, out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / ((inp * 9) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), rng.normal_tensor::<T>(&[out, inp, 3, 3]).scale(T::lit(std)));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out]));
        Self { w, b, inp, out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv2d_3x3(x, bind.var(self.w))?;
        let b = tape.reshape(bind.var(self.b), &[1, self.out, 1, 1])?;
        tape.add(y, b)
    }
}

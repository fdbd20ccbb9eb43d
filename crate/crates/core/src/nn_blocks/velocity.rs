use crate::autodiff::{Binding, ParamSet, Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::ndtensor::{Rng, Tensor};
use crate::scalar::Scalar;

use super::Linear;

pub const RES_BLOCKS: usize = 5;
const SLOPE: f64 = 0.1;

/// Residual MLP over `[c; t/t_max; x_t]`:
/// `Linear(2D+1 → H)`, LeakyReLU(0.1), five blocks `h + LeakyReLU(Linear(h))`,
/// then `Linear(H → D)`.
#[derive(Clone, Debug)]
pub struct VelocityPredictor {
    pub feature_dim: usize,
    pub hidden: usize,
    pub t_max: usize,
    pub input: Linear,
    pub blocks: Vec<Linear>,
    pub head: Linear,
}

impl VelocityPredictor {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        t_max: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if t_max == 0 || feature_dim == 0 || hidden == 0 {
            return Err(arg_err("velocity_predictor", "dimensions and t_max must be positive"));
        }
        let g = (2.0 / (1.0 + SLOPE * SLOPE)).sqrt();
        let input = Linear::new(ps, &format!("{name}.in"), 2 * feature_dim + 1, hidden, g, rng);
        // Small residual branches keep the stack near identity at init.
        let blocks = (0..RES_BLOCKS)
            .map(|i| Linear::new(ps, &format!("{name}.res{i}"), hidden, hidden, 0.5, rng))
            .collect();
        let head = Linear::new(ps, &format!("{name}.head"), hidden, feature_dim, 0.1, rng);
        Ok(Self { feature_dim, hidden, t_max, input, blocks, head })
    }

    pub fn input_dim(&self) -> usize {
        2 * self.feature_dim + 1
    }

    /// `x_t`, `c`: `(B, D)`; `t_idx[i] ∈ 0..=t_max`. Returns `(B, D)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x_t: Var, t_idx: &[usize], c: Var) -> Result<Var> {
        let (xs, cs) = (tape.shape(x_t)?, tape.shape(c)?);
        let b = t_idx.len();
        if xs != [b, self.feature_dim] || cs != [b, self.feature_dim] {
            return Err(shape_err(
                "velocity_forward",
                format!("x_t {xs:?}, c {cs:?}, {b} timesteps, feature dim {}", self.feature_dim),
            ));
        }
        if let Some(&t) = t_idx.iter().find(|&&t| t > self.t_max) {
            return Err(arg_err("velocity_forward", format!("timestep {t} outside 0..={}", self.t_max)));
        }
        let tmax = T::from_usize_lossy(self.t_max);
        let t_norm = Tensor::from_vec(t_idx.iter().map(|&t| T::from_usize_lossy(t) / tmax).collect()).reshape(&[b, 1])?;
        let t_norm = tape.constant(t_norm)?;
        let inp = tape.concat(&[c, t_norm, x_t], 1)?;
        let mut h = self.input.forward(tape, bind, inp)?;
        h = tape.leaky_relu(h, T::lit(SLOPE))?;
        for blk in &self.blocks {
            let r = blk.forward(tape, bind, h)?;
            let r = tape.leaky_relu(r, T::lit(SLOPE))?;
            h = tape.add(h, r)?;
        }
        self.head.forward(tape, bind, h)
    }

    /// Gradient-free evaluation.
    pub fn predict<T: Scalar>(&self, ps: &ParamSet<T>, x_t: &Tensor<T>, t_idx: &[usize], c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape)?;
        let x = tape.constant(x_t.clone())?;
        let cv = tape.constant(c.clone())?;
        let y = self.forward(&mut tape, &bind, x, t_idx, cv)?;
        Ok(tape.value(y)?.clone())
    }
}

//! Retinex-conditioned attention with normalized queries and keys.
//!
//! Channels split 3:1 into a reflectance part and an illumination part.
//! The 256-long prior vector is split 192/64 and projected to per-channel
//! modulations of each part (`x·k_v + x`). Queries come from the
//! reflectance channels, keys and values from the illumination channels.
//! Tokens are spatial positions. Per head, Q and K are layer-normalized and
//! then L2-normalized, so each logit `Q̂·K̂ᵀ/√d·τ` lies in `[−|τ|/√d, |τ|/√d]`.

use crate::autodiff::{Binding, ParamId, ParamSet, Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::ndtensor::{Rng, Tensor};
use crate::scalar::Scalar;

use super::Linear;

pub const PRIOR_DIM: usize = 256;
pub const PRIOR_REX: usize = 192;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
const QK_LN_EPS: f64 = 1e-5;
const QK_L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RetinexAttention {
    pub channels: usize,
    pub heads: usize,
    pub cond_r: Linear,
    pub cond_i: Linear,
    pub wq: Linear,
    pub wkv: Linear,
    pub wo: Linear,
    pub tau: ParamId,
}

/// Intermediate values exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub out: Var,
    /// `(B·heads, N, N)` pre-softmax logits.
    pub logits: Var,
    /// `(B·heads, N, N)` attention weights.
    pub weights: Var,
    /// `(B·heads, N, d)` values.
    pub values: Var,
}

impl RetinexAttention {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(4 * heads) {
            return Err(arg_err(
                "qk_normalized_attention",
                format!("{channels} channels not divisible by 4·{heads} heads"),
            ));
        }
        let cr = 3 * channels / 4;
        let ci = channels / 4;
        Ok(Self {
            channels,
            heads,
            cond_r: Linear::new(ps, &format!("{name}.cond_r"), PRIOR_REX, cr, 0.1, rng),
            cond_i: Linear::new(ps, &format!("{name}.cond_i"), PRIOR_DIM - PRIOR_REX, ci, 0.1, rng),
            wq: Linear::new(ps, &format!("{name}.wq"), cr, channels, 1.0, rng),
            wkv: Linear::new(ps, &format!("{name}.wkv"), ci, 2 * channels, 1.0, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), channels, channels, 1.0, rng),
            tau: ps.add_bounded(format!("{name}.tau"), Tensor::scalar(T::one()), T::lit(TAU_MIN), T::lit(TAU_MAX)),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// `x (B,C,H,W)`, `ipr (B,256)` → `(B,C,H,W)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var, ipr: Var) -> Result<Var> {
        Ok(self.trace(tape, bind, x, ipr)?.out)
    }

    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var, ipr: Var) -> Result<AttentionTrace> {
        let shape = tape.shape(x)?;
        let &[b, c, h, w] = shape.as_slice() else {
            return Err(shape_err("qk_normalized_attention", format!("expected (B,C,H,W), got {shape:?}")));
        };
        if c != self.channels {
            return Err(shape_err("qk_normalized_attention", format!("{c} channels, expected {}", self.channels)));
        }
        let ps = tape.shape(ipr)?;
        if ps != [b, PRIOR_DIM] {
            return Err(shape_err("qk_normalized_attention", format!("prior {ps:?}, expected [{b}, {PRIOR_DIM}]")));
        }
        let (cr, n, nh, d) = (3 * c / 4, h * w, self.heads, self.head_dim());

        let p_r = tape.slice(ipr, 1, 0, PRIOR_REX)?;
        let p_i = tape.slice(ipr, 1, PRIOR_REX, PRIOR_DIM)?;
        let k_r = self.cond_r.forward(tape, bind, p_r)?;
        let k_r = tape.reshape(k_r, &[b, cr, 1, 1])?;
        let k_i = self.cond_i.forward(tape, bind, p_i)?;
        let k_i = tape.reshape(k_i, &[b, c - cr, 1, 1])?;

        let x_r = tape.slice(x, 1, 0, cr)?;
        let x_i = tape.slice(x, 1, cr, c)?;
        let m_r = tape.mul(x_r, k_r)?;
        let x_r = tape.add(m_r, x_r)?;
        let m_i = tape.mul(x_i, k_i)?;
        let x_i = tape.add(m_i, x_i)?;

        // (B, C', H, W) → (B, N, C')
        let tok_r = tape.reshape(x_r, &[b, cr, n])?;
        let tok_r = tape.permute(tok_r, &[0, 2, 1])?;
        let tok_i = tape.reshape(x_i, &[b, c - cr, n])?;
        let tok_i = tape.permute(tok_i, &[0, 2, 1])?;

        let q = self.wq.forward(tape, bind, tok_r)?;
        let kv = self.wkv.forward(tape, bind, tok_i)?;
        let k = tape.slice(kv, 2, 0, c)?;
        let v = tape.slice(kv, 2, c, 2 * c)?;

        let split = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
            let t = tape.reshape(t, &[b, n, nh, d])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            tape.reshape(t, &[b * nh, n, d])
        };
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let q = tape.layer_norm(q, 2, T::lit(QK_LN_EPS))?;
        let q = tape.l2_normalize(q, 2, T::lit(QK_L2_EPS))?;
        let k = tape.layer_norm(k, 2, T::lit(QK_LN_EPS))?;
        let k = tape.l2_normalize(k, 2, T::lit(QK_L2_EPS))?;

        let kt = tape.permute(k, &[0, 2, 1])?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, T::one() / T::from_usize_lossy(d).sqrt())?;
        let logits = tape.mul(logits, bind.var(self.tau))?;
        let weights = tape.softmax(logits, 2)?;
        let o = tape.matmul(weights, v)?;

        let o = tape.reshape(o, &[b, nh, n, d])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, n, c])?;
        let o = self.wo.forward(tape, bind, o)?;
        let o = tape.permute(o, &[0, 2, 1])?;
        let out = tape.reshape(o, &[b, c, h, w])?;
        Ok(AttentionTrace { out, logits, weights, values: v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check_module, FdConfig};

    fn setup(c: usize, heads: usize, seed: u64) -> (ParamSet<f64>, RetinexAttention, Rng) {
        let mut rng = Rng::new(seed);
        let mut ps = ParamSet::new();
        let a = RetinexAttention::new(&mut ps, "attn", c, heads, &mut rng).unwrap();
        (ps, a, rng)
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(0);
        assert!(RetinexAttention::new(&mut ps, "a", 12, 2, &mut rng).is_err());
        assert!(RetinexAttention::new(&mut ps, "a", 16, 2, &mut rng).is_ok());
    }

    #[test]
    fn single_token_passes_projected_values() {
        let (ps, a, mut rng) = setup(8, 2, 1);
        let mut t = Tape::new();
        let b = ps.bind(&mut t).unwrap();
        let x = t.constant(rng.normal_tensor(&[2, 8, 1, 1])).unwrap();
        let ipr = t.constant(rng.normal_tensor(&[2, 256])).unwrap();
        let tr = a.trace(&mut t, &b, x, ipr).unwrap();
        assert!(t.value(tr.weights).unwrap().data().iter().all(|&w| w == 1.0));
        // out == Wo applied to the head-merged values
        let v = t.reshape(tr.values, &[2, 2, 1, 4]).unwrap();
        let v = t.permute(v, &[0, 2, 1, 3]).unwrap();
        let v = t.reshape(v, &[2, 1, 8]).unwrap();
        let pv = a.wo.forward(&mut t, &b, v).unwrap();
        let pv = t.reshape(pv, &[2, 8, 1, 1]).unwrap();
        let diff = t.value(pv).unwrap().sub(t.value(tr.out).unwrap()).unwrap();
        assert!(diff.max_abs() < 1e-14);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let (ps, a, mut rng) = setup(8, 2, 2);
        let mut x: Tensor<f64> = rng.normal_tensor(&[1, 8, 1, 2]);
        // illumination channels (6, 7) equal at both tokens ⇒ identical keys
        for ch in 6..8 {
            let v = x.data()[ch * 2];
            x.data_mut()[ch * 2 + 1] = v;
        }
        let mut t = Tape::new();
        let b = ps.bind(&mut t).unwrap();
        let xv = t.constant(x).unwrap();
        let ipr = t.constant(rng.normal_tensor(&[1, 256])).unwrap();
        let tr = a.trace(&mut t, &b, xv, ipr).unwrap();
        for &w in t.value(tr.weights).unwrap().data() {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn logits_bounded_and_rows_normalized() {
        for (seed, tau) in [(3u64, 1.0), (4, 7.5), (5, 0.02)] {
            let (mut ps, a, mut rng) = setup(16, 2, seed);
            ps.get_mut(a.tau).value = Tensor::scalar(tau);
            let mut t = Tape::new();
            let b = ps.bind(&mut t).unwrap();
            let x = t.constant(rng.normal_tensor::<f64>(&[2, 16, 4, 4]).scale(10.0)).unwrap();
            let ipr = t.constant(rng.normal_tensor(&[2, 256])).unwrap();
            let tr = a.trace(&mut t, &b, x, ipr).unwrap();
            let bound = tau / (a.head_dim() as f64).sqrt();
            assert!(t.value(tr.logits).unwrap().max_abs() <= bound * (1.0 + 1e-12));
            let rows = t.value(tr.weights).unwrap().sum_axes(&[2]).unwrap();
            assert!(rows.data().iter().all(|r| (r - 1.0).abs() < 1e-10));
            assert_eq!(t.shape(tr.out).unwrap(), vec![2, 16, 4, 4]);
        }
    }

    #[test]
    fn fd_check_attention() {
        for seed in 0..5 {
            let (ps, a, mut rng) = setup(8, 2, 10 + seed);
            let x: Tensor<f64> = rng.normal_tensor(&[1, 8, 2, 2]);
            let ipr: Tensor<f64> = rng.normal_tensor(&[1, 256]);
            let w: Tensor<f64> = rng.normal_tensor(&[1, 8, 2, 2]);
            let cfg = FdConfig { max_coords: Some(40), seed, ..FdConfig::default() };
            let r = fd_check_module("attention", &ps, &[x, ipr], &cfg, |t, b, v| {
                let y = a.forward(t, b, v[0], v[1])?;
                let wv = t.constant(w.clone())?;
                let y = t.mul(y, wv)?;
                t.sum(y)
            })
            .unwrap();
            assert!(r.pass, "seed {seed}: {}", r.max_rel_err());
        }
    }
}

use crate::autodiff::{Binding, ParamSet, Tape, Var};
use crate::error::Result;
use crate::ndtensor::Rng;
use crate::scalar::Scalar;

use super::{Linear, RetinexAttention, Scln};

pub const FFN_EXPANSION: f64 = 2.66;
const FFN_SLOPE: f64 = 0.1;

/// Pointwise two-layer feed-forward net with hidden width `⌊C·2.66⌋`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize, rng: &mut Rng) -> Self {
        let hidden = (channels as f64 * FFN_EXPANSION).floor() as usize;
        Self {
            up: Linear::new(ps, &format!("{name}.up"), channels, hidden, 2f64.sqrt(), rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, channels, 1.0, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let h = self.up.forward_pixels(tape, bind, x)?;
        let h = tape.leaky_relu(h, T::lit(FFN_SLOPE))?;
        self.down.forward_pixels(tape, bind, h)
    }
}

/// `y = x + Attn(SCLN(x))`, then `y + FFN(SCLN(y))`.
#[derive(Clone, Debug)]
pub struct ToyBlock {
    pub norm1: Scln,
    pub attn: RetinexAttention,
    pub norm2: Scln,
    pub ffn: FeedForward,
}

/// Block output plus the two residual-stream activations.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub post_attn: Var,
    pub out: Var,
}

impl ToyBlock {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm1: Scln::new(ps, &format!("{name}.norm1"), channels),
            attn: RetinexAttention::new(ps, &format!("{name}.attn"), channels, heads, rng)?,
            norm2: Scln::new(ps, &format!("{name}.norm2"), channels),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), channels, rng),
        })
    }

    /// Zeroes the attention and FFN output projections, making the block the identity.
    pub fn zero_output_projections<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        for id in [self.attn.wo.w, self.attn.wo.b, self.ffn.down.w, self.ffn.down.b] {
            let p = ps.get_mut(id);
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var, ipr: Var) -> Result<BlockOutput> {
        let n1 = self.norm1.forward(tape, bind, x)?;
        let a = self.attn.forward(tape, bind, n1, ipr)?;
        let post_attn = tape.add(x, a)?;
        let n2 = self.norm2.forward(tape, bind, post_attn)?;
        let f = self.ffn.forward(tape, bind, n2)?;
        let out = tape.add(post_attn, f)?;
        Ok(BlockOutput { post_attn, out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check_module, FdConfig};
    use crate::ndtensor::Tensor;

    #[test]
    fn hidden_width() {
        let mut ps = ParamSet::<f64>::new();
        let f = FeedForward::new(&mut ps, "f", 16, &mut Rng::new(0));
        assert_eq!(f.up.out, 42);
    }

    #[test]
    fn zero_projections_give_identity() {
        let mut rng = Rng::new(4);
        let mut ps = ParamSet::<f64>::new();
        let blk = ToyBlock::new(&mut ps, "b", 16, 2, &mut rng).unwrap();
        blk.zero_output_projections(&mut ps);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 16, 8, 8]);
        let mut t = Tape::new();
        let b = ps.bind(&mut t).unwrap();
        let xv = t.constant(x.clone()).unwrap();
        let ipr = t.constant(rng.normal_tensor(&[1, 256])).unwrap();
        let y = blk.forward(&mut t, &b, xv, ipr).unwrap();
        assert_eq!(t.value(y.out).unwrap(), &x);
    }

    #[test]
    fn shape_preserved() {
        let mut rng = Rng::new(5);
        let mut ps = ParamSet::<f64>::new();
        let blk = ToyBlock::new(&mut ps, "b", 16, 2, &mut rng).unwrap();
        let mut t = Tape::new();
        let b = ps.bind(&mut t).unwrap();
        let xv = t.constant(rng.normal_tensor(&[1, 16, 8, 8])).unwrap();
        let ipr = t.constant(rng.normal_tensor(&[1, 256])).unwrap();
        let y = blk.forward(&mut t, &b, xv, ipr).unwrap();
        assert_eq!(t.shape(y.out).unwrap(), vec![1, 16, 8, 8]);
    }

    #[test]
    fn fd_check_block() {
        for seed in 0..5 {
            let mut rng = Rng::new(20 + seed);
            let mut ps = ParamSet::<f64>::new();
            let blk = ToyBlock::new(&mut ps, "b", 8, 2, &mut rng).unwrap();
            let x: Tensor<f64> = rng.normal_tensor(&[1, 8, 4, 4]);
            let ipr: Tensor<f64> = rng.normal_tensor(&[1, 256]);
            let w: Tensor<f64> = rng.normal_tensor(&[1, 8, 4, 4]);
            let cfg = FdConfig { max_coords: Some(30), seed, ..FdConfig::default() };
            let r = fd_check_module("toy_block", &ps, &[x, ipr], &cfg, |t, b, v| {
                let y = blk.forward(t, b, v[0], v[1])?.out;
                let wv = t.constant(w.clone())?;
                let y = t.mul(y, wv)?;
                t.sum(y)
            })
            .unwrap();
            assert!(r.pass, "seed {seed}: {}", r.max_rel_err());
        }
    }
}

//! Perceptual and Gram-matrix style losses over a frozen, seeded random
//! convolutional feature extractor.

use crate::error::{arg_err, shape_err, Result};
use crate::autodiff::{Tape, Var};
use crate::ndtensor::{Rng, Tensor};
use crate::scalar::Scalar;

/// Fixed stack of 3×3 conv + ReLU layers. Weights are plain tensors
/// recorded as constants, so no gradient reaches them.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T = f64> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
    /// Per-layer weight λ_l in the perceptual loss.
    pub layer_weights: Vec<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// `3 → width → … → width` with `layers` layers, He-scaled normal weights.
    pub fn seeded(seed: u64, layers: usize, width: usize) -> Result<Self> {
        if layers < 2 {
            return Err(arg_err("feature_extractor", "need at least two layers"));
        }
        let mut rng = Rng::new(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for _ in 0..layers {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            weights.push(rng.normal_tensor::<T>(&[width, cin, 3, 3]).scale(T::lit(std)));
            biases.push(rng.normal_tensor::<T>(&[1, width, 1, 1]).scale(T::lit(0.05)));
            cin = width;
        }
        Ok(Self { weights, biases, layer_weights: vec![T::one(); layers] })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wv = tape.constant(w.clone())?;
            let bv = tape.constant(b.clone())?;
            h = tape.conv2d_3x3(h, wv)?;
            h = tape.add(h, bv)?;
            h = tape.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, a: &[Var], b: &[Var], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("{} vs {} layers", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        let (sx, sy) = (tape.shape(*x)?, tape.shape(*y)?);
        if sx != sy {
            return Err(shape_err(op, format!("{sx:?} vs {sy:?}")));
        }
    }
    Ok(())
}

/// `Σ_l λ_l · mean (φ_l(pred) − φ_l(gt))²` from precomputed features.
pub fn perceptual_from_features<T: Scalar>(tape: &mut Tape<T>, fp: &[Var], fg: &[Var], lambdas: &[T]) -> Result<Var> {
    check_pair(tape, fp, fg, "perceptual_loss")?;
    if lambdas.len() != fp.len() {
        return Err(shape_err("perceptual_loss", "layer weight count differs from layer count"));
    }
    let mut total = tape.scalar(T::zero())?;
    for ((&a, &b), &lam) in fp.iter().zip(fg).zip(lambdas) {
        let d = tape.sub(a, b)?;
        let d = tape.square(d)?;
        let m = tape.mean(d)?;
        let m = tape.scale(m, lam)?;
        total = tape.add(total, m)?;
    }
    Ok(total)
}

/// `G = φφᵀ / (C·H·W)` per sample, shape `(B, C, C)`.
pub fn gram_on_tape<T: Scalar>(tape: &mut Tape<T>, phi: Var) -> Result<Var> {
    let s = tape.shape(phi)?;
    let &[b, c, h, w] = s.as_slice() else {
        return Err(shape_err("gram", format!("expected (B,C,H,W), got {s:?}")));
    };
    let f = tape.reshape(phi, &[b, c, h * w])?;
    let ft = tape.permute(f, &[0, 2, 1])?;
    let g = tape.matmul(f, ft)?;
    tape.scale(g, T::one() / T::from_usize_lossy(c * h * w))
}

/// `Σ_l` batch-mean of `‖G_l(pred) − G_l(gt)‖_F²`.
pub fn style_from_features<T: Scalar>(tape: &mut Tape<T>, fp: &[Var], fg: &[Var]) -> Result<Var> {
    check_pair(tape, fp, fg, "style_loss")?;
    let mut total = tape.scalar(T::zero())?;
    for (&a, &b) in fp.iter().zip(fg) {
        let batch = tape.shape(a)?[0];
        let ga = gram_on_tape(tape, a)?;
        let gb = gram_on_tape(tape, b)?;
        let d = tape.sub(ga, gb)?;
        let d = tape.square(d)?;
        let s = tape.sum(d)?;
        let s = tape.scale(s, T::one() / T::from_usize_lossy(batch))?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

pub fn perceptual_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, ex: &FeatureExtractor<T>) -> Result<Var> {
    let fp = ex.features(tape, pred)?;
    let fg = ex.features(tape, gt)?;
    perceptual_from_features(tape, &fp, &fg, &ex.layer_weights)
}

pub fn style_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, ex: &FeatureExtractor<T>) -> Result<Var> {
    let fp = ex.features(tape, pred)?;
    let fg = ex.features(tape, gt)?;
    style_from_features(tape, &fp, &fg)
}

pub fn perceptual_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, ex: &FeatureExtractor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let (p, g) = (tape.constant(pred.clone())?, tape.constant(gt.clone())?);
    let l = perceptual_loss_on_tape(&mut tape, p, g, ex)?;
    tape.item(l)
}

pub fn style_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, ex: &FeatureExtractor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let (p, g) = (tape.constant(pred.clone())?, tape.constant(gt.clone())?);
    let l = style_loss_on_tape(&mut tape, p, g, ex)?;
    tape.item(l)
}

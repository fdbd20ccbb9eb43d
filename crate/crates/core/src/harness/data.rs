//! Procedural low-light pairs: `gt = R ⊙ L` from a textured reflectance and
//! a smooth illumination field, `lq = gt·dim + noise`.

use std::f64::consts::TAU;

use crate::error::{arg_err, Result};
use crate::ndtensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    /// Degraded image `(3, S, S)`.
    pub lq: Tensor<f64>,
    /// Clean image `(3, S, S)`.
    pub gt: Tensor<f64>,
}

fn one_pair(rng: &mut Rng, s: usize) -> ImagePair {
    let base: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.3, 0.9)).collect();
    let mut waves = [[0.0; 4]; 2];
    for w in &mut waves {
        *w = [rng.uniform_range(0.5, 3.0), rng.uniform_range(0.5, 3.0), rng.uniform_range(0.0, TAU), rng.uniform_range(0.03, 0.1)];
    }
    let (ia, ib, ip) = (rng.uniform_range(0.2, 1.0), rng.uniform_range(0.2, 1.0), rng.uniform_range(0.0, TAU));
    let dim = rng.uniform_range(0.15, 0.4);
    let n = s as f64;
    let gt = Tensor::from_fn(&[3, s, s], |i| {
        let (y, x) = (i[1] as f64 / n, i[2] as f64 / n);
        let tex: f64 = waves.iter().map(|w| w[3] * (TAU * (w[0] * x + w[1] * y) + w[2] + i[0] as f64).sin()).sum();
        let r = (base[i[0]] + tex).clamp(0.0, 1.0);
        let l = 0.65 + 0.3 * (ia * x * TAU / 2.0 + ib * y * TAU / 2.0 + ip).sin();
        r * l
    });
    let noise = rng.normal_tensor::<f64>(&[3, s, s]);
    let lq = gt.zip_with(&noise, |v, e| (v * dim + 0.01 * e).clamp(0.0, 1.0)).expect("same shape");
    ImagePair { lq, gt }
}

/// `n` pairs of size `(3, S, S)` with values in `[0, 1]`.
pub fn synth_dataset(rng: &mut Rng, n: usize, image_size: usize) -> Result<Vec<ImagePair>> {
    if n == 0 || image_size == 0 {
        return Err(arg_err("synth_dataset", "need n > 0 and a positive image size"));
    }
    Ok((0..n).map(|_| one_pair(rng, image_size)).collect())
}

/// Stacks the selected pairs into `(B, 3, S, S)` batches `(lq, gt)`.
pub fn stack_pairs(pairs: &[ImagePair], idx: &[usize]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let lq: Vec<&Tensor<f64>> = idx.iter().map(|&i| &pairs[i].lq).collect();
    let gt: Vec<&Tensor<f64>> = idx.iter().map(|&i| &pairs[i].gt).collect();
    Ok((stack(&lq)?, stack(&gt)?))
}

fn stack(items: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
    let Some(first) = items.first() else {
        return Err(arg_err("stack_pairs", "empty selection"));
    };
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let data: Vec<f64> = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

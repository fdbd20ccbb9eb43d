//! Small fixed demonstrations of the physics operators.

use serde::Serialize;

use crate::aniso_diffusion::{anisotropic_operator, DiffusionParams};
use crate::error::{arg_err, Result};
use crate::ndtensor::{Rng, Tensor};

pub const DEMO_SIZE: usize = 32;
const EDGE_LO: f64 = 0.2;
const EDGE_HI: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiffusionRow {
    pub iteration: usize,
    pub mean: f64,
    /// Mean of the right half minus mean of the left half.
    pub edge_contrast: f64,
    /// Standard deviation of the left flat region, excluding the edge columns.
    pub flat_std: f64,
}

/// Noisy vertical step edge, `(1,1,S,S)`.
pub fn noisy_edge(seed: u64, noise: f64) -> Tensor<f64> {
    let e = Rng::new(seed).normal_tensor::<f64>(&[1, 1, DEMO_SIZE, DEMO_SIZE]);
    Tensor::from_fn(&[1, 1, DEMO_SIZE, DEMO_SIZE], |i| {
        let base = if i[3] < DEMO_SIZE / 2 { EDGE_LO } else { EDGE_HI };
        base + noise * e.data()[i[2] * DEMO_SIZE + i[3]]
    })
}

fn row(iteration: usize, x: &Tensor<f64>) -> DiffusionRow {
    let (n, half) = (DEMO_SIZE, DEMO_SIZE / 2);
    let d = x.data();
    let (mut left, mut right) = (0.0, 0.0);
    let mut flat = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let v = d[r * n + c];
            if c < half {
                left += v;
                if c < half - 2 {
                    flat.push(v);
                }
            } else {
                right += v;
            }
        }
    }
    let cells = (n * half) as f64;
    let fm = flat.iter().sum::<f64>() / flat.len() as f64;
    let flat_std = (flat.iter().map(|v| (v - fm).powi(2)).sum::<f64>() / flat.len() as f64).sqrt();
    DiffusionRow { iteration, mean: x.mean(), edge_contrast: (right - left) / cells, flat_std }
}

/// Explicit diffusion `x ← x + dt·A(x)` on [`noisy_edge`]; one row per
/// iteration including the starting state.
pub fn diffusion_demo(iterations: usize, s: f64, dt: f64, seed: u64) -> Result<Vec<DiffusionRow>> {
    if !(dt > 0.0 && dt <= 0.25) {
        return Err(arg_err("diffusion_demo", "dt must lie in (0, 0.25] for a stable explicit step"));
    }
    let params = DiffusionParams::new(s);
    let mut x = noisy_edge(seed, 0.05);
    let mut rows = vec![row(0, &x)];
    for it in 1..=iterations {
        let a = anisotropic_operator(&x, &params)?;
        x = x.add(&a.scale(dt))?;
        rows.push(row(it, &x));
    }
    Ok(rows)
}

//! Feature distillation loss with cross-normalization by student statistics,
//! percentile outlier masking and resolution/layer weighting, gated to the
//! low-noise part of the schedule.

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::ndtensor::{dims4, mean_std, percentile_abs, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct FeatureLayer<T = f64> {
    pub name: String,
    /// `(B, C, H, W)`.
    pub features: Tensor<T>,
    pub weight: f64,
}

/// Ordered per-layer features; teacher and student bundles align by name.
#[derive(Clone, Debug, Default)]
pub struct FeatureBundle<T = f64> {
    pub layers: Vec<FeatureLayer<T>>,
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, features: Tensor<T>, weight: f64) -> &mut Self {
        self.layers.push(FeatureLayer { name: name.into(), features, weight });
        self
    }

    pub fn single(features: Tensor<T>) -> Self {
        let mut b = Self::new();
        b.push("layer0", features, 1.0);
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlexConfig {
    pub percentile: f64,
    pub base_res: (usize, usize),
    pub weight_floor: f64,
    pub exponent: f64,
    pub eps: f64,
    pub snr_threshold: f64,
    pub t_max: usize,
}

impl Default for FlexConfig {
    fn default() -> Self {
        Self {
            percentile: 0.95,
            base_res: (64, 64),
            weight_floor: 0.1,
            exponent: 0.25,
            eps: 1e-6,
            snr_threshold: 0.4,
            t_max: 4,
        }
    }
}

impl FlexConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(arg_err("flex_config", format!("percentile {} outside (0, 1]", self.percentile)));
        }
        if !(self.weight_floor > 0.0) || !(self.eps > 0.0) {
            return Err(arg_err("flex_config", "weight floor and eps must be positive"));
        }
        if self.t_max == 0 || self.base_res.0 == 0 || self.base_res.1 == 0 {
            return Err(arg_err("flex_config", "t_max and base resolution must be positive"));
        }
        Ok(())
    }

    /// True when the loss is switched on at timestep `t`: `t/t_max < τ_SNR`.
    pub fn active(&self, t: usize) -> bool {
        (t as f64 / self.t_max as f64) < self.snr_threshold
    }
}

/// Per-channel `(μ, σ + eps)` of the student over `(B, H, W)`, each `(1,C,1,1)`.
pub fn student_stats<T: Scalar>(stud: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    dims4(stud, "cross_normalize")?;
    let (mu, sd) = mean_std(stud, &[0, 2, 3])?;
    Ok((mu, sd.map(|s| s + T::lit(eps))))
}

/// Normalizes both tensors with the student's per-channel statistics.
pub fn cross_normalize<T: Scalar>(
    teach: &Tensor<T>,
    stud: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    if teach.shape() != stud.shape() {
        return Err(shape_err("cross_normalize", format!("{:?} vs {:?}", teach.shape(), stud.shape())));
    }
    let (mu, sigma) = student_stats(stud, eps)?;
    let tn = teach.sub(&mu)?.div(&sigma)?;
    let sn = stud.sub(&mu)?.div(&sigma)?;
    Ok((tn, sn, mu, sigma))
}

/// 1 where `|stud_n| ≤ τ_p`, with `τ_p` the nearest-rank `p`-percentile of
/// `|stud_n|` over `(B, H, W)` in each channel.
pub fn outlier_mask<T: Scalar>(stud_n: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4(stud_n, "outlier_mask")?;
    let hw = h * w;
    let data = stud_n.data();
    let mut mask = Tensor::zeros(stud_n.shape());
    for ch in 0..c {
        let idx = |bi: usize| (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
        let vals: Vec<T> = (0..b).flat_map(|bi| data[idx(bi)].iter().copied()).collect();
        let tau = percentile_abs(&vals, p)?;
        for bi in 0..b {
            for k in idx(bi) {
                if data[k].abs() <= tau {
                    mask.data_mut()[k] = T::one();
                }
            }
        }
    }
    Ok(mask)
}

/// `max((H_b·W_b / (H·W))^exponent, floor)`.
pub fn resolution_weight(h: usize, w: usize, cfg: &FlexConfig) -> Result<f64> {
    if h == 0 || w == 0 {
        return Err(arg_err("resolution_weight", format!("zero spatial size {h}×{w}")));
    }
    let ratio = (cfg.base_res.0 * cfg.base_res.1) as f64 / (h as f64 * w as f64);
    Ok(ratio.powf(cfg.exponent).max(cfg.weight_floor))
}

/// One aligned layer on a tape. `teach` is normally a constant.
#[derive(Clone, Copy, Debug)]
pub struct FlexLayerVars {
    pub teach: Var,
    pub stud: Var,
    pub weight: f64,
}

/// Records the loss. Statistics and mask are taken from the student's
/// current value and enter as constants, so gradients reach the features
/// only through the normalized difference.
pub fn flex_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, layers: &[FlexLayerVars], t: usize, cfg: &FlexConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total = tape.scalar(T::zero())?;
    if !cfg.active(t) {
        return Ok(total);
    }
    for l in layers {
        let (ts, ss) = (tape.shape(l.teach)?, tape.shape(l.stud)?);
        if ts != ss {
            return Err(shape_err("flex_loss", format!("teacher {ts:?} vs student {ss:?}")));
        }
        let stud_val = tape.value(l.stud)?.clone();
        let [_, _, h, w] = dims4(&stud_val, "flex_loss")?;
        let (mu, sigma) = student_stats(&stud_val, cfg.eps)?;
        let stud_n = stud_val.sub(&mu)?.div(&sigma)?;
        let mask = outlier_mask(&stud_n, cfg.percentile)?;
        let count = mask.sum().to_f64_lossy();

        let inv_sigma = tape.constant(sigma.map(|s| T::one() / s))?;
        // (teach − μ)/σ − (stud − μ)/σ; μ cancels exactly in the difference
        let d = tape.sub(l.teach, l.stud)?;
        let d = tape.mul(d, inv_sigma)?;
        let d = tape.square(d)?;
        let m = tape.constant(mask)?;
        let d = tape.mul(d, m)?;
        let s = tape.sum(d)?;
        let scale = l.weight * resolution_weight(h, w, cfg)? / (count + cfg.eps);
        let term = tape.scale(s, T::lit(scale))?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

fn align<'a, T: Scalar>(
    teach: &'a FeatureBundle<T>,
    stud: &'a FeatureBundle<T>,
) -> Result<Vec<(&'a FeatureLayer<T>, &'a FeatureLayer<T>)>> {
    if teach.layers.len() != stud.layers.len() {
        return Err(shape_err("flex_loss", format!("{} vs {} layers", teach.layers.len(), stud.layers.len())));
    }
    teach
        .layers
        .iter()
        .zip(&stud.layers)
        .map(|(a, b)| {
            if a.name != b.name {
                Err(shape_err("flex_loss", format!("layer {} aligned with {}", a.name, b.name)))
            } else if a.features.shape() != b.features.shape() {
                Err(shape_err("flex_loss", format!("{}: {:?} vs {:?}", a.name, a.features.shape(), b.features.shape())))
            } else {
                Ok((a, b))
            }
        })
        .collect()
}

/// Gradient-free loss over aligned bundles. Layer weights come from the
/// student bundle.
pub fn flex_loss<T: Scalar>(teach: &FeatureBundle<T>, stud: &FeatureBundle<T>, t: usize, cfg: &FlexConfig) -> Result<T> {
    let pairs = align(teach, stud)?;
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        vars.push(FlexLayerVars {
            teach: tape.constant(a.features.clone())?,
            stud: tape.constant(b.features.clone())?,
            weight: b.weight,
        });
    }
    let l = flex_loss_on_tape(&mut tape, &vars, t, cfg)?;
    tape.item(l)
}

/// Loss and `∂L/∂f_stud` per layer.
pub fn flex_loss_with_grad<T: Scalar>(
    teach: &FeatureBundle<T>,
    stud: &FeatureBundle<T>,
    t: usize,
    cfg: &FlexConfig,
) -> Result<(T, Vec<Tensor<T>>)> {
    let pairs = align(teach, stud)?;
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        vars.push(FlexLayerVars {
            teach: tape.constant(a.features.clone())?,
            stud: tape.leaf(b.features.clone())?,
            weight: b.weight,
        });
    }
    let l = flex_loss_on_tape(&mut tape, &vars, t, cfg)?;
    let g = tape.backward(l)?;
    let grads = vars.iter().map(|v| g.get(v.stud)).collect::<Result<Vec<_>>>()?;
    Ok((tape.item(l)?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check_tape, FdConfig};
    use crate::ndtensor::Rng;
    use proptest::prelude::*;

    /// Direct loop transcription of the single-layer, single-channel case.
    fn one_channel_oracle(teach: &[f64], stud: &[f64], hw: (usize, usize), cfg: &FlexConfig) -> f64 {
        let n = stud.len() as f64;
        let mu = stud.iter().sum::<f64>() / n;
        let var = stud.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
        let sigma = var.sqrt() + cfg.eps;
        let sn: Vec<f64> = stud.iter().map(|s| (s - mu) / sigma).collect();
        let mut mags: Vec<f64> = sn.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = (cfg.percentile * n).ceil() as usize;
        let tau = mags[rank - 1];
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..stud.len() {
            if sn[i].abs() <= tau {
                let d = (teach[i] - mu) / sigma - sn[i];
                num += d * d;
                den += 1.0;
            }
        }
        let w = (((64 * 64) as f64) / ((hw.0 * hw.1) as f64)).sqrt().sqrt().max(0.1);
        w * num / (den + cfg.eps)
    }

    #[test]
    fn worked_example() {
        let stud = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]).reshape(&[1, 1, 2, 2]).unwrap();
        let teach = stud.scale(10.0);
        let cfg = FlexConfig::default();
        let got = flex_loss(&FeatureBundle::single(teach.clone()), &FeatureBundle::single(stud.clone()), 0, &cfg).unwrap();
        let want = one_channel_oracle(teach.data(), stud.data(), (2, 2), &cfg);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 486.0 * 1024f64.powf(0.25)).abs() < 1e-2);
    }

    #[test]
    fn identical_bundles_and_gate() {
        let mut rng = Rng::new(0);
        let s: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 4]);
        let t: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 4]);
        let cfg = FlexConfig::default();
        let same = flex_loss(&FeatureBundle::single(s.clone()), &FeatureBundle::single(s.clone()), 0, &cfg).unwrap();
        assert_eq!(same, 0.0);
        let (tb, sb) = (FeatureBundle::single(t), FeatureBundle::single(s));
        assert!(flex_loss(&tb, &sb, 1, &cfg).unwrap() > 0.0);
        for t_idx in [2, 3, 4] {
            let (l, g) = flex_loss_with_grad(&tb, &sb, t_idx, &cfg).unwrap();
            assert_eq!(l, 0.0);
            assert_eq!(g[0].max_abs(), 0.0);
        }
        let half = FlexConfig { t_max: 10, ..FlexConfig::default() };
        assert_eq!(flex_loss(&tb, &sb, 5, &half).unwrap(), 0.0);
        assert!(flex_loss(&tb, &sb, 3, &half).unwrap() > 0.0);
    }

    #[test]
    fn misaligned_bundles_error() {
        let a = FeatureBundle::single(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let b = FeatureBundle::single(Tensor::<f64>::zeros(&[1, 1, 2, 3]));
        let cfg = FlexConfig::default();
        assert!(flex_loss(&a, &b, 0, &cfg).is_err());
        let mut c = FeatureBundle::new();
        c.push("other", Tensor::zeros(&[1, 1, 2, 2]), 1.0);
        assert!(flex_loss(&a, &c, 0, &cfg).is_err());
        assert!(flex_loss(&a, &FeatureBundle::new(), 0, &cfg).is_err());
        assert!(cross_normalize(&Tensor::<f64>::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 2, 2, 2]), 1e-6).is_err());
        let bad = FlexConfig { percentile: 0.0, ..FlexConfig::default() };
        assert!(flex_loss(&a, &a, 0, &bad).is_err());
    }

    #[test]
    fn cross_normalize_examples() {
        let mut rng = Rng::new(1);
        let s: Tensor<f64> = rng.normal_tensor(&[4, 2, 8, 8]);
        let (tn, sn, _, _) = cross_normalize(&s, &s, 1e-6).unwrap();
        assert_eq!(tn, sn);
        // standardize exactly, then normalization is (nearly) the identity
        let (mu, sd) = mean_std(&s, &[0, 2, 3]).unwrap();
        let z = s.sub(&mu).unwrap().div(&sd).unwrap();
        let (_, zn, _, _) = cross_normalize(&z, &z, 1e-6).unwrap();
        assert!(zn.sub(&z).unwrap().max_abs() < 1e-5);
        // normalized difference is (teach − stud)/σ whatever the teacher scale
        let t: Tensor<f64> = rng.normal_tensor(&[4, 2, 8, 8]);
        for k in [1.0, 1000.0] {
            let tk = t.scale(k);
            let (tn, sn, _, sigma) = cross_normalize(&tk, &s, 1e-6).unwrap();
            let want = tk.sub(&s).unwrap().div(&sigma).unwrap();
            assert!(tn.sub(&sn).unwrap().sub(&want).unwrap().max_abs() < 1e-9 * k);
        }
    }

    #[test]
    fn mask_examples() {
        let eq = Tensor::<f64>::full(&[2, 1, 3, 3], 0.7);
        assert_eq!(outlier_mask(&eq, 0.95).unwrap().sum(), 18.0);
        let distinct = Tensor::from_vec((0..100).map(|i| i as f64 + 1.0).collect()).reshape(&[1, 1, 10, 10]).unwrap();
        assert_eq!(outlier_mask(&distinct, 0.95).unwrap().sum(), 95.0);
    }

    #[test]
    fn resolution_weights() {
        let cfg = FlexConfig::default();
        assert_eq!(resolution_weight(64, 64, &cfg).unwrap(), 1.0);
        assert!((resolution_weight(256, 256, &cfg).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(resolution_weight(65536, 65536, &cfg).unwrap(), 0.1);
        assert!(resolution_weight(0, 4, &cfg).is_err());
    }

    #[test]
    fn multi_scale_balance() {
        // the same per-element error costs no more at higher resolution
        let cfg = FlexConfig::default();
        let mut prev = f64::INFINITY;
        for side in [2, 4, 8, 16, 32, 64, 128] {
            let s = Tensor::from_fn(&[1, 1, side, side], |i| ((i[2] * side + i[3]) % 2) as f64 * 2.0 - 1.0);
            let t = s.map(|v| v + 0.1);
            let l = flex_loss(&FeatureBundle::single(t), &FeatureBundle::single(s), 0, &cfg).unwrap();
            assert!(l <= prev + 1e-12, "side {side}: {l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn layer_weights_scale_terms() {
        let mut rng = Rng::new(2);
        let s: Tensor<f64> = rng.normal_tensor(&[1, 2, 4, 4]);
        let t: Tensor<f64> = rng.normal_tensor(&[1, 2, 4, 4]);
        let cfg = FlexConfig::default();
        let base = flex_loss(&FeatureBundle::single(t.clone()), &FeatureBundle::single(s.clone()), 0, &cfg).unwrap();
        let (mut tb, mut sb) = (FeatureBundle::new(), FeatureBundle::new());
        tb.push("a", t.clone(), 2.0).push("b", t, 0.5);
        sb.push("a", s.clone(), 2.0).push("b", s, 0.5);
        let two = flex_loss(&tb, &sb, 0, &cfg).unwrap();
        assert!((two - 2.5 * base).abs() < 1e-10 * base);
    }

    #[test]
    fn fd_check_with_frozen_statistics() {
        // statistics and mask are constants of the loss, so the check
        // perturbs the features while holding them at their base values
        let cfg = FlexConfig::default();
        for seed in 0..5 {
            let mut rng = Rng::new(90 + seed);
            let s: Tensor<f64> = rng.normal_tensor(&[2, 2, 3, 3]);
            let t: Tensor<f64> = rng.normal_tensor(&[2, 2, 3, 3]);
            let (mu, sigma) = student_stats(&s, cfg.eps).unwrap();
            let mask = outlier_mask(&s.sub(&mu).unwrap().div(&sigma).unwrap(), cfg.percentile).unwrap();
            let count = mask.sum();
            let r = fd_check_tape("L_FLEX", &[t.clone(), s.clone()], &FdConfig::default(), |tp, v| {
                let inv = tp.constant(sigma.map(|x| 1.0 / x))?;
                let m = tp.constant(mask.clone())?;
                let d = tp.sub(v[0], v[1])?;
                let d = tp.mul(d, inv)?;
                let d = tp.square(d)?;
                let d = tp.mul(d, m)?;
                let s = tp.sum(d)?;
                tp.scale(s, resolution_weight(3, 3, &cfg)? / (count + cfg.eps))
            })
            .unwrap();
            assert!(r.pass, "seed {seed}: {}", r.max_rel_err());
            // and the recorded loss has exactly that gradient at the base point
            let (_, g) = flex_loss_with_grad(&FeatureBundle::single(t.clone()), &FeatureBundle::single(s.clone()), 0, &cfg).unwrap();
            let w = resolution_weight(3, 3, &cfg).unwrap() / (count + cfg.eps);
            let want = t.sub(&s).unwrap().div(&sigma).unwrap().div(&sigma).unwrap().mul(&mask).unwrap().scale(-2.0 * w);
            assert!(g[0].sub(&want).unwrap().max_abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mask_fraction_at_least_p(vals in prop::collection::vec(-5i32..5, 16), p in 0.05f64..1.0) {
            let x = Tensor::from_vec(vals.iter().map(|&v| v as f64).collect()).reshape(&[1, 1, 4, 4]).unwrap();
            let frac = outlier_mask(&x, p).unwrap().sum() / 16.0;
            prop_assert!(frac >= p - 1e-12);
        }

        #[test]
        fn loss_non_negative_and_zero_when_gated(seed in 0u64..1000, t in 0usize..5) {
            let mut rng = Rng::new(seed);
            let s: Tensor<f64> = rng.normal_tensor(&[1, 2, 3, 3]);
            let tt: Tensor<f64> = rng.normal_tensor(&[1, 2, 3, 3]);
            let cfg = FlexConfig::default();
            let l = flex_loss(&FeatureBundle::single(tt), &FeatureBundle::single(s), t, &cfg).unwrap();
            prop_assert!(l >= 0.0);
            if t >= 2 {
                prop_assert_eq!(l, 0.0);
            }
        }
    }
}

//! Rectified-flow feature synthesis: straight-line interpolation between
//! noise and teacher features, velocity matching, Euler sampling and the
//! trajectory regularizer. Also a DDIM baseline on a cosine schedule.
//!
//! Feature batches are `(B, D)` tensors.

use crate::autodiff::{Binding, ParamSet, Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::ndtensor::{Rng, Tensor};
use crate::nn_blocks::VelocityPredictor;
use crate::scalar::Scalar;

pub const ALPHA_TRANS: f64 = 0.1;
pub const ALPHA_TARGET: f64 = 0.5;
pub const ALPHA_CONS: f64 = 0.2;
const COS_EPS: f64 = 1e-12;

fn check_t(t: f64, op: &'static str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(arg_err(op, format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = (1 − t)·z + t·f`.
pub fn interpolate<T: Scalar>(z: &Tensor<T>, f: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_t(t, "interpolate")?;
    same_shape(z, f, "interpolate")?;
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    z.zip_with(f, |zv, fv| a * zv + b * fv)
}

/// `v = f − z`, independent of `t`.
pub fn velocity_target<T: Scalar>(z: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(z, f, "velocity_target")?;
    f.sub(z)
}

/// Discrete timestep fed to a predictor: `round(t·t_max)`.
pub fn time_index(t: f64, t_max: usize) -> usize {
    (t * t_max as f64).round() as usize
}

/// `t ~ U[0,1]` per batch item.
pub fn sample_times(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

fn column<T: Scalar>(vals: impl Iterator<Item = f64>, n: usize) -> Result<Tensor<T>> {
    Tensor::from_vec(vals.map(T::lit).collect()).reshape(&[n, 1])
}

/// Records `L_vel = mean_b ‖net(x_t, round(t·t_max), c) − (f − z)‖²` for
/// pre-drawn times `t` (one per row).
#[allow(clippy::too_many_arguments)]
pub fn velocity_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    net: &VelocityPredictor,
    bind: &Binding,
    z: Var,
    f: Var,
    c: Var,
    times: &[f64],
) -> Result<Var> {
    let shape = tape.shape(z)?;
    if shape.len() != 2 || shape[0] == 0 {
        return Err(arg_err("velocity_matching_loss", format!("need a non-empty (B, D) batch, got {shape:?}")));
    }
    let b = shape[0];
    if times.len() != b {
        return Err(arg_err("velocity_matching_loss", format!("{} times for {b} items", times.len())));
    }
    for &t in times {
        check_t(t, "velocity_matching_loss")?;
    }
    let wt = tape.constant(column(times.iter().copied(), b)?)?;
    let wz = tape.constant(column(times.iter().map(|t| 1.0 - t), b)?)?;
    let zt = tape.mul(z, wz)?;
    let ft = tape.mul(f, wt)?;
    let x_t = tape.add(zt, ft)?;
    let idx: Vec<usize> = times.iter().map(|&t| time_index(t, net.t_max)).collect();
    let pred = net.forward(tape, bind, x_t, &idx, c)?;
    let target = tape.sub(f, z)?;
    let d = tape.sub(pred, target)?;
    let d = tape.square(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, T::one() / T::from_usize_lossy(b))
}

/// Gradient-free `L_vel` with times drawn from `rng`.
pub fn velocity_matching_loss<T: Scalar>(
    net: &VelocityPredictor,
    ps: &ParamSet<T>,
    z: &Tensor<T>,
    f: &Tensor<T>,
    c: &Tensor<T>,
    rng: &mut Rng,
) -> Result<T> {
    let n = z.shape().first().copied().unwrap_or(0);
    let times = sample_times(rng, n);
    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape)?;
    let (zv, fv, cv) = (tape.constant(z.clone())?, tape.constant(f.clone())?, tape.constant(c.clone())?);
    let l = velocity_loss_on_tape(&mut tape, net, &bind, zv, fv, cv, &times)?;
    tape.item(l)
}

/// A time-conditioned vector field over feature batches.
pub trait VelocityField<T: Scalar> {
    fn t_max(&self) -> usize;
    fn velocity(&self, x: &Tensor<T>, t_idx: &[usize], c: &Tensor<T>) -> Result<Tensor<T>>;
}

/// A trained predictor together with its parameters.
pub struct NetField<'a, T: Scalar> {
    pub net: &'a VelocityPredictor,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> VelocityField<T> for NetField<'_, T> {
    fn t_max(&self) -> usize {
        self.net.t_max
    }

    fn velocity(&self, x: &Tensor<T>, t_idx: &[usize], c: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.predict(self.params, x, t_idx, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    RectifiedFlow,
    DdimBaseline,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::RectifiedFlow => "rf",
            SamplerKind::DdimBaseline => "ddim",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub kind: SamplerKind,
    /// DDIM only: clamp the predicted `x̂₀` to `[−r, r]` at every step.
    pub x0_clip: Option<f64>,
}

impl SamplerConfig {
    pub fn rectified(steps: usize) -> Self {
        Self { steps, kind: SamplerKind::RectifiedFlow, x0_clip: None }
    }

    pub fn ddim(steps: usize) -> Self {
        Self { steps, kind: SamplerKind::DdimBaseline, x0_clip: None }
    }

    pub fn with_x0_clip(mut self, r: f64) -> Self {
        self.x0_clip = Some(r);
        self
    }

    fn validate(&self, want: SamplerKind, op: &'static str) -> Result<()> {
        if self.kind != want {
            return Err(arg_err(op, format!("sampler kind {:?}, expected {want:?}", self.kind)));
        }
        if self.steps == 0 {
            return Err(arg_err(op, "steps must be at least 1"));
        }
        if self.x0_clip.is_some_and(|r| !(r > 0.0)) {
            return Err(arg_err(op, "x0 clip radius must be positive"));
        }
        Ok(())
    }
}

/// Euler integration from `t = 0` to `1` with `Δt = 1/steps`.
/// Returns the final state and the post-step states `x¹ … x^N`.
pub fn euler_sample<T: Scalar>(
    field: &dyn VelocityField<T>,
    z: &Tensor<T>,
    c: &Tensor<T>,
    cfg: &SamplerConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    cfg.validate(SamplerKind::RectifiedFlow, "euler_sample")?;
    let b = z.shape().first().copied().unwrap_or(0);
    let dt = T::one() / T::from_usize_lossy(cfg.steps);
    let mut x = z.clone();
    let mut traj = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        let t = i as f64 / cfg.steps as f64;
        let idx = vec![time_index(t, field.t_max()); b];
        let v = field.velocity(&x, &idx, c)?;
        x = x.zip_with(&v, |xv, vv| xv + dt * vv)?;
        traj.push(x.clone());
    }
    Ok((x, traj))
}

/// Differentiable Euler integration; returns the post-step states.
pub fn euler_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    net: &VelocityPredictor,
    bind: &Binding,
    z: Var,
    c: Var,
    steps: usize,
) -> Result<Vec<Var>> {
    SamplerConfig::rectified(steps).validate(SamplerKind::RectifiedFlow, "euler_sample")?;
    let b = tape.shape(z)?[0];
    let dt = T::one() / T::from_usize_lossy(steps);
    let mut x = z;
    let mut traj = Vec::with_capacity(steps);
    for i in 0..steps {
        let idx = vec![time_index(i as f64 / steps as f64, net.t_max); b];
        let v = net.forward(tape, bind, x, &idx, c)?;
        let v = tape.scale(v, dt)?;
        x = tape.add(x, v)?;
        traj.push(x);
    }
    Ok(traj)
}

/// The three weighted parts of `L_traj` and their sum.
#[derive(Clone, Copy, Debug)]
pub struct TrajLoss {
    pub total: Var,
    pub trans: Var,
    pub target: Var,
    pub cons: Var,
}

/// `0.1·Σ‖x^{i+1} − x^i‖² + 0.5·‖x^N − f‖² + 0.2·Σ(1 − cos(x^i, f))`,
/// each norm per row and averaged over the batch. Components are reported
/// unweighted.
pub fn trajectory_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, traj: &[Var], f: Var) -> Result<TrajLoss> {
    let Some(&last) = traj.last() else {
        return Err(arg_err("trajectory_consistency_loss", "empty trajectory"));
    };
    let fs = tape.shape(f)?;
    for &x in traj {
        let xs = tape.shape(x)?;
        if xs != fs || xs.len() != 2 {
            return Err(shape_err("trajectory_consistency_loss", format!("{xs:?} vs {fs:?}")));
        }
    }
    let inv_b = T::one() / T::from_usize_lossy(fs[0]);
    let sq_mean = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(a, b)?;
        let d = tape.square(d)?;
        let s = tape.sum(d)?;
        tape.scale(s, inv_b)
    };
    let mut trans = tape.scalar(T::zero())?;
    for w in traj.windows(2) {
        let s = sq_mean(tape, w[1], w[0])?;
        trans = tape.add(trans, s)?;
    }
    let target = sq_mean(tape, last, f)?;

    let f2 = tape.square(f)?;
    let fn2 = tape.sum_axes(f2, &[1])?;
    let fn2 = tape.add_scalar(fn2, T::lit(COS_EPS))?;
    let f_norm = tape.sqrt(fn2)?;
    let mut cons = tape.scalar(T::zero())?;
    for &x in traj {
        let xf = tape.mul(x, f)?;
        let dot = tape.sum_axes(xf, &[1])?;
        let x2 = tape.square(x)?;
        let xn2 = tape.sum_axes(x2, &[1])?;
        let xn2 = tape.add_scalar(xn2, T::lit(COS_EPS))?;
        let x_norm = tape.sqrt(xn2)?;
        let den = tape.mul(x_norm, f_norm)?;
        let cos = tape.div(dot, den)?;
        let dist = tape.neg(cos)?;
        let dist = tape.add_scalar(dist, T::one())?;
        let m = tape.mean(dist)?;
        cons = tape.add(cons, m)?;
    }
    let a = tape.scale(trans, T::lit(ALPHA_TRANS))?;
    let b = tape.scale(target, T::lit(ALPHA_TARGET))?;
    let c = tape.scale(cons, T::lit(ALPHA_CONS))?;
    let total = tape.add(a, b)?;
    let total = tape.add(total, c)?;
    Ok(TrajLoss { total, trans, target, cons })
}

/// Gradient-free `L_traj`.
pub fn trajectory_consistency_loss<T: Scalar>(traj: &[Tensor<T>], f: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let vars = traj.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
    let fv = tape.constant(f.clone())?;
    let l = trajectory_loss_on_tape(&mut tape, &vars, fv)?;
    tape.item(l.total)
}

/// Cumulative signal levels `ᾱ_t`, `t = 0..T−1`, of the cosine schedule
/// `ᾱ(t) = cos²(((t/T) + s)/(1 + s)·π/2)` with per-step `β` clipped at 0.999.
#[derive(Clone, Debug)]
pub struct CosineSchedule {
    pub alpha_bar: Vec<f64>,
}

impl CosineSchedule {
    pub fn new(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            return Err(arg_err("cosine_schedule", "T must be positive"));
        }
        let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for t in 1..=steps {
            let beta = (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn standard() -> Self {
        Self::new(50, 0.008).expect("valid constants")
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    /// `steps` timesteps striding down from `T−1`: `round((T−1) − i·T/steps)`.
    pub fn timesteps(&self, steps: usize) -> Vec<usize> {
        let t = self.len() as f64;
        (0..steps)
            .map(|i| ((t - 1.0) - i as f64 * t / steps as f64).round().max(0.0) as usize)
            .collect()
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` per row.
    pub fn noised<T: Scalar>(&self, x0: &Tensor<T>, eps: &Tensor<T>, t_idx: &[usize]) -> Result<Tensor<T>> {
        same_shape(x0, eps, "noised")?;
        let d = x0.len() / t_idx.len().max(1);
        let mut out = x0.clone();
        for (r, &t) in t_idx.iter().enumerate() {
            let ab = *self.alpha_bar.get(t).ok_or_else(|| arg_err("noised", format!("timestep {t} out of range")))?;
            let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            for k in r * d..(r + 1) * d {
                out.data_mut()[k] = a * x0.data()[k] + b * eps.data()[k];
            }
        }
        Ok(out)
    }
}

/// ε-prediction network for the DDIM baseline.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(&self, x: &Tensor<T>, t_idx: &[usize], c: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> NoisePredictor<T> for NetField<'_, T> {
    fn predict_noise(&self, x: &Tensor<T>, t_idx: &[usize], c: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.predict(self.params, x, t_idx, c)
    }
}

/// Deterministic DDIM (η = 0) from `z` over `steps` strided timesteps.
pub fn ddim_baseline_sample<T: Scalar>(
    noise_net: &dyn NoisePredictor<T>,
    schedule: &CosineSchedule,
    z: &Tensor<T>,
    c: &Tensor<T>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    cfg.validate(SamplerKind::DdimBaseline, "ddim_baseline_sample")?;
    if cfg.steps > schedule.len() {
        return Err(arg_err("ddim_baseline_sample", format!("{} steps exceed T = {}", cfg.steps, schedule.len())));
    }
    let b = z.shape().first().copied().unwrap_or(0);
    let ts = schedule.timesteps(cfg.steps);
    let mut x = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar[t];
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar[p]);
        let eps = noise_net.predict_noise(&x, &vec![t; b], c)?;
        let (sa, sb) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let (pa, pb) = (T::lit(ab_prev.sqrt()), T::lit((1.0 - ab_prev).sqrt()));
        let r = cfg.x0_clip.map(T::lit);
        x = x.zip_with(&eps, |xv, ev| {
            let mut x0 = (xv - sb * ev) / sa;
            if let Some(r) = r {
                x0 = x0.max(-r).min(r);
                // ε consistent with the clipped estimate
                let e = (xv - sa * x0) / sb;
                return pa * x0 + pb * e;
            }
            pa * x0 + pb * ev
        })?;
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "ddim_baseline_sample" });
        }
    }
    Ok(x)
}

/// Records the ε-prediction loss `mean_b ‖ε_θ(x_t, t, c) − ε‖²`.
#[allow(clippy::too_many_arguments)]
pub fn noise_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    net: &VelocityPredictor,
    bind: &Binding,
    schedule: &CosineSchedule,
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    c: Var,
    t_idx: &[usize],
) -> Result<Var> {
    let x_t = tape.constant(schedule.noised(x0, eps, t_idx)?)?;
    let pred = net.forward(tape, bind, x_t, t_idx, c)?;
    let e = tape.constant(eps.clone())?;
    let d = tape.sub(pred, e)?;
    let d = tape.square(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, T::one() / T::from_usize_lossy(t_idx.len()))
}

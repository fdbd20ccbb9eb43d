//! Central-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{arg_err, Error, Result};
use crate::ndtensor::{Rng, Tensor};
use crate::scalar::Scalar;

use super::{Binding, ParamSet, Tape, Var};

/// A scalar function of several tensor arguments with an analytic gradient.
pub trait ScalarFunction<T: Scalar> {
    fn eval(&self, args: &[Tensor<T>]) -> Result<T>;
    fn grad(&self, args: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>;
}

/// Adapts a closure that records a scalar loss on a tape.
pub struct TapeFn<F> {
    build: F,
}

impl<F> TapeFn<F> {
    pub fn new(build: F) -> Self {
        Self { build }
    }
}

impl<T, F> ScalarFunction<T> for TapeFn<F>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    fn eval(&self, args: &[Tensor<T>]) -> Result<T> {
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, args)?;
        let out = (self.build)(&mut tape, &vars)?;
        tape.item(out)
    }

    fn grad(&self, args: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, args)?;
        let out = (self.build)(&mut tape, &vars)?;
        let g = tape.backward(out)?;
        vars.iter().map(|&v| g.get(v)).collect()
    }
}

fn leaves<T: Scalar>(tape: &mut Tape<T>, args: &[Tensor<T>]) -> Result<Vec<Var>> {
    args.iter().map(|a| tape.leaf(a.clone())).collect()
}

#[derive(Clone, Debug)]
pub struct FdConfig {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per argument (chosen by `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArgReport {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub name: String,
    pub args: Vec<ArgReport>,
    pub tol: f64,
    pub pass: bool,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.args.iter().map(|a| a.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of `f` at `args` with central differences.
///
/// The error of one argument is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` over the checked
/// coordinates (0 when both are zero).
pub fn fd_check<T: Scalar>(
    name: &str,
    f: &dyn ScalarFunction<T>,
    args: &[Tensor<T>],
    cfg: &FdConfig,
) -> Result<FdReport> {
    if !(cfg.h > 0.0) {
        return Err(arg_err("fd_check", "step must be positive"));
    }
    let f0 = f.eval(args)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite { op: "fd_check" });
    }
    let analytic = f.grad(args)?;
    if analytic.len() != args.len() {
        return Err(arg_err("fd_check", "gradient count differs from argument count"));
    }
    let mut rng = Rng::new(cfg.seed);
    let h = T::lit(cfg.h);
    let mut work: Vec<Tensor<T>> = args.to_vec();
    let mut reports = Vec::with_capacity(args.len());
    for (ai, arg) in args.iter().enumerate() {
        if analytic[ai].shape() != arg.shape() {
            return Err(arg_err("fd_check", format!("gradient {ai} has wrong shape")));
        }
        let coords = pick_coords(arg.len(), cfg.max_coords, &mut rng);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for &k in &coords {
            let x0 = arg.data()[k];
            work[ai].data_mut()[k] = x0 + h;
            let fp = f.eval(&work)?;
            work[ai].data_mut()[k] = x0 - h;
            let fm = f.eval(&work)?;
            work[ai].data_mut()[k] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite { op: "fd_check" });
            }
            let num = (fp.to_f64_lossy() - fm.to_f64_lossy()) / (2.0 * cfg.h);
            let ana = analytic[ai].data()[k].to_f64_lossy();
            diff = diff.max((ana - num).abs());
            scale = scale.max(ana.abs()).max(num.abs());
        }
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        reports.push(ArgReport { index: ai, coords_checked: coords.len(), max_rel_err: rel });
    }
    let pass = reports.iter().all(|r| r.max_rel_err <= cfg.tol);
    Ok(FdReport { name: name.to_string(), args: reports, tol: cfg.tol, pass })
}

fn pick_coords(n: usize, max: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = i + rng.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Shorthand for checking a tape closure.
pub fn fd_check_tape<F>(name: &str, args: &[Tensor<f64>], cfg: &FdConfig, build: F) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fd_check(name, &TapeFn::new(build), args, cfg)
}

/// Checks gradients w.r.t. every parameter of `params` and every tensor in
/// `inputs`. The parameters come first in the report.
pub fn fd_check_module<F>(
    name: &str,
    params: &ParamSet<f64>,
    inputs: &[Tensor<f64>],
    cfg: &FdConfig,
    build: F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &Binding, &[Var]) -> Result<Var>,
{
    let np = params.len();
    let mut args: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    args.extend_from_slice(inputs);
    fd_check_tape(name, &args, cfg, |t, v| {
        let bind = Binding::from_vars(v[..np].to_vec());
        build(t, &bind, &v[np..])
    })
}

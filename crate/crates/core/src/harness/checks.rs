//! Registry of self-checks: finite-difference gradient checks for every
//! differentiable operation, oracle comparisons and invariants. Failures are
//! report content, not errors.

use serde::Serialize;

use crate::aniso_diffusion::{
    anisotropic_operator, anisotropic_operator_on_tape, illumination_smoothness_loss_on_tape, texture_loss_on_tape,
    DiffusionParams,
};
use crate::autodiff::{fd_check_module, fd_check_tape, FdConfig, FdReport, ParamSet, Tape, Var};
use crate::error::Result;
use crate::flexloss::{
    flex_loss, flex_loss_with_grad, outlier_mask, resolution_weight, student_stats, FeatureBundle, FlexConfig,
};
use crate::hvi_color::{hue_sweep, hvi_on_tape, polarized_color_loss_on_tape, to_polarized_hvi, HviParams, HVI_EPS};
use crate::ndtensor::{gaussian_frechet_distance, Rng, Tensor};
use crate::nn_blocks::objective::{teacher_objective, ObjectiveWeights, PhysicsParams, TeacherInputs};
use crate::nn_blocks::perceptual::{perceptual_loss_on_tape, style_loss_on_tape, FeatureExtractor};
use crate::nn_blocks::{reconstruction_error_on_tape, DecompositionNet, RetinexAttention, Scln, ToyBlock, VelocityPredictor};
use crate::rectflow::{
    ddim_baseline_sample, euler_on_tape, euler_sample, trajectory_loss_on_tape, velocity_loss_on_tape, CosineSchedule,
    NoisePredictor, SamplerConfig, VelocityField,
};

pub const FD_SEEDS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Gradient,
    Oracle,
    Invariant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub pass: bool,
    pub metric: Option<f64>,
    pub detail: String,
}

impl CheckOutcome {
    fn new(pass: bool, metric: f64, detail: impl Into<String>) -> Self {
        Self { pass, metric: Some(metric), detail: detail.into() }
    }

    /// Passes iff `|got − want| ≤ tol`.
    fn close(got: f64, want: f64, tol: f64) -> Self {
        let err = (got - want).abs();
        Self::new(err <= tol, err, format!("got {got}, want {want}, tol {tol:e}"))
    }
}

type CheckFn = Box<dyn Fn() -> Result<CheckOutcome> + Send + Sync>;

pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub run: CheckFn,
}

impl Check {
    pub fn new(name: impl Into<String>, kind: CheckKind, run: impl Fn() -> Result<CheckOutcome> + Send + Sync + 'static) -> Self {
        Self { name: name.into(), kind, run: Box::new(run) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub pass: bool,
    pub metric: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub passed: usize,
    pub failed: usize,
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn run_checks(checks: &[Check]) -> CheckReport {
    let results: Vec<CheckResult> = checks
        .iter()
        .map(|c| {
            let (pass, metric, detail) = match (c.run)() {
                Ok(o) => (o.pass, o.metric, o.detail),
                Err(e) => (false, None, format!("error: {e}")),
            };
            CheckResult { name: c.name.clone(), kind: c.kind, pass, metric, detail }
        })
        .collect();
    let passed = results.iter().filter(|r| r.pass).count();
    CheckReport { passed, failed: results.len() - passed, results }
}

pub fn run_all_checks() -> CheckReport {
    run_checks(&registry())
}

fn summarize(reports: &[FdReport]) -> CheckOutcome {
    let worst = reports.iter().map(FdReport::max_rel_err).fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.pass);
    CheckOutcome::new(pass, worst, format!("max rel err {worst:.3e} over {} seeds", reports.len()))
}

fn contract(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed ^ 0xC0FFEE).normal_tensor(&t.shape(y)?);
    let w = t.constant(w)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Gen = fn(&mut Rng) -> Vec<Tensor<f64>>;

/// Op check: output contracted with seeded random weights, 5 seeds.
fn op_check(name: &'static str, gen: Gen, op: fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Check {
    Check::new(format!("grad.op.{name}"), CheckKind::Gradient, move || {
        let mut reports = Vec::new();
        for seed in 0..FD_SEEDS {
            let args = gen(&mut Rng::new(0x5EED + seed));
            reports.push(fd_check_tape(name, &args, &FdConfig::default(), |t, v| {
                let y = op(t, v)?;
                contract(t, y, seed)
            })?);
        }
        Ok(summarize(&reports))
    })
}

/// Scalar-loss check over tape inputs, 5 seeds.
fn loss_check(name: &'static str, gen: Gen, loss: fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Check {
    Check::new(format!("grad.{name}"), CheckKind::Gradient, move || {
        let mut reports = Vec::new();
        for seed in 0..FD_SEEDS {
            let args = gen(&mut Rng::new(0xA11 + seed));
            reports.push(fd_check_tape(name, &args, &FdConfig::default(), loss)?);
        }
        Ok(summarize(&reports))
    })
}

fn normal(r: &mut Rng, s: &[usize]) -> Tensor<f64> {
    r.normal_tensor(s)
}

fn positive(r: &mut Rng, s: &[usize]) -> Tensor<f64> {
    r.uniform_tensor(s, 0.5, 2.0)
}

fn away_from_zero(r: &mut Rng, s: &[usize]) -> Tensor<f64> {
    normal(r, s).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn unit(r: &mut Rng, s: &[usize]) -> Tensor<f64> {
    r.uniform_tensor(s, 0.05, 0.95)
}

/// Colour pixels whose channels are pairwise at least 0.02 apart, keeping
/// FD steps away from the max/min channel switch.
fn separated_rgb(r: &mut Rng, hw: usize) -> Tensor<f64> {
    let n = hw * hw;
    let mut out = Tensor::zeros(&[1, 3, hw, hw]);
    for p in 0..n {
        let v = loop {
            let v = [r.uniform_range(0.05, 0.95), r.uniform_range(0.05, 0.95), r.uniform_range(0.05, 0.95)];
            if (v[0] - v[1]).abs() > 0.02 && (v[1] - v[2]).abs() > 0.02 && (v[0] - v[2]).abs() > 0.02 {
                break v;
            }
        };
        for (c, x) in v.into_iter().enumerate() {
            out.data_mut()[c * n + p] = x;
        }
    }
    out
}

fn op_checks() -> Vec<Check> {
    vec![
        op_check("add", |r| vec![normal(r, &[2, 3]), normal(r, &[1, 3])], |t, v| t.add(v[0], v[1])),
        op_check("sub", |r| vec![normal(r, &[2, 3]), normal(r, &[2, 1])], |t, v| t.sub(v[0], v[1])),
        op_check("mul", |r| vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.mul(v[0], v[1])),
        op_check("div", |r| vec![normal(r, &[2, 3]), positive(r, &[2, 3])], |t, v| t.div(v[0], v[1])),
        op_check("matmul", |r| vec![normal(r, &[2, 3, 4]), normal(r, &[2, 4, 2])], |t, v| t.matmul(v[0], v[1])),
        op_check("conv2d_3x3", |r| vec![normal(r, &[2, 2, 4, 4]), normal(r, &[3, 2, 3, 3])], |t, v| t.conv2d_3x3(v[0], v[1])),
        op_check("relu", |r| vec![away_from_zero(r, &[3, 4])], |t, v| t.relu(v[0])),
        op_check("leaky_relu", |r| vec![away_from_zero(r, &[3, 4])], |t, v| t.leaky_relu(v[0], 0.1)),
        op_check("exp", |r| vec![normal(r, &[3, 4])], |t, v| t.exp(v[0])),
        op_check("sin", |r| vec![normal(r, &[3, 4])], |t, v| t.sin(v[0])),
        op_check("cos", |r| vec![normal(r, &[3, 4])], |t, v| t.cos(v[0])),
        op_check("sqrt", |r| vec![positive(r, &[3, 4])], |t, v| t.sqrt(v[0])),
        op_check("power", |r| vec![positive(r, &[3, 4])], |t, v| t.powf(v[0], 2.5)),
        op_check("softmax", |r| vec![normal(r, &[3, 5])], |t, v| t.softmax(v[0], 1)),
        op_check("layer_norm", |r| vec![normal(r, &[3, 5])], |t, v| t.layer_norm(v[0], 1, 1e-5)),
        op_check("l2_normalize", |r| vec![normal(r, &[3, 4])], |t, v| t.l2_normalize(v[0], 1, 1e-12)),
        op_check("sum_axes", |r| vec![normal(r, &[2, 3, 4])], |t, v| t.sum_axes(v[0], &[0, 2])),
        op_check("mean_axes", |r| vec![normal(r, &[2, 3, 4])], |t, v| t.mean_axes(v[0], &[1])),
        op_check("sum_and_mean", |r| vec![normal(r, &[2, 3])], |t, v| {
            let s = t.sum(v[0])?;
            let m = t.mean(v[0])?;
            let m = t.square(m)?;
            t.add(s, m)
        }),
        op_check("neg_scale_add_scalar", |r| vec![normal(r, &[3, 4])], |t, v| {
            let a = t.neg(v[0])?;
            let a = t.scale(a, 1.7)?;
            t.add_scalar(a, 0.3)
        }),
        op_check("square", |r| vec![normal(r, &[3, 4])], |t, v| t.square(v[0])),
        op_check("min_axis", |r| vec![normal(r, &[3, 5])], |t, v| t.min_axis(v[0], 1)),
        op_check("abs", |r| vec![away_from_zero(r, &[3, 4])], |t, v| t.abs(v[0])),
        op_check(
            "clamp",
            |r| {
                // inside or well outside [−0.5, 0.5], never near a bound
                let u = r.uniform_tensor::<f64>(&[3, 4], 0.0, 1.0);
                vec![Tensor::from_fn(&[3, 4], |i| {
                    let v = u.data()[i[0] * 4 + i[1]];
                    let m = if (i[0] + i[1]) % 2 == 0 { 0.1 + 0.3 * v } else { 0.7 + v };
                    if i[1] < 2 { m } else { -m }
                })]
            },
            |t, v| t.clamp(v[0], -0.5, 0.5),
        ),
        op_check("concat", |r| vec![normal(r, &[2, 2]), normal(r, &[2, 3])], |t, v| t.concat(&[v[0], v[1]], 1)),
        op_check("slice", |r| vec![normal(r, &[2, 5])], |t, v| t.slice(v[0], 1, 1, 4)),
        op_check("reshape_permute", |r| vec![normal(r, &[2, 3, 4])], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            t.reshape(p, &[4, 6])
        }),
        op_check("max_axis", |r| vec![normal(r, &[3, 5])], |t, v| t.max_axis(v[0], 1)),
    ]
}

fn module_check<M: 'static + Send + Sync>(
    name: &'static str,
    make: fn(&mut ParamSet<f64>, &mut Rng) -> Result<M>,
    gen: Gen,
    build: fn(&M, &mut Tape<f64>, &crate::autodiff::Binding, &[Var]) -> Result<Var>,
) -> Check {
    Check::new(format!("grad.{name}"), CheckKind::Gradient, move || {
        let mut reports = Vec::new();
        for seed in 0..FD_SEEDS {
            let mut rng = Rng::new(0xB10C + seed);
            let mut ps = ParamSet::new();
            let m = make(&mut ps, &mut rng)?;
            let inputs = gen(&mut rng);
            let cfg = FdConfig { max_coords: Some(60), seed, ..FdConfig::default() };
            reports.push(fd_check_module(name, &ps, &inputs, &cfg, |t, b, v| {
                let y = build(&m, t, b, v)?;
                contract(t, y, seed)
            })?);
        }
        Ok(summarize(&reports))
    })
}

fn module_checks() -> Vec<Check> {
    vec![
        module_check(
            "scln",
            |ps, _| Ok(Scln::new(ps, "n", 4)),
            |r| vec![normal(r, &[2, 4, 3, 3])],
            |m, t, b, v| m.forward(t, b, v[0]),
        ),
        module_check(
            "qk_attention",
            |ps, r| RetinexAttention::new(ps, "a", 8, 2, r),
            |r| vec![normal(r, &[1, 8, 3, 3]), normal(r, &[1, 256])],
            |m, t, b, v| m.forward(t, b, v[0], v[1]),
        ),
        module_check(
            "toy_block",
            |ps, r| ToyBlock::new(ps, "b", 8, 2, r),
            |r| vec![normal(r, &[1, 8, 3, 3]), normal(r, &[1, 256])],
            |m, t, b, v| Ok(m.forward(t, b, v[0], v[1])?.out),
        ),
        module_check(
            "decomposition_net",
            |ps, r| Ok(DecompositionNet::new(ps, "d", r)),
            |r| vec![unit(r, &[1, 3, 4, 4])],
            |m, t, b, v| {
                let (r, l) = m.forward(t, b, v[0])?;
                let l3 = t.concat(&[l, l, l], 1)?;
                t.add(r, l3)
            },
        ),
        module_check(
            "velocity_predictor",
            |ps, r| VelocityPredictor::new(ps, "v", 4, 6, 4, r),
            |r| vec![normal(r, &[2, 4]), normal(r, &[2, 4])],
            |m, t, b, v| m.forward(t, b, v[0], &[1, 3], v[1]),
        ),
    ]
}

fn physics_and_loss_checks() -> Vec<Check> {
    vec![
        op_check("anisotropic_operator", |r| vec![normal(r, &[1, 2, 5, 5]), Tensor::scalar(0.3)], |t, v| {
            anisotropic_operator_on_tape(t, v[0], v[1])
        }),
        op_check("hvi_transform", |r| vec![separated_rgb(r, 3), Tensor::scalar(1.3)], |t, v| {
            let h = hvi_on_tape(t, v[0], v[1], HVI_EPS)?;
            t.concat(&[h.h_polar, h.v_polar, h.i_polar], 1)
        }),
        loss_check("L_rec", |r| vec![unit(r, &[1, 3, 4, 4]), unit(r, &[1, 3, 4, 4])], |t, v| {
            let d = t.sub(v[0], v[1])?;
            let d = t.abs(d)?;
            t.mean(d)
        }),
        loss_check("L_vgg", |r| vec![unit(r, &[1, 3, 4, 4]), unit(r, &[1, 3, 4, 4])], |t, v| {
            perceptual_loss_on_tape(t, v[0], v[1], &FeatureExtractor::seeded(9, 3, 8)?)
        }),
        loss_check("L_sty", |r| vec![unit(r, &[1, 3, 4, 4]), unit(r, &[1, 3, 4, 4])], |t, v| {
            style_loss_on_tape(t, v[0], v[1], &FeatureExtractor::seeded(9, 3, 8)?)
        }),
        loss_check("L_tex", |r| vec![unit(r, &[1, 3, 4, 4]), unit(r, &[1, 3, 4, 4]), Tensor::scalar(0.2)], |t, v| {
            texture_loss_on_tape(t, v[0], v[1], v[2])
        }),
        loss_check("L_lum", |r| vec![unit(r, &[1, 1, 5, 5])], |t, v| illumination_smoothness_loss_on_tape(t, v[0])),
        loss_check("L_col", |r| vec![separated_rgb(r, 3), separated_rgb(r, 3), Tensor::scalar(1.2)], |t, v| {
            polarized_color_loss_on_tape(t, v[0], v[1], v[2], HVI_EPS)
        }),
        loss_check("L_decomp", |r| vec![unit(r, &[1, 3, 3, 3]), unit(r, &[1, 1, 3, 3]), unit(r, &[1, 3, 3, 3])], |t, v| {
            reconstruction_error_on_tape(t, v[0], v[1], v[2])
        }),
        loss_check(
            "teacher_objective",
            |r| {
                let mut u = |c: usize| unit(r, &[1, c, 4, 4]);
                vec![u(3), u(3), u(3), u(1), u(3), Tensor::scalar(1.2), Tensor::scalar(0.3)]
            },
            |t, v| {
                let x = TeacherInputs { pred: v[0], gt: v[1], r_pred: v[2], l_pred: v[3], input: v[4] };
                let phys = PhysicsParams { k: v[5], s: v[6] };
                Ok(teacher_objective(t, &x, &phys, &FeatureExtractor::seeded(5, 3, 8)?, &ObjectiveWeights::default())?.total)
            },
        ),
        Check::new("grad.L_vel", CheckKind::Gradient, || flow_loss_check(false)),
        Check::new("grad.L_traj", CheckKind::Gradient, || flow_loss_check(true)),
        Check::new("grad.L_FLEX", CheckKind::Gradient, flex_grad_check),
    ]
}

fn flow_loss_check(traj: bool) -> Result<CheckOutcome> {
    let mut reports = Vec::new();
    for seed in 0..FD_SEEDS {
        let mut rng = Rng::new(0xF10 + seed);
        let mut ps = ParamSet::new();
        let net = VelocityPredictor::new(&mut ps, "v", 4, 6, 4, &mut rng)?;
        let args = [normal(&mut rng, &[3, 4]), normal(&mut rng, &[3, 4]), normal(&mut rng, &[3, 4])];
        let times: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let cfg = FdConfig { max_coords: Some(60), seed, ..FdConfig::default() };
        reports.push(fd_check_module(if traj { "L_traj" } else { "L_vel" }, &ps, &args, &cfg, |t, b, v| {
            if traj {
                let path = euler_on_tape(t, &net, b, v[0], v[2], 3)?;
                Ok(trajectory_loss_on_tape(t, &path, v[1])?.total)
            } else {
                velocity_loss_on_tape(t, &net, b, v[0], v[1], v[2], &times)
            }
        })?);
    }
    Ok(summarize(&reports))
}

/// FD on the loss with the student statistics and mask held at their base
/// values, plus agreement of the recorded gradient with that function's.
fn flex_grad_check() -> Result<CheckOutcome> {
    let cfg = FlexConfig::default();
    let mut reports = Vec::new();
    let mut worst_match: f64 = 0.0;
    for seed in 0..FD_SEEDS {
        let mut rng = Rng::new(0xF1E + seed);
        let s = normal(&mut rng, &[2, 2, 3, 3]);
        let t = normal(&mut rng, &[2, 2, 3, 3]);
        let (mu, sigma) = student_stats(&s, cfg.eps)?;
        let mask = outlier_mask(&s.sub(&mu)?.div(&sigma)?, cfg.percentile)?;
        let scale = resolution_weight(3, 3, &cfg)? / (mask.sum() + cfg.eps);
        reports.push(fd_check_tape("L_FLEX", &[t.clone(), s.clone()], &FdConfig::default(), |tp, v| {
            let inv = tp.constant(sigma.map(|x| 1.0 / x))?;
            let m = tp.constant(mask.clone())?;
            let d = tp.sub(v[0], v[1])?;
            let d = tp.mul(d, inv)?;
            let d = tp.square(d)?;
            let d = tp.mul(d, m)?;
            let l = tp.sum(d)?;
            tp.scale(l, scale)
        })?);
        let (_, g) = flex_loss_with_grad(&FeatureBundle::single(t.clone()), &FeatureBundle::single(s.clone()), 0, &cfg)?;
        let want = t.sub(&s)?.div(&sigma)?.div(&sigma)?.mul(&mask)?.scale(-2.0 * scale);
        worst_match = worst_match.max(g[0].sub(&want)?.max_abs() / want.max_abs().max(1e-300));
    }
    let mut out = summarize(&reports);
    out.pass &= worst_match < 1e-10;
    out.detail = format!("{}; recorded vs frozen-statistics gradient rel diff {worst_match:.1e}", out.detail);
    Ok(out)
}

struct ConstantField(Tensor<f64>);

impl VelocityField<f64> for ConstantField {
    fn t_max(&self) -> usize {
        4
    }
    fn velocity(&self, _: &Tensor<f64>, _: &[usize], _: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.0.clone())
    }
}

struct EpsOracle<'a>(&'a Tensor<f64>, &'a CosineSchedule);

impl NoisePredictor<f64> for EpsOracle<'_> {
    fn predict_noise(&self, x: &Tensor<f64>, t: &[usize], _: &Tensor<f64>) -> Result<Tensor<f64>> {
        let ab = self.1.alpha_bar[t[0]];
        x.zip_with(self.0, |xv, x0| (xv - ab.sqrt() * x0) / (1.0 - ab).sqrt())
    }
}

/// Loop transcription of the single-channel loss used by the worked example.
pub fn flex_single_channel_oracle(teach: &[f64], stud: &[f64], h: usize, w: usize, cfg: &FlexConfig) -> f64 {
    let n = stud.len() as f64;
    let mu = stud.iter().sum::<f64>() / n;
    let sigma = (stud.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n).sqrt() + cfg.eps;
    let sn: Vec<f64> = stud.iter().map(|s| (s - mu) / sigma).collect();
    let mut mags: Vec<f64> = sn.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.total_cmp(b));
    let tau = mags[(cfg.percentile * n).ceil() as usize - 1];
    let (mut num, mut den) = (0.0, 0.0);
    for (i, s) in sn.iter().enumerate() {
        if s.abs() <= tau {
            num += ((teach[i] - mu) / sigma - s).powi(2);
            den += 1.0;
        }
    }
    let wres = ((cfg.base_res.0 * cfg.base_res.1) as f64 / (h * w) as f64).powf(cfg.exponent).max(cfg.weight_floor);
    wres * num / (den + cfg.eps)
}

fn oracle_checks() -> Vec<Check> {
    vec![
        Check::new("oracle.fd_square_at_3", CheckKind::Oracle, || {
            let r = fd_check_tape("square", &[Tensor::scalar(3.0)], &FdConfig::default(), |t, v| t.square(v[0]))?;
            Ok(CheckOutcome::new(r.pass, r.max_rel_err(), "d/dx x² at 3"))
        }),
        Check::new("oracle.flex_worked_example", CheckKind::Oracle, || {
            let stud = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]).reshape(&[1, 1, 2, 2])?;
            let teach = stud.scale(10.0);
            let cfg = FlexConfig::default();
            let got = flex_loss(&FeatureBundle::single(teach.clone()), &FeatureBundle::single(stud.clone()), 0, &cfg)?;
            Ok(CheckOutcome::close(got, flex_single_channel_oracle(teach.data(), stud.data(), 2, 2, &cfg), 1e-9))
        }),
        Check::new("oracle.flex_identical_and_gated", CheckKind::Oracle, || {
            let mut rng = Rng::new(7);
            let (s, t) = (normal(&mut rng, &[2, 3, 4, 4]), normal(&mut rng, &[2, 3, 4, 4]));
            let cfg = FlexConfig::default();
            let same = flex_loss(&FeatureBundle::single(s.clone()), &FeatureBundle::single(s.clone()), 0, &cfg)?;
            let (gated, g) = flex_loss_with_grad(&FeatureBundle::single(t), &FeatureBundle::single(s), 2, &cfg)?;
            let worst = same.abs().max(gated.abs()).max(g[0].max_abs());
            Ok(CheckOutcome::new(worst == 0.0, worst, "identical bundles and t/t_max = 0.5 give exactly 0"))
        }),
        Check::new("oracle.resolution_weights", CheckKind::Oracle, || {
            let cfg = FlexConfig::default();
            let err = [(64, 1.0), (256, 0.5), (65536, 0.1)]
                .iter()
                .map(|&(s, w)| resolution_weight(s, s, &cfg).map(|v| (v - w).abs()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok(CheckOutcome::new(err <= 1e-12, err, "(64,64)→1, (256,256)→0.5, (65536,65536)→0.1"))
        }),
        Check::new("oracle.hvi_red_seam", CheckKind::Oracle, || {
            let s = hue_sweep(12, 1.0, 1e-3)?;
            let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
            let gap = (a.h_polar - b.h_polar).abs().max((a.v_polar - b.v_polar).abs()).max((a.i_polar - b.i_polar).abs());
            Ok(CheckOutcome::new(gap < 1e-2, gap, "max coordinate gap across H = 0 / 6 at δ = 1e-3"))
        }),
        Check::new("oracle.hvi_black", CheckKind::Oracle, || {
            let h = to_polarized_hvi(&Tensor::<f64>::zeros(&[1, 3, 2, 2]), &HviParams::default())?;
            let m = h.h_polar.max_abs().max(h.v_polar.max_abs()).max(h.i_polar.max_abs());
            Ok(CheckOutcome::new(m == 0.0, m, "black maps to (0,0,0)"))
        }),
        Check::new("oracle.euler_straight_path", CheckKind::Oracle, || {
            let mut rng = Rng::new(11);
            let (z, f) = (normal(&mut rng, &[4, 8]), normal(&mut rng, &[4, 8]));
            let field = ConstantField(f.sub(&z)?);
            let mut worst: f64 = 0.0;
            for steps in [1, 2, 4] {
                let (x, _) = euler_sample(&field, &z, &Tensor::zeros(&[4, 8]), &SamplerConfig::rectified(steps))?;
                worst = worst.max(x.sub(&f)?.max_abs());
            }
            Ok(CheckOutcome::new(worst < 1e-12, worst, "constant-velocity Euler reaches f at steps 1, 2, 4"))
        }),
        Check::new("oracle.ddim_perfect_noise", CheckKind::Oracle, || {
            let sch = CosineSchedule::standard();
            let mut rng = Rng::new(12);
            let (x0, z) = (normal(&mut rng, &[2, 8]), normal(&mut rng, &[2, 8]));
            let mut worst: f64 = 0.0;
            for steps in [1, 5, 50] {
                let x = ddim_baseline_sample(&EpsOracle(&x0, &sch), &sch, &z, &Tensor::zeros(&[2, 8]), &SamplerConfig::ddim(steps))?;
                worst = worst.max(x.sub(&x0)?.max_abs());
            }
            Ok(CheckOutcome::new(worst < 1e-9, worst, "exact ε recovers the data"))
        }),
        Check::new("oracle.frechet_diagonal", CheckKind::Oracle, || {
            let eye = Tensor::from_fn(&[2, 2], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
            let mu = Tensor::zeros(&[2]);
            let d = gaussian_frechet_distance(&mu, &eye.scale(4.0), &mu, &eye)?;
            Ok(CheckOutcome::close(d, 2.0, 1e-12))
        }),
        Check::new("oracle.teacher_objective_composition", CheckKind::Oracle, objective_composition),
    ]
}

fn objective_composition() -> Result<CheckOutcome> {
    use crate::aniso_diffusion::{illumination_smoothness_loss, texture_loss};
    use crate::hvi_color::polarized_color_loss;
    use crate::nn_blocks::perceptual::{perceptual_loss, style_loss};
    let ex = FeatureExtractor::seeded(3, 3, 8)?;
    let mut rng = Rng::new(13);
    let mut u = |c: usize| unit(&mut rng, &[1, c, 6, 6]);
    let (pred, gt, r, l, input) = (u(3), u(3), u(3), u(1), u(3));
    let (k, s) = (1.3, 0.2);
    let mut t = Tape::new();
    let x = TeacherInputs {
        pred: t.constant(pred.clone())?,
        gt: t.constant(gt.clone())?,
        r_pred: t.constant(r.clone())?,
        l_pred: t.constant(l.clone())?,
        input: t.constant(input.clone())?,
    };
    let phys = PhysicsParams { k: t.scalar(k)?, s: t.scalar(s)? };
    let total = teacher_objective(&mut t, &x, &phys, &ex, &ObjectiveWeights::default())?.total;
    let total = t.item(total)?;
    let terms = [
        pred.sub(&gt)?.map(f64::abs).mean(),
        perceptual_loss(&pred, &gt, &ex)?,
        style_loss(&pred, &gt, &ex)?,
        texture_loss(&input, &r, &DiffusionParams::new(s))?,
        polarized_color_loss(&pred, &gt, &HviParams::new(k))?,
        illumination_smoothness_loss(&l)?,
    ];
    let w = [1.0, 1.0, 1.0, 0.05, 0.05, 0.2];
    let sum: f64 = terms.iter().zip(w).map(|(v, w)| v * w).sum();
    Ok(CheckOutcome::close(total, sum, 1e-10))
}

fn invariant_checks() -> Vec<Check> {
    vec![
        Check::new("invariant.softmax_rows_and_layer_norm_mean", CheckKind::Invariant, || {
            let mut t = Tape::new();
            let x = t.leaf(Rng::new(14).normal_tensor(&[4, 7]).scale(5.0))?;
            let s = t.softmax(x, 1)?;
            let n = t.layer_norm(x, 1, 1e-5)?;
            let rows: f64 = t.value(s)?.sum_axes(&[1])?.map(|v| v - 1.0).max_abs();
            let means = t.value(n)?.mean_axes(&[1])?.max_abs();
            let worst = rows.max(means);
            Ok(CheckOutcome::new(worst < 1e-10, worst, "softmax rows sum to 1, layer-norm rows have mean 0"))
        }),
        Check::new("invariant.gradient_linearity", CheckKind::Invariant, || {
            let x0 = Rng::new(15).normal_tensor::<f64>(&[3, 4]);
            let grad = |which: u8| -> Result<Tensor<f64>> {
                let mut t = Tape::new();
                let x = t.leaf(x0.clone())?;
                let e = t.exp(x)?;
                let a = t.mean(e)?;
                let s = t.softmax(x, 1)?;
                let s = t.square(s)?;
                let b = t.sum(s)?;
                let l = match which {
                    0 => a,
                    1 => b,
                    _ => t.add(a, b)?,
                };
                t.backward(l)?.get(x)
            };
            let d = grad(0)?.add(&grad(1)?)?.sub(&grad(2)?)?.max_abs();
            Ok(CheckOutcome::new(d < 1e-14, d, "∇(a+b) = ∇a + ∇b"))
        }),
        Check::new("invariant.anisotropic_zero_sum", CheckKind::Invariant, || {
            let x = Rng::new(16).uniform_tensor::<f64>(&[2, 3, 6, 6], 0.0, 1.0);
            let a = anisotropic_operator(&x, &DiffusionParams::new(0.1))?;
            let worst = a.sum_axes(&[2, 3])?.max_abs();
            Ok(CheckOutcome::new(worst < 1e-12, worst, "operator sums to 0 over each image plane"))
        }),
        Check::new("invariant.flex_mask_fraction", CheckKind::Invariant, || {
            let mut rng = Rng::new(17);
            let mut worst: f64 = f64::INFINITY;
            for _ in 0..20 {
                let x = Tensor::from_fn(&[2, 3, 4, 4], |_| (rng.below(7) as f64) - 3.0);
                let p = rng.uniform_range(0.05, 1.0);
                let frac = outlier_mask(&x, p)?.sum_axes(&[0, 2, 3])?.data().iter().map(|c| c / 32.0 - p).fold(f64::INFINITY, f64::min);
                worst = worst.min(frac);
            }
            Ok(CheckOutcome::new(worst >= -1e-12, worst, "kept fraction per channel minus p is never negative"))
        }),
        Check::new("invariant.multi_scale_balance", CheckKind::Invariant, || {
            let cfg = FlexConfig::default();
            let mut prev = f64::INFINITY;
            let mut ok = true;
            for side in [2, 4, 8, 16, 32, 64, 128] {
                let s = Tensor::from_fn(&[1, 1, side, side], |i| ((i[2] + i[3]) % 2) as f64 * 2.0 - 1.0);
                let l = flex_loss(&FeatureBundle::single(s.map(|v| v + 0.1)), &FeatureBundle::single(s), 0, &cfg)?;
                ok &= l <= prev + 1e-12;
                prev = l;
            }
            Ok(CheckOutcome::new(ok, prev, "per-layer cost of a fixed error is non-increasing in resolution"))
        }),
    ]
}

/// Every registered check, in a fixed order.
pub fn registry() -> Vec<Check> {
    let mut all = op_checks();
    all.extend(module_checks());
    all.extend(physics_and_loss_checks());
    all.extend(oracle_checks());
    all.extend(invariant_checks());
    all
}

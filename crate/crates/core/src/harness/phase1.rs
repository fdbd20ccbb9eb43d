//! Velocity-predictor training against frozen teacher features.

use std::path::Path;

use crate::autodiff::{Adam, Binding, ParamSet, Tape, Var};
use crate::error::{arg_err, Error, Result};
use crate::ndtensor::{Rng, Tensor};
use crate::nn_blocks::{load_params, save_params, VelocityPredictor};
use crate::rectflow::{
    euler_on_tape, euler_sample, trajectory_loss_on_tape, velocity_loss_on_tape, NetField, SamplerConfig,
};

use super::config::ExperimentConfig;
use super::data::{stack_pairs, ImagePair};
use super::metrics::MetricsRecord;
use super::teacher::{PriorFeatures, SyntheticTeacher};

/// Teacher encodings of degraded inputs (conditions) and clean targets.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub cond: PriorFeatures,
    pub target: PriorFeatures,
}

impl FeatureSet {
    pub fn encode(teacher: &SyntheticTeacher, pairs: &[ImagePair]) -> Result<Self> {
        let idx: Vec<usize> = (0..pairs.len()).collect();
        let (lq, gt) = stack_pairs(pairs, &idx)?;
        Ok(Self { cond: teacher.encode(&lq)?, target: teacher.encode(&gt)? })
    }

    pub fn len(&self) -> usize {
        self.cond.rex.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Copies rows `idx` of a `(N, D)` tensor.
pub fn gather_rows(t: &Tensor<f64>, idx: &[usize]) -> Result<Tensor<f64>> {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= t.shape()[0] {
            return Err(arg_err("gather_rows", format!("row {i} of {}", t.shape()[0])));
        }
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rex,
    Img,
}

/// The reflectance-prior and image-prior velocity predictors.
#[derive(Clone, Debug)]
pub struct FlowNets {
    pub rex: VelocityPredictor,
    pub img: VelocityPredictor,
    pub rex_params: ParamSet<f64>,
    pub img_params: ParamSet<f64>,
    pub trained: bool,
}

impl FlowNets {
    pub fn new(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<Self> {
        let mut rex_params = ParamSet::new();
        let mut img_params = ParamSet::new();
        let rex = VelocityPredictor::new(&mut rex_params, "vel_rex", cfg.feature_dim, cfg.hidden_dim, cfg.t_max, rng)?;
        let img = VelocityPredictor::new(&mut img_params, "vel_img", cfg.feature_dim, cfg.hidden_dim, cfg.t_max, rng)?;
        Ok(Self { rex, img, rex_params, img_params, trained: false })
    }

    pub fn field(&self, s: Stream) -> NetField<'_, f64> {
        match s {
            Stream::Rex => NetField { net: &self.rex, params: &self.rex_params },
            Stream::Img => NetField { net: &self.img, params: &self.img_params },
        }
    }

    /// Euler sample from `z` conditioned on `c`; returns `[z, x¹, …, x^N]`.
    pub fn sample_path(&self, s: Stream, z: &Tensor<f64>, c: &Tensor<f64>, steps: usize) -> Result<Vec<Tensor<f64>>> {
        let (_, traj) = euler_sample(&self.field(s), z, c, &SamplerConfig::rectified(steps))?;
        let mut path = vec![z.clone()];
        path.extend(traj);
        Ok(path)
    }

    pub fn checksum(&self) -> (u64, u64) {
        (self.rex_params.checksum(), self.img_params.checksum())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_params(&self.rex_params, &dir.join("rex"))?;
        save_params(&self.img_params, &dir.join("img"))
    }

    /// Loads parameters saved by [`FlowNets::save`] into freshly built nets.
    pub fn load(cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut nets = Self::new(cfg, &mut Rng::new(0))?;
        load_params(&mut nets.rex_params, &dir.join("rex"))?;
        load_params(&mut nets.img_params, &dir.join("img"))?;
        nets.trained = true;
        Ok(nets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Summary {
    pub iterations: usize,
    /// `L_vel^rex + L_vel^img` on a fixed probe batch before and after training.
    pub initial_vel: f64,
    pub final_vel: f64,
}

struct StreamVars {
    vel: Var,
    kd: Var,
    traj: Var,
}

#[allow(clippy::too_many_arguments)]
fn stream_losses(
    tape: &mut Tape<f64>,
    net: &VelocityPredictor,
    bind: &Binding,
    z: &Tensor<f64>,
    f: &Tensor<f64>,
    c: &Tensor<f64>,
    times: &[f64],
    steps: usize,
) -> Result<StreamVars> {
    let (zv, fv, cv) = (tape.constant(z.clone())?, tape.constant(f.clone())?, tape.constant(c.clone())?);
    let vel = velocity_loss_on_tape(tape, net, bind, zv, fv, cv, times)?;
    let traj = euler_on_tape(tape, net, bind, zv, cv, steps)?;
    let last = *traj.last().expect("at least one step");
    let d = tape.sub(last, fv)?;
    let d = tape.square(d)?;
    let kd = tape.mean(d)?;
    let traj = trajectory_loss_on_tape(tape, &traj, fv)?.total;
    Ok(StreamVars { vel, kd, traj })
}

/// Velocity loss of both nets on a fixed probe (first ≤ 64 items, seeded noise and times).
pub fn probe_velocity_loss(cfg: &ExperimentConfig, nets: &FlowNets, feats: &FeatureSet) -> Result<f64> {
    let n = feats.len().min(64);
    let idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(cfg.seed).derive(0x9e0b);
    let mut total = 0.0;
    for (net, ps, c, f) in [
        (&nets.rex, &nets.rex_params, &feats.cond.rex, &feats.target.rex),
        (&nets.img, &nets.img_params, &feats.cond.img, &feats.target.img),
    ] {
        let z = rng.normal_tensor(&[n, cfg.feature_dim]);
        let times: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape)?;
        let (zv, fv, cv) = (
            tape.constant(z)?,
            tape.constant(gather_rows(f, &idx)?)?,
            tape.constant(gather_rows(c, &idx)?)?,
        );
        let l = velocity_loss_on_tape(&mut tape, net, &bind, zv, fv, cv, &times)?;
        total += tape.item(l)?;
    }
    Ok(total)
}

fn abort(metrics: &mut Vec<MetricsRecord>, phase: &str, it: usize, e: Error) -> Error {
    metrics.push(MetricsRecord::new(&format!("{phase}-abort"), it));
    e
}

/// Minimizes `L_vel^rex + L_vel^img + λ_KD·L_KD + λ_traj·L_traj` with one
/// Adam optimizer per predictor. `L_KD` is the mean squared error between
/// the final Euler sample and the teacher feature.
pub fn train_phase1(
    cfg: &ExperimentConfig,
    nets: &mut FlowNets,
    feats: &FeatureSet,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<Phase1Summary> {
    cfg.validate()?;
    let initial_vel = probe_velocity_loss(cfg, nets, feats)?;
    let mut rng = Rng::new(cfg.seed).derive(1);
    let mut opt_rex = Adam::new(cfg.lr_rex);
    let mut opt_img = Adam::new(cfg.lr_img);
    let start = std::time::Instant::now();
    for it in 0..cfg.phase1_iters {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(feats.len())).collect();
        let z_rex = rng.normal_tensor(&[cfg.batch_size, cfg.feature_dim]);
        let z_img = rng.normal_tensor(&[cfg.batch_size, cfg.feature_dim]);
        let t_rex: Vec<f64> = (0..cfg.batch_size).map(|_| rng.uniform()).collect();
        let t_img: Vec<f64> = (0..cfg.batch_size).map(|_| rng.uniform()).collect();
        let step = || -> Result<_> {
            let mut tape = Tape::new();
            let br = nets.rex_params.bind(&mut tape)?;
            let bi = nets.img_params.bind(&mut tape)?;
            let g = |t: &Tensor<f64>| gather_rows(t, &idx);
            let r = stream_losses(&mut tape, &nets.rex, &br, &z_rex, &g(&feats.target.rex)?, &g(&feats.cond.rex)?, &t_rex, cfg.t_max)?;
            let i = stream_losses(&mut tape, &nets.img, &bi, &z_img, &g(&feats.target.img)?, &g(&feats.cond.img)?, &t_img, cfg.t_max)?;
            let kd = tape.add(r.kd, i.kd)?;
            let traj = tape.add(r.traj, i.traj)?;
            let kd_w = tape.scale(kd, cfg.lambda_kd)?;
            let traj_w = tape.scale(traj, cfg.lambda_traj)?;
            let total = tape.add(r.vel, i.vel)?;
            let total = tape.add(total, kd_w)?;
            let total = tape.add(total, traj_w)?;
            let mut rec = MetricsRecord::new("phase1", it);
            rec.total = Some(tape.item(total)?);
            rec.vel_rex = Some(tape.item(r.vel)?);
            rec.vel_img = Some(tape.item(i.vel)?);
            rec.kd = Some(tape.item(kd_w)?);
            rec.traj = Some(tape.item(traj_w)?);
            rec.feature_mse = Some(tape.item(kd)? / 2.0);
            let grads = tape.backward(total)?;
            Ok((rec, br, bi, grads))
        };
        let (mut rec, br, bi, grads) = step().map_err(|e| abort(metrics, "phase1", it, e))?;
        nets.rex_params.zero_grad();
        nets.img_params.zero_grad();
        nets.rex_params.accumulate(&br, &grads)?;
        nets.img_params.accumulate(&bi, &grads)?;
        opt_rex.step(&mut nets.rex_params);
        opt_img.step(&mut nets.img_params);
        if it % cfg.log_every == 0 || it + 1 == cfg.phase1_iters {
            rec.steps = Some(cfg.t_max);
            if cfg.timing {
                rec.wall_ms = start.elapsed().as_millis() as u64;
            }
            metrics.push(rec);
        }
    }
    if cfg.phase1_iters > 0 {
        nets.trained = true;
    }
    let final_vel = probe_velocity_loss(cfg, nets, feats)?;
    Ok(Phase1Summary { iterations: cfg.phase1_iters, initial_vel, final_vel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synth_dataset;

    pub(crate) fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            hidden_dim: 32,
            batch_size: 4,
            phase1_iters: 6,
            phase2_iters: 6,
            ddim_iters: 6,
            teacher_warmup_iters: 4,
            train_pairs: 8,
            heldout_pairs: 4,
            eval_samples: 16,
            log_every: 2,
            image_size: 8,
            ..ExperimentConfig::default()
        }
    }

    fn setup(cfg: &ExperimentConfig) -> (FlowNets, FeatureSet) {
        let pairs = synth_dataset(&mut Rng::new(1), cfg.train_pairs, cfg.image_size).unwrap();
        let feats = FeatureSet::encode(&SyntheticTeacher::seeded(2), &pairs).unwrap();
        (FlowNets::new(cfg, &mut Rng::new(3)).unwrap(), feats)
    }

    #[test]
    fn zero_iterations_leave_nets_unchanged() {
        let cfg = ExperimentConfig { phase1_iters: 0, ..small_cfg() };
        let (mut nets, feats) = setup(&cfg);
        let before = nets.checksum();
        let mut m = Vec::new();
        let s = train_phase1(&cfg, &mut nets, &feats, &mut m).unwrap();
        assert_eq!(nets.checksum(), before);
        assert!(m.is_empty() && !nets.trained);
        assert_eq!(s.initial_vel, s.final_vel);
    }

    #[test]
    fn records_add_up_and_training_is_deterministic() {
        let cfg = small_cfg();
        let run = || {
            let (mut nets, feats) = setup(&cfg);
            let mut m = Vec::new();
            train_phase1(&cfg, &mut nets, &feats, &mut m).unwrap();
            (nets.checksum(), m)
        };
        let (c1, m1) = run();
        let (c2, m2) = run();
        assert_eq!((c1, &m1), (c2, &m2));
        assert_eq!(m1.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
        for r in &m1 {
            assert!((r.total.unwrap() - r.component_sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let cfg = small_cfg();
        let (nets, _) = setup(&cfg);
        let dir = tempfile::tempdir().unwrap();
        nets.save(dir.path()).unwrap();
        let back = FlowNets::load(&cfg, dir.path()).unwrap();
        assert_eq!(back.checksum(), nets.checksum());
        assert!(back.trained);
    }
}

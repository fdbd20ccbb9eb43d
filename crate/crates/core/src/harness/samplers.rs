//! Few-step sampler comparison: trained rectified flow against a trained
//! DDIM baseline on the reflectance-prior features.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{Adam, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::ndtensor::{frechet_between_samples, Rng, Tensor};
use crate::nn_blocks::VelocityPredictor;
use crate::rectflow::{
    ddim_baseline_sample, euler_sample, noise_loss_on_tape, CosineSchedule, NetField, SamplerConfig, SamplerKind,
};

use super::config::ExperimentConfig;
use super::phase1::{gather_rows, FeatureSet, FlowNets, Stream};

/// ε-prediction network on a cosine schedule.
#[derive(Clone, Debug)]
pub struct DdimBaseline {
    pub net: VelocityPredictor,
    pub params: ParamSet<f64>,
    pub schedule: CosineSchedule,
    /// Radius for clipping `x̂₀`, set from the training data's range.
    pub x0_clip: Option<f64>,
    pub trained: bool,
}

impl DdimBaseline {
    pub fn new(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<Self> {
        let schedule = CosineSchedule::new(cfg.ddim_timesteps, 0.008)?;
        let mut params = ParamSet::new();
        let net = VelocityPredictor::new(&mut params, "ddim", cfg.feature_dim, cfg.hidden_dim, cfg.ddim_timesteps - 1, rng)?;
        Ok(Self { net, params, schedule, x0_clip: None, trained: false })
    }

    pub fn sample(&self, z: &Tensor<f64>, c: &Tensor<f64>, steps: usize) -> Result<Tensor<f64>> {
        let field = NetField { net: &self.net, params: &self.params };
        let mut sc = SamplerConfig::ddim(steps);
        sc.x0_clip = self.x0_clip;
        ddim_baseline_sample(&field, &self.schedule, z, c, &sc)
    }
}

/// Trains the baseline on the same conditioned feature task as the flow;
/// returns the per-iteration loss.
pub fn train_ddim(cfg: &ExperimentConfig, ddim: &mut DdimBaseline, feats: &FeatureSet) -> Result<Vec<f64>> {
    let mut rng = Rng::new(cfg.seed).derive(3);
    let mut opt = Adam::new(cfg.lr_ddim);
    let mut history = Vec::with_capacity(cfg.ddim_iters);
    for _ in 0..cfg.ddim_iters {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(feats.len())).collect();
        let eps = rng.normal_tensor(&[cfg.batch_size, cfg.feature_dim]);
        let t_idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(cfg.ddim_timesteps)).collect();
        let x0 = gather_rows(&feats.target.rex, &idx)?;
        let mut tape = Tape::new();
        let bind = ddim.params.bind(&mut tape)?;
        let c = tape.constant(gather_rows(&feats.cond.rex, &idx)?)?;
        let l = noise_loss_on_tape(&mut tape, &ddim.net, &bind, &ddim.schedule, &x0, &eps, c, &t_idx)?;
        history.push(tape.item(l)?);
        let g = tape.backward(l)?;
        ddim.params.zero_grad();
        ddim.params.accumulate(&bind, &g)?;
        opt.step(&mut ddim.params);
    }
    if cfg.ddim_iters > 0 {
        ddim.x0_clip = Some(feats.target.rex.max_abs());
        ddim.trained = true;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplerRow {
    pub sampler: String,
    pub steps: usize,
    pub frechet: f64,
    pub mse: f64,
    pub wall_ms: u64,
}

/// For each step count, samples one feature per evaluation item with both
/// samplers from shared noise and scores them against the teacher features.
pub fn compare_samplers(
    cfg: &ExperimentConfig,
    nets: &FlowNets,
    ddim: &DdimBaseline,
    eval: &FeatureSet,
) -> Result<Vec<SamplerRow>> {
    if !nets.trained {
        return Err(Error::Untrained("rectified-flow predictor".into()));
    }
    if !ddim.trained {
        return Err(Error::Untrained("DDIM baseline".into()));
    }
    let (c, f) = (&eval.cond.rex, &eval.target.rex);
    let z = Rng::new(cfg.seed).derive(4).normal_tensor(&[eval.len(), cfg.feature_dim]);
    let mut rows = Vec::new();
    for kind in [SamplerKind::RectifiedFlow, SamplerKind::DdimBaseline] {
        for &steps in &cfg.sampler_steps {
            let start = Instant::now();
            let x = match kind {
                SamplerKind::RectifiedFlow => euler_sample(&nets.field(Stream::Rex), &z, c, &SamplerConfig::rectified(steps))?.0,
                SamplerKind::DdimBaseline => ddim.sample(&z, c, steps)?,
            };
            let wall_ms = if cfg.timing { start.elapsed().as_millis() as u64 } else { 0 };
            let d = x.sub(f)?;
            rows.push(SamplerRow {
                sampler: kind.name().to_string(),
                steps,
                frechet: frechet_between_samples(&x, f)?,
                mse: d.sq_norm() / d.len() as f64,
                wall_ms,
            });
        }
    }
    Ok(rows)
}

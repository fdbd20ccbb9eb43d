//! End-to-end runs: shared data and teacher setup, both training phases,
//! and the sampler experiment.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndtensor::{frechet_between_samples, Rng};
use crate::rectflow::{euler_sample, SamplerConfig};

use super::config::ExperimentConfig;
use super::data::{synth_dataset, ImagePair};
use super::metrics::{write_records, MetricsRecord};
use super::phase1::{train_phase1, FeatureSet, FlowNets, Phase1Summary, Stream};
use super::phase2::{train_phase2, warm_up_teacher, Phase2Summary, RestorerModel};
use super::samplers::{compare_samplers, train_ddim, DdimBaseline, SamplerRow};
use super::teacher::SyntheticTeacher;

/// Data, frozen teacher and its encodings for one seed.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub teacher: SyntheticTeacher,
    pub train: Vec<ImagePair>,
    pub heldout: Vec<ImagePair>,
    pub train_feats: FeatureSet,
    pub heldout_feats: FeatureSet,
    pub eval_feats: FeatureSet,
}

impl Workspace {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let teacher = SyntheticTeacher::seeded(root.derive(13).next_u64());
        let train = synth_dataset(&mut root.derive(10), cfg.train_pairs, cfg.image_size)?;
        let heldout = synth_dataset(&mut root.derive(11), cfg.heldout_pairs, cfg.image_size)?;
        let eval = synth_dataset(&mut root.derive(12), cfg.eval_samples, cfg.image_size)?;
        Ok(Self {
            train_feats: FeatureSet::encode(&teacher, &train)?,
            heldout_feats: FeatureSet::encode(&teacher, &heldout)?,
            eval_feats: FeatureSet::encode(&teacher, &eval)?,
            cfg: cfg.clone(),
            teacher,
            train,
            heldout,
        })
    }

    pub fn init_flow_nets(&self) -> Result<FlowNets> {
        FlowNets::new(&self.cfg, &mut Rng::new(self.cfg.seed).derive(20))
    }

    pub fn init_student(&self) -> Result<RestorerModel> {
        RestorerModel::new("student", &self.cfg, &mut Rng::new(self.cfg.seed).derive(21))
    }

    pub fn init_teacher_restorer(&self) -> Result<RestorerModel> {
        RestorerModel::new("teacher", &self.cfg, &mut Rng::new(self.cfg.seed).derive(22))
    }

    pub fn init_ddim(&self) -> Result<DdimBaseline> {
        DdimBaseline::new(&self.cfg, &mut Rng::new(self.cfg.seed).derive(23))
    }

    /// Evaluation record: Fréchet distance and feature MSE of `t_max`-step
    /// samples on the evaluation set.
    pub fn eval_record(&self, nets: &FlowNets, phase: &str) -> Result<MetricsRecord> {
        let f = &self.eval_feats;
        let z = Rng::new(self.cfg.seed).derive(4).normal_tensor(&[f.len(), self.cfg.feature_dim]);
        let (x, _) = euler_sample(&nets.field(Stream::Rex), &z, &f.cond.rex, &SamplerConfig::rectified(self.cfg.t_max))?;
        let d = x.sub(&f.target.rex)?;
        let mut r = MetricsRecord::new(phase, 0);
        r.feature_mse = Some(d.sq_norm() / d.len() as f64);
        r.frechet = Some(frechet_between_samples(&x, &f.target.rex)?);
        r.steps = Some(self.cfg.t_max);
        Ok(r)
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub phase1: Phase1Summary,
    pub phase2: Phase2Summary,
    pub metrics: Vec<MetricsRecord>,
    /// Student parameters were bitwise unchanged across phase 1.
    pub student_frozen_in_phase1: bool,
    pub nets: FlowNets,
    pub student: RestorerModel,
}

/// Phase 1 with an evaluation record appended.
pub fn run_phase1(ws: &Workspace, metrics: &mut Vec<MetricsRecord>) -> Result<(FlowNets, Phase1Summary)> {
    let mut nets = ws.init_flow_nets()?;
    let summary = train_phase1(&ws.cfg, &mut nets, &ws.train_feats, metrics)?;
    metrics.push(ws.eval_record(&nets, "phase1-eval")?);
    Ok((nets, summary))
}

/// Teacher warm-up followed by phase 2.
pub fn run_phase2(
    ws: &Workspace,
    nets: &mut FlowNets,
    student: &mut RestorerModel,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<Phase2Summary> {
    let mut teacher = ws.init_teacher_restorer()?;
    warm_up_teacher(&ws.cfg, &mut teacher, &ws.train, &ws.train_feats)?;
    train_phase2(&ws.cfg, student, &teacher, nets, &ws.train, &ws.train_feats, &ws.heldout, &ws.heldout_feats, metrics)
}

/// Both phases. The student exists from the start so phase 1's freeze can be checked.
pub fn distill(cfg: &ExperimentConfig) -> Result<DistillOutcome> {
    let ws = Workspace::prepare(cfg)?;
    let mut metrics = Vec::new();
    let mut student = ws.init_student()?;
    let before = student.params.checksum();
    let (mut nets, phase1) = run_phase1(&ws, &mut metrics)?;
    let student_frozen_in_phase1 = student.params.checksum() == before;
    if !student_frozen_in_phase1 {
        return Err(Error::Format("student parameters changed during phase 1".into()));
    }
    let phase2 = run_phase2(&ws, &mut nets, &mut student, &mut metrics)?;
    Ok(DistillOutcome { phase1, phase2, metrics, student_frozen_in_phase1, nets, student })
}

/// Trains the flow (phase 1) and the DDIM baseline, then compares them.
pub fn sampler_experiment(cfg: &ExperimentConfig) -> Result<Vec<SamplerRow>> {
    let ws = Workspace::prepare(cfg)?;
    let (nets, _) = run_phase1(&ws, &mut Vec::new())?;
    let mut ddim = ws.init_ddim()?;
    train_ddim(cfg, &mut ddim, &ws.train_feats)?;
    compare_samplers(cfg, &nets, &ddim, &ws.eval_feats)
}

pub fn write_metrics(path: impl AsRef<Path>, metrics: &[MetricsRecord]) -> Result<()> {
    write_records(path, metrics)
}

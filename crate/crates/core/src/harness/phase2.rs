//! Student training on flow-sampled prior features with reconstruction,
//! FLEX alignment to a frozen teacher-side block, and continued velocity
//! matching.

use crate::autodiff::{Adam, Binding, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::flexloss::{flex_loss_on_tape, FlexConfig, FlexLayerVars};
use crate::ndtensor::{Rng, Tensor};
use crate::nn_blocks::{BlockOutput, Conv3x3, Linear, ToyBlock};
use crate::rectflow::velocity_loss_on_tape;

use super::config::ExperimentConfig;
use super::data::{stack_pairs, ImagePair};
use super::metrics::MetricsRecord;
use super::phase1::{gather_rows, FeatureSet, FlowNets, Stream};
use super::teacher::PriorFeatures;

/// `pred = lq + head(block(stem(lq) + W·img, rex))`.
#[derive(Clone, Debug)]
pub struct Restorer {
    pub stem: Conv3x3,
    pub img_bias: Linear,
    pub block: ToyBlock,
    pub head: Conv3x3,
}

/// Restored image plus the block's residual-stream activations.
#[derive(Clone, Copy, Debug)]
pub struct RestorerOutput {
    pub pred: Var,
    pub block: BlockOutput,
}

impl Restorer {
    pub fn new(ps: &mut ParamSet<f64>, name: &str, cfg: &ExperimentConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            stem: Conv3x3::new(ps, &format!("{name}.stem"), 3, c, 1.0, rng),
            img_bias: Linear::new(ps, &format!("{name}.img"), cfg.feature_dim, c, 0.1, rng),
            block: ToyBlock::new(ps, &format!("{name}.block"), c, cfg.heads, rng)?,
            head: Conv3x3::new(ps, &format!("{name}.head"), c, 3, 0.1, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape<f64>, bind: &Binding, lq: Var, rex: Var, img: Var) -> Result<RestorerOutput> {
        let h = self.stem.forward(tape, bind, lq)?;
        let bias = self.img_bias.forward(tape, bind, img)?;
        let s = tape.shape(bias)?;
        let bias = tape.reshape(bias, &[s[0], s[1], 1, 1])?;
        let h = tape.add(h, bias)?;
        let block = self.block.forward(tape, bind, h, rex)?;
        let y = self.head.forward(tape, bind, block.out)?;
        let pred = tape.add(lq, y)?;
        Ok(RestorerOutput { pred, block })
    }
}

/// A restorer with its parameters.
#[derive(Clone, Debug)]
pub struct RestorerModel {
    pub net: Restorer,
    pub params: ParamSet<f64>,
}

impl RestorerModel {
    pub fn new(name: &str, cfg: &ExperimentConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = Restorer::new(&mut params, name, cfg, rng)?;
        Ok(Self { net, params })
    }

    /// Gradient-free forward; returns `(pred, post_attn, out)`.
    pub fn run(&self, lq: &Tensor<f64>, feats: &PriorFeatures) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape)?;
        let (x, r, i) = (tape.constant(lq.clone())?, tape.constant(feats.rex.clone())?, tape.constant(feats.img.clone())?);
        let o = self.net.forward(&mut tape, &bind, x, r, i)?;
        Ok((
            tape.value(o.pred)?.clone(),
            tape.value(o.block.post_attn)?.clone(),
            tape.value(o.block.out)?.clone(),
        ))
    }

    /// `mean |pred − gt|` over the given pairs with the given features.
    pub fn l1(&self, pairs: &[ImagePair], feats: &PriorFeatures) -> Result<f64> {
        let idx: Vec<usize> = (0..pairs.len()).collect();
        let (lq, gt) = stack_pairs(pairs, &idx)?;
        let (pred, _, _) = self.run(&lq, feats)?;
        Ok(pred.sub(&gt)?.map(f64::abs).mean())
    }
}

fn l1_on_tape(tape: &mut Tape<f64>, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

fn rows(f: &PriorFeatures, idx: &[usize]) -> Result<PriorFeatures> {
    Ok(PriorFeatures { rex: gather_rows(&f.rex, idx)?, img: gather_rows(&f.img, idx)? })
}

/// Fits the teacher-side restorer on the true teacher features of the clean
/// images, then freezes it. Returns the per-iteration L1.
pub fn warm_up_teacher(
    cfg: &ExperimentConfig,
    model: &mut RestorerModel,
    pairs: &[ImagePair],
    feats: &FeatureSet,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(cfg.seed).derive(6);
    let mut opt = Adam::new(cfg.lr_teacher_warmup);
    let mut history = Vec::with_capacity(cfg.teacher_warmup_iters);
    for _ in 0..cfg.teacher_warmup_iters {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(pairs.len())).collect();
        let (lq, gt) = stack_pairs(pairs, &idx)?;
        let f = rows(&feats.target, &idx)?;
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape)?;
        let (x, g) = (tape.constant(lq)?, tape.constant(gt)?);
        let (r, i) = (tape.constant(f.rex)?, tape.constant(f.img)?);
        let o = model.net.forward(&mut tape, &bind, x, r, i)?;
        let l = l1_on_tape(&mut tape, o.pred, g)?;
        history.push(tape.item(l)?);
        let grads = tape.backward(l)?;
        model.params.zero_grad();
        model.params.accumulate(&bind, &grads)?;
        opt.step(&mut model.params);
    }
    model.params.freeze();
    Ok(history)
}

/// Flow-sampled features at noise level `t_idx`: the Euler state at flow
/// time `(t_max − t_idx)/t_max`, so `t_idx = 0` is the finished sample.
pub fn sampled_features(
    nets: &FlowNets,
    cond: &PriorFeatures,
    z_rex: &Tensor<f64>,
    z_img: &Tensor<f64>,
    t_idx: usize,
    t_max: usize,
) -> Result<PriorFeatures> {
    let k = t_max - t_idx.min(t_max);
    let rex = nets.sample_path(Stream::Rex, z_rex, &cond.rex, t_max)?.swap_remove(k);
    let img = nets.sample_path(Stream::Img, z_img, &cond.img, t_max)?.swap_remove(k);
    Ok(PriorFeatures { rex, img })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Summary {
    pub iterations: usize,
    pub heldout_l1_initial: f64,
    pub heldout_l1_final: f64,
    pub teacher_heldout_l1: f64,
    pub flex_active_fraction: f64,
}

/// Held-out L1 with fully sampled features from fixed noise.
pub fn heldout_l1(cfg: &ExperimentConfig, student: &RestorerModel, nets: &FlowNets, heldout: &[ImagePair], feats: &FeatureSet) -> Result<f64> {
    let mut rng = Rng::new(cfg.seed).derive(5);
    let n = heldout.len();
    let z_rex = rng.normal_tensor(&[n, cfg.feature_dim]);
    let z_img = rng.normal_tensor(&[n, cfg.feature_dim]);
    let f = sampled_features(nets, &feats.cond, &z_rex, &z_img, 0, cfg.t_max)?;
    student.l1(heldout, &f)
}

/// Minimizes `L_rec + λ_FLEX·L_FLEX + λ_vel·(L_vel^rex + L_vel^img)`.
///
/// Each iteration draws one timestep `t ∈ {0, …, t_max}` for the batch; the
/// student sees flow features at that noise level and FLEX is gated on it.
#[allow(clippy::too_many_arguments)]
pub fn train_phase2(
    cfg: &ExperimentConfig,
    student: &mut RestorerModel,
    teacher: &RestorerModel,
    nets: &mut FlowNets,
    train: &[ImagePair],
    train_feats: &FeatureSet,
    heldout: &[ImagePair],
    heldout_feats: &FeatureSet,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<Phase2Summary> {
    cfg.validate()?;
    if !nets.trained {
        return Err(Error::Untrained("phase-2 needs trained velocity predictors".into()));
    }
    let flex_cfg = FlexConfig { t_max: cfg.t_max, ..FlexConfig::default() };
    let heldout_l1_initial = heldout_l1(cfg, student, nets, heldout, heldout_feats)?;
    let teacher_heldout_l1 = teacher.l1(heldout, &heldout_feats.target)?;
    let mut rng = Rng::new(cfg.seed).derive(2);
    let mut opt_student = Adam::new(cfg.lr_phase2);
    let mut opt_rex = Adam::new(cfg.lr_phase2);
    let mut opt_img = Adam::new(cfg.lr_phase2);
    let start = std::time::Instant::now();
    let mut active = 0usize;
    for it in 0..cfg.phase2_iters {
        let b = cfg.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| rng.below(train.len())).collect();
        let t_idx = rng.below(cfg.t_max + 1);
        let z_rex = rng.normal_tensor(&[b, cfg.feature_dim]);
        let z_img = rng.normal_tensor(&[b, cfg.feature_dim]);
        let zv_rex = rng.normal_tensor(&[b, cfg.feature_dim]);
        let zv_img = rng.normal_tensor(&[b, cfg.feature_dim]);
        let tv_rex: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
        let tv_img: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
        let is_active = flex_cfg.active(t_idx);
        active += is_active as usize;

        let step = || -> Result<_> {
            let (lq, gt) = stack_pairs(train, &idx)?;
            let cond = rows(&train_feats.cond, &idx)?;
            let target = rows(&train_feats.target, &idx)?;
            let sampled = sampled_features(nets, &cond, &z_rex, &z_img, t_idx, cfg.t_max)?;
            let (_, t_post, t_out) = teacher.run(&lq, &target)?;

            let mut tape = Tape::new();
            let bs = student.params.bind(&mut tape)?;
            let br = nets.rex_params.bind(&mut tape)?;
            let bi = nets.img_params.bind(&mut tape)?;
            let (x, g) = (tape.constant(lq)?, tape.constant(gt)?);
            let (sr, si) = (tape.constant(sampled.rex)?, tape.constant(sampled.img)?);
            let o = student.net.forward(&mut tape, &bs, x, sr, si)?;
            let rec = l1_on_tape(&mut tape, o.pred, g)?;
            let layers = [
                FlexLayerVars { teach: tape.constant(t_post)?, stud: o.block.post_attn, weight: 1.0 },
                FlexLayerVars { teach: tape.constant(t_out)?, stud: o.block.out, weight: 1.0 },
            ];
            let flex = flex_loss_on_tape(&mut tape, &layers, t_idx, &flex_cfg)?;
            let flex = tape.scale(flex, cfg.lambda_flex)?;

            let mut vel = Vec::with_capacity(2);
            for (net, bind, z, tv, f, c) in [
                (&nets.rex, &br, &zv_rex, &tv_rex, &target.rex, &cond.rex),
                (&nets.img, &bi, &zv_img, &tv_img, &target.img, &cond.img),
            ] {
                let (zv, fv, cv) = (tape.constant(z.clone())?, tape.constant(f.clone())?, tape.constant(c.clone())?);
                let l = velocity_loss_on_tape(&mut tape, net, bind, zv, fv, cv, tv)?;
                vel.push(tape.scale(l, cfg.lambda_vel)?);
            }
            let total = tape.add(rec, flex)?;
            let total = tape.add(total, vel[0])?;
            let total = tape.add(total, vel[1])?;

            let mut r = MetricsRecord::new("phase2", it);
            r.total = Some(tape.item(total)?);
            r.rec = Some(tape.item(rec)?);
            r.flex = Some(tape.item(flex)?);
            r.vel_rex = Some(tape.item(vel[0])?);
            r.vel_img = Some(tape.item(vel[1])?);
            r.flex_active = Some(is_active);
            r.steps = Some(cfg.t_max);
            let grads = tape.backward(total)?;
            Ok((r, bs, br, bi, grads))
        };
        let (mut rec, bs, br, bi, grads) = step().inspect_err(|_| {
            metrics.push(MetricsRecord::new("phase2-abort", it));
        })?;
        for (ps, bind) in [(&mut student.params, &bs), (&mut nets.rex_params, &br), (&mut nets.img_params, &bi)] {
            ps.zero_grad();
            ps.accumulate(bind, &grads)?;
        }
        opt_student.step(&mut student.params);
        opt_rex.step(&mut nets.rex_params);
        opt_img.step(&mut nets.img_params);
        if it % cfg.log_every == 0 || it + 1 == cfg.phase2_iters {
            if cfg.timing {
                rec.wall_ms = start.elapsed().as_millis() as u64;
            }
            metrics.push(rec);
        }
    }
    let heldout_l1_final = heldout_l1(cfg, student, nets, heldout, heldout_feats)?;
    Ok(Phase2Summary {
        iterations: cfg.phase2_iters,
        heldout_l1_initial,
        heldout_l1_final,
        teacher_heldout_l1,
        flex_active_fraction: if cfg.phase2_iters == 0 { 0.0 } else { active as f64 / cfg.phase2_iters as f64 },
    })
}

//! Teacher training objective:
//! `L_rec + L_vgg + L_sty + 0.05·L_tex + 0.05·L_col + 0.2·L_lum`.

use crate::aniso_diffusion::{illumination_smoothness_loss_on_tape, texture_loss_on_tape};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::hvi_color::{polarized_color_loss_on_tape, HVI_EPS};
use crate::scalar::Scalar;

use super::perceptual::{perceptual_from_features, style_from_features, FeatureExtractor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub rec: f64,
    pub vgg: f64,
    pub sty: f64,
    pub tex: f64,
    pub col: f64,
    pub lum: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { rec: 1.0, vgg: 1.0, sty: 1.0, tex: 0.05, col: 0.05, lum: 0.2 }
    }
}

impl ObjectiveWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.rec, self.vgg, self.sty, self.tex, self.col, self.lum]
    }
}

/// Every term of the objective plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct TeacherLoss {
    pub total: Var,
    pub rec: Var,
    pub vgg: Var,
    pub sty: Var,
    pub tex: Var,
    pub col: Var,
    pub lum: Var,
}

impl TeacherLoss {
    pub fn components(&self) -> [(&'static str, Var); 6] {
        [
            ("rec", self.rec),
            ("vgg", self.vgg),
            ("sty", self.sty),
            ("tex", self.tex),
            ("col", self.col),
            ("lum", self.lum),
        ]
    }
}

/// Tensors feeding the objective.
#[derive(Clone, Copy, Debug)]
pub struct TeacherInputs {
    /// Restored image `(B,3,H,W)`.
    pub pred: Var,
    pub gt: Var,
    /// Predicted reflectance `(B,3,H,W)`.
    pub r_pred: Var,
    /// Predicted illumination `(B,1,H,W)`.
    pub l_pred: Var,
    /// Degraded input image `(B,3,H,W)`.
    pub input: Var,
}

/// Learnable scalars `k` (colour density) and `s` (diffusion sensitivity), each `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct PhysicsParams {
    pub k: Var,
    pub s: Var,
}

/// L_col is evaluated on `pred` clamped to `[0,1]` since the colour
/// transform is only defined there.
pub fn teacher_objective<T: Scalar>(
    tape: &mut Tape<T>,
    x: &TeacherInputs,
    phys: &PhysicsParams,
    extractor: &FeatureExtractor<T>,
    w: &ObjectiveWeights,
) -> Result<TeacherLoss> {
    let (ps, gs) = (tape.shape(x.pred)?, tape.shape(x.gt)?);
    if ps != gs {
        return Err(shape_err("teacher_objective", format!("pred {ps:?} vs gt {gs:?}")));
    }
    let d = tape.sub(x.pred, x.gt)?;
    let d = tape.abs(d)?;
    let rec = tape.mean(d)?;

    let fp = extractor.features(tape, x.pred)?;
    let fg = extractor.features(tape, x.gt)?;
    let vgg = perceptual_from_features(tape, &fp, &fg, &extractor.layer_weights)?;
    let sty = style_from_features(tape, &fp, &fg)?;

    let tex = texture_loss_on_tape(tape, x.input, x.r_pred, phys.s)?;
    let pred01 = tape.clamp(x.pred, T::zero(), T::one())?;
    let col = polarized_color_loss_on_tape(tape, pred01, x.gt, phys.k, T::lit(HVI_EPS))?;
    let lum = illumination_smoothness_loss_on_tape(tape, x.l_pred)?;

    let mut total = tape.scale(rec, T::lit(w.rec))?;
    for (v, wt) in [(vgg, w.vgg), (sty, w.sty), (tex, w.tex), (col, w.col), (lum, w.lum)] {
        let term = tape.scale(v, T::lit(wt))?;
        total = tape.add(total, term)?;
    }
    Ok(TeacherLoss { total, rec, vgg, sty, tex, col, lum })
}

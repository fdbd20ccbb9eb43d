//! Frozen seeded encoder standing in for the pretrained prior encoders.

use crate::autodiff::{ParamSet, Tape};
use crate::error::Result;
use crate::ndtensor::{dims4, pixel_unshuffle, Rng, Tensor};
use crate::nn_blocks::{Conv3x3, Linear, PRIOR_DIM, PRIOR_REX};

const WIDTH: usize = 32;
const LN_EPS: f64 = 1e-5;

/// `pixel_unshuffle(4) → conv → ReLU → conv → ReLU → spatial mean`, then
/// layer-normalized linear heads: rex = `[reflectance (192); illumination (64)]`
/// and a separate 256-d image feature.
#[derive(Clone, Debug)]
pub struct SyntheticTeacher {
    params: ParamSet<f64>,
    conv1: Conv3x3,
    conv2: Conv3x3,
    refl: Linear,
    illum: Linear,
    img: Linear,
}

/// Teacher encodings of a batch, each `(B, 256)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorFeatures {
    pub rex: Tensor<f64>,
    pub img: Tensor<f64>,
}

impl SyntheticTeacher {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut ps = ParamSet::new();
        let conv1 = Conv3x3::new(&mut ps, "teacher.conv1", 48, WIDTH, 2f64.sqrt(), &mut rng);
        let conv2 = Conv3x3::new(&mut ps, "teacher.conv2", WIDTH, WIDTH, 2f64.sqrt(), &mut rng);
        let refl = Linear::new(&mut ps, "teacher.refl", WIDTH, PRIOR_REX, 1.0, &mut rng);
        let illum = Linear::new(&mut ps, "teacher.illum", WIDTH, PRIOR_DIM - PRIOR_REX, 1.0, &mut rng);
        let img = Linear::new(&mut ps, "teacher.img", WIDTH, PRIOR_DIM, 1.0, &mut rng);
        ps.freeze();
        Self { params: ps, conv1, conv2, refl, illum, img }
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// `images`: `(B, 3, S, S)` with `S` divisible by 4.
    pub fn encode(&self, images: &Tensor<f64>) -> Result<PriorFeatures> {
        dims4(images, "teacher_encode")?;
        let x = pixel_unshuffle(images, 4)?;
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape)?;
        let x = tape.constant(x)?;
        let h = self.conv1.forward(&mut tape, &bind, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(&mut tape, &bind, h)?;
        let h = tape.relu(h)?;
        let h = tape.mean_axes(h, &[2, 3])?;
        let b = tape.shape(h)?[0];
        let h = tape.reshape(h, &[b, WIDTH])?;
        let mut head = |lin: &Linear| -> Result<_> {
            let y = lin.forward(&mut tape, &bind, h)?;
            tape.layer_norm(y, 1, LN_EPS)
        };
        let (r, i, g) = (head(&self.refl)?, head(&self.illum)?, head(&self.img)?);
        let rex = tape.concat(&[r, i], 1)?;
        Ok(PriorFeatures { rex: tape.value(rex)?.clone(), img: tape.value(g)?.clone() })
    }
}

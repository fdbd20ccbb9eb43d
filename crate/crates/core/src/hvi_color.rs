//! Polarized HVI colour coordinates and the colour loss built on them.
//!
//! Hue is measured in sextants, `H ∈ [0, 6)` (degrees / 60), so that
//! `cos(πH/3)` and `sin(πH/3)` have period exactly 6 and red (H = 0 ≡ 6)
//! has no seam.

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::ndtensor::{dims4, Tensor};
use crate::scalar::Scalar;

pub const K_MIN: f64 = 0.1;
pub const K_MAX: f64 = 5.0;
pub const K_INIT: f64 = 1.0;
pub const HVI_EPS: f64 = 1e-8;

/// Density `k` and the additive epsilon of the collapse factor
/// `C_k = k·sin(π·I_max/2) + eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HviParams<T = f64> {
    pub k: T,
    pub eps: T,
}

impl<T: Scalar> Default for HviParams<T> {
    fn default() -> Self {
        Self { k: T::lit(K_INIT), eps: T::lit(HVI_EPS) }
    }
}

impl<T: Scalar> HviParams<T> {
    /// `k` is clamped into `[0.1, 5]`.
    pub fn new(k: T) -> Self {
        Self { k: k.max(T::lit(K_MIN)).min(T::lit(K_MAX)), eps: T::lit(HVI_EPS) }
    }

    /// Registers `k` as a bounded learnable parameter.
    pub fn register(&self, params: &mut ParamSet<T>, name: &str) -> ParamId {
        params.add_bounded(name, Tensor::scalar(self.k), T::lit(K_MIN), T::lit(K_MAX))
    }
}

/// Hue in sextants, saturation and value planes, each `(B,1,H,W)`.
#[derive(Clone, Debug)]
pub struct HsvComponents<T = f64> {
    pub hue: Tensor<T>,
    pub saturation: Tensor<T>,
    pub i_max: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HviImage<T = f64> {
    pub h_polar: Tensor<T>,
    pub v_polar: Tensor<T>,
    pub i_polar: Tensor<T>,
}

/// Tape handles of the three HVI planes.
#[derive(Clone, Copy, Debug)]
pub struct HviVars {
    pub h_polar: Var,
    pub v_polar: Var,
    pub i_polar: Var,
}

fn validate_rgb<T: Scalar>(rgb: &Tensor<T>, op: &'static str) -> Result<()> {
    let [_, c, _, _] = dims4(rgb, op)?;
    if c != 3 {
        return Err(shape_err(op, format!("expected 3 channels, got {c}")));
    }
    if rgb.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(arg_err(op, "rgb values outside [0, 1]"));
    }
    Ok(())
}

pub fn rgb_to_hsv_components<T: Scalar>(rgb: &Tensor<T>) -> Result<HsvComponents<T>> {
    validate_rgb(rgb, "rgb_to_hsv_components")?;
    let [b, _, h, w] = dims4(rgb, "rgb_to_hsv_components")?;
    let plane = h * w;
    let shape = [b, 1, h, w];
    let (mut hue, mut sat, mut imax) = (Tensor::zeros(&shape), Tensor::zeros(&shape), Tensor::zeros(&shape));
    let d = rgb.data();
    let six = T::lit(6.0);
    for bi in 0..b {
        for p in 0..plane {
            let base = bi * 3 * plane + p;
            let (r, g, bl) = (d[base], d[base + plane], d[base + 2 * plane]);
            let mx = r.max(g).max(bl);
            let mn = r.min(g).min(bl);
            let delta = mx - mn;
            let o = bi * plane + p;
            imax.data_mut()[o] = mx;
            if mx > T::zero() {
                sat.data_mut()[o] = delta / mx;
            }
            if delta > T::zero() {
                let hv = if r >= g && r >= bl {
                    (g - bl) / delta
                } else if g >= bl {
                    (bl - r) / delta + T::lit(2.0)
                } else {
                    (r - g) / delta + T::lit(4.0)
                };
                let hv = if hv < T::zero() { hv + six } else { hv };
                hue.data_mut()[o] = if hv >= six { hv - six } else { hv };
            }
        }
    }
    Ok(HsvComponents { hue, saturation: sat, i_max: imax })
}

/// Records the HVI transform of `rgb (B,3,H,W)` with learnable `k` (shape `[1]`).
///
/// The argmax branch and the achromatic/black masks are constants, so the
/// hue gradient is 0 where `max == min`.
pub fn hvi_on_tape<T: Scalar>(tape: &mut Tape<T>, rgb: Var, k: Var, eps: T) -> Result<HviVars> {
    validate_rgb(tape.value(rgb)?, "to_polarized_hvi")?;
    let imax = tape.max_axis(rgb, 1)?;
    let imin = tape.min_axis(rgb, 1)?;
    let delta = tape.sub(imax, imin)?;

    let (chroma, not_chroma, black, mr, mg, mb) = {
        let x = tape.value(rgb)?;
        let [b, _, h, w] = dims4(x, "to_polarized_hvi")?;
        let plane = h * w;
        let shape = [b, 1, h, w];
        let mut m: Vec<Tensor<T>> = (0..6).map(|_| Tensor::zeros(&shape)).collect();
        let d = x.data();
        for bi in 0..b {
            for p in 0..plane {
                let base = bi * 3 * plane + p;
                let (r, g, bl) = (d[base], d[base + plane], d[base + 2 * plane]);
                let mx = r.max(g).max(bl);
                let mn = r.min(g).min(bl);
                let o = bi * plane + p;
                let is_chroma = mx > mn;
                m[0].data_mut()[o] = if is_chroma { T::one() } else { T::zero() };
                m[1].data_mut()[o] = if is_chroma { T::zero() } else { T::one() };
                m[2].data_mut()[o] = if mx > T::zero() { T::zero() } else { T::one() };
                // first maximal channel wins, matching max_axis
                let branch = if r >= g && r >= bl { 3 } else if g >= bl { 4 } else { 5 };
                m[branch].data_mut()[o] = T::one();
            }
        }
        let mut it = m.into_iter();
        let mut next = || tape.constant(it.next().expect("six masks"));
        (next()?, next()?, next()?, next()?, next()?, next()?)
    };

    let r = tape.slice(rgb, 1, 0, 1)?;
    let g = tape.slice(rgb, 1, 1, 2)?;
    let bl = tape.slice(rgb, 1, 2, 3)?;
    let safe_delta = tape.add(delta, not_chroma)?;
    let gb = tape.sub(g, bl)?;
    let br = tape.sub(bl, r)?;
    let rg = tape.sub(r, g)?;
    let h_r = tape.div(gb, safe_delta)?;
    let h_g = tape.div(br, safe_delta)?;
    let h_g = tape.add_scalar(h_g, T::lit(2.0))?;
    let h_b = tape.div(rg, safe_delta)?;
    let h_b = tape.add_scalar(h_b, T::lit(4.0))?;
    let h_r = tape.mul(h_r, mr)?;
    let h_g = tape.mul(h_g, mg)?;
    let h_b = tape.mul(h_b, mb)?;
    let hue = tape.add(h_r, h_g)?;
    let hue = tape.add(hue, h_b)?;
    // No wrap to [0,6) is needed: cos and sin below have period 6 in H.
    let hue = tape.mul(hue, chroma)?;

    let safe_max = tape.add(imax, black)?;
    let sat = tape.div(delta, safe_max)?;

    let half_pi_i = tape.scale(imax, T::FRAC_PI_2())?;
    let sin_i = tape.sin(half_pi_i)?;
    let ck = tape.mul(sin_i, k)?;
    let ck = tape.add_scalar(ck, eps)?;
    let radius = tape.mul(ck, sat)?;

    let theta = tape.scale(hue, T::PI() / T::lit(3.0))?;
    let cos_t = tape.cos(theta)?;
    let sin_t = tape.sin(theta)?;
    let h_polar = tape.mul(radius, cos_t)?;
    let v_polar = tape.mul(radius, sin_t)?;
    Ok(HviVars { h_polar, v_polar, i_polar: imax })
}

pub fn to_polarized_hvi<T: Scalar>(rgb: &Tensor<T>, params: &HviParams<T>) -> Result<HviImage<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(rgb.clone())?;
    let k = tape.constant(Tensor::scalar(params.k))?;
    let v = hvi_on_tape(&mut tape, x, k, params.eps)?;
    Ok(HviImage {
        h_polar: tape.value(v.h_polar)?.clone(),
        v_polar: tape.value(v.v_polar)?.clone(),
        i_polar: tape.value(v.i_polar)?.clone(),
    })
}

/// Sum over the three planes of the mean absolute difference.
pub fn polarized_color_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    k: Var,
    eps: T,
) -> Result<Var> {
    let (ps, gs) = (tape.shape(pred)?, tape.shape(gt)?);
    if ps != gs {
        return Err(shape_err("polarized_color_loss", format!("{ps:?} vs {gs:?}")));
    }
    let a = hvi_on_tape(tape, pred, k, eps)?;
    let b = hvi_on_tape(tape, gt, k, eps)?;
    let mut total: Option<Var> = None;
    for (x, y) in [(a.h_polar, b.h_polar), (a.v_polar, b.v_polar), (a.i_polar, b.i_polar)] {
        let d = tape.sub(x, y)?;
        let d = tape.abs(d)?;
        let m = tape.mean(d)?;
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("three planes"))
}

pub fn polarized_color_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, params: &HviParams<T>) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone())?;
    let g = tape.constant(gt.clone())?;
    let k = tape.constant(Tensor::scalar(params.k))?;
    let l = polarized_color_loss_on_tape(&mut tape, p, g, k, params.eps)?;
    tape.item(l)
}

/// One row of a fully saturated, full-intensity hue sweep.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct HueSample {
    pub hue: f64,
    pub h_polar: f64,
    pub v_polar: f64,
    pub i_polar: f64,
}

/// RGB of hue `h ∈ [0,6)` at `S = 1`, `I_max = 1`.
pub fn pure_hue_rgb(h: f64) -> [f64; 3] {
    let h = h.rem_euclid(6.0);
    let sector = h.floor() as usize;
    let f = h - h.floor();
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// HVI coordinates of `n` evenly spaced hues in `[0, 6)`, plus the two
/// points `δ` either side of the red seam at the end.
pub fn hue_sweep(n: usize, k: f64, delta: f64) -> Result<Vec<HueSample>> {
    let mut hues: Vec<f64> = (0..n).map(|i| 6.0 * i as f64 / n as f64).collect();
    hues.push(delta);
    hues.push(6.0 - delta);
    let mut rgb = Tensor::<f64>::zeros(&[1, 3, 1, hues.len()]);
    for (j, &h) in hues.iter().enumerate() {
        for (c, v) in pure_hue_rgb(h).into_iter().enumerate() {
            rgb.data_mut()[c * hues.len() + j] = v;
        }
    }
    let hvi = to_polarized_hvi(&rgb, &HviParams::new(k))?;
    Ok(hues
        .iter()
        .enumerate()
        .map(|(j, &hue)| HueSample {
            hue,
            h_polar: hvi.h_polar.data()[j],
            v_polar: hvi.v_polar.data()[j],
            i_polar: hvi.i_polar.data()[j],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check_tape, FdConfig};
    use crate::ndtensor::Rng;

    fn px(r: f64, g: f64, b: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1, 3, 1, 1], &[r, g, b]).unwrap()
    }

    #[test]
    fn hsv_examples() {
        let c = rgb_to_hsv_components(&px(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((c.hue.data()[0], c.saturation.data()[0], c.i_max.data()[0]), (0.0, 1.0, 1.0));
        let c = rgb_to_hsv_components(&px(0.5, 0.5, 0.5)).unwrap();
        assert_eq!((c.hue.data()[0], c.saturation.data()[0], c.i_max.data()[0]), (0.0, 0.0, 0.5));
        let c = rgb_to_hsv_components(&px(0.0, 1.0, 0.0)).unwrap();
        assert_eq!((c.hue.data()[0], c.saturation.data()[0], c.i_max.data()[0]), (2.0, 1.0, 1.0));
        let c = rgb_to_hsv_components(&px(1.0, 0.0, 0.5)).unwrap();
        assert!((c.hue.data()[0] - 5.5).abs() < 1e-15);
        assert!(rgb_to_hsv_components(&px(1.2, 0.0, 0.0)).is_err());
        assert!(rgb_to_hsv_components(&Tensor::<f64>::zeros(&[1, 2, 1, 1])).is_err());
    }

    #[test]
    fn hvi_examples() {
        let p = HviParams::default();
        let black = to_polarized_hvi(&px(0.0, 0.0, 0.0), &p).unwrap();
        assert_eq!(
            (black.h_polar.data()[0], black.v_polar.data()[0], black.i_polar.data()[0]),
            (0.0, 0.0, 0.0)
        );
        let red = to_polarized_hvi(&px(1.0, 0.0, 0.0), &p).unwrap();
        assert_eq!(red.h_polar.data()[0], 1.0 + 1e-8);
        assert_eq!(red.v_polar.data()[0], 0.0);
        assert_eq!(red.i_polar.data()[0], 1.0);
        let gray = to_polarized_hvi(&px(0.5, 0.5, 0.5), &p).unwrap();
        assert_eq!((gray.h_polar.data()[0], gray.v_polar.data()[0], gray.i_polar.data()[0]), (0.0, 0.0, 0.5));
    }

    #[test]
    fn tape_hue_matches_plain_hue() {
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = rng.uniform_tensor(&[2, 3, 4, 4], 0.0, 1.0);
        let hsv = rgb_to_hsv_components(&x).unwrap();
        let hvi = to_polarized_hvi(&x, &HviParams::new(2.0)).unwrap();
        for i in 0..hsv.hue.len() {
            let (h, s, m) = (hsv.hue.data()[i], hsv.saturation.data()[i], hsv.i_max.data()[i]);
            let ck = 2.0 * (std::f64::consts::FRAC_PI_2 * m).sin() + 1e-8;
            let th = std::f64::consts::PI * h / 3.0;
            assert!((hvi.h_polar.data()[i] - ck * s * th.cos()).abs() < 1e-12);
            assert!((hvi.v_polar.data()[i] - ck * s * th.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn red_seam_continuity() {
        let s = hue_sweep(12, 1.0, 1e-3).unwrap();
        let (a, b) = (s[12], s[13]);
        let gap = ((a.h_polar - b.h_polar).powi(2) + (a.v_polar - b.v_polar).powi(2)).sqrt();
        assert!(gap < 1e-2, "gap {gap}");
        assert!(gap > 0.0);
    }

    #[test]
    fn dark_region_collapse() {
        let p = HviParams::default();
        let mut prev = f64::INFINITY;
        for e in 1..8 {
            let v = 10f64.powi(-e);
            let hvi = to_polarized_hvi(&px(v, 0.0, 0.3 * v), &p).unwrap();
            let r = hvi.h_polar.data()[0].hypot(hvi.v_polar.data()[0]);
            assert!(r < prev);
            assert!(r <= 2.0 * v + 1e-8);
            prev = r;
        }
    }

    #[test]
    fn chroma_radius_bounded() {
        let mut rng = Rng::new(11);
        let x: Tensor<f64> = rng.uniform_tensor(&[1, 3, 8, 8], 0.0, 1.0);
        let p = HviParams::new(3.0);
        let hvi = to_polarized_hvi(&x, &p).unwrap();
        for i in 0..hvi.h_polar.len() {
            let r2 = hvi.h_polar.data()[i].powi(2) + hvi.v_polar.data()[i].powi(2);
            assert!(r2 <= (p.k + p.eps).powi(2) + 1e-12);
            assert!((0.0..=1.0).contains(&hvi.i_polar.data()[i]));
        }
    }

    #[test]
    fn k_is_clamped() {
        assert_eq!(HviParams::new(10.0).k, 5.0);
        assert_eq!(HviParams::new(0.0).k, 0.1);
    }

    #[test]
    fn loss_examples() {
        let p = HviParams::default();
        let black = px(0.0, 0.0, 0.0);
        let red = px(1.0, 0.0, 0.0);
        assert_eq!(polarized_color_loss(&red, &red, &p).unwrap(), 0.0);
        let l = polarized_color_loss(&black, &red, &p).unwrap();
        assert!((l - (2.0 + 1e-8)).abs() < 1e-15);
        let mut rng = Rng::new(4);
        let a: Tensor<f64> = rng.uniform_tensor(&[1, 3, 4, 4], 0.0, 1.0);
        let b: Tensor<f64> = rng.uniform_tensor(&[1, 3, 4, 4], 0.0, 1.0);
        assert_eq!(polarized_color_loss(&a, &b, &p).unwrap(), polarized_color_loss(&b, &a, &p).unwrap());
        assert!(polarized_color_loss(&a, &black, &p).is_err());
    }

    #[test]
    fn loss_gradient_fd() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let pred: Tensor<f64> = rng.uniform_tensor(&[1, 3, 3, 3], 0.05, 0.95);
            let gt: Tensor<f64> = rng.uniform_tensor(&[1, 3, 3, 3], 0.05, 0.95);
            let k = Tensor::scalar(rng.uniform_range(0.5, 2.0));
            let r = fd_check_tape("L_col", &[pred, gt, k], &FdConfig::default(), |t, v| {
                polarized_color_loss_on_tape(t, v[0], v[1], v[2], 1e-8)
            })
            .unwrap();
            assert!(r.pass, "seed {seed}: {}", r.max_rel_err());
        }
    }
}

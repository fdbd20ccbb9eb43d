//! Reductions and rearrangements used by the losses: population statistics,
//! nearest-rank percentiles, pixel (un)shuffle.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Population mean and standard deviation (divide by N) over `axes`.
///
/// Both results keep the reduced axes as extent-1 dimensions. The standard
/// deviation is returned without any epsilon.
pub fn mean_std<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.is_empty() {
        return Err(arg_err("mean_std", "empty tensor"));
    }
    let mean = x.mean_axes(axes)?;
    let centered = x.sub(&mean)?;
    let var = centered.mul(&centered)?.mean_axes(axes)?;
    Ok((mean, var.map(|v| v.sqrt())))
}

/// Nearest-rank percentile of `|x|`: the element at index `ceil(p·N) − 1`
/// of the ascending sort.
pub fn percentile_abs<T: Scalar>(x: &[T], p: f64) -> Result<T> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(arg_err("percentile_abs", format!("p = {p} outside (0, 1]")));
    }
    if x.is_empty() {
        return Err(arg_err("percentile_abs", "empty input"));
    }
    let mut mags: Vec<T> = x.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(mags[nearest_rank_index(p, mags.len())])
}

pub(crate) fn nearest_rank_index(p: f64, n: usize) -> usize {
    // Guard against p·N landing a hair above an integer through rounding.
    let raw = p * n as f64;
    let rank = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// `(B,C,H,W) → (B, C·f², H/f, W/f)`, channel order `c·f² + i·f + j` for
/// the `(i, j)` offset inside each `f×f` block.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4(x, "pixel_unshuffle")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(arg_err(
            "pixel_unshuffle",
            format!("spatial dims {h}x{w} not divisible by {factor}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let co = c * factor * factor;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * factor * factor + (y % factor) * factor + xx % factor;
                    let d = ((bi * co + oc) * ho + y / factor) * wo + xx / factor;
                    dst[d] = src[((bi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, co, ho, wo] = dims4(x, "pixel_shuffle")?;
    if factor == 0 || co % (factor * factor) != 0 {
        return Err(arg_err("pixel_shuffle", format!("{co} channels not divisible by {factor}²")));
    }
    let c = co / (factor * factor);
    let (h, w) = (ho * factor, wo * factor);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * factor * factor + (y % factor) * factor + xx % factor;
                    let s = ((bi * co + oc) * ho + y / factor) * wo + xx / factor;
                    dst[((bi * c + ci) * h + y) * w + xx] = src[s];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn dims4<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match x.shape() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(shape_err(op, format!("expected (B,C,H,W), got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_std_examples() {
        let x = Tensor::<f64>::from_f64(vec![4], &[1., 2., 3., 4.]).unwrap();
        let (m, s) = mean_std(&x, &[0]).unwrap();
        assert!((m.item().unwrap() - 2.5).abs() < 1e-15);
        assert!((s.item().unwrap() - 1.25f64.sqrt()).abs() < 1e-15);
        assert!((s.item().unwrap() - 1.118034).abs() < 1e-6);

        let c = Tensor::<f64>::full(&[3, 2], 7.0);
        let (m, s) = mean_std(&c, &[0, 1]).unwrap();
        assert_eq!(m.item().unwrap(), 7.0);
        assert_eq!(s.item().unwrap(), 0.0);

        let x = Tensor::<f64>::from_f64(vec![2], &[-1., 1.]).unwrap();
        let (m, s) = mean_std(&x, &[0]).unwrap();
        assert_eq!((m.item().unwrap(), s.item().unwrap()), (0.0, 1.0));
    }

    #[test]
    fn mean_std_rejects_empty_axis() {
        let x = Tensor::<f64>::zeros(&[2, 0]);
        assert!(mean_std(&x, &[1]).is_err());
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile_abs(&[1.0, -2.0, 3.0, -4.0], 0.95).unwrap(), 4.0);
        assert_eq!(percentile_abs(&[5.0], 0.3).unwrap(), 5.0);
        assert_eq!(percentile_abs(&[0.0, 0.0, 0.0], 0.5).unwrap(), 0.0);
        assert!(percentile_abs(&[1.0], 0.0).is_err());
        assert!(percentile_abs(&[1.0], 1.5).is_err());
        assert!(percentile_abs::<f64>(&[], 0.5).is_err());
    }

    #[test]
    fn nearest_rank_exact_products() {
        // 0.95·100 = 95 exactly in intent, slightly above in binary.
        assert_eq!(nearest_rank_index(0.95, 100), 94);
        assert_eq!(nearest_rank_index(0.95, 4), 3);
        assert_eq!(nearest_rank_index(0.5, 3), 1);
        assert_eq!(nearest_rank_index(1.0, 7), 6);
    }

    #[test]
    fn unshuffle_shapes() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |i| (i[1] * 64 + i[2] * 8 + i[3]) as f64);
        let y = pixel_unshuffle(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 48, 2, 2]);
        assert_eq!(y.sum(), x.sum());
        assert_eq!(pixel_unshuffle(&x, 1).unwrap(), x);
        assert!(pixel_unshuffle(&x, 3).is_err());
    }

    proptest! {
        #[test]
        fn unshuffle_roundtrip(seed in 0u64..500, f in 1usize..4, hb in 1usize..4, wb in 1usize..4) {
            let mut rng = crate::ndtensor::Rng::new(seed);
            let x: Tensor<f64> = rng.normal_tensor(&[2, 2, hb * f, wb * f]);
            let y = pixel_shuffle(&pixel_unshuffle(&x, f).unwrap(), f).unwrap();
            prop_assert_eq!(y, x);
        }

        #[test]
        fn percentile_of_one_is_max(v in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
            let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert_eq!(percentile_abs(&v, 1.0).unwrap(), m);
        }

        #[test]
        fn mean_std_permutation_invariant(v in proptest::collection::vec(-10f64..10., 2..30), rot in 0usize..30) {
            let n = v.len();
            let mut w = v.clone();
            w.rotate_left(rot % n);
            w.reverse();
            let (m1, s1) = mean_std(&Tensor::from_vec(v), &[0]).unwrap();
            let (m2, s2) = mean_std(&Tensor::from_vec(w), &[0]).unwrap();
            prop_assert!((m1.item().unwrap() - m2.item().unwrap()).abs() < 1e-12);
            prop_assert!((s1.item().unwrap() - s2.item().unwrap()).abs() < 1e-12);
        }
    }
}

//! 3×3 convolution, stride 1, zero padding 1, via im2col.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::stats::dims4;
use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;

fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        row[y * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            src[(ci * h + sy as usize) * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[(ci * h + sy as usize) * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<([usize; 4], usize)> {
    let [b, c, h, w] = dims4(x, "conv2d_3x3")?;
    match weight.shape() {
        &[co, ci, 3, 3] if ci == c => Ok(([b, c, h, w], co)),
        s => Err(shape_err(
            "conv2d_3x3",
            format!("weight {s:?} incompatible with input {:?}", x.shape()),
        )),
    }
}

/// `x (B,Cin,H,W)`, `weight (Cout,Cin,3,3)` → `(B,Cout,H,W)`.
pub fn conv2d_3x3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let ([b, c, h, w], co) = check(x, weight)?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, co, h, w]);
    let mut cols = vec![T::zero(); c * 9 * hw];
    for bi in 0..b {
        im2col(&x.data()[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut cols);
        gemm_nn(
            weight.data(),
            &cols,
            &mut out.data_mut()[bi * co * hw..(bi + 1) * co * hw],
            co,
            c * 9,
            hw,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d_3x3`] w.r.t. input and weight.
pub fn conv2d_3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ([b, c, h, w], co) = check(x, weight)?;
    let hw = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut cols = vec![T::zero(); c * 9 * hw];
    let mut dcols = vec![T::zero(); c * 9 * hw];
    for bi in 0..b {
        let g = &grad_out.data()[bi * co * hw..(bi + 1) * co * hw];
        im2col(&x.data()[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut cols);
        gemm_nt(g, &cols, gw.data_mut(), co, hw, c * 9);
        dcols.iter_mut().for_each(|v| *v = T::zero());
        gemm_tn(weight.data(), g, &mut dcols, c * 9, co, hw);
        col2im(&dcols, c, h, w, &mut gx.data_mut()[bi * c * hw..(bi + 1) * c * hw]);
    }
    Ok((gx, gw))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct zero-padded correlation, one output at a time.
    fn direct(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let s = x.shape();
        let co = k.dim(0);
        Tensor::from_fn(&[s[0], co, s[2], s[3]], |i| {
            let mut acc = 0.0;
            for ci in 0..s[1] {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = i[2] as isize + ky as isize - 1;
                        let xx = i[3] as isize + kx as isize - 1;
                        if y >= 0 && xx >= 0 && (y as usize) < s[2] && (xx as usize) < s[3] {
                            acc += x.get(&[i[0], ci, y as usize, xx as usize]) * k.get(&[i[1], ci, ky, kx]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn impulse_reproduces_flipped_kernel() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        x.set(&[0, 0, 2, 2], 1.0);
        let k = Tensor::from_fn(&[1, 1, 3, 3], |i| (i[2] * 3 + i[3] + 1) as f64);
        let y = conv2d_3x3(&x, &k).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                // output at (2+1−ky, 2+1−kx) sees the impulse through tap (ky,kx)
                assert_eq!(y.get(&[0, 0, 3 - dy, 3 - dx]), k.get(&[0, 0, dy, dx]));
            }
        }
        assert_eq!(y.sum(), k.sum());
    }

    #[test]
    fn matches_direct_oracle() {
        let mut rng = crate::ndtensor::Rng::new(3);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 5]);
        let k: Tensor<f64> = rng.normal_tensor(&[4, 3, 3, 3]);
        let a = conv2d_3x3(&x, &k).unwrap();
        let b = direct(&x, &k);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_weight() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_3x3(&x, &Tensor::zeros(&[1, 3, 3, 3])).is_err());
        assert!(conv2d_3x3(&x, &Tensor::zeros(&[1, 2, 5, 5])).is_err());
    }
}

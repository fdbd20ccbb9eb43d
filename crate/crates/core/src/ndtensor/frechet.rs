//! Gaussian Fréchet distance, the core of FID-style comparisons.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// `‖μ1−μ2‖² + tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`.
///
/// `tr((Σ1Σ2)^{1/2})` is evaluated as `tr((√Σ1 Σ2 √Σ1)^{1/2})`, which shares
/// its eigenvalues with `Σ1Σ2` and stays symmetric. Square roots come from a
/// symmetric eigendecomposition with negative eigenvalues clamped to zero.
pub fn gaussian_frechet_distance<T: Scalar>(
    mu1: &Tensor<T>,
    cov1: &Tensor<T>,
    mu2: &Tensor<T>,
    cov2: &Tensor<T>,
) -> Result<T> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != [d, d] || cov2.shape() != [d, d] {
        return Err(shape_err(
            "gaussian_frechet_distance",
            format!(
                "mu {:?}/{:?}, cov {:?}/{:?}",
                mu1.shape(),
                mu2.shape(),
                cov1.shape(),
                cov2.shape()
            ),
        ));
    }
    let m1 = DVector::from_vec(mu1.to_f64_vec());
    let m2 = DVector::from_vec(mu2.to_f64_vec());
    let s1 = symmetrize(DMatrix::from_row_slice(d, d, &cov1.to_f64_vec()));
    let s2 = symmetrize(DMatrix::from_row_slice(d, d, &cov2.to_f64_vec()));

    let root1 = psd_sqrt(&s1);
    let inner = symmetrize(&root1 * &s2 * &root1);
    let cross_trace: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let diff = m1 - m2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross_trace;
    Ok(T::lit(value.max(0.0)))
}

/// Sample mean and unbiased covariance of row vectors in `samples (N, D)`.
pub fn mean_covariance<T: Scalar>(samples: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let &[n, d] = samples.shape() else {
        return Err(shape_err("mean_covariance", format!("expected (N, D), got {:?}", samples.shape())));
    };
    if n < 2 {
        return Err(arg_err("mean_covariance", "need at least two samples"));
    }
    let x = samples.to_f64_vec();
    let mut mu = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            centered[j] = row[j] - mu[j];
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok((
        Tensor::from_f64(vec![d], &mu)?,
        Tensor::from_f64(vec![d, d], &cov)?,
    ))
}

/// Fréchet distance between the Gaussian fits of two sample sets.
pub fn frechet_between_samples<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let (m1, c1) = mean_covariance(a)?;
    let (m2, c2) = mean_covariance(b)?;
    gaussian_frechet_distance(&m1, &c1, &m2, &c2)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&roots) * v.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize, s: f64) -> Tensor<f64> {
        Tensor::from_fn(&[d, d], |i| if i[0] == i[1] { s } else { 0.0 })
    }

    #[test]
    fn identical_gaussians_are_zero() {
        let mu = Tensor::<f64>::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap();
        let cov = Tensor::<f64>::from_f64(vec![3, 3], &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]).unwrap();
        let d = gaussian_frechet_distance(&mu, &cov, &mu, &cov).unwrap();
        assert!(d.abs() < 1e-10, "{d}");
    }

    #[test]
    fn mean_shift_only() {
        let z = Tensor::zeros(&[2]);
        let m = Tensor::<f64>::from_f64(vec![2], &[3.0, 4.0]).unwrap();
        let d = gaussian_frechet_distance(&z, &eye(2, 1.0), &m, &eye(2, 1.0)).unwrap();
        assert!((d - 25.0).abs() < 1e-10);
    }

    #[test]
    fn diagonal_closed_form() {
        // tr(4I + I − 2·2I) = tr(I) = 2.
        let z = Tensor::zeros(&[2]);
        let d = gaussian_frechet_distance(&z, &eye(2, 4.0), &z, &eye(2, 1.0)).unwrap();
        assert!((d - 2.0).abs() < 1e-10);
    }

    #[test]
    fn non_commuting_covariances_match_scalar_case_of_2x2_oracle() {
        // For 1-D Gaussians: (m1−m2)² + (σ1 − σ2)².
        let d = gaussian_frechet_distance(
            &Tensor::<f64>::from_f64(vec![1], &[1.0]).unwrap(),
            &Tensor::<f64>::from_f64(vec![1, 1], &[9.0]).unwrap(),
            &Tensor::<f64>::from_f64(vec![1], &[-1.0]).unwrap(),
            &Tensor::<f64>::from_f64(vec![1, 1], &[4.0]).unwrap(),
        )
        .unwrap();
        assert!((d - (4.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let z2 = Tensor::<f64>::zeros(&[2]);
        let z3 = Tensor::<f64>::zeros(&[3]);
        assert!(gaussian_frechet_distance(&z2, &eye(2, 1.0), &z3, &eye(3, 1.0)).is_err());
    }

    #[test]
    fn covariance_of_known_samples() {
        let s = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        let (mu, cov) = mean_covariance(&s).unwrap();
        assert_eq!(mu.data(), &[2.0, 4.0]);
        assert_eq!(cov.data(), &[1.0, 2.0, 2.0, 4.0]);
    }
}

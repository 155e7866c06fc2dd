//! Symmetric eigendecomposition (cyclic Jacobi) and the PSD square root.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigenvalues below this (relative to the spectral scale) are a PSD violation.
pub const PSD_NEGATIVE_TOL: f64 = 1e-8;

fn check_square<T: Scalar>(m: &Tensor<T>) -> Result<usize> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::Contract(format!(
            "expected a square matrix, got shape {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Contract("matrix has non-finite entries".into()));
    }
    Ok(m.rows())
}

/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and the
/// eigenvectors stored as the columns of an orthonormal matrix.
pub fn sym_eig<T: Scalar>(m: &Tensor<T>, tol: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = check_square(m)?;
    let scale = m.max_abs().max(T::one());
    for i in 0..n {
        for j in i + 1..n {
            let dev = (m.at(i, j) - m.at(j, i)).abs();
            if dev > tol * scale {
                return Err(Error::NotSymmetric {
                    row: i,
                    col: j,
                    deviation: dev.as_f64(),
                    tol: (tol * scale).as_f64(),
                });
            }
        }
    }

    let half = T::of(0.5);
    let mut a: Vec<T> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            half * (m.at(i, j) + m.at(j, i))
        })
        .collect();
    let mut v = Tensor::<T>::eye(n).into_data();

    let total: T = a.iter().map(|&x| x * x).sum();
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= eps * eps * total || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (apq + apq);
                let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).expect("finite"));
    let values = Tensor::vector(order.iter().map(|&i| a[i * n + i]).collect());
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set(row, col, v[row * n + src]);
        }
    }
    Ok((values, vectors))
}

/// `V diag(f(λ)) Vᵀ`
pub fn reconstruct<T: Scalar>(values: &Tensor<T>, vectors: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let n = values.len();
    let fl: Vec<T> = values.data().iter().map(|&l| f(l)).collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let mut s = T::zero();
            for k in 0..n {
                s += vectors.at(i, k) * fl[k] * vectors.at(j, k);
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// Symmetric PSD square root. Eigenvalues in `[-1e-8·scale, 0)` are clamped
/// to zero; anything more negative is rejected.
pub fn psd_sqrt<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    check_square(m)?;
    let (values, vectors) = sym_eig(m, T::of(1e-6))?;
    let scale = values.max_abs().max(T::one());
    if let Some(&min) = values.data().first() {
        if min < -T::of(PSD_NEGATIVE_TOL) * scale {
            return Err(Error::NotPsd {
                eigenvalue: min.as_f64(),
            });
        }
    }
    Ok(reconstruct(&values, &vectors, |l| l.max(T::zero()).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn rel_frob(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn identity_eigenvalues() {
        let (vals, vecs) = sym_eig(&Tensor::<f64>::eye(3), 1e-12).unwrap();
        assert_eq!(vals.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(vecs, Tensor::eye(3));
    }

    #[test]
    fn diagonal_eigenpairs_are_axis_aligned() {
        let (vals, vecs) = sym_eig(&Tensor::<f64>::diag(&[9.0, 4.0]), 1e-12).unwrap();
        assert_eq!(vals.data(), &[4.0, 9.0]);
        assert_eq!(vecs.at(1, 0).abs(), 1.0);
        assert_eq!(vecs.at(0, 1).abs(), 1.0);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m, 1e-9), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn random_symmetric_reconstruction() {
        let mut rng = RngStream::new(11);
        let g: Tensor = rng.gaussian(&[16, 16]);
        let m = g.add(&g.transpose());
        let (vals, vecs) = sym_eig(&m, 1e-12).unwrap();
        let back = reconstruct(&vals, &vecs, |l| l);
        assert!(back.sub(&m).norm() <= 1e-8 * m.norm());
        let vtv = vecs.transpose().matmul(&vecs).unwrap();
        assert!(vtv.sub(&Tensor::eye(16)).norm() <= 1e-8);
    }

    #[test]
    fn sqrt_of_simple_matrices() {
        assert!(rel_frob(&psd_sqrt(&Tensor::<f64>::eye(4)).unwrap(), &Tensor::eye(4)) < 1e-15);
        let s = psd_sqrt(&Tensor::diag(&[4.0, 9.0])).unwrap();
        assert!(rel_frob(&s, &Tensor::diag(&[2.0, 3.0])) < 1e-15);
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = RngStream::new(5);
        let a: Tensor = rng.gaussian(&[20, 12]);
        let m = a.matmul(&a.transpose()).unwrap(); // rank-deficient PSD
        let s = psd_sqrt(&m).unwrap();
        assert!(rel_frob(&s.matmul(&s).unwrap(), &m) < 1e-6);
    }

    #[test]
    fn clamps_tiny_negative_and_rejects_large_negative() {
        let ok = Tensor::diag(&[1.0, -1e-12]);
        let s = psd_sqrt(&ok).unwrap();
        assert_eq!(s.at(1, 1), 0.0);
        let bad = Tensor::diag(&[1.0, -1e-3]);
        assert!(matches!(psd_sqrt(&bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn works_in_single_precision() {
        let s = psd_sqrt(&Tensor::<f32>::diag(&[4.0, 9.0])).unwrap();
        assert!((s.at(0, 0) - 2.0).abs() < 1e-6 && (s.at(1, 1) - 3.0).abs() < 1e-6);
    }
}

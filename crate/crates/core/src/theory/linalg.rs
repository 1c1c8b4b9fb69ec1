//! Small dense linear algebra for the stability probe: symmetric
//! eigenvalues, Cholesky solves and finite-difference Hessians.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Largest `|H[i][j] - H[j][i]|`.
pub fn asymmetry<T: Scalar>(h: &Matrix<T>) -> T {
    let n = h.rows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in i + 1..n.min(h.cols()) {
            worst = worst.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues (ascending) and column eigenvectors of a symmetric matrix by
/// cyclic Jacobi rotations.
pub fn jacobi_eigen<T: Scalar>(h: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let n = h.rows();
    if h.cols() != n {
        return Err(Error::dim("jacobi_eigen", h.shape(), h.shape()));
    }
    let mut a = h.clone();
    let mut v = Matrix::identity(n);
    let scale = h.frobenius_norm().max(T::min_positive_value());
    let tol = T::epsilon() * scale;
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| a[(x, x)].partial_cmp(&a[(y, y)]).unwrap_or(std::cmp::Ordering::Equal));
            let values = order.iter().map(|&k| a[(k, k)]).collect();
            let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
            return Ok((values, vectors));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numerical("Jacobi eigensolver did not converge in 100 sweeps".into()))
}

/// Solves `H x = b` for symmetric positive definite `H`.
///
/// Returns `None` when a pivot is not positive.
pub fn cholesky_solve<T: Scalar>(h: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    let n = h.rows();
    let mut l = Matrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let t = l[(i, k)] * y[k];
            y[i] -= t;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = l[(k, i)] * y[k];
            y[i] -= t;
        }
        y[i] /= l[(i, i)];
    }
    Some(y)
}

/// Central-difference Jacobian of a gradient map, i.e. the Hessian.
///
/// Column `j` is `(g(θ + h e_j) − g(θ − h e_j)) / 2h`. The result is not
/// symmetrized; callers check [`asymmetry`] first.
pub fn fd_hessian(
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    step: f64,
) -> Result<Matrix<f64>> {
    let n = theta.len();
    let mut h = Matrix::zeros(n, n);
    let mut probe = theta.to_vec();
    for j in 0..n {
        probe[j] = theta[j] + step;
        let plus = grad(&probe)?;
        probe[j] = theta[j] - step;
        let minus = grad(&probe)?;
        probe[j] = theta[j];
        if plus.len() != n || minus.len() != n {
            return Err(Error::Contract("gradient length differs from parameter length".into()));
        }
        for i in 0..n {
            h[(i, j)] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    Ok(h)
}

/// Averages `H` with its transpose.
pub fn symmetrize(h: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(h.rows(), h.cols(), |i, j| 0.5 * (h[(i, j)] + h[(j, i)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_spectrum_is_exact() {
        let d = [3.5f64, -1.0, 0.25, 7.0];
        let h = Matrix::from_fn(4, 4, |i, j| if i == j { d[i] } else { 0.0 });
        let (values, _) = jacobi_eigen(&h).unwrap();
        let mut expect = d.to_vec();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rotated_spectrum_recovered() {
        // Q diag(1, 4) Qᵀ with Q a 30° rotation.
        let (s, c) = (std::f64::consts::PI / 6.0).sin_cos();
        let q = Matrix::from_rows(&[vec![c, -s], vec![s, c]]).unwrap();
        let d = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let h = q.matmul(&d).unwrap().matmul(&q.transpose()).unwrap();
        let (values, vectors) = jacobi_eigen(&h).unwrap();
        assert!((values[0] - 1.0).abs() < 1e-12 && (values[1] - 4.0).abs() < 1e-12);
        // H v = λ v for each column.
        for k in 0..2 {
            for i in 0..2 {
                let hv: f64 = (0..2).map(|j| h[(i, j)] * vectors[(j, k)]).sum();
                assert!((hv - values[k] * vectors[(i, k)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_matches_hand_solution() {
        let h = Matrix::<f64>::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        // det = 8, inverse = [[3, -2], [-2, 4]] / 8.
        let x = cholesky_solve(&h, &[1.0, 1.0]).unwrap();
        assert!((x[0] - 0.125).abs() < 1e-15 && (x[1] - 0.25).abs() < 1e-15);
        let indefinite = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(cholesky_solve(&indefinite, &[1.0, 1.0]).is_none());
    }

    #[test]
    fn fd_hessian_of_cubic() {
        // f = x³ + x·y², ∇f = (3x² + y², 2xy), ∇²f = [[6x, 2y], [2y, 2x]].
        let grad = |t: &[f64]| Ok(vec![3.0 * t[0] * t[0] + t[1] * t[1], 2.0 * t[0] * t[1]]);
        let h = fd_hessian(grad, &[0.5, -1.5], 1e-4).unwrap();
        let expect = [[3.0, -3.0], [-3.0, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h[(i, j)] - expect[i][j]).abs() < 1e-7);
            }
        }
        assert!(asymmetry(&h) < 1e-7);
    }
}

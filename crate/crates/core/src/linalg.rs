//! Small dense linear algebra for p x p systems (p is the covariate count).

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse<T: Scalar>(a: ArrayView2<'_, T>) -> Option<Array2<T>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "inverse of a non-square matrix");
    let mut m = a.to_owned();
    let mut inv = Array2::<T>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().partial_cmp(&m[[j, col]].abs()).unwrap())?;
        let pv = m[[pivot, col]];
        if pv == T::zero() || !pv.is_finite() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let scale = T::one() / pv;
        for k in 0..n {
            m[[col, k]] *= scale;
            inv[[col, k]] *= scale;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[[row, col]];
            if f == T::zero() {
                continue;
            }
            for k in 0..n {
                let mk = m[[col, k]];
                let ik = inv[[col, k]];
                m[[row, k]] -= f * mk;
                inv[[row, k]] -= f * ik;
            }
        }
    }
    Some(inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(a: ArrayView2<'_, T>) -> Vec<T> {
    let n = a.nrows();
    let mut m = symmetrized(a);
    let two = T::lit(2.0);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let scale: T = m.iter().map(|v| *v * *v).sum();
        if off <= T::epsilon() * T::epsilon() * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[[k, p]];
                    let akq = m[[k, q]];
                    m[[k, p]] = c * akp - s * akq;
                    m[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[[p, k]];
                    let aqk = m[[q, k]];
                    m[[p, k]] = c * apk - s * aqk;
                    m[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| m[[i, i]]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    eig
}

/// Reciprocal condition number of a symmetric positive semidefinite matrix.
pub fn rcond_symmetric<T: Scalar>(a: ArrayView2<'_, T>) -> T {
    let eig = symmetric_eigenvalues(a);
    let (lo, hi) = match (eig.first(), eig.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return T::zero(),
    };
    if hi <= T::zero() || !hi.is_finite() {
        return T::zero();
    }
    (lo / hi).max(T::zero())
}

/// Inverts a symmetric positive definite design matrix, rejecting it when
/// the reciprocal condition number falls under [`Scalar::rcond_threshold`].
pub fn checked_spd_inverse<T: Scalar>(a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let rcond = rcond_symmetric(a);
    if !(rcond >= T::rcond_threshold()) {
        return Err(Error::SingularDesign {
            rcond: rcond.to_f64_lossy(),
        });
    }
    let inv = inverse(a).ok_or(Error::SingularDesign {
        rcond: rcond.to_f64_lossy(),
    })?;
    Ok(symmetrized(inv.view()))
}

pub fn symmetrized<T: Scalar>(a: ArrayView2<'_, T>) -> Array2<T> {
    let half = T::lit(0.5);
    let n = a.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| half * (a[[i, j]] + a[[j, i]]))
}

pub fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

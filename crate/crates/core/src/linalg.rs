//! Small dense linear algebra on r×r matrices (r ≤ 16 or so).

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major square matrix stored as nested vectors.
pub type Matrix<T> = Vec<Vec<T>>;

/// Eigenvalues in ascending order with matching unit eigenvectors (columns of `vectors`).
#[derive(Debug, Clone)]
pub struct Eigen<T> {
    pub values: Vec<T>,
    /// `vectors[j]` is the eigenvector for `values[j]`.
    pub vectors: Vec<Vec<T>>,
}

/// Cyclic Jacobi eigensolver for a symmetric matrix.
///
/// Sweeps the upper triangle in row order, which makes the result
/// reproducible bit for bit.
pub fn jacobi_eigen<T: Real>(m: &Matrix<T>) -> Result<Eigen<T>> {
    let n = m.len();
    let mut a = m.clone();
    let mut v: Matrix<T> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(T::zero(), |acc, x| acc.max(x.abs()));
    let max_sweeps = 100;
    let mut converged = n < 2;
    for _ in 0..max_sweeps {
        let off: T = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off.sqrt() <= eps * scale || off == T::zero() {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq == T::zero() {
                    continue;
                }
                let two = T::lit(2.0);
                let theta = (a[q][q] - a[p][p]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Eigen(format!("Jacobi did not converge in {max_sweeps} sweeps")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(Eigen {
        values: order.iter().map(|&i| a[i][i]).collect(),
        vectors: order
            .iter()
            .map(|&j| (0..n).map(|i| v[i][j]).collect())
            .collect(),
    })
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot falls below `tiny` times the largest entry.
pub fn solve<T: Real>(a: &Matrix<T>, b: &[T], tiny: T) -> Option<Vec<T>> {
    let n = b.len();
    let mut m: Matrix<T> = a.clone();
    let mut x = b.to_vec();
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() {
        return None;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() <= tiny * scale {
            return None;
        }
        m.swap(col, piv);
        x.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = m[col][k];
                m[row][k] = m[row][k] - f * v;
            }
            x[row] = x[row] - f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in col + 1..n {
            acc = acc - m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Some(x)
}

pub fn mat_vec<T: Real>(m: &Matrix<T>, v: &[T]) -> Vec<T> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

pub fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

//! Super-, exact and strict sub-solvability of points x ∈ (0,1]^r.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, mat_vec, Matrix};
use crate::mixture::MixtureSpec;
use crate::scalar::Real;

/// Default classification tolerance, scaled by max(1, max |M*_ij|).
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    SuperSolvable,
    Solvable,
    StrictlySubSolvable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolvabilityReport<T = f64> {
    pub m_star: Matrix<T>,
    pub min_eig: T,
    /// Unit-length, strictly positive eigenvector for `min_eig`.
    pub perron_vector: Vec<T>,
    pub classification: Classification,
    pub tolerance_used: T,
}

/// M*(x): diagonal (∂_sξ + λ_s h_s²)/x_s − ∂_ssξ, off-diagonal −∂_ss'ξ.
pub fn m_star<T: Real>(spec: &MixtureSpec<T>, x: &[T]) -> Result<Matrix<T>> {
    let r = spec.r();
    if x.len() != r {
        return Err(Error::Dimension { expected: r, got: x.len() });
    }
    if let Some((index, &v)) = x.iter().enumerate().find(|(_, &v)| v <= T::zero()) {
        return Err(Error::NonPositivePoint {
            index,
            value: v.to_f64().unwrap_or(f64::NAN),
        });
    }
    let grad = spec.gradient(x);
    let hess = spec.hessian(x);
    let (lambda, h) = (spec.lambda(), spec.h());
    Ok((0..r)
        .map(|s| {
            (0..r)
                .map(|t| {
                    if s == t {
                        (grad[s] + lambda[s] * h[s] * h[s]) / x[s] - hess[s][s]
                    } else {
                        -hess[s][t]
                    }
                })
                .collect()
        })
        .collect())
}

fn check_diag_signed<T: Real>(m: &Matrix<T>) -> Result<()> {
    let n = m.len();
    for i in 0..n {
        if m[i].len() != n {
            return Err(Error::Dimension { expected: n, got: m[i].len() });
        }
    }
    let scale = m.iter().flatten().fold(T::one(), |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            let gap = (m[i][j] - m[j][i]).abs();
            if gap > T::lit(1e-12) * scale {
                return Err(Error::NotSymmetric {
                    i,
                    j,
                    gap: gap.to_f64().unwrap(),
                });
            }
            if m[i][j] >= T::zero() {
                return Err(Error::NotDiagonallySigned {
                    i,
                    j,
                    value: m[i][j].to_f64().unwrap(),
                });
            }
        }
    }
    Ok(())
}

/// min_s (Mv)_s / v_s, the value of the sup–min characterization at v.
pub fn sup_min_value<T: Real>(m: &Matrix<T>, v: &[T]) -> T {
    mat_vec(m, v)
        .iter()
        .zip(v)
        .map(|(&mv, &vi)| mv / vi)
        .fold(T::infinity(), |a, b| a.min(b))
}

/// Minimal eigenvalue and its positive eigenvector for a symmetric matrix
/// with strictly negative off-diagonal entries.
///
/// Off-diagonal negativity is what the Perron argument needs; the diagonal
/// is not required to be nonnegative since shifting by a multiple of the
/// identity does not change eigenvectors.
pub fn min_eig_diag_signed<T: Real>(m: &Matrix<T>) -> Result<(T, Vec<T>)> {
    check_diag_signed(m)?;
    let n = m.len();
    if n == 1 {
        return Ok((m[0][0], vec![T::one()]));
    }
    let eig = jacobi_eigen(m)?;
    let lam = eig.values[0];
    let mut v = eig.vectors[0].clone();
    if v[0] < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    if let Some(i) = v.iter().position(|&x| x <= T::zero()) {
        return Err(Error::Eigen(format!(
            "minimal eigenvector has nonpositive entry {i}: {:?}",
            v[i]
        )));
    }
    let scale = m.iter().flatten().fold(T::one(), |a, x| a.max(x.abs()));
    let check = sup_min_value(m, &v);
    let slack = T::lit(1e-9) * scale.max(T::one());
    // f32 cannot meet the f64 threshold; loosen by precision ratio.
    let slack = slack.max(T::epsilon() * T::lit(1e3) * scale);
    if (check - lam).abs() > slack {
        return Err(Error::Eigen(format!(
            "sup-min value {check:?} disagrees with eigenvalue {lam:?}"
        )));
    }
    Ok((lam, v))
}

/// Classifies x (either 0 or strictly positive) against tolerance `tol`.
pub fn classify<T: Real>(spec: &MixtureSpec<T>, x: &[T], tol: T) -> Result<SolvabilityReport<T>> {
    let r = spec.r();
    if x.len() != r {
        return Err(Error::Dimension { expected: r, got: x.len() });
    }
    let zeros = x.iter().filter(|&&v| v == T::zero()).count();
    if zeros == r {
        let classification = if spec.has_field() {
            Classification::SuperSolvable
        } else {
            Classification::Solvable
        };
        let unit = T::one() / T::from_usize(r).unwrap().sqrt();
        return Ok(SolvabilityReport {
            m_star: vec![vec![T::zero(); r]; r],
            min_eig: T::zero(),
            perron_vector: vec![unit; r],
            classification,
            tolerance_used: tol,
        });
    }
    if zeros > 0 {
        return Err(Error::MixedZeroPoint);
    }
    let m = m_star(spec, x)?;
    let (min_eig, perron_vector) = min_eig_diag_signed(&m)?;
    let scale = m.iter().flatten().fold(T::one(), |a, v| a.max(v.abs()));
    let tolerance_used = tol * scale;
    let classification = if min_eig.abs() <= tolerance_used {
        Classification::Solvable
    } else if min_eig > T::zero() {
        Classification::SuperSolvable
    } else {
        Classification::StrictlySubSolvable
    };
    Ok(SolvabilityReport {
        m_star: m,
        min_eig,
        perron_vector,
        classification,
        tolerance_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m_star_examples() {
        let sq = MixtureSpec::pure(2, 0.0).unwrap();
        assert_eq!(m_star(&sq, &[1.0]).unwrap(), vec![vec![0.0]]);
        let cube = MixtureSpec::pure(3, 0.0).unwrap();
        assert_eq!(m_star(&cube, &[1.0]).unwrap(), vec![vec![-3.0]]);
        let field = MixtureSpec::pure(2, 2.0).unwrap();
        assert_eq!(m_star(&field, &[1.0]).unwrap(), vec![vec![4.0]]);
        assert!(matches!(
            m_star(&sq, &[0.0]),
            Err(Error::NonPositivePoint { .. })
        ));
    }

    #[test]
    fn min_eig_examples() {
        let (l, v) = min_eig_diag_signed(&vec![vec![1.0f64, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!(l.abs() < 1e-14);
        assert!((v[0] - 0.5f64.sqrt()).abs() < 1e-14 && (v[1] - v[0]).abs() < 1e-14);
        let (l, _) = min_eig_diag_signed(&vec![vec![2.0f64, -1.0], vec![-1.0, 2.0]]).unwrap();
        assert!((l - 1.0).abs() < 1e-14);
        assert_eq!(min_eig_diag_signed(&vec![vec![-7.0]]).unwrap(), (-7.0, vec![1.0]));
    }

    #[test]
    fn min_eig_rejections() {
        assert!(matches!(
            min_eig_diag_signed(&vec![vec![1.0, -1.0], vec![-2.0, 1.0]]),
            Err(Error::NotSymmetric { .. })
        ));
        assert!(matches!(
            min_eig_diag_signed(&vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            Err(Error::NotDiagonallySigned { .. })
        ));
    }

    #[test]
    fn classify_examples() {
        let sq = MixtureSpec::pure(2, 0.0).unwrap();
        let cube = MixtureSpec::pure(3, 0.0).unwrap();
        let c = |s: &MixtureSpec, x: &[f64]| classify(s, x, DEFAULT_TOL).unwrap().classification;
        assert_eq!(c(&sq, &[1.0]), Classification::Solvable);
        assert_eq!(c(&cube, &[1.0]), Classification::StrictlySubSolvable);
        assert_eq!(c(&cube, &[0.0]), Classification::Solvable);
        assert_eq!(
            c(&MixtureSpec::pure(3, 0.5).unwrap(), &[0.0]),
            Classification::SuperSolvable
        );
        let two = MixtureSpec::uniform(2, &[2, 3], 0.3, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            classify(&two, &[0.0, 0.5], DEFAULT_TOL),
            Err(Error::MixedZeroPoint)
        ));
    }
}

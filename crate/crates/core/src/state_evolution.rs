//! Deterministic state-evolution predictions for both stages.
//!
//! Stage I starts from the constant vector w⁰ = √(ξ^s(Φ(q1)) + h_s²), whose
//! mean is not h. The limiting cross moments therefore follow
//!
//! ```text
//! ρ^1 = a ⊙ h ⊙ √Φ(q1),   ρ^{j+1} = α(ρ^j),   E[M^j M^k] = ρ^{j+1} (j < k)
//! ```
//!
//! which converges to Φ(q1) just like the sequence R^{k+1} = α(R^k) from 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::amp::SignPattern;
use crate::error::{Error, Result};
use crate::mixture::MixtureSpec;
use crate::pseudomax::{descent_integrals, f_values, root_term, PhiPath};
use crate::solvability::{classify, Classification, DEFAULT_TOL};

/// Default iteration cap and tolerance of the overlap recursion.
pub const OVERLAP_MAX_ITER: usize = 500;
pub const OVERLAP_TOL: f64 = 1e-10;

fn is_origin(x: &[f64]) -> bool {
    x.iter().all(|&v| v == 0.0)
}

/// α_s(x) = (ξ^s(x) + h_s²) Φ_s(q1) / (ξ^s(Φ(q1)) + h_s²).
pub fn alpha_map(spec: &MixtureSpec<f64>, phi_q1: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let h = spec.h();
    let at_root = spec.xi_species(phi_q1);
    let at_x = spec.xi_species(x);
    (0..spec.r())
        .map(|s| {
            let den = at_root[s] + h[s] * h[s];
            if phi_q1[s] == 0.0 {
                Ok(0.0)
            } else if den <= 0.0 {
                Err(Error::ZeroDenominator(s))
            } else {
                Ok((at_x[s] + h[s] * h[s]) * phi_q1[s] / den)
            }
        })
        .collect()
}

/// a_s = √(Φ_s(q1) / (ξ^s(Φ(q1)) + h_s²)), zero where Φ_s(q1) = 0.
pub fn a_vector(spec: &MixtureSpec<f64>, phi_q1: &[f64]) -> Result<Vec<f64>> {
    let h = spec.h();
    let xs = spec.xi_species(phi_q1);
    (0..spec.r())
        .map(|s| {
            let den = xs[s] + h[s] * h[s];
            if phi_q1[s] == 0.0 {
                Ok(0.0)
            } else if den <= 0.0 {
                Err(Error::ZeroDenominator(s))
            } else {
                Ok((phi_q1[s] / den).sqrt())
            }
        })
        .collect()
}

/// w⁰_s = √(ξ^s(Φ(q1)) + h_s²).
pub fn w0_vector(spec: &MixtureSpec<f64>, phi_q1: &[f64]) -> Vec<f64> {
    let h = spec.h();
    spec.xi_species(phi_q1)
        .iter()
        .zip(h)
        .map(|(x, hs)| (x + hs * hs).sqrt())
        .collect()
}

fn check_root(spec: &MixtureSpec<f64>, phi_q1: &[f64]) -> Result<()> {
    if phi_q1.len() != spec.r() {
        return Err(Error::Dimension {
            expected: spec.r(),
            got: phi_q1.len(),
        });
    }
    if is_origin(phi_q1) {
        return Ok(());
    }
    let report = classify(spec, phi_q1, DEFAULT_TOL)?;
    if report.classification == Classification::StrictlySubSolvable {
        return Err(Error::Precondition(format!(
            "Φ(q1) = {phi_q1:?} is strictly sub-solvable"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapIterates {
    /// R^0 = 0, R^{k+1} = α(R^k).
    pub iterates: Vec<Vec<f64>>,
    /// ‖R^k - R^{k-1}‖_∞ at the last step.
    pub gap: f64,
    /// ‖R^k - Φ(q1)‖_∞ at the last step.
    pub distance: f64,
}

/// Runs the recursion until consecutive iterates agree within `tol`.
pub fn iterate_overlaps(spec: &MixtureSpec<f64>, phi_q1: &[f64], k_max: usize, tol: f64) -> Result<OverlapIterates> {
    check_root(spec, phi_q1)?;
    let mut iterates = vec![vec![0.0; spec.r()]];
    let mut gap = f64::INFINITY;
    for _ in 0..k_max {
        let next = alpha_map(spec, phi_q1, iterates.last().unwrap())?;
        gap = next
            .iter()
            .zip(iterates.last().unwrap())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        iterates.push(next);
        if gap < tol {
            break;
        }
    }
    if is_origin(phi_q1) {
        gap = 0.0;
    }
    if gap >= tol {
        return Err(Error::NoConvergence {
            iterations: k_max,
            gap,
        });
    }
    let distance = iterates
        .last()
        .unwrap()
        .iter()
        .zip(phi_q1)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    Ok(OverlapIterates {
        iterates,
        gap,
        distance,
    })
}

/// ρ^1, ..., ρ^count: the limiting E[M^{j-1} M^k] for j ≤ k.
pub fn cross_sequence(spec: &MixtureSpec<f64>, phi_q1: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
    let a = a_vector(spec, phi_q1)?;
    let h = spec.h();
    let mut seq = Vec::with_capacity(count);
    if count == 0 {
        return Ok(seq);
    }
    seq.push((0..spec.r()).map(|s| a[s] * h[s] * phi_q1[s].sqrt()).collect::<Vec<_>>());
    while seq.len() < count {
        let next = alpha_map(spec, phi_q1, seq.last().unwrap())?;
        seq.push(next);
    }
    Ok(seq)
}

/// Limiting second moments of the Stage-I iterates, indexed [s][j][k].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Tables {
    /// E[W̃^j W̃^k] with W̃ = W - h.
    pub w_tilde: Vec<Vec<Vec<f64>>>,
    /// E[M^j M^k].
    pub m: Vec<Vec<Vec<f64>>>,
}

pub fn stage1_covariances(spec: &MixtureSpec<f64>, phi_q1: &[f64], k_max: usize) -> Result<Stage1Tables> {
    check_root(spec, phi_q1)?;
    let r = spec.r();
    let rho = cross_sequence(spec, phi_q1, k_max + 1)?;
    let xi_root = spec.xi_species(phi_q1);
    let w0 = w0_vector(spec, phi_q1);
    let h = spec.h();
    let xi_rho: Vec<Vec<f64>> = rho.iter().map(|x| spec.xi_species(x)).collect();
    let n = k_max + 1;
    let mut w_tilde = vec![vec![vec![0.0; n]; n]; r];
    let mut m = vec![vec![vec![0.0; n]; n]; r];
    for s in 0..r {
        for j in 0..n {
            for k in 0..n {
                let (lo, hi) = (j.min(k), j.max(k));
                w_tilde[s][j][k] = if lo == 0 {
                    if hi == 0 {
                        (w0[s] - h[s]).powi(2)
                    } else {
                        0.0
                    }
                } else if lo == hi {
                    xi_root[s]
                } else {
                    xi_rho[lo - 1][s]
                };
                m[s][j][k] = if lo == hi { phi_q1[s] } else { rho[lo][s] };
            }
        }
    }
    Ok(Stage1Tables { w_tilde, m })
}

/// Σ_s λ_s Δ_s √(Φ_s(q1)(h_s² + ξ^s(Φ(q1)))).
pub fn stage1_energy(spec: &MixtureSpec<f64>, phi_q1: &[f64], delta: &SignPattern) -> Result<f64> {
    root_term(spec, phi_q1, Some(&delta.as_f64()))
}

/// The Stage-II step grid and its coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IampSchedule {
    pub ell_lower: usize,
    pub ell_upper: usize,
    pub delta: f64,
    pub q1: f64,
    /// q^δ_ℓ for ℓ = ℓ̲, ..., ℓ̄ + 1 (index ℓ - ℓ̲), capped at 1.
    pub q: Vec<f64>,
    /// Φ(q^δ_ℓ) on the same index.
    pub phi: Vec<Vec<f64>>,
    /// ξ^s(Φ(q^δ_ℓ)).
    pub xi: Vec<Vec<f64>>,
    /// u^δ_ℓ for ℓ = ℓ̲, ..., ℓ̄.
    pub u: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    /// Limiting overlap of m^ℓ̲ with m^(ℓ̲-1).
    pub root_cross: Vec<f64>,
}

pub fn iamp_coeffs(spec: &MixtureSpec<f64>, phi: &PhiPath, ell_lower: usize) -> Result<IampSchedule> {
    if ell_lower < 2 {
        return Err(Error::Config(format!("ℓ̲ must be at least 2, got {ell_lower}")));
    }
    let delta = 1.0 / ell_lower as f64;
    let q1 = phi.q1;
    let steps = ((1.0 - 2.0 * delta - q1) / delta + 1e-9).floor();
    let ell_upper = ell_lower + if steps > 0.0 { steps as usize } else { 0 };
    let q: Vec<f64> = (ell_lower..=ell_upper + 1)
        .map(|l| (q1 + (l - ell_lower) as f64 * delta).min(1.0))
        .collect();
    let phis: Vec<Vec<f64>> = q.iter().map(|&x| phi.phi_at(x)).collect::<Result<_>>()?;
    let xi: Vec<Vec<f64>> = phis.iter().map(|p| spec.xi_species(p)).collect();
    let r = spec.r();
    let mut u = Vec::with_capacity(ell_upper - ell_lower + 1);
    for i in 0..=(ell_upper - ell_lower) {
        let row = (0..r)
            .map(|s| {
                let dphi = phis[i + 1][s] - phis[i][s];
                let dxi = xi[i + 1][s] - xi[i][s];
                if dphi <= 0.0 || dxi <= 0.0 {
                    return Err(Error::Precondition(format!(
                        "Φ is not increasing between q = {} and {} (species {s})",
                        q[i],
                        q[i + 1]
                    )));
                }
                Ok((dphi / dxi).sqrt())
            })
            .collect::<Result<Vec<_>>>()?;
        u.push(row);
    }
    let phi_q1 = phi.phi_q1();
    let a = a_vector(spec, phi_q1)?;
    let root_cross = if is_origin(phi_q1) {
        vec![0.0; r]
    } else {
        cross_sequence(spec, phi_q1, ell_lower)?.pop().unwrap()
    };
    Ok(IampSchedule {
        ell_lower,
        ell_upper,
        delta,
        q1,
        q,
        phi: phis,
        xi,
        u,
        a,
        root_cross,
    })
}

impl IampSchedule {
    fn idx(&self, ell: usize) -> usize {
        ell - self.ell_lower
    }

    pub fn q_at(&self, ell: usize) -> f64 {
        self.q[self.idx(ell)]
    }

    pub fn phi_at(&self, ell: usize) -> &[f64] {
        &self.phi[self.idx(ell)]
    }

    pub fn u_at(&self, ell: usize) -> &[f64] {
        &self.u[self.idx(ell)]
    }

    /// Limiting R(n^ℓ, n^ℓ): the root variance plus the telescoped increments,
    /// Φ(q_ℓ) + Φ(q1 + δ) - Φ(q1).
    pub fn n_self_overlap(&self, ell: usize) -> Vec<f64> {
        let i = self.idx(ell).min(self.phi.len() - 1);
        (0..self.a.len())
            .map(|s| self.phi[i][s] + self.phi[1][s] - self.phi[0][s])
            .collect()
    }

    /// √(Φ(q_{ℓ+1}) - Φ(q_ℓ)), the increment scale of the root noise and of injections.
    pub fn phi_increment_root(&self, ell: usize) -> Vec<f64> {
        let i = self.idx(ell);
        self.phi[i + 1]
            .iter()
            .zip(&self.phi[i])
            .map(|(a, b)| (a - b).max(0.0).sqrt())
            .collect()
    }

    /// ∂n^L/∂z^j for j = ℓ̲..=L, given which steps below L inject noise.
    pub fn linear_coefficients(&self, big_l: usize, injected: &dyn Fn(usize) -> bool) -> Vec<Vec<f64>> {
        let r = self.a.len();
        (self.ell_lower..=big_l)
            .map(|j| {
                let mut c = vec![0.0; r];
                if j == self.ell_lower {
                    c.copy_from_slice(&self.a);
                }
                if j > self.ell_lower && !injected(j - 1) {
                    c.iter_mut().zip(self.u_at(j - 1)).for_each(|(x, u)| *x += u);
                }
                if j < big_l && !injected(j) {
                    c.iter_mut().zip(self.u_at(j)).for_each(|(x, u)| *x -= u);
                }
                c
            })
            .collect()
    }

    /// d_{L,j} for j = ℓ̲..=L with predicted overlaps; multiplies n^(j-1)
    /// (m^(ℓ̲-1) when j = ℓ̲).
    /// `signs` is Δ for the signed descent (all ones otherwise); it flips the
    /// linear coefficients but not the overlaps.
    pub fn onsager_se(
        &self,
        spec: &MixtureSpec<f64>,
        big_l: usize,
        injected: &dyn Fn(usize) -> bool,
        signs: &[f64],
    ) -> Vec<Vec<f64>> {
        let overlaps: Vec<Vec<f64>> = (self.ell_lower..=big_l)
            .map(|j| {
                if j == self.ell_lower {
                    self.root_cross.clone()
                } else {
                    self.phi_at(j).to_vec()
                }
            })
            .collect();
        self.onsager_with(spec, big_l, injected, &overlaps, signs)
    }

    /// d_{L,j} from supplied overlaps R(n^L, n^(j-1)), one per j.
    pub fn onsager_with(
        &self,
        spec: &MixtureSpec<f64>,
        big_l: usize,
        injected: &dyn Fn(usize) -> bool,
        overlaps: &[Vec<f64>],
        signs: &[f64],
    ) -> Vec<Vec<f64>> {
        let c = self.linear_coefficients(big_l, injected);
        c.iter()
            .zip(overlaps)
            .map(|(cj, sigma)| {
                let j = spec.partials(sigma).species;
                j.iter()
                    .map(|row| row.iter().zip(cj).zip(signs).map(|((a, b), d)| a * b * d).sum())
                    .collect()
            })
            .collect()
    }
}

/// Limiting Stage-II covariances, indexed [s][ℓ - ℓ̲][j - ℓ̲] over ℓ̲..=ℓ̄.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmTables {
    /// E[Z_ℓ Z_j] = ξ^s(Φ(q_{ℓ∧j})).
    pub z: Vec<Vec<Vec<f64>>>,
    /// E[N_ℓ N_j] = Φ_s(q_{(ℓ∧j)+1}).
    pub n: Vec<Vec<Vec<f64>>>,
    /// E[(Z_{ℓ+1} - Z_ℓ)²] for ℓ̲ ≤ ℓ < ℓ̄.
    pub z_increment: Vec<Vec<f64>>,
    /// E[(Z_{ℓ+1} - Z_ℓ) Z_j] for j ≤ ℓ, identically zero.
    pub z_orthogonality: f64,
    /// E[(N_{ℓ+1} - N_ℓ) N_j] for j ≤ ℓ, identically zero.
    pub n_orthogonality: f64,
}

pub fn bm_covariances(schedule: &IampSchedule) -> BmTables {
    let r = schedule.a.len();
    let len = schedule.ell_upper - schedule.ell_lower + 1;
    let mut z = vec![vec![vec![0.0; len]; len]; r];
    let mut n = vec![vec![vec![0.0; len]; len]; r];
    for s in 0..r {
        for i in 0..len {
            for j in 0..len {
                let lo = i.min(j);
                z[s][i][j] = schedule.xi[lo][s];
                n[s][i][j] = schedule.phi[lo + 1][s];
            }
        }
    }
    let z_increment = (0..r)
        .map(|s| (0..len - 1).map(|i| schedule.xi[i + 1][s] - schedule.xi[i][s]).collect())
        .collect();
    BmTables {
        z,
        n,
        z_increment,
        z_orthogonality: 0.0,
        n_orthogonality: 0.0,
    }
}

/// Σ_s λ_s ∫_{q1}^1 √(Φ'_s (ξ^s∘Φ)') dq.
pub fn iamp_energy(spec: &MixtureSpec<f64>, phi: &PhiPath) -> Result<f64> {
    Ok(descent_integrals(spec, phi)?
        .iter()
        .zip(spec.lambda())
        .map(|(a, l)| a * l)
        .sum())
}

/// Stage-I energy for Δ plus Σ_s λ_s Δ_s ∫ √(Φ'_s (ξ^s∘Φ)') dq.
pub fn signed_total_energy(spec: &MixtureSpec<f64>, phi: &PhiPath, delta: &SignPattern) -> Result<f64> {
    let signs = delta.as_f64();
    let integrals = descent_integrals(spec, phi)?;
    Ok(stage1_energy(spec, phi.phi_q1(), delta)?
        + (0..spec.r())
            .map(|s| spec.lambda()[s] * signs[s] * integrals[s])
            .sum::<f64>())
}

/// A_s(q) = 1/f_s(q) + Σ_s' f_s'(q) ∂_s'ξ^s(Φ(q)).
pub fn a_of_q(spec: &MixtureSpec<f64>, phi: &PhiPath, q: f64) -> Result<Vec<f64>> {
    let p = phi.phi_at(q)?;
    let v = phi.dphi_at(q)?;
    Ok(a_from(spec, &p, &v))
}

fn a_from(spec: &MixtureSpec<f64>, p: &[f64], v: &[f64]) -> Vec<f64> {
    let f = f_values(spec, p, v);
    let j = spec.partials(p).species;
    (0..spec.r())
        .map(|s| 1.0 / f[s] + (0..spec.r()).map(|t| f[t] * j[s][t]).sum::<f64>())
        .collect()
}

/// A_s(q1; Δ) = Δ_s/a_s + Σ_s' Δ_s' a_s' ∂_s'ξ^s(Φ(q1)).
pub fn a_signed(spec: &MixtureSpec<f64>, phi_q1: &[f64], delta: &SignPattern) -> Result<Vec<f64>> {
    let a = a_vector(spec, phi_q1)?;
    if let Some(s) = a.iter().position(|&x| x == 0.0) {
        return Err(Error::Precondition(format!(
            "signed A needs Φ_s(q1) > 0; species {s} has Φ_s(q1) = 0"
        )));
    }
    let d = delta.as_f64();
    let j = spec.partials(phi_q1).species;
    Ok((0..spec.r())
        .map(|s| d[s] / a[s] + (0..spec.r()).map(|t| d[t] * a[t] * j[s][t]).sum::<f64>())
        .collect())
}

/// Ĉ_s(q) = A_s(q) + Σ_s' ∫_q^1 f_s' d/dq ∂_s'ξ^s(Φ) dq on the path grid, skipping
/// grid points where f diverges. Constant in q for a pseudo-maximizer.
pub fn c_hat(spec: &MixtureSpec<f64>, phi: &PhiPath) -> Vec<(f64, Vec<f64>)> {
    let r = spec.r();
    let lambda = spec.lambda();
    let m = phi.len();
    let ts: Vec<f64> = phi
        .grid
        .iter()
        .map(|&q| {
            if phi.q1 >= 1.0 {
                1.0
            } else {
                ((q - phi.q1) / (1.0 - phi.q1)).max(0.0).sqrt()
            }
        })
        .collect();
    let c = 2.0 * (1.0 - phi.q1);
    let mut rows: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(m);
    for i in 0..m {
        let (p, v) = (&phi.phi[i], &phi.dphi[i]);
        let f = f_values(spec, p, v);
        let third = spec.third(p);
        let integrand: Vec<f64> = (0..r)
            .map(|s| {
                (0..r)
                    .map(|t| {
                        let dj: f64 = (0..r).map(|u| third[s][t][u] * v[u]).sum::<f64>() / lambda[s];
                        f[t] * dj
                    })
                    .sum::<f64>()
                    * c
                    * ts[i]
            })
            .collect();
        let a = a_from(spec, p, v);
        let ok = integrand.iter().chain(&a).all(|x| x.is_finite());
        rows.push(ok.then_some((a, integrand)));
    }
    let mut out = Vec::new();
    let mut tail = vec![0.0; r];
    for i in (0..m).rev() {
        let Some((a, integrand)) = &rows[i] else { break };
        if i + 1 < m {
            let (_, next) = rows[i + 1].as_ref().unwrap();
            let dt = ts[i + 1] - ts[i];
            for s in 0..r {
                tail[s] += 0.5 * dt * (integrand[s] + next[s]);
            }
        }
        out.push((phi.grid[i], (0..r).map(|s| a[s] + tail[s]).collect()));
    }
    out.reverse();
    out
}

/// max over species of (max_q Ĉ_s - min_q Ĉ_s).
pub fn c_hat_spread(table: &[(f64, Vec<f64>)]) -> f64 {
    let Some((_, first)) = table.first() else { return 0.0 };
    (0..first.len())
        .map(|s| {
            let vals = table.iter().map(|(_, v)| v[s]);
            let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Everything the state evolution predicts for one model and path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SEPrediction {
    pub overlaps: Vec<Vec<f64>>,
    pub cross_overlaps: Vec<Vec<f64>>,
    pub a_vec: Vec<f64>,
    /// Keyed by the sign pattern written as a string of '+' and '-'.
    pub stage1_energy: BTreeMap<String, f64>,
    pub stage1_tables: Stage1Tables,
    pub schedule: Option<IampSchedule>,
    pub bm_cov: Option<BmTables>,
    pub iamp_energy: f64,
    pub total_energy: f64,
    pub a_of_q: Vec<(f64, Vec<f64>)>,
    pub c_hat: Vec<(f64, Vec<f64>)>,
    pub a_q1_signed: BTreeMap<String, Vec<f64>>,
}

/// Builds the full prediction. `phi` is omitted in the super-solvable regime.
pub fn predict(spec: &MixtureSpec<f64>, phi: Option<&PhiPath>, ell_lower: usize) -> Result<SEPrediction> {
    let r = spec.r();
    let degenerate = PhiPath::degenerate(r);
    let path = phi.unwrap_or(&degenerate);
    let phi_q1 = path.phi_q1().to_vec();
    let overlaps = match iterate_overlaps(spec, &phi_q1, OVERLAP_MAX_ITER, OVERLAP_TOL) {
        Ok(it) => it.iterates,
        Err(Error::NoConvergence { .. }) => {
            let mut seq = vec![vec![0.0; r]];
            for _ in 0..OVERLAP_MAX_ITER {
                let next = alpha_map(spec, &phi_q1, seq.last().unwrap())?;
                seq.push(next);
            }
            seq
        }
        Err(e) => return Err(e),
    };
    let patterns = SignPattern::all(r);
    let mut stage1 = BTreeMap::new();
    let mut signed = BTreeMap::new();
    for p in &patterns {
        stage1.insert(p.to_string(), stage1_energy(spec, &phi_q1, p)?);
        if let Ok(a) = a_signed(spec, &phi_q1, p) {
            signed.insert(p.to_string(), a);
        }
    }
    let (schedule, bm, a_table, c_table) = if phi.is_some() {
        let schedule = iamp_coeffs(spec, path, ell_lower)?;
        let bm = bm_covariances(&schedule);
        let a_table = path
            .grid
            .iter()
            .zip(path.phi.iter().zip(&path.dphi))
            .map(|(&q, (p, v))| (q, a_from(spec, p, v)))
            .filter(|(_, a)| a.iter().all(|x| x.is_finite()))
            .collect();
        (Some(schedule), Some(bm), a_table, c_hat(spec, path))
    } else {
        (None, None, Vec::new(), Vec::new())
    };
    let iamp = if phi.is_some() { iamp_energy(spec, path)? } else { 0.0 };
    let total = stage1[&SignPattern::plus(r).to_string()] + iamp;
    Ok(SEPrediction {
        cross_overlaps: cross_sequence(spec, &phi_q1, ell_lower + 1)?,
        stage1_tables: stage1_covariances(spec, &phi_q1, ell_lower.min(60))?,
        overlaps,
        a_vec: a_vector(spec, &phi_q1)?,
        stage1_energy: stage1,
        schedule,
        bm_cov: bm,
        iamp_energy: iamp,
        total_energy: total,
        a_of_q: a_table,
        c_hat: c_table,
        a_q1_signed: signed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudomax::{alg_functional, solve_phi, PhiConfig};

    fn sq(h: f64) -> MixtureSpec<f64> {
        MixtureSpec::pure(2, h).unwrap()
    }

    #[test]
    fn alpha_examples() {
        let spec = sq(1.0);
        let a = alpha_map(&spec, &[1.0], &[0.25]).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15);
        assert_eq!(alpha_map(&spec, &[1.0], &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(alpha_map(&sq(0.0), &[0.0], &[0.3]).unwrap(), vec![0.0]);
    }

    #[test]
    fn overlap_recursion_closed_form() {
        let it = iterate_overlaps(&sq(1.0), &[1.0], 500, 1e-10).unwrap();
        let expect = [0.0, 1.0 / 3.0, 5.0 / 9.0, 19.0 / 27.0];
        for (x, e) in it.iterates.iter().zip(expect) {
            assert!((x[0] - e).abs() < 1e-15);
        }
        assert!(it.iterates.windows(2).all(|w| w[0][0] <= w[1][0]));
        assert!(it.distance < 1e-9);
        let zero = iterate_overlaps(&sq(0.0), &[0.0], 10, 1e-10).unwrap();
        assert!(zero.iterates.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn stage1_tables_example() {
        let t = stage1_covariances(&sq(1.0), &[1.0], 5).unwrap();
        for j in 1..=5 {
            assert!((t.w_tilde[0][j][j] - 2.0).abs() < 1e-14);
            assert!((t.m[0][j][j] - 1.0).abs() < 1e-14);
        }
        assert_eq!(t.w_tilde[0][0][3], 0.0);
        // ρ^1 = a h √Φ = 1/√3, ρ^2 = (2/√3 + 1)/3
        assert!((t.m[0][0][4] - 1.0 / 3f64.sqrt()).abs() < 1e-14);
        assert!((t.m[0][1][2] - (2.0 / 3f64.sqrt() + 1.0) / 3.0).abs() < 1e-14);
    }

    #[test]
    fn stage1_energy_signs() {
        let spec = sq(1.0);
        let plus = stage1_energy(&spec, &[1.0], &SignPattern::plus(1)).unwrap();
        let minus = stage1_energy(&spec, &[1.0], &SignPattern::new(vec![-1]).unwrap()).unwrap();
        assert!((plus - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(minus, -plus);
        assert_eq!(stage1_energy(&sq(0.0), &[0.0], &SignPattern::plus(1)).unwrap(), 0.0);
    }

    #[test]
    fn signed_a_example() {
        let spec = sq(1.0);
        let a = a_signed(&spec, &[1.0], &SignPattern::plus(1)).unwrap();
        assert!((a[0] - 5.0 / 3f64.sqrt()).abs() < 1e-14);
        let b = a_signed(&spec, &[1.0], &SignPattern::new(vec![-1]).unwrap()).unwrap();
        assert!((b[0] + 5.0 / 3f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn schedule_examples() {
        let spec = sq(0.0);
        let path = PhiPath::identity(&spec, 0.0, 400);
        let sch = iamp_coeffs(&spec, &path, 10).unwrap();
        assert_eq!(sch.ell_upper, 18);
        for u in &sch.u {
            assert!((u[0] - 0.5f64.sqrt()).abs() < 1e-12);
        }
        let bm = bm_covariances(&sch);
        for inc in &bm.z_increment[0] {
            assert!((inc - 0.2).abs() < 1e-12);
        }
        assert_eq!(bm.n[0][3][7], bm.n[0][3][4]);
    }

    #[test]
    fn u_tracks_f() {
        let spec = MixtureSpec::pure(3, 0.0).unwrap();
        let path = PhiPath::identity(&spec, 0.0, 400);
        let sch = iamp_coeffs(&spec, &path, 100).unwrap();
        let delta = sch.delta;
        for l in 110..=sch.ell_upper {
            let q = sch.q_at(l);
            // Φ is linear, so the difference quotient is exact at the midpoint
            let mid = 1.0 / (6.0 * (q + delta / 2.0)).sqrt();
            assert!((sch.u_at(l)[0] - mid).abs() < 1e-9);
            if q >= 0.3 {
                assert!((sch.u_at(l)[0] - 1.0 / (6.0 * q).sqrt()).abs() < 0.02);
            }
        }
    }

    #[test]
    fn linear_coefficients() {
        let spec = sq(0.0);
        let path = PhiPath::identity(&spec, 0.0, 400);
        let sch = iamp_coeffs(&spec, &path, 10).unwrap();
        let c = sch.linear_coefficients(14, &|_| false);
        // a = 0 without field, so the telescoping sum vanishes
        let total: f64 = c.iter().map(|x| x[0]).sum();
        assert!(total.abs() < 1e-14);
        assert_eq!(c[4][0], sch.u_at(13)[0]);
        let c = sch.linear_coefficients(14, &|l| l == 12);
        assert_eq!(c[2][0], sch.u_at(11)[0]);
        assert_eq!(c[3][0], -sch.u_at(13)[0]);
    }

    #[test]
    fn decomposition_and_c_hat() {
        for spec in [
            MixtureSpec::pure(2, 0.0).unwrap(),
            MixtureSpec::pure(3, 0.0).unwrap(),
            MixtureSpec::uniform(2, &[2, 3], 0.3, vec![0.0, 0.0]).unwrap(),
            MixtureSpec::single_species(&[(2, 1.0), (3, 1.0)], 0.3).unwrap(),
        ] {
            let paths = if spec.r() == 1 && !spec.has_field() {
                vec![PhiPath::identity(&spec, 0.0, 400)]
            } else {
                solve_phi(&spec, &PhiConfig::default()).unwrap()
            };
            for p in paths {
                let total = stage1_energy(&spec, p.phi_q1(), &SignPattern::plus(spec.r())).unwrap()
                    + iamp_energy(&spec, &p).unwrap();
                assert!((total - alg_functional(&spec, &p).unwrap()).abs() < 1e-12);
                let table = c_hat(&spec, &p);
                assert!(table.len() >= p.len() - 1);
                assert!(c_hat_spread(&table) < 1e-4, "{}", c_hat_spread(&table));
            }
        }
    }

    #[test]
    fn a_constant_for_two_spin() {
        let spec = sq(0.0);
        let path = PhiPath::identity(&spec, 0.0, 400);
        for q in [0.0, 0.3, 1.0] {
            assert!((a_of_q(&spec, &path, q).unwrap()[0] - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn signed_matches_unsigned_at_root() {
        let spec = MixtureSpec::single_species(&[(2, 1.0), (3, 1.0)], 0.3).unwrap();
        let path = solve_phi(&spec, &PhiConfig::default()).unwrap().remove(0);
        let a = a_signed(&spec, path.phi_q1(), &SignPattern::plus(1)).unwrap();
        let b = a_of_q(&spec, &path, path.q1).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-8);
    }
}

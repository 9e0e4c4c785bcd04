//! Pseudo-maximizers Φ, the functional 𝔸(Φ) and the threshold ALG.
//!
//! Φ is found by shooting. The second-order system is integrated in the
//! variable t ∈ [0, 1] with q = q1 + (1 - q1) t², which keeps the integrands of
//! pure models polynomial in t near q1 (so Simpson is exact for them) and
//! resolves the square-root behaviour of Φ near q1 = 0.
//!
//! With v = Φ', J_ss' = ∂_s' ξ^s(Φ), g = J v and f_s = √(v_s / g_s), the
//! condition f_s' = Ψ v_s for all s together with Σ λ_s v_s' = 0 gives, at each
//! q, an (r+1)×(r+1) linear system in (v', Ψ):
//!
//! ```text
//! v_s'/v_s - (J v')_s / g_s - (2 v_s / f_s) Ψ = T_s / g_s,   T_s = Σ ∂_s''∂_s' ξ^s v_s' v_s''
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve, Matrix};
use crate::mixture::MixtureSpec;
use crate::solvability::{classify, Classification, DEFAULT_TOL};

/// Radicands this close to zero from below are treated as zero.
pub const RADICAND_SLACK: f64 = 1e-12;

pub(crate) fn checked_sqrt(value: f64, q: f64, species: usize) -> Result<f64> {
    if value >= 0.0 {
        Ok(value.sqrt())
    } else if value >= -RADICAND_SLACK {
        Ok(0.0)
    } else {
        Err(Error::NegativeRadicand { q, species, value })
    }
}

/// Per-condition defects of a candidate path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathResiduals {
    /// max_q |⟨λ, Φ(q)⟩ - q|
    pub admissibility: f64,
    /// min over grid and species of Φ'_s; must be positive.
    pub monotonicity_margin: f64,
    /// max_s |Φ_s(1) - 1|
    pub terminal: f64,
    /// |λ_min(M*(Φ(q1)))|, zero at the origin.
    pub solvability: f64,
    /// max_s |Φ'_s(q1) - Φ_s(q1)(ξ^s∘Φ)'(q1)/(ξ^s(Φ(q1)) + h_s²)|; zero without field.
    pub derivative: f64,
    /// max_q of the spread across species of (1/Φ'_s) d/dq f_s, by finite differences.
    pub psi_spread: f64,
}

impl PathResiduals {
    pub fn worst(&self) -> f64 {
        self.admissibility
            .max(self.terminal)
            .max(self.solvability)
            .max(self.derivative)
            .max(self.psi_spread)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.monotonicity_margin > 0.0 && self.worst() <= tol
    }
}

/// A path Φ on [q1, 1] sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiPath {
    pub q1: f64,
    pub grid: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub dphi: Vec<Vec<f64>>,
    /// Ψ(q) from the ODE; absent where it diverges (pure models at q = 0).
    pub psi: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<PathResiduals>,
}

impl PhiPath {
    pub fn r(&self) -> usize {
        self.phi[0].len()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn phi_q1(&self) -> &[f64] {
        &self.phi[0]
    }

    /// The q1 = 1 convention: a single point at 1⃗.
    pub fn degenerate(r: usize) -> Self {
        Self {
            q1: 1.0,
            grid: vec![1.0],
            phi: vec![vec![1.0; r]],
            dphi: vec![vec![1.0; r]],
            psi: vec![None],
            residuals: None,
        }
    }

    /// Φ(q) = q, the only admissible path for one species.
    pub fn identity(spec: &MixtureSpec<f64>, q1: f64, m: usize) -> Self {
        let ts: Vec<f64> = (0..=m).map(|i| i as f64 / m as f64).collect();
        let grid: Vec<f64> = ts.iter().map(|t| q1 + (1.0 - q1) * t * t).collect();
        let psi = grid
            .iter()
            .map(|&q| {
                let g = spec.hessian(&[q])[0][0] / spec.lambda()[0];
                let dg = spec.third(&[q])[0][0][0] / spec.lambda()[0];
                let v = -0.5 * dg / g.powf(1.5);
                v.is_finite().then_some(v)
            })
            .collect();
        Self {
            q1,
            phi: grid.iter().map(|&q| vec![q]).collect(),
            dphi: vec![vec![1.0]; grid.len()],
            grid,
            psi,
            residuals: None,
        }
    }

    fn t_of(&self, q: f64) -> f64 {
        if self.q1 >= 1.0 {
            return 1.0;
        }
        ((q - self.q1) / (1.0 - self.q1)).max(0.0).sqrt()
    }

    fn ts(&self) -> Vec<f64> {
        self.grid.iter().map(|&q| self.t_of(q)).collect()
    }

    fn locate(&self, q: f64) -> Result<(usize, f64, f64, f64)> {
        let tol = 1e-12;
        if q < self.q1 - tol || q > 1.0 + tol {
            return Err(Error::Precondition(format!(
                "q = {q} outside the path domain [{}, 1]",
                self.q1
            )));
        }
        let t = self.t_of(q.clamp(self.q1, 1.0));
        let ts = self.ts();
        let i = match ts.partition_point(|&x| x <= t) {
            0 => 0,
            p => (p - 1).min(ts.len().saturating_sub(2)),
        };
        Ok((i, t, ts[i], ts.get(i + 1).copied().unwrap_or(ts[i])))
    }

    /// Φ(q) by cubic Hermite interpolation in t, using the exact slopes Φ' dq/dt.
    pub fn phi_at(&self, q: f64) -> Result<Vec<f64>> {
        if self.len() == 1 {
            return Ok(self.phi[0].clone());
        }
        let (i, t, t0, t1) = self.locate(q)?;
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s),
            s * (1.0 - s) * (1.0 - s),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        let c = 2.0 * (1.0 - self.q1);
        Ok((0..self.r())
            .map(|k| {
                let (p0, p1) = (self.phi[i][k], self.phi[i + 1][k]);
                let (d0, d1) = (self.dphi[i][k] * c * t0, self.dphi[i + 1][k] * c * t1);
                h00 * p0 + h10 * h * d0 + h01 * p1 + h11 * h * d1
            })
            .collect())
    }

    /// Φ'(q), linear in t between grid points.
    pub fn dphi_at(&self, q: f64) -> Result<Vec<f64>> {
        if self.len() == 1 {
            return Ok(self.dphi[0].clone());
        }
        let (i, t, t0, t1) = self.locate(q)?;
        let s = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        Ok((0..self.r())
            .map(|k| (1.0 - s) * self.dphi[i][k] + s * self.dphi[i + 1][k])
            .collect())
    }
}

/// (ξ^s∘Φ)' = Σ_s' ∂_s'ξ^s(Φ) Φ'_s'.
pub(crate) fn xi_s_rate(spec: &MixtureSpec<f64>, phi: &[f64], dphi: &[f64]) -> Vec<f64> {
    let species = spec.partials(phi).species;
    species
        .iter()
        .map(|row| row.iter().zip(dphi).map(|(a, b)| a * b).sum())
        .collect()
}

/// f_s = √(Φ'_s / (ξ^s∘Φ)').
pub(crate) fn f_values(spec: &MixtureSpec<f64>, phi: &[f64], dphi: &[f64]) -> Vec<f64> {
    xi_s_rate(spec, phi, dphi)
        .iter()
        .zip(dphi)
        .map(|(g, v)| (v / g).sqrt())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiConfig {
    /// Number of grid intervals (even, for Simpson).
    pub grid: usize,
    pub starts: usize,
    pub max_iterations: usize,
    /// Terminal accuracy |Φ(1) - 1⃗| demanded of the shooting.
    pub shoot_tol: f64,
    /// Residual tolerance a returned path must meet.
    pub residual_tol: f64,
    /// Paths closer than this in sup norm are the same solution.
    pub dedupe: f64,
}

impl Default for PhiConfig {
    fn default() -> Self {
        Self {
            grid: 400,
            starts: 8,
            max_iterations: 60,
            shoot_tol: 1e-11,
            residual_tol: 1e-6,
            dedupe: 1e-4,
        }
    }
}

/// Outcome of a single integration from a start state.
struct Shot {
    path: PhiPath,
}

/// Solves for (v', Ψ) at one point.
fn second_derivative(spec: &MixtureSpec<f64>, q: f64, phi: &[f64], v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let r = spec.r();
    let lambda = spec.lambda();
    let j = spec.partials(phi).species;
    let third = spec.third(phi);
    let g: Vec<f64> = j
        .iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect();
    if let Some(s) = (0..r).find(|&s| !(v[s] > 0.0 && g[s] > 0.0)) {
        return Err(Error::Shooting(format!(
            "path stops increasing at q = {q:.6} (species {s}: Φ' = {:e}, (ξ^s∘Φ)' = {:e})",
            v[s], g[s]
        )));
    }
    let mut a: Matrix<f64> = vec![vec![0.0; r + 1]; r + 1];
    let mut b = vec![0.0; r + 1];
    for s in 0..r {
        let f = (v[s] / g[s]).sqrt();
        for t in 0..r {
            a[s][t] = -j[s][t] / g[s];
        }
        a[s][s] += 1.0 / v[s];
        a[s][r] = -2.0 * v[s] / f;
        let mut ts = 0.0;
        for t in 0..r {
            for u in 0..r {
                ts += third[s][t][u] * v[t] * v[u];
            }
        }
        b[s] = ts / lambda[s] / g[s];
    }
    for t in 0..r {
        a[r][t] = lambda[t];
    }
    let x = solve(&a, &b, 1e-14).ok_or(Error::Singular { q })?;
    let psi = x[r];
    Ok((x[..r].to_vec(), psi))
}

/// RK4 in t from (q1, Φ(q1), Φ'(q1)) to q = 1.
fn integrate(spec: &MixtureSpec<f64>, q1: f64, phi0: &[f64], v0: &[f64], m: usize) -> Result<Shot> {
    let r = spec.r();
    let c = 2.0 * (1.0 - q1);
    let h = 1.0 / m as f64;
    let rhs = |t: f64, y: &[f64]| -> Result<(Vec<f64>, f64)> {
        let q = q1 + (1.0 - q1) * t * t;
        let (phi, v) = y.split_at(r);
        let (dv, psi) = second_derivative(spec, q, phi, v)?;
        let scale = c * t;
        let mut out: Vec<f64> = v.iter().map(|x| x * scale).collect();
        out.extend(dv.iter().map(|x| x * scale));
        Ok((out, psi))
    };
    let mut y: Vec<f64> = phi0.iter().chain(v0).copied().collect();
    let mut grid = Vec::with_capacity(m + 1);
    let mut phi = Vec::with_capacity(m + 1);
    let mut dphi = Vec::with_capacity(m + 1);
    let mut psi = Vec::with_capacity(m + 1);
    for i in 0..=m {
        let t = i as f64 * h;
        let (k1, psi_here) = rhs(t, &y)?;
        grid.push(q1 + (1.0 - q1) * t * t);
        phi.push(y[..r].to_vec());
        dphi.push(y[r..].to_vec());
        psi.push(psi_here.is_finite().then_some(psi_here));
        if i == m {
            break;
        }
        let step = |base: &[f64], k: &[f64], w: f64| -> Vec<f64> {
            base.iter().zip(k).map(|(a, b)| a + w * b).collect()
        };
        let (k2, _) = rhs(t + 0.5 * h, &step(&y, &k1, 0.5 * h))?;
        let (k3, _) = rhs(t + 0.5 * h, &step(&y, &k2, 0.5 * h))?;
        let (k4, _) = rhs(t + h, &step(&y, &k3, h))?;
        for (idx, yv) in y.iter_mut().enumerate() {
            *yv += h / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
        }
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shooting(format!("non-finite state at t = {:.4}", t + h)));
        }
    }
    Ok(Shot {
        path: PhiPath {
            q1,
            grid,
            phi,
            dphi,
            psi,
            residuals: None,
        },
    })
}

/// Start state for simplex weights θ: returns (q1, Φ(q1), Φ'(q1)).
fn start_state(spec: &MixtureSpec<f64>, theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let lambda = spec.lambda();
    let d: Vec<f64> = theta.iter().zip(lambda).map(|(t, l)| t / l).collect();
    if !spec.has_field() {
        return Ok((0.0, vec![0.0; spec.r()], d));
    }
    let (q1, point) = solvable_point(spec, &d)?;
    let report = classify(spec, &point, DEFAULT_TOL)?;
    let p = report.perron_vector;
    let norm: f64 = p.iter().zip(lambda).map(|(a, l)| a * l).sum();
    Ok((q1, point, p.iter().map(|x| x / norm).collect()))
}

fn min_eig_along(spec: &MixtureSpec<f64>, d: &[f64], t: f64) -> Result<f64> {
    let x: Vec<f64> = d.iter().map(|v| v * t).collect();
    Ok(classify(spec, &x, DEFAULT_TOL)?.min_eig)
}

/// First t with λ_min(M*(t d)) = 0 along the ray; ⟨λ, t d⟩ = t.
pub fn solvable_point(spec: &MixtureSpec<f64>, d: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t_max = 1.0 / d.iter().fold(0.0f64, |a, &b| a.max(b));
    let scan = 256;
    let mut lo = 0.0;
    let mut hi = None;
    for i in 1..=scan {
        let t = t_max * i as f64 / scan as f64;
        if min_eig_along(spec, d, t)? <= 0.0 {
            hi = Some(t);
            break;
        }
        lo = t;
    }
    let Some(mut hi) = hi else {
        return Err(Error::Shooting(format!(
            "no solvable point along direction {d:?} inside the unit box"
        )));
    };
    if lo == 0.0 {
        lo = hi * 1e-9;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if min_eig_along(spec, d, mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // keep the endpoint whose eigenvalue is closer to zero
    let t = if min_eig_along(spec, d, lo)?.abs() < min_eig_along(spec, d, hi)?.abs() {
        lo
    } else {
        hi
    };
    Ok((t, d.iter().map(|v| v * t).collect()))
}

fn theta_from(params: &[f64]) -> Vec<f64> {
    let mut theta = params.to_vec();
    theta.push(1.0 - params.iter().sum::<f64>());
    theta
}

fn shoot(spec: &MixtureSpec<f64>, params: &[f64], m: usize) -> Result<(Vec<f64>, PhiPath)> {
    let theta = theta_from(params);
    if theta.iter().any(|&x| x <= 0.0) {
        return Err(Error::Shooting(format!("start weights {theta:?} left the simplex")));
    }
    let (q1, phi0, v0) = start_state(spec, &theta)?;
    let shot = integrate(spec, q1, &phi0, &v0, m)?;
    let end = shot.path.phi.last().unwrap();
    let res = end[..spec.r() - 1].iter().map(|x| x - 1.0).collect();
    Ok((res, shot.path))
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// Bisection on the single weight θ_1 (two species).
fn bisect(spec: &MixtureSpec<f64>, mut lo: f64, mut hi: f64, f_lo: f64, cfg: &PhiConfig) -> Result<PhiPath> {
    let mut sign_lo = f_lo.signum();
    let mut best: Option<(f64, PhiPath)> = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (res, path) = shoot(spec, &[mid], cfg.grid)?;
        let val = res[0];
        if best.as_ref().is_none_or(|(b, _)| val.abs() < *b) {
            best = Some((val.abs(), path));
        }
        if val.abs() <= cfg.shoot_tol || hi - lo < 1e-15 {
            break;
        }
        if val.signum() == sign_lo {
            lo = mid;
            sign_lo = val.signum();
        } else {
            hi = mid;
        }
    }
    let (gap, path) = best.unwrap();
    if gap > cfg.residual_tol {
        return Err(Error::Shooting(format!("bisection stalled with terminal gap {gap:e}")));
    }
    Ok(path)
}

/// Damped Newton with a forward-difference Jacobian.
fn newton(spec: &MixtureSpec<f64>, start: Vec<f64>, cfg: &PhiConfig) -> Result<PhiPath> {
    let k = start.len();
    let mut p = start;
    let (mut res, mut path) = shoot(spec, &p, cfg.grid)?;
    for _ in 0..cfg.max_iterations {
        if sup(&res) <= cfg.shoot_tol {
            return Ok(path);
        }
        let eps = 1e-7;
        let mut jac: Matrix<f64> = vec![vec![0.0; k]; k];
        for c in 0..k {
            let mut q = p.clone();
            q[c] += eps;
            let (rq, _) = shoot(spec, &q, cfg.grid)?;
            for row in 0..k {
                jac[row][c] = (rq[row] - res[row]) / eps;
            }
        }
        let neg: Vec<f64> = res.iter().map(|x| -x).collect();
        let step = solve(&jac, &neg, 1e-14).ok_or(Error::Shooting("singular shooting Jacobian".into()))?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = p.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
            if let Ok((rt, pt)) = shoot(spec, &trial, cfg.grid) {
                if sup(&rt) < sup(&res) {
                    p = trial;
                    res = rt;
                    path = pt;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if sup(&res) <= cfg.residual_tol {
        Ok(path)
    } else {
        Err(Error::Shooting(format!("Newton stalled with terminal gap {:e}", sup(&res))))
    }
}

/// Deterministic interior start weights for multi-start Newton.
fn starts(lambda: &[f64], count: usize) -> Vec<Vec<f64>> {
    let r = lambda.len();
    (0..count)
        .map(|i| {
            let w: Vec<f64> = (0..r)
                .map(|s| {
                    if i == 0 {
                        lambda[s]
                    } else {
                        let phase = (i * (s + 1)) as f64 * 0.618_033_988_749_895;
                        lambda[s] * (1.0 + 0.8 * (std::f64::consts::TAU * phase).sin())
                    }
                })
                .collect();
            let total: f64 = w.iter().sum();
            w[..r - 1].iter().map(|x| x / total).collect()
        })
        .collect()
}

/// Candidate pseudo-maximizers, sorted by (q1, Φ(q1), Φ'(q1)) and deduplicated.
pub fn solve_phi(spec: &MixtureSpec<f64>, cfg: &PhiConfig) -> Result<Vec<PhiPath>> {
    if cfg.grid < 2 || cfg.grid % 2 == 1 {
        return Err(Error::Config(format!("grid size must be even and at least 2, got {}", cfg.grid)));
    }
    let r = spec.r();
    let report = classify(spec, &vec![1.0; r], DEFAULT_TOL)?;
    if report.classification != Classification::StrictlySubSolvable {
        return Err(Error::Precondition(format!(
            "1 is {:?}; pseudo-maximizers are only solved for strictly sub-solvable models",
            report.classification
        )));
    }
    let mut found: Vec<PhiPath> = if r == 1 {
        let q1 = if spec.has_field() { solvable_point(spec, &[1.0])?.0 } else { 0.0 };
        vec![PhiPath::identity(spec, q1, cfg.grid)]
    } else if r == 2 {
        let eps = 1e-3;
        let n = cfg.starts.max(1);
        let pts: Vec<f64> = (0..=n).map(|i| eps + (1.0 - 2.0 * eps) * i as f64 / n as f64).collect();
        let vals: Vec<Option<f64>> = pts
            .par_iter()
            .map(|&x| shoot(spec, &[x], cfg.grid).ok().map(|(res, _)| res[0]))
            .collect();
        let mut brackets = Vec::new();
        for i in 0..n {
            if let (Some(a), Some(b)) = (vals[i], vals[i + 1]) {
                if a.abs() <= cfg.shoot_tol {
                    brackets.push((pts[i], pts[i], a));
                } else if a.signum() != b.signum() {
                    brackets.push((pts[i], pts[i + 1], a));
                }
            }
        }
        if let Some(b) = vals[n].filter(|b| b.abs() <= cfg.shoot_tol) {
            brackets.push((pts[n], pts[n], b));
        }
        brackets
            .par_iter()
            .filter_map(|&(lo, hi, f_lo)| {
                if lo == hi {
                    shoot(spec, &[lo], cfg.grid).ok().map(|(_, p)| p)
                } else {
                    bisect(spec, lo, hi, f_lo, cfg).ok()
                }
            })
            .collect()
    } else {
        starts(spec.lambda(), cfg.starts.max(1))
            .into_par_iter()
            .filter_map(|p| newton(spec, p, cfg).ok())
            .collect()
    };
    for path in &mut found {
        path.residuals = Some(verify_pseudomaximizer(spec, path));
    }
    found.retain(|p| {
        p.residuals.unwrap().passes(cfg.residual_tol)
            && p.phi.iter().flatten().all(|&x| (-1e-9..=1.0 + 1e-9).contains(&x))
    });
    found.sort_by(|a, b| {
        let key = |p: &PhiPath| {
            let mut k = vec![p.q1];
            k.extend(&p.phi[0]);
            k.extend(&p.dphi[0]);
            k
        };
        key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut unique: Vec<PhiPath> = Vec::new();
    for p in found {
        if !unique.iter().any(|u| same_path(u, &p, cfg.dedupe)) {
            unique.push(p);
        }
    }
    if unique.is_empty() {
        return Err(Error::Shooting(format!(
            "no start out of {} converged to a verified path",
            cfg.starts
        )));
    }
    Ok(unique)
}

fn same_path(a: &PhiPath, b: &PhiPath, tol: f64) -> bool {
    if (a.q1 - b.q1).abs() > tol {
        return false;
    }
    a.grid.iter().all(|&q| match (a.phi_at(q), b.phi_at(q.max(b.q1))) {
        (Ok(x), Ok(y)) => x.iter().zip(&y).all(|(u, v)| (u - v).abs() <= tol),
        _ => false,
    })
}

/// First derivative of samples on a uniform grid of spacing h: fourth-order
/// central differences, reflected evenly through index 0, one-sided at the end.
fn fd_derivative(f: &[f64], h: f64) -> Vec<f64> {
    let m = f.len() - 1;
    let at = |i: isize| f[i.unsigned_abs()];
    (0..=m)
        .map(|i| {
            let i = i as isize;
            let mi = m as isize;
            if i + 2 <= mi {
                (at(i - 2) - 8.0 * at(i - 1) + 8.0 * at(i + 1) - at(i + 2)) / (12.0 * h)
            } else if i + 1 == mi {
                (3.0 * at(i + 1) + 10.0 * at(i) - 18.0 * at(i - 1) + 6.0 * at(i - 2) - at(i - 3)) / (12.0 * h)
            } else {
                (25.0 * at(i) - 48.0 * at(i - 1) + 36.0 * at(i - 2) - 16.0 * at(i - 3) + 3.0 * at(i - 4))
                    / (12.0 * h)
            }
        })
        .collect()
}

/// Checks all four defining conditions on the grid.
pub fn verify_pseudomaximizer(spec: &MixtureSpec<f64>, path: &PhiPath) -> PathResiduals {
    let r = spec.r();
    let lambda = spec.lambda();
    let h = spec.h();
    let admissibility = path
        .grid
        .iter()
        .zip(&path.phi)
        .map(|(q, p)| (p.iter().zip(lambda).map(|(a, l)| a * l).sum::<f64>() - q).abs())
        .fold(0.0, f64::max);
    let monotonicity_margin = path.dphi.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
    let terminal = sup(&path.phi.last().unwrap().iter().map(|x| x - 1.0).collect::<Vec<_>>());
    let phi0 = path.phi_q1();
    let origin = phi0.iter().all(|&x| x == 0.0);
    let solvability = if origin {
        0.0
    } else {
        classify(spec, phi0, DEFAULT_TOL).map_or(f64::INFINITY, |rep| rep.min_eig.abs())
    };
    let derivative = if spec.has_field() {
        let rate = xi_s_rate(spec, phi0, &path.dphi[0]);
        let xs = spec.xi_species(phi0);
        (0..r)
            .map(|s| (path.dphi[0][s] - phi0[s] * rate[s] / (xs[s] + h[s] * h[s])).abs())
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    let psi_spread = if r == 1 || path.len() < 6 {
        0.0
    } else {
        let ts = path.ts();
        let m = path.len() - 1;
        let ht = 1.0 / m as f64;
        let uniform = ts.iter().enumerate().all(|(i, &t)| (t - i as f64 * ht).abs() < 1e-9);
        if !uniform {
            f64::INFINITY
        } else {
            let f: Vec<Vec<f64>> = path
                .phi
                .iter()
                .zip(&path.dphi)
                .map(|(p, v)| f_values(spec, p, v))
                .collect();
            let per: Vec<Vec<f64>> = (0..r)
                .map(|s| fd_derivative(&f.iter().map(|row| row[s]).collect::<Vec<_>>(), ht))
                .collect();
            let c = 2.0 * (1.0 - path.q1);
            (1..=m)
                .map(|i| {
                    let dq = c * ts[i];
                    let vals: Vec<f64> = (0..r).map(|s| per[s][i] / dq / path.dphi[i][s]).collect();
                    let hi = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lo = vals.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                    let scale = 1.0f64.max(hi.abs()).max(lo.abs());
                    (hi - lo) / scale
                })
                .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) })
        }
    };
    PathResiduals {
        admissibility,
        monotonicity_margin,
        terminal,
        solvability,
        derivative,
        psi_spread,
    }
}

/// Σ_s λ_s √(Φ_s(q1)(ξ^s(Φ(q1)) + h_s²)), the energy of the root.
pub fn root_term(spec: &MixtureSpec<f64>, phi_q1: &[f64], signs: Option<&[f64]>) -> Result<f64> {
    let xs = spec.xi_species(phi_q1);
    let q1: f64 = phi_q1.iter().zip(spec.lambda()).map(|(a, b)| a * b).sum();
    let mut total = 0.0;
    for s in 0..spec.r() {
        let hs = spec.h()[s];
        let root = checked_sqrt(phi_q1[s] * (xs[s] + hs * hs), q1, s)?;
        total += spec.lambda()[s] * signs.map_or(1.0, |d| d[s]) * root;
    }
    Ok(total)
}

/// Per-species ∫_{q1}^1 √(Φ'_s (ξ^s∘Φ)') dq, by composite Simpson in t.
pub fn descent_integrals(spec: &MixtureSpec<f64>, path: &PhiPath) -> Result<Vec<f64>> {
    let r = spec.r();
    let m = path.len() - 1;
    if m == 0 {
        return Ok(vec![0.0; r]);
    }
    if m % 2 == 1 {
        return Err(Error::Config(format!("Simpson needs an even number of intervals, got {m}")));
    }
    let ts = path.ts();
    let c = 2.0 * (1.0 - path.q1);
    let ht = 1.0 / m as f64;
    let mut out = vec![0.0; r];
    for i in 0..=m {
        let rate = xi_s_rate(spec, &path.phi[i], &path.dphi[i]);
        let w = if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for s in 0..r {
            let root = checked_sqrt(path.dphi[i][s] * rate[s], path.grid[i], s)?;
            out[s] += w * root * c * ts[i];
        }
    }
    Ok(out.into_iter().map(|x| x * ht / 3.0).collect())
}

/// 𝔸(Φ) = root term + Σ_s λ_s ∫ √(Φ'_s (ξ^s∘Φ)') dq.
pub fn alg_functional(spec: &MixtureSpec<f64>, path: &PhiPath) -> Result<f64> {
    let integrals = descent_integrals(spec, path)?;
    let lambda = spec.lambda();
    Ok(root_term(spec, path.phi_q1(), None)?
        + integrals.iter().zip(lambda).map(|(a, l)| a * l).sum::<f64>())
}

/// ALG when 1⃗ is solvable or super-solvable: Σ_s λ_s √(ξ^s(1⃗) + h_s²).
pub fn alg_supersolvable(spec: &MixtureSpec<f64>) -> Result<f64> {
    let ones = vec![1.0; spec.r()];
    let report = classify(spec, &ones, DEFAULT_TOL)?;
    if report.classification == Classification::StrictlySubSolvable {
        return Err(Error::Precondition(format!(
            "1 is strictly sub-solvable (min eigenvalue {:e})",
            report.min_eig
        )));
    }
    root_term(spec, &ones, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    SuperSolvable,
    SubSolvable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgResult {
    /// Best value found; in the sub-solvable regime the max over candidates.
    pub value: f64,
    pub regime: Regime,
    pub phi: Option<PhiPath>,
    pub candidates: Vec<(PhiPath, f64)>,
}

pub fn alg_value(spec: &MixtureSpec<f64>, cfg: &PhiConfig) -> Result<AlgResult> {
    let report = classify(spec, &vec![1.0; spec.r()], DEFAULT_TOL)?;
    if report.classification != Classification::StrictlySubSolvable {
        return Ok(AlgResult {
            value: alg_supersolvable(spec)?,
            regime: Regime::SuperSolvable,
            phi: None,
            candidates: Vec::new(),
        });
    }
    let candidates: Vec<(PhiPath, f64)> = solve_phi(spec, cfg)?
        .into_iter()
        .map(|p| alg_functional(spec, &p).map(|v| (p, v)))
        .collect::<Result<_>>()?;
    let best = candidates
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    Ok(AlgResult {
        value: best.1,
        regime: Regime::SubSolvable,
        phi: Some(best.0.clone()),
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::SpeciesTensor;

    fn symmetric_pair() -> MixtureSpec<f64> {
        MixtureSpec::uniform(2, &[2, 3], 0.3, vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn closed_forms() {
        let cfg = PhiConfig::default();
        let two = alg_value(&MixtureSpec::pure(2, 0.0).unwrap(), &cfg).unwrap();
        assert!((two.value - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(two.regime, Regime::SuperSolvable);
        let three = alg_value(&MixtureSpec::pure(3, 0.0).unwrap(), &cfg).unwrap();
        assert!((three.value - 2.0 * 6f64.sqrt() / 3.0).abs() < 1e-12);
        assert_eq!(three.regime, Regime::SubSolvable);
        let field = alg_value(&MixtureSpec::pure(2, 2.0).unwrap(), &cfg).unwrap();
        assert!((field.value - 6f64.sqrt()).abs() < 1e-12);
        let one = alg_supersolvable(&MixtureSpec::pure(2, 1.0).unwrap()).unwrap();
        assert!((one - 3f64.sqrt()).abs() < 1e-12);
        assert!(alg_supersolvable(&MixtureSpec::pure(3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn pure_two_spin_sub_and_super_agree() {
        let spec = MixtureSpec::pure(2, 0.0).unwrap();
        let path = PhiPath::identity(&spec, 0.0, 400);
        assert!((alg_functional(&spec, &path).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let res = verify_pseudomaximizer(&spec, &path);
        assert!(res.passes(1e-10));
        assert_eq!(res.solvability, 0.0);
    }

    #[test]
    fn degenerate_path_is_root_term() {
        let spec = MixtureSpec::pure(2, 2.0).unwrap();
        let v = alg_functional(&spec, &PhiPath::degenerate(1)).unwrap();
        assert!((v - 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn supersolvable_start_rejected() {
        let spec = MixtureSpec::pure(2, 2.0).unwrap();
        assert!(matches!(solve_phi(&spec, &PhiConfig::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn symmetric_two_species_path() {
        let spec = symmetric_pair();
        let paths = solve_phi(&spec, &PhiConfig::default()).unwrap();
        let sym = paths
            .iter()
            .find(|p| p.phi.iter().zip(&p.grid).all(|(x, q)| (x[0] - q).abs() < 1e-6 && (x[1] - q).abs() < 1e-6))
            .expect("symmetric path found");
        let res = sym.residuals.unwrap();
        assert!(res.passes(1e-8), "{res:?}");
    }

    #[test]
    fn corrupted_path_flagged() {
        let spec = symmetric_pair();
        let mut path = solve_phi(&spec, &PhiConfig::default()).unwrap().remove(0);
        for p in &mut path.phi {
            p[0] *= 1.01;
        }
        let res = verify_pseudomaximizer(&spec, &path);
        assert!((res.admissibility - 0.005).abs() < 1e-6);
        assert!(!res.passes(1e-6));
    }

    #[test]
    fn field_start_lies_on_solvable_manifold() {
        // r = 1, ξ = x² + x³ with a small field: 1 is strictly sub-solvable.
        let spec = MixtureSpec::single_species(&[(2, 1.0), (3, 1.0)], 0.3).unwrap();
        let paths = solve_phi(&spec, &PhiConfig::default()).unwrap();
        let p = &paths[0];
        assert!(p.q1 > 0.0 && p.q1 < 1.0);
        assert!(p.residuals.unwrap().passes(1e-8));
        let report = classify(&spec, &[p.q1], DEFAULT_TOL).unwrap();
        assert_eq!(report.classification, Classification::Solvable);
    }

    #[test]
    fn asymmetric_field_two_species() {
        let mut g2 = SpeciesTensor::constant(2, 2, 0.5);
        g2.set_symmetric(&[0, 1], 0.8);
        let g3 = SpeciesTensor::constant(3, 2, 0.6);
        let spec = MixtureSpec::new(vec![0.4, 0.6], vec![0.2, 0.1], vec![g2, g3]).unwrap();
        let paths = solve_phi(&spec, &PhiConfig::default()).unwrap();
        for p in &paths {
            let res = p.residuals.unwrap();
            assert!(res.passes(1e-6), "{res:?}");
            assert!(p.q1 > 0.0);
        }
    }

    #[test]
    fn interpolation_matches_grid() {
        let spec = symmetric_pair();
        let path = solve_phi(&spec, &PhiConfig::default()).unwrap().remove(0);
        for i in [0, 7, 200, 400] {
            let q = path.grid[i];
            let x = path.phi_at(q).unwrap();
            assert!((x[0] - path.phi[i][0]).abs() < 1e-13);
        }
        let mid = 0.5 * (path.grid[10] + path.grid[11]);
        let x = path.phi_at(mid).unwrap();
        assert!((x[0] - mid).abs() < 1e-9);
        assert!(path.phi_at(1.5).is_err());
    }
}

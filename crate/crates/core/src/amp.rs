//! The algorithms run on a sampled instance: signed Stage-I AMP, Stage-II
//! incremental AMP with rounding, branching IAMP over a tree, and diagnostics.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{norm_n, row_key, HamiltonianInstance, SpeciesLayout};
use crate::linalg::{jacobi_eigen, Matrix};
use crate::pseudomax::PhiPath;
use crate::state_evolution::{a_vector, iamp_coeffs, w0_vector, IampSchedule};

/// Δ ∈ {±1}^r.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SignPattern {
    signs: Vec<i8>,
}

impl SignPattern {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.is_empty() || signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Config(format!("sign pattern entries must be ±1, got {signs:?}")));
        }
        Ok(Self { signs })
    }

    pub fn plus(r: usize) -> Self {
        Self { signs: vec![1; r] }
    }

    /// All 2^r patterns, all-plus first.
    pub fn all(r: usize) -> Vec<Self> {
        (0..1usize << r)
            .map(|bits| Self {
                signs: (0..r).map(|s| if bits >> s & 1 == 1 { -1 } else { 1 }).collect(),
            })
            .collect()
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| s as f64).collect()
    }

    pub fn negated(&self) -> Self {
        Self {
            signs: self.signs.iter().map(|s| -s).collect(),
        }
    }
}

impl fmt::Display for SignPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &s in &self.signs {
            f.write_str(if s > 0 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

impl FromStr for SignPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let signs = s
            .chars()
            .map(|c| match c {
                '+' => Ok(1),
                '-' => Ok(-1),
                other => Err(Error::Config(format!("unexpected sign character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(signs)
    }
}

impl TryFrom<String> for SignPattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SignPattern> for String {
    fn from(p: SignPattern) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OnsagerMode {
    /// Coefficients from the predicted overlaps Φ(q^δ).
    #[default]
    StateEvolution,
    /// Coefficients from the measured overlaps of the current run.
    Empirical,
}

impl FromStr for OnsagerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" | "state-evolution" => Ok(Self::StateEvolution),
            "empirical" => Ok(Self::Empirical),
            other => Err(Error::Config(format!("unknown Onsager mode {other:?}"))),
        }
    }
}

/// Standard Gaussian vector from a seed.
pub fn gaussian_vector(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Seed of the Gaussian attached to a tree node, by hashing its path from the root.
/// Degree tag 0 keeps these streams apart from the coefficient rows.
pub fn node_seed(root: u64, path: &[usize]) -> u64 {
    row_key(root, 0, path)
}

fn overlap(layout: &SpeciesLayout, lambda: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    layout.overlap(lambda, a, b).expect("lengths checked by caller")
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    norm_n(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}

/// b = Σ_s' c_s' ∂_s'ξ^s(R) for every s.
fn onsager_coefficient(h: &HamiltonianInstance, c: &[f64], r_overlap: &[f64]) -> Vec<f64> {
    h.spec()
        .partials(r_overlap)
        .species
        .iter()
        .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
        .collect()
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(step))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub k_max: usize,
    /// ‖m^k - m^(k-1)‖_N below which Stage I counts as converged.
    pub convergence_threshold: f64,
    /// Drops the Onsager term; only meant for ablation checks.
    #[serde(default)]
    pub zero_onsager: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            k_max: 25,
            convergence_threshold: 0.02,
            zero_onsager: false,
        }
    }
}

/// Iterates and traces of one Stage-I run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Run {
    pub delta: SignPattern,
    pub phi_q1: Vec<f64>,
    pub a: Vec<f64>,
    #[serde(skip)]
    pub w: Vec<Vec<f64>>,
    #[serde(skip)]
    pub m: Vec<Vec<f64>>,
    /// Onsager coefficients b_k, k ≥ 1.
    pub b: Vec<Vec<f64>>,
    /// H_N(m^k)/N.
    pub energy: Vec<f64>,
    /// R(m^k, m^k).
    pub self_overlap: Vec<Vec<f64>>,
    /// R(m^k, m^(k-1)) for k ≥ 1.
    pub cross_overlap: Vec<Vec<f64>>,
    /// ∇H_N at the last iterate.
    #[serde(skip)]
    pub final_gradient: Vec<f64>,
    /// ‖m^k - m^(k-1)‖_N at the last step.
    pub gap: f64,
    pub convergence_threshold: f64,
}

impl Stage1Run {
    /// The trivial run at the origin used when there is no field.
    pub fn origin(h: &HamiltonianInstance, k_max: usize) -> Self {
        let (n, r) = (h.n(), h.layout().r());
        Self {
            delta: SignPattern::plus(r),
            phi_q1: vec![0.0; r],
            a: vec![0.0; r],
            w: vec![vec![0.0; n]; k_max + 1],
            m: vec![vec![0.0; n]; k_max + 1],
            b: vec![vec![0.0; r]; k_max],
            energy: vec![0.0; k_max + 1],
            self_overlap: vec![vec![0.0; r]; k_max + 1],
            cross_overlap: vec![vec![0.0; r]; k_max],
            final_gradient: h.field().to_vec(),
            gap: 0.0,
            convergence_threshold: f64::INFINITY,
        }
    }

    pub fn k_max(&self) -> usize {
        self.m.len() - 1
    }

    pub fn last(&self) -> &[f64] {
        self.m.last().unwrap()
    }

    pub fn converged(&self) -> bool {
        self.gap <= self.convergence_threshold
    }
}

/// Runs Stage I for several sign patterns in lockstep, sharing each gradient pass.
pub fn stage1_run(
    h: &HamiltonianInstance,
    phi_q1: &[f64],
    deltas: &[SignPattern],
    cfg: &Stage1Config,
) -> Result<Vec<Stage1Run>> {
    let spec = h.spec();
    let r = spec.r();
    if phi_q1.len() != r {
        return Err(Error::Dimension { expected: r, got: phi_q1.len() });
    }
    if let Some(d) = deltas.iter().find(|d| d.signs().len() != r) {
        return Err(Error::Dimension { expected: r, got: d.signs().len() });
    }
    let layout = h.layout();
    let lambda = spec.lambda();
    let a = a_vector(spec, phi_q1)?;
    let w0 = layout.lift(&w0_vector(spec, phi_q1));
    let mut runs: Vec<Stage1Run> = deltas
        .iter()
        .map(|d| {
            let da: Vec<f64> = d.as_f64().iter().zip(&a).map(|(x, y)| x * y).collect();
            Stage1Run {
                delta: d.clone(),
                phi_q1: phi_q1.to_vec(),
                a: a.clone(),
                m: vec![layout.diamond(&da, &w0)],
                w: vec![w0.clone()],
                b: Vec::new(),
                energy: Vec::new(),
                self_overlap: Vec::new(),
                cross_overlap: Vec::new(),
                final_gradient: Vec::new(),
                gap: f64::INFINITY,
                convergence_threshold: cfg.convergence_threshold,
            }
        })
        .collect();
    let n = h.n() as f64;
    for k in 0..=cfg.k_max {
        let points: Vec<&[f64]> = runs.iter().map(|run| run.m[k].as_slice()).collect();
        let evals = h.evaluate_batch(&points)?;
        for (run, eval) in runs.iter_mut().zip(evals) {
            let mk = &run.m[k];
            run.energy.push(eval.energy / n);
            run.self_overlap.push(overlap(layout, lambda, mk, mk));
            if k > 0 {
                run.cross_overlap.push(overlap(layout, lambda, mk, &run.m[k - 1]));
                run.gap = diff_norm(mk, &run.m[k - 1]);
            }
            if k == cfg.k_max {
                run.final_gradient = eval.gradient;
                continue;
            }
            let signs = run.delta.as_f64();
            let da: Vec<f64> = signs.iter().zip(&a).map(|(x, y)| x * y).collect();
            let mut w = eval.gradient;
            if k > 0 {
                let b = if cfg.zero_onsager {
                    vec![0.0; r]
                } else {
                    onsager_coefficient(h, &da, run.cross_overlap.last().unwrap())
                };
                let prev = layout.diamond(&b, &run.m[k - 1]);
                w.iter_mut().zip(&prev).for_each(|(x, p)| *x -= p);
                run.b.push(b);
            }
            check_finite(&w, k + 1)?;
            run.m.push(layout.diamond(&da, &w));
            run.w.push(w);
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    pub ell_lower: usize,
    pub onsager: OnsagerMode,
    /// Seed of the root noise g (and of the tree Gaussians when branching).
    pub g_seed: u64,
    /// Rescale each species block of n^ℓ to its predicted self-overlap after every step.
    /// Suppresses the radial mode that amplifies finite-N error geometrically.
    #[serde(default = "default_renormalize")]
    pub renormalize: bool,
    /// Descend with Δ ⊙ u from a signed Stage-I run. Only meaningful when the
    /// supplied Φ solves the signed tree-descending ODE, which is not checked.
    #[serde(default)]
    pub signed: bool,
    /// When branching, also map the members' Gram matrix onto its prediction after
    /// every step. Holds leaf overlaps at their targets by construction.
    #[serde(default)]
    pub match_overlaps: bool,
}

fn default_renormalize() -> bool {
    true
}

impl Stage2Config {
    pub fn new(ell_lower: usize, g_seed: u64) -> Self {
        Self {
            ell_lower,
            onsager: OnsagerMode::default(),
            g_seed,
            renormalize: true,
            signed: false,
            match_overlaps: false,
        }
    }
}

/// Rescales each species block of `v` so that R_s(v, v) = target_s.
fn renormalize_to(layout: &SpeciesLayout, lambda: &[f64], v: &mut [f64], target: &[f64]) {
    let ov = overlap(layout, lambda, v, v);
    for s in 0..layout.r() {
        if ov[s] > 0.0 && target[s] > 0.0 {
            let f = (target[s] / ov[s]).sqrt();
            v[layout.block(s)].iter_mut().for_each(|x| *x *= f);
        }
    }
}

/// Moves each species block of `vs` so their Gram matrix equals `targets[a][b][s]`.
///
/// Uses T^{1/2} G^{-1/2}, the symmetric map closest to the identity, and skips a
/// species whose Gram matrix is numerically singular.
fn match_gram(layout: &SpeciesLayout, lambda: &[f64], vs: &mut [Vec<f64>], targets: &[Vec<Vec<f64>>]) {
    let count = vs.len();
    for s in 0..layout.r() {
        let block = layout.block(s);
        let scale = lambda[s] * layout.n() as f64;
        let gram: Matrix<f64> = (0..count)
            .map(|a| {
                (0..count)
                    .map(|b| vs[a][block.clone()].iter().zip(&vs[b][block.clone()]).map(|(x, y)| x * y).sum::<f64>() / scale)
                    .collect()
            })
            .collect();
        let want: Matrix<f64> = (0..count).map(|a| (0..count).map(|b| targets[a][b][s]).collect()).collect();
        let (Some(g_inv), Some(t_half)) = (sym_power(&gram, -0.5), sym_power(&want, 0.5)) else {
            continue;
        };
        let map = mat_mul(&t_half, &g_inv);
        let old: Vec<Vec<f64>> = vs.iter().map(|v| v[block.clone()].to_vec()).collect();
        for (a, v) in vs.iter_mut().enumerate() {
            for (i, x) in v[block.clone()].iter_mut().enumerate() {
                *x = (0..count).map(|b| map[a][b] * old[b][i]).sum();
            }
        }
    }
}

/// M^p for a symmetric positive definite M; None when it is not.
fn sym_power(m: &Matrix<f64>, p: f64) -> Option<Matrix<f64>> {
    let eig = jacobi_eigen(m).ok()?;
    let top = eig.values.iter().cloned().fold(0.0, f64::max);
    if eig.values[0] <= 1e-10 * top.max(f64::MIN_POSITIVE) {
        return None;
    }
    let k = m.len();
    Some(
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| (0..k).map(|e| eig.vectors[e][i] * eig.values[e].powf(p) * eig.vectors[e][j]).sum())
                    .collect()
            })
            .collect(),
    )
}

fn mat_mul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    let k = b.len();
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| (0..k).map(|e| row[e] * b[e][j]).sum()).collect())
        .collect()
}

/// One descent from the root to the rounded output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Run {
    /// Child indices from the root; empty for a plain run.
    pub leaf: Vec<usize>,
    /// n^ℓ for ℓ = ℓ̲..=ℓ̄.
    #[serde(skip)]
    pub n: Vec<Vec<f64>>,
    /// z^ℓ for ℓ = ℓ̲..=ℓ̄.
    #[serde(skip)]
    pub z: Vec<Vec<f64>>,
    /// H_N(n^ℓ)/N.
    pub energy: Vec<f64>,
    /// R(n^ℓ, n^ℓ).
    pub self_overlap: Vec<Vec<f64>>,
    #[serde(skip)]
    pub final_gradient: Vec<f64>,
    /// R(n^ℓ̄, n^ℓ̄)^{-1/2} ⋄ n^ℓ̄.
    #[serde(skip)]
    pub output: Vec<f64>,
    pub output_energy: f64,
    /// ‖n^ℓ̄ - output‖_N.
    pub rounding_distance: f64,
}

impl Stage2Run {
    pub fn last(&self) -> &[f64] {
        self.n.last().unwrap()
    }

    pub fn final_energy(&self) -> f64 {
        *self.energy.last().unwrap()
    }
}

/// Depths q_1 < ... < q_m = 1 (all above the Stage-I q1) and the branching factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSpec {
    pub depths: Vec<f64>,
    pub branching: usize,
    /// Leaf count cap, to keep desk runs bounded.
    #[serde(default = "default_leaf_cap")]
    pub max_leaves: usize,
}

fn default_leaf_cap() -> usize {
    256
}

impl TreeSpec {
    pub fn new(depths: Vec<f64>, branching: usize) -> Self {
        Self {
            depths,
            branching,
            max_leaves: default_leaf_cap(),
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.branching.saturating_pow(self.depths.len().saturating_sub(1) as u32)
    }

    pub fn validate(&self, q1: f64) -> Result<()> {
        let d = &self.depths;
        if d.is_empty() || (d[d.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::Tree("depths must end at 1".into()));
        }
        if d.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Tree("depths must be strictly increasing".into()));
        }
        if d[0] <= q1 {
            return Err(Error::Tree(format!("depth {} is not above q1 = {q1}", d[0])));
        }
        if self.branching == 0 {
            return Err(Error::Tree("branching factor must be positive".into()));
        }
        if self.leaf_count() > self.max_leaves {
            return Err(Error::Tree(format!(
                "{} leaves exceed the cap of {}",
                self.leaf_count(),
                self.max_leaves
            )));
        }
        Ok(())
    }

    /// Injection steps ℓ̲ + ⌈(q_i - q1)/δ⌉ - 1 for the branching depths q_1..q_{m-1},
    /// pushed forward by one where two would coincide. The shared iterate n^ℓ then
    /// has self-overlap Φ(q_{ℓ+1}) = Φ(q_i).
    pub fn injection_steps(&self, schedule: &IampSchedule) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &q in &self.depths[..self.depths.len() - 1] {
            let steps = ((q - schedule.q1) / schedule.delta - 1e-9).ceil().max(0.0) as usize;
            let mut ell = schedule.ell_lower + steps.max(1) - 1;
            if let Some(&prev) = out.last() {
                ell = ell.max(prev + 1);
            }
            out.push(ell);
        }
        out
    }
}

struct Member {
    leaf: Vec<usize>,
    n: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    energy: Vec<f64>,
    self_overlap: Vec<Vec<f64>>,
}

/// Shared descent engine; every member of `members` advances in lockstep.
fn descend(
    h: &HamiltonianInstance,
    stage1: &Stage1Run,
    schedule: &IampSchedule,
    cfg: &Stage2Config,
    injections: &[usize],
    branching: usize,
) -> Result<Vec<Stage2Run>> {
    let signs = stage1.delta.as_f64();
    let spec = h.spec();
    let layout = h.layout();
    let lambda = spec.lambda();
    let (lo, hi) = (schedule.ell_lower, schedule.ell_upper);
    let nn = h.n();
    if stage1.k_max() < lo {
        return Err(Error::Precondition(format!(
            "Stage I ran {} steps but ℓ̲ = {lo}",
            stage1.k_max()
        )));
    }
    if !stage1.converged() {
        return Err(Error::StageOneNotConverged {
            gap: stage1.gap,
            threshold: stage1.convergence_threshold,
        });
    }
    let field = h.field();
    let m_root = &stage1.m[lo];
    let m_prev = &stage1.m[lo - 1];
    let z0: Vec<f64> = stage1.w[lo].iter().zip(field).map(|(w, h)| w - h).collect();
    let g = gaussian_vector(node_seed(cfg.g_seed, &[]), nn);
    let scale = layout.lift(&schedule.phi_increment_root(lo));
    let mut n0: Vec<f64> = m_root
        .iter()
        .zip(&g)
        .zip(&scale)
        .map(|((m, g), s)| m + s * g)
        .collect();
    if cfg.renormalize {
        renormalize_to(layout, lambda, &mut n0, &schedule.n_self_overlap(lo));
    }
    let mut members = vec![Member {
        leaf: Vec::new(),
        n: vec![n0],
        z: vec![z0],
        energy: Vec::new(),
        self_overlap: Vec::new(),
    }];
    let injected = |l: usize| injections.contains(&l);
    let fnn = nn as f64;
    for ell in lo..hi {
        let points: Vec<&[f64]> = members.iter().map(|m| m.n.last().unwrap().as_slice()).collect();
        let evals = h.evaluate_batch(&points)?;
        let se_d = match cfg.onsager {
            OnsagerMode::StateEvolution => Some(schedule.onsager_se(spec, ell, &injected, &signs)),
            OnsagerMode::Empirical => None,
        };
        let mut next = Vec::with_capacity(members.len());
        for (mut mem, eval) in members.into_iter().zip(evals) {
            let cur = mem.n.last().unwrap().clone();
            mem.energy.push(eval.energy / fnn);
            mem.self_overlap.push(overlap(layout, lambda, &cur, &cur));
            let prev_f = |j: usize| -> &[f64] {
                if j == lo {
                    m_prev
                } else {
                    &mem.n[j - 1 - lo]
                }
            };
            let d = match &se_d {
                Some(d) => d.clone(),
                None => {
                    let ov: Vec<Vec<f64>> = (lo..=ell)
                        .map(|j| overlap(layout, lambda, &cur, prev_f(j)))
                        .collect();
                    schedule.onsager_with(spec, ell, &injected, &ov, &signs)
                }
            };
            let mut z: Vec<f64> = eval.gradient.iter().zip(field).map(|(g, h)| g - h).collect();
            for (j, dj) in (lo..=ell).zip(&d) {
                let term = layout.diamond(dj, prev_f(j));
                z.iter_mut().zip(&term).for_each(|(x, t)| *x -= t);
            }
            check_finite(&z, ell + 1)?;
            if injected(ell) {
                let scale = layout.lift(&schedule.phi_increment_root(ell));
                for c in 0..branching {
                    let mut leaf = mem.leaf.clone();
                    leaf.push(c);
                    let g = gaussian_vector(node_seed(cfg.g_seed, &leaf), nn);
                    let mut n_next: Vec<f64> = cur
                        .iter()
                        .zip(&g)
                        .zip(&scale)
                        .map(|((x, g), s)| x + s * g)
                        .collect();
                    if cfg.renormalize {
                        renormalize_to(layout, lambda, &mut n_next, &schedule.n_self_overlap(ell + 1));
                    }
                    let mut child = Member {
                        leaf,
                        n: mem.n.clone(),
                        z: mem.z.clone(),
                        energy: mem.energy.clone(),
                        self_overlap: mem.self_overlap.clone(),
                    };
                    child.z.push(z.clone());
                    child.n.push(n_next);
                    next.push(child);
                }
            } else {
                let du: Vec<f64> = schedule.u_at(ell).iter().zip(&signs).map(|(u, d)| u * d).collect();
                let u = layout.lift(&du);
                let z_prev = mem.z.last().unwrap();
                let mut n_next: Vec<f64> = cur
                    .iter()
                    .zip(&u)
                    .zip(z.iter().zip(z_prev))
                    .map(|((x, u), (a, b))| x + u * (a - b))
                    .collect();
                check_finite(&n_next, ell + 1)?;
                if cfg.renormalize {
                    renormalize_to(layout, lambda, &mut n_next, &schedule.n_self_overlap(ell + 1));
                }
                mem.z.push(z);
                mem.n.push(n_next);
                next.push(mem);
            }
        }
        members = next;
        if cfg.match_overlaps && members.len() > 1 {
            let target = |a: &Member, b: &Member| -> Vec<f64> {
                let shared = a.leaf.iter().zip(&b.leaf).take_while(|(x, y)| x == y).count();
                let step = if a.leaf == b.leaf { ell + 1 } else { injections[shared] };
                schedule.n_self_overlap(step)
            };
            let targets: Vec<Vec<Vec<f64>>> = members
                .iter()
                .map(|a| members.iter().map(|b| target(a, b)).collect())
                .collect();
            let mut current: Vec<Vec<f64>> = members.iter_mut().map(|m| m.n.pop().unwrap()).collect();
            match_gram(layout, lambda, &mut current, &targets);
            for (m, n) in members.iter_mut().zip(current) {
                m.n.push(n);
            }
        }
    }
    // final iterates and their rounded versions in one pass
    let mut outputs = Vec::with_capacity(members.len());
    for mem in &members {
        let last = mem.n.last().unwrap();
        let ov = overlap(layout, lambda, last, last);
        if let Some(s) = ov.iter().position(|&v| v <= 0.0) {
            return Err(Error::Rounding { species: s, value: ov[s] });
        }
        let inv: Vec<f64> = ov.iter().map(|v| 1.0 / v.sqrt()).collect();
        outputs.push(layout.diamond(&inv, last));
    }
    let points: Vec<&[f64]> = members
        .iter()
        .map(|m| m.n.last().unwrap().as_slice())
        .chain(outputs.iter().map(|o| o.as_slice()))
        .collect();
    let mut evals = h.evaluate_batch(&points)?;
    let out_evals = evals.split_off(members.len());
    Ok(members
        .into_iter()
        .zip(evals)
        .zip(outputs.into_iter().zip(out_evals))
        .map(|((mut mem, eval), (output, oeval))| {
            let last = mem.n.last().unwrap().clone();
            mem.energy.push(eval.energy / fnn);
            mem.self_overlap.push(overlap(layout, lambda, &last, &last));
            Stage2Run {
                leaf: mem.leaf,
                rounding_distance: diff_norm(&last, &output),
                n: mem.n,
                z: mem.z,
                energy: mem.energy,
                self_overlap: mem.self_overlap,
                final_gradient: eval.gradient,
                output,
                output_energy: oeval.energy / fnn,
            }
        })
        .collect())
}

/// Stage II from a converged Stage-I run (all-plus unless `cfg.signed`).
pub fn stage2_run(
    h: &HamiltonianInstance,
    stage1: &Stage1Run,
    phi: &PhiPath,
    cfg: &Stage2Config,
) -> Result<(IampSchedule, Stage2Run)> {
    check_stage2(h, stage1, phi, cfg.signed)?;
    let schedule = iamp_coeffs(h.spec(), phi, cfg.ell_lower)?;
    let run = descend(h, stage1, &schedule, cfg, &[], 1)?.pop().unwrap();
    Ok((schedule, run))
}

fn check_stage2(h: &HamiltonianInstance, stage1: &Stage1Run, phi: &PhiPath, signed: bool) -> Result<()> {
    if stage1.phi_q1.len() != h.layout().r() {
        return Err(Error::Dimension {
            expected: h.layout().r(),
            got: stage1.phi_q1.len(),
        });
    }
    let gap = stage1
        .phi_q1
        .iter()
        .zip(phi.phi_q1())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if gap > 1e-9 {
        return Err(Error::Precondition(format!(
            "Stage I ran from Φ(q1) = {:?} but the path starts at {:?}",
            stage1.phi_q1,
            phi.phi_q1()
        )));
    }
    if !signed && stage1.delta != SignPattern::plus(h.layout().r()) {
        return Err(Error::Precondition(
            "Stage II descends from the all-plus Stage-I output unless a signed Φ is supplied".into(),
        ));
    }
    Ok(())
}

/// Branching IAMP: leaves sharing a prefix agree exactly on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchRun {
    pub tree: TreeSpec,
    pub injection_steps: Vec<usize>,
    pub leaves: Vec<Stage2Run>,
    /// [s][v][v']: R_s(σ_v, σ_v') between rounded outputs.
    pub overlaps: Vec<Vec<Vec<f64>>>,
    /// Predicted Φ_s(q_{v∧v'}), same indexing.
    pub predicted: Vec<Vec<Vec<f64>>>,
    /// ‖σ_v - σ_v'‖_N between rounded outputs.
    pub distances: Vec<Vec<f64>>,
}

/// Depth of the deepest common ancestor, with the root at depth 1.
pub fn common_depth(a: &[usize], b: &[usize]) -> usize {
    1 + a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

pub fn branching_run(
    h: &HamiltonianInstance,
    stage1: &Stage1Run,
    phi: &PhiPath,
    cfg: &Stage2Config,
    tree: &TreeSpec,
) -> Result<BranchRun> {
    check_stage2(h, stage1, phi, false)?;
    tree.validate(phi.q1)?;
    let schedule = iamp_coeffs(h.spec(), phi, cfg.ell_lower)?;
    let steps = tree.injection_steps(&schedule);
    let leaves = descend(h, stage1, &schedule, cfg, &steps, tree.branching)?;
    let layout = h.layout();
    let lambda = h.spec().lambda();
    let r = layout.r();
    let count = leaves.len();
    let mut overlaps = vec![vec![vec![0.0; count]; count]; r];
    let mut predicted = vec![vec![vec![0.0; count]; count]; r];
    let mut distances = vec![vec![0.0; count]; count];
    for i in 0..count {
        for j in 0..count {
            let ov = overlap(layout, lambda, &leaves[i].output, &leaves[j].output);
            let depth = if i == j {
                tree.depths.len()
            } else {
                common_depth(&leaves[i].leaf, &leaves[j].leaf)
            };
            let target = phi.phi_at(tree.depths[depth - 1])?;
            for s in 0..r {
                overlaps[s][i][j] = ov[s];
                predicted[s][i][j] = target[s];
            }
            distances[i][j] = diff_norm(&leaves[i].output, &leaves[j].output);
        }
    }
    Ok(BranchRun {
        tree: tree.clone(),
        injection_steps: steps,
        leaves,
        overlaps,
        predicted,
        distances,
    })
}

/// ‖∇H_N(σ) - A ⋄ σ‖_N from a gradient already in hand.
pub fn criticality_from_gradient(layout: &SpeciesLayout, gradient: &[f64], point: &[f64], a: &[f64]) -> f64 {
    let shifted = layout.diamond(a, point);
    diff_norm(gradient, &shifted)
}

/// ‖∇H_N(σ) - A ⋄ σ‖_N.
pub fn criticality_residual(h: &HamiltonianInstance, point: &[f64], a: &[f64]) -> Result<f64> {
    if a.len() != h.layout().r() {
        return Err(Error::Dimension {
            expected: h.layout().r(),
            got: a.len(),
        });
    }
    let gradient = h.gradient(point)?;
    Ok(criticality_from_gradient(h.layout(), &gradient, point, a))
}

/// The ⌈εN⌉-th largest eigenvalue of ∇²H_N(σ) - diag(A ⋄ 1).
pub fn hessian_diagnostic(h: &HamiltonianInstance, point: &[f64], a: &[f64], eps_fraction: f64) -> Result<f64> {
    if !(eps_fraction > 0.0 && eps_fraction <= 1.0) {
        return Err(Error::Config(format!("ε must lie in (0, 1], got {eps_fraction}")));
    }
    let hess = h.hessian(point)?;
    let n = h.n();
    let shift = h.layout().lift(a);
    let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        hess[i][j] - if i == j { shift[i] } else { 0.0 }
    });
    let mut values: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    let k = ((eps_fraction * n as f64).ceil() as usize).clamp(1, n);
    Ok(values[k - 1])
}

//! Mixture function of a multi-species spherical spin glass.
//!
//! A [`MixtureSpec`] holds the species weights λ, the field magnitudes h and
//! the symmetric species coefficient tensors Γ^(k). The covariance polynomial
//!
//! ```text
//! ξ(x) = Σ_k Σ_{s_1..s_k} γ_{s_1..s_k}^2 (λ_{s_1} x_{s_1}) ... (λ_{s_k} x_{s_k})
//! ```
//!
//! is expanded once into monomials so that every derivative used by the
//! solvers is evaluated symbolically, in whatever [`Coefficient`] type the
//! spec was built over (f64, f32 or exact rationals).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::{Coefficient, Real};

/// Highest interaction degree accepted in a mixture; the sampled Hamiltonian is capped lower.
pub const MAX_DEGREE: usize = 12;

/// Dense order-k tensor over species indices, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesTensor<T> {
    degree: usize,
    r: usize,
    data: Vec<T>,
}

impl<T: Coefficient> SpeciesTensor<T> {
    pub fn zeros(degree: usize, r: usize) -> Self {
        Self {
            degree,
            r,
            data: vec![T::zero(); r.pow(degree as u32)],
        }
    }

    /// Tensor with every entry equal to `value`.
    pub fn constant(degree: usize, r: usize, value: T) -> Self {
        Self {
            degree,
            r,
            data: vec![value; r.pow(degree as u32)],
        }
    }

    pub fn from_flat(degree: usize, r: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != r.pow(degree as u32) {
            return Err(Error::InvalidMixture(format!(
                "degree-{degree} tensor over {r} species needs {} entries, got {}",
                r.pow(degree as u32),
                data.len()
            )));
        }
        Ok(Self { degree, r, data })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        index.iter().fold(0, |acc, &i| acc * self.r + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Sets `value` at every permutation of `index`.
    pub fn set_symmetric(&mut self, index: &[usize], value: T) {
        for p in permutations(index) {
            self.set(&p, value);
        }
    }

    /// All multi-indices in lexicographic order.
    pub fn indices(&self) -> MultiIndexIter {
        MultiIndexIter::new(self.r, self.degree, false)
    }

    fn check_symmetric(&self) -> Result<()> {
        for idx in self.indices() {
            let v = self.get(&idx);
            for p in permutations(&idx) {
                if !v.approx_eq(self.get(&p)) {
                    return Err(Error::Asymmetric {
                        degree: self.degree,
                        index: idx,
                        permuted: p,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Iterates over k-tuples in `0..r`, optionally only the nondecreasing ones.
#[derive(Debug, Clone)]
pub struct MultiIndexIter {
    r: usize,
    current: Option<Vec<usize>>,
    sorted: bool,
}

impl MultiIndexIter {
    pub fn new(r: usize, k: usize, sorted: bool) -> Self {
        let current = if r == 0 { None } else { Some(vec![0; k]) };
        Self { r, current, sorted }
    }
}

impl Iterator for MultiIndexIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let mut next = out.clone();
        let mut pos = next.len();
        loop {
            if pos == 0 {
                self.current = None;
                break;
            }
            pos -= 1;
            if next[pos] + 1 < self.r {
                next[pos] += 1;
                let fill = if self.sorted { next[pos] } else { 0 };
                for slot in next.iter_mut().skip(pos + 1) {
                    *slot = fill;
                }
                self.current = Some(next);
                break;
            }
        }
        Some(out)
    }
}

/// Distinct permutations of a multi-index.
pub fn permutations(index: &[usize]) -> Vec<Vec<usize>> {
    let mut sorted = index.to_vec();
    sorted.sort_unstable();
    let mut out = vec![sorted.clone()];
    // Narayana's next-permutation walk over the sorted multiset.
    loop {
        let n = sorted.len();
        let Some(i) = (1..n).rev().find(|&i| sorted[i - 1] < sorted[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| sorted[j] > sorted[i - 1]).unwrap();
        sorted.swap(i - 1, j);
        sorted[i..].reverse();
        out.push(sorted.clone());
    }
    out
}

/// Number of distinct orderings of a multi-index.
pub fn multiplicity(index: &[usize]) -> usize {
    let mut fact = 1usize;
    for i in 2..=index.len() {
        fact *= i;
    }
    let mut counts = BTreeMap::new();
    for &i in index {
        *counts.entry(i).or_insert(0usize) += 1;
    }
    for &c in counts.values() {
        for i in 2..=c {
            fact /= i;
        }
    }
    fact
}

#[derive(Debug, Clone, PartialEq)]
struct Monomial<T> {
    coef: T,
    exps: Vec<u8>,
}

impl<T: Coefficient> Monomial<T> {
    fn degree(&self) -> usize {
        self.exps.iter().map(|&e| e as usize).sum()
    }
}

/// Sparse polynomial in r variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial<T> {
    r: usize,
    terms: Vec<Monomial<T>>,
}

impl<T: Coefficient> Polynomial<T> {
    fn zero(r: usize) -> Self {
        Self { r, terms: Vec::new() }
    }

    fn add_term(&mut self, coef: T, exps: Vec<u8>) {
        if coef == T::zero() {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|t| t.exps == exps) {
            t.coef += coef;
        } else {
            self.terms.push(Monomial { coef, exps });
        }
    }

    fn derivative(&self, s: usize) -> Self {
        let mut out = Self::zero(self.r);
        for t in &self.terms {
            let e = t.exps[s];
            if e == 0 {
                continue;
            }
            let mut exps = t.exps.clone();
            exps[s] -= 1;
            out.add_term(t.coef * T::from_count(e as usize), exps);
        }
        out
    }

    fn homogeneous_part(&self, degree: usize) -> Self {
        Self {
            r: self.r,
            terms: self
                .terms
                .iter()
                .filter(|t| t.degree() == degree)
                .cloned()
                .collect(),
        }
    }

    pub fn eval(&self, x: &[T]) -> T {
        let mut total = T::zero();
        for t in &self.terms {
            let mut v = t.coef;
            for (s, &e) in t.exps.iter().enumerate() {
                for _ in 0..e {
                    v = v * x[s];
                }
            }
            total += v;
        }
        total
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Gradient, Hessian and per-species partials of ξ at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct XiPartials<T> {
    /// ∂_{x_s} ξ
    pub gradient: Vec<T>,
    /// ∂_{x_s x_s'} ξ
    pub hessian: Vec<Vec<T>>,
    /// Row s holds ∂_{s'} ξ^s for every s'.
    pub species: Vec<Vec<T>>,
}

/// Model data (λ, h, Γ^(k)) and the expanded mixture polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec<T = f64> {
    lambda: Vec<T>,
    h: Vec<T>,
    gammas: BTreeMap<usize, SpeciesTensor<T>>,
    xi: Polynomial<T>,
    grad: Vec<Polynomial<T>>,
    hess: Vec<Vec<Polynomial<T>>>,
    third: Vec<Vec<Vec<Polynomial<T>>>>,
}

impl<T: Coefficient> MixtureSpec<T> {
    pub fn new(lambda: Vec<T>, h: Vec<T>, gammas: Vec<SpeciesTensor<T>>) -> Result<Self> {
        let r = lambda.len();
        if r == 0 {
            return Err(Error::InvalidMixture("at least one species is required".into()));
        }
        if h.len() != r {
            return Err(Error::InvalidMixture(format!(
                "field has {} entries for {r} species",
                h.len()
            )));
        }
        if lambda.iter().any(|&l| l <= T::zero()) {
            return Err(Error::InvalidMixture("species weights must be positive".into()));
        }
        let total = lambda.iter().fold(T::zero(), |a, &b| a + b);
        if !total.approx_eq(T::one()) {
            return Err(Error::InvalidMixture(format!(
                "species weights must sum to 1, got {total:?}"
            )));
        }
        if h.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidMixture("field magnitudes must be nonnegative".into()));
        }
        let mut map = BTreeMap::new();
        for g in gammas {
            let k = g.degree;
            if !(2..=MAX_DEGREE).contains(&k) {
                return Err(Error::Degree { k, max: MAX_DEGREE });
            }
            if g.r != r {
                return Err(Error::InvalidMixture(format!(
                    "degree-{k} tensor is over {} species, expected {r}",
                    g.r
                )));
            }
            if g.data.iter().any(|&v| v < T::zero()) {
                return Err(Error::InvalidMixture(format!(
                    "degree-{k} tensor has a negative entry"
                )));
            }
            g.check_symmetric()?;
            if map.insert(k, g).is_some() {
                return Err(Error::InvalidMixture(format!("degree {k} given twice")));
            }
        }
        if map.is_empty() {
            return Err(Error::InvalidMixture("no interaction tensors".into()));
        }

        let mut xi = Polynomial::zero(r);
        for (&k, g) in &map {
            for idx in MultiIndexIter::new(r, k, true) {
                let gamma = g.get(&idx);
                let mut coef = gamma * gamma * T::from_count(multiplicity(&idx));
                let mut exps = vec![0u8; r];
                for &s in &idx {
                    coef = coef * lambda[s];
                    exps[s] += 1;
                }
                xi.add_term(coef, exps);
            }
        }
        let grad: Vec<_> = (0..r).map(|s| xi.derivative(s)).collect();
        let hess: Vec<Vec<_>> = grad
            .iter()
            .map(|g| (0..r).map(|s| g.derivative(s)).collect())
            .collect();
        let third = hess
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| (0..r).map(|s| p.derivative(s)).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            lambda,
            h,
            gammas: map,
            xi,
            grad,
            hess,
            third,
        })
    }

    pub fn r(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self) -> &[T] {
        &self.lambda
    }

    pub fn h(&self) -> &[T] {
        &self.h
    }

    pub fn max_degree(&self) -> usize {
        *self.gammas.keys().next_back().unwrap()
    }

    /// Degrees with a tensor present (possibly all-zero).
    pub fn degrees(&self) -> impl Iterator<Item = usize> + '_ {
        self.gammas.keys().copied()
    }

    pub fn gamma(&self, k: usize) -> Option<&SpeciesTensor<T>> {
        self.gammas.get(&k)
    }

    pub fn has_field(&self) -> bool {
        self.h.iter().any(|&v| v != T::zero())
    }

    /// Same interactions, different field.
    pub fn with_field(&self, h: Vec<T>) -> Result<Self> {
        Self::new(self.lambda.clone(), h, self.gammas.values().cloned().collect())
    }

    pub fn xi(&self, x: &[T]) -> T {
        self.xi.eval(x)
    }

    /// ξ^s = λ_s^{-1} ∂_{x_s} ξ.
    pub fn xi_s(&self, s: usize, x: &[T]) -> T {
        self.grad[s].eval(x) / self.lambda[s]
    }

    /// (ξ^1(x), ..., ξ^r(x)).
    pub fn xi_species(&self, x: &[T]) -> Vec<T> {
        (0..self.r()).map(|s| self.xi_s(s, x)).collect()
    }

    /// ξ^{k,s}: the degree-(k-1) part of ξ^s, coming from Γ^(k) alone.
    pub fn xi_s_degree(&self, k: usize, s: usize, x: &[T]) -> T {
        self.grad[s].homogeneous_part(k - 1).eval(x) / self.lambda[s]
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        self.grad.iter().map(|p| p.eval(x)).collect()
    }

    pub fn hessian(&self, x: &[T]) -> Vec<Vec<T>> {
        self.hess
            .iter()
            .map(|row| row.iter().map(|p| p.eval(x)).collect())
            .collect()
    }

    /// ∂_{x_a x_b x_c} ξ as an r×r×r array.
    pub fn third(&self, x: &[T]) -> Vec<Vec<Vec<T>>> {
        self.third
            .iter()
            .map(|m| {
                m.iter()
                    .map(|row| row.iter().map(|p| p.eval(x)).collect())
                    .collect()
            })
            .collect()
    }

    pub fn partials(&self, x: &[T]) -> XiPartials<T> {
        let gradient = self.gradient(x);
        let hessian = self.hessian(x);
        let species = hessian
            .iter()
            .enumerate()
            .map(|(s, row)| row.iter().map(|&v| v / self.lambda[s]).collect())
            .collect();
        XiPartials {
            gradient,
            hessian,
            species,
        }
    }

    /// Every entry of Γ^(2) and Γ^(3) strictly positive.
    pub fn is_nondegenerate(&self) -> bool {
        [2, 3].iter().all(|k| {
            self.gammas
                .get(k)
                .is_some_and(|g| g.data.iter().all(|&v| v > T::zero()))
        })
    }

    /// Relabels species: new species `i` is old species `perm[i]`.
    pub fn permute_species(&self, perm: &[usize]) -> Result<Self> {
        let r = self.r();
        if perm.len() != r {
            return Err(Error::Dimension {
                expected: r,
                got: perm.len(),
            });
        }
        let lambda = perm.iter().map(|&p| self.lambda[p]).collect();
        let h = perm.iter().map(|&p| self.h[p]).collect();
        let gammas = self
            .gammas
            .values()
            .map(|g| {
                let mut out = SpeciesTensor::zeros(g.degree, r);
                for idx in g.indices() {
                    let old: Vec<usize> = idx.iter().map(|&i| perm[i]).collect();
                    out.set(&idx, g.get(&old));
                }
                out
            })
            .collect();
        Self::new(lambda, h, gammas)
    }
}

/// Sup over a uniform grid of [0,1]^r of the four components of the C³ norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct C3Components {
    pub value: f64,
    pub gradient: f64,
    pub hessian: f64,
    pub third: f64,
}

impl C3Components {
    pub fn max(&self) -> f64 {
        self.value.max(self.gradient).max(self.hessian).max(self.third)
    }
}

/// Settings for [`MixtureSpec::perturb_nondegenerate`].
#[derive(Debug, Clone, Copy)]
pub struct PerturbConfig {
    /// Points per axis of the norm grid.
    pub grid_points: usize,
    /// Largest r for which the grid is used; above it only the analytic corner bound is evaluated.
    pub max_grid_species: usize,
    pub floor: f64,
    pub cap: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            grid_points: 11,
            max_grid_species: 4,
            floor: 1e-12,
            cap: 1.0,
        }
    }
}

impl<T: Real> MixtureSpec<T> {
    /// Grid sup of |ξ_a - ξ_b| and of its first three derivative tensors.
    ///
    /// With nonnegative coefficients on both sides and a coefficientwise
    /// ordered pair, each component is maximized at the all-ones corner, which
    /// is always evaluated in addition to the grid.
    pub fn c3_distance(&self, other: &Self, config: &PerturbConfig) -> C3Components {
        let r = self.r();
        let mut points: Vec<Vec<T>> = vec![vec![T::one(); r]];
        if r <= config.max_grid_species && config.grid_points >= 2 {
            let n = config.grid_points;
            for idx in MultiIndexIter::new(n, r, false) {
                points.push(
                    idx.iter()
                        .map(|&i| T::lit(i as f64 / (n - 1) as f64))
                        .collect(),
                );
            }
        }
        let mut out = C3Components {
            value: 0.0,
            gradient: 0.0,
            hessian: 0.0,
            third: 0.0,
        };
        let f = |v: T| v.to_f64().unwrap().abs();
        for x in &points {
            out.value = out.value.max(f(self.xi(x) - other.xi(x)));
            for (a, b) in self.gradient(x).iter().zip(other.gradient(x)) {
                out.gradient = out.gradient.max(f(*a - b));
            }
            for (ra, rb) in self.hessian(x).iter().zip(other.hessian(x)) {
                for (a, b) in ra.iter().zip(rb) {
                    out.hessian = out.hessian.max(f(*a - b));
                }
            }
            for (ma, mb) in self.third(x).iter().zip(other.third(x)) {
                for (ra, rb) in ma.iter().zip(mb) {
                    for (a, b) in ra.iter().zip(rb) {
                        out.third = out.third.max(f(*a - b));
                    }
                }
            }
        }
        out
    }

    /// Raises every Γ^(2), Γ^(3) entry to at least ε' (adding Γ^(3) if absent),
    /// with ε' the largest value found by bisection whose C³ distance is ≤ ε.
    pub fn perturb_nondegenerate(&self, eps: f64, config: &PerturbConfig) -> Result<Self> {
        if self.is_nondegenerate() {
            return Ok(self.clone());
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::NonPositivePerturbation(eps));
        }
        let candidate = |level: f64| -> Result<Self> {
            let level = T::lit(level);
            let r = self.r();
            let mut gammas: BTreeMap<usize, SpeciesTensor<T>> = self.gammas.clone();
            for k in [2, 3] {
                let g = gammas.entry(k).or_insert_with(|| SpeciesTensor::zeros(k, r));
                for v in g.data.iter_mut() {
                    if *v < level {
                        *v = level;
                    }
                }
            }
            Self::new(self.lambda.clone(), self.h.clone(), gammas.into_values().collect())
        };
        let dist = |level: f64| -> Result<f64> {
            Ok(self.c3_distance(&candidate(level)?, config).max())
        };
        if dist(config.cap)? <= eps {
            return candidate(config.cap);
        }
        let (mut lo, mut hi) = (0.0_f64, config.cap);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if dist(mid)? <= eps {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-3 * lo {
                break;
            }
        }
        if lo < config.floor {
            return Err(Error::PerturbationOutOfRange {
                needed: lo,
                floor: config.floor,
                cap: config.cap,
            });
        }
        candidate(lo)
    }
}

/// On-disk form of a mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureJson {
    pub r: usize,
    pub lambda: Vec<f64>,
    pub h: Vec<f64>,
    pub gammas: BTreeMap<String, Value>,
}

fn flatten_nested(value: &Value, depth: usize, r: usize, out: &mut Vec<f64>) -> Result<()> {
    if depth == 0 {
        let v = value
            .as_f64()
            .ok_or_else(|| Error::InvalidMixture(format!("expected a number, got {value}")))?;
        out.push(v);
        return Ok(());
    }
    let arr = value
        .as_array()
        .ok_or_else(|| Error::InvalidMixture(format!("expected a nested array, got {value}")))?;
    if arr.len() != r {
        return Err(Error::InvalidMixture(format!(
            "nested array has length {} instead of {r}",
            arr.len()
        )));
    }
    for v in arr {
        flatten_nested(v, depth - 1, r, out)?;
    }
    Ok(())
}

fn nest(data: &[f64], depth: usize, r: usize) -> Value {
    if depth == 0 {
        return Value::from(data[0]);
    }
    let stride = data.len() / r;
    Value::Array((0..r).map(|i| nest(&data[i * stride..(i + 1) * stride], depth - 1, r)).collect())
}

impl MixtureSpec<f64> {
    pub fn from_json_value(json: &MixtureJson) -> Result<Self> {
        let r = json.r;
        if json.lambda.len() != r {
            return Err(Error::InvalidMixture(format!(
                "\"r\" is {r} but lambda has {} entries",
                json.lambda.len()
            )));
        }
        let mut gammas = Vec::new();
        for (key, value) in &json.gammas {
            let k: usize = key
                .parse()
                .map_err(|_| Error::InvalidMixture(format!("degree key {key:?} is not an integer")))?;
            if !(2..=MAX_DEGREE).contains(&k) {
                return Err(Error::Degree { k, max: MAX_DEGREE });
            }
            let mut flat = Vec::new();
            flatten_nested(value, k, r, &mut flat)?;
            gammas.push(SpeciesTensor::from_flat(k, r, flat)?);
        }
        Self::new(json.lambda.clone(), json.h.clone(), gammas)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let json: MixtureJson = serde_json::from_str(text)?;
        Self::from_json_value(&json)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> MixtureJson {
        MixtureJson {
            r: self.r(),
            lambda: self.lambda.clone(),
            h: self.h.clone(),
            gammas: self
                .gammas
                .iter()
                .map(|(k, g)| (k.to_string(), nest(&g.data, *k, self.r())))
                .collect(),
        }
    }

    /// Single species, ξ(x) = Σ_k c_k x^k with `coefs` = [(k, c_k)].
    pub fn single_species(coefs: &[(usize, f64)], h: f64) -> Result<Self> {
        let gammas = coefs
            .iter()
            .map(|&(k, c)| SpeciesTensor::constant(k, 1, c.sqrt()))
            .collect();
        Self::new(vec![1.0], vec![h], gammas)
    }

    /// Pure p-spin, ξ(x) = x^p.
    pub fn pure(p: usize, h: f64) -> Result<Self> {
        Self::single_species(&[(p, 1.0)], h)
    }

    /// Equal weights with every Γ^(k) entry equal to `entry` for each listed degree.
    pub fn uniform(r: usize, degrees: &[usize], entry: f64, h: Vec<f64>) -> Result<Self> {
        let gammas = degrees
            .iter()
            .map(|&k| SpeciesTensor::constant(k, r, entry))
            .collect();
        Self::new(vec![1.0 / r as f64; r], h, gammas)
    }

    /// Bipartite spherical SK: λ = (1/2, 1/2), Γ^(2) = ((0,1),(1,0)).
    pub fn bipartite_sk() -> Self {
        let g = SpeciesTensor::from_flat(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        Self::new(vec![0.5, 0.5], vec![0.0, 0.0], vec![g]).unwrap()
    }
}

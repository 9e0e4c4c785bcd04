//! Sampled Hamiltonians H_N and the tensor contractions on them.
//!
//! See [`rows`] for the folded storage format. Coefficients are either kept in
//! memory or regenerated row by row on every contraction pass, depending on a
//! byte budget; both paths produce the same numbers.

mod cache;
mod layout;
mod rows;

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mixture::{permutations, MixtureSpec};
use crate::scalar::Real;

pub use cache::spec_digest;
pub use layout::{inner_n, norm_n, SpeciesLayout};
pub use rows::{row_key, sorted_count};
use rows::{entries_with_first, DegreeRows, PrefixIter};

/// Highest degree the contraction kernels support.
pub const MAX_DEGREE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageMode {
    /// Keep coefficients in memory when they fit the budget, otherwise stream.
    #[default]
    Auto,
    /// Always keep coefficients in memory; over-budget configurations are rejected.
    Materialized,
    /// Regenerate coefficients on every pass.
    Streamed,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HamiltonianConfig {
    pub budget_bytes: u128,
    pub storage: StorageMode,
    pub hessian_cap: usize,
    /// Work units per degree; fixed so results do not depend on thread count.
    pub chunks: usize,
    /// Round coefficients to f32 (in memory and when streamed) while
    /// accumulating in the kernel scalar type. Halves the footprint.
    pub compact: bool,
}

impl Default for HamiltonianConfig {
    fn default() -> Self {
        Self {
            budget_bytes: 2 << 30,
            storage: StorageMode::Auto,
            hessian_cap: 600,
            chunks: 64,
            compact: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Chunk {
    first: Range<usize>,
    offset: usize,
    len: usize,
}

fn make_chunks(n: usize, k: usize, target: usize) -> Vec<Chunk> {
    let total = sorted_count(n, k);
    let per = total.div_ceil(target.max(1) as u128).max(1);
    let mut chunks = Vec::new();
    let (mut start, mut acc, mut offset) = (0usize, 0u128, 0usize);
    for a in 0..n {
        acc += entries_with_first(n, k, a);
        if acc >= per || a + 1 == n {
            chunks.push(Chunk {
                first: start..a + 1,
                offset,
                len: acc as usize,
            });
            offset += acc as usize;
            start = a + 1;
            acc = 0;
        }
    }
    chunks
}

#[derive(Debug, Clone)]
enum Storage<T> {
    Dense(Vec<Vec<T>>),
    Compact(Vec<Vec<f32>>),
    Streamed,
}

/// Energy and gradients at one point.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    /// H_N(σ), field included.
    pub energy: T,
    /// ∇H_N(σ), field included.
    pub gradient: Vec<T>,
    /// ∇H_{N,k}(σ) for each degree present, ascending; equals A^(k){σ}.
    pub by_degree: Vec<(usize, Vec<T>)>,
}

/// One disorder realization.
#[derive(Debug, Clone)]
pub struct HamiltonianInstance<T: Real = f64> {
    spec: MixtureSpec<f64>,
    layout: SpeciesLayout,
    seed: Option<u64>,
    degrees: Vec<DegreeRows>,
    chunks: Vec<Vec<Chunk>>,
    storage: Storage<T>,
    field: Vec<T>,
    lambda: Vec<T>,
    config: HamiltonianConfig,
}

impl<T: Real> HamiltonianInstance<T> {
    fn skeleton(spec: &MixtureSpec<f64>, n: usize, config: HamiltonianConfig) -> Result<Self> {
        let d = spec.max_degree();
        if d > MAX_DEGREE {
            return Err(Error::Degree { k: d, max: MAX_DEGREE });
        }
        let layout = SpeciesLayout::build(n, spec.lambda())?;
        let degrees: Vec<DegreeRows> = spec.degrees().map(|k| DegreeRows::new(spec, k, n)).collect();
        let chunks = degrees
            .iter()
            .map(|d| make_chunks(n, d.k, config.chunks))
            .collect();
        let field = layout.lift(&spec.h().iter().map(|&h| T::lit(h)).collect::<Vec<_>>());
        let lambda = spec.lambda().iter().map(|&l| T::lit(l)).collect();
        Ok(Self {
            spec: spec.clone(),
            layout,
            seed: None,
            degrees,
            chunks,
            storage: Storage::Streamed,
            field,
            lambda,
            config,
        })
    }

    /// Bytes needed to keep every folded coefficient in memory.
    pub fn dense_bytes(spec: &MixtureSpec<f64>, n: usize, compact: bool) -> u128 {
        let width = if compact { 4 } else { std::mem::size_of::<T>() as u128 };
        spec.degrees().map(|k| sorted_count(n, k) * width).sum()
    }

    /// Draws an instance; the same (spec, N, seed) always gives the same tensor.
    pub fn sample(spec: &MixtureSpec<f64>, n: usize, seed: u64, config: HamiltonianConfig) -> Result<Self> {
        let mut inst = Self::skeleton(spec, n, config)?;
        inst.seed = Some(seed);
        let bytes = Self::dense_bytes(spec, n, config.compact);
        let dense = match config.storage {
            StorageMode::Streamed => false,
            StorageMode::Auto => bytes <= config.budget_bytes,
            StorageMode::Materialized => {
                if bytes > config.budget_bytes {
                    return Err(Error::Budget {
                        bytes,
                        budget: config.budget_bytes,
                    });
                }
                true
            }
        };
        if dense && config.compact {
            let data = inst
                .degrees
                .iter()
                .zip(&inst.chunks)
                .map(|(deg, chunks)| inst.generate_dense::<f32>(deg, chunks, seed))
                .collect();
            inst.storage = Storage::Compact(data);
        } else if dense {
            let data = inst
                .degrees
                .iter()
                .zip(&inst.chunks)
                .map(|(deg, chunks)| inst.generate_dense::<T>(deg, chunks, seed))
                .collect();
            inst.storage = Storage::Dense(data);
        }
        Ok(inst)
    }

    fn generate_dense<C: Real>(&self, deg: &DegreeRows, chunks: &[Chunk], seed: u64) -> Vec<C> {
        let total: usize = chunks.iter().map(|c| c.len).sum();
        let mut data = vec![C::zero(); total];
        let mut slices = Vec::with_capacity(chunks.len());
        let mut rest = data.as_mut_slice();
        for c in chunks {
            let (head, tail) = rest.split_at_mut(c.len);
            slices.push((c, head));
            rest = tail;
        }
        let n = self.layout.n();
        slices.into_par_iter().for_each(|(c, out)| {
            let mut it = PrefixIter::new(n, deg.k - 1, c.first.clone());
            let (mut scratch, mut row) = (Vec::new(), Vec::new());
            let mut pos = 0;
            while let Some(p) = it.current() {
                deg.fill::<C>(seed, &self.layout, p, &mut scratch, &mut row);
                out[pos..pos + row.len()].copy_from_slice(&row);
                pos += row.len();
                it.step();
            }
        });
        data
    }

    /// Builds an instance from explicit raw tensors G^(k) (dense, row-major N^k).
    pub fn from_raw_tensors(spec: &MixtureSpec<f64>, n: usize, raw: &[(usize, Vec<f64>)]) -> Result<Self> {
        let mut inst = Self::skeleton(spec, n, HamiltonianConfig::default())?;
        let mut data = Vec::new();
        for deg in &inst.degrees {
            let k = deg.k;
            let g = raw
                .iter()
                .find(|(kk, _)| *kk == k)
                .map(|(_, g)| g)
                .ok_or_else(|| Error::Precondition(format!("no raw tensor for degree {k}")))?;
            if g.len() != n.pow(k as u32) {
                return Err(Error::Dimension {
                    expected: n.pow(k as u32),
                    got: g.len(),
                });
            }
            let gamma = spec.gamma(k).unwrap();
            let norm = (n as f64).powf(-((k - 1) as f64) / 2.0);
            let mut folded = Vec::with_capacity(sorted_count(n, k) as usize);
            let mut it = PrefixIter::new(n, k - 1, 0..n);
            while let Some(p) = it.current() {
                let mut tuple = p.to_vec();
                tuple.push(0);
                for l in *p.last().unwrap()..n {
                    tuple[k - 1] = l;
                    let species: Vec<usize> = tuple.iter().map(|&i| inst.layout.species_of(i)).collect();
                    let sum: f64 = permutations(&tuple)
                        .iter()
                        .map(|t| g[t.iter().fold(0, |acc, &i| acc * n + i)])
                        .sum();
                    folded.push(T::lit(norm * gamma.get(&species) * sum));
                }
                it.step();
            }
            data.push(folded);
        }
        inst.storage = Storage::Dense(data);
        Ok(inst)
    }

    pub fn spec(&self) -> &MixtureSpec<f64> {
        &self.spec
    }

    pub fn layout(&self) -> &SpeciesLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn config(&self) -> &HamiltonianConfig {
        &self.config
    }

    pub fn is_materialized(&self) -> bool {
        !matches!(self.storage, Storage::Streamed)
    }

    /// λ in the kernel scalar type.
    pub fn lambda(&self) -> &[T] {
        &self.lambda
    }

    /// h ⋄ 1.
    pub fn field(&self) -> &[T] {
        &self.field
    }

    pub fn overlap(&self, sigma: &[T], rho: &[T]) -> Result<Vec<T>> {
        self.layout.overlap(&self.lambda, sigma, rho)
    }

    /// Folded coefficients of degree `k` in storage order (materialized instances only).
    pub fn folded(&self, k: usize) -> Option<&[T]> {
        let idx = self.degrees.iter().position(|d| d.k == k)?;
        match &self.storage {
            Storage::Dense(v) => Some(&v[idx]),
            _ => None,
        }
    }

    /// The standard normals behind the degree-k coefficients, one per sorted tuple.
    pub fn standard_normals(&self, k: usize) -> Result<Vec<f64>> {
        let seed = self
            .seed
            .ok_or_else(|| Error::Precondition("instance was not sampled from a seed".into()))?;
        let deg = self
            .degrees
            .iter()
            .find(|d| d.k == k)
            .ok_or(Error::Degree { k, max: self.spec.max_degree() })?;
        let n = self.n();
        let mut out = Vec::with_capacity(sorted_count(n, k) as usize);
        let mut row = Vec::new();
        let mut it = PrefixIter::new(n, k - 1, 0..n);
        while let Some(p) = it.current() {
            deg.normals(seed, n, p, &mut row);
            out.extend_from_slice(&row);
            it.step();
        }
        Ok(out)
    }

    /// Coefficients of row `prefix`; `offset` tracks the position in dense storage.
    fn row<'a>(
        &'a self,
        d: usize,
        prefix: &[usize],
        offset: &mut usize,
        scratch: &mut Vec<f64>,
        buf: &'a mut Vec<T>,
    ) -> &'a [T] {
        let len = self.n() - prefix[prefix.len() - 1];
        let at = *offset;
        *offset += len;
        match &self.storage {
            Storage::Dense(v) => &v[d][at..at + len],
            Storage::Compact(v) => {
                buf.clear();
                buf.extend(v[d][at..at + len].iter().map(|&c| T::lit(c as f64)));
                buf
            }
            Storage::Streamed => {
                let deg = &self.degrees[d];
                if self.config.compact {
                    let mut tmp: Vec<f32> = Vec::with_capacity(len);
                    deg.fill::<f32>(self.seed.unwrap(), &self.layout, prefix, scratch, &mut tmp);
                    buf.clear();
                    buf.extend(tmp.iter().map(|&c| T::lit(c as f64)));
                } else {
                    deg.fill(self.seed.unwrap(), &self.layout, prefix, scratch, buf);
                }
                buf
            }
        }
    }

    fn contract_chunk(&self, d: usize, chunk: &Chunk, x: &[T], b: usize) -> Vec<T> {
        let n = self.n();
        let k = self.degrees[d].k;
        let mut out = vec![T::zero(); n * b];
        let mut it = PrefixIter::new(n, k - 1, chunk.first.clone());
        let (mut scratch, mut buf) = (Vec::new(), Vec::new());
        let mut offset = chunk.offset;
        let mut full = vec![T::zero(); b];
        let mut except = vec![T::zero(); (k - 1) * b];
        let mut acc = vec![T::zero(); b];
        let mut prefix = [0usize; MAX_DEGREE];
        while let Some(p) = it.current() {
            let m = p.len();
            prefix[..m].copy_from_slice(p);
            let start = prefix[m - 1];
            let row = self.row(d, p, &mut offset, &mut scratch, &mut buf);
            for bb in 0..b {
                let mut f = T::one();
                for &i in &prefix[..m] {
                    f = f * x[i * b + bb];
                }
                full[bb] = f;
                for slot in 0..m {
                    let mut e = T::one();
                    for (t, &i) in prefix[..m].iter().enumerate() {
                        if t != slot {
                            e = e * x[i * b + bb];
                        }
                    }
                    except[slot * b + bb] = e;
                }
            }
            acc.iter_mut().for_each(|a| *a = T::zero());
            let xs = &x[start * b..];
            let os = &mut out[start * b..];
            match b {
                1 => row_pass::<T, 1>(row, xs, os, &full, &mut acc),
                2 => row_pass::<T, 2>(row, xs, os, &full, &mut acc),
                3 => row_pass::<T, 3>(row, xs, os, &full, &mut acc),
                4 => row_pass::<T, 4>(row, xs, os, &full, &mut acc),
                5 => row_pass::<T, 5>(row, xs, os, &full, &mut acc),
                6 => row_pass::<T, 6>(row, xs, os, &full, &mut acc),
                7 => row_pass::<T, 7>(row, xs, os, &full, &mut acc),
                8 => row_pass::<T, 8>(row, xs, os, &full, &mut acc),
                9 => row_pass::<T, 9>(row, xs, os, &full, &mut acc),
                _ => {
                    for ((&w, xv), ov) in row.iter().zip(xs.chunks_exact(b)).zip(os.chunks_exact_mut(b)) {
                        for bb in 0..b {
                            acc[bb] = acc[bb] + w * xv[bb];
                            ov[bb] = ov[bb] + w * full[bb];
                        }
                    }
                }
            }
            for slot in 0..m {
                let i = prefix[slot];
                for bb in 0..b {
                    out[i * b + bb] = out[i * b + bb] + except[slot * b + bb] * acc[bb];
                }
            }
            it.step();
        }
        out
    }

    /// Per-degree gradients ∇H_{N,k} for a batch of points, in one pass per degree.
    pub fn degree_gradients(&self, points: &[&[T]]) -> Result<Vec<Vec<Vec<T>>>> {
        let n = self.n();
        let b = points.len();
        for p in points {
            self.layout.check(p.len())?;
        }
        let mut x = vec![T::zero(); n * b];
        for (bb, p) in points.iter().enumerate() {
            for (i, &v) in p.iter().enumerate() {
                x[i * b + bb] = v;
            }
        }
        let mut result = vec![Vec::with_capacity(self.degrees.len()); b];
        for d in 0..self.degrees.len() {
            let mut parts: Vec<Vec<T>> = self.chunks[d]
                .par_iter()
                .map(|c| self.contract_chunk(d, c, &x, b))
                .collect();
            // fixed pairwise tree, independent of scheduling
            while parts.len() > 1 {
                let mut next = Vec::with_capacity(parts.len().div_ceil(2));
                let mut iter = parts.into_iter();
                while let Some(mut a) = iter.next() {
                    if let Some(c) = iter.next() {
                        a.iter_mut().zip(&c).for_each(|(u, &v)| *u = *u + v);
                    }
                    next.push(a);
                }
                parts = next;
            }
            let summed = parts.pop().unwrap_or_else(|| vec![T::zero(); n * b]);
            for (bb, res) in result.iter_mut().enumerate() {
                res.push((0..n).map(|i| summed[i * b + bb]).collect());
            }
        }
        Ok(result)
    }

    /// Energies and gradients for a batch of points.
    pub fn evaluate_batch(&self, points: &[&[T]]) -> Result<Vec<Evaluation<T>>> {
        let grads = self.degree_gradients(points)?;
        Ok(points
            .iter()
            .zip(grads)
            .map(|(p, per)| {
                let mut gradient = self.field.clone();
                let mut energy: T = p.iter().zip(&self.field).map(|(&a, &h)| a * h).sum();
                let mut by_degree = Vec::with_capacity(per.len());
                for (deg, g) in self.degrees.iter().zip(per) {
                    let dot: T = p.iter().zip(&g).map(|(&a, &v)| a * v).sum();
                    energy = energy + dot / T::from_usize(deg.k).unwrap();
                    gradient.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v);
                    by_degree.push((deg.k, g));
                }
                Evaluation {
                    energy,
                    gradient,
                    by_degree,
                }
            })
            .collect())
    }

    pub fn evaluate(&self, sigma: &[T]) -> Result<Evaluation<T>> {
        Ok(self.evaluate_batch(&[sigma])?.pop().unwrap())
    }

    pub fn energy(&self, sigma: &[T]) -> Result<T> {
        Ok(self.evaluate(sigma)?.energy)
    }

    pub fn gradient(&self, sigma: &[T]) -> Result<Vec<T>> {
        Ok(self.evaluate(sigma)?.gradient)
    }

    /// A^(k){u}, which equals the gradient of the degree-k part at u.
    pub fn tensor_apply(&self, k: usize, u: &[T]) -> Result<Vec<T>> {
        Ok(self.tensor_apply_batch(k, &[u])?.pop().unwrap())
    }

    pub fn tensor_apply_batch(&self, k: usize, points: &[&[T]]) -> Result<Vec<Vec<T>>> {
        let d = self
            .degrees
            .iter()
            .position(|dg| dg.k == k)
            .ok_or(Error::Degree { k, max: self.spec.max_degree() })?;
        Ok(self
            .degree_gradients(points)?
            .into_iter()
            .map(|mut per| per.swap_remove(d))
            .collect())
    }

    /// ∇²H_N(σ) for N up to the configured cap and degree at most 3.
    pub fn hessian(&self, sigma: &[T]) -> Result<Matrix<T>> {
        let n = self.n();
        self.layout.check(sigma.len())?;
        if n > self.config.hessian_cap {
            return Err(Error::HessianCap {
                n,
                cap: self.config.hessian_cap,
            });
        }
        if self.spec.max_degree() > 3 {
            return Err(Error::Degree {
                k: self.spec.max_degree(),
                max: 3,
            });
        }
        let mut h = vec![vec![T::zero(); n]; n];
        let (mut scratch, mut buf) = (Vec::new(), Vec::new());
        for (d, deg) in self.degrees.iter().enumerate() {
            let k = deg.k;
            let mut it = PrefixIter::new(n, k - 1, 0..n);
            let mut offset = 0;
            while let Some(p) = it.current() {
                let start = *p.last().unwrap();
                let row = self.row(d, p, &mut offset, &mut scratch, &mut buf);
                let mut t = [0usize; 3];
                t[..k - 1].copy_from_slice(p);
                for (off, &w) in row.iter().enumerate() {
                    t[k - 1] = start + off;
                    for a in 0..k {
                        for c in 0..k {
                            if a == c {
                                continue;
                            }
                            let mut v = w;
                            for (e, &idx) in t[..k].iter().enumerate() {
                                if e != a && e != c {
                                    v = v * sigma[idx];
                                }
                            }
                            h[t[a]][t[c]] = h[t[a]][t[c]] + v;
                        }
                    }
                }
                it.step();
            }
        }
        Ok(h)
    }
}

/// Inner loop over one row for a batch of B points stored interleaved.
#[inline(always)]
fn row_pass<T: Real, const B: usize>(row: &[T], xs: &[T], os: &mut [T], full: &[T], acc: &mut [T]) {
    let f: [T; B] = std::array::from_fn(|i| full[i]);
    let mut a = [T::zero(); B];
    for ((&w, xv), ov) in row.iter().zip(xs.chunks_exact(B)).zip(os.chunks_exact_mut(B)) {
        for bb in 0..B {
            a[bb] = a[bb] + w * xv[bb];
            ov[bb] = ov[bb] + w * f[bb];
        }
    }
    acc[..B].copy_from_slice(&a);
}

/// Empirical Cov(H̃(σ), H̃(ρ))/N against ξ(R(σ, ρ)) for one pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub predicted: f64,
    pub empirical: f64,
    pub stderr: f64,
    /// Deviation above four standard errors.
    pub flagged: bool,
}

/// Monte Carlo check of E[H̃(σ)H̃(ρ)] = N ξ(R(σ, ρ)) over `n_seeds` instances.
pub fn covariance_mc_check(
    spec: &MixtureSpec<f64>,
    n: usize,
    pairs: &[(Vec<f64>, Vec<f64>)],
    seeds: Range<u64>,
    config: HamiltonianConfig,
) -> Result<Vec<CovarianceCheck>> {
    let no_field = spec.with_field(vec![0.0; spec.r()])?;
    let mut samples = vec![Vec::new(); pairs.len()];
    for seed in seeds {
        let inst = HamiltonianInstance::<f64>::sample(&no_field, n, seed, config)?;
        let points: Vec<&[f64]> = pairs
            .iter()
            .flat_map(|(a, b)| [a.as_slice(), b.as_slice()])
            .collect();
        let evals = inst.evaluate_batch(&points)?;
        for (i, pair) in evals.chunks(2).enumerate() {
            samples[i].push(pair[0].energy * pair[1].energy / n as f64);
        }
    }
    let layout = SpeciesLayout::build(n, spec.lambda())?;
    pairs
        .iter()
        .zip(samples)
        .map(|((a, b), xs)| {
            let predicted = spec.xi(&layout.overlap(spec.lambda(), a, b)?);
            let m = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            let stderr = (var / m).sqrt();
            Ok(CovarianceCheck {
                predicted,
                empirical: mean,
                stderr,
                flagged: (mean - predicted).abs() > 4.0 * stderr,
            })
        })
        .collect()
}

//! Folded coefficient rows and their seeded Gaussian streams.
//!
//! The degree-k form Σ_{i_1..i_k} γ G_{i_1..i_k} σ_{i_1}...σ_{i_k} only sees the
//! symmetrization of G, so it is stored over sorted tuples i_1 ≤ ... ≤ i_k as
//!
//! ```text
//! c_{i} = N^{-(k-1)/2} γ_{s(i)} Σ_{distinct orderings π} G_{π(i)}
//! ```
//!
//! For iid standard G the inner sum is √mult(i) times one standard normal, so
//! a sampled instance draws one normal per sorted tuple. Tuples are grouped in
//! rows sharing the first k-1 indices; row p holds the last index l ≥ p_{k-1}.
//! Each row has its own generator keyed by (seed, k, p), which is what lets a
//! streamed instance regenerate any part of the tensor on demand.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::mixture::{MixtureSpec, SpeciesTensor};
use crate::scalar::Real;

use super::layout::SpeciesLayout;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream key for one row (splitmix-style hash chain over the labels).
pub fn row_key(seed: u64, k: usize, prefix: &[usize]) -> u64 {
    let mut h = mix(seed ^ GOLDEN);
    h = mix(h ^ (k as u64).wrapping_mul(GOLDEN));
    for &p in prefix {
        h = mix(h.wrapping_add(GOLDEN) ^ (p as u64 + 1));
    }
    h
}

pub fn row_rng(seed: u64, k: usize, prefix: &[usize]) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(row_key(seed, k, prefix))
}

/// Number of sorted k-tuples over {0..n-1}: C(n+k-1, k).
pub fn sorted_count(n: usize, k: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..k as u128 {
        c = c * (n as u128 + i) / (i + 1);
    }
    c
}

/// Entries in the rows whose first index equals `a`: C(n-a+k-2, k-1).
pub fn entries_with_first(n: usize, k: usize, a: usize) -> u128 {
    sorted_count(n - a, k - 1)
}

/// Iterates sorted prefixes (length k-1) whose first index lies in `first`.
pub struct PrefixIter {
    n: usize,
    end: usize,
    cur: Option<Vec<usize>>,
}

impl PrefixIter {
    pub fn new(n: usize, len: usize, first: std::ops::Range<usize>) -> Self {
        let cur = if first.start < first.end && first.start < n && len > 0 {
            Some(vec![first.start; len])
        } else {
            None
        };
        Self {
            n,
            end: first.end.min(n),
            cur,
        }
    }

    pub fn current(&self) -> Option<&[usize]> {
        self.cur.as_deref()
    }

    pub fn step(&mut self) {
        let Some(cur) = self.cur.as_mut() else { return };
        let len = cur.len();
        let mut pos = len;
        loop {
            if pos == 0 {
                self.cur = None;
                return;
            }
            pos -= 1;
            if cur[pos] + 1 < self.n {
                cur[pos] += 1;
                let v = cur[pos];
                for slot in cur.iter_mut().skip(pos + 1) {
                    *slot = v;
                }
                if cur[0] >= self.end {
                    self.cur = None;
                }
                return;
            }
        }
    }
}

/// Precomputed per-degree scale data shared by all rows.
#[derive(Debug, Clone)]
pub struct DegreeRows {
    pub k: usize,
    /// γ tensor of this degree, as f64.
    gamma: SpeciesTensor<f64>,
    /// N^{-(k-1)/2}
    norm: f64,
}

impl DegreeRows {
    pub fn new(spec: &MixtureSpec<f64>, k: usize, n: usize) -> Self {
        Self {
            k,
            gamma: spec
                .gamma(k)
                .cloned()
                .unwrap_or_else(|| SpeciesTensor::zeros(k, spec.r())),
            norm: (n as f64).powf(-((k - 1) as f64) / 2.0),
        }
    }

    /// Per-species multipliers for the row: `gt[s]` applies to l > p_last
    /// (species s), `eq` to l = p_last.
    pub fn row_scales(&self, layout: &SpeciesLayout, prefix: &[usize], gt: &mut Vec<f64>) -> f64 {
        let r = layout.r();
        let mut idx: Vec<usize> = prefix.iter().map(|&p| layout.species_of(p)).collect();
        idx.push(0);
        // multiplicity of the prefix extended by a new, larger index
        let mut fact = 1.0;
        for i in 2..=self.k {
            fact *= i as f64;
        }
        let mut run = 1usize;
        for w in prefix.windows(2) {
            if w[0] == w[1] {
                run += 1;
                fact /= run as f64;
            } else {
                run = 1;
            }
        }
        let mult_gt = fact;
        // appending l = p_last lengthens the final run by one
        let mult_eq = fact / (run + 1) as f64;
        gt.clear();
        let last = idx.len() - 1;
        for s in 0..r {
            idx[last] = s;
            gt.push(self.norm * self.gamma.get(&idx) * mult_gt.sqrt());
        }
        let s_last = layout.species_of(*prefix.last().unwrap());
        idx[last] = s_last;
        self.norm * self.gamma.get(&idx) * mult_eq.sqrt()
    }

    /// Fills `out` with the folded coefficients of row `prefix`.
    pub fn fill<T: Real>(
        &self,
        seed: u64,
        layout: &SpeciesLayout,
        prefix: &[usize],
        scratch: &mut Vec<f64>,
        out: &mut Vec<T>,
    ) {
        let start = *prefix.last().unwrap();
        let eq = self.row_scales(layout, prefix, scratch);
        let species = layout.species_map();
        let mut rng = row_rng(seed, self.k, prefix);
        out.clear();
        let z: f64 = StandardNormal.sample(&mut rng);
        out.push(T::lit(eq * z));
        for &s in &species[start + 1..] {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(T::lit(scratch[s as usize] * z));
        }
    }

    /// The raw standard normals of a row, without any scaling.
    pub fn normals(&self, seed: u64, n: usize, prefix: &[usize], out: &mut Vec<f64>) {
        let start = *prefix.last().unwrap();
        let mut rng = row_rng(seed, self.k, prefix);
        out.clear();
        out.extend((start..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
}

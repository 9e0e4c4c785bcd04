use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Contiguous species blocks I_1, ..., I_r of {0, ..., N-1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeciesLayout {
    n: usize,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    #[serde(skip)]
    species: Vec<u16>,
}

impl SpeciesLayout {
    /// Largest-remainder rounding of λ_s N, ties to the smaller species index.
    pub fn build(n: usize, lambda: &[f64]) -> Result<Self> {
        let r = lambda.len();
        if n < r {
            return Err(Error::Layout(format!(
                "N = {n} cannot give each of {r} species a coordinate"
            )));
        }
        let quotas: Vec<f64> = lambda.iter().map(|l| l * n as f64).collect();
        let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..r).collect();
        // Stable sort keeps the smaller index first among equal remainders.
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap()
        });
        for &s in order.iter().take(n.saturating_sub(assigned)) {
            sizes[s] += 1;
        }
        // Tiny weights can round to an empty block; borrow from the largest.
        while let Some(empty) = sizes.iter().position(|&c| c == 0) {
            let big = (0..r).max_by_key(|&s| (sizes[s], std::cmp::Reverse(s))).unwrap();
            sizes[big] -= 1;
            sizes[empty] += 1;
        }
        Self::from_sizes(sizes)
    }

    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.iter().any(|&c| c == 0) {
            return Err(Error::Layout("every species block must be nonempty".into()));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        for &c in &sizes {
            offsets.push(acc);
            acc += c;
        }
        offsets.push(acc);
        let mut species = Vec::with_capacity(acc);
        for (s, &c) in sizes.iter().enumerate() {
            species.extend(std::iter::repeat_n(s as u16, c));
        }
        Ok(Self {
            n: acc,
            sizes,
            offsets,
            species,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Start of each block, followed by N.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn block(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn species_of(&self, i: usize) -> usize {
        self.species[i] as usize
    }

    pub(crate) fn species_map(&self) -> &[u16] {
        &self.species
    }

    /// Lifts a per-species vector to coordinates (the ⋄ product with 1).
    pub fn lift<T: Real>(&self, per_species: &[T]) -> Vec<T> {
        self.species.iter().map(|&s| per_species[s as usize]).collect()
    }

    /// a ⋄ v, coordinatewise scaling by the species entry.
    pub fn diamond<T: Real>(&self, a: &[T], v: &[T]) -> Vec<T> {
        v.iter()
            .zip(&self.species)
            .map(|(&x, &s)| a[s as usize] * x)
            .collect()
    }

    /// R_s(σ, ρ) = ⟨σ_s, ρ_s⟩ / (λ_s N), with the exact λ_s.
    pub fn overlap<T: Real>(&self, lambda: &[T], sigma: &[T], rho: &[T]) -> Result<Vec<T>> {
        self.check(sigma.len())?;
        self.check(rho.len())?;
        let n = T::from_usize(self.n).unwrap();
        Ok((0..self.r())
            .map(|s| {
                let range = self.block(s);
                let dot: T = sigma[range.clone()]
                    .iter()
                    .zip(&rho[range])
                    .map(|(&a, &b)| a * b)
                    .sum();
                dot / (lambda[s] * n)
            })
            .collect())
    }

    pub fn check(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }
}

/// ‖u‖_N = (N^{-1} Σ u_i²)^{1/2}.
pub fn norm_n<T: Real>(u: &[T]) -> T {
    let n = T::from_usize(u.len().max(1)).unwrap();
    (u.iter().map(|&x| x * x).sum::<T>() / n).sqrt()
}

/// ⟨u, v⟩_N = N^{-1} Σ u_i v_i.
pub fn inner_n<T: Real>(u: &[T], v: &[T]) -> T {
    let n = T::from_usize(u.len().max(1)).unwrap();
    u.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_examples() {
        assert_eq!(SpeciesLayout::build(10, &[0.5, 0.5]).unwrap().sizes(), &[5, 5]);
        assert_eq!(
            SpeciesLayout::build(10, &[1.0 / 3.0, 2.0 / 3.0]).unwrap().sizes(),
            &[3, 7]
        );
        assert!(SpeciesLayout::build(1, &[0.5, 0.5]).is_err());
        assert_eq!(SpeciesLayout::build(3, &[0.5, 0.5]).unwrap().sizes(), &[2, 1]);
        let l = SpeciesLayout::build(5, &[0.98, 0.01, 0.01]).unwrap();
        assert_eq!(l.sizes().iter().sum::<usize>(), 5);
        assert!(l.sizes().iter().all(|&c| c >= 1));
    }

    #[test]
    fn overlap_identities() {
        let lambda = [0.25, 0.75];
        let l = SpeciesLayout::build(8, &lambda).unwrap();
        let sigma: Vec<f64> = (0..8).map(|i| if i < 2 { 1.0 } else { 1.0 }).collect();
        let r = l.overlap(&lambda, &sigma, &sigma).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        let u: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let r = l.overlap(&lambda, &u, &v).unwrap();
        let lhs = inner_n(&u, &v);
        let rhs: f64 = lambda.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-15);
        let mut a = vec![0.0; 8];
        a[0] = 1.0;
        let mut b = vec![0.0; 8];
        b[5] = 1.0;
        assert_eq!(l.overlap(&lambda, &a, &b).unwrap(), vec![0.0, 0.0]);
    }
}

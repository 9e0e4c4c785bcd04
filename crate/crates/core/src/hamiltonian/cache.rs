//! Binary cache of materialized coefficients.
//!
//! Layout, all little endian: magic `SPAMPTNS`, version u32, 32-byte spec
//! digest, seed u64, N u64, degree count u32, then per degree: k u32, entry
//! count u64, entries as f64 in storage order.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixture::MixtureSpec;
use crate::scalar::Real;

use super::{HamiltonianConfig, HamiltonianInstance, Storage};

const MAGIC: &[u8; 8] = b"SPAMPTNS";
const VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form of the spec.
pub fn spec_digest(spec: &MixtureSpec<f64>) -> [u8; 32] {
    let text = serde_json::to_string(&spec.to_json()).expect("spec serializes");
    Sha256::digest(text.as_bytes()).into()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl<T: Real> HamiltonianInstance<T> {
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let Some(seed) = self.seed else {
            return Err(Error::Cache("only seeded instances can be cached".into()));
        };
        let data: Vec<Vec<f64>> = match &self.storage {
            Storage::Dense(v) => v.iter().map(|d| d.iter().map(|x| x.to_f64().unwrap()).collect()).collect(),
            Storage::Compact(v) => v.iter().map(|d| d.iter().map(|&x| x as f64).collect()).collect(),
            Storage::Streamed => {
                return Err(Error::Cache("streamed instances have nothing to cache".into()))
            }
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&spec_digest(&self.spec))?;
        w.write_all(&seed.to_le_bytes())?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        w.write_all(&(data.len() as u32).to_le_bytes())?;
        for (deg, values) in self.degrees.iter().zip(&data) {
            w.write_all(&(deg.k as u32).to_le_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a cache written for exactly this (spec, N, seed).
    pub fn load_cache(
        spec: &MixtureSpec<f64>,
        n: usize,
        seed: u64,
        config: HamiltonianConfig,
        path: &Path,
    ) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Cache("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Cache(format!("unsupported version {version}")));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest)?;
        if digest != spec_digest(spec) {
            return Err(Error::Cache("spec digest mismatch".into()));
        }
        let (file_seed, file_n) = (read_u64(&mut r)?, read_u64(&mut r)?);
        if file_seed != seed || file_n != n as u64 {
            return Err(Error::Cache(format!(
                "cache holds seed {file_seed}, N {file_n}; wanted seed {seed}, N {n}"
            )));
        }
        let mut inst = Self::skeleton(spec, n, config)?;
        inst.seed = Some(seed);
        let count = read_u32(&mut r)? as usize;
        if count != inst.degrees.len() {
            return Err(Error::Cache("degree count mismatch".into()));
        }
        let mut data = Vec::with_capacity(count);
        for deg in &inst.degrees {
            let k = read_u32(&mut r)? as usize;
            let len = read_u64(&mut r)? as usize;
            if k != deg.k || len as u128 != super::sorted_count(n, k) {
                return Err(Error::Cache(format!("unexpected block for degree {k}")));
            }
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            data.push(
                bytes
                    .chunks_exact(8)
                    .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            );
        }
        inst.storage = Storage::Dense(data);
        Ok(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let spec = MixtureSpec::uniform(2, &[2, 3], 0.5, vec![0.0, 0.1]).unwrap();
        let h = HamiltonianInstance::<f64>::sample(&spec, 20, 5, Default::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("spinamp-cache-{}", std::process::id()));
        h.save_cache(&dir).unwrap();
        let back = HamiltonianInstance::<f64>::load_cache(&spec, 20, 5, Default::default(), &dir).unwrap();
        assert_eq!(back.folded(3), h.folded(3));
        assert!(HamiltonianInstance::<f64>::load_cache(&spec, 20, 6, Default::default(), &dir).is_err());
        std::fs::remove_file(&dir).unwrap();
    }
}

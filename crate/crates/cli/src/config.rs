use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spinamp::amp::{OnsagerMode, SignPattern, Stage1Config, Stage2Config, TreeSpec};
use spinamp::hamiltonian::{HamiltonianConfig, StorageMode};
use spinamp::mixture::{MixtureJson, MixtureSpec};
use spinamp::pseudomax::PhiConfig;

use crate::error::{CliError, Result};
use crate::tolerances::Tolerances;

/// A mixture given by file or written out in place.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Path(PathBuf),
    Inline(MixtureJson),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: Option<SpecSource>,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub ell_lower: usize,
    /// Grid intervals for Φ.
    pub grid: usize,
    pub k_max: usize,
    pub onsager: OnsagerMode,
    /// Stage-I sign patterns; all-plus when empty.
    pub signs: Vec<SignPattern>,
    /// Saved pseudo-maximizer; solved from the spec when absent.
    pub phi: Option<PathBuf>,
    pub tree: Option<TreeSpec>,
    /// Run Stage II as part of validation (sub-solvable specs only).
    pub stage2: bool,
    pub compact: bool,
    /// Hold branching leaves at their predicted Gram matrix every step.
    pub match_overlaps: bool,
    pub storage: StorageMode,
    pub budget_bytes: u128,
    /// Drops the Stage-I Onsager term. Ablation hook, never on by default.
    pub zero_onsager: bool,
    pub tolerances: Tolerances,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            spec: None,
            n: 2000,
            seeds: vec![0],
            ell_lower: 40,
            grid: 400,
            k_max: 25,
            onsager: OnsagerMode::default(),
            signs: Vec::new(),
            phi: None,
            tree: None,
            stage2: true,
            compact: false,
            match_overlaps: false,
            storage: StorageMode::Auto,
            budget_bytes: HamiltonianConfig::default().budget_bytes,
            zero_onsager: false,
            tolerances: Tolerances::default(),
            out: None,
        }
    }
}

#[derive(Deserialize)]
struct Envelope {
    config: ExperimentConfig,
}

fn ensure_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

impl ExperimentConfig {
    /// Reads a config file, or the config embedded in a previous report.
    pub fn load(path: &Path) -> Result<Self> {
        ensure_file(path)?;
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("config").is_some() && value.get("checks").is_some() {
            Ok(serde_json::from_value::<Envelope>(value)?.config)
        } else {
            Ok(serde_json::from_value(value)?)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(2..=1_000_000).contains(&self.n) {
            return bad(format!("N = {} outside 2..=1000000", self.n));
        }
        if !(1..=100_000).contains(&self.ell_lower) {
            return bad(format!("ell = {} outside 1..=100000", self.ell_lower));
        }
        if self.grid < 2 || self.grid % 2 == 1 || self.grid > 1_000_000 {
            return bad(format!("grid = {} must be even and in 2..=1000000", self.grid));
        }
        if !(1..=100_000).contains(&self.k_max) {
            return bad(format!("k_max = {} outside 1..=100000", self.k_max));
        }
        let t = &self.tolerances;
        let all = [
            t.se_scale,
            t.inconclusive_above,
            t.stage1_energy_tol,
            t.stage1_criticality_tol,
            t.stage2_criticality_tol,
            t.alg_gap_tol,
            t.bm_covariance_tol,
            t.branch_overlap_tol,
            t.branch_distance_factor,
            t.phi_residual_tol,
            t.decomposition_tol,
            t.c_hat_tol,
        ];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("tolerances must be finite and nonnegative".into());
        }
        if let Some(SpecSource::Path(p)) = &self.spec {
            ensure_file(p)?;
        }
        if let Some(p) = &self.phi {
            ensure_file(p)?;
        }
        Ok(())
    }

    pub fn mixture(&self) -> Result<MixtureSpec<f64>> {
        let spec = match &self.spec {
            None => return Err(CliError::Config("no mixture given (use --spec)".into())),
            Some(SpecSource::Path(p)) => {
                ensure_file(p)?;
                MixtureSpec::load(p)?
            }
            Some(SpecSource::Inline(json)) => MixtureSpec::from_json_value(json)?,
        };
        if let Some(bad) = self.signs.iter().find(|s| s.signs().len() != spec.r()) {
            return Err(CliError::Config(format!(
                "sign pattern {bad} has {} entries but the mixture has r = {}",
                bad.signs().len(),
                spec.r()
            )));
        }
        Ok(spec)
    }

    /// Replaces a spec path by its contents so the config replays anywhere.
    pub fn inlined(&self) -> Result<Self> {
        let mut out = self.clone();
        if let Some(SpecSource::Path(_)) = &self.spec {
            out.spec = Some(SpecSource::Inline(self.mixture()?.to_json()));
        }
        Ok(out)
    }

    pub fn sign_patterns(&self, r: usize) -> Vec<SignPattern> {
        if self.signs.is_empty() {
            vec![SignPattern::plus(r)]
        } else {
            self.signs.clone()
        }
    }

    pub fn hamiltonian(&self) -> HamiltonianConfig {
        HamiltonianConfig {
            budget_bytes: self.budget_bytes,
            storage: self.storage,
            compact: self.compact,
            ..HamiltonianConfig::default()
        }
    }

    pub fn phi_config(&self) -> PhiConfig {
        PhiConfig {
            grid: self.grid,
            residual_tol: self.tolerances.phi_residual_tol,
            ..PhiConfig::default()
        }
    }

    /// Stage-I steps actually run: Stage II starts from m^ℓ̲, so at least ℓ̲.
    pub fn stage1_steps(&self) -> usize {
        self.k_max.max(self.ell_lower)
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            k_max: self.stage1_steps(),
            zero_onsager: self.zero_onsager,
            ..Stage1Config::default()
        }
    }

    pub fn stage2(&self, seed: u64) -> Stage2Config {
        Stage2Config {
            onsager: self.onsager,
            match_overlaps: self.match_overlaps,
            ..Stage2Config::new(self.ell_lower, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_empty_seeds_and_odd_grid() {
        let cfg = ExperimentConfig {
            seeds: vec![],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let cfg = ExperimentConfig {
            grid: 41,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_spec_names_path() {
        let cfg = ExperimentConfig {
            spec: Some(SpecSource::Path("/nonexistent/pure3.json".into())),
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/pure3.json"), "{err}");
    }

    #[test]
    fn inline_round_trip() {
        let spec = MixtureSpec::pure(3, 0.0).unwrap();
        let cfg = ExperimentConfig {
            spec: Some(SpecSource::Inline(spec.to_json())),
            signs: vec!["+".parse().unwrap()],
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.mixture().unwrap(), spec);
        assert_eq!(back.signs, cfg.signs);
    }

    #[test]
    fn sign_length_checked() {
        let cfg = ExperimentConfig {
            spec: Some(SpecSource::Inline(MixtureSpec::pure(2, 1.0).unwrap().to_json())),
            signs: vec!["+-".parse().unwrap()],
            ..Default::default()
        };
        assert!(cfg.mixture().is_err());
    }
}

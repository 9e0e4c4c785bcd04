use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// |observed - expected| ≤ tolerance
    Within,
    /// observed ≥ expected - tolerance
    AtLeast,
    /// observed ≤ expected + tolerance
    AtMost,
}

/// One numeric comparison with the tolerance it was judged by.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub item: String,
    /// Which prediction the expected value comes from.
    pub anchor: String,
    pub comparison: Comparison,
    pub observed: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub tolerance_name: String,
    pub status: Status,
}

impl Check {
    pub fn new(
        item: impl Into<String>,
        anchor: &str,
        comparison: Comparison,
        observed: f64,
        expected: f64,
        tolerance: f64,
        tolerance_name: &str,
    ) -> Self {
        let ok = match comparison {
            Comparison::Within => (observed - expected).abs() <= tolerance,
            Comparison::AtLeast => observed >= expected - tolerance,
            Comparison::AtMost => observed <= expected + tolerance,
        };
        Self {
            item: item.into(),
            anchor: anchor.to_string(),
            comparison,
            observed,
            expected,
            tolerance,
            tolerance_name: tolerance_name.to_string(),
            status: if ok { Status::Pass } else { Status::Fail },
        }
    }

    /// Marks the check inconclusive when its tolerance is too loose to mean anything.
    pub fn inconclusive_above(mut self, cap: f64) -> Self {
        if self.tolerance > cap {
            self.status = Status::Inconclusive;
        }
        self
    }

    pub fn deviation(&self) -> f64 {
        self.observed - self.expected
    }
}

/// Results of one seed, keyed by quantity name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    pub predictions: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Wall-clock seconds per phase; not part of the replay contract.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(command: &str, config: ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config,
            seeds: Vec::new(),
            predictions: BTreeMap::new(),
            checks: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn count(&self, status: Status) -> usize {
        self.checks.iter().filter(|c| c.status == status).count()
    }

    pub fn passed(&self) -> bool {
        self.count(Status::Fail) == 0
    }

    pub fn check(&self, item: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.item == item)
    }

    /// Human-readable table of the checks.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.item.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>12}  {:>10}  status",
            "item", "observed", "expected", "tol"
        );
        for c in &self.checks {
            let status = match c.status {
                Status::Pass => "pass",
                Status::Fail => "FAIL",
                Status::Inconclusive => "inconclusive",
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.6}  {:>12.6}  {:>10.3e}  {status}",
                c.item, c.observed, c.expected, c.tolerance
            );
        }
        let _ = writeln!(
            out,
            "{} pass, {} fail, {} inconclusive",
            self.count(Status::Pass),
            self.count(Status::Fail),
            self.count(Status::Inconclusive)
        );
        out
    }
}

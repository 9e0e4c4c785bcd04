//! The `run` and `branch` pipelines and the pieces they share with validation.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use spinamp::amp::{
    branching_run, criticality_from_gradient, stage1_run, stage2_run, BranchRun, SignPattern, Stage1Run, Stage2Run,
};
use spinamp::hamiltonian::SpeciesLayout;
use spinamp::mixture::MixtureSpec;
use spinamp::pseudomax::{alg_value, PhiPath};
use spinamp::solvability::{classify, Classification, DEFAULT_TOL};
use spinamp::state_evolution::{a_of_q, a_signed, stage1_energy, IampSchedule};
use spinamp::Instance;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::report::{Check, Comparison, RunReport, SeedRecord};

/// Mixture, pseudo-maximizer and threshold, resolved once per command.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: MixtureSpec<f64>,
    /// None in the super-solvable regime.
    pub phi: Option<PhiPath>,
    pub alg: f64,
}

impl Model {
    pub fn resolve(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.mixture()?;
        let ones = vec![1.0; spec.r()];
        let sub = classify(&spec, &ones, DEFAULT_TOL)?.classification == Classification::StrictlySubSolvable;
        let alg = alg_value(&spec, &cfg.phi_config())?;
        let phi = match (&cfg.phi, sub) {
            (_, false) => None,
            (Some(path), true) => Some(read_phi(path)?),
            (None, true) => alg.phi.clone(),
        };
        let alg = match &phi {
            Some(p) if cfg.phi.is_some() => spinamp::pseudomax::alg_functional(&spec, p)?,
            _ => alg.value,
        };
        Ok(Self { spec, phi, alg })
    }

    pub fn phi_q1(&self) -> Vec<f64> {
        match &self.phi {
            Some(p) => p.phi_q1().to_vec(),
            None => vec![1.0; self.spec.r()],
        }
    }

    fn at_origin(&self) -> bool {
        self.phi_q1().iter().all(|&x| x == 0.0)
    }
}

/// Accepts a single path, a list of candidates (first wins) or an `alg` report.
pub fn read_phi(path: &Path) -> Result<PhiPath> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let value = match value {
        serde_json::Value::Array(mut items) if !items.is_empty() => items.swap_remove(0),
        serde_json::Value::Object(ref map) if map.contains_key("phi") && !map.contains_key("grid") => map["phi"].clone(),
        other => other,
    };
    Ok(serde_json::from_value(value)?)
}

pub fn sample(cfg: &ExperimentConfig, spec: &MixtureSpec<f64>, seed: u64) -> Result<Instance> {
    Ok(Instance::sample(spec, cfg.n, seed, cfg.hamiltonian())?)
}

/// Stage I for every configured pattern (one origin run when Φ(q1) = 0).
pub fn run_stage1(cfg: &ExperimentConfig, model: &Model, h: &Instance) -> Result<Vec<Stage1Run>> {
    if model.at_origin() {
        return Ok(vec![Stage1Run::origin(h, cfg.stage1_steps())]);
    }
    let patterns = cfg.sign_patterns(model.spec.r());
    Ok(stage1_run(h, &model.phi_q1(), &patterns, &cfg.stage1())?)
}

pub struct SeedOutcome {
    pub seed: u64,
    pub stage1: Vec<Stage1Run>,
    pub stage2: Option<(IampSchedule, Stage2Run)>,
    pub instance_seconds: f64,
    pub amp_seconds: f64,
}

pub fn run_seed(cfg: &ExperimentConfig, model: &Model, seed: u64, with_stage2: bool) -> Result<SeedOutcome> {
    let t0 = Instant::now();
    let h = sample(cfg, &model.spec, seed)?;
    let instance_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let stage1 = run_stage1(cfg, model, &h)?;
    let plus = SignPattern::plus(model.spec.r());
    let stage2 = match (&model.phi, with_stage2) {
        (Some(phi), true) => match stage1.iter().find(|r| r.delta == plus) {
            Some(root) => Some(stage2_run(&h, root, phi, &cfg.stage2(seed))?),
            None => None,
        },
        _ => None,
    };
    Ok(SeedOutcome {
        seed,
        stage1,
        stage2,
        instance_seconds,
        amp_seconds: t1.elapsed().as_secs_f64(),
    })
}

/// Fans seeds out over the pool; results come back sorted by seed.
pub fn run_seeds(cfg: &ExperimentConfig, model: &Model, with_stage2: bool) -> Result<Vec<SeedOutcome>> {
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    seeds.par_iter().map(|&s| run_seed(cfg, model, s, with_stage2)).collect()
}

fn species_series(rows: &[Vec<f64>], s: usize) -> Vec<f64> {
    rows.iter().map(|row| row[s]).collect()
}

/// Runs the full algorithm per seed and checks energy and criticality.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let model = Model::resolve(cfg)?;
    let spec = &model.spec;
    let r = spec.r();
    let tol = &cfg.tolerances;
    let mut report = RunReport::new("run", cfg.inlined()?);
    report.predictions.insert("alg".into(), model.alg);
    let q1 = model.phi_q1();
    let origin = model.at_origin();
    let layout = SpeciesLayout::build(cfg.n, spec.lambda())?;
    for p in cfg.sign_patterns(r) {
        report
            .predictions
            .insert(format!("stage1_energy[{p}]"), stage1_energy(spec, &q1, &p)?);
    }
    let t0 = Instant::now();
    let outcomes = run_seeds(cfg, &model, true)?;
    report.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    for out in &outcomes {
        let mut rec = SeedRecord {
            seed: out.seed,
            ..Default::default()
        };
        report.timings.insert(format!("seed{}.instance", out.seed), out.instance_seconds);
        report.timings.insert(format!("seed{}.amp", out.seed), out.amp_seconds);
        for run in &out.stage1 {
            let p = &run.delta;
            let energy = run.energy[cfg.k_max];
            rec.values.insert(format!("stage1_energy[{p}]"), energy);
            rec.series.insert(format!("stage1_energy[{p}]"), run.energy.clone());
            if origin {
                continue;
            }
            report.checks.push(Check::new(
                format!("seed{}.stage1_energy[{p}]", out.seed),
                "stage1-energy",
                Comparison::Within,
                energy,
                stage1_energy(spec, &q1, p)?,
                tol.stage1_energy_tol,
                "stage1_energy_tol",
            ));
            if let Ok(a) = a_signed(spec, &q1, p) {
                let crit = criticality_from_gradient(&layout, &run.final_gradient, run.last(), &a);
                rec.values.insert(format!("stage1_criticality[{p}]"), crit);
                report.checks.push(Check::new(
                    format!("seed{}.stage1_criticality[{p}]", out.seed),
                    "stage1-criticality",
                    Comparison::AtMost,
                    crit,
                    0.0,
                    tol.stage1_criticality_tol,
                    "stage1_criticality_tol",
                ));
            }
        }
        let (final_energy, output_energy) = match (&out.stage2, &model.phi) {
            (Some((_, run)), Some(phi)) => {
                let a1 = a_of_q(spec, phi, 1.0)?;
                let crit = criticality_from_gradient(&layout, &run.final_gradient, run.last(), &a1);
                rec.values.insert("stage2_criticality".into(), crit);
                rec.values.insert("rounding_distance".into(), run.rounding_distance);
                rec.series.insert("stage2_energy".into(), run.energy.clone());
                for s in 0..r {
                    rec.series
                        .insert(format!("stage2_self_overlap[{s}]"), species_series(&run.self_overlap, s));
                }
                report.checks.push(Check::new(
                    format!("seed{}.stage2_criticality", out.seed),
                    "stage2-criticality",
                    Comparison::AtMost,
                    crit,
                    0.0,
                    tol.stage2_criticality_tol,
                    "stage2_criticality_tol",
                ));
                (run.final_energy(), run.output_energy)
            }
            _ => {
                let plus = out.stage1.iter().find(|r| r.delta == SignPattern::plus(r.delta.signs().len()));
                let e = plus.map(|r| r.energy[cfg.k_max]).unwrap_or(f64::NAN);
                (e, e)
            }
        };
        rec.values.insert("final_energy".into(), final_energy);
        rec.values.insert("output_energy".into(), output_energy);
        if cfg.signs.is_empty() || cfg.signs.contains(&SignPattern::plus(r)) {
            report.checks.push(Check::new(
                format!("seed{}.output_energy", out.seed),
                "alg-threshold",
                Comparison::AtLeast,
                output_energy,
                model.alg,
                tol.alg_gap_tol,
                "alg_gap_tol",
            ));
        }
        report.seeds.push(rec);
    }
    if let Some(dir) = &cfg.out {
        write_traces(dir, &outcomes, r)?;
    }
    Ok(report)
}

/// Writes one CSV per seed and phase: iteration, energy, then per-species overlaps.
pub fn write_traces(dir: &Path, outcomes: &[SeedOutcome], r: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for out in outcomes {
        for run in &out.stage1 {
            let name = run.delta.to_string().replace('+', "p").replace('-', "m");
            let mut w = csv::Writer::from_path(dir.join(format!("stage1_seed{}_{name}.csv", out.seed))).map_err(csv_err)?;
            let mut header = vec!["k".to_string(), "energy".into()];
            header.extend((0..r).map(|s| format!("self_overlap_{s}")));
            header.extend((0..r).map(|s| format!("cross_overlap_{s}")));
            w.write_record(&header).map_err(csv_err)?;
            for k in 0..run.energy.len() {
                let mut row = vec![k.to_string(), run.energy[k].to_string()];
                row.extend(run.self_overlap[k].iter().map(|x| x.to_string()));
                let cross = if k > 0 { run.cross_overlap[k - 1].clone() } else { vec![f64::NAN; r] };
                row.extend(cross.iter().map(|x| x.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush()?;
        }
        if let Some((schedule, run)) = &out.stage2 {
            let mut w = csv::Writer::from_path(dir.join(format!("stage2_seed{}.csv", out.seed))).map_err(csv_err)?;
            let mut header = vec!["ell".to_string(), "q".into(), "energy".into()];
            header.extend((0..r).map(|s| format!("self_overlap_{s}")));
            w.write_record(&header).map_err(csv_err)?;
            for (i, e) in run.energy.iter().enumerate() {
                let ell = schedule.ell_lower + i;
                let mut row = vec![ell.to_string(), schedule.q_at(ell).to_string(), e.to_string()];
                row.extend(run.self_overlap[i].iter().map(|x| x.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

/// Writes R_s between leaves as one square CSV per species.
pub fn write_overlap_matrix(dir: &Path, seed: u64, run: &BranchRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let labels: Vec<String> = run
        .leaves
        .iter()
        .map(|l| l.leaf.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("."))
        .collect();
    for (s, matrix) in run.overlaps.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("overlaps_seed{seed}_species{s}.csv"))).map_err(csv_err)?;
        let mut header = vec!["leaf".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (label, row) in labels.iter().zip(matrix) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Branching IAMP per seed, checking leaf overlaps and separation.
pub fn branch(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let tree = cfg
        .tree
        .clone()
        .ok_or_else(|| CliError::Config("branch needs a tree (use --tree)".into()))?;
    let model = Model::resolve(cfg)?;
    let phi = model
        .phi
        .clone()
        .ok_or_else(|| CliError::Config("branching needs a strictly sub-solvable mixture".into()))?;
    let tol = &cfg.tolerances;
    let mut report = RunReport::new("branch", cfg.inlined()?);
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let q2 = tree.depths[0];
    let min_distance = tol.branch_distance_factor * (1.0 - q2).sqrt();
    report.predictions.insert("min_leaf_distance".into(), min_distance);
    for seed in seeds {
        let t0 = Instant::now();
        let h = sample(cfg, &model.spec, seed)?;
        let root = run_stage1(cfg, &model, &h)?
            .into_iter()
            .find(|r| r.delta == SignPattern::plus(model.spec.r()))
            .ok_or_else(|| CliError::Config("branching descends from the all-plus Stage-I run".into()))?;
        let run = branching_run(&h, &root, &phi, &cfg.stage2(seed), &tree)?;
        report.timings.insert(format!("seed{seed}"), t0.elapsed().as_secs_f64());
        let mut worst: f64 = 0.0;
        let mut closest = f64::INFINITY;
        for s in 0..run.overlaps.len() {
            for i in 0..run.leaves.len() {
                for j in 0..run.leaves.len() {
                    worst = worst.max((run.overlaps[s][i][j] - run.predicted[s][i][j]).abs());
                    if i != j {
                        closest = closest.min(run.distances[i][j]);
                    }
                }
            }
        }
        let mut rec = SeedRecord {
            seed,
            ..Default::default()
        };
        rec.values.insert("worst_overlap_deviation".into(), worst);
        rec.values.insert("min_leaf_distance".into(), closest);
        rec.series.insert(
            "leaf_output_energy".into(),
            run.leaves.iter().map(|l| l.output_energy).collect(),
        );
        report.checks.push(Check::new(
            format!("seed{seed}.leaf_overlaps"),
            "branching-overlaps",
            Comparison::AtMost,
            worst,
            0.0,
            tol.branch_overlap_tol,
            "branch_overlap_tol",
        ));
        if run.leaves.len() > 1 {
            report.checks.push(Check::new(
                format!("seed{seed}.leaf_separation"),
                "branching-separation",
                Comparison::AtLeast,
                closest,
                min_distance,
                0.0,
                "branch_distance_factor",
            ));
        }
        if let Some(dir) = &cfg.out {
            write_overlap_matrix(dir, seed, &run)?;
        }
        report.seeds.push(rec);
    }
    Ok(report)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spinamp::amp::{OnsagerMode, SignPattern, TreeSpec};
use spinamp::pseudomax::{alg_functional, alg_value, solve_phi, verify_pseudomaximizer};
use spinamp::solvability::classify;
use spinamp::state_evolution::predict;
use spinamp_cli::pipeline::{self, read_phi, Model};
use spinamp_cli::{validate_se, CliError, ExperimentConfig, Result, RunReport, SpecSource};

/// Stdout writes that tolerate a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn say_raw(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

#[derive(Parser)]
#[command(name = "spinamp", version, about = "AMP optimization of multi-species spherical spin glasses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Mixture JSON file.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Experiment config, or a previous report to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, alias = "seed", global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, global = true, env = "SPINAMP_THREADS")]
    threads: Option<usize>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Directory for reports and CSV traces.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long = "N", alias = "n", global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    ell: Option<usize>,
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true)]
    k_max: Option<usize>,
    /// Stage-I sign pattern such as "+-"; repeatable.
    #[arg(long = "sign", global = true, allow_hyphen_values = true)]
    signs: Vec<SignPattern>,
    /// "se" or "empirical".
    #[arg(long, global = true)]
    onsager: Option<OnsagerMode>,
    /// Saved pseudo-maximizer JSON.
    #[arg(long, global = true)]
    phi: Option<PathBuf>,
    /// Store coefficients as f32.
    #[arg(long, global = true)]
    compact: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a point x ∈ (0,∞)^r as super-, strictly sub- or solvable.
    Classify {
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<f64>,
        #[arg(long, default_value_t = spinamp::solvability::DEFAULT_TOL)]
        tol: f64,
    },
    /// The algorithmic threshold ALG.
    Alg,
    /// Solve for or verify pseudo-maximizers.
    Phi {
        #[command(subcommand)]
        action: PhiAction,
    },
    /// State-evolution predictions.
    Predict,
    /// Run the algorithm on sampled instances.
    Run,
    /// Branching IAMP on a tree.
    Branch {
        /// Tree JSON: {"depths": [...], "branching": K}.
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Compare empirical moments with the state-evolution tables.
    ValidateSe,
}

#[derive(Subcommand)]
enum PhiAction {
    Solve,
    Verify,
}

fn build_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &g.spec {
        cfg.spec = Some(SpecSource::Path(p.clone()));
    }
    if !g.seeds.is_empty() {
        cfg.seeds = g.seeds.clone();
    }
    if let Some(n) = g.n {
        cfg.n = n;
    }
    if let Some(ell) = g.ell {
        cfg.ell_lower = ell;
    }
    if let Some(grid) = g.grid {
        cfg.grid = grid;
    }
    if let Some(k) = g.k_max {
        cfg.k_max = k;
    }
    if !g.signs.is_empty() {
        cfg.signs = g.signs.clone();
    }
    if let Some(mode) = g.onsager {
        cfg.onsager = mode;
    }
    if let Some(p) = &g.phi {
        cfg.phi = Some(p.clone());
    }
    if g.compact {
        cfg.compact = true;
    }
    if let Some(out) = &g.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(dir: Option<&Path>, name: &str, value: &T) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    say!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn emit(report: &RunReport, json: bool) -> Result<ExitCode> {
    write_json(report.config.out.as_deref(), "report.json", report)?;
    if json {
        print_json(report)?;
    } else {
        say_raw(&report.table());
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut cfg = build_config(g)?;
    match cli.command {
        Command::Classify { x, tol } => {
            let spec = cfg.mixture()?;
            let report = classify(&spec, &x, tol)?;
            if g.json {
                print_json(&report)?;
            } else {
                say!("{:?}", report.classification);
            }
        }
        Command::Alg => {
            let spec = cfg.mixture()?;
            let result = alg_value(&spec, &cfg.phi_config())?;
            write_json(cfg.out.as_deref(), "alg.json", &result)?;
            let summary = serde_json::json!({ "value": result.value, "regime": result.regime });
            if g.json {
                print_json(&summary)?;
            } else {
                say!("{summary}");
            }
        }
        Command::Phi { action: PhiAction::Solve } => {
            let spec = cfg.mixture()?;
            let mut paths = solve_phi(&spec, &cfg.phi_config())?;
            for p in &mut paths {
                p.residuals = Some(verify_pseudomaximizer(&spec, p));
            }
            write_json(cfg.out.as_deref(), "phi.json", &paths)?;
            if g.json {
                print_json(&paths)?;
            } else {
                for (i, p) in paths.iter().enumerate() {
                    say!(
                        "candidate {i}: q1 = {:.6}, Φ(q1) = {:?}, value = {:.8}, worst residual = {:.2e}",
                        p.q1,
                        p.phi_q1(),
                        alg_functional(&spec, p)?,
                        p.residuals.map_or(f64::NAN, |r| r.worst())
                    );
                }
            }
        }
        Command::Phi { action: PhiAction::Verify } => {
            let spec = cfg.mixture()?;
            let path = cfg
                .phi
                .as_deref()
                .ok_or_else(|| CliError::Config("phi verify needs --phi".into()))?;
            let phi = read_phi(path)?;
            let residuals = verify_pseudomaximizer(&spec, &phi);
            let ok = residuals.passes(cfg.tolerances.phi_residual_tol);
            if g.json {
                print_json(&serde_json::json!({ "residuals": residuals, "pass": ok }))?;
            } else {
                say!("{residuals:?}");
                say!("{}", if ok { "pass" } else { "FAIL" });
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Predict => {
            let model = Model::resolve(&cfg)?;
            let prediction = predict(&model.spec, model.phi.as_ref(), cfg.ell_lower)?;
            write_json(cfg.out.as_deref(), "prediction.json", &prediction)?;
            if g.json {
                print_json(&prediction)?;
            } else {
                say!("ALG = {:.8}", model.alg);
                for (p, e) in &prediction.stage1_energy {
                    say!("stage I energy [{p}] = {e:.8}");
                }
                say!("IAMP energy = {:.8}", prediction.iamp_energy);
                say!("total = {:.8}", prediction.total_energy);
            }
        }
        Command::Run => return emit(&pipeline::run(&cfg)?, g.json),
        Command::Branch { tree } => {
            if let Some(path) = tree {
                if !path.is_file() {
                    return Err(CliError::MissingFile(path));
                }
                let spec: TreeSpec = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                cfg.tree = Some(spec);
            }
            return emit(&pipeline::branch(&cfg)?, g.json);
        }
        Command::ValidateSe => return emit(&validate_se(&cfg)?, g.json),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

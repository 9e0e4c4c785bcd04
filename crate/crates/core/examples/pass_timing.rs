//! Times one contraction pass on pure 3-spin:
//! `cargo run --release --example pass_timing -- N B [streamed|compact]`.

use std::time::Instant;

use spinamp::hamiltonian::{HamiltonianConfig, HamiltonianInstance, StorageMode};
use spinamp::mixture::MixtureSpec;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(1500, |a| a.parse().unwrap());
    let b: usize = args.get(1).map_or(1, |a| a.parse().unwrap());
    let cfg = match args.get(2).map(String::as_str) {
        Some("compact") => HamiltonianConfig {
            storage: StorageMode::Materialized,
            compact: true,
            budget_bytes: 3 << 30,
            ..Default::default()
        },
        _ => HamiltonianConfig { storage: StorageMode::Streamed, ..Default::default() },
    };
    let spec = MixtureSpec::pure(3, 0.0).unwrap();
    let t = Instant::now();
    let h = HamiltonianInstance::<f64>::sample(&spec, n, 1, cfg).unwrap();
    println!("sample: {:.2}s", t.elapsed().as_secs_f64());
    let pts: Vec<Vec<f64>> = (0..b).map(|j| (0..n).map(|i| ((i + j) as f64).sin()).collect()).collect();
    let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
    for _ in 0..2 {
        let t = Instant::now();
        let e = h.evaluate_batch(&refs).unwrap();
        println!("N={n} B={b}: {:.2}s (energy {:.4})", t.elapsed().as_secs_f64(), e[0].energy / n as f64);
    }
}

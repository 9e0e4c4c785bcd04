//! Small end-to-end runs: Stage I, Stage II, branching and derivative checks.

use spinamp::amp::{
    branching_run, criticality_residual, stage1_run, stage2_run, SignPattern, Stage1Config, Stage1Run, Stage2Config,
    TreeSpec,
};
use spinamp::hamiltonian::HamiltonianConfig;
use spinamp::mixture::MixtureSpec;
use spinamp::pseudomax::PhiPath;
use spinamp::state_evolution::{a_signed, stage1_energy};
use spinamp::Instance;

fn pure3(n: usize, seed: u64) -> (MixtureSpec<f64>, Instance) {
    let spec = MixtureSpec::pure(3, 0.0).unwrap();
    let h = Instance::sample(&spec, n, seed, HamiltonianConfig::default()).unwrap();
    (spec, h)
}

#[test]
fn gradient_matches_finite_differences() {
    let spec = MixtureSpec::uniform(2, &[2, 3], 0.3, vec![1.5, 2.0]).unwrap();
    let h = Instance::sample(&spec, 40, 9, HamiltonianConfig::default()).unwrap();
    let x: Vec<f64> = (0..40).map(|i| ((i as f64) * 0.31).cos()).collect();
    let g = h.gradient(&x).unwrap();
    let eps = 1e-5;
    for i in 0..40 {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += eps;
        b[i] -= eps;
        let fd = (h.energy(&a).unwrap() - h.energy(&b).unwrap()) / (2.0 * eps);
        assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "coordinate {i}");
    }
}

#[test]
fn stage1_energy_tracks_prediction_super_solvable() {
    let spec = MixtureSpec::pure(2, 3.0).unwrap();
    let q1 = [1.0];
    let mut mean = 0.0;
    for seed in 0..4 {
        let h = Instance::sample(&spec, 800, seed, HamiltonianConfig::default()).unwrap();
        let run = stage1_run(&h, &q1, &[SignPattern::plus(1)], &Stage1Config::default()).unwrap();
        mean += run[0].energy.last().unwrap() / 4.0;
        let a = a_signed(&spec, &q1, &SignPattern::plus(1)).unwrap();
        assert!(criticality_residual(&h, run[0].last(), &a).unwrap() < 0.2);
    }
    let expected = stage1_energy(&spec, &q1, &SignPattern::plus(1)).unwrap();
    assert!((mean - expected).abs() < 0.1, "{mean} vs {expected}");
}

#[test]
fn stage2_reaches_near_threshold() {
    let (spec, h) = pure3(300, 2);
    let phi = PhiPath::identity(&spec, 0.0, 400);
    let root = Stage1Run::origin(&h, 20);
    let (schedule, run) = stage2_run(&h, &root, &phi, &Stage2Config::new(20, 2)).unwrap();
    assert_eq!(run.z.len(), run.n.len());
    assert!(schedule.ell_lower == 20);
    let alg = 2.0 * (2.0f64 / 3.0).sqrt();
    assert!(run.output_energy > alg - 0.25, "{}", run.output_energy);
    let last = run.self_overlap.last().unwrap()[0];
    assert!((last - 1.0).abs() < 0.1, "{last}");
}

fn branch(match_overlaps: bool) -> spinamp::amp::BranchRun {
    let (spec, h) = pure3(300, 5);
    let phi = PhiPath::identity(&spec, 0.0, 400);
    let root = Stage1Run::origin(&h, 20);
    let tree = TreeSpec::new(vec![0.4, 0.7, 1.0], 2);
    let cfg = Stage2Config {
        match_overlaps,
        ..Stage2Config::new(20, 5)
    };
    branching_run(&h, &root, &phi, &cfg, &tree).unwrap()
}

#[test]
fn branching_siblings_stay_closer_than_cousins() {
    let run = branch(false);
    assert_eq!(run.leaves.len(), 4);
    let ov = &run.overlaps[0];
    let siblings = (ov[0][1] + ov[2][3]) / 2.0;
    let cousins = (ov[0][2] + ov[0][3] + ov[1][2] + ov[1][3]) / 4.0;
    assert!(siblings > cousins, "{siblings} vs {cousins}");
    for i in 0..4 {
        assert!((ov[i][i] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn matched_branching_hits_tree_overlaps() {
    let run = branch(true);
    for i in 0..4 {
        for j in 0..4 {
            let dev = (run.overlaps[0][i][j] - run.predicted[0][i][j]).abs();
            assert!(dev < 0.05, "leaves {i},{j}: {dev}");
        }
    }
}

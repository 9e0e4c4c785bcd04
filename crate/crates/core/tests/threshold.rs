//! Closed forms for the algorithmic threshold and the energy decomposition.

use spinamp::amp::SignPattern;
use spinamp::mixture::MixtureSpec;
use spinamp::pseudomax::{alg_functional, alg_value, solve_phi, verify_pseudomaximizer, PhiConfig, PhiPath, Regime};
use spinamp::state_evolution::{c_hat, c_hat_spread, iamp_energy, iterate_overlaps, stage1_energy};

#[test]
fn pure_two_spin_is_sqrt_two() {
    let got = alg_value(&MixtureSpec::pure(2, 0.0).unwrap(), &PhiConfig::default()).unwrap();
    assert!((got.value - 2f64.sqrt()).abs() < 1e-6, "{}", got.value);
}

#[test]
fn pure_p_spin_matches_ground_state() {
    for p in 3..=5 {
        let got = alg_value(&MixtureSpec::pure(p, 0.0).unwrap(), &PhiConfig::default()).unwrap();
        // ∫_0^1 √ξ''(q) dq = 2√((p-1)/p) for ξ = x^p
        let exact = 2.0 * ((p - 1) as f64 / p as f64).sqrt();
        assert!((got.value - exact).abs() < 1e-5, "p = {p}: {}", got.value);
    }
}

#[test]
fn super_solvable_formula() {
    for h in [1.0f64, 2.0, 3.0] {
        let got = alg_value(&MixtureSpec::pure(2, h).unwrap(), &PhiConfig::default()).unwrap();
        assert_eq!(got.regime, Regime::SuperSolvable);
        // √(ξ'(1) + h²) for ξ = x²
        assert!((got.value - (2.0 + h * h).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn decomposition_on_identity_paths() {
    for p in [3usize, 4] {
        let spec = MixtureSpec::pure(p, 0.0).unwrap();
        let path = PhiPath::identity(&spec, 0.0, 400);
        let total = stage1_energy(&spec, path.phi_q1(), &SignPattern::plus(1)).unwrap() + iamp_energy(&spec, &path).unwrap();
        assert!((alg_functional(&spec, &path).unwrap() - total).abs() < 1e-8);
        assert!(c_hat_spread(&c_hat(&spec, &path)) < 1e-4);
    }
}

#[test]
fn solved_paths_verify_and_decompose() {
    let specs = [
        MixtureSpec::uniform(2, &[2, 3], 0.3, vec![0.0; 2]).unwrap(),
        MixtureSpec::uniform(2, &[2, 3], 0.3, vec![0.2, 0.3]).unwrap(),
        MixtureSpec::single_species(&[(2, 0.3), (3, 0.7)], 0.2).unwrap(),
    ];
    for spec in &specs {
        let paths = solve_phi(spec, &PhiConfig::default()).unwrap();
        assert!(!paths.is_empty());
        for path in &paths {
            assert!(verify_pseudomaximizer(spec, path).passes(1e-6));
            let total = stage1_energy(spec, path.phi_q1(), &SignPattern::plus(spec.r())).unwrap()
                + iamp_energy(spec, path).unwrap();
            assert!((alg_functional(spec, path).unwrap() - total).abs() < 1e-8);
        }
    }
}

#[test]
fn overlap_recursion_converges_monotonically() {
    for h in [0.5f64, 1.0, 3.0] {
        let spec = MixtureSpec::pure(2, h).unwrap();
        let rec = iterate_overlaps(&spec, &[1.0], 500, 1e-12).unwrap();
        assert!(rec.iterates.len() <= 501);
        assert!(rec.distance < 1e-10, "h = {h}: {}", rec.distance);
        assert!(rec.iterates.windows(2).all(|w| w[1][0] >= w[0][0]));
    }
}

mod common;

use common::*;
use cslq::alm::{self, AlmConfig, Reference, StepSchedule, Verdict};
use cslq::oracle;
use cslq::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reference(tree: &cslq::ScenarioTree, data: &cslq::ProblemData) -> Reference {
    let kkt = oracle::kkt_solve(tree, data).unwrap();
    Reference { control: kkt.control, multiplier: kkt.multiplier }
}

#[test]
fn converges_to_the_oracle_pair() {
    for seed in [0, 2, 5, 7] {
        let (tree, data) = random(seed);
        let mut cfg = AlmConfig::for_instance(&data);
        cfg.reference = Some(reference(&tree, &data));
        let report = alm::alm_solve(&tree, &data, &cfg).unwrap();
        assert_eq!(report.verdict, Verdict::Converged, "seed {seed}");
        let last = report.iterations.last().unwrap();
        assert!(last.control_distance.unwrap() < 1e-7, "seed {seed}");
        assert!(last.multiplier_distance.unwrap() < 1e-6, "seed {seed}");
    }
}

#[test]
fn ramp_schedule_also_converges() {
    let (tree, data) = random(3);
    let mut cfg = AlmConfig::for_instance(&data);
    cfg.schedule = Some(StepSchedule::Ramp { start: 0.2 * cfg.rho, end: 1.8 * cfg.rho, iterations: 20 });
    let report = alm::alm_solve(&tree, &data, &cfg).unwrap();
    assert!(report.converged());
    assert!((report.iterations[0].step - 0.2 * cfg.rho).abs() < 1e-12);
}

#[test]
fn multiplier_distance_never_increases() {
    for seed in [1, 4, 6] {
        let (tree, data) = random(seed);
        let mut cfg = AlmConfig::for_instance(&data);
        cfg.reference = Some(reference(&tree, &data));
        let report = alm::alm_solve(&tree, &data, &cfg).unwrap();
        let mut prev = report.initial_multiplier_distance.unwrap();
        for rec in &report.iterations {
            let cur = rec.multiplier_distance.unwrap();
            assert!(cur * cur <= prev * prev + 1e-12, "seed {seed} k {}", rec.k);
            prev = cur;
        }
    }
}

#[test]
fn vacuous_constraint_stops_after_one_iteration() {
    let (tree, mut data) = random(2);
    data.m = data.m.map(|_, m| m * 0.0);
    data.target = data.target.map(|_, b| b * 0.0);
    let report = alm::alm_solve(&tree, &data, &AlmConfig::for_instance(&data)).unwrap();
    assert_eq!(report.iterations.len(), 1);
    assert!(report.converged());
    let q = cost_quadratic(&tree, &data);
    assert!(rel(&report.final_control.flatten(), &q.minimizer()) < 1e-9);
}

#[test]
fn refuses_uncertified_instances() {
    let (tree, mut data) = random(0);
    data.b = data.b.map(|_, b| b * 0.0);
    data.d = data.d.map(|_, d| d * 0.0);
    assert!(matches!(alm::alm_solve(&tree, &data, &AlmConfig::for_instance(&data)), Err(Error::NotSurjective(_))));

    let (tree, mut data) = random(0);
    data.r = data.r.map(|_, r| r * 0.0);
    data.q = data.q.map(|_, q| q * 0.0);
    data.g = data.g.map(|_, g| g * 0.0);
    assert!(matches!(alm::alm_solve(&tree, &data, &AlmConfig::for_instance(&data)), Err(Error::NotUniformlyConvex(_))));
}

#[test]
fn step_above_twice_rho_is_rejected() {
    let (tree, data) = random(0);
    let mut cfg = AlmConfig::new(1.0);
    cfg.schedule = Some(StepSchedule::Constant(3.0));
    let err = alm::alm_solve(&tree, &data, &cfg).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn saddle_check_separates_oracle_pair_from_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in [0, 3] {
        let (tree, data) = random(seed);
        let r = reference(&tree, &data);
        for &rho in &[0.1, 1.0, 10.0] {
            let good = alm::saddle_point_check(&tree, &data, &r.control, &r.multiplier, rho, 16, &mut rng).unwrap();
            assert!(good.is_saddle, "seed {seed} rho {rho}: {good:?}");
            let bumped_u = r.control.axpy(1e-3, &random_control(&tree, &data, &mut rng));
            let bad = alm::saddle_point_check(&tree, &data, &bumped_u, &r.multiplier, rho, 16, &mut rng).unwrap();
            assert!(!bad.is_saddle);
            let bumped_l = r.multiplier.axpy(1e-3, &random_multiplier(&tree, &data, &mut rng));
            let bad = alm::saddle_point_check(&tree, &data, &r.control, &bumped_l, rho, 16, &mut rng).unwrap();
            assert!(!bad.is_saddle);
        }
    }
}

#[test]
fn first_order_residual_vanishes_at_subproblem_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (tree, data) = random(5);
    for &rho in &[0.3, 4.0] {
        let lambda = random_multiplier(&tree, &data, &mut rng);
        let (u, _) = cslq::riccati::solve_subproblem(&tree, &data, &lambda, rho).unwrap();
        assert!(alm::first_order_residual(&tree, &data, &u, &lambda, rho).unwrap() < 1e-9);
    }
}

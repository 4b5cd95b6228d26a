mod common;

use bpsim_core::phy::{objective_at, objective_from_link_powers};
use bpsim_core::power::{kkt_check, project_simplex, solve_topc};
use bpsim_core::{PowerState, SolverConfig};
use common::{random_model, random_power, random_weights, rel_err, two_link, two_link_grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact projection by enumerating every free set and keeping the best
/// feasible closed-form candidate.
fn projection_oracle(t: &[f64], q: &[f64], floor: f64) -> Vec<f64> {
    let n = t.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|&j| mask & (1 << j) != 0).collect();
        let fixed = (n - free.len()) as f64 * floor;
        let tau = (1.0 - fixed - free.iter().map(|&j| t[j]).sum::<f64>()) / free.iter().map(|&j| 1.0 / q[j]).sum::<f64>();
        let x: Vec<f64> = (0..n).map(|j| if mask & (1 << j) != 0 { t[j] + tau / q[j] } else { floor }).collect();
        if x.iter().any(|&v| v < floor - 1e-12) {
            continue;
        }
        let cost: f64 = (0..n).map(|j| q[j] * (x[j] - t[j]).powi(2)).sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, x));
        }
    }
    best.unwrap().1
}

#[test]
fn projection_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..500 {
        let n = rng.random_range(1..=6);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect();
        let floor = if rng.random::<bool>() { 0.0 } else { 1e-3 };
        let x = project_simplex(&t, &q, floor).unwrap();
        let y = projection_oracle(&t, &q, floor);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9, "{x:?} vs {y:?}");
        }
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn projection_rejects_infeasible_floor() {
    assert!(project_simplex(&[0.5, 0.5], &[1.0, 1.0], 0.6).is_err());
    assert_eq!(project_simplex::<f64>(&[], &[], 0.0).unwrap(), Vec::<f64>::new());
}

#[test]
fn two_link_solver_matches_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..6 {
        let (m, w) = two_link(&mut rng);
        let (power, diag) = solve_topc(&m, &w, &PowerState::uniform(&m), &SolverConfig::default()).unwrap();
        let (grid, _, _) = two_link_grid(&m, &w, 0);
        let f = objective_at(&m, &w, &power).unwrap();
        assert!(diag.converged);
        assert!(f >= grid - 1e-9 * grid.abs());
        assert!(rel_err(f, grid, 1e-12) < 1e-3);
    }
}

#[test]
fn objective_is_concave_in_log_powers() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..40 {
        let n = rng.random_range(3..=7);
        let m = random_model(&mut rng, n, None);
        let w = random_weights(&mut rng, m.link_count());
        let a = random_power(&mut rng, &m, &w).link_powers(&m);
        let b = random_power(&mut rng, &m, &w).link_powers(&m);
        let mix = |s: f64| -> Vec<f64> {
            a.iter()
                .zip(&b)
                .map(|(&x, &y)| if x > 0.0 { (x.ln() * (1.0 - s) + y.ln() * s).exp() } else { 0.0 })
                .collect()
        };
        let fa = objective_from_link_powers(&m, &w, &a);
        let fb = objective_from_link_powers(&m, &w, &b);
        for s in [0.25, 0.5, 0.75] {
            let fm = objective_from_link_powers(&m, &w, &mix(s));
            assert!(fm >= (1.0 - s) * fa + s * fb - 1e-9 * fm.abs().max(1.0));
        }
    }
}

#[test]
fn solution_does_not_depend_on_node_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..10 {
        let n = rng.random_range(3..=7);
        let m = random_model(&mut rng, n, None);
        let w = random_weights(&mut rng, m.link_count());
        let start = PowerState::uniform(&m);
        let base = SolverConfig::default();
        let (p0, d0) = solve_topc(&m, &w, &start, &base).unwrap();
        let mut order: Vec<usize> = (0..n).rev().collect();
        order.rotate_left(rng.random_range(0..n));
        let cfg = SolverConfig {
            node_order: Some(order),
            ..base.clone()
        };
        let (p1, d1) = solve_topc(&m, &w, &start, &cfg).unwrap();
        assert!(d0.converged && d1.converged);
        let (f0, f1) = (objective_at(&m, &w, &p0).unwrap(), objective_at(&m, &w, &p1).unwrap());
        assert!(rel_err(f0, f1, 1.0) < 1e-6);
        let bad = SolverConfig {
            node_order: Some(vec![0; n]),
            ..base
        };
        assert!(solve_topc(&m, &w, &start, &bad).is_err());
    }
}

#[test]
fn armijo_iterates_never_decrease_and_certify() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..20 {
        let n = rng.random_range(3..=10);
        let m = random_model(&mut rng, n, None);
        let w = random_weights(&mut rng, m.link_count());
        let start = random_power(&mut rng, &m, &w);
        let cfg = SolverConfig::default();
        let (p, diag) = solve_topc(&m, &w, &start, &cfg).unwrap();
        assert_eq!(diag.ascent_violations, 0);
        for pair in diag.objective.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12 * pair[0].abs().max(1.0));
        }
        assert!(diag.converged, "residual {:?}", diag.kkt_residual.last());
        assert!(kkt_check(&m, &w, &p, 1e-6, &cfg).unwrap().passes);
        assert!(!kkt_check(&m, &w, &start, 1e-3, &cfg).unwrap().passes);
    }
}

#![allow(dead_code)]

use bpsim_core::power::gamma_floor;
use bpsim_core::{BacklogWeights, NetworkModel, PowerState, SolverConfig};
use rand::Rng;

/// Ring plus random chords, strong direct gains and weaker cross gains.
pub fn random_model<R: Rng>(rng: &mut R, n: usize, theta: Option<f64>) -> NetworkModel<f64> {
    let mut links = Vec::new();
    for i in 0..n {
        links.push((i, (i + 1) % n));
        for j in 0..n {
            if j != i && j != (i + 1) % n && rng.random::<f64>() < 0.25 {
                links.push((i, j));
            }
        }
    }
    let mut gain = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gain[i * n + j] = rng.random_range(1e-3..5e-2);
        }
    }
    for &(i, j) in &links {
        gain[i * n + j] = rng.random_range(0.5..2.0);
    }
    let th: Vec<f64> = (0..n).map(|_| theta.unwrap_or_else(|| rng.random_range(0.0..1.0))).collect();
    let noise = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
    let caps = (0..n).map(|_| rng.random_range(10.0..200.0)).collect();
    NetworkModel::new(n, links, gain, noise, th, caps, 1e5).unwrap()
}

/// Positive weights on most links, at least one per instance.
pub fn random_weights<R: Rng>(rng: &mut R, links: usize) -> BacklogWeights<f64> {
    let mut b: Vec<f64> = (0..links)
        .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random_range(0.1..5.0) })
        .collect();
    if b.iter().all(|&x| x == 0.0) {
        b[0] = 1.0;
    }
    BacklogWeights::from_bstar(b)
}

/// A feasible state on the weighted links with interior `γ`.
pub fn random_power<R: Rng>(rng: &mut R, model: &NetworkModel<f64>, weights: &BacklogWeights<f64>) -> PowerState<f64> {
    let config = SolverConfig::default();
    let mut eta = vec![0.0; model.link_count()];
    for i in 0..model.node_count() {
        let active: Vec<usize> = model.out_links(i).iter().copied().filter(|&l| weights.is_active(l)).collect();
        let raw: Vec<f64> = active.iter().map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (&l, x) in active.iter().zip(raw) {
            eta[l] = x / total;
        }
    }
    let gamma = (0..model.node_count())
        .map(|i| {
            let lo = gamma_floor(model, i, &config).max(0.2);
            rng.random_range(lo..0.95)
        })
        .collect();
    PowerState { eta, gamma }
}

/// Two transmitters `0 -> 1` and `2 -> 3`, each with one link.
pub fn two_link<R: Rng>(rng: &mut R) -> (NetworkModel<f64>, BacklogWeights<f64>) {
    let mut gain = vec![0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            gain[i * 4 + j] = rng.random_range(1e-3..1e-2);
        }
    }
    gain[1] = rng.random_range(0.5..2.0);
    gain[2 * 4 + 3] = rng.random_range(0.5..2.0);
    gain[3] = rng.random_range(0.02..2.0);
    gain[2 * 4 + 1] = rng.random_range(0.02..2.0);
    let noise = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
    let caps = (0..4).map(|_| rng.random_range(10.0..100.0)).collect();
    let model = NetworkModel::new(4, [(0, 1), (2, 3)], gain, noise, vec![0.25; 4], caps, 1e5).unwrap();
    let weights = BacklogWeights::from_bstar(vec![rng.random_range(0.5..5.0), rng.random_range(0.5..5.0)]);
    (model, weights)
}

/// Objective of the two-link instance at exponents `(g0, g2)`.
pub fn two_link_objective(model: &NetworkModel<f64>, weights: &BacklogWeights<f64>, g0: f64, g2: f64) -> f64 {
    let p = PowerState {
        eta: vec![1.0, 1.0],
        gamma: vec![g0, 1.0, g2, 1.0],
    };
    bpsim_core::phy::objective_at(model, weights, &p).unwrap()
}

/// Maximizes the two-link objective on a 200×200 grid over the box of
/// admissible exponents (equivalently, log-spaced induced powers), then
/// zooms around the best cell `zooms` times.
pub fn two_link_grid(model: &NetworkModel<f64>, weights: &BacklogWeights<f64>, zooms: usize) -> (f64, f64, f64) {
    const SIDE: usize = 200;
    let config = SolverConfig::default();
    let (mut lo0, mut hi0) = (gamma_floor(model, 0, &config), 1.0);
    let (mut lo2, mut hi2) = (gamma_floor(model, 2, &config), 1.0);
    let mut best = (f64::NEG_INFINITY, lo0, lo2);
    for _ in 0..=zooms {
        let (s0, s2) = ((hi0 - lo0) / (SIDE - 1) as f64, (hi2 - lo2) / (SIDE - 1) as f64);
        for a in 0..SIDE {
            for b in 0..SIDE {
                let (g0, g2) = (lo0 + a as f64 * s0, lo2 + b as f64 * s2);
                let f = two_link_objective(model, weights, g0, g2);
                if f > best.0 {
                    best = (f, g0, g2);
                }
            }
        }
        let (f0, f2) = (gamma_floor(model, 0, &config), gamma_floor(model, 2, &config));
        lo0 = (best.1 - 2.0 * s0).max(f0);
        hi0 = (best.1 + 2.0 * s0).min(1.0);
        lo2 = (best.2 - 2.0 * s2).max(f2);
        hi2 = (best.2 + 2.0 * s2).min(1.0);
    }
    best
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

use super::{project_simplex, BacklogWeights, Scaling, SolverConfig, StepsizeRule};
use crate::error::{Error, Result};
use crate::model::NetworkModel;
use crate::phy::{compute_metrics, objective_value, LinkMetrics, PowerState};
use crate::scalar::Scalar;

/// Lowest admissible `γ_i`, the exponent at which node `i` transmits
/// `min_power_fraction · P̂_i`.
pub fn gamma_floor<T: Scalar>(model: &NetworkModel<T>, i: usize, config: &SolverConfig<T>) -> T {
    T::one() + config.min_power_fraction.ln() / model.log_power_cap(i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaOutcome<T> {
    /// Updated fractions, aligned with `model.out_links(node)`.
    pub eta: Vec<T>,
    pub step: T,
    /// Objective change caused by the update (PA only touches the node's own links).
    pub gain: T,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcOutcome<T> {
    pub gamma: Vec<T>,
    pub step: T,
    pub objective_before: T,
    pub objective_after: T,
    pub accepted: bool,
}

/// Objective terms of node `i`'s weighted links as a function of its
/// allocation `x` over those links. Every other term of `F` is unaffected
/// by a PA update because the node's total power stays put.
fn local_objective<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    metrics: &LinkMetrics<T>,
    node: usize,
    active: &[usize],
    x: &[T],
) -> T {
    let pi = metrics.node_power[node];
    let theta = model.self_interference(node);
    let k = model.processing_gain();
    let mut f = T::zero();
    for (a, &l) in active.iter().enumerate() {
        let h = model.gain(node, model.link(l).to);
        let others: T = x.iter().enumerate().filter(|&(c, _)| c != a).map(|(_, &v)| v).sum();
        let inn = theta * h * pi * others + metrics.external[l];
        f = f + weights.bstar[l] * (k * h * pi * x[a] / inn).ln();
    }
    f
}

/// One PA update at `node`: `η ← [η + β Q⁻¹ δη]⁺_Q` over the node's weighted
/// links. Unweighted links carry no power and are left at zero.
pub fn pa_step<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    power: &PowerState<T>,
    metrics: &LinkMetrics<T>,
    delta_eta: &[T],
    node: usize,
    config: &SolverConfig<T>,
) -> Result<PaOutcome<T>> {
    let out = model.out_links(node);
    let current: Vec<T> = out.iter().map(|&l| power.eta[l]).collect();
    let unchanged = PaOutcome {
        eta: current.clone(),
        step: T::zero(),
        gain: T::zero(),
        accepted: false,
    };
    let active: Vec<usize> = out.iter().copied().filter(|&l| weights.is_active(l)).collect();
    if active.len() < 2 {
        return Ok(unchanged);
    }
    if active.iter().any(|&l| !delta_eta[l].is_finite()) {
        return Err(Error::numeric(format!("node {node}"), "non-finite power allocation gain"));
    }
    let pi = metrics.node_power[node];
    let x: Vec<T> = active.iter().map(|&l| power.eta[l]).collect();
    let grad: Vec<T> = active.iter().map(|&l| pi * delta_eta[l]).collect();
    let q: Vec<T> = match config.scaling {
        Scaling::Identity => vec![T::one(); active.len()],
        Scaling::DiagonalHessian => active
            .iter()
            .zip(&x)
            .map(|(&l, &xa)| (weights.bstar[l] / (xa * xa) + config.scaling_epsilon) / pi)
            .collect(),
    };
    let trial = |beta: T| -> Result<Vec<T>> {
        let target: Vec<T> = active
            .iter()
            .zip(&x)
            .zip(&q)
            .map(|((&l, &xa), &qa)| xa + beta * delta_eta[l] / qa)
            .collect();
        project_simplex(&target, &q, config.eta_floor)
    };
    let f0 = local_objective(model, weights, metrics, node, &active, &x);
    let assemble = |y: &[T]| -> Vec<T> {
        out.iter()
            .map(|&l| match active.iter().position(|&a| a == l) {
                Some(a) => y[a],
                None => T::zero(),
            })
            .collect()
    };
    match config.stepsize {
        StepsizeRule::Fixed(beta) => {
            let y = trial(beta)?;
            let f1 = local_objective(model, weights, metrics, node, &active, &y);
            Ok(PaOutcome {
                eta: assemble(&y),
                step: beta,
                gain: f1 - f0,
                accepted: true,
            })
        }
        StepsizeRule::Armijo {
            sigma,
            shrink,
            initial,
            max_backtracks,
        } => {
            let mut beta = initial;
            for _ in 0..=max_backtracks {
                let y = trial(beta)?;
                let lin: T = grad.iter().zip(&y).zip(&x).map(|((&g, &ya), &xa)| g * (ya - xa)).sum();
                let f1 = local_objective(model, weights, metrics, node, &active, &y);
                if f1.is_finite() && f1 - f0 >= sigma * lin && f1 >= f0 {
                    return Ok(PaOutcome {
                        eta: assemble(&y),
                        step: beta,
                        gain: f1 - f0,
                        accepted: true,
                    });
                }
                beta = beta * shrink;
            }
            Ok(unchanged)
        }
    }
}

/// Diagonal of the Hessian of `F` in the log-powers `S_i = γ_i ln P̂_i`
/// (non-positive; returned as a magnitude).
fn log_power_curvature<T: Scalar>(model: &NetworkModel<T>, weights: &BacklogWeights<T>, metrics: &LinkMetrics<T>, i: usize) -> T {
    let pi = metrics.node_power[i];
    let mut h = T::zero();
    for (l, link) in model.links().iter().enumerate() {
        let b = weights.bstar[l];
        if !(b > T::zero()) {
            continue;
        }
        let inn = metrics.interference_noise[l];
        let share = if link.from == i {
            (inn - metrics.external[l]) / inn
        } else {
            model.gain(i, link.to) * pi / inn
        };
        h = h + b * share * (T::one() - share);
    }
    h
}

/// One network-wide PC update `γ ← [γ + ξ V⁻¹ δγ]⁺_V` with diagonal `V`,
/// for which the scaled projection is a per-node clamp to `[γ_floor, 1]`.
pub fn pc_step<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    power: &PowerState<T>,
    metrics: &LinkMetrics<T>,
    delta_gamma: &[T],
    config: &SolverConfig<T>,
) -> Result<PcOutcome<T>> {
    let n = model.node_count();
    if let Some(i) = (0..n).find(|&i| !delta_gamma[i].is_finite()) {
        return Err(Error::numeric(format!("node {i}"), "non-finite power control gain"));
    }
    let f0 = objective_value(model, weights, metrics)?;
    let movable: Vec<bool> = (0..n)
        .map(|i| model.out_links(i).iter().any(|&l| weights.is_active(l)) && metrics.node_power[i] > T::zero())
        .collect();
    let direction: Vec<T> = (0..n)
        .map(|i| {
            if !movable[i] {
                return T::zero();
            }
            let v = match config.scaling {
                Scaling::Identity => T::one(),
                Scaling::DiagonalHessian => {
                    model.log_power_cap(i) * log_power_curvature(model, weights, metrics, i).max(config.scaling_epsilon)
                }
            };
            delta_gamma[i] / v
        })
        .collect();
    let trial = |xi: T| -> Vec<T> {
        (0..n)
            .map(|i| {
                if !movable[i] {
                    power.gamma[i]
                } else {
                    (power.gamma[i] + xi * direction[i]).max(gamma_floor(model, i, config)).min(T::one())
                }
            })
            .collect()
    };
    let evaluate = |gamma: Vec<T>| -> Result<(PowerState<T>, T)> {
        let candidate = PowerState {
            eta: power.eta.clone(),
            gamma,
        };
        let m = compute_metrics(model, &candidate)?;
        let f = objective_value(model, weights, &m)?;
        Ok((candidate, f))
    };
    match config.stepsize {
        StepsizeRule::Fixed(xi) => {
            let (cand, f1) = evaluate(trial(xi))?;
            Ok(PcOutcome {
                gamma: cand.gamma,
                step: xi,
                objective_before: f0,
                objective_after: f1,
                accepted: true,
            })
        }
        StepsizeRule::Armijo {
            sigma,
            shrink,
            initial,
            max_backtracks,
        } => {
            let mut xi = initial;
            for _ in 0..=max_backtracks {
                let gamma = trial(xi);
                if gamma == power.gamma {
                    break;
                }
                let lin: T = (0..n)
                    .map(|i| model.log_power_cap(i) * delta_gamma[i] * (gamma[i] - power.gamma[i]))
                    .sum();
                let (cand, f1) = evaluate(gamma)?;
                if f1.is_finite() && f1 - f0 >= sigma * lin && f1 >= f0 {
                    return Ok(PcOutcome {
                        gamma: cand.gamma,
                        step: xi,
                        objective_before: f0,
                        objective_after: f1,
                        accepted: true,
                    });
                }
                xi = xi * shrink;
            }
            Ok(PcOutcome {
                gamma: power.gamma.clone(),
                step: T::zero(),
                objective_before: f0,
                objective_after: f0,
                accepted: false,
            })
        }
    }
}

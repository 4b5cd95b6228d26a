//! MDB scheduling: differential backlogs, per-link commodity choice, and
//! the three ways of turning them into per-slot link rates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetworkModel, TrafficSpec};
use crate::phy::{compute_metrics, LinkMetrics, PowerState};
use crate::power::{restrict_to_active, solve_topc, sweep, BacklogWeights, SolverConfig, StepsizeRule};
use crate::scalar::Scalar;

/// Backlogs `U_i^k`, stored densely node-major (`i * K + k`). Entries for
/// `(i, k)` with `i` a destination of `k` stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState<T> {
    pub backlog: Vec<T>,
    pub commodities: usize,
}

impl<T: Scalar> QueueState<T> {
    pub fn zeros(nodes: usize, commodities: usize) -> Self {
        Self {
            backlog: vec![T::zero(); nodes * commodities],
            commodities,
        }
    }

    pub fn from_vec(backlog: Vec<T>, commodities: usize) -> Self {
        Self { backlog, commodities }
    }

    pub fn get(&self, node: usize, k: usize) -> T {
        self.backlog[node * self.commodities + k]
    }

    pub fn set(&mut self, node: usize, k: usize, v: T) {
        self.backlog[node * self.commodities + k] = v;
    }

    pub fn total(&self) -> T {
        self.backlog.iter().copied().sum()
    }
}

/// Adjoint of the virtual-rate map: the coefficient of `R_ij^k` in `u'R̃`,
/// i.e. `u_i^k - u_j^k` with absent (destination) queues read as zero.
/// Indexed `[link][commodity]`.
pub fn link_commodity_weights<T: Scalar>(u: &[T], model: &NetworkModel<T>, traffic: &TrafficSpec) -> Vec<Vec<T>> {
    let kc = traffic.commodity_count();
    let read = |i: usize, k: usize| if traffic.has_queue(i, k) { u[i * kc + k] } else { T::zero() };
    model
        .links()
        .iter()
        .map(|link| (0..kc).map(|k| read(link.from, k) - read(link.to, k)).collect())
        .collect()
}

/// `k*_ij = argmax_k (U_i^k - U_j^k)` (lowest index on ties) and
/// `b*_ij = max(0, U_i^{k*} - U_j^{k*})`.
///
/// Works for any real vector `u`, not just backlogs.
pub fn compute_weights<T: Scalar>(u: &[T], model: &NetworkModel<T>, traffic: &TrafficSpec) -> BacklogWeights<T> {
    let per = link_commodity_weights(u, model, traffic);
    let mut kstar = Vec::with_capacity(per.len());
    let mut bstar = Vec::with_capacity(per.len());
    for row in per {
        let mut best: Option<(usize, T)> = None;
        for (k, w) in row.into_iter().enumerate() {
            if best.is_none_or(|(_, v)| w > v) {
                best = Some((k, w));
            }
        }
        kstar.push(best.map(|(k, _)| k));
        bstar.push(best.map_or(T::zero(), |(_, v)| v.max(T::zero())));
    }
    BacklogWeights { kstar, bstar }
}

/// Bits per slot on every link, all routed to the link's chosen commodity.
#[derive(Debug, Clone, PartialEq)]
pub struct RateAssignment<T> {
    pub per_link: Vec<T>,
    pub commodity: Vec<Option<usize>>,
}

impl<T: Scalar> RateAssignment<T> {
    pub fn zeros(links: usize) -> Self {
        Self {
            per_link: vec![T::zero(); links],
            commodity: vec![None; links],
        }
    }

    pub fn per_commodity(&self, l: usize, k: usize) -> T {
        if self.commodity[l] == Some(k) {
            self.per_link[l]
        } else {
            T::zero()
        }
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            per_link: self.per_link.iter().map(|&r| r * c).collect(),
            commodity: self.commodity.clone(),
        }
    }
}

/// Capacity times the unit slot length on weighted links, zero elsewhere.
/// A high-SINR capacity below zero (SINR < 1) carries nothing.
pub fn rates_from_power<T: Scalar>(metrics: &LinkMetrics<T>, weights: &BacklogWeights<T>) -> RateAssignment<T> {
    let per_link = (0..weights.bstar.len())
        .map(|l| {
            if weights.is_active(l) {
                metrics.capacity[l].max(T::zero())
            } else {
                T::zero()
            }
        })
        .collect();
    RateAssignment {
        per_link,
        commodity: weights.kstar.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Solve the MDB problem to optimality at every slot boundary.
    #[serde(rename = "instant")]
    Instantaneous,
    /// Iterate PA/PC throughout the slot towards the slot-start optimum.
    #[serde(rename = "iter-conv")]
    IterativeConvergent,
    /// One PA/PC update per slot on the current queue state.
    #[serde(rename = "iter-once")]
    IterativeOnce,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [
        SchemeKind::Instantaneous,
        SchemeKind::IterativeConvergent,
        SchemeKind::IterativeOnce,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Instantaneous => "instant",
            SchemeKind::IterativeConvergent => "iter-conv",
            SchemeKind::IterativeOnce => "iter-once",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}` (expected instant, iter-conv or iter-once)")))
    }
}

/// Initial Armijo step of the iterative schemes. With it a cold-started
/// solve needs about fifty PA/PC iterations to get within `1e-3` of the
/// optimum, the convergence budget assumed for one slot.
pub const DISTRIBUTED_INITIAL_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig<T> {
    /// Solver run to optimality by the instantaneous scheme.
    pub solver: SolverConfig<T>,
    /// Per-iteration settings of the two iterative schemes.
    pub iterative: SolverConfig<T>,
    /// PA/PC iterations that fit in one slot for the convergent scheme.
    pub iterations_per_slot: usize,
}

impl<T: Scalar> Default for SchemeConfig<T> {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            iterative: SolverConfig {
                stepsize: StepsizeRule::Armijo {
                    sigma: T::of(1e-4),
                    shrink: T::of(0.5),
                    initial: T::of(DISTRIBUTED_INITIAL_STEP),
                    max_backtracks: 60,
                },
                ..SolverConfig::default()
            },
            iterations_per_slot: 50,
        }
    }
}

/// What a scheme decided for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDecision<T> {
    pub rates: RateAssignment<T>,
    pub weights: BacklogWeights<T>,
    /// MDB objective at each power iterate evaluated during the slot.
    pub objective_trace: Vec<T>,
    /// Largest single-slot rate on any link among the iterates, for the
    /// convergent scheme's mean-versus-max check.
    pub max_rates: Vec<T>,
    pub solver_converged: bool,
    pub ascent_violations: usize,
    pub messages: usize,
}

/// Instantaneous MDB: cold start, solve to optimality, apply for the slot.
pub fn scheme_instantaneous<T: Scalar>(
    queues: &QueueState<T>,
    model: &NetworkModel<T>,
    traffic: &TrafficSpec,
    config: &SchemeConfig<T>,
) -> Result<(SlotDecision<T>, PowerState<T>)> {
    let weights = compute_weights(&queues.backlog, model, traffic);
    let init = PowerState::uniform_active(model, &weights);
    let (power, diag) = solve_topc(model, &weights, &init, &config.solver)?;
    let metrics = compute_metrics(model, &power)?;
    let rates = rates_from_power(&metrics, &weights);
    Ok((
        SlotDecision {
            max_rates: rates.per_link.clone(),
            rates,
            weights,
            objective_trace: diag.objective.clone(),
            solver_converged: diag.converged,
            ascent_violations: diag.ascent_violations,
            messages: diag.messages.iter().sum(),
        },
        power,
    ))
}

/// Iterative MDB with convergence. The slot's rates are the time average of
/// the rates at the successive iterates (left endpoints: the warm-started
/// state holds for the first sub-interval, the final iterate takes effect at
/// the next slot). Returns the final iterate for warm starting.
pub fn scheme_iterative_convergent<T: Scalar>(
    queues: &QueueState<T>,
    power: &PowerState<T>,
    model: &NetworkModel<T>,
    traffic: &TrafficSpec,
    config: &SchemeConfig<T>,
) -> Result<(SlotDecision<T>, PowerState<T>)> {
    let weights = compute_weights(&queues.backlog, model, traffic);
    let e = model.link_count();
    let iterations = config.iterations_per_slot.max(1);
    if !weights.any_active() {
        return Ok((idle_decision(&weights, e), power.clone()));
    }
    let mut state = restrict_to_active(model, &weights, power, &config.iterative)?;
    let mut sum = vec![T::zero(); e];
    let mut max_rates = vec![T::zero(); e];
    let mut trace = Vec::with_capacity(iterations);
    let (mut violations, mut messages) = (0, 0);
    let mut frozen: Option<(RateAssignment<T>, T)> = None;
    for _ in 0..iterations {
        let (rates, f) = match &frozen {
            Some(x) => x.clone(),
            None => {
                let metrics = compute_metrics(model, &state)?;
                let f = crate::phy::objective_value(model, &weights, &metrics)?;
                (rates_from_power(&metrics, &weights), f)
            }
        };
        trace.push(f);
        for l in 0..e {
            sum[l] = sum[l] + rates.per_link[l];
            max_rates[l] = max_rates[l].max(rates.per_link[l]);
        }
        if frozen.is_none() {
            let rec = sweep(model, &weights, &mut state, &config.iterative)?;
            violations += rec.ascent_violations;
            messages += rec.messages;
            if !rec.moved {
                frozen = Some((rates, f));
            }
        }
    }
    let n = T::of_usize(iterations);
    let rates = RateAssignment {
        per_link: sum.into_iter().map(|s| s / n).collect(),
        commodity: weights.kstar.clone(),
    };
    Ok((
        SlotDecision {
            rates,
            weights,
            objective_trace: trace,
            max_rates,
            solver_converged: frozen.is_some(),
            ascent_violations: violations,
            messages,
        },
        state,
    ))
}

/// Iterative MDB without convergence: one PA sweep and one PC step on the
/// current queue state, then the resulting rates for the whole slot.
pub fn scheme_iterative_once<T: Scalar>(
    queues: &QueueState<T>,
    power: &PowerState<T>,
    model: &NetworkModel<T>,
    traffic: &TrafficSpec,
    config: &SchemeConfig<T>,
) -> Result<(SlotDecision<T>, PowerState<T>)> {
    let weights = compute_weights(&queues.backlog, model, traffic);
    if !weights.any_active() {
        return Ok((idle_decision(&weights, model.link_count()), power.clone()));
    }
    let mut state = restrict_to_active(model, &weights, power, &config.iterative)?;
    let rec = sweep(model, &weights, &mut state, &config.iterative)?;
    let metrics = compute_metrics(model, &state)?;
    let rates = rates_from_power(&metrics, &weights);
    Ok((
        SlotDecision {
            max_rates: rates.per_link.clone(),
            rates,
            weights,
            objective_trace: vec![rec.objective_start, rec.objective_after_pa, rec.objective_after_pc],
            solver_converged: !rec.moved,
            ascent_violations: rec.ascent_violations,
            messages: rec.messages,
        },
        state,
    ))
}

fn idle_decision<T: Scalar>(weights: &BacklogWeights<T>, links: usize) -> SlotDecision<T> {
    SlotDecision {
        rates: RateAssignment {
            per_link: vec![T::zero(); links],
            commodity: weights.kstar.clone(),
        },
        weights: weights.clone(),
        objective_trace: vec![T::zero()],
        max_rates: vec![T::zero(); links],
        solver_converged: true,
        ascent_violations: 0,
        messages: 0,
    }
}

/// A scheme together with the power state it carries across slots.
#[derive(Debug, Clone)]
pub struct SchemeRunner<T> {
    pub kind: SchemeKind,
    pub power: PowerState<T>,
}

impl<T: Scalar> SchemeRunner<T> {
    pub fn new(kind: SchemeKind, model: &NetworkModel<T>) -> Self {
        Self {
            kind,
            power: PowerState::uniform(model),
        }
    }

    pub fn decide(
        &mut self,
        queues: &QueueState<T>,
        model: &NetworkModel<T>,
        traffic: &TrafficSpec,
        config: &SchemeConfig<T>,
    ) -> Result<SlotDecision<T>> {
        let (decision, power) = match self.kind {
            SchemeKind::Instantaneous => scheme_instantaneous(queues, model, traffic, config)?,
            SchemeKind::IterativeConvergent => scheme_iterative_convergent(queues, &self.power, model, traffic, config)?,
            SchemeKind::IterativeOnce => scheme_iterative_once(queues, &self.power, model, traffic, config)?,
        };
        self.power = power;
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arrival, Commodity};
    use proptest::prelude::*;

    /// 0 <-> 1 <-> 2, one commodity from 0 to 2.
    fn line() -> (NetworkModel<f64>, TrafficSpec) {
        let mut gain = vec![0.01; 9];
        gain[1] = 1.0;
        gain[3] = 1.0;
        gain[5] = 1.0;
        gain[7] = 1.0;
        let m = NetworkModel::new(3, [(0, 1), (1, 0), (1, 2), (2, 1)], gain, vec![0.1; 3], vec![0.25; 3], vec![100.0; 3], 1e5)
            .unwrap();
        let t = TrafficSpec {
            commodities: vec![Commodity {
                destinations: vec![2],
                arrivals: vec![(0, Arrival::Poisson { mean: 1.0 })],
            }],
        };
        (m, t)
    }

    #[test]
    fn differential_backlog() {
        let (m, t) = line();
        let l01 = m.link_index(0, 1).unwrap();
        let l10 = m.link_index(1, 0).unwrap();
        let l12 = m.link_index(1, 2).unwrap();
        let q = QueueState::from_vec(vec![5.0, 2.0, 0.0], 1);
        let w = compute_weights(&q.backlog, &m, &t);
        assert_eq!(w.kstar[l01], Some(0));
        assert_eq!(w.bstar[l01], 3.0);
        assert_eq!(w.bstar[l10], 0.0);
        // Link into the destination sees the destination backlog as zero.
        let q = QueueState::from_vec(vec![0.0, 4.0, 0.0], 1);
        let w = compute_weights(&q.backlog, &m, &t);
        assert_eq!(w.bstar[l12], 4.0);
        let q = QueueState::from_vec(vec![2.0, 5.0, 0.0], 1);
        assert_eq!(compute_weights(&q.backlog, &m, &t).bstar[l01], 0.0);
    }

    #[test]
    fn ties_pick_lowest_commodity() {
        let (m, _) = line();
        let c = Commodity {
            destinations: vec![2],
            arrivals: vec![],
        };
        let t = TrafficSpec {
            commodities: vec![c.clone(), c],
        };
        let q = QueueState::from_vec(vec![3.0, 3.0, 1.0, 1.0, 0.0, 0.0], 2);
        let w = compute_weights(&q.backlog, &m, &t);
        assert_eq!(w.kstar[m.link_index(0, 1).unwrap()], Some(0));
    }

    #[test]
    fn rates_follow_weights() {
        let (m, t) = line();
        let q = QueueState::from_vec(vec![5.0, 2.0, 0.0], 1);
        let w = compute_weights(&q.backlog, &m, &t);
        let p = PowerState::uniform_active(&m, &w);
        let met = compute_metrics(&m, &p).unwrap();
        let r = rates_from_power(&met, &w);
        for l in 0..m.link_count() {
            if w.is_active(l) {
                assert_eq!(r.per_link[l], met.capacity[l]);
                assert_eq!(r.per_commodity(l, 0), r.per_link[l]);
            } else {
                assert_eq!(r.per_link[l], 0.0);
            }
        }
    }

    #[test]
    fn stationary_queues_reach_fixed_point() {
        let (m, t) = line();
        let cfg = SchemeConfig::default();
        let q = QueueState::from_vec(vec![50.0, 20.0, 0.0], 1);
        let mut runner = SchemeRunner::new(SchemeKind::IterativeConvergent, &m);
        let first = runner.decide(&q, &m, &t, &cfg).unwrap();
        assert!(first.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let second = runner.decide(&q, &m, &t, &cfg).unwrap();
        let third = runner.decide(&q, &m, &t, &cfg).unwrap();
        for l in 0..m.link_count() {
            assert!((second.rates.per_link[l] - third.rates.per_link[l]).abs() < 1e-9);
            assert!(first.rates.per_link[l] <= first.max_rates[l] + 1e-12);
        }
        let (inst, _) = scheme_instantaneous(&q, &m, &t, &cfg).unwrap();
        for l in 0..m.link_count() {
            assert!((third.rates.per_link[l] - inst.rates.per_link[l]).abs() < 1e-5);
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("bogus".parse::<SchemeKind>().is_err());
    }

    proptest! {
        #[test]
        fn weights_scale_with_backlog(u in prop::collection::vec(0.0f64..100.0, 3), c in 0.1f64..10.0) {
            let (m, t) = line();
            let mut u = u;
            u[2] = 0.0;
            let w = compute_weights(&u, &m, &t);
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let ws = compute_weights(&scaled, &m, &t);
            prop_assert_eq!(&w.kstar, &ws.kstar);
            for (a, b) in w.bstar.iter().zip(&ws.bstar) {
                prop_assert!((a * c - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

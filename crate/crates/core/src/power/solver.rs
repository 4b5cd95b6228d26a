use std::io::Write;

use super::{exchange_messages, gamma_floor, kkt_check, pa_step, pc_step, project_simplex, BacklogWeights, KktReport, SolverConfig};
use crate::error::Result;
use crate::model::NetworkModel;
use crate::phy::{compute_metrics, marginal_eta, objective_value, PowerState};
use crate::scalar::Scalar;

/// Relative slack when asserting ascent between two full objective
/// evaluations; PA acceptance is decided on the node's local terms, whose sum
/// can differ from the full recomputation by rounding.
const ASCENT_SLACK: f64 = 1e-12;

/// Moves a power state onto the support of `weights`: unweighted links get
/// zero power, nodes without weighted links go silent, links that just
/// became weighted start with an equal share, and `γ` is clamped to its box.
pub fn restrict_to_active<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    power: &PowerState<T>,
    config: &SolverConfig<T>,
) -> Result<PowerState<T>> {
    let mut eta = vec![T::zero(); model.link_count()];
    for i in 0..model.node_count() {
        let active: Vec<usize> = model.out_links(i).iter().copied().filter(|&l| weights.is_active(l)).collect();
        if active.is_empty() {
            continue;
        }
        let count = T::of_usize(active.len());
        let mass: T = active.iter().map(|&l| power.eta[l]).sum();
        let fresh = active.iter().filter(|&&l| power.eta[l] == T::zero()).count();
        let x: Vec<T> = if mass > T::zero() {
            let kept = T::one() - T::of_usize(fresh) / count;
            active
                .iter()
                .map(|&l| {
                    if power.eta[l] == T::zero() {
                        T::one() / count
                    } else {
                        power.eta[l] / mass * kept
                    }
                })
                .collect()
        } else {
            vec![T::one() / count; active.len()]
        };
        let x = if x.iter().any(|&v| v < config.eta_floor) {
            project_simplex(&x, &vec![T::one(); x.len()], config.eta_floor)?
        } else {
            x
        };
        for (&l, v) in active.iter().zip(x) {
            eta[l] = v;
        }
    }
    let gamma = (0..model.node_count())
        .map(|i| power.gamma[i].max(gamma_floor(model, i, config)).min(T::one()))
        .collect();
    Ok(PowerState { eta, gamma })
}

/// Objective values around one PA sweep followed by one PC step.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord<T> {
    pub objective_start: T,
    pub objective_after_pa: T,
    pub objective_after_pc: T,
    pub messages: usize,
    pub moved: bool,
    pub ascent_violations: usize,
}

fn decreased<T: Scalar>(before: T, after: T) -> bool {
    after < before - T::of(ASCENT_SLACK) * before.abs().max(T::one())
}

/// One PA update at every node (in the configured order) then one PC update.
///
/// PA updates leave every node's total power unchanged, so each node's step
/// depends only on its own links and all of them can be taken against the
/// same metrics snapshot.
pub fn sweep<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    power: &mut PowerState<T>,
    config: &SolverConfig<T>,
) -> Result<SweepRecord<T>> {
    let order = config.order(model.node_count())?;
    let metrics = compute_metrics(model, power)?;
    let f0 = objective_value(model, weights, &metrics)?;
    let d_eta = marginal_eta(model, weights, &metrics)?;
    let mut updated = power.eta.clone();
    let mut moved = false;
    for &i in &order {
        let out = pa_step(model, weights, power, &metrics, &d_eta, i, config)?;
        for (&l, v) in model.out_links(i).iter().zip(out.eta) {
            moved |= updated[l] != v;
            updated[l] = v;
        }
    }
    power.eta = updated;

    let metrics = compute_metrics(model, power)?;
    let f1 = objective_value(model, weights, &metrics)?;
    let exchange = exchange_messages(model, weights, power, &metrics);
    let pc = pc_step(model, weights, power, &metrics, &exchange.delta_gamma, config)?;
    moved |= pc.gamma != power.gamma;
    power.gamma = pc.gamma;
    let f2 = pc.objective_after;
    let ascent_violations = usize::from(decreased(f0, f1)) + usize::from(decreased(f1, f2));
    Ok(SweepRecord {
        objective_start: f0,
        objective_after_pa: f1,
        objective_after_pc: f2,
        messages: exchange.message_count(),
        moved,
        ascent_violations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics<T> {
    /// Objective at the start of every iteration plus the final value.
    pub objective: Vec<T>,
    pub kkt_residual: Vec<T>,
    pub messages: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub ascent_violations: usize,
    pub final_report: Option<KktReport<T>>,
}

impl<T: Scalar> SolveDiagnostics<T> {
    pub fn final_objective(&self) -> T {
        self.objective.last().copied().unwrap_or_else(T::zero)
    }

    /// Per-iteration CSV: `iteration,objective,max_kkt_residual,message_count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,objective,max_kkt_residual,message_count")?;
        for (it, f) in self.objective.iter().enumerate() {
            let r = self.kkt_residual.get(it).map(|r| r.to_string()).unwrap_or_default();
            let m = self.messages.get(it).copied().unwrap_or(0);
            writeln!(w, "{it},{f},{r},{m}")?;
        }
        Ok(())
    }
}

/// Runs PA/PC sweeps from `initial` until the optimality conditions hold to
/// `config.kkt_tolerance` or `config.max_iterations` sweeps have been made.
/// Failing to converge is reported in the diagnostics, not as an error.
pub fn solve_topc<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    initial: &PowerState<T>,
    config: &SolverConfig<T>,
) -> Result<(PowerState<T>, SolveDiagnostics<T>)> {
    config.validate()?;
    if !weights.any_active() {
        return Ok((
            initial.clone(),
            SolveDiagnostics {
                objective: vec![T::zero()],
                kkt_residual: vec![T::zero()],
                messages: Vec::new(),
                iterations: 0,
                converged: true,
                ascent_violations: 0,
                final_report: None,
            },
        ));
    }
    let mut power = restrict_to_active(model, weights, initial, config)?;
    let mut diag = SolveDiagnostics {
        objective: Vec::new(),
        kkt_residual: Vec::new(),
        messages: Vec::new(),
        iterations: 0,
        converged: false,
        ascent_violations: 0,
        final_report: None,
    };
    loop {
        let report = kkt_check(model, weights, &power, config.kkt_tolerance, config)?;
        diag.kkt_residual.push(report.max_residual);
        if report.passes {
            diag.converged = true;
        }
        let stop = report.passes || diag.iterations >= config.max_iterations;
        diag.final_report = Some(report);
        if stop {
            diag.objective.push(objective_value(model, weights, &compute_metrics(model, &power)?)?);
            break;
        }
        let rec = sweep(model, weights, &mut power, config)?;
        diag.objective.push(rec.objective_start);
        diag.messages.push(rec.messages);
        diag.ascent_violations += rec.ascent_violations;
        diag.iterations += 1;
        if !rec.moved {
            diag.objective.push(rec.objective_after_pc);
            let report = kkt_check(model, weights, &power, config.kkt_tolerance, config)?;
            diag.kkt_residual.push(report.max_residual);
            diag.converged = report.passes;
            diag.final_report = Some(report);
            break;
        }
    }
    Ok((power, diag))
}

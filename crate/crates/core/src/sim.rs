//! Slotted simulation: arrivals, queue evolution, scheme execution and the
//! Lyapunov bookkeeping recorded per slot.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdb::{QueueState, RateAssignment, SchemeConfig, SchemeKind, SchemeRunner};
use crate::model::{NetworkModel, Scenario, TrafficSpec};
use crate::scalar::{dot, norm_sq, Scalar};

/// Exogenous bits per queue per slot, `[slot][i * K + k]`.
pub type ArrivalTensor<T> = Vec<Vec<T>>;

/// Absolute slack, scaled by the magnitudes involved, for the pathwise
/// inequality checks.
const CHECK_SLACK: f64 = 1e-9;

/// Virtual service rates `R̃_i^k = Σ_out R_ij^k - Σ_in R_mi^k`, dense and
/// zero on the (absent) destination queues.
pub fn virtual_rates<T: Scalar>(rates: &RateAssignment<T>, model: &NetworkModel<T>, traffic: &TrafficSpec) -> Vec<T> {
    let kc = traffic.commodity_count();
    let mut r = vec![T::zero(); model.node_count() * kc];
    for (l, link) in model.links().iter().enumerate() {
        let Some(k) = rates.commodity[l] else { continue };
        let x = rates.per_link[l];
        if traffic.has_queue(link.from, k) {
            r[link.from * kc + k] = r[link.from * kc + k] + x;
        }
        if traffic.has_queue(link.to, k) {
            r[link.to * kc + k] = r[link.to * kc + k] - x;
        }
    }
    r
}

/// Result of advancing the queues by one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueStep<T> {
    pub next: QueueState<T>,
    /// Bits each link actually carried.
    pub applied: RateAssignment<T>,
    /// Virtual rates of the carried bits; `next = U - applied_virtual + B`.
    pub applied_virtual: Vec<T>,
    /// Applied outgoing service `Σ_j served_ij^k` per queue.
    pub served: Vec<T>,
    /// Nominal endogenous inflow `Σ_m R_mi^k` per queue.
    pub nominal_inflow: Vec<T>,
    /// Bits delivered to destinations during the slot.
    pub absorbed: T,
}

/// Store-then-serve queue update. A queue whose offered outgoing rate
/// exceeds its backlog splits the backlog across its links in proportion to
/// their rates; bits received during the slot wait for the next one.
pub fn step_queues<T: Scalar>(
    queues: &QueueState<T>,
    rates: &RateAssignment<T>,
    arrivals: &[T],
    model: &NetworkModel<T>,
    traffic: &TrafficSpec,
) -> QueueStep<T> {
    let kc = traffic.commodity_count();
    let nq = model.node_count() * kc;
    let mut offered = vec![T::zero(); nq];
    for (l, link) in model.links().iter().enumerate() {
        if let Some(k) = rates.commodity[l] {
            if traffic.has_queue(link.from, k) {
                offered[link.from * kc + k] = offered[link.from * kc + k] + rates.per_link[l];
            }
        }
    }
    let mut next = queues.backlog.clone();
    let mut applied = RateAssignment::zeros(model.link_count());
    let mut applied_virtual = vec![T::zero(); nq];
    let mut served = vec![T::zero(); nq];
    let mut nominal_inflow = vec![T::zero(); nq];
    let mut inflow = vec![T::zero(); nq];
    let mut absorbed = T::zero();
    for (l, link) in model.links().iter().enumerate() {
        let Some(k) = rates.commodity[l] else { continue };
        applied.commodity[l] = Some(k);
        let r = rates.per_link[l];
        if r <= T::zero() || !traffic.has_queue(link.from, k) {
            continue;
        }
        let q = link.from * kc + k;
        let u = queues.backlog[q];
        let carried = if offered[q] <= u { r } else { u * (r / offered[q]) };
        applied.per_link[l] = carried;
        next[q] = next[q] - carried;
        served[q] = served[q] + carried;
        applied_virtual[q] = applied_virtual[q] + carried;
        let d = link.to * kc + k;
        if traffic.has_queue(link.to, k) {
            nominal_inflow[d] = nominal_inflow[d] + r;
            inflow[d] = inflow[d] + carried;
            applied_virtual[d] = applied_virtual[d] - carried;
        } else {
            absorbed = absorbed + carried;
        }
    }
    for q in 0..nq {
        // Proportional splitting can undershoot zero by one rounding step.
        next[q] = (next[q].max(T::zero()) + inflow[q] + arrivals[q]).max(T::zero());
    }
    QueueStep {
        next: QueueState::from_vec(next, kc),
        applied,
        applied_virtual,
        served,
        nominal_inflow,
        absorbed,
    }
}

/// Draws the arrival tensor for `slots` slots from a seeded stream. Queues
/// that do not exist never receive bits.
pub fn draw_arrivals<T: Scalar>(traffic: &TrafficSpec, nodes: usize, slots: usize, rng: &mut ChaCha8Rng) -> ArrivalTensor<T> {
    let kc = traffic.commodity_count();
    (0..slots)
        .map(|_| {
            let mut b = vec![T::zero(); nodes * kc];
            for (k, c) in traffic.commodities.iter().enumerate() {
                for &(i, arr) in &c.arrivals {
                    let x = arr.sample(rng);
                    if traffic.has_queue(i, k) {
                        b[i * kc + k] = b[i * kc + k] + T::of(x);
                    }
                }
            }
            b
        })
        .collect()
}

/// `V(W) = ‖U[t]‖² + ‖U[t] - U[t-1]‖²`.
pub fn lyapunov<T: Scalar>(current: &[T], previous: &[T]) -> T {
    let diff: Vec<T> = current.iter().zip(previous).map(|(&a, &b)| a - b).collect();
    norm_sq(current) + norm_sq(&diff)
}

/// Pathwise drift bound
/// `2U'(B - R̃) + 2(‖B‖² + ‖R̃‖²) - ‖U[t] - U[t-1]‖²`.
pub fn drift_bound<T: Scalar>(u: &[T], u_prev: &[T], b: &[T], r: &[T]) -> T {
    let two = T::of(2.0);
    let diff: Vec<T> = u.iter().zip(u_prev).map(|(&a, &c)| a - c).collect();
    let br: Vec<T> = b.iter().zip(r).map(|(&x, &y)| x - y).collect();
    two * dot(u, &br) + two * (norm_sq(b) + norm_sq(r)) - norm_sq(&diff)
}

/// Exact one-slot drift `2U'(B - R̃) + 2‖B - R̃‖² - ‖U[t] - U[t-1]‖²`,
/// valid whenever `U[t+1] = U[t] - R̃ + B`. It exceeds [`drift_bound`]
/// exactly when `B'R̃ < 0`.
pub fn drift_identity<T: Scalar>(u: &[T], u_prev: &[T], b: &[T], r: &[T]) -> T {
    let two = T::of(2.0);
    let diff: Vec<T> = u.iter().zip(u_prev).map(|(&a, &c)| a - c).collect();
    let br: Vec<T> = b.iter().zip(r).map(|(&x, &y)| x - y).collect();
    two * dot(u, &br) + two * norm_sq(&br) - norm_sq(&diff)
}

/// One slot of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord<T> {
    pub slot: usize,
    /// `U[t+1]`, the backlog at the end of the slot.
    pub backlog: Vec<T>,
    pub total_backlog: T,
    /// `V(W[t+1])`.
    pub lyapunov: T,
    pub realized_drift: T,
    pub drift_bound: T,
    /// `2(|b| + ‖R̃[t]‖²)` with `b` the second-moment vector.
    pub lambda_term: T,
    /// Applied virtual rates `R̃[t]`.
    pub virtual_rate: Vec<T>,
    pub arrivals: Vec<T>,
    /// Queues breaking `U[t+1] ≤ (U - Σ_out served + Σ_in R_nominal + B)⁺`.
    pub queue_bound_violations: usize,
    /// Queues breaking the same inequality with nominal outgoing rates too.
    pub nominal_queue_bound_violations: usize,
    /// `ΣU[t+1] - ΣU[t] - ΣB + absorbed`.
    pub conservation_residual: T,
    pub absorbed: T,
    /// `B[t]'R̃[t]`; the pathwise drift bound needs this to be non-negative.
    pub arrival_rate_product: T,
    pub ascent_violations: usize,
    pub solver_converged: bool,
    pub messages: usize,
    pub objective_trace: Vec<T>,
}

impl<T: Scalar> SlotRecord<T> {
    pub fn drift_bound_holds(&self) -> bool {
        let scale = self.lyapunov.abs().max(self.drift_bound.abs()).max(T::one());
        self.realized_drift <= self.drift_bound + T::of(CHECK_SLACK) * scale
    }

    pub fn conserves(&self) -> bool {
        let scale = self.total_backlog.max(self.absorbed).max(T::one());
        self.conservation_residual.abs() <= T::of(CHECK_SLACK) * scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace<T> {
    pub scheme: SchemeKind,
    pub nodes: usize,
    pub commodities: usize,
    pub rows: Vec<SlotRecord<T>>,
}

impl<T: Scalar> SimTrace<T> {
    pub fn total_backlog(&self) -> Vec<T> {
        self.rows.iter().map(|r| r.total_backlog).collect()
    }

    /// Writes the trace CSV. Per-queue `u_<i>_<k>` (end-of-slot backlog) and
    /// `r_<i>_<k>` (applied virtual rate) columns follow when `per_queue`.
    pub fn write_csv<W: Write>(&self, mut w: W, per_queue: bool) -> std::io::Result<()> {
        write!(w, "slot,total_backlog,V,realized_drift,drift_bound")?;
        let kc = self.commodities;
        if per_queue {
            for prefix in ["u", "r"] {
                for q in 0..self.nodes * kc {
                    write!(w, ",{prefix}_{}_{}", q / kc, q % kc)?;
                }
            }
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(w, "{},{},{},{},{}", r.slot, r.total_backlog, r.lyapunov, r.realized_drift, r.drift_bound)?;
            if per_queue {
                for x in r.backlog.iter().chain(&r.virtual_rate) {
                    write!(w, ",{x}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A trace read back from CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceTable {
    pub slots: Vec<usize>,
    pub total_backlog: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub realized_drift: Vec<f64>,
    pub drift_bound: Vec<f64>,
    /// `(node, commodity)` for every per-queue column pair, in file order.
    pub queues: Vec<(usize, usize)>,
    pub backlog: Vec<Vec<f64>>,
    pub virtual_rate: Vec<Vec<f64>>,
}

impl TraceTable {
    pub fn has_queues(&self) -> bool {
        !self.queues.is_empty()
    }
}

/// Parses a trace CSV written by [`SimTrace::write_csv`].
pub fn read_trace_csv<R: BufRead>(reader: R) -> Result<TraceTable> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Ok(TraceTable::default()),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    let base = ["slot", "total_backlog", "V", "realized_drift", "drift_bound"];
    if cols.len() < base.len() || cols[..base.len()] != base {
        return Err(Error::Format(format!("unexpected trace header `{}`", header.trim())));
    }
    let extra = &cols[base.len()..];
    if !extra.len().is_multiple_of(2) {
        return Err(Error::Format("per-queue columns must come in u/r pairs".into()));
    }
    let half = extra.len() / 2;
    let mut queues = Vec::with_capacity(half);
    for (idx, name) in extra.iter().enumerate() {
        let (prefix, rest) = name.split_once('_').ok_or_else(|| Error::Format(format!("bad column `{name}`")))?;
        let (i, k) = rest.split_once('_').ok_or_else(|| Error::Format(format!("bad column `{name}`")))?;
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad column `{name}`")));
        let key = (parse(i)?, parse(k)?);
        let want = if idx < half { "u" } else { "r" };
        if prefix != want || (idx >= half && queues[idx - half] != key) {
            return Err(Error::Format(format!("column `{name}` out of order")));
        }
        if idx < half {
            queues.push(key);
        }
    }
    let mut t = TraceTable {
        queues,
        ..TraceTable::default()
    };
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!("row {} has {} fields, expected {}", n + 1, fields.len(), cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad number `{s}`", n + 1)));
        t.slots
            .push(fields[0].parse().map_err(|_| Error::Format(format!("row {}: bad slot", n + 1)))?);
        t.total_backlog.push(num(fields[1])?);
        t.lyapunov.push(num(fields[2])?);
        t.realized_drift.push(num(fields[3])?);
        t.drift_bound.push(num(fields[4])?);
        if half > 0 {
            let vals = fields[5..].iter().map(|s| num(s)).collect::<Result<Vec<f64>>>()?;
            t.backlog.push(vals[..half].to_vec());
            t.virtual_rate.push(vals[half..].to_vec());
        }
    }
    Ok(t)
}

/// Runs one scheme on a pre-drawn arrival tensor from empty queues.
pub fn run_with_arrivals<T: Scalar>(
    model: &NetworkModel<T>,
    traffic: &TrafficSpec,
    scheme: SchemeKind,
    arrivals: &ArrivalTensor<T>,
    config: &SchemeConfig<T>,
) -> Result<SimTrace<T>> {
    let kc = traffic.commodity_count();
    let nq = model.node_count() * kc;
    let second: Vec<T> = traffic.second_moment_vector(model.node_count()).into_iter().map(T::of).collect();
    let b_l1: T = second.iter().copied().sum();
    let mut runner = SchemeRunner::new(scheme, model);
    let mut queues = QueueState::zeros(model.node_count(), kc);
    let mut prev = queues.backlog.clone();
    let mut rows = Vec::with_capacity(arrivals.len());
    for (slot, b) in arrivals.iter().enumerate() {
        if b.len() != nq {
            return Err(Error::Precondition(format!("arrival vector for slot {slot} has {} entries, expected {nq}", b.len())));
        }
        let decision = runner
            .decide(&queues, model, traffic, config)
            .map_err(|e| Error::Slot { slot, source: Box::new(e) })?;
        let step = step_queues(&queues, &decision.rates, b, model, traffic);
        let u = &queues.backlog;
        let next = &step.next.backlog;
        let r = &step.applied_virtual;
        let v_now = lyapunov(u, &prev);
        let v_next = lyapunov(next, u);
        let bound = drift_bound(u, &prev, b, r);

        let (mut queue_bound, mut queue_bound_nominal) = (0, 0);
        let nominal_virtual = virtual_rates(&decision.rates, model, traffic);
        for q in 0..nq {
            let scale = T::one().max(u[q]).max(step.nominal_inflow[q]).max(b[q]);
            let slack = T::of(CHECK_SLACK) * scale;
            let rhs = (u[q] - step.served[q] + step.nominal_inflow[q] + b[q]).max(T::zero());
            if next[q] > rhs + slack {
                queue_bound += 1;
            }
            let rhs_nominal = (u[q] - nominal_virtual[q] + b[q]).max(T::zero());
            if next[q] > rhs_nominal + slack {
                queue_bound_nominal += 1;
            }
        }
        let total_next = step.next.total();
        let total_b: T = b.iter().copied().sum();
        let residual = total_next - queues.total() - total_b + step.absorbed;
        rows.push(SlotRecord {
            slot,
            total_backlog: total_next,
            lyapunov: v_next,
            realized_drift: v_next - v_now,
            drift_bound: bound,
            lambda_term: T::of(2.0) * (b_l1 + norm_sq(r)),
            arrival_rate_product: dot(b, r),
            virtual_rate: r.clone(),
            arrivals: b.clone(),
            queue_bound_violations: queue_bound,
            nominal_queue_bound_violations: queue_bound_nominal,
            conservation_residual: residual,
            absorbed: step.absorbed,
            backlog: next.clone(),
            ascent_violations: decision.ascent_violations,
            solver_converged: decision.solver_converged,
            messages: decision.messages,
            objective_trace: decision.objective_trace,
        });
        prev = std::mem::replace(&mut queues, step.next).backlog;
    }
    Ok(SimTrace {
        scheme,
        nodes: model.node_count(),
        commodities: kc,
        rows,
    })
}

/// Per-run stream: the base seed selects the key, the run index the stream.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

/// Draws arrivals from `seed` and runs `scheme` for `slots` slots.
pub fn run_simulation<T: Scalar>(
    scenario: &Scenario<T>,
    scheme: SchemeKind,
    slots: usize,
    config: &SchemeConfig<T>,
    seed: u64,
) -> Result<SimTrace<T>> {
    if slots == 0 {
        return Err(Error::Config("slots must be at least 1".into()));
    }
    let mut rng = run_rng(seed, 0);
    let arrivals = draw_arrivals(&scenario.traffic, scenario.model.node_count(), slots, &mut rng);
    run_with_arrivals(&scenario.model, &scenario.traffic, scheme, &arrivals, config)
}

/// Pointwise mean of equally long curves.
pub fn average_curves<T: Scalar>(curves: &[Vec<T>]) -> Result<Vec<T>> {
    let Some(first) = curves.first() else {
        return Ok(Vec::new());
    };
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Precondition("curves of different length cannot be averaged".into()));
    }
    let n = T::of_usize(curves.len());
    Ok((0..first.len())
        .map(|t| curves.iter().map(|c| c[t]).sum::<T>() / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_scenario, Arrival, Commodity, GeneratorParams};

    /// 0 -> 1 -> 2 tandem, one commodity destined for 2.
    fn tandem() -> (NetworkModel<f64>, TrafficSpec) {
        let mut gain = vec![0.01; 9];
        gain[1] = 1.0;
        gain[5] = 1.0;
        let m = NetworkModel::new(3, [(0, 1), (1, 2)], gain, vec![0.1; 3], vec![0.25; 3], vec![100.0; 3], 1e5).unwrap();
        let t = TrafficSpec {
            commodities: vec![Commodity {
                destinations: vec![2],
                arrivals: vec![(0, Arrival::Poisson { mean: 2.0 })],
            }],
        };
        (m, t)
    }

    fn assignment(per_link: Vec<f64>) -> RateAssignment<f64> {
        let e = per_link.len();
        RateAssignment {
            per_link,
            commodity: vec![Some(0); e],
        }
    }

    #[test]
    fn arrivals_only() {
        let (m, t) = tandem();
        let q = QueueState::zeros(3, 1);
        let s = step_queues(&q, &RateAssignment::zeros(2), &[3.0, 1.0, 0.0], &m, &t);
        assert_eq!(s.next.backlog, vec![3.0, 1.0, 0.0]);
    }

    #[test]
    fn cannot_serve_more_than_backlog() {
        let (m, t) = tandem();
        let q = QueueState::from_vec(vec![5.0, 0.0, 0.0], 1);
        let s = step_queues(&q, &assignment(vec![10.0, 0.0]), &[0.0; 3], &m, &t);
        assert_eq!(s.next.backlog, vec![0.0, 5.0, 0.0]);
        assert_eq!(s.applied.per_link[0], 5.0);
        assert_eq!(s.nominal_inflow[1], 10.0);
    }

    #[test]
    fn proportional_split_and_absorption() {
        let gain = vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let m = NetworkModel::new(3, [(0, 1), (0, 2)], gain, vec![0.1; 3], vec![0.0; 3], vec![10.0; 3], 1e5).unwrap();
        let t = TrafficSpec {
            commodities: vec![Commodity {
                destinations: vec![2],
                arrivals: vec![],
            }],
        };
        let q = QueueState::from_vec(vec![6.0, 0.0, 0.0], 1);
        let s = step_queues(&q, &assignment(vec![2.0, 6.0]), &[0.0; 3], &m, &t);
        assert!((s.applied.per_link[0] - 1.5).abs() < 1e-15);
        assert!((s.absorbed - 4.5).abs() < 1e-15);
        assert!((s.next.backlog[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn virtual_rate_identities() {
        let (m, t) = tandem();
        let r = virtual_rates(&assignment(vec![3.0, 3.0]), &m, &t);
        assert_eq!(r, vec![3.0, 0.0, 0.0]);
        let r = virtual_rates(&assignment(vec![4.0, 0.0]), &m, &t);
        assert_eq!(r[0], 4.0);
        let a = virtual_rates(&assignment(vec![1.5, 0.5]), &m, &t);
        let b = virtual_rates(&assignment(vec![1.5, 0.5]).scaled(3.0), &m, &t);
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_arrivals_zero_trace() {
        let (m, t) = tandem();
        let arrivals = vec![vec![0.0; 3]; 5];
        let tr = run_with_arrivals(&m, &t, SchemeKind::Instantaneous, &arrivals, &SchemeConfig::default()).unwrap();
        assert!(tr.rows.iter().all(|r| r.total_backlog == 0.0 && r.lyapunov == 0.0 && r.realized_drift == 0.0));
    }

    #[test]
    fn short_run_ledgers_hold() {
        let sc = generate_scenario::<f64>(&GeneratorParams::new(5, 2.0, 3)).unwrap();
        for scheme in SchemeKind::ALL {
            let tr = run_simulation(&sc, scheme, 40, &SchemeConfig::default(), 11).unwrap();
            for r in &tr.rows {
                assert!(r.backlog.iter().all(|&x| x >= 0.0));
                assert!(r.conserves(), "slot {} residual {}", r.slot, r.conservation_residual);
                assert_eq!(r.queue_bound_violations, 0);
                if r.arrival_rate_product >= 0.0 {
                    assert!(r.drift_bound_holds(), "slot {}", r.slot);
                }
            }
            let again = run_simulation(&sc, scheme, 40, &SchemeConfig::default(), 11).unwrap();
            assert_eq!(tr, again);
        }
    }

    #[test]
    fn csv_round_trip() {
        let (m, t) = tandem();
        let arrivals = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0; 3]];
        let tr = run_with_arrivals(&m, &t, SchemeKind::IterativeOnce, &arrivals, &SchemeConfig::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, true).unwrap();
        let table = read_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(table.slots, vec![0, 1, 2]);
        assert_eq!(table.queues, vec![(0, 0), (1, 0), (2, 0)]);
        for (row, rec) in table.backlog.iter().zip(&tr.rows) {
            assert_eq!(row, &rec.backlog);
        }
        assert_eq!(table.total_backlog, tr.total_backlog());
        assert!(read_trace_csv("a,b\n".as_bytes()).is_err());
        assert_eq!(read_trace_csv("".as_bytes()).unwrap(), TraceTable::default());
    }

    #[test]
    fn averaging() {
        let c = vec![vec![2.0, 4.0], vec![4.0, 8.0]];
        assert_eq!(average_curves(&c).unwrap(), vec![3.0, 6.0]);
        assert_eq!(average_curves(&c[..1]).unwrap(), c[0]);
        assert!(average_curves(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}

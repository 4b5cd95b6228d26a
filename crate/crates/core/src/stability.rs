//! Numerical checks of the stability geometry: support function of the
//! virtual-rate region, the halfspace and cone lemmas, `d(Δ)`, and the
//! drift condition that defines the compact set `W₀`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdb::{compute_weights, rates_from_power, RateAssignment};
use crate::model::{NetworkModel, TrafficSpec};
use crate::phy::{compute_metrics, PowerState};
use crate::power::{gamma_floor, solve_topc, SolverConfig};
use crate::scalar::{dot, norm_sq, Scalar};
use crate::sim::virtual_rates;

/// Evaluates `max_{R̃ ∈ C} u'R̃` by pushing `u` through the adjoint of the
/// virtual-rate map and solving the resulting power control problem.
#[derive(Debug, Clone)]
pub struct RateRegionOracle<'a, T> {
    pub model: &'a NetworkModel<T>,
    pub traffic: &'a TrafficSpec,
    pub config: SolverConfig<T>,
    mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoint<T> {
    pub value: T,
    pub virtual_rate: Vec<T>,
    pub rates: RateAssignment<T>,
    pub power: PowerState<T>,
    pub converged: bool,
    pub ascent_violations: usize,
}

impl<'a, T: Scalar> RateRegionOracle<'a, T> {
    pub fn new(model: &'a NetworkModel<T>, traffic: &'a TrafficSpec, config: SolverConfig<T>) -> Self {
        let mask = traffic.queue_mask(model.node_count());
        Self {
            model,
            traffic,
            config,
            mask,
        }
    }

    /// Number of queues `M` (existing `(i, k)` pairs are the unmasked ones).
    pub fn dimension(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Support value and a maximizer. `u` may have entries of either sign:
    /// for every link only the best commodity with a positive coefficient
    /// can contribute, and rates can always be lowered to zero, so clipping
    /// the link weights at zero loses nothing.
    pub fn maximize(&self, u: &[T]) -> Result<SupportPoint<T>> {
        if u.len() != self.dimension() {
            return Err(Error::Precondition(format!(
                "direction has {} entries, expected {}",
                u.len(),
                self.dimension()
            )));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("support function", "non-finite direction"));
        }
        let weights = compute_weights(u, self.model, self.traffic);
        let init = PowerState::uniform_active(self.model, &weights);
        let (power, diag) = solve_topc(self.model, &weights, &init, &self.config)?;
        let metrics = compute_metrics(self.model, &power)?;
        let rates = rates_from_power(&metrics, &weights);
        let virtual_rate = virtual_rates(&rates, self.model, self.traffic);
        Ok(SupportPoint {
            value: dot(u, &virtual_rate),
            virtual_rate,
            rates,
            power,
            converged: diag.converged,
            ascent_violations: diag.ascent_violations,
        })
    }

    pub fn support(&self, u: &[T]) -> Result<T> {
        Ok(self.maximize(u)?.value)
    }

    /// A random point of `C`: random feasible powers, a random commodity per
    /// link and a random fraction of each link's capacity.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<T>> {
        let p = random_power_state(self.model, &self.config, rng);
        let metrics = compute_metrics(self.model, &p)?;
        let kc = self.traffic.commodity_count();
        let mut rates = RateAssignment::zeros(self.model.link_count());
        if kc == 0 {
            return Ok(vec![T::zero(); self.dimension()]);
        }
        for l in 0..self.model.link_count() {
            rates.commodity[l] = Some(rng.random_range(0..kc));
            let frac = T::of(rng.random::<f64>());
            rates.per_link[l] = metrics.capacity[l].max(T::zero()) * frac;
        }
        Ok(virtual_rates(&rates, self.model, self.traffic))
    }
}

/// Uniform random `η` on each simplex and `γ` uniform on `[γ_floor, 1]`.
pub fn random_power_state<T: Scalar, R: Rng + ?Sized>(model: &NetworkModel<T>, config: &SolverConfig<T>, rng: &mut R) -> PowerState<T> {
    let mut eta = vec![T::zero(); model.link_count()];
    for i in 0..model.node_count() {
        let out = model.out_links(i);
        let draws: Vec<f64> = out.iter().map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        for (&l, x) in out.iter().zip(draws) {
            eta[l] = T::of((x / total).max(1e-9));
        }
        let s: T = out.iter().map(|&l| eta[l]).sum();
        for &l in out {
            eta[l] = eta[l] / s;
        }
    }
    let gamma = (0..model.node_count())
        .map(|i| {
            let lo = gamma_floor(model, i, config).as_f64();
            T::of(lo + (1.0 - lo) * rng.random::<f64>())
        })
        .collect();
    PowerState { eta, gamma }
}

/// Random non-negative unit vectors supported on the existing queues.
pub fn random_directions<T: Scalar, R: Rng + ?Sized>(mask: &[bool], count: usize, rng: &mut R) -> Vec<Vec<T>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = mask
                .iter()
                .map(|&m| if m { Exp1.sample(rng) } else { 0.0 })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| T::of(if norm > 0.0 { x / norm } else { 0.0 })).collect()
        })
        .collect()
}

/// Coordinate directions of the existing queues.
pub fn axis_directions<T: Scalar>(mask: &[bool]) -> Vec<Vec<T>> {
    (0..mask.len())
        .filter(|&q| mask[q])
        .map(|q| {
            let mut v = vec![T::zero(); mask.len()];
            v[q] = T::one();
            v
        })
        .collect()
}

fn unit<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let n = norm_sq(v).sqrt();
    (n > T::zero()).then(|| v.iter().map(|&x| x / n).collect())
}

/// `max_{R̃∈C} Δ'(R̃ - ā)` for any direction, with `d(0) = 0`. The value is
/// not clipped: it is negative when `ā` lies outside `C` along `Δ`.
pub fn d_delta_signed<T: Scalar>(oracle: &RateRegionOracle<T>, abar: &[T], delta: &[T]) -> Result<T> {
    if delta.iter().all(|&x| x == T::zero()) {
        return Ok(T::zero());
    }
    Ok(oracle.support(delta)? - dot(delta, abar))
}

/// `d(Δ)` for a unit `Δ` and a dominant point `ā ∈ C`. A clearly negative
/// value proves `ā ∉ C` and is reported as a precondition failure.
pub fn compute_d_delta<T: Scalar>(oracle: &RateRegionOracle<T>, abar: &[T], delta: &[T]) -> Result<T> {
    if delta.iter().all(|&x| x == T::zero()) {
        return Ok(T::zero());
    }
    let n = norm_sq(delta).sqrt();
    if (n - T::one()).abs() > T::of(1e-9) {
        return Err(Error::Precondition(format!("direction has norm {n}, expected 1")));
    }
    let d = d_delta_signed(oracle, abar, delta)?;
    let tol = T::of(1e-6) * d.abs().max(dot(delta, abar).abs()).max(T::one());
    if d < -tol {
        return Err(Error::Precondition(format!("d(Δ) = {d} < 0: the dominant point is outside the rate region")));
    }
    Ok(d.max(T::zero()))
}

/// Result of testing one pair against the cone `K(u_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeCheck<T> {
    pub member: bool,
    pub distance: T,
    /// `ε‖u_t‖ / (2 d)`, infinite when `d ≤ 0`.
    pub radius: T,
    pub d: T,
    /// `u_t'R̃*(u_prev) - u_t'e`; only evaluated for members.
    pub halfspace_margin: Option<T>,
}

impl<T: Scalar> ConeCheck<T> {
    /// Membership implies the lagged maximizer is in `C_e^+(u_t)`.
    pub fn halfspace_property_holds(&self, tol: T) -> bool {
        !self.member || self.halfspace_margin.is_some_and(|m| m >= -tol)
    }
}

/// `e = a + (ε/2)·1` on the existing queues.
pub fn shifted_point<T: Scalar>(a: &[T], eps: T, mask: &[bool]) -> Vec<T> {
    a.iter().zip(mask).map(|(&x, &m)| if m { x + eps } else { x }).collect()
}

/// Membership of `u_prev` in `K(u_t)` built around `ā = a + ε·1`, and for
/// members the halfspace property of the lagged maximizer.
pub fn cone_membership<T: Scalar>(
    oracle: &RateRegionOracle<T>,
    a: &[T],
    eps: T,
    u_t: &[T],
    u_prev: &[T],
) -> Result<ConeCheck<T>> {
    let abar = shifted_point(a, eps, oracle.mask());
    let diff: Vec<T> = u_prev.iter().zip(u_t).map(|(&p, &c)| p - c).collect();
    let distance = norm_sq(&diff).sqrt();
    let (d, radius) = match unit(&diff) {
        None => (T::zero(), T::infinity()),
        Some(dir) => {
            let d = d_delta_signed(oracle, &abar, &dir)?;
            let r = if d > T::zero() {
                eps * norm_sq(u_t).sqrt() / (T::of(2.0) * d)
            } else {
                T::infinity()
            };
            (d, r)
        }
    };
    let member = distance <= radius;
    let halfspace_margin = if member {
        let e = shifted_point(a, eps / T::of(2.0), oracle.mask());
        let lagged = oracle.maximize(u_prev)?;
        Some(dot(u_t, &lagged.virtual_rate) - dot(u_t, &e))
    } else {
        None
    };
    Ok(ConeCheck {
        member,
        distance,
        radius,
        d,
        halfspace_margin,
    })
}

/// Halfspace gap bound for one `y`: returns `None` when `y` is outside `C_e^+(u_t)`
/// (the lemma says nothing), otherwise the margin
/// `-(ε/2)‖u_t‖ - u_t'(a - y)`, non-negative when the lemma holds.
pub fn check_halfspace_gap<T: Scalar>(a: &[T], eps: T, mask: &[bool], u_t: &[T], y: &[T]) -> Option<T> {
    let e = shifted_point(a, eps / T::of(2.0), mask);
    if dot(u_t, y) < dot(u_t, &e) {
        return None;
    }
    let gap: Vec<T> = a.iter().zip(y).map(|(&x, &z)| x - z).collect();
    Some(-(eps / T::of(2.0)) * norm_sq(u_t).sqrt() - dot(u_t, &gap))
}

/// Largest `ε` with `support(u) ≥ u'(a + ε·1)` on every sampled
/// non-negative direction: `min_u (support(u) - u'a) / u'1`.
pub fn estimate_epsilon<T: Scalar>(oracle: &RateRegionOracle<T>, a: &[T], directions: &[Vec<T>]) -> Result<T> {
    let values = directions
        .par_iter()
        .map(|u| {
            let s = oracle.support(u)?;
            let mass: T = u.iter().copied().sum();
            Ok((s - dot(u, a)) / mass)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(values.into_iter().fold(T::infinity(), T::min))
}

/// `max d(u)` over sampled non-negative unit directions, `ā = a + ε·1`.
pub fn max_d_delta<T: Scalar>(oracle: &RateRegionOracle<T>, a: &[T], eps: T, directions: &[Vec<T>]) -> Result<T> {
    let abar = shifted_point(a, eps, oracle.mask());
    let values = directions
        .par_iter()
        .map(|u| d_delta_signed(oracle, &abar, u))
        .collect::<Result<Vec<T>>>()?;
    Ok(values.into_iter().fold(T::zero(), T::max))
}

/// Constants of the compact set `W₀ = {V ≤ Ω}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftConstants<T> {
    pub epsilon: T,
    pub epsilon0: T,
    pub lambda: T,
    pub max_d: T,
    pub alpha: T,
    pub omega1: T,
    /// `inf{ω > 0: √(2ωλ)/α - ω + λ ≤ -ε₀}`.
    pub omega2_small: T,
    pub omega2: T,
    pub omega: T,
}

impl<T: Scalar> DriftConstants<T> {
    pub fn new(epsilon: T, epsilon0: T, lambda: T, max_d: T) -> Result<Self> {
        if !(epsilon > T::zero()) || !(epsilon0 > T::zero()) || !(lambda >= T::zero()) {
            return Err(Error::Precondition(format!(
                "need ε > 0, ε₀ > 0, λ ≥ 0 (got {epsilon}, {epsilon0}, {lambda})"
            )));
        }
        let two = T::of(2.0);
        let alpha = if max_d > T::zero() { epsilon / (two * max_d) } else { T::infinity() };
        let omega1 = (T::one() + alpha * alpha) * (epsilon0 + lambda).powi(2) / (epsilon * epsilon);
        // With x = √ω the condition reads x² - (√(2λ)/α)x - (λ + ε₀) ≥ 0.
        let c = (two * lambda).sqrt() / alpha;
        let x = (c + (c * c + T::of(4.0) * (lambda + epsilon0)).sqrt()) / two;
        let omega2_small = x * x;
        let omega2 = (T::one() + T::one() / (alpha * alpha)) * omega2_small;
        Ok(Self {
            epsilon,
            epsilon0,
            lambda,
            max_d,
            alpha,
            omega1,
            omega2_small,
            omega2,
            omega: omega1.max(omega2),
        })
    }
}

/// One slot's evaluation of the drift condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSlot<T> {
    pub slot: usize,
    pub lyapunov: T,
    pub checked: bool,
    /// `2u_t'(a - R̃*(u_{t-1})) - ‖u_t - u_{t-1}‖² + λ` for checked slots.
    pub lhs: Option<T>,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport<T> {
    pub constants: DriftConstants<T>,
    pub slots: Vec<DriftSlot<T>>,
}

impl<T: Scalar> DriftReport<T> {
    pub fn checked(&self) -> usize {
        self.slots.iter().filter(|s| s.checked).count()
    }

    pub fn violations(&self) -> usize {
        self.slots.iter().filter(|s| s.violated).count()
    }
}

/// `λ = max_t 2(|b| + ‖R̃[t]‖²)` over a trace.
pub fn lambda_from_rates<T: Scalar>(second_moments: &[T], rates: &[Vec<T>]) -> T {
    let b: T = second_moments.iter().copied().sum();
    rates
        .iter()
        .map(|r| T::of(2.0) * (b + norm_sq(r)))
        .fold(T::of(2.0) * b, T::max)
}

/// Evaluates the drift condition on a queue path `u_0, u_1, …` (with
/// `u_{-1} = u_0`) for every state outside `W₀`.
pub fn check_drift_condition<T: Scalar>(
    oracle: &RateRegionOracle<T>,
    a: &[T],
    constants: &DriftConstants<T>,
    path: &[Vec<T>],
) -> Result<DriftReport<T>> {
    let mut slots = Vec::with_capacity(path.len());
    for (t, u) in path.iter().enumerate() {
        let prev = if t == 0 { u } else { &path[t - 1] };
        let diff: Vec<T> = u.iter().zip(prev).map(|(&x, &y)| x - y).collect();
        let v = norm_sq(u) + norm_sq(&diff);
        let checked = v > constants.omega;
        let lhs = if checked {
            let lagged = oracle.maximize(prev)?;
            let gap: Vec<T> = a.iter().zip(&lagged.virtual_rate).map(|(&x, &r)| x - r).collect();
            Some(T::of(2.0) * dot(u, &gap) - norm_sq(&diff) + constants.lambda)
        } else {
            None
        };
        slots.push(DriftSlot {
            slot: t,
            lyapunov: v,
            checked,
            violated: lhs.is_some_and(|x| x > -constants.epsilon0),
            lhs,
        });
    }
    Ok(DriftReport {
        constants: *constants,
        slots,
    })
}

/// The geometric quantities for one `(u_t, u_{t-1})` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport<T> {
    /// `u_t'(a - R̃*(u_{t-1}))`.
    pub inner_product: T,
    /// `-(ε/2)‖u_t‖`.
    pub halfspace_bound: T,
    pub d_delta: T,
    pub cone_member: bool,
    pub drift_lhs: T,
}

pub fn geometry_report<T: Scalar>(
    oracle: &RateRegionOracle<T>,
    a: &[T],
    eps: T,
    lambda: T,
    u_t: &[T],
    u_prev: &[T],
) -> Result<GeometryReport<T>> {
    let cone = cone_membership(oracle, a, eps, u_t, u_prev)?;
    let lagged = oracle.maximize(u_prev)?;
    let gap: Vec<T> = a.iter().zip(&lagged.virtual_rate).map(|(&x, &r)| x - r).collect();
    let inner = dot(u_t, &gap);
    let diff: Vec<T> = u_t.iter().zip(u_prev).map(|(&x, &y)| x - y).collect();
    Ok(GeometryReport {
        inner_product: inner,
        halfspace_bound: -(eps / T::of(2.0)) * norm_sq(u_t).sqrt(),
        d_delta: cone.d,
        cone_member: cone.member,
        drift_lhs: T::of(2.0) * inner - norm_sq(&diff) + lambda,
    })
}

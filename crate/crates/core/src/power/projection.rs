use crate::error::{Error, Result};
use crate::scalar::Scalar;

const BISECTION_STEPS: usize = 200;

/// Projection of `target` onto `{x ≥ floor, Σx = 1}` in the norm induced by
/// `diag(q)`, i.e. `argmin Σ q_j (x_j - target_j)²`.
///
/// The minimizer has the form `x_j = max(floor, target_j + τ / q_j)`; `τ` is
/// located by bisection and then recomputed in closed form on the free set.
pub fn project_simplex<T: Scalar>(target: &[T], q: &[T], floor: T) -> Result<Vec<T>> {
    let n = target.len();
    assert_eq!(n, q.len(), "one scaling entry per coordinate");
    if n == 0 {
        return Ok(Vec::new());
    }
    if T::of_usize(n) * floor > T::one() {
        return Err(Error::Config(format!("{n} links cannot each keep a share of {floor}")));
    }
    if target.iter().chain(q).any(|v| !v.is_finite()) || q.iter().any(|&w| !(w > T::zero())) {
        return Err(Error::numeric("simplex projection", "non-finite target or non-positive scaling"));
    }
    let at = |tau: T| -> Vec<T> { target.iter().zip(q).map(|(&t, &w)| floor.max(t + tau / w)).collect() };
    let sum = |x: &[T]| -> T { x.iter().copied().sum() };

    let mut lo = target
        .iter()
        .zip(q)
        .map(|(&t, &w)| w * (floor - t))
        .fold(T::infinity(), T::min);
    let mut hi = target
        .iter()
        .zip(q)
        .map(|(&t, &w)| w * (T::one() - t))
        .fold(T::neg_infinity(), T::max);
    let tol = T::of(1e-12);
    for _ in 0..BISECTION_STEPS {
        let mid = (lo + hi) / T::of(2.0);
        let s = sum(&at(mid));
        if (s - T::one()).abs() <= tol * T::of(1e-2) {
            lo = mid;
            hi = mid;
            break;
        }
        if s < T::one() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= T::epsilon() * (lo.abs() + hi.abs()) {
            break;
        }
    }
    let mut tau = (lo + hi) / T::of(2.0);
    // Closed form on the free set; near-degenerate scalings may need the set
    // refined a few times before it is self-consistent.
    for _ in 0..=n {
        let free: Vec<bool> = target.iter().zip(q).map(|(&t, &w)| t + tau / w > floor).collect();
        let (mut fixed_mass, mut free_target, mut free_inv) = (T::zero(), T::zero(), T::zero());
        for j in 0..n {
            if free[j] {
                free_target = free_target + target[j];
                free_inv = free_inv + T::one() / q[j];
            } else {
                fixed_mass = fixed_mass + floor;
            }
        }
        if !(free_inv > T::zero()) {
            break;
        }
        let exact = (T::one() - fixed_mass - free_target) / free_inv;
        let x: Vec<T> = (0..n)
            .map(|j| if free[j] { target[j] + exact / q[j] } else { floor })
            .collect();
        let consistent = (0..n).all(|j| if free[j] { x[j] >= floor } else { target[j] + exact / q[j] <= floor });
        if consistent && (sum(&x) - T::one()).abs() <= tol {
            return Ok(x);
        }
        if exact == tau {
            break;
        }
        tau = exact;
    }
    let mut x = at(tau);
    let residual = sum(&x) - T::one();
    if residual.abs() > T::of(1e-9) {
        return Err(Error::numeric("simplex projection", "multiplier search did not converge"));
    }
    // Rounding-level residual: absorb it in the largest coordinate.
    let big = (0..n).fold(0, |b, j| if x[j] > x[b] { j } else { b });
    x[big] = x[big] - residual;
    Ok(x)
}

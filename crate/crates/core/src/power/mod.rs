//! Distributed solver for the throughput-optimal power control problem:
//! the power allocation (PA) and power control (PC) scaled gradient
//! projection iterations, the message exchange that feeds PC, and the
//! optimality certificate.

mod kkt;
mod projection;
mod protocol;
mod solver;
mod steps;

pub use kkt::{kkt_check, KktReport, NodeResidual};
pub use projection::project_simplex;
pub use protocol::{exchange_messages, MessageExchange};
pub use solver::{restrict_to_active, solve_topc, sweep, SolveDiagnostics, SweepRecord};
pub use steps::{gamma_floor, pa_step, pc_step, PaOutcome, PcOutcome};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-link commodity choice and differential-backlog weight for one MDB
/// subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct BacklogWeights<T> {
    pub kstar: Vec<Option<usize>>,
    pub bstar: Vec<T>,
}

impl<T: Scalar> BacklogWeights<T> {
    /// Weights without commodity labels, for exercising the optimizer directly.
    pub fn from_bstar(bstar: Vec<T>) -> Self {
        Self {
            kstar: vec![None; bstar.len()],
            bstar,
        }
    }

    pub fn zeros(links: usize) -> Self {
        Self::from_bstar(vec![T::zero(); links])
    }

    pub fn is_active(&self, l: usize) -> bool {
        self.bstar[l] > T::zero()
    }

    pub fn any_active(&self) -> bool {
        self.bstar.iter().any(|&b| b > T::zero())
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            kstar: self.kstar.clone(),
            bstar: self.bstar.iter().map(|&b| b * c).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepsizeRule<T> {
    Fixed(T),
    /// Backtracking along the projection arc until
    /// `F(x(β)) ≥ F(x) + σ ∇F'(x(β) - x)`.
    Armijo { sigma: T, shrink: T, initial: T, max_backtracks: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    Identity,
    /// Diagonal approximations of the relevant Hessian blocks.
    DiagonalHessian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    pub max_iterations: usize,
    pub kkt_tolerance: T,
    pub stepsize: StepsizeRule<T>,
    pub scaling: Scaling,
    /// Lower bound on each node's total power as a fraction of its cap;
    /// this fixes the per-node floor on `γ_i`.
    pub min_power_fraction: T,
    pub eta_floor: T,
    /// Safeguard added to the diagonal scaling entries.
    pub scaling_epsilon: T,
    /// Order in which nodes run PA within a sweep; `None` is `0..n`.
    pub node_order: Option<Vec<usize>>,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            kkt_tolerance: T::of(1e-6),
            stepsize: StepsizeRule::Armijo {
                sigma: T::of(1e-4),
                shrink: T::of(0.5),
                initial: T::one(),
                max_backtracks: 60,
            },
            scaling: Scaling::DiagonalHessian,
            min_power_fraction: T::of(1e-6),
            eta_floor: T::of(1e-12),
            scaling_epsilon: T::of(1e-8),
            node_order: None,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.kkt_tolerance > T::zero()) {
            return Err(Error::Config("kkt tolerance must be positive".into()));
        }
        if !(self.min_power_fraction > T::zero() && self.min_power_fraction < T::one()) {
            return Err(Error::Config("min power fraction must lie in (0,1)".into()));
        }
        if !(self.eta_floor >= T::zero()) || !(self.scaling_epsilon > T::zero()) {
            return Err(Error::Config("floors must be non-negative and epsilon positive".into()));
        }
        match self.stepsize {
            StepsizeRule::Fixed(b) if !(b > T::zero()) => {
                return Err(Error::Config("fixed stepsize must be positive".into()))
            }
            StepsizeRule::Armijo { sigma, shrink, initial, .. } => {
                let unit = |x: T| x > T::zero() && x < T::one();
                if !unit(sigma) || !unit(shrink) || !(initial > T::zero()) {
                    return Err(Error::Config("armijo parameters must satisfy σ, shrink ∈ (0,1)".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub(crate) fn order(&self, n: usize) -> Result<Vec<usize>> {
        match &self.node_order {
            None => Ok((0..n).collect()),
            Some(order) => {
                let mut seen = vec![false; n];
                for &i in order {
                    if i >= n || seen[i] {
                        return Err(Error::Config("node order must be a permutation".into()));
                    }
                    seen[i] = true;
                }
                if order.len() != n {
                    return Err(Error::Config("node order must be a permutation".into()));
                }
                Ok(order.clone())
            }
        }
    }
}

//! SINR, interference-plus-noise and high-SINR link capacities, together
//! with the marginal gain indicators driving the power iterations.
//!
//! Notation follows the usual CDMA model: node `i` transmits with total
//! power `P_i = P̂_i^γ_i`, split over its outgoing links by the allocation
//! fractions `η_ij`. The receiver of link `(i,j)` sees
//!
//! ```text
//! IN_ij = θ_i h_ij Σ_{k≠j} P_ik + Σ_{m≠i,j} h_mj P_m + N_j
//! C_ij  = ln(K h_ij P_ij / IN_ij)
//! ```
//!
//! The receiver's own transmissions do not enter `IN_ij` (zero diagonal gain).

use crate::error::{Error, Result};
use crate::model::NetworkModel;
use crate::power::BacklogWeights;
use crate::scalar::Scalar;

/// Node-based power variables: allocation fractions per link and the power
/// control exponent per node.
///
/// A node whose fractions are all zero is silent. Otherwise its fractions sum
/// to one and its total power is `P̂_i^γ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerState<T> {
    pub eta: Vec<T>,
    pub gamma: Vec<T>,
}

impl<T: Scalar> PowerState<T> {
    /// Uniform allocation over every outgoing link, full power.
    pub fn uniform(model: &NetworkModel<T>) -> Self {
        let mut eta = vec![T::zero(); model.link_count()];
        for i in 0..model.node_count() {
            let out = model.out_links(i);
            for &l in out {
                eta[l] = T::one() / T::of_usize(out.len());
            }
        }
        Self {
            eta,
            gamma: vec![T::one(); model.node_count()],
        }
    }

    /// Uniform allocation over the weighted links only; nodes without a
    /// weighted link are silent.
    pub fn uniform_active(model: &NetworkModel<T>, weights: &BacklogWeights<T>) -> Self {
        let mut eta = vec![T::zero(); model.link_count()];
        for i in 0..model.node_count() {
            let active: Vec<usize> = model.out_links(i).iter().copied().filter(|&l| weights.is_active(l)).collect();
            for &l in &active {
                eta[l] = T::one() / T::of_usize(active.len());
            }
        }
        Self {
            eta,
            gamma: vec![T::one(); model.node_count()],
        }
    }

    pub fn node_power(&self, model: &NetworkModel<T>, i: usize) -> T {
        let share: T = model.out_links(i).iter().map(|&l| self.eta[l]).sum();
        if share > T::zero() {
            model.power_cap(i).powf(self.gamma[i]) * share
        } else {
            T::zero()
        }
    }

    pub fn link_power(&self, model: &NetworkModel<T>, l: usize) -> T {
        let i = model.link(l).from;
        if self.eta[l] > T::zero() {
            model.power_cap(i).powf(self.gamma[i]) * self.eta[l]
        } else {
            T::zero()
        }
    }

    /// Per-link transmit powers.
    pub fn link_powers(&self, model: &NetworkModel<T>) -> Vec<T> {
        (0..model.link_count()).map(|l| self.link_power(model, l)).collect()
    }

    pub fn is_silent(&self, model: &NetworkModel<T>, i: usize) -> bool {
        model.out_links(i).iter().all(|&l| self.eta[l] == T::zero())
    }
}

/// Physical-layer measurements induced by a power state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMetrics<T> {
    pub power: Vec<T>,
    pub node_power: Vec<T>,
    /// `IN_ij` per link.
    pub interference_noise: Vec<T>,
    /// The part of `IN_ij` not caused by the link's own transmitter:
    /// `Σ_{m≠i,j} h_mj P_m + N_j`.
    pub external: Vec<T>,
    pub sinr: Vec<T>,
    /// High-SINR capacity in nats per symbol; `-inf` on unpowered links.
    pub capacity: Vec<T>,
}

/// Evaluates powers, interference, SINR and capacities for every link.
pub fn compute_metrics<T: Scalar>(model: &NetworkModel<T>, power: &PowerState<T>) -> Result<LinkMetrics<T>> {
    let n = model.node_count();
    let e = model.link_count();
    let node_power: Vec<T> = (0..n).map(|i| power.node_power(model, i)).collect();
    let link_power = power.link_powers(model);
    let k = model.processing_gain();
    let mut interference_noise = Vec::with_capacity(e);
    let mut external = Vec::with_capacity(e);
    let mut sinr = Vec::with_capacity(e);
    let mut capacity = Vec::with_capacity(e);
    for (l, link) in model.links().iter().enumerate() {
        let (i, j) = (link.from, link.to);
        let mut ext = model.noise(j);
        for (m, &pm) in node_power.iter().enumerate() {
            if m != i && m != j {
                ext = ext + model.gain(m, j) * pm;
            }
        }
        let own: T = model
            .out_links(i)
            .iter()
            .filter(|&&o| o != l)
            .map(|&o| link_power[o])
            .sum();
        let h = model.gain(i, j);
        let inn = model.self_interference(i) * h * own + ext;
        if !(inn > T::zero()) || !inn.is_finite() {
            return Err(Error::numeric(
                format!("link ({i},{j})"),
                format!("interference-plus-noise is {inn}"),
            ));
        }
        let s = k * h * link_power[l] / inn;
        let c = s.ln();
        if c.is_nan() || c == T::infinity() {
            return Err(Error::numeric(format!("link ({i},{j})"), format!("capacity is {c}")));
        }
        interference_noise.push(inn);
        external.push(ext);
        sinr.push(s);
        capacity.push(c);
    }
    Ok(LinkMetrics {
        power: link_power,
        node_power,
        interference_noise,
        external,
        sinr,
        capacity,
    })
}

/// Shannon capacity `ln(1 + SINR)` without the high-SINR approximation.
/// Diagnostic only; the optimization works with [`LinkMetrics::capacity`].
pub fn exact_capacity<T: Scalar>(metrics: &LinkMetrics<T>) -> Vec<T> {
    metrics.sinr.iter().map(|&s| s.ln_1p()).collect()
}

/// Exact SINR with the self-interference term written as `θ_i h_ij (P_i - P_ij)`.
pub fn exact_sinr<T: Scalar>(model: &NetworkModel<T>, power: &PowerState<T>) -> Vec<T> {
    let n = model.node_count();
    let pn: Vec<T> = (0..n).map(|i| power.node_power(model, i)).collect();
    model
        .links()
        .iter()
        .enumerate()
        .map(|(l, link)| {
            let (i, j) = (link.from, link.to);
            let pij = power.link_power(model, l);
            let h = model.gain(i, j);
            let mut den = model.self_interference(i) * h * (pn[i] - pij) + model.noise(j);
            for (m, &pm) in pn.iter().enumerate() {
                if m != i {
                    den = den + model.gain(m, j) * pm;
                }
            }
            model.processing_gain() * h * pij / den
        })
        .collect()
}

fn weighted_links<'a, T: Scalar>(weights: &'a BacklogWeights<T>) -> impl Iterator<Item = (usize, T)> + 'a {
    weights.bstar.iter().copied().enumerate().filter(|&(_, b)| b > T::zero())
}

/// `F = Σ b*_ij C_ij` over links with positive weight.
pub fn objective_value<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    metrics: &LinkMetrics<T>,
) -> Result<T> {
    let mut f = T::zero();
    for (l, b) in weighted_links(weights) {
        let c = metrics.capacity[l];
        if !c.is_finite() {
            let link = model.link(l);
            return Err(Error::numeric(
                format!("link ({},{})", link.from, link.to),
                "weighted link has zero power",
            ));
        }
        f = f + b * c;
    }
    Ok(f)
}

/// Convenience wrapper computing metrics first.
pub fn objective_at<T: Scalar>(model: &NetworkModel<T>, weights: &BacklogWeights<T>, power: &PowerState<T>) -> Result<T> {
    let metrics = compute_metrics(model, power)?;
    objective_value(model, weights, &metrics)
}

fn zero_power_error<T: Scalar>(model: &NetworkModel<T>, l: usize) -> Error {
    let link = model.link(l);
    Error::numeric(format!("link ({},{})", link.from, link.to), "weighted link has zero power")
}

/// Power allocation marginal gain `δη_ij = b*_ij (1/P_ij + θ_i h_ij / IN_ij)`.
/// Zero on unweighted links.
pub fn marginal_eta<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    metrics: &LinkMetrics<T>,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); model.link_count()];
    for (l, b) in weighted_links(weights) {
        let p = metrics.power[l];
        if !(p > T::zero()) {
            return Err(zero_power_error(model, l));
        }
        let link = model.link(l);
        let h = model.gain(link.from, link.to);
        out[l] = b * (T::one() / p + model.self_interference(link.from) * h / metrics.interference_noise[l]);
    }
    Ok(out)
}

/// Same indicator from the measures available at the transmitter:
/// `(b*_ij / P_ij)(1 + θ_i SINR_ij / K)`.
pub fn marginal_eta_local<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    metrics: &LinkMetrics<T>,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); model.link_count()];
    for (l, b) in weighted_links(weights) {
        let p = metrics.power[l];
        if !(p > T::zero()) {
            return Err(zero_power_error(model, l));
        }
        let theta = model.self_interference(model.link(l).from);
        out[l] = b / p * (T::one() + theta * metrics.sinr[l] / model.processing_gain());
    }
    Ok(out)
}

/// Power control marginal gain `δγ_i`; `∂F/∂γ_i = ln(P̂_i) δγ_i`.
pub fn marginal_gamma<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    metrics: &LinkMetrics<T>,
    delta_eta: &[T],
    power: &PowerState<T>,
) -> Vec<T> {
    let n = model.node_count();
    (0..n)
        .map(|i| {
            let pi = metrics.node_power[i];
            if pi == T::zero() {
                return T::zero();
            }
            let mut cross = T::zero();
            for (l, b) in weighted_links(weights) {
                let link = model.link(l);
                if link.from != i {
                    cross = cross - b * model.gain(i, link.to) / metrics.interference_noise[l];
                }
            }
            let theta = model.self_interference(i);
            let mut own = T::zero();
            for &l in model.out_links(i) {
                let b = weights.bstar[l];
                if b > T::zero() {
                    let h = model.gain(i, model.link(l).to);
                    own = own - theta * b * h / metrics.interference_noise[l] + delta_eta[l] * power.eta[l];
                }
            }
            pi * (cross + own)
        })
        .collect()
}

/// `δγ_i` with the summations re-ordered by receiver, the form the message
/// exchange is built on:
/// `P_i [ Σ_{j≠i} -h_ij Σ_{m∈I(j)} b*_mj/IN_mj + Σ_{j∈O(i)} b*_ij (1/P_i + (θη_ij - θ + 1) h_ij/IN_ij) ]`.
pub fn marginal_gamma_by_receiver<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    metrics: &LinkMetrics<T>,
    power: &PowerState<T>,
) -> Vec<T> {
    let n = model.node_count();
    let per_receiver: Vec<T> = (0..n)
        .map(|j| {
            model
                .in_links(j)
                .iter()
                .filter(|&&l| weights.is_active(l))
                .map(|&l| weights.bstar[l] / metrics.interference_noise[l])
                .sum()
        })
        .collect();
    (0..n)
        .map(|i| {
            let pi = metrics.node_power[i];
            if pi == T::zero() {
                return T::zero();
            }
            let mut acc = T::zero();
            for (j, &s) in per_receiver.iter().enumerate() {
                if j != i {
                    acc = acc - model.gain(i, j) * s;
                }
            }
            let theta = model.self_interference(i);
            for &l in model.out_links(i) {
                let b = weights.bstar[l];
                if b > T::zero() {
                    let h = model.gain(i, model.link(l).to);
                    acc = acc
                        + b * (T::one() / pi
                            + (theta * power.eta[l] - theta + T::one()) * h / metrics.interference_noise[l]);
                }
            }
            pi * acc
        })
        .collect()
}

/// Full partial derivative of `F` in `η_ij` with node `i`'s other link
/// powers held fixed, i.e. `P_i ∂F/∂P_ij`. On the simplex only differences
/// across a node's links matter, and those equal `P_i (δη_ij - δη_ik)`.
pub fn eta_partial<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    metrics: &LinkMetrics<T>,
    delta_eta: &[T],
) -> Vec<T> {
    let n = model.node_count();
    let node_terms: Vec<T> = (0..n)
        .map(|i| {
            let theta = model.self_interference(i);
            let mut acc = T::zero();
            for (l, b) in weighted_links(weights) {
                let link = model.link(l);
                let h = model.gain(i, link.to);
                if link.from == i {
                    acc = acc - b * theta * h / metrics.interference_noise[l];
                } else {
                    acc = acc - b * h / metrics.interference_noise[l];
                }
            }
            acc
        })
        .collect();
    model
        .links()
        .iter()
        .enumerate()
        .map(|(l, link)| metrics.node_power[link.from] * (node_terms[link.from] + delta_eta[l]))
        .collect()
}

/// `F` evaluated directly from raw per-link powers. Used to cross-check the
/// node-variable formulation.
pub fn objective_from_link_powers<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    link_power: &[T],
) -> T {
    let n = model.node_count();
    let mut node_power = vec![T::zero(); n];
    for (l, link) in model.links().iter().enumerate() {
        node_power[link.from] = node_power[link.from] + link_power[l];
    }
    let mut f = T::zero();
    for (l, b) in weighted_links(weights) {
        let link = model.link(l);
        let (i, j) = (link.from, link.to);
        let mut inn = model.noise(j);
        for (m, &pm) in node_power.iter().enumerate() {
            if m != i && m != j {
                inn = inn + model.gain(m, j) * pm;
            }
        }
        let h = model.gain(i, j);
        inn = inn + model.self_interference(i) * h * (node_power[i] - link_power[l]);
        f = f + b * (model.processing_gain() * h * link_power[l] / inn).ln();
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn isolated_link() -> NetworkModel<f64> {
        // P̂ = 10 so that γ = 1 gives P = 10.
        NetworkModel::new(2, [(0, 1)], vec![0.0, 1.0, 0.0, 0.0], vec![0.1; 2], vec![0.0; 2], vec![10.0; 2], 1e5)
            .unwrap()
    }

    #[test]
    fn isolated_link_capacity() {
        let m = isolated_link();
        let p = PowerState::uniform(&m);
        let met = compute_metrics(&m, &p).unwrap();
        assert!((met.sinr[0] - 1e7).abs() < 1e-6);
        assert!((met.capacity[0] - 1e7f64.ln()).abs() < 1e-12);
        assert!((met.capacity[0] - 16.1181).abs() < 1e-4);
        let w = BacklogWeights::from_bstar(vec![2.0]);
        assert!((objective_value(&m, &w, &met).unwrap() - 2.0 * 1e7f64.ln()).abs() < 1e-12);
        let zero = BacklogWeights::from_bstar(vec![0.0]);
        assert_eq!(objective_value(&m, &zero, &met).unwrap(), 0.0);
    }

    #[test]
    fn single_interferer() {
        // Transmitters 0 and 1 both send to receiver 2.
        let mut gain = vec![0.0; 9];
        gain[2] = 1.0;
        gain[5] = 1.0;
        let m: NetworkModel<f64> = NetworkModel::new(3, [(0, 2), (1, 2)], gain, vec![0.1; 3], vec![0.0; 3], vec![10.0; 3], 1e5).unwrap();
        let met = compute_metrics(&m, &PowerState::uniform(&m)).unwrap();
        assert!((met.interference_noise[0] - 10.1).abs() < 1e-12);
        assert!((met.capacity[0] - (1e5f64 * 10.0 / 10.1).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_theta_marginal_eta() {
        let m = isolated_link();
        let p = PowerState::uniform(&m);
        let met = compute_metrics(&m, &p).unwrap();
        let w = BacklogWeights::from_bstar(vec![3.0]);
        let d = marginal_eta(&m, &w, &met).unwrap();
        assert!((d[0] - 3.0 / met.power[0]).abs() < 1e-15);
        assert!((met.power[0] - 10.0).abs() < 1e-12);
        // θ = 0, one link: δγ = P δη η = b.
        let g = marginal_gamma(&m, &w, &met, &d, &p);
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn unpowered_weighted_link_is_an_error() {
        let m = isolated_link();
        let mut p = PowerState::uniform(&m);
        p.eta[0] = 0.0;
        let met = compute_metrics(&m, &p).unwrap();
        assert_eq!(met.capacity[0], f64::NEG_INFINITY);
        let w = BacklogWeights::from_bstar(vec![1.0]);
        assert!(matches!(objective_value(&m, &w, &met), Err(Error::Numeric { .. })));
        assert!(marginal_eta(&m, &w, &met).is_err());
    }

    #[test]
    fn exact_and_high_sinr_share_denominator() {
        let m = isolated_link();
        let p = PowerState::uniform(&m);
        let met = compute_metrics(&m, &p).unwrap();
        let ex = exact_sinr(&m, &p);
        assert!((ex[0] - met.sinr[0]).abs() <= 1e-9 * ex[0]);
        let c = exact_capacity(&met);
        assert!(c[0] - met.capacity[0] <= 1.0 / met.sinr[0] + 1e-15);
    }

    #[test]
    fn f32_metrics_track_f64() {
        let m = isolated_link();
        let m32 = m.cast::<f32>();
        let met = compute_metrics(&m32, &PowerState::uniform(&m32)).unwrap();
        assert!((met.capacity[0] - 1e7f32.ln()).abs() < 1e-4f32);
    }
}

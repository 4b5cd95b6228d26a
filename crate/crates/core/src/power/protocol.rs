use super::BacklogWeights;
use crate::model::NetworkModel;
use crate::phy::{LinkMetrics, PowerState};
use crate::scalar::Scalar;

/// Outcome of one round of the power control message exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageExchange<T> {
    /// `δγ_i` as assembled by each node from the messages it received.
    pub delta_gamma: Vec<T>,
    /// `Msg(j) = Σ_{m∈I(j)} b*_mj / IN_mj`, broadcast by every node.
    pub messages: Vec<T>,
    pub broadcasts: usize,
    pub feedback_values: usize,
}

impl<T> MessageExchange<T> {
    pub fn message_count(&self) -> usize {
        self.broadcasts + self.feedback_values
    }
}

/// Runs the exchange with strictly local dataflow:
///
/// 1. every transmitter `m` tells each next-hop `j` the value `b*_mj / P_mj`;
/// 2. `j` turns it into `b*_mj / IN_mj` with its own `SINR_mj` and `h_mj`,
///    sums over incoming links and broadcasts `Msg(j)`;
/// 3. node `i` adds `local_ij - h_ij Msg(j)` for next hops and `-h_ij Msg(j)`
///    for every other node, then multiplies by `P_i`.
///
/// The local measure is `b*_ij [1/P_i + (θ_i η_ij - θ_i + 1) h_ij / IN_ij]`,
/// which stays finite for `θ_i = 0`.
pub fn exchange_messages<T: Scalar>(
    model: &NetworkModel<T>,
    weights: &BacklogWeights<T>,
    power: &PowerState<T>,
    metrics: &LinkMetrics<T>,
) -> MessageExchange<T> {
    let n = model.node_count();
    let k = model.processing_gain();

    let feedback: Vec<T> = (0..model.link_count())
        .map(|l| {
            if weights.is_active(l) && metrics.power[l] > T::zero() {
                weights.bstar[l] / metrics.power[l]
            } else {
                T::zero()
            }
        })
        .collect();

    let messages: Vec<T> = (0..n)
        .map(|j| {
            model
                .in_links(j)
                .iter()
                .map(|&l| {
                    let h = model.gain(model.link(l).from, j);
                    feedback[l] * metrics.sinr[l] / (h * k)
                })
                .sum()
        })
        .collect();

    let delta_gamma = (0..n)
        .map(|i| {
            let pi = metrics.node_power[i];
            if pi == T::zero() {
                return T::zero();
            }
            let theta = model.self_interference(i);
            let mut acc = T::zero();
            for (j, &msg) in messages.iter().enumerate() {
                if j == i {
                    continue;
                }
                let h = model.gain(i, j);
                acc = acc - h * msg;
                if let Some(l) = model.link_index(i, j) {
                    let b = weights.bstar[l];
                    if b > T::zero() {
                        // IN_ij from the fed-back SINR: IN = K h P_ij / SINR.
                        let inn = k * h * metrics.power[l] / metrics.sinr[l];
                        acc = acc + b * (T::one() / pi + (theta * power.eta[l] - theta + T::one()) * h / inn);
                    }
                }
            }
            pi * acc
        })
        .collect();

    MessageExchange {
        delta_gamma,
        messages,
        broadcasts: n,
        feedback_values: model.link_count(),
    }
}

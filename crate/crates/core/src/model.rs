//! Static network description, traffic specification and random scenario
//! generation.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Directed radio channel from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub from: usize,
    pub to: usize,
}

/// Physical layer and topology of a CDMA multi-hop network.
///
/// Links are stored in sorted order and addressed by their position in that
/// order. `gain` is a dense `n x n` matrix; the diagonal is zero, meaning a
/// receiver is not interfered with by its own transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<T> {
    n: usize,
    links: Vec<Link>,
    gain: Vec<T>,
    noise: Vec<T>,
    self_interference: Vec<T>,
    power_cap: Vec<T>,
    processing_gain: T,
    out_links: Vec<Vec<usize>>,
    in_links: Vec<Vec<usize>>,
}

impl<T: Scalar> NetworkModel<T> {
    /// Builds a model. Structural problems (wrong lengths, out-of-range or
    /// duplicate links, self loops) are errors; value-level invariants are
    /// reported by [`validate_model`].
    ///
    /// `gain` is row-major: `gain[i * n + j]` is the power gain from `i` to `j`.
    pub fn new(
        n: usize,
        links: impl IntoIterator<Item = (usize, usize)>,
        gain: Vec<T>,
        noise: Vec<T>,
        self_interference: Vec<T>,
        power_cap: Vec<T>,
        processing_gain: T,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("network needs at least one node".into()));
        }
        if gain.len() != n * n {
            return Err(Error::Config(format!(
                "gain matrix has {} entries, expected {}",
                gain.len(),
                n * n
            )));
        }
        for (name, v) in [
            ("noise", &noise),
            ("selfInterference", &self_interference),
            ("powerCap", &power_cap),
        ] {
            if v.len() != n {
                return Err(Error::Config(format!("{name} has {} entries, expected {n}", v.len())));
            }
        }
        let mut set = BTreeSet::new();
        for (from, to) in links {
            if from >= n || to >= n {
                return Err(Error::Config(format!("link ({from},{to}) references a missing node")));
            }
            if from == to {
                return Err(Error::Config(format!("self loop on node {from}")));
            }
            if !set.insert(Link { from, to }) {
                return Err(Error::Config(format!("duplicate link ({from},{to})")));
            }
        }
        let links: Vec<Link> = set.into_iter().collect();
        let mut out_links = vec![Vec::new(); n];
        let mut in_links = vec![Vec::new(); n];
        for (l, link) in links.iter().enumerate() {
            out_links[link.from].push(l);
            in_links[link.to].push(l);
        }
        let mut gain = gain;
        for i in 0..n {
            gain[i * n + i] = T::zero();
        }
        Ok(Self {
            n,
            links,
            gain,
            noise,
            self_interference,
            power_cap,
            processing_gain,
            out_links,
            in_links,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, l: usize) -> Link {
        self.links[l]
    }

    pub fn link_index(&self, from: usize, to: usize) -> Option<usize> {
        self.links.binary_search(&Link { from, to }).ok()
    }

    /// Outgoing link indices of node `i`, i.e. the links to O(i).
    pub fn out_links(&self, i: usize) -> &[usize] {
        &self.out_links[i]
    }

    /// Incoming link indices of node `j`, i.e. the links from I(j).
    pub fn in_links(&self, j: usize) -> &[usize] {
        &self.in_links[j]
    }

    pub fn gain(&self, from: usize, to: usize) -> T {
        self.gain[from * self.n + to]
    }

    pub fn gain_matrix(&self) -> &[T] {
        &self.gain
    }

    pub fn noise(&self, j: usize) -> T {
        self.noise[j]
    }

    pub fn self_interference(&self, i: usize) -> T {
        self.self_interference[i]
    }

    pub fn power_cap(&self, i: usize) -> T {
        self.power_cap[i]
    }

    /// `ln` of the power cap, the scale between `gamma_i` and the node's
    /// log-power.
    pub fn log_power_cap(&self, i: usize) -> T {
        self.power_cap[i].ln()
    }

    pub fn processing_gain(&self) -> T {
        self.processing_gain
    }

    /// Copy with a different self-interference parameter on every node.
    pub fn with_self_interference(&self, theta: T) -> Self {
        let mut m = self.clone();
        m.self_interference = vec![theta; self.n];
        m
    }

    /// Weak connectivity of the link graph.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            let nbrs = self.out_links[v]
                .iter()
                .map(|&l| self.links[l].to)
                .chain(self.in_links[v].iter().map(|&l| self.links[l].from));
            for w in nbrs {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn cast<U: Scalar>(&self) -> NetworkModel<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        NetworkModel {
            n: self.n,
            links: self.links.clone(),
            gain: c(&self.gain),
            noise: c(&self.noise),
            self_interference: c(&self.self_interference),
            power_cap: c(&self.power_cap),
            processing_gain: U::of(self.processing_gain.as_f64()),
            out_links: self.out_links.clone(),
            in_links: self.in_links.clone(),
        }
    }
}

/// Distribution of the bits entering one queue in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arrival {
    Poisson { mean: f64 },
    /// `bits` with probability `prob`, otherwise nothing.
    OnOff { bits: f64, prob: f64 },
}

impl Arrival {
    pub fn mean(&self) -> f64 {
        match *self {
            Arrival::Poisson { mean } => mean,
            Arrival::OnOff { bits, prob } => bits * prob,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            Arrival::Poisson { mean } => mean + mean * mean,
            Arrival::OnOff { bits, prob } => bits * bits * prob,
        }
    }

    pub fn zero_mass(&self) -> f64 {
        match *self {
            Arrival::Poisson { mean } => (-mean).exp(),
            Arrival::OnOff { bits, prob } => {
                if bits == 0.0 {
                    1.0
                } else {
                    1.0 - prob
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Arrival::Poisson { mean } => {
                if mean <= 0.0 {
                    0.0
                } else {
                    Poisson::new(mean).expect("positive mean").sample(rng)
                }
            }
            Arrival::OnOff { bits, prob } => {
                if rng.random::<f64>() < prob {
                    bits
                } else {
                    0.0
                }
            }
        }
    }
}

/// One traffic type: where it exits and where it enters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Commodity {
    pub destinations: Vec<usize>,
    /// Exogenous arrivals as `(node, distribution)`; nodes not listed get none.
    pub arrivals: Vec<(usize, Arrival)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub commodities: Vec<Commodity>,
}

impl TrafficSpec {
    pub fn commodity_count(&self) -> usize {
        self.commodities.len()
    }

    pub fn is_destination(&self, node: usize, k: usize) -> bool {
        self.commodities[k].destinations.contains(&node)
    }

    /// Node `i` keeps a buffer for `k` unless it is one of `k`'s destinations.
    pub fn has_queue(&self, node: usize, k: usize) -> bool {
        !self.is_destination(node, k)
    }

    /// Dense node-major mask over `(node, commodity)` pairs.
    pub fn queue_mask(&self, n: usize) -> Vec<bool> {
        let kc = self.commodity_count();
        (0..n * kc).map(|q| self.has_queue(q / kc, q % kc)).collect()
    }

    /// Per-queue (dense) first moments `a_i^k`.
    pub fn mean_vector(&self, n: usize) -> Vec<f64> {
        let kc = self.commodity_count();
        let mut a = vec![0.0; n * kc];
        for (k, c) in self.commodities.iter().enumerate() {
            for &(i, arr) in &c.arrivals {
                a[i * kc + k] += arr.mean();
            }
        }
        a
    }

    /// Per-queue (dense) second moments `b_i^k`.
    pub fn second_moment_vector(&self, n: usize) -> Vec<f64> {
        let kc = self.commodity_count();
        let mut b = vec![0.0; n * kc];
        for (k, c) in self.commodities.iter().enumerate() {
            for &(i, arr) in &c.arrivals {
                b[i * kc + k] += arr.second_moment();
            }
        }
        b
    }
}

/// A model together with its traffic and (for generated scenarios) the node
/// layout and seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub model: NetworkModel<T>,
    pub traffic: TrafficSpec,
    pub positions: Option<Vec<[f64; 2]>>,
    pub seed: Option<u64>,
}

/// One broken invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: String,
    pub element: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.invariant, self.element)
    }
}

fn violation(invariant: &str, element: impl Into<String>) -> Violation {
    Violation {
        invariant: invariant.to_string(),
        element: element.into(),
    }
}

pub fn validate_model<T: Scalar>(model: &NetworkModel<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = model.node_count();
    if !model.is_connected() {
        out.push(violation("graph not connected", "topology"));
    }
    for link in model.links() {
        let h = model.gain(link.from, link.to);
        if !(h > T::zero()) || !h.is_finite() {
            out.push(violation(
                "link gain must be positive and finite",
                format!("link ({},{})", link.from, link.to),
            ));
        }
    }
    for i in 0..n {
        for j in 0..n {
            let h = model.gain(i, j);
            if i != j && (h < T::zero() || !h.is_finite()) {
                out.push(violation(
                    "gain must be non-negative and finite",
                    format!("pair ({i},{j})"),
                ));
            }
        }
        if !(model.noise(i) > T::zero()) {
            out.push(violation("noise must be positive", format!("node {i}")));
        }
        if !(model.power_cap(i) > T::one()) {
            out.push(violation("powerCap must exceed 1", format!("node {i}")));
        }
        let th = model.self_interference(i);
        if !(th >= T::zero() && th <= T::one()) {
            out.push(violation("selfInterference must lie in [0,1]", format!("node {i}")));
        }
    }
    if !(model.processing_gain() > T::zero()) {
        out.push(violation("processingGain must be positive", "K"));
    }
    out
}

pub fn validate_traffic(traffic: &TrafficSpec, n: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    for (k, c) in traffic.commodities.iter().enumerate() {
        if c.destinations.is_empty() {
            out.push(violation("commodity needs a destination", format!("commodity {k}")));
        }
        if c.destinations.iter().any(|&d| d >= n) {
            out.push(violation("destination out of range", format!("commodity {k}")));
        }
        for &(i, arr) in &c.arrivals {
            let elem = format!("commodity {k} at node {i}");
            if i >= n {
                out.push(violation("arrival node out of range", elem));
                continue;
            }
            if c.destinations.contains(&i) {
                out.push(violation("no node queues traffic destined to itself", elem.clone()));
            }
            let (m, s) = (arr.mean(), arr.second_moment());
            if !(m.is_finite() && s.is_finite() && m >= 0.0) {
                out.push(violation("arrival moments must be finite", elem.clone()));
            }
            if let Arrival::OnOff { prob, bits } = arr {
                if !(0.0..=1.0).contains(&prob) || bits < 0.0 {
                    out.push(violation("on/off arrival parameters out of range", elem.clone()));
                }
            }
            if !(arr.zero_mass() > 0.0) {
                out.push(violation("arrivals need positive mass at zero", elem));
            }
        }
    }
    out
}

/// Parameters of the random disc generator. Defaults are the published
/// experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub nodes: usize,
    pub arrival_mean: f64,
    pub seed: u64,
    pub processing_gain: f64,
    pub self_interference: f64,
    pub power_cap: f64,
    pub noise: f64,
    /// Link radius is `radius_factor / sqrt(nodes)`.
    pub radius_factor: f64,
}

impl GeneratorParams {
    pub fn new(nodes: usize, arrival_mean: f64, seed: u64) -> Self {
        Self {
            nodes,
            arrival_mean,
            seed,
            processing_gain: 1e5,
            self_interference: 0.25,
            power_cap: 100.0,
            noise: 0.1,
            radius_factor: 2.5,
        }
    }

    pub fn link_radius(&self) -> f64 {
        self.radius_factor / (self.nodes as f64).sqrt()
    }
}

const MAX_LAYOUT_ATTEMPTS: usize = 100;
const MIN_SEPARATION: f64 = 1e-9;

fn sample_disc(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let r = rng.random::<f64>().sqrt();
            let phi = std::f64::consts::TAU * rng.random::<f64>();
            [r * phi.cos(), r * phi.sin()]
        })
        .collect()
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Builds the model induced by a node layout: links between nodes closer
/// than `radius` (both directions) and `d^-4` path gain on every pair.
pub fn model_from_positions<T: Scalar>(
    positions: &[[f64; 2]],
    radius: f64,
    params: &GeneratorParams,
) -> Result<NetworkModel<T>> {
    let n = positions.len();
    let mut gain = vec![T::zero(); n * n];
    let mut links = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distance(positions[i], positions[j]);
            gain[i * n + j] = T::of(d.powi(-4));
            if d < radius {
                links.push((i, j));
            }
        }
    }
    NetworkModel::new(
        n,
        links,
        gain,
        vec![T::of(params.noise); n],
        vec![T::of(params.self_interference); n],
        vec![T::of(params.power_cap); n],
        T::of(params.processing_gain),
    )
}

/// Random disc scenario: uniform node layout, range-limited links, one
/// Poisson session per node towards a uniformly chosen other node.
/// Deterministic in `params`.
pub fn generate_scenario<T: Scalar>(params: &GeneratorParams) -> Result<Scenario<T>> {
    let n = params.nodes;
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 nodes, got {n}")));
    }
    if !(params.arrival_mean >= 0.0) || !params.arrival_mean.is_finite() {
        return Err(Error::Config("arrival mean must be a finite non-negative number".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let radius = params.link_radius();
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let positions = sample_disc(&mut rng, n);
        let collide = (0..n).any(|i| (i + 1..n).any(|j| distance(positions[i], positions[j]) < MIN_SEPARATION));
        if collide {
            continue;
        }
        let model = model_from_positions::<T>(&positions, radius, params)?;
        if !model.is_connected() {
            continue;
        }
        let commodities = (0..n)
            .map(|src| {
                let mut dst = rng.random_range(0..n - 1);
                if dst >= src {
                    dst += 1;
                }
                Commodity {
                    destinations: vec![dst],
                    arrivals: vec![(src, Arrival::Poisson { mean: params.arrival_mean })],
                }
            })
            .collect();
        return Ok(Scenario {
            model,
            traffic: TrafficSpec { commodities },
            positions: Some(positions),
            seed: Some(params.seed),
        });
    }
    Err(Error::Generation(format!(
        "no connected layout for {n} nodes after {MAX_LAYOUT_ATTEMPTS} attempts (seed {})",
        params.seed
    )))
}

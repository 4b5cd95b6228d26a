//! Versioned TOML scenario files.
//!
//! ```toml
//! format = "bpsim-scenario"
//! version = 1
//! nodes = 3
//! processing_gain = 100000.0
//! noise = [0.1, 0.1, 0.1]
//! self_interference = [0.25, 0.25, 0.25]
//! power_cap = [100.0, 100.0, 100.0]
//! links = [[0, 1], [1, 2]]
//! # gains[i][j]: power gain from i to j; the diagonal is ignored
//! gains = [[0.0, 1.0, 0.01], [0.01, 0.0, 1.0], [0.01, 0.01, 0.0]]
//! seed = 7                     # optional
//! positions = [[0.1, 0.2], …]  # optional
//!
//! [[commodities]]
//! destinations = [2]
//! arrivals = [{ node = 0, kind = "poisson", mean = 4.0 }]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_model, validate_traffic, Arrival, Commodity, NetworkModel, Scenario, TrafficSpec};

pub const FORMAT_NAME: &str = "bpsim-scenario";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    format: String,
    version: u32,
    nodes: usize,
    processing_gain: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    noise: Vec<f64>,
    self_interference: Vec<f64>,
    power_cap: Vec<f64>,
    links: Vec<[usize; 2]>,
    gains: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    commodities: Vec<CommodityEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommodityEntry {
    destinations: Vec<usize>,
    #[serde(default)]
    arrivals: Vec<ArrivalEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrivalEntry {
    node: usize,
    #[serde(flatten)]
    arrival: Arrival,
}

pub fn scenario_to_toml(scenario: &Scenario<f64>) -> Result<String> {
    let m = &scenario.model;
    let n = m.node_count();
    let file = ScenarioFile {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        nodes: n,
        processing_gain: m.processing_gain(),
        seed: scenario.seed,
        noise: (0..n).map(|j| m.noise(j)).collect(),
        self_interference: (0..n).map(|i| m.self_interference(i)).collect(),
        power_cap: (0..n).map(|i| m.power_cap(i)).collect(),
        links: m.links().iter().map(|l| [l.from, l.to]).collect(),
        gains: (0..n).map(|i| (0..n).map(|j| m.gain(i, j)).collect()).collect(),
        positions: scenario.positions.clone(),
        commodities: scenario
            .traffic
            .commodities
            .iter()
            .map(|c| CommodityEntry {
                destinations: c.destinations.clone(),
                arrivals: c.arrivals.iter().map(|&(node, arrival)| ArrivalEntry { node, arrival }).collect(),
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))
}

/// Parses and validates a scenario. Any broken model or traffic invariant
/// is an error listing every violation.
pub fn scenario_from_toml(text: &str) -> Result<Scenario<f64>> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if file.format != FORMAT_NAME {
        return Err(Error::Format(format!("expected format = \"{FORMAT_NAME}\", found \"{}\"", file.format)));
    }
    if file.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {} (this build reads {FORMAT_VERSION})", file.version)));
    }
    let n = file.nodes;
    if file.gains.len() != n || file.gains.iter().any(|r| r.len() != n) {
        return Err(Error::Format(format!("gains must be {n} rows of {n} entries")));
    }
    if let Some(p) = &file.positions {
        if p.len() != n {
            return Err(Error::Format(format!("positions has {} entries, expected {n}", p.len())));
        }
    }
    let model = NetworkModel::new(
        n,
        file.links.iter().map(|l| (l[0], l[1])),
        file.gains.into_iter().flatten().collect(),
        file.noise,
        file.self_interference,
        file.power_cap,
        file.processing_gain,
    )?;
    let traffic = TrafficSpec {
        commodities: file
            .commodities
            .into_iter()
            .map(|c| Commodity {
                destinations: c.destinations,
                arrivals: c.arrivals.into_iter().map(|a| (a.node, a.arrival)).collect(),
            })
            .collect(),
    };
    let mut violations = validate_model(&model);
    violations.extend(validate_traffic(&traffic, n));
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Config(format!("invalid scenario: {}", list.join("; "))));
    }
    Ok(Scenario {
        model,
        traffic,
        positions: file.positions,
        seed: file.seed,
    })
}

pub fn load_scenario(path: &Path) -> Result<Scenario<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
    scenario_from_toml(&text)
}

pub fn save_scenario(scenario: &Scenario<f64>, path: &Path) -> Result<()> {
    fs::write(path, scenario_to_toml(scenario)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_scenario, GeneratorParams};

    #[test]
    fn round_trip_is_exact() {
        let s = generate_scenario::<f64>(&GeneratorParams::new(6, 3.0, 21)).unwrap();
        let text = scenario_to_toml(&s).unwrap();
        let back = scenario_from_toml(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(scenario_to_toml(&back).unwrap(), text);
    }

    #[test]
    fn hand_written_with_on_off() {
        let text = r#"
format = "bpsim-scenario"
version = 1
nodes = 2
processing_gain = 1e5
noise = [0.1, 0.1]
self_interference = [0.0, 0.0]
power_cap = [10.0, 10.0]
links = [[0, 1], [1, 0]]
gains = [[0.0, 2.0], [2.0, 0.0]]

[[commodities]]
destinations = [1]
arrivals = [{ node = 0, kind = "on_off", bits = 3.0, prob = 0.5 }]
"#;
        let s = scenario_from_toml(text).unwrap();
        assert_eq!(s.model.gain(0, 1), 2.0);
        assert_eq!(s.traffic.commodities[0].arrivals[0].1, Arrival::OnOff { bits: 3.0, prob: 0.5 });
        assert!(s.positions.is_none());
    }

    #[test]
    fn rejects_bad_files() {
        let s = generate_scenario::<f64>(&GeneratorParams::new(4, 1.0, 2)).unwrap();
        let good = scenario_to_toml(&s).unwrap();
        let wrong_version = good.replace("version = 1", "version = 9");
        assert!(matches!(scenario_from_toml(&wrong_version), Err(Error::Format(_))));
        let wrong_name = good.replace("bpsim-scenario", "other");
        assert!(matches!(scenario_from_toml(&wrong_name), Err(Error::Format(_))));
        let bad_cap = good.replacen("power_cap = [100.0", "power_cap = [0.5", 1);
        match scenario_from_toml(&bad_cap) {
            Err(Error::Config(msg)) => assert!(msg.contains("powerCap must exceed 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(scenario_from_toml("not toml ===").is_err());
    }
}

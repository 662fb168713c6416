#![allow(dead_code)]

use std::path::{Path, PathBuf};

use gridmarket::grid::{load_scenario, parse_scenario};
use gridmarket::market::{MarketOptions, SlotProblem, Simulation};
use gridmarket::Scenario64;

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn shipped(name: &str) -> Scenario64 {
    load_scenario(scenario_path(name)).unwrap()
}

/// Two buses joined by one line, an aggregator on bus 1 and the substation on
/// bus 0. `appliances` is the JSON array of the aggregator's appliances.
pub fn two_bus(appliances: &str, horizon: usize, substation: &str) -> Scenario64 {
    let text = format!(
        r#"{{
  "base": {{"mva": 1.0, "kv": 4.16}},
  "network": {{"slack": 0,
    "buses": [{{"id": 0, "v_min": 0.9, "v_max": 1.1}}, {{"id": 1, "v_min": 0.9, "v_max": 1.1}}],
    "branches": [{{"from": 0, "to": 1, "r": 0.02, "x": 0.06, "s_max": 5.0}}]}},
  "aggregators": [{{"bus": 1, "power_factor": 1.0, "appliances": {appliances}}}],
  "generators": [{substation}],
  "market": {{"horizon": {horizon}, "vartheta": 1.0, "xi_theta": 1e-8, "xi_v": 1e-8,
    "step": {{"schedule": "constant", "base": 1.0}}, "seed": 3}}
}}"#
    );
    parse_scenario(&text, "two-bus").unwrap()
}

pub const SUBSTATION: &str =
    r#"{"id": "substation", "bus": 0, "a2": 1.0, "a1": 0.1, "p_min": 0.0, "p_max": 4.0, "q_min": -2.0, "q_max": 2.0}"#;

/// The problem the market faces at slot 1.
pub fn first_slot(scenario: &Scenario64) -> (Simulation<f64>, SlotProblem<f64>) {
    let mut sim = Simulation::new(scenario, MarketOptions::default()).unwrap();
    sim.begin_slot().unwrap();
    let problem = sim.slot_problem();
    (sim, problem)
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

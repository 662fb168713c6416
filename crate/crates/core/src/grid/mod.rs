//! Network data model and scenario files.
//!
//! A scenario is one JSON document with the keys `base`, `network`,
//! `aggregators`, `generators` and `market`; `schema/scenario.schema.json`
//! describes it. All electrical quantities are per-unit on `base`.

mod normalize;
mod synth;

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::appliance::{Appliance, Warning};
use crate::error::{Error, Result};
use crate::generator::GeneratorAsset;
use crate::scalar::Scalar;

pub use normalize::{normalize_buses, BusRemap};
pub use synth::{generate_scenario, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Aggregator,
    Generator,
    Slack,
    VirtualAggregator,
    /// Hosts an aggregator and a generator; removed by [`normalize_buses`].
    Shared,
    /// Hosts no entity; becomes a virtual aggregator.
    #[default]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Bus<T> {
    pub id: usize,
    #[serde(default)]
    pub kind: BusKind,
    #[serde(default)]
    pub g_shunt: T,
    #[serde(default)]
    pub b_shunt: T,
    pub v_min: T,
    pub v_max: T,
}

fn default_polygon_angle<T: Scalar>() -> T {
    T::lit(PI / 6.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Branch<T> {
    pub from: usize,
    pub to: usize,
    pub r: T,
    pub x: T,
    pub s_max: T,
    #[serde(default = "default_polygon_angle")]
    pub polygon_angle: T,
}

impl<T: Scalar> Branch<T> {
    /// Number of polygon sides, `2π/α`.
    pub fn sides(&self) -> usize {
        (T::lit(2.0 * PI) / self.polygon_angle).as_f64().round() as usize
    }

    pub fn is_zero_impedance(&self) -> bool {
        self.r == T::zero() && self.x == T::zero()
    }
}

fn default_split_reactance<T: Scalar>() -> T {
    T::lit(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NetworkModel<T> {
    pub slack: usize,
    /// Reactance substituted for zero-impedance branches.
    #[serde(default = "default_split_reactance")]
    pub split_reactance: T,
    pub buses: Vec<Bus<T>>,
    pub branches: Vec<Branch<T>>,
}

impl<T: Scalar> NetworkModel<T> {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Series impedance of a branch with the zero-impedance substitute applied.
    pub fn impedance(&self, br: &Branch<T>) -> (T, T) {
        if br.is_zero_impedance() {
            (T::zero(), self.split_reactance)
        } else {
            (br.r, br.x)
        }
    }

    /// Buses that cannot reach the slack through the branches.
    pub fn unreachable(&self) -> Vec<usize> {
        let n = self.n();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            if br.from < n && br.to < n {
                adj[br.from].push(br.to);
                adj[br.to].push(br.from);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.slack];
        seen[self.slack] = true;
        while let Some(b) = stack.pop() {
            for &c in &adj[b] {
                if !seen[c] {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        (0..n).filter(|&b| !seen[b]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Validation("network has no buses".into()));
        }
        for (i, b) in self.buses.iter().enumerate() {
            if b.id != i {
                return Err(Error::Validation(format!("bus ids must be 0..{n} in order, found {} at position {i}", b.id)));
            }
            if !(b.v_min > T::zero() && b.v_min <= b.v_max) {
                return Err(Error::Validation(format!("bus {i}: need 0 < v_min <= v_max")));
            }
        }
        if self.slack >= n {
            return Err(Error::Validation(format!("slack bus {} does not exist", self.slack)));
        }
        let slack = &self.buses[self.slack];
        if slack.v_min > T::one() || slack.v_max < T::one() {
            return Err(Error::Validation("slack voltage bounds must contain 1 pu".into()));
        }
        if !(self.split_reactance > T::zero()) {
            return Err(Error::Validation("split_reactance must be positive".into()));
        }
        for (k, br) in self.branches.iter().enumerate() {
            let bad = |msg: &str| Err(Error::Validation(format!("branch {k} ({}-{}): {msg}", br.from, br.to)));
            if br.from >= n || br.to >= n || br.from == br.to {
                return bad("endpoints must be two distinct existing buses");
            }
            if br.r < T::zero() || !(br.x > T::zero() || br.is_zero_impedance()) {
                return bad("need r >= 0 and x > 0 (or r = x = 0)");
            }
            if !(br.s_max > T::zero()) {
                return bad("s_max must be positive");
            }
            let ratio = (T::lit(2.0 * PI) / br.polygon_angle).as_f64();
            if !(ratio >= 4.0 - 1e-9 && (ratio - ratio.round()).abs() < 1e-6) {
                return bad("polygon_angle must divide 2π into at least 4 parts");
            }
        }
        let unreachable = self.unreachable();
        if !unreachable.is_empty() {
            return Err(Error::Disconnected { unreachable });
        }
        Ok(())
    }
}

/// Per-unit base declared in the file header. Informational: the model works
/// in per-unit throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Base {
    pub mva: f64,
    pub kv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AggregatorConfig<T> {
    pub bus: usize,
    pub power_factor: T,
    #[serde(default)]
    pub appliances: Vec<Appliance<T>>,
}

impl<T: Scalar> AggregatorConfig<T> {
    /// `√((1 - PF²)/PF²)`, the reactive share of active demand.
    pub fn reactive_factor(&self) -> T {
        reactive_factor(self.power_factor)
    }
}

pub fn reactive_factor<T: Scalar>(pf: T) -> T {
    ((T::one() - pf * pf) / (pf * pf)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// `base / √k`
    InvSqrt,
    /// `base / √(1 + k/delay)`
    InvSqrtDelayed,
    /// `base · (1 + (k - 1)/delay)`: growing price steps with shrinking
    /// agent steps, the accelerated primal-dual pattern for strongly
    /// concave agents.
    Increasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StepConfig<T> {
    pub schedule: StepSchedule,
    pub base: T,
    #[serde(default)]
    pub delay: T,
}

impl<T: Scalar> StepConfig<T> {
    /// Step size at iteration `k >= 1`.
    pub fn at(&self, k: usize) -> T {
        let k = T::of_usize(k.max(1));
        match self.schedule {
            StepSchedule::Constant => self.base,
            StepSchedule::InvSqrt => self.base / k.sqrt(),
            StepSchedule::InvSqrtDelayed => {
                let d = self.delay.max(T::one());
                self.base / (T::one() + k / d).sqrt()
            }
            StepSchedule::Increasing => {
                let d = self.delay.max(T::one());
                self.base * (T::one() + (k - T::one()) / d)
            }
        }
    }
}

fn default_prox_scale<T: Scalar>() -> T {
    T::lit(0.5)
}
fn default_max_iters() -> usize {
    2000
}
fn default_slot_hours() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MarketConfig<T> {
    pub horizon: usize,
    #[serde(default = "default_slot_hours")]
    pub slot_hours: f64,
    /// DNO risk weight ϑ^c.
    pub vartheta: T,
    /// Stopping tolerance on angle changes.
    pub xi_theta: T,
    /// Stopping tolerance on voltage-magnitude changes.
    pub xi_v: T,
    pub step: StepConfig<T>,
    /// Fraction of the largest stable agent step used for proximal responses.
    #[serde(default = "default_prox_scale")]
    pub prox_scale: T,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Scenario<T> {
    pub base: Base,
    pub network: NetworkModel<T>,
    pub aggregators: Vec<AggregatorConfig<T>>,
    pub generators: Vec<GeneratorAsset<T>>,
    pub market: MarketConfig<T>,
}

/// Which entity sits on a bus after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entity {
    Aggregator(usize),
    Generator(usize),
    /// Virtual aggregator with zero demand, or the slack without a generator.
    None,
}

impl<T: Scalar> Scenario<T> {
    pub fn horizon(&self) -> usize {
        self.market.horizon
    }

    pub fn n(&self) -> usize {
        self.network.n()
    }

    /// Entity index per bus.
    pub fn entities(&self) -> Vec<Entity> {
        let mut out = vec![Entity::None; self.n()];
        for (i, a) in self.aggregators.iter().enumerate() {
            out[a.bus] = Entity::Aggregator(i);
        }
        for (j, g) in self.generators.iter().enumerate() {
            out[g.bus] = Entity::Generator(j);
        }
        out
    }

    /// The generator on the slack bus, if any.
    pub fn slack_generator(&self) -> Option<usize> {
        self.generators.iter().position(|g| g.bus == self.network.slack)
    }

    /// Convert the scalar type through the serialized form.
    pub fn cast<U: Scalar>(&self) -> Scenario<U> {
        let value = serde_json::to_value(self).expect("scenario serializes");
        serde_json::from_value(value).expect("scenario round-trips between scalar types")
    }

    /// Check every invariant of a normalized scenario. Returns non-fatal
    /// warnings.
    pub fn validate(&self) -> Result<Vec<Warning>> {
        self.network.validate()?;
        let n = self.n();
        let m = &self.market;
        if m.horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if !(m.xi_theta > T::zero() && m.xi_v > T::zero()) {
            return Err(Error::Validation("stopping tolerances must be positive".into()));
        }
        if !(m.vartheta >= T::zero()) {
            return Err(Error::Validation("vartheta must be nonnegative".into()));
        }
        if !(m.step.base > T::zero()) || !(m.prox_scale > T::zero()) || m.max_iters == 0 {
            return Err(Error::Validation("step base, prox_scale and max_iters must be positive".into()));
        }
        if !(m.slot_hours > 0.0) {
            return Err(Error::Validation("slot_hours must be positive".into()));
        }
        check_placement(n, self.network.slack, &self.aggregators, &self.generators)?;
        let mut warnings = Vec::new();
        for a in &self.aggregators {
            if !(a.power_factor > T::zero() && a.power_factor <= T::one()) {
                return Err(Error::Validation(format!("aggregator at bus {}: power factor must be in (0, 1]", a.bus)));
            }
            let mut ids = HashSet::new();
            for app in &a.appliances {
                if !ids.insert(app.id.as_str()) {
                    return Err(Error::Validation(format!("aggregator at bus {}: appliance id {} repeats", a.bus, app.id)));
                }
                warnings.extend(app.validate(m.horizon)?);
            }
        }
        for g in &self.generators {
            g.validate(m.horizon)?;
        }
        for (b, e) in self.entities().into_iter().enumerate() {
            let want = if b == self.network.slack {
                BusKind::Slack
            } else {
                match e {
                    Entity::Aggregator(_) => BusKind::Aggregator,
                    Entity::Generator(_) => BusKind::Generator,
                    Entity::None => BusKind::VirtualAggregator,
                }
            };
            if self.network.buses[b].kind != want {
                return Err(Error::Validation(format!(
                    "bus {b} has kind {:?} but its entities make it {want:?}",
                    self.network.buses[b].kind
                )));
            }
        }
        Ok(warnings)
    }
}

fn check_placement<T>(n: usize, slack: usize, aggs: &[AggregatorConfig<T>], gens: &[GeneratorAsset<T>]) -> Result<()> {
    let mut agg_at = HashSet::new();
    for a in aggs {
        if a.bus >= n {
            return Err(Error::Validation(format!("aggregator references missing bus {}", a.bus)));
        }
        if a.bus == slack {
            return Err(Error::Validation(format!("aggregator on slack bus {slack}; only a generator may share it")));
        }
        if !agg_at.insert(a.bus) {
            return Err(Error::DuplicateEntity {
                bus: a.bus,
                role: "aggregator",
            });
        }
    }
    let mut gen_at = HashSet::new();
    for g in gens {
        if g.bus >= n {
            return Err(Error::Validation(format!("generator {} references missing bus {}", g.id, g.bus)));
        }
        if !gen_at.insert(g.bus) {
            return Err(Error::DuplicateEntity {
                bus: g.bus,
                role: "generator",
            });
        }
    }
    Ok(())
}

/// Read, normalize and validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario<f64>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&shown, e))?;
    parse_scenario(&text, &shown)
}

/// [`load_scenario`] on an in-memory document; `origin` names it in errors.
pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario<f64>> {
    let raw: Scenario<f64> = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    prepare(raw)
}

/// Derive bus kinds from entity placement, split shared buses and validate.
pub fn prepare(mut raw: Scenario<f64>) -> Result<Scenario<f64>> {
    let n = raw.n();
    for (i, b) in raw.network.buses.iter().enumerate() {
        if b.id != i {
            return Err(Error::Validation(format!("bus ids must be 0..{n} in order, found {} at position {i}", b.id)));
        }
    }
    if raw.network.slack >= n {
        return Err(Error::Validation(format!("slack bus {} does not exist", raw.network.slack)));
    }
    check_placement(n, raw.network.slack, &raw.aggregators, &raw.generators)?;
    let declared: Vec<BusKind> = raw.network.buses.iter().map(|b| b.kind).collect();
    let has_agg: HashSet<usize> = raw.aggregators.iter().map(|a| a.bus).collect();
    let has_gen: HashSet<usize> = raw.generators.iter().map(|g| g.bus).collect();
    for (b, bus) in raw.network.buses.iter_mut().enumerate() {
        bus.kind = if b == raw.network.slack {
            BusKind::Slack
        } else {
            match (has_agg.contains(&b), has_gen.contains(&b)) {
                (true, true) => BusKind::Shared,
                (true, false) => BusKind::Aggregator,
                (false, true) => BusKind::Generator,
                (false, false) => BusKind::Empty,
            }
        };
    }
    let (network, remap) = normalize_buses(&raw.network)?;
    for (b, &kind) in declared.iter().enumerate() {
        if kind != BusKind::Empty && kind != BusKind::Shared && kind != network.buses[b].kind {
            return Err(Error::Validation(format!(
                "bus {b} declared {kind:?} but its entities make it {:?}",
                network.buses[b].kind
            )));
        }
    }
    for g in &mut raw.generators {
        g.bus = remap.generator[g.bus];
    }
    raw.network = network;
    raw.validate()?;
    Ok(raw)
}

pub fn write_scenario<T: Scalar>(path: impl AsRef<Path>, scenario: &Scenario<T>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(scenario).expect("scenario serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Appliance lookup by id within an aggregator.
pub(crate) fn appliance_index<T>(agg: &AggregatorConfig<T>) -> HashMap<&str, usize> {
    agg.appliances.iter().enumerate().map(|(i, a)| (a.id.as_str(), i)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const TWO_BUS: &str = r#"{
      "base": {"mva": 1.0, "kv": 12.47},
      "network": {
        "slack": 0,
        "buses": [
          {"id": 0, "v_min": 0.95, "v_max": 1.05},
          {"id": 1, "v_min": 0.95, "v_max": 1.05}
        ],
        "branches": [{"from": 0, "to": 1, "r": 0.0, "x": 0.1, "s_max": 2.0}]
      },
      "aggregators": [{"bus": 1, "power_factor": 0.9, "appliances": []}],
      "generators": [],
      "market": {"horizon": 2, "vartheta": 1.0, "xi_theta": 0.01, "xi_v": 0.01,
                 "step": {"schedule": "constant", "base": 1.0}, "seed": 3}
    }"#;

    #[test]
    fn loads_minimal_two_bus() {
        let s = parse_scenario(TWO_BUS, "two_bus").unwrap();
        assert_eq!(s.aggregators.len(), 1);
        assert_eq!(s.generators.len(), 0);
        assert_eq!(s.network.buses[0].kind, BusKind::Slack);
        assert_eq!(s.network.buses[1].kind, BusKind::Aggregator);
        assert_eq!(s.network.branches[0].sides(), 12);
    }

    #[test]
    fn duplicate_generators_rejected() {
        let text = TWO_BUS.replace(
            r#""generators": []"#,
            r#""generators": [
              {"id": "a", "bus": 1, "a2": 1, "a1": 1, "p_min": 0, "p_max": 1, "q_min": 0, "q_max": 0},
              {"id": "b", "bus": 1, "a2": 1, "a1": 1, "p_min": 0, "p_max": 1, "q_min": 0, "q_max": 0}]"#,
        );
        assert!(matches!(
            parse_scenario(&text, "dup"),
            Err(Error::DuplicateEntity { bus: 1, role: "generator" })
        ));
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse_scenario("{\n  \"base\": 3,\n}", "bad").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert!(line >= 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let s = parse_scenario(TWO_BUS, "two_bus").unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back = parse_scenario(&text, "again").unwrap();
        assert_eq!(s, back);
        let s32: Scenario<f32> = s.cast();
        assert_eq!(s32.network.branches[0].x, 0.1f32);
    }

    #[test]
    fn step_schedules() {
        let mut st = StepConfig {
            schedule: StepSchedule::InvSqrt,
            base: 2.0,
            delay: 0.0,
        };
        assert_eq!(st.at(4), 1.0);
        st.schedule = StepSchedule::Constant;
        assert_eq!(st.at(100), 2.0);
        st.schedule = StepSchedule::InvSqrtDelayed;
        st.delay = 3.0;
        assert_eq!(st.at(3), 2.0 / 2f64.sqrt());
    }
}

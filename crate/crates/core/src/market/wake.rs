//! Wake events of the simulated world: sampled from the appliances' wake
//! probability tables or replayed from a CSV log.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{appliance_index, Scenario};
use crate::scalar::Scalar;

/// Appliance `appliance` (catalog index) of aggregator `aggregator` (index
/// into `Scenario::aggregators`) wakes at the start of `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WakeEvent {
    pub slot: usize,
    pub aggregator: usize,
    pub appliance: usize,
}

pub const WAKE_CSV_HEADER: &str = "slot,aggregator_bus,appliance_id";

/// Draw wake slots slot by slot: an appliance still asleep after `t - 1`
/// wakes in `t` with probability `p(t) / (1 - Σ_{h<t} p(h))`.
pub fn sample_wake_events<T: Scalar>(scenario: &Scenario<T>, seed: u64) -> Vec<WakeEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut awake: Vec<Vec<bool>> = scenario.aggregators.iter().map(|a| vec![false; a.appliances.len()]).collect();
    let mut events = Vec::new();
    for t in 1..=scenario.horizon() {
        for (i, agg) in scenario.aggregators.iter().enumerate() {
            for (a, app) in agg.appliances.iter().enumerate() {
                if awake[i][a] {
                    continue;
                }
                let table = app.wake_table();
                let denom = table.remaining(t - 1).as_f64();
                let p = table.probs.get(t - 1).map_or(0.0, |p| p.as_f64());
                if denom <= 1e-12 || p <= 0.0 {
                    continue;
                }
                let u: f64 = rng.gen();
                if u < p / denom {
                    awake[i][a] = true;
                    events.push(WakeEvent {
                        slot: t,
                        aggregator: i,
                        appliance: a,
                    });
                }
            }
        }
    }
    events
}

/// Wake events grouped by slot then aggregator: `out[t - 1][i]`.
pub fn events_by_slot(events: &[WakeEvent], horizon: usize, aggregators: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = vec![vec![Vec::new(); aggregators]; horizon];
    for ev in events {
        out[ev.slot - 1][ev.aggregator].push(ev.appliance);
    }
    for slot in &mut out {
        for list in slot {
            list.sort_unstable();
        }
    }
    out
}

pub fn write_wake_log<T: Scalar>(scenario: &Scenario<T>, events: &[WakeEvent]) -> String {
    let mut out = String::from(WAKE_CSV_HEADER);
    out.push('\n');
    for ev in events {
        let agg = &scenario.aggregators[ev.aggregator];
        out.push_str(&format!("{},{},{}\n", ev.slot, agg.bus, agg.appliances[ev.appliance].id));
    }
    out
}

/// Parse a wake log. Every appliance may wake at most once, inside the day.
pub fn parse_wake_log<T: Scalar>(scenario: &Scenario<T>, text: &str, origin: &str) -> Result<Vec<WakeEvent>> {
    let by_bus: std::collections::HashMap<usize, usize> =
        scenario.aggregators.iter().enumerate().map(|(i, a)| (a.bus, i)).collect();
    let indices: Vec<_> = scenario.aggregators.iter().map(appliance_index).collect();
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("slot")) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            column: 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let slot: usize = fields[0].parse().map_err(|e| parse_err(format!("slot: {e}")))?;
        let bus: usize = fields[1].parse().map_err(|e| parse_err(format!("aggregator_bus: {e}")))?;
        let bad = || Error::BadWakeEvent {
            bus,
            appliance: fields[2].to_string(),
        };
        let &aggregator = by_bus.get(&bus).ok_or_else(bad)?;
        let &appliance = indices[aggregator].get(fields[2]).ok_or_else(bad)?;
        if slot == 0 || slot > scenario.horizon() {
            return Err(parse_err(format!("slot {slot} outside 1..={}", scenario.horizon())));
        }
        events.push(WakeEvent {
            slot,
            aggregator,
            appliance,
        });
    }
    events.sort_unstable();
    for w in events.windows(2) {
        if (w[0].aggregator, w[0].appliance) == (w[1].aggregator, w[1].appliance) {
            return Err(Error::BadWakeEvent {
                bus: scenario.aggregators[w[1].aggregator].bus,
                appliance: scenario.aggregators[w[1].aggregator].appliances[w[1].appliance].id.clone(),
            });
        }
    }
    Ok(events)
}

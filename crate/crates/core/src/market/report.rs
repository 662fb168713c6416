//! Day-level metrics recomputed from committed slot records alone.

use serde::{Deserialize, Serialize};

use super::{Mode, SlotRecord};
use crate::appliance::ActiveAppliance;
use crate::error::{Error, Result};
use crate::grid::Scenario;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSummary {
    pub id: String,
    pub bus: usize,
    pub profit: f64,
    pub energy: f64,
    pub peak: f64,
    pub par: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSummary {
    pub bus: usize,
    pub profit: f64,
    pub energy: f64,
    pub peak_demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub horizon: usize,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub generators: Vec<GeneratorSummary>,
    pub aggregators: Vec<AggregatorSummary>,
    /// PAR of total generation.
    pub generation_par: f64,
    /// Peak of total committed demand.
    pub peak_demand: f64,
    pub profit_violations: usize,
    pub max_residual: f64,
}

/// Peak over mean; 0 for a profile with no positive mean.
pub fn par(profile: &[f64]) -> f64 {
    if profile.is_empty() {
        return 0.0;
    }
    let mean = profile.iter().sum::<f64>() / profile.len() as f64;
    let peak = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mean > 0.0 {
        peak / mean
    } else {
        0.0
    }
}

pub fn summarize<T: Scalar>(scenario: &Scenario<T>, mode: Mode, seed: u64, slots: &[SlotRecord<T>]) -> Result<Summary> {
    let horizon = scenario.horizon();
    if slots.len() != horizon || slots.iter().enumerate().any(|(k, s)| s.slot != k + 1) {
        return Err(Error::Validation(format!("expected records for slots 1..={horizon}, got {}", slots.len())));
    }
    let generators = scenario
        .generators
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let mut profit = 0.0;
            let mut output = Vec::with_capacity(horizon);
            for s in slots {
                let d = &s.generators[j];
                let p = (d.p_conv + d.p_ren).as_f64();
                profit += p * d.rho.as_f64() + (d.q_conv * d.varrho).as_f64()
                    - g.cost(d.p_conv).as_f64()
                    - (d.beta * (d.p_ren - d.p_ren_min)).as_f64();
                output.push(p);
            }
            GeneratorSummary {
                id: g.id.clone(),
                bus: g.bus,
                profit,
                energy: output.iter().sum(),
                peak: output.iter().copied().fold(0.0, f64::max),
                par: par(&output),
            }
        })
        .collect::<Vec<_>>();

    let mut aggregators = Vec::with_capacity(scenario.aggregators.len());
    let mut total_demand = vec![0.0; horizon];
    for (i, cfg) in scenario.aggregators.iter().enumerate() {
        let mut payment = 0.0;
        let mut demand = Vec::with_capacity(horizon);
        for (s, total) in slots.iter().zip(&mut total_demand) {
            let a = &s.aggregators[i];
            payment += (a.active * a.price).as_f64();
            demand.push(a.active.as_f64());
            *total += a.active.as_f64();
        }
        let mut utility = 0.0;
        for app in &cfg.appliances {
            let mut profile = vec![T::zero(); horizon];
            let mut wake = None;
            for s in slots {
                for rec in s.appliances.iter().filter(|r| r.bus == cfg.bus && r.appliance == app.id) {
                    profile[rec.slot - 1] = rec.energy;
                    wake = Some(rec.wake);
                }
            }
            if let Some(wake) = wake {
                utility += ActiveAppliance::new(app.clone(), wake, horizon).utility(&profile, 1).as_f64();
            }
        }
        aggregators.push(AggregatorSummary {
            bus: cfg.bus,
            profit: utility - payment,
            energy: demand.iter().sum(),
            peak_demand: demand.iter().copied().fold(0.0, f64::max),
        });
    }

    let total_generation: Vec<f64> = slots
        .iter()
        .map(|s| s.generators.iter().map(|d| (d.p_conv + d.p_ren).as_f64()).sum())
        .collect();
    Ok(Summary {
        mode,
        seed,
        horizon,
        iterations: slots.iter().map(|s| s.iterations).collect(),
        converged: slots.iter().map(|s| s.converged).collect(),
        generators,
        aggregators,
        generation_par: par(&total_generation),
        peak_demand: total_demand.iter().copied().fold(0.0, f64::max),
        profit_violations: slots.iter().flat_map(|s| &s.profit_checks).filter(|c| c.violated()).count(),
        max_residual: slots.iter().map(|s| s.residual.as_f64()).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_of_flat_and_peaked_profiles() {
        assert_eq!(par(&[2.0, 2.0, 2.0]), 1.0);
        assert_eq!(par(&[0.0, 0.0, 3.0]), 3.0);
        assert_eq!(par(&[0.0, 0.0]), 0.0);
        assert_eq!(par(&[]), 0.0);
    }
}

//! Synthetic radial feeders with household appliance populations.
//!
//! Topology: bus 0 is the substation (slack); bus `k` hangs off a parent
//! drawn uniformly from the four buses before it, which gives long laterals
//! like a distribution feeder. Line resistances are drawn uniform in
//! `[1, 3]` relative units with `x/r` uniform in `[1, 2]`, then scaled
//! together so that the design load (half of every appliance's nominal
//! power at once) drops the deepest voltage by 5 %.
//!
//! Entities: the first generator sits on the slack bus as the substation
//! supply; the others take distinct random buses and carry a solar unit with
//! probability `renewable_share`. Every remaining bus is an aggregator
//! serving a uniform number of users in `users`.
//!
//! Each user owns, independently,
//! - a window-preference load (type 3) with probability 0.8: power 0.5–2 kW,
//!   window 4–10 slots;
//! - an electric vehicle (type 2) with probability 0.4: 1.5–3.5 kW for 2–4
//!   slots inside a window 2–6 slots longer, energy band 70–110 % of nominal;
//! - a deferrable load (type 1) with probability 0.5: 0.5–1.5 kW for 1–3
//!   slots inside a window 1–5 slots longer, energy band 90–120 % of nominal.
//!
//! Wake times follow a discretized bell around a preferred hour (morning
//! 6–9 h with probability 0.3, evening 17–21 h with 0.5, otherwise any
//! time; spread 1–3 slots) carrying 85–100 % of the mass.
//! All powers are converted to per-unit on a 10 kVA base.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    prepare, reactive_factor, AggregatorConfig, Base, Branch, Bus, BusKind, MarketConfig, NetworkModel, Scenario, StepConfig,
    StepSchedule,
};
use crate::appliance::{Appliance, ApplianceType, Kernel};
use crate::error::{Error, Result};
use crate::generator::{GeneratorAsset, Renewable};
use crate::linpf::assemble_lambda;

/// kW per per-unit on the 10 kVA base.
const KW_PER_PU: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub buses: usize,
    pub generators: usize,
    /// Inclusive range of users per aggregator.
    pub users: (usize, usize),
    /// Share of distributed generators with a solar unit.
    pub renewable_share: f64,
    pub horizon: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            buses: 123,
            generators: 10,
            users: (100, 500),
            renewable_share: 0.5,
            horizon: 24,
        }
    }
}

pub fn generate_scenario(spec: &SyntheticSpec, seed: u64) -> Result<Scenario<f64>> {
    if spec.buses < 2 {
        return Err(Error::InfeasibleSpec("a feeder needs at least 2 buses".into()));
    }
    if spec.generators > spec.buses {
        return Err(Error::InfeasibleSpec(format!(
            "{} generators do not fit on {} buses",
            spec.generators, spec.buses
        )));
    }
    if spec.users.0 > spec.users.1 {
        return Err(Error::InfeasibleSpec("users range is empty".into()));
    }
    if spec.horizon == 0 {
        return Err(Error::InfeasibleSpec("horizon must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.renewable_share) {
        return Err(Error::InfeasibleSpec("renewable share must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.buses;
    let h = spec.horizon;

    let buses = (0..n)
        .map(|id| Bus {
            id,
            kind: BusKind::Empty,
            g_shunt: 0.0,
            b_shunt: 0.0,
            v_min: 0.9,
            v_max: 1.1,
        })
        .collect();
    let branches = (1..n)
        .map(|k| {
            let parent = rng.gen_range(k.saturating_sub(4)..k);
            let r = rng.gen_range(1.0..3.0);
            Branch {
                from: parent,
                to: k,
                r,
                x: r * rng.gen_range(1.0..2.0),
                s_max: 500.0,
                polygon_angle: PI / 6.0,
            }
        })
        .collect();

    let mut others: Vec<usize> = (1..n).collect();
    let mut gen_buses = Vec::new();
    if spec.generators > 0 {
        gen_buses.push(0);
        for _ in 1..spec.generators {
            let k = rng.gen_range(0..others.len());
            gen_buses.push(others.swap_remove(k));
        }
    }
    others.sort_unstable();

    let mut aggregators = Vec::with_capacity(others.len());
    for &bus in &others {
        let users = rng.gen_range(spec.users.0..=spec.users.1);
        let mut appliances = Vec::new();
        for u in 0..users {
            if rng.gen_bool(0.8) {
                appliances.push(window_load(&mut rng, format!("u{u}-hvac"), h));
            }
            if rng.gen_bool(0.4) {
                appliances.push(vehicle(&mut rng, format!("u{u}-ev"), h));
            }
            if rng.gen_bool(0.5) {
                appliances.push(deferrable(&mut rng, format!("u{u}-wash"), h));
            }
        }
        aggregators.push(AggregatorConfig {
            bus,
            power_factor: rng.gen_range(0.9..0.98),
            appliances,
        });
    }

    // expected benchmark demand per slot sizes the generation fleet
    let mut expected = vec![0.0; h];
    for a in aggregators.iter().flat_map(|a| &a.appliances) {
        let d = a.duration();
        for (wake, p) in a.wake_prob.iter().enumerate() {
            for slot in expected.iter_mut().skip(wake).take(d) {
                *slot += p * a.e_nom;
            }
        }
    }
    let peak = expected.iter().copied().fold(0.1, f64::max);
    let connected: f64 = aggregators.iter().flat_map(|a| &a.appliances).map(|a| a.e_nom).sum::<f64>().max(peak);
    let mut generators = Vec::with_capacity(gen_buses.len());
    for (j, &bus) in gen_buses.iter().enumerate() {
        if j == 0 {
            generators.push(GeneratorAsset {
                id: "substation".into(),
                bus,
                a2: 0.4 / peak,
                a1: 1.0,
                a0: 0.0,
                p_min: 0.0,
                p_max: connected,
                q_min: -connected,
                q_max: connected,
                renewable: None,
            });
            continue;
        }
        let cap = peak * rng.gen_range(0.05..0.15);
        let renewable = rng.gen_bool(spec.renewable_share).then(|| solar(&mut rng, cap, h));
        generators.push(GeneratorAsset {
            id: format!("dg{j}"),
            bus,
            a2: rng.gen_range(0.5..1.5) / cap,
            a1: rng.gen_range(0.8..1.2),
            a0: 0.0,
            p_min: 0.0,
            p_max: cap,
            q_min: -0.5 * cap,
            q_max: 0.5 * cap,
            renewable,
        });
    }

    let mut network = NetworkModel {
        slack: 0,
        split_reactance: 1e-6,
        buses,
        branches,
    };
    calibrate_impedance(&mut network, &aggregators)?;

    let raw = Scenario {
        base: Base {
            mva: 0.01,
            kv: 4.16,
            note: Some(format!(
                "synthetic approximation of a balanced {n}-bus feeder: {} generators, {}-{} users per aggregator, seed {seed}",
                spec.generators, spec.users.0, spec.users.1
            )),
        },
        network,
        aggregators,
        generators,
        market: MarketConfig {
            horizon: h,
            slot_hours: 1.0,
            vartheta: 1.0,
            xi_theta: 1e-4,
            xi_v: 1e-4,
            step: StepConfig {
                schedule: StepSchedule::Constant,
                base: 1.0,
                delay: 0.0,
            },
            prox_scale: 0.5,
            max_iters: 2000,
            seed,
        },
    };
    prepare(raw)
}

/// Voltage drop at the deepest bus under the design load.
const DESIGN_DROP: f64 = 0.05;

fn calibrate_impedance(network: &mut NetworkModel<f64>, aggregators: &[AggregatorConfig<f64>]) -> Result<()> {
    let n = network.n();
    let mut injection = vec![0.0; 2 * n];
    for a in aggregators {
        let load: f64 = a.appliances.iter().map(|x| 0.5 * x.e_nom).sum();
        injection[a.bus] -= load;
        injection[n + a.bus] -= load * reactive_factor(a.power_factor);
    }
    let blocks = assemble_lambda(network)?;
    let x = blocks.solve_state(&injection);
    let drop = x[n..].iter().map(|v| (1.0 - v).abs()).fold(0.0, f64::max);
    if drop > 0.0 {
        let scale = DESIGN_DROP / drop;
        for br in &mut network.branches {
            br.r *= scale;
            br.x *= scale;
        }
    }
    Ok(())
}

/// Preferred wake hour: morning (30 %), evening (50 %) or any time.
fn preferred_hour(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen();
    if u < 0.3 {
        rng.gen_range(6.0..9.0)
    } else if u < 0.8 {
        rng.gen_range(17.0..21.0)
    } else {
        rng.gen_range(0.0..24.0)
    }
}

fn wake_profile(rng: &mut ChaCha8Rng, h: usize) -> Vec<f64> {
    let mean = 1.0 + preferred_hour(rng) * h as f64 / 24.0;
    let spread = rng.gen_range(1.0..3.0);
    let mass = rng.gen_range(0.85..1.0);
    let raw: Vec<f64> = (1..=h)
        .map(|s| (-((s as f64 - mean) / spread).powi(2) / 2.0).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| mass * w / total).collect()
}

fn kw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi) / KW_PER_PU
}

fn window_load(rng: &mut ChaCha8Rng, id: String, h: usize) -> Appliance<f64> {
    let e_nom = kw(rng, 0.5, 2.0);
    let window_len = rng.gen_range(4..=10);
    let kappa = rng.gen_range(1.5..3.0) * e_nom.sqrt();
    Appliance {
        id,
        kind: ApplianceType::WindowPreference,
        window_len,
        e_min: 0.3 * e_nom,
        e_max: 1.5 * e_nom,
        energy_min: None,
        energy_max: None,
        e_nom,
        energy_nom: e_nom * window_len as f64,
        kappa,
        kappa_out: 0.05 * kappa,
        kappa_by_slot: None,
        kappa_out_by_slot: None,
        kernel: Kernel::SqrtShift,
        wake_prob: wake_profile(rng, h),
    }
}

fn vehicle(rng: &mut ChaCha8Rng, id: String, h: usize) -> Appliance<f64> {
    let e_nom = kw(rng, 1.5, 3.5);
    let duration = rng.gen_range(2..=4);
    let energy_nom = e_nom * duration as f64;
    let kappa = rng.gen_range(1.5..3.0);
    Appliance {
        id,
        kind: ApplianceType::TimePreference,
        window_len: duration + rng.gen_range(2..=6),
        e_min: 0.0,
        e_max: 1.5 * e_nom,
        energy_min: Some(0.7 * energy_nom),
        energy_max: Some(1.1 * energy_nom),
        e_nom,
        energy_nom,
        kappa,
        kappa_out: 0.05 * kappa,
        kappa_by_slot: None,
        kappa_out_by_slot: None,
        kernel: Kernel::Log1p,
        wake_prob: wake_profile(rng, h),
    }
}

fn deferrable(rng: &mut ChaCha8Rng, id: String, h: usize) -> Appliance<f64> {
    let e_nom = kw(rng, 0.5, 1.5);
    let duration = rng.gen_range(1..=3);
    let energy_nom = e_nom * duration as f64;
    Appliance {
        id,
        kind: ApplianceType::Deferrable,
        window_len: duration + rng.gen_range(1..=5),
        e_min: 0.0,
        e_max: 1.5 * e_nom,
        energy_min: Some(0.9 * energy_nom),
        energy_max: Some(1.2 * energy_nom),
        e_nom,
        energy_nom,
        kappa: rng.gen_range(1.5..3.0),
        kappa_out: 0.0,
        kappa_by_slot: None,
        kappa_out_by_slot: None,
        kernel: Kernel::Log1p,
        wake_prob: wake_profile(rng, h),
    }
}

/// Daylight bell with a forecast band: the offer may fall to 60 % of the
/// forecast, the realized output lies inside the band.
fn solar(rng: &mut ChaCha8Rng, cap: f64, h: usize) -> Renewable<f64> {
    let scale = 24.0 / h as f64;
    let p_max: Vec<f64> = (0..h)
        .map(|k| {
            let hour = (k as f64 + 0.5) * scale;
            cap * (PI * (hour - 6.0) / 12.0).sin().max(0.0)
        })
        .collect();
    let p_min: Vec<f64> = p_max.iter().map(|p| 0.6 * p).collect();
    let actual = p_min.iter().zip(&p_max).map(|(&lo, &hi)| lo + (hi - lo) * rng.gen::<f64>()).collect();
    Renewable {
        p_min,
        p_max,
        actual: Some(actual),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            buses: 5,
            generators: 1,
            users: (10, 20),
            renewable_share: 0.5,
            horizon: 24,
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        let a = generate_scenario(&small(), 42).unwrap();
        let b = generate_scenario(&small(), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&small(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn user_counts_respect_range() {
        let s = generate_scenario(&small(), 7).unwrap();
        assert_eq!(s.aggregators.len(), 4);
        for a in &s.aggregators {
            let users: std::collections::BTreeSet<&str> =
                a.appliances.iter().map(|x| x.id.split('-').next().unwrap()).collect();
            assert!(users.len() <= 20);
        }
    }

    #[test]
    fn full_size_feeder_validates() {
        let spec = SyntheticSpec {
            users: (1, 3),
            ..SyntheticSpec::default()
        };
        let s = generate_scenario(&spec, 1).unwrap();
        assert_eq!(s.n(), 123);
        assert_eq!(s.generators.len(), 10);
        assert_eq!(s.aggregators.len(), 113);
        assert_eq!(s.slack_generator(), Some(0));
    }

    #[test]
    fn too_many_generators() {
        let spec = SyntheticSpec {
            buses: 2,
            generators: 5,
            ..small()
        };
        assert!(matches!(generate_scenario(&spec, 1), Err(Error::InfeasibleSpec(_))));
    }
}

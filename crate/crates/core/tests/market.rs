mod common;

use common::*;
use gridmarket::market::{benchmark_run, run_horizon, summarize, MarketOptions, Mode, Simulation, WakeEvent};

fn quiet() -> MarketOptions {
    MarketOptions { record_trace: false, ..Default::default() }
}

#[test]
fn first_slot_starts_flat_with_full_renewable_offers() {
    let s = shipped("ref5.json");
    let mut sim = Simulation::new(&s, MarketOptions::default()).unwrap();
    sim.begin_slot().unwrap();
    let n = s.network.buses.len();
    for h in 0..sim.state.x.len() {
        assert!(sim.state.x[h][..n].iter().all(|&th| th == 0.0));
        assert!(sim.state.x[h][n..].iter().all(|&v| v == 1.0));
        assert!(sim.state.mu[h].iter().all(|&m| m == 0.0));
    }
    for (g, d) in sim.generators.iter().zip(&sim.decisions) {
        for (k, &p) in d.p_ren.iter().enumerate() {
            assert_eq!(p, g.ren_max(1 + k));
        }
        assert_eq!(d.delta, 0.0);
    }
}

#[test]
fn later_slots_start_from_the_previous_equilibrium() {
    let s = shipped("ref5.json");
    let mut sim = Simulation::new(&s, quiet()).unwrap();
    sim.begin_slot().unwrap();
    sim.clear_slot().unwrap();
    let settled = sim.state.clone();
    sim.finish_slot().unwrap();
    sim.begin_slot().unwrap();
    assert_eq!(sim.state.x[..], settled.x[1..]);
    assert_eq!(sim.state.mu[..], settled.mu[1..]);
}

#[test]
fn no_trade_without_agents() {
    let mut s = two_bus("[]", 2, SUBSTATION);
    s.aggregators.clear();
    s.generators.clear();
    let r = run_horizon(&s, MarketOptions::default()).unwrap();
    for slot in &r.slots {
        assert_eq!(slot.iterations, 1);
        assert!(slot.converged);
        assert!(slot.injection.iter().all(|&p| p == 0.0));
        assert!(slot.rho.iter().all(|&p| p == 0.0));
    }
}

#[test]
fn single_slot_day() {
    let app = r#"[{"id": "heat", "type": 1, "window_len": 1, "e_min": 0.0, "e_max": 1.0, "energy_min": 0.1, "energy_max": 1.0,
        "e_nom": 0.5, "energy_nom": 0.5, "kappa": 1.5, "wake_prob": [1.0]}]"#;
    let s = two_bus(app, 1, SUBSTATION);
    let r = run_horizon(&s, quiet()).unwrap();
    assert_eq!(r.slots.len(), 1);
    assert!(r.converged());
    let mut sim = Simulation::new(&s, quiet()).unwrap();
    sim.begin_slot().unwrap();
    sim.clear_slot().unwrap();
    assert_eq!(sim.finish_slot().unwrap(), r.slots[0]);
}

#[test]
fn fixed_seed_is_bit_identical() {
    let s = shipped("feeder13.json");
    let a = run_horizon(&s, MarketOptions::default()).unwrap();
    let b = run_horizon(&s, MarketOptions::default()).unwrap();
    assert_eq!(a.slots, b.slots);
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.trace_csv(), b.trace_csv());
    let other = run_horizon(&s, MarketOptions { seed: Some(99), ..quiet() }).unwrap();
    assert_ne!(a.wake_events, other.wake_events);
}

#[test]
fn benchmark_runs_appliances_on_wake() {
    let app = r#"[{"id": "wash", "type": 1, "window_len": 2, "e_min": 0.0, "e_max": 0.6, "energy_min": 0.4, "energy_max": 1.2,
        "e_nom": 0.3, "energy_nom": 0.6, "kappa": 1.0, "wake_prob": [0.2, 0.2, 0.2, 0.2, 0.2]}]"#;
    let s = two_bus(app, 5, SUBSTATION);
    let events = vec![WakeEvent { slot: 3, aggregator: 0, appliance: 0 }];
    let r = benchmark_run(&s, MarketOptions { wake_events: Some(events), ..quiet() }).unwrap();
    let demand: Vec<f64> = r.slots.iter().map(|s| s.aggregators[0].active).collect();
    assert_eq!(demand, vec![0.0, 0.0, 0.3, 0.3, 0.0]);
}

#[test]
fn messages_respect_the_iteration_barrier() {
    let s = shipped("ref5.json");
    let r = run_horizon(&s, MarketOptions::default()).unwrap();
    let agents = s.aggregators.len() + s.generators.len();
    let mut prev_last = 0;
    let mut per_slot = std::collections::BTreeMap::<usize, usize>::new();
    for rec in &r.iterations {
        assert_eq!(rec.received, agents);
        assert_eq!(rec.broadcast, agents);
        // every agent message of an iteration precedes its broadcasts
        assert_eq!(rec.first_seq, prev_last + 1);
        assert_eq!(rec.last_seq, rec.first_seq + 2 * agents as u64 - 1);
        prev_last = rec.last_seq;
        let k = per_slot.entry(rec.slot).or_default();
        *k += 1;
        assert_eq!(rec.iter, *k);
    }
    for slot in &r.slots {
        assert_eq!(per_slot[&slot.slot], slot.iterations);
    }
    let buses = s.network.buses.len();
    assert_eq!(r.trace.len(), r.iterations.len() * buses);
}

#[test]
fn committed_slots_never_change() {
    let s = shipped("ref5.json");
    let mut sim = Simulation::new(&s, quiet()).unwrap();
    let mut committed = Vec::new();
    for _ in 0..s.horizon() {
        sim.begin_slot().unwrap();
        sim.clear_slot().unwrap();
        committed.push(sim.finish_slot().unwrap());
        assert_eq!(sim.result().slots, committed);
    }
    for (t, rec) in committed.iter().enumerate() {
        assert!(rec.appliances.iter().all(|a| a.slot == t + 1));
    }
}

#[test]
fn complete_information_does_not_raise_the_peak() {
    for name in ["ref5.json", "feeder13.json", "feeder37.json"] {
        let s = shipped(name);
        let u = run_horizon(&s, quiet()).unwrap();
        let c = run_horizon(&s, MarketOptions { mode: Mode::Complete, ..quiet() }).unwrap();
        let su = summarize(&s, u.mode, u.seed, &u.slots).unwrap();
        let sc = summarize(&s, c.mode, c.seed, &c.slots).unwrap();
        assert!(sc.peak_demand <= su.peak_demand + 1e-9, "{name}: {} > {}", sc.peak_demand, su.peak_demand);
    }
}

#[test]
fn demand_response_flattens_generation() {
    for name in ["ref5.json", "feeder13.json", "feeder37.json"] {
        let s = shipped(name);
        let dr = run_horizon(&s, quiet()).unwrap();
        let bench = benchmark_run(&s, quiet()).unwrap();
        let a = summarize(&s, dr.mode, dr.seed, &dr.slots).unwrap();
        let b = summarize(&s, bench.mode, bench.seed, &bench.slots).unwrap();
        assert!(a.generation_par <= b.generation_par, "{name}: {} > {}", a.generation_par, b.generation_par);
        assert_eq!(a.profit_violations, 0, "{name}");
    }
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let s = shipped("ref5.json");
    let r = run_horizon(&s, MarketOptions { max_iters: Some(3), ..quiet() }).unwrap();
    assert!(!r.converged());
    assert!(r.slots.iter().all(|s| s.iterations <= 3));
}

//! Rolling-horizon market: at every slot the agents and the DNO exchange
//! profiles and prices until the network variables settle, then the first
//! slot of every decision is committed.

pub mod report;
pub mod wake;

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::AggregatorState;
use crate::dno::{BusRole, Dno, DnoState, SignalBundle, SIGNAL_CSV_HEADER};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorAsset, GeneratorDecision, GeneratorSignals, Proximal};
use crate::grid::Scenario;
use crate::scalar::Scalar;

pub use report::{summarize, Summary};
pub use wake::{events_by_slot, parse_wake_log, sample_wake_events, write_wake_log, WakeEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Appliances reveal themselves when they wake; renewable offers are
    /// uncertain.
    Uncertainty,
    /// Every wake slot is known at the start of the day and renewable output
    /// equals its forecast.
    Complete,
    /// No demand response: appliances run at nominal power once awake.
    Benchmark,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uncertainty" => Ok(Mode::Uncertainty),
            "complete" | "complete-information" => Ok(Mode::Complete),
            "benchmark" => Ok(Mode::Benchmark),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarketOptions {
    pub mode: Mode,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    /// Keep per-bus trace rows of every iteration.
    pub record_trace: bool,
    /// Keep the full signal bundle of every iteration as CSV.
    pub dump_signals: bool,
    /// Replay these wake events instead of sampling them.
    pub wake_events: Option<Vec<WakeEvent>>,
}

impl Default for MarketOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Uncertainty,
            seed: None,
            max_iters: None,
            record_trace: true,
            dump_signals: false,
            wake_events: None,
        }
    }
}

/// Profiles an agent reports over `H_t`.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T> {
    Aggregator { active: Vec<T>, reactive: Vec<T> },
    Generator { p_conv: Vec<T>, q_conv: Vec<T>, p_ren: Vec<T>, shortfall: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMessage<T> {
    pub bus: usize,
    pub slot: usize,
    pub iter: usize,
    pub seq: u64,
    pub payload: Payload<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalMessage<T> {
    pub bus: usize,
    pub slot: usize,
    pub iter: usize,
    pub seq: u64,
    pub signals: GeneratorSignals<T>,
}

/// One iteration of one slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord<T> {
    pub slot: usize,
    pub iter: usize,
    pub step: T,
    /// Worst balance mismatch of the reported injections.
    pub residual: T,
    pub max_dtheta: T,
    pub max_dv: T,
    /// Largest deviation of the posted signals from their multiplier formulas.
    pub price_error: T,
    pub received: usize,
    pub broadcast: usize,
    /// Sequence numbers of the first agent message and the last signal.
    pub first_seq: u64,
    pub last_seq: u64,
}

/// Per-bus state of the current slot at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow<T> {
    pub iter: usize,
    pub slot: usize,
    pub bus: usize,
    pub theta: T,
    pub vmag: T,
    pub lambda: T,
    pub gamma: T,
    pub rho: T,
    pub varrho: T,
    pub residual: T,
}

pub const TRACE_CSV_HEADER: &str = "iter,slot,bus,theta,vmag,lambda,gamma,rho,varrho,residual";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSlot<T> {
    pub bus: usize,
    pub active: T,
    pub reactive: T,
    pub price: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSlot<T> {
    pub id: String,
    pub bus: usize,
    pub p_conv: T,
    pub q_conv: T,
    pub p_ren: T,
    pub p_ren_min: T,
    pub rho: T,
    pub varrho: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceSlot<T> {
    pub slot: usize,
    pub bus: usize,
    pub appliance: String,
    pub wake: usize,
    pub energy: T,
}

/// Aggregator profit over `H_t` at the settled prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfitCheck<T> {
    pub slot: usize,
    pub bus: usize,
    /// Exact best response to the prices.
    pub optimized: T,
    /// The settled market profile.
    pub equilibrium: T,
    /// Nominal run-on-wake profiles, projected onto the feasible sets.
    pub benchmark: T,
}

impl<T: Scalar> ProfitCheck<T> {
    pub fn violated(&self) -> bool {
        self.optimized < self.benchmark - T::lit(1e-9) * (T::one() + self.benchmark.abs())
    }
}

/// Committed decisions and settled prices of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord<T> {
    pub slot: usize,
    pub iterations: usize,
    pub converged: bool,
    pub residual: T,
    pub theta: Vec<T>,
    pub v: Vec<T>,
    pub lambda: Vec<T>,
    pub gamma: Vec<T>,
    pub rho: Vec<T>,
    pub varrho: Vec<T>,
    pub beta: Vec<T>,
    /// Net injections `[p; q]` reported by the agents.
    pub injection: Vec<T>,
    pub aggregators: Vec<AggregatorSlot<T>>,
    pub generators: Vec<GeneratorSlot<T>>,
    pub appliances: Vec<ApplianceSlot<T>>,
    pub profit_checks: Vec<ProfitCheck<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotTiming {
    pub slot: usize,
    pub iterations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationResult<T> {
    pub mode: Mode,
    pub seed: u64,
    pub slots: Vec<SlotRecord<T>>,
    pub iterations: Vec<IterationRecord<T>>,
    pub trace: Vec<TraceRow<T>>,
    pub signals_csv: Option<String>,
    pub wake_events: Vec<WakeEvent>,
    /// Wall-clock figures; everything else is deterministic.
    pub timing: Vec<SlotTiming>,
}

impl<T: Scalar> SimulationResult<T> {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.iter,
                r.slot,
                r.bus,
                r.theta.as_f64(),
                r.vmag.as_f64(),
                r.lambda.as_f64(),
                r.gamma.as_f64(),
                r.rho.as_f64(),
                r.varrho.as_f64(),
                r.residual.as_f64()
            );
        }
        out
    }

    pub fn converged(&self) -> bool {
        self.slots.iter().all(|s| s.converged)
    }

    pub fn profit_violations(&self) -> usize {
        self.slots.iter().flat_map(|s| &s.profit_checks).filter(|c| c.violated()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Agent {
    Aggregator(usize),
    Generator(usize),
}

/// Snapshot of everything the market clears at one slot.
#[derive(Debug, Clone)]
pub struct SlotProblem<T> {
    pub t: usize,
    pub scenario: Scenario<T>,
    pub generators: Vec<GeneratorAsset<T>>,
    pub aggregators: Vec<AggregatorState<T>>,
    /// Sleeping-load estimate over `H_t` per aggregator.
    pub sleeping: Vec<Vec<T>>,
}

impl<T: Scalar> SlotProblem<T> {
    pub fn slots(&self) -> usize {
        self.scenario.horizon() + 1 - self.t
    }
}

/// World and market state of a run in progress.
#[derive(Debug)]
pub struct Simulation<T> {
    pub scenario: Scenario<T>,
    pub options: MarketOptions,
    pub dno: Dno<T>,
    pub generators: Vec<GeneratorAsset<T>>,
    pub aggregators: Vec<AggregatorState<T>>,
    pub decisions: Vec<GeneratorDecision<T>>,
    pub state: DnoState<T>,
    sleeping: Vec<Vec<T>>,
    agents: Vec<Agent>,
    events: Vec<WakeEvent>,
    by_slot: Vec<Vec<Vec<usize>>>,
    seed: u64,
    t: usize,
    seq: u64,
    /// Reports of the last iteration, for extrapolation.
    last_injection: Option<Vec<Vec<T>>>,
    signals: Option<SignalBundle<T>>,
    outcome: Option<(usize, bool)>,
    result: SimulationResult<T>,
    slot_started: Option<Instant>,
}

impl<T: Scalar> Simulation<T> {
    pub fn new(scenario: &Scenario<T>, options: MarketOptions) -> Result<Self> {
        let dno = Dno::new(scenario)?;
        let seed = options.seed.unwrap_or(scenario.market.seed);
        let horizon = scenario.horizon();
        let events = match &options.wake_events {
            Some(ev) => ev.clone(),
            None => sample_wake_events(scenario, seed),
        };
        let generators: Vec<GeneratorAsset<T>> = match options.mode {
            Mode::Complete => scenario.generators.iter().map(|g| g.with_exact_renewable()).collect(),
            _ => scenario.generators.clone(),
        };
        let aggregators = scenario
            .aggregators
            .iter()
            .map(|a| {
                let mut st = AggregatorState::new(a, horizon);
                st.uncontrolled = options.mode == Mode::Benchmark;
                st
            })
            .collect();
        let mut agents: Vec<Agent> = (0..scenario.aggregators.len()).map(Agent::Aggregator).collect();
        agents.extend((0..generators.len()).map(Agent::Generator));
        let by_slot = events_by_slot(&events, horizon, scenario.aggregators.len());
        let result = SimulationResult {
            mode: options.mode,
            seed,
            slots: Vec::new(),
            iterations: Vec::new(),
            trace: Vec::new(),
            signals_csv: options.dump_signals.then(|| format!("{SIGNAL_CSV_HEADER}\n")),
            wake_events: events.clone(),
            timing: Vec::new(),
        };
        Ok(Self {
            state: dno.initial_state(horizon),
            scenario: scenario.clone(),
            options,
            dno,
            generators,
            aggregators,
            decisions: Vec::new(),
            sleeping: Vec::new(),
            agents,
            events,
            by_slot,
            seed,
            t: 0,
            seq: 0,
            last_injection: None,
            signals: None,
            outcome: None,
            result,
            slot_started: None,
        })
    }

    pub fn horizon(&self) -> usize {
        self.scenario.horizon()
    }

    /// Slot currently being cleared (0 before the first slot).
    pub fn slot(&self) -> usize {
        self.t
    }

    fn slots(&self) -> usize {
        self.horizon() + 1 - self.t
    }

    /// Apply wake events and initialize or warm-start slot `t`.
    pub fn begin_slot(&mut self) -> Result<()> {
        let t = self.t + 1;
        if t > self.horizon() {
            return Err(Error::Validation(format!("the day has only {} slots", self.horizon())));
        }
        self.t = t;
        self.slot_started = Some(Instant::now());
        if self.options.mode == Mode::Complete {
            if t == 1 {
                for ev in &self.events {
                    self.aggregators[ev.aggregator].reveal(ev.appliance, ev.slot, 1)?;
                }
                for agg in &mut self.aggregators {
                    agg.asleep.clear();
                }
            }
            for agg in &mut self.aggregators {
                agg.wake_step(t, &[])?;
            }
        } else {
            for (agg, events) in self.aggregators.iter_mut().zip(&self.by_slot[t - 1]) {
                agg.wake_step(t, events)?;
            }
        }
        self.sleeping = self.aggregators.iter().map(|a| a.sleeping_load(t)).collect::<Result<_>>()?;
        if t == 1 {
            self.random_start()?;
        }
        self.last_injection = None;
        self.signals = None;
        self.outcome = None;
        Ok(())
    }

    /// Uniform draws inside the feasible boxes; renewables at their maximum.
    fn random_start(&mut self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let t = self.t;
        for agg in &mut self.aggregators {
            for k in 0..agg.awake.len() {
                let set = agg.awake[k].feasible_set(t)?;
                let draw: Vec<T> = set
                    .lo
                    .iter()
                    .zip(&set.hi)
                    .map(|(&l, &h)| l + (h - l) * T::lit(rng.gen::<f64>()))
                    .collect();
                agg.profiles[k] = set.project(&draw);
            }
        }
        let len = self.slots();
        self.decisions = self
            .generators
            .iter()
            .map(|g| {
                let p_conv: Vec<T> =
                    (0..len).map(|_| g.p_min + (g.p_max - g.p_min) * T::lit(rng.gen::<f64>())).collect();
                let q_conv: Vec<T> =
                    (0..len).map(|_| g.q_min + (g.q_max - g.q_min) * T::lit(rng.gen::<f64>())).collect();
                let p_ren: Vec<T> = (0..len).map(|k| g.ren_max(t + k)).collect();
                GeneratorDecision {
                    delta: generator::attained_budget(g, &p_ren, t),
                    p_conv,
                    q_conv,
                    p_ren,
                }
            })
            .collect();
        self.state = self.dno.initial_state(len);
        Ok(())
    }

    /// What the market clears at the current slot.
    pub fn slot_problem(&self) -> SlotProblem<T> {
        SlotProblem {
            t: self.t,
            scenario: self.scenario.clone(),
            generators: self.generators.clone(),
            aggregators: self.aggregators.clone(),
            sleeping: self.sleeping.clone(),
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// Every agent reports its current profile over `H_t`.
    fn collect_messages(&mut self, iter: usize) -> Vec<AgentMessage<T>> {
        let t = self.t;
        let mut out = Vec::with_capacity(self.agents.len());
        for a in self.agents.clone() {
            let seq = self.next_seq();
            let (bus, payload) = match a {
                Agent::Aggregator(i) => {
                    let agg = &self.aggregators[i];
                    let mut active = self.sleeping[i].clone();
                    for prof in &agg.profiles {
                        for (acc, &e) in active.iter_mut().zip(prof) {
                            *acc = *acc + e;
                        }
                    }
                    let kq = agg.reactive_factor();
                    let reactive = active.iter().map(|&l| l * kq).collect();
                    (agg.bus, Payload::Aggregator { active, reactive })
                }
                Agent::Generator(j) => {
                    let (g, d) = (&self.generators[j], &self.decisions[j]);
                    let shortfall = d.p_ren.iter().enumerate().map(|(k, &p)| p - g.ren_min(t + k)).collect();
                    (
                        g.bus,
                        Payload::Generator {
                            p_conv: d.p_conv.clone(),
                            q_conv: d.q_conv.clone(),
                            p_ren: d.p_ren.clone(),
                            shortfall,
                        },
                    )
                }
            };
            out.push(AgentMessage {
                bus,
                slot: t,
                iter,
                seq,
                payload,
            });
        }
        out
    }

    /// Net injections `[p; q]` per slot assembled from one round of reports.
    fn injections(&self, inbox: &[AgentMessage<T>]) -> Vec<Vec<T>> {
        let n = self.dno.n();
        let mut p = vec![vec![T::zero(); 2 * n]; self.slots()];
        for msg in inbox {
            let b = msg.bus;
            match &msg.payload {
                Payload::Aggregator { active, reactive } => {
                    for (h, ph) in p.iter_mut().enumerate() {
                        ph[b] = ph[b] - active[h];
                        ph[n + b] = ph[n + b] - reactive[h];
                    }
                }
                Payload::Generator { p_conv, q_conv, p_ren, .. } => {
                    for (h, ph) in p.iter_mut().enumerate() {
                        ph[b] = ph[b] + p_conv[h] + p_ren[h];
                        ph[n + b] = ph[n + b] + q_conv[h];
                    }
                }
            }
        }
        p
    }

    fn broadcast(&mut self, iter: usize, signals: &SignalBundle<T>) -> Vec<SignalMessage<T>> {
        let t = self.t;
        let buses: Vec<usize> = self
            .agents
            .iter()
            .map(|a| match *a {
                Agent::Aggregator(i) => self.aggregators[i].bus,
                Agent::Generator(j) => self.generators[j].bus,
            })
            .collect();
        buses
            .into_iter()
            .map(|b| SignalMessage {
                bus: b,
                slot: t,
                iter,
                seq: self.next_seq(),
                signals: GeneratorSignals {
                    rho: signals.rho.iter().map(|r| r[b]).collect(),
                    varrho: signals.varrho.iter().map(|r| r[b]).collect(),
                    beta: signals.beta.iter().map(|r| r[b]).collect(),
                },
            })
            .collect()
    }

    /// Largest gap between the posted signals and their multiplier formulas.
    fn price_error(&self, signals: &SignalBundle<T>) -> T {
        let mut err = T::zero();
        for h in 0..self.state.mu.len() {
            let (lam, gam) = (self.state.lambda(h), self.state.gamma(h));
            for (b, role) in self.dno.roles.iter().enumerate() {
                let (rho, varrho, beta) = match *role {
                    BusRole::Aggregator { reactive_factor } => (lam[b] + reactive_factor * gam[b], T::zero(), T::zero()),
                    BusRole::Generator { renewable } => {
                        let beta = if renewable {
                            self.dno.vartheta * self.dno.sensitivity.v_column_sum(b)
                        } else {
                            T::zero()
                        };
                        (lam[b], gam[b], beta)
                    }
                    BusRole::Passive => (lam[b], T::zero(), T::zero()),
                };
                err = err
                    .max((signals.rho[h][b] - rho).abs())
                    .max((signals.varrho[h][b] - varrho).abs())
                    .max((signals.beta[h][b] - beta).abs());
            }
        }
        err
    }

    /// Run the exchange at the current slot until the network variables
    /// settle or the iteration cap is hit. Returns the iterations used and
    /// whether the stopping test passed.
    pub fn clear_slot(&mut self) -> Result<(usize, bool)> {
        let t = self.t;
        let m = &self.scenario.market;
        let cap = self.options.max_iters.unwrap_or(m.max_iters).max(1);
        let (xi_theta, xi_v, prox_scale) = (m.xi_theta, m.xi_v, m.prox_scale);
        let step_cfg = m.step.clone();
        let n = self.dno.n();
        let mut converged = false;
        let mut used = 0;
        for k in 1..=cap {
            used = k;
            let inbox = self.collect_messages(k);
            if inbox.len() != self.agents.len() || inbox.iter().any(|m| m.iter != k || m.slot != t) {
                return Err(Error::Validation(format!("barrier violated at slot {t} iteration {k}")));
            }
            let first_seq = inbox.first().map_or(self.seq, |m| m.seq);
            let p = self.injections(&inbox);
            let p_bar: Vec<Vec<T>> = match &self.last_injection {
                Some(prev) => p
                    .iter()
                    .zip(prev)
                    .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| T::two() * x - y).collect())
                    .collect(),
                None => p.clone(),
            };
            let step = step_cfg.at(k);
            let previous = std::mem::replace(&mut self.state, DnoState {
                x: Vec::new(),
                mu: Vec::new(),
                k: 0,
                step,
            });
            self.state = self.dno.network_step(&previous, &p_bar, step);
            let signals = self.dno.signals(&self.state);
            let price_error = self.price_error(&signals);
            let residual = self.dno.residual(&self.state, &p);
            let (mut dtheta, mut dv) = (T::zero(), T::zero());
            for (a, b) in self.state.x.iter().zip(&previous.x) {
                for i in 0..n {
                    dtheta = dtheta.max((a[i] - b[i]).abs());
                    dv = dv.max((a[n + i] - b[n + i]).abs());
                }
            }
            if self.options.record_trace {
                let lx = self.dno.blocks.apply(&self.state.x[0]);
                for b in 0..n {
                    let mismatch = if self.dno.rows[b] {
                        (p[0][b] - lx[b]).abs().max((p[0][n + b] - lx[n + b]).abs())
                    } else {
                        T::zero()
                    };
                    self.result.trace.push(TraceRow {
                        iter: k,
                        slot: t,
                        bus: b,
                        theta: self.state.x[0][b],
                        vmag: self.state.x[0][n + b],
                        lambda: self.state.mu[0][b],
                        gamma: self.state.mu[0][n + b],
                        rho: signals.rho[0][b],
                        varrho: signals.varrho[0][b],
                        residual: mismatch,
                    });
                }
            }
            if let Some(csv) = &mut self.result.signals_csv {
                signals.csv_rows(k, t, csv);
            }
            let outbox = self.broadcast(k, &signals);
            self.result.iterations.push(IterationRecord {
                slot: t,
                iter: k,
                step,
                residual,
                max_dtheta: dtheta,
                max_dv: dv,
                price_error,
                received: inbox.len(),
                broadcast: outbox.len(),
                first_seq,
                last_seq: self.seq,
            });
            self.last_injection = Some(p);
            self.respond(&outbox, step, prox_scale)?;
            self.signals = Some(signals);
            if dtheta <= xi_theta && dv <= xi_v {
                converged = true;
                break;
            }
        }
        self.outcome = Some((used, converged));
        Ok((used, converged))
    }

    /// Proximal best responses of every agent to its signal message.
    fn respond(&mut self, outbox: &[SignalMessage<T>], step: T, prox_scale: T) -> Result<()> {
        let t = self.t;
        let na = self.aggregators.len();
        let (agg_msgs, gen_msgs) = outbox.split_at(na);
        let profiles: Vec<Vec<Vec<T>>> = self
            .aggregators
            .par_iter()
            .zip(agg_msgs)
            .map(|(agg, msg)| {
                let tau = prox_scale / (step * (T::one() + agg.reactive_factor()));
                agg.local_solve(&msg.signals.rho, t, Some((&agg.profiles, tau)))
            })
            .collect::<Result<_>>()?;
        let decisions: Vec<GeneratorDecision<T>> = self
            .generators
            .par_iter()
            .zip(&self.decisions)
            .zip(gen_msgs)
            .map(|((g, d), msg)| {
                generator::local_solve(
                    g,
                    &msg.signals,
                    t,
                    Some(Proximal {
                        anchor: d,
                        tau: prox_scale / step,
                    }),
                )
            })
            .collect();
        for ((agg, prof), msg) in self.aggregators.iter_mut().zip(profiles).zip(agg_msgs) {
            agg.profiles = prof;
            agg.prices = msg.signals.rho.clone();
        }
        self.decisions = decisions;
        Ok(())
    }

    /// Take an externally cleared point (such as the centralized optimum) as
    /// the outcome of the current slot instead of running the exchange.
    pub fn adopt(&mut self, point: &crate::oracle::SlotPoint<T>, injection: Vec<Vec<T>>, iterations: usize) -> Result<()> {
        let len = self.slots();
        if point.profiles.len() != self.aggregators.len()
            || point.generators.len() != self.generators.len()
            || point.x.len() != len
            || point.mu.len() != len
            || injection.len() != len
        {
            return Err(Error::Dimension(format!("adopted point does not cover slot {} of this run", self.t)));
        }
        for (agg, prof) in self.aggregators.iter_mut().zip(&point.profiles) {
            if prof.len() != agg.awake.len() {
                return Err(Error::Dimension(format!("aggregator {} has {} awake appliances", agg.bus, agg.awake.len())));
            }
            agg.profiles = prof.clone();
        }
        self.decisions = point.generators.clone();
        self.state = DnoState {
            x: point.x.clone(),
            mu: point.mu.clone(),
            k: iterations,
            step: T::zero(),
        };
        let signals = self.dno.signals(&self.state);
        for agg in &mut self.aggregators {
            agg.prices = signals.rho.iter().map(|r| r[agg.bus]).collect();
        }
        self.signals = Some(signals);
        self.last_injection = Some(injection);
        self.outcome = Some((iterations, true));
        Ok(())
    }

    /// Commit the first slot of every decision and roll to the next slot.
    pub fn finish_slot(&mut self) -> Result<SlotRecord<T>> {
        let t = self.t;
        let (iterations, converged) = self
            .outcome
            .ok_or_else(|| Error::Validation(format!("slot {t} has not been cleared")))?;
        let signals = self.signals.clone().expect("cleared slot has signals");
        let p = self.last_injection.clone().expect("cleared slot has injections");
        let n = self.dno.n();

        let mut aggregators = Vec::new();
        let mut appliances = Vec::new();
        let mut profit_checks = Vec::new();
        for (i, agg) in self.aggregators.iter().enumerate() {
            let active = self.sleeping[i][0] + agg.profiles.iter().map(|p| p[0]).sum::<T>();
            aggregators.push(AggregatorSlot {
                bus: agg.bus,
                active,
                reactive: active * agg.reactive_factor(),
                price: signals.rho[0][agg.bus],
            });
            for (app, prof) in agg.awake.iter().zip(&agg.profiles) {
                appliances.push(ApplianceSlot {
                    slot: t,
                    bus: agg.bus,
                    appliance: app.spec.id.clone(),
                    wake: app.wake,
                    energy: prof[0],
                });
            }
            if !agg.awake.is_empty() {
                profit_checks.push(self.profit_check(agg, &signals)?);
            }
        }
        let generators = self
            .generators
            .iter()
            .zip(&self.decisions)
            .map(|(g, d)| GeneratorSlot {
                id: g.id.clone(),
                bus: g.bus,
                p_conv: d.p_conv[0],
                q_conv: d.q_conv[0],
                p_ren: d.p_ren[0],
                p_ren_min: g.ren_min(t),
                rho: signals.rho[0][g.bus],
                varrho: signals.varrho[0][g.bus],
                beta: signals.beta[0][g.bus],
            })
            .collect();
        let record = SlotRecord {
            slot: t,
            iterations,
            converged,
            residual: self.dno.residual(&self.state, &p),
            theta: self.state.theta(0).to_vec(),
            v: self.state.v(0).to_vec(),
            lambda: self.state.lambda(0).to_vec(),
            gamma: self.state.gamma(0).to_vec(),
            rho: signals.rho[0].clone(),
            varrho: signals.varrho[0].clone(),
            beta: signals.beta[0].clone(),
            injection: p[0][..2 * n].to_vec(),
            aggregators,
            generators,
            appliances,
            profit_checks,
        };

        for agg in &mut self.aggregators {
            agg.commit_slot(t);
        }
        for d in &mut self.decisions {
            d.p_conv.remove(0);
            d.q_conv.remove(0);
            d.p_ren.remove(0);
        }
        for (g, d) in self.generators.iter().zip(&mut self.decisions) {
            d.delta = generator::attained_budget(g, &d.p_ren, t + 1);
        }
        self.state.shift();
        let seconds = self.slot_started.take().map_or(0.0, |s| s.elapsed().as_secs_f64());
        self.result.timing.push(SlotTiming {
            slot: t,
            iterations,
            seconds,
        });
        self.result.slots.push(record.clone());
        Ok(record)
    }

    fn profit_check(&self, agg: &AggregatorState<T>, signals: &SignalBundle<T>) -> Result<ProfitCheck<T>> {
        let t = self.t;
        let prices: Vec<T> = signals.rho.iter().map(|r| r[agg.bus]).collect();
        let best = agg.local_solve(&prices, t, None)?;
        let bench = agg
            .awake
            .iter()
            .map(|a| Ok(a.feasible_set(t)?.project(&a.nominal_profile(t))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProfitCheck {
            slot: t,
            bus: agg.bus,
            optimized: agg.profit(&best, &prices, t)?,
            equilibrium: agg.profit(&agg.profiles, &prices, t)?,
            benchmark: agg.profit(&bench, &prices, t)?,
        })
    }

    /// Clear every remaining slot.
    pub fn run(mut self) -> Result<SimulationResult<T>> {
        while self.t < self.horizon() {
            self.begin_slot()?;
            self.clear_slot()?;
            self.finish_slot()?;
        }
        Ok(self.result)
    }

    pub fn result(&self) -> &SimulationResult<T> {
        &self.result
    }
}

/// Full day under the mode in `options`.
pub fn run_horizon<T: Scalar>(scenario: &Scenario<T>, options: MarketOptions) -> Result<SimulationResult<T>> {
    Simulation::new(scenario, options)?.run()
}

/// Full day without demand response.
pub fn benchmark_run<T: Scalar>(scenario: &Scenario<T>, options: MarketOptions) -> Result<SimulationResult<T>> {
    run_horizon(
        scenario,
        MarketOptions {
            mode: Mode::Benchmark,
            ..options
        },
    )
}

//! Centralized reference solvers for the problem the market clears at one
//! slot, and a first-order optimality check for any candidate point.
//!
//! The centralized problem maximizes aggregate utility minus generation
//! cost minus the renewable risk charge, subject to the linearized flow
//! equations, the voltage and thermal limits and every agent's own
//! constraints. The flow equations of the non-slack rows are eliminated by
//! solving for `(θ, v)`; the slack rows and the network limits are handled
//! by an augmented Lagrangian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::appliance::FeasibleSet;
use crate::dno::{Dno, Metric};
use crate::error::{Error, Result};
use crate::generator::{attained_budget, GeneratorDecision};
use crate::linalg::Lu;
use crate::linpf::polygon_halfspaces;
use crate::market::{SlotProblem, Simulation};
use crate::scalar::{dot, Scalar};

/// Decisions of every agent and the network over `H_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPoint<T> {
    /// `[aggregator][awake appliance][slot]`
    pub profiles: Vec<Vec<Vec<T>>>,
    pub generators: Vec<GeneratorDecision<T>>,
    /// `[θ; v]` per slot.
    pub x: Vec<Vec<T>>,
    /// `[λ; γ]` per slot.
    pub mu: Vec<Vec<T>>,
}

impl<T: Scalar> SlotPoint<T> {
    /// The current iterate of a market run.
    pub fn of_market(sim: &Simulation<T>) -> Self {
        Self {
            profiles: sim.aggregators.iter().map(|a| a.profiles.clone()).collect(),
            generators: sim.decisions.clone(),
            x: sim.state.x.clone(),
            mu: sim.state.mu.clone(),
        }
    }
}

/// Largest first-order violation per block.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// `(bus, residual)` of each aggregator's local problem at its price.
    pub aggregators: Vec<(usize, f64)>,
    /// `(bus, residual)` of each generator's local problem at its prices.
    pub generators: Vec<(usize, f64)>,
    /// Enforced balance rows `|P - Λx|`.
    pub balance: f64,
    /// Optimality of `(θ, v)` for the network operator at `μ`.
    pub network: f64,
    /// Violation of the network limits and agent sets.
    pub feasibility: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.aggregators
            .iter()
            .chain(&self.generators)
            .map(|&(_, r)| r)
            .chain([self.balance, self.network, self.feasibility])
            .fold(0.0, f64::max)
    }

    /// Buses whose agent residual exceeds `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .aggregators
            .iter()
            .chain(&self.generators)
            .filter(|&&(_, r)| r > tol)
            .map(|&(b, _)| b)
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone)]
pub struct CentralSolution<T> {
    pub t: usize,
    pub point: SlotPoint<T>,
    /// Net injections `[p; q]` per slot.
    pub injection: Vec<Vec<T>>,
    pub objective: T,
    pub outer_iterations: usize,
    /// Multipliers are estimated only by the augmented Lagrangian solver.
    pub kkt: Option<KktReport>,
}

#[derive(Debug, Clone, Copy)]
pub struct CentralOptions {
    /// Start from a uniform draw instead of the box midpoints.
    pub seed: Option<u64>,
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for CentralOptions {
    fn default() -> Self {
        Self {
            seed: None,
            tol: 1e-9,
            max_outer: 50,
            max_inner: 200_000,
        }
    }
}

#[derive(Debug, Clone)]
enum VarSet<T> {
    Appliance(FeasibleSet<T>),
    Box { lo: Vec<T>, hi: Vec<T> },
}

impl<T: Scalar> VarSet<T> {
    fn project(&self, z: &[T]) -> Vec<T> {
        match self {
            VarSet::Appliance(set) => set.project(z),
            VarSet::Box { lo, hi } => z.iter().zip(lo.iter().zip(hi)).map(|(&v, (&l, &h))| v.clamp_to(l, h)).collect(),
        }
    }

    fn bounds(&self) -> (&[T], &[T]) {
        match self {
            VarSet::Appliance(set) => (&set.lo, &set.hi),
            VarSet::Box { lo, hi } => (lo, hi),
        }
    }

    fn violation(&self, z: &[T]) -> T {
        let p = self.project(z);
        z.iter().zip(&p).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }
}

/// Network half-space `a·x <= bound` with `a` dense on the free coordinates.
#[derive(Debug, Clone)]
struct Limit<T> {
    a_free: Vec<T>,
    a: Vec<(usize, T)>,
    bound: T,
}

/// Flat layout of the agent variables: appliances in aggregator order,
/// then `p_conv`, `q_conv`, `p_ren` of every generator.
struct Central<'a, T> {
    problem: &'a SlotProblem<T>,
    dno: Dno<T>,
    slots: usize,
    n: usize,
    sets: Vec<(usize, VarSet<T>)>,
    /// `(aggregator, appliance)` of the first blocks.
    appliance_blocks: Vec<(usize, usize)>,
    gen_offset: usize,
    len: usize,
    lu_t: Lu<T>,
    slack_rows: bool,
    limits: Vec<Limit<T>>,
    /// Renewable penalty per generator.
    beta: Vec<T>,
}

impl<'a, T: Scalar> Central<'a, T> {
    fn new(problem: &'a SlotProblem<T>) -> Result<Self> {
        let dno = Dno::new(&problem.scenario)?;
        let t = problem.t;
        let slots = problem.slots();
        let n = dno.n();
        let mut sets = Vec::new();
        let mut appliance_blocks = Vec::new();
        let mut offset = 0;
        for (i, agg) in problem.aggregators.iter().enumerate() {
            for (k, app) in agg.awake.iter().enumerate() {
                sets.push((offset, VarSet::Appliance(app.feasible_set(t)?)));
                appliance_blocks.push((i, k));
                offset += slots;
            }
        }
        let gen_offset = offset;
        for g in &problem.generators {
            sets.push((offset, VarSet::Box { lo: vec![g.p_min; slots], hi: vec![g.p_max; slots] }));
            sets.push((offset + slots, VarSet::Box { lo: vec![g.q_min; slots], hi: vec![g.q_max; slots] }));
            sets.push((
                offset + 2 * slots,
                VarSet::Box {
                    lo: (0..slots).map(|k| g.ren_min(t + k)).collect(),
                    hi: (0..slots).map(|k| g.ren_max(t + k)).collect(),
                },
            ));
            offset += 3 * slots;
        }
        let free = &dno.blocks.free;
        let reduced = dno.blocks.lambda.select(free, free);
        let lu_t = Lu::factor(&reduced.transpose()).map_err(|s| Error::Singular {
            rows: s.dependent_rows.iter().map(|r| format!("reduced column {r}")).collect(),
        })?;
        let mut halfspaces = polygon_halfspaces(&dno.network);
        for (b, bus) in dno.network.buses.iter().enumerate() {
            halfspaces.push(crate::linpf::HalfSpace { coef: vec![(n + b, T::one())], bound: bus.v_max });
            halfspaces.push(crate::linpf::HalfSpace { coef: vec![(n + b, -T::one())], bound: -bus.v_min });
        }
        let limits = halfspaces
            .into_iter()
            .map(|h| {
                let dense = h.dense(2 * n);
                Limit {
                    a_free: free.iter().map(|&i| dense[i]).collect(),
                    a: h.coef,
                    bound: h.bound,
                }
            })
            .collect();
        let slack_rows = dno.rows[dno.network.slack];
        let beta = problem.generators.iter().map(|g| dno.beta[g.bus]).collect();
        Ok(Self {
            problem,
            dno,
            slots,
            n,
            sets,
            appliance_blocks,
            gen_offset,
            len: offset,
            lu_t,
            slack_rows,
            limits,
            beta,
        })
    }

    fn project(&self, z: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.len];
        for (off, set) in &self.sets {
            let d = set.bounds().0.len();
            out[*off..off + d].copy_from_slice(&set.project(&z[*off..off + d]));
        }
        out
    }

    fn midpoint(&self) -> Vec<T> {
        let mut z = vec![T::zero(); self.len];
        for (off, set) in &self.sets {
            let (lo, hi) = set.bounds();
            for k in 0..lo.len() {
                z[off + k] = (lo[k] + hi[k]) * T::half();
            }
        }
        self.project(&z)
    }

    fn random_point(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = vec![T::zero(); self.len];
        for (off, set) in &self.sets {
            let (lo, hi) = set.bounds();
            for k in 0..lo.len() {
                z[off + k] = lo[k] + (hi[k] - lo[k]) * T::lit(rng.gen::<f64>());
            }
        }
        self.project(&z)
    }

    fn to_point(&self, z: &[T]) -> (Vec<Vec<Vec<T>>>, Vec<GeneratorDecision<T>>) {
        let s = self.slots;
        let mut profiles: Vec<Vec<Vec<T>>> = self.problem.aggregators.iter().map(|a| Vec::with_capacity(a.awake.len())).collect();
        for (blk, &(i, _)) in self.appliance_blocks.iter().enumerate() {
            profiles[i].push(z[blk * s..(blk + 1) * s].to_vec());
        }
        let gens = self
            .problem
            .generators
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let off = self.gen_offset + 3 * s * j;
                let p_ren = z[off + 2 * s..off + 3 * s].to_vec();
                GeneratorDecision {
                    p_conv: z[off..off + s].to_vec(),
                    q_conv: z[off + s..off + 2 * s].to_vec(),
                    delta: attained_budget(g, &p_ren, self.problem.t),
                    p_ren,
                }
            })
            .collect();
        (profiles, gens)
    }

    fn of_point(&self, profiles: &[Vec<Vec<T>>], gens: &[GeneratorDecision<T>]) -> Result<Vec<T>> {
        let s = self.slots;
        let mut z = Vec::with_capacity(self.len);
        for &(i, k) in &self.appliance_blocks {
            let p = profiles.get(i).and_then(|a| a.get(k)).filter(|p| p.len() == s);
            z.extend_from_slice(p.ok_or_else(|| Error::Dimension(format!("profile of aggregator {i} appliance {k}")))?);
        }
        for (j, d) in gens.iter().enumerate() {
            if d.p_conv.len() != s || d.q_conv.len() != s || d.p_ren.len() != s {
                return Err(Error::Dimension(format!("decision of generator {j}")));
            }
            z.extend_from_slice(&d.p_conv);
            z.extend_from_slice(&d.q_conv);
            z.extend_from_slice(&d.p_ren);
        }
        if z.len() != self.len || gens.len() != self.problem.generators.len() {
            return Err(Error::Dimension("candidate does not match the slot problem".into()));
        }
        Ok(z)
    }

    fn injections(&self, z: &[T]) -> Vec<Vec<T>> {
        let (s, n) = (self.slots, self.n);
        let mut p = vec![vec![T::zero(); 2 * n]; s];
        for (i, agg) in self.problem.aggregators.iter().enumerate() {
            let kq = agg.reactive_factor();
            for (h, ph) in p.iter_mut().enumerate() {
                let l = self.problem.sleeping[i][h];
                ph[agg.bus] = ph[agg.bus] - l;
                ph[n + agg.bus] = ph[n + agg.bus] - kq * l;
            }
        }
        for (blk, &(i, _)) in self.appliance_blocks.iter().enumerate() {
            let agg = &self.problem.aggregators[i];
            let kq = agg.reactive_factor();
            for (h, ph) in p.iter_mut().enumerate() {
                let e = z[blk * s + h];
                ph[agg.bus] = ph[agg.bus] - e;
                ph[n + agg.bus] = ph[n + agg.bus] - kq * e;
            }
        }
        for (j, g) in self.problem.generators.iter().enumerate() {
            let off = self.gen_offset + 3 * s * j;
            for (h, ph) in p.iter_mut().enumerate() {
                ph[g.bus] = ph[g.bus] + z[off + h] + z[off + 2 * s + h];
                ph[n + g.bus] = ph[n + g.bus] + z[off + s + h];
            }
        }
        p
    }

    fn welfare(&self, z: &[T]) -> T {
        let (s, t) = (self.slots, self.problem.t);
        let mut f = T::zero();
        for (blk, &(i, k)) in self.appliance_blocks.iter().enumerate() {
            f = f + self.problem.aggregators[i].awake[k].utility(&z[blk * s..(blk + 1) * s], t);
        }
        for (j, g) in self.problem.generators.iter().enumerate() {
            let off = self.gen_offset + 3 * s * j;
            for h in 0..s {
                f = f - g.cost(z[off + h]) - self.beta[j] * (z[off + 2 * s + h] - g.ren_min(t + h));
            }
        }
        f
    }

    /// Gradient of the welfare plus the value of the injections at prices `mu`.
    fn profit_gradient(&self, z: &[T], mu: &[Vec<T>]) -> Vec<T> {
        let (s, t, n) = (self.slots, self.problem.t, self.n);
        let mut g = vec![T::zero(); self.len];
        for (blk, &(i, k)) in self.appliance_blocks.iter().enumerate() {
            let agg = &self.problem.aggregators[i];
            let kq = agg.reactive_factor();
            let du = agg.awake[k].utility_gradient(&z[blk * s..(blk + 1) * s], t);
            for h in 0..s {
                g[blk * s + h] = du[h] - mu[h][agg.bus] - kq * mu[h][n + agg.bus];
            }
        }
        for (j, gen) in self.problem.generators.iter().enumerate() {
            let off = self.gen_offset + 3 * s * j;
            for h in 0..s {
                let (lam, gam) = (mu[h][gen.bus], mu[h][n + gen.bus]);
                g[off + h] = lam - (T::two() * gen.a2 * z[off + h] + gen.a1);
                g[off + s + h] = gam;
                g[off + 2 * s + h] = lam - self.beta[j];
            }
        }
        g
    }

    /// Slack-row mismatch and network-limit values for one slot.
    fn constraint_values(&self, p: &[T]) -> (Vec<T>, [T; 2], Vec<T>) {
        let x = self.dno.blocks.solve_state(p);
        let (n, s) = (self.n, self.dno.network.slack);
        let eq = if self.slack_rows {
            let row = |r: usize| p[r] - dot(self.dno.blocks.lambda.row(r), &x);
            [row(s), row(n + s)]
        } else {
            [T::zero(); 2]
        };
        let g = self
            .limits
            .iter()
            .map(|l| l.a.iter().map(|&(i, c)| c * x[i]).sum::<T>() - l.bound)
            .collect();
        (x, eq, g)
    }

    /// Prices implied by the slack-row and limit multipliers.
    fn prices(&self, omega: [T; 2], nu: &[T]) -> Vec<T> {
        let (n, s) = (self.n, self.dno.network.slack);
        let free = &self.dno.blocks.free;
        let lam = &self.dno.blocks.lambda;
        let mut rhs = vec![T::zero(); free.len()];
        for (c, &col) in free.iter().enumerate() {
            if self.slack_rows {
                rhs[c] = omega[0] * lam[(s, col)] + omega[1] * lam[(n + s, col)];
            }
        }
        for (l, &v) in self.limits.iter().zip(nu) {
            if v != T::zero() {
                for (c, &a) in l.a_free.iter().enumerate() {
                    rhs[c] = rhs[c] - v * a;
                }
            }
        }
        let sol = self.lu_t.solve(&rhs);
        let mut mu = vec![T::zero(); 2 * n];
        for (&r, &v) in free.iter().zip(&sol) {
            mu[r] = v;
        }
        if self.slack_rows {
            mu[s] = -omega[0];
            mu[n + s] = -omega[1];
        }
        mu
    }

    /// Augmented Lagrangian value, gradient and tentative prices.
    fn augmented(&self, z: &[T], omega: &[[T; 2]], nu: &[Vec<T>], c: T) -> (T, Vec<T>, Vec<Vec<T>>) {
        let p = self.injections(z);
        let mut value = self.welfare(z);
        let mut mu = Vec::with_capacity(self.slots);
        for h in 0..self.slots {
            let (_, eq, g) = self.constraint_values(&p[h]);
            let mut w = [T::zero(); 2];
            for r in 0..2 {
                w[r] = omega[h][r] + c * eq[r];
                value = value - omega[h][r] * eq[r] - c * T::half() * eq[r] * eq[r];
            }
            let nt: Vec<T> = g.iter().zip(&nu[h]).map(|(&gi, &ni)| (ni + c * gi).max(T::zero())).collect();
            for (&a, &b) in nt.iter().zip(&nu[h]) {
                value = value - (a * a - b * b) / (T::two() * c);
            }
            mu.push(self.prices(w, &nt));
        }
        let grad = self.profit_gradient(z, &mu);
        (value, grad, mu)
    }

    fn stationarity(&self, z: &[T], grad: &[T]) -> T {
        let moved: Vec<T> = z.iter().zip(grad).map(|(&a, &b)| a + b).collect();
        let p = self.project(&moved);
        z.iter().zip(&p).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }

    /// Accelerated projected gradient ascent on the augmented Lagrangian.
    /// Step lengths come from a curvature test on gradients only, so the
    /// iteration keeps making progress below the resolution of the
    /// objective value; momentum restarts when it stops pointing uphill.
    fn inner(&self, mut z: Vec<T>, omega: &[[T; 2]], nu: &[Vec<T>], c: T, tol: T, max_iters: usize) -> (Vec<T>, T) {
        let grad = |z: &[T]| self.augmented(z, omega, nu, c).1;
        let mut gz = grad(&z);
        let mut res = self.stationarity(&z, &gz);
        let mut prev = z.clone();
        let mut momentum = T::one();
        let mut lip = T::one();
        for _ in 0..max_iters {
            if res <= tol {
                break;
            }
            let next_m = (T::one() + (T::one() + T::lit(4.0) * momentum * momentum).sqrt()) * T::half();
            let beta = (momentum - T::one()) / next_m;
            let y = if beta > T::zero() {
                let y: Vec<T> = z.iter().zip(&prev).map(|(&a, &b)| a + beta * (a - b)).collect();
                self.project(&y)
            } else {
                z.clone()
            };
            let gy = if beta > T::zero() { grad(&y) } else { gz.clone() };
            let (cand, gc) = loop {
                let moved: Vec<T> = y.iter().zip(&gy).map(|(&a, &b)| a + b / lip).collect();
                let cand = self.project(&moved);
                let gc = grad(&cand);
                let d: Vec<T> = cand.iter().zip(&y).map(|(&a, &b)| a - b).collect();
                let dd = dot(&d, &d);
                let curv: T = gy.iter().zip(&gc).zip(&d).map(|((&a, &b), &e)| (a - b) * e).sum();
                if dd == T::zero() || curv <= lip * dd || lip > T::lit(1e18) {
                    break (cand, gc);
                }
                lip = lip * T::two();
            };
            let uphill: T = cand.iter().zip(&y).zip(&z).map(|((&a, &b), &p)| (a - b) * (a - p)).sum();
            momentum = if uphill < T::zero() { T::one() } else { next_m };
            prev = std::mem::replace(&mut z, cand);
            gz = gc;
            res = self.stationarity(&z, &gz);
            lip = (lip / T::lit(1.1)).max(T::lit(1e-6));
        }
        (z, res)
    }

    fn kkt(&self, z: &[T], x: &[Vec<T>], mu: &[Vec<T>]) -> KktReport {
        let (s, n) = (self.slots, self.n);
        let grad = self.profit_gradient(z, mu);
        let step_residual = |range: std::ops::Range<usize>, set: &VarSet<T>| -> f64 {
            let moved: Vec<T> = range.clone().map(|k| z[k] + grad[k]).collect();
            let p = set.project(&moved);
            range.zip(&p).map(|(k, &v)| (z[k] - v).abs().as_f64()).fold(0.0, f64::max)
        };
        let mut aggregators: Vec<(usize, f64)> = self.problem.aggregators.iter().map(|a| (a.bus, 0.0)).collect();
        let mut generators: Vec<(usize, f64)> = self.problem.generators.iter().map(|g| (g.bus, 0.0)).collect();
        let mut feasibility = 0.0f64;
        for (idx, (off, set)) in self.sets.iter().enumerate() {
            let d = set.bounds().0.len();
            let r = step_residual(*off..off + d, set);
            feasibility = feasibility.max(set.violation(&z[*off..off + d]).as_f64());
            if idx < self.appliance_blocks.len() {
                let i = self.appliance_blocks[idx].0;
                aggregators[i].1 = aggregators[i].1.max(r);
            } else {
                let j = (idx - self.appliance_blocks.len()) / 3;
                generators[j].1 = generators[j].1.max(r);
            }
        }
        let p = self.injections(z);
        let mut balance = 0.0f64;
        let mut network = 0.0f64;
        for h in 0..s {
            let lx = self.dno.blocks.apply(&x[h]);
            for r in 0..2 * n {
                if self.dno.rows[r] {
                    balance = balance.max((p[h][r] - lx[r]).abs().as_f64());
                }
            }
            feasibility = feasibility.max(self.dno.infeasibility(&x[h]).as_f64());
            let masked: Vec<T> = (0..2 * n).map(|r| if self.dno.rows[r] { mu[h][r] } else { T::zero() }).collect();
            let g = self.dno.blocks.apply_transpose(&masked);
            let moved: Vec<T> = x[h].iter().zip(&g).map(|(&a, &b)| a - b).collect();
            let proj = self.dno.project(&moved, Metric::Euclidean);
            for &i in &self.dno.blocks.free {
                network = network.max((x[h][i] - proj[i]).abs().as_f64());
            }
        }
        KktReport {
            aggregators,
            generators,
            balance,
            network,
            feasibility,
        }
    }
}

/// Optimum of the slot problem by an augmented Lagrangian method.
pub fn solve_central<T: Scalar>(problem: &SlotProblem<T>, options: CentralOptions) -> Result<CentralSolution<T>> {
    let cx = Central::new(problem)?;
    let slots = cx.slots;
    check_supply(problem)?;
    let mut z = match options.seed {
        Some(seed) => cx.random_point(seed),
        None => cx.midpoint(),
    };
    let mut omega = vec![[T::zero(); 2]; slots];
    let mut nu = vec![vec![T::zero(); cx.limits.len()]; slots];
    let mut c = T::one();
    let tol = T::lit(options.tol).max(T::tiny(1e3));
    let mut inner_tol = T::lit(1e-4).max(tol);
    let mut outer = 0;
    let mut last = (T::infinity(), T::infinity());
    while outer < options.max_outer {
        outer += 1;
        let (zn, res) = cx.inner(z, &omega, &nu, c, inner_tol, options.max_inner);
        z = zn;
        let p = cx.injections(&z);
        let mut infeas = T::zero();
        for h in 0..slots {
            let (_, eq, g) = cx.constraint_values(&p[h]);
            for r in 0..2 {
                omega[h][r] = omega[h][r] + c * eq[r];
                infeas = infeas.max(eq[r].abs());
            }
            for (ni, &gi) in nu[h].iter_mut().zip(&g) {
                *ni = (*ni + c * gi).max(T::zero());
                infeas = infeas.max(gi);
            }
        }
        last = (infeas, res);
        if infeas <= tol && res <= tol {
            break;
        }
        inner_tol = (inner_tol * T::lit(0.1)).max(tol);
        c = c * T::two();
    }
    let mu: Vec<Vec<T>> = (0..slots).map(|h| cx.prices(omega[h], &nu[h])).collect();
    let (infeas, res) = last;
    if infeas > T::lit(1e-6) {
        return Err(Error::Infeasible(format!(
            "network constraints still violated by {infeas} after {outer} outer iterations"
        )));
    }
    if res > T::lit(1e-6) {
        return Err(Error::NoConvergence {
            agent: "central solver".into(),
            residual: res.as_f64(),
        });
    }
    let injection = cx.injections(&z);
    let x: Vec<Vec<T>> = injection.iter().map(|p| cx.dno.blocks.solve_state(p)).collect();
    let kkt = cx.kkt(&z, &x, &mu);
    let (profiles, generators) = cx.to_point(&z);
    Ok(CentralSolution {
        t: problem.t,
        objective: cx.welfare(&z),
        point: SlotPoint { profiles, generators, x, mu },
        injection,
        outer_iterations: outer,
        kkt: Some(kkt),
    })
}

/// With a supplied slack, aggregate generation must be able to cover the
/// least possible demand in every slot.
fn check_supply<T: Scalar>(problem: &SlotProblem<T>) -> Result<()> {
    if problem.scenario.slack_generator().is_none() {
        return Ok(());
    }
    let t = problem.t;
    for h in 0..problem.slots() {
        let mut least = T::zero();
        for (i, agg) in problem.aggregators.iter().enumerate() {
            least = least + problem.sleeping[i][h];
            for app in &agg.awake {
                least = least + app.feasible_set(t)?.lo[h];
            }
        }
        let most: T = problem.generators.iter().map(|g| g.p_max + g.ren_max(t + h)).sum();
        if least > most {
            return Err(Error::Infeasible(format!(
                "slot {}: least demand {least} exceeds total capacity {most}",
                t + h
            )));
        }
    }
    Ok(())
}

/// Objective of the slot problem at a candidate's agent decisions.
pub fn objective<T: Scalar>(problem: &SlotProblem<T>, point: &SlotPoint<T>) -> Result<T> {
    let cx = Central::new(problem)?;
    Ok(cx.welfare(&cx.of_point(&point.profiles, &point.generators)?))
}

/// Net injections `[p; q]` per slot of a candidate's agent decisions.
pub fn injections<T: Scalar>(problem: &SlotProblem<T>, point: &SlotPoint<T>) -> Result<Vec<Vec<T>>> {
    let cx = Central::new(problem)?;
    Ok(cx.injections(&cx.of_point(&point.profiles, &point.generators)?))
}

/// First-order optimality of a candidate with its prices `point.mu`.
pub fn kkt_check<T: Scalar>(problem: &SlotProblem<T>, point: &SlotPoint<T>) -> Result<KktReport> {
    let cx = Central::new(problem)?;
    let z = cx.of_point(&point.profiles, &point.generators)?;
    if point.x.len() != cx.slots || point.mu.len() != cx.slots {
        return Err(Error::Dimension("candidate network state does not cover H_t".into()));
    }
    Ok(cx.kkt(&z, &point.x, &point.mu))
}

const BRUTE_FORCE_LIMIT: f64 = 1e8;

/// Exhaustive search over a grid of the free decisions of a tiny problem.
/// The generator on the slack bus (if any) covers the balance.
pub fn brute_force<T: Scalar>(problem: &SlotProblem<T>, resolution: T) -> Result<CentralSolution<T>> {
    let cx = Central::new(problem)?;
    let appliances = cx.appliance_blocks.len();
    if cx.n > 3 || cx.slots > 2 || appliances > 2 || problem.generators.len() > 1 {
        return Err(Error::Validation(format!(
            "brute force takes at most 3 buses, 2 slots, 2 appliances and 1 generator; got {}, {}, {appliances}, {}",
            cx.n,
            cx.slots,
            problem.generators.len()
        )));
    }
    if resolution <= T::zero() {
        return Err(Error::Validation("grid resolution must be positive".into()));
    }
    let slack_gen = problem.scenario.slack_generator();
    // enumerated coordinates of z, with their grids
    let mut dims: Vec<(usize, Vec<T>)> = Vec::new();
    for (idx, (off, set)) in cx.sets.iter().enumerate() {
        let is_gen = idx >= appliances;
        let role = if is_gen { (idx - appliances) % 3 } else { 3 };
        // p_conv and q_conv of the slack generator follow from the balance
        if is_gen && slack_gen.is_some() && role < 2 {
            continue;
        }
        let (lo, hi) = set.bounds();
        for k in 0..lo.len() {
            dims.push((off + k, grid(lo[k], hi[k], resolution)));
        }
    }
    let points: f64 = dims.iter().map(|(_, g)| g.len() as f64).product();
    if points > BRUTE_FORCE_LIMIT {
        return Err(Error::GridTooLarge { points });
    }
    let total = points as usize;
    let base = cx.midpoint();
    let s = cx.slots;
    let evaluate = |index: usize| -> Option<(T, Vec<T>)> {
        let mut z = base.clone();
        let mut rest = index;
        for (coord, g) in dims.iter().rev() {
            z[*coord] = g[rest % g.len()];
            rest /= g.len();
        }
        for (off, set) in cx.sets.iter().take(appliances) {
            if let VarSet::Appliance(fs) = set {
                if !fs.contains(&z[*off..off + s], T::tiny(64.0)) {
                    return None;
                }
            }
        }
        if let Some(j) = slack_gen {
            let off = cx.gen_offset + 3 * s * j;
            let g = &problem.generators[j];
            let (sb, n) = (g.bus, cx.n);
            for h in 0..s {
                z[off + h] = T::zero();
                z[off + s + h] = T::zero();
            }
            let p = cx.injections(&z);
            for h in 0..s {
                let x = cx.dno.blocks.solve_state(&p[h]);
                let lx = cx.dno.blocks.apply(&x);
                let p_conv = lx[sb] - p[h][sb];
                let q_conv = lx[n + sb] - p[h][n + sb];
                if p_conv < g.p_min || p_conv > g.p_max || q_conv < g.q_min || q_conv > g.q_max {
                    return None;
                }
                z[off + h] = p_conv;
                z[off + s + h] = q_conv;
            }
        }
        let p = cx.injections(&z);
        for ph in &p {
            let x = cx.dno.blocks.solve_state(ph);
            if cx.dno.infeasibility(&x) > T::zero() {
                return None;
            }
        }
        Some((cx.welfare(&z), z))
    };
    let best = (0..total)
        .into_par_iter()
        .filter_map(|i| evaluate(i).map(|(f, _)| (f, i)))
        .reduce_with(|a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    let Some((objective, index)) = best else {
        return Err(Error::Infeasible(format!("no grid point of {total} satisfies the constraints")));
    };
    let z = evaluate(index).expect("best point is feasible").1;
    let injection = cx.injections(&z);
    let x: Vec<Vec<T>> = injection.iter().map(|p| cx.dno.blocks.solve_state(p)).collect();
    let (profiles, generators) = cx.to_point(&z);
    Ok(CentralSolution {
        t: problem.t,
        point: SlotPoint {
            profiles,
            generators,
            mu: vec![vec![T::zero(); 2 * cx.n]; s],
            x,
        },
        injection,
        objective,
        outer_iterations: 0,
        kkt: None,
    })
}

fn grid<T: Scalar>(lo: T, hi: T, r: T) -> Vec<T> {
    if hi <= lo {
        return vec![lo];
    }
    let steps = ((hi - lo) / r).floor().to_usize().unwrap_or(0);
    let mut out: Vec<T> = (0..=steps).map(|k| lo + r * T::of_usize(k)).collect();
    if *out.last().expect("grid has a point") < hi - T::tiny(64.0) * (T::one() + hi.abs()) {
        out.push(hi);
    }
    out
}

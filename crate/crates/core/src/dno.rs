//! Network operator: network variables (θ, v), balance multipliers (λ, γ),
//! projection onto the network constraints and the price signals.
//!
//! Per slot the state is `x = [θ; v]` and the multipliers `μ = [λ; γ]`, both
//! of length `2n`. Balance rows of the slack bus are dropped (and their
//! multipliers stay zero) unless a generator sits on the slack bus.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Entity, NetworkModel, Scenario};
use crate::linalg::{Lu, Matrix, Sparse};
use crate::linpf::{assemble_lambda, polygon_halfspaces, reduced_inverse, AdmittanceBlocks, HalfSpace, SensitivityMatrix};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusRole<T> {
    Aggregator { reactive_factor: T },
    Generator { renewable: bool },
    Passive,
}

/// Metric for projections onto the network constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// `ΛᵀSΛ` on the kept balance rows.
    Network,
}

/// Exact projection `min ½(x-z)ᵀM(x-z)` subject to half-spaces, in the free
/// (non-slack) coordinates, by a Lawson-Hanson active-set solve of the dual.
#[derive(Debug, Clone)]
struct Projector<T> {
    cons: Vec<ReducedHalfSpace<T>>,
}

#[derive(Debug, Clone)]
struct ReducedHalfSpace<T> {
    coef: Vec<(usize, T)>,
    bound: T,
    /// `M⁻¹ a`
    w: Vec<T>,
}

impl<T: Scalar> Projector<T> {
    fn new(halfspaces: &[HalfSpace<T>], free: &[usize], anchor: &[T], minv: Option<&Matrix<T>>) -> Self {
        let mut pos = vec![usize::MAX; anchor.len()];
        for (k, &i) in free.iter().enumerate() {
            pos[i] = k;
        }
        let d = free.len();
        let cons = halfspaces
            .iter()
            .filter_map(|h| {
                let mut bound = h.bound;
                let mut coef = Vec::new();
                for &(i, a) in &h.coef {
                    if pos[i] == usize::MAX {
                        bound = bound - a * anchor[i];
                    } else {
                        coef.push((pos[i], a));
                    }
                }
                if coef.is_empty() {
                    return None;
                }
                let w: Vec<T> = match minv {
                    Some(m) => {
                        let mut w = vec![T::zero(); d];
                        for &(j, a) in &coef {
                            for (r, wr) in w.iter_mut().enumerate() {
                                *wr = *wr + m[(r, j)] * a;
                            }
                        }
                        w
                    }
                    None => {
                        let mut w = vec![T::zero(); d];
                        for &(j, a) in &coef {
                            w[j] = w[j] + a;
                        }
                        w
                    }
                };
                Some(ReducedHalfSpace { coef, bound, w })
            })
            .collect();
        Self { cons }
    }

    fn value(&self, i: usize, x: &[T]) -> T {
        self.cons[i].coef.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// With `j` last in `active` and its normal in the span of the others,
    /// shift weight from the others onto `j` until one of them drops out.
    fn exchange(&self, j: usize, active: &mut Vec<usize>, y: &mut Vec<T>) -> bool {
        let rest = &active[..active.len() - 1];
        if active.last() != Some(&j) || rest.is_empty() {
            return false;
        }
        let q = Matrix::from_rows(
            &rest
                .iter()
                .map(|&i| rest.iter().map(|&k| self.value(i, &self.cons[k].w)).collect())
                .collect::<Vec<_>>(),
        );
        let Ok(lu) = Lu::factor(&q) else {
            return false;
        };
        let u = lu.solve(&rest.iter().map(|&i| self.value(i, &self.cons[j].w)).collect::<Vec<_>>());
        let Some((drop, t)) = u
            .iter()
            .enumerate()
            .filter(|(_, &uk)| uk > T::tiny(1e3))
            .map(|(k, &uk)| (k, y[k] / uk))
            .fold(None, |best: Option<(usize, T)>, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            })
        else {
            return false;
        };
        let last = y.len() - 1;
        for (yk, &uk) in y.iter_mut().zip(&u) {
            *yk = *yk - t * uk;
        }
        y[last] = y[last] + t;
        active.remove(drop);
        y.remove(drop);
        true
    }

    fn project(&self, z: &[T]) -> Vec<T> {
        let m = self.cons.len();
        let r: Vec<T> = (0..m).map(|i| self.value(i, z) - self.cons[i].bound).collect();
        let tol: Vec<T> = self.cons.iter().map(|h| T::tiny(1e3) * (T::one() + h.bound.abs())).collect();
        let mut active: Vec<usize> = Vec::new();
        let mut y: Vec<T> = Vec::new();
        let mut skipped = vec![false; m];
        let mut x = z.to_vec();
        for _ in 0..4 * m + 8 {
            let next = (0..m)
                .filter(|&i| !skipped[i] && !active.contains(&i))
                .map(|i| (i, self.value(i, &x) - self.cons[i].bound))
                .filter(|&(i, v)| v > tol[i])
                .fold(None, |best: Option<(usize, T)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            let Some((j, _)) = next else {
                break;
            };
            active.push(j);
            y.push(T::zero());
            for _ in 0..4 * m + 8 {
                let q = Matrix::from_rows(
                    &active
                        .iter()
                        .map(|&i| active.iter().map(|&k| self.value(i, &self.cons[k].w)).collect())
                        .collect::<Vec<_>>(),
                );
                let Ok(lu) = Lu::factor(&q) else {
                    // j depends on the others: trade it in for the first
                    // multiplier that reaches zero along the null direction
                    if self.exchange(j, &mut active, &mut y) {
                        continue;
                    }
                    if let Some(k) = active.iter().position(|&i| i == j) {
                        active.remove(k);
                        y.remove(k);
                    }
                    skipped[j] = true;
                    break;
                };
                let sol = lu.solve(&active.iter().map(|&i| r[i]).collect::<Vec<_>>());
                if sol.iter().all(|&v| v > T::zero()) {
                    y = sol;
                    break;
                }
                let alpha = y
                    .iter()
                    .zip(&sol)
                    .filter(|(_, &s)| s <= T::zero())
                    .map(|(&yi, &s)| yi / (yi - s))
                    .fold(T::one(), T::min);
                for (yi, &s) in y.iter_mut().zip(&sol) {
                    *yi = *yi + alpha * (s - *yi);
                }
                let keep: Vec<bool> = y.iter().map(|&v| v > T::zero()).collect();
                if keep.iter().all(|&k| k) {
                    // alpha hit no bound numerically; drop the smallest
                    let k = (0..y.len()).fold(0, |b, k| if y[k] < y[b] { k } else { b });
                    active.remove(k);
                    y.remove(k);
                } else {
                    let mut k = 0;
                    active.retain(|_| {
                        k += 1;
                        keep[k - 1]
                    });
                    y.retain(|&v| v > T::zero());
                }
                if active.is_empty() {
                    break;
                }
            }
            if !active.contains(&j) {
                skipped[j] = true;
            }
            x = z.to_vec();
            for (&i, &yi) in active.iter().zip(&y) {
                for (xr, &wr) in x.iter_mut().zip(&self.cons[i].w) {
                    *xr = *xr - yi * wr;
                }
            }
        }
        x
    }
}

/// Prices, reactive prices and renewable penalties, indexed `[slot][bus]`.
/// Entries that do not apply to a bus are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBundle<T> {
    pub rho: Vec<Vec<T>>,
    pub varrho: Vec<Vec<T>>,
    pub beta: Vec<Vec<T>>,
}

impl<T: Scalar> SignalBundle<T> {
    /// CSV rows `iter,slot,bus,rho,varrho,beta` with absolute slot numbers.
    pub fn csv_rows(&self, iter: usize, t: usize, out: &mut String) {
        use std::fmt::Write as _;
        for (h, rho) in self.rho.iter().enumerate() {
            for (b, &r) in rho.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{iter},{},{b},{:e},{:e},{:e}",
                    t + h,
                    r.as_f64(),
                    self.varrho[h][b].as_f64(),
                    self.beta[h][b].as_f64()
                );
            }
        }
    }
}

pub const SIGNAL_CSV_HEADER: &str = "iter,slot,bus,rho,varrho,beta";

/// Network operator data that stays fixed over a run.
#[derive(Debug, Clone)]
pub struct Dno<T> {
    pub network: NetworkModel<T>,
    pub blocks: AdmittanceBlocks<T>,
    pub sensitivity: SensitivityMatrix<T>,
    pub roles: Vec<BusRole<T>>,
    /// Which of the `2n` balance rows are enforced.
    pub rows: Vec<bool>,
    /// Row weights `Σ_j |K_ij|` of the agent-to-injection map, at least 1.
    pub weights: Vec<T>,
    /// Renewable penalty per bus, `ϑ · Σ_b Λ⁻¹(n+b, j)`.
    pub beta: Vec<T>,
    pub vartheta: T,
    halfspaces: Vec<HalfSpace<T>>,
    kept: Vec<usize>,
    /// Λ restricted to kept rows and free columns.
    a_rf: Sparse<T>,
    /// Λ restricted to kept rows, slack magnitude column.
    a_anchor: Vec<T>,
    /// `(A_RFᵀ W⁻¹ A_RF)⁻¹`
    minv: Matrix<T>,
    euclid: Projector<T>,
    metric: Projector<T>,
}

/// Network variables and multipliers over `H_t`, indexed `[slot][row]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DnoState<T> {
    pub x: Vec<Vec<T>>,
    pub mu: Vec<Vec<T>>,
    pub k: usize,
    pub step: T,
}

impl<T: Scalar> DnoState<T> {
    pub fn theta(&self, h: usize) -> &[T] {
        let n = self.x[h].len() / 2;
        &self.x[h][..n]
    }

    pub fn v(&self, h: usize) -> &[T] {
        let n = self.x[h].len() / 2;
        &self.x[h][n..]
    }

    pub fn lambda(&self, h: usize) -> &[T] {
        let n = self.mu[h].len() / 2;
        &self.mu[h][..n]
    }

    pub fn gamma(&self, h: usize) -> &[T] {
        let n = self.mu[h].len() / 2;
        &self.mu[h][n..]
    }

    /// Drop the first slot (rolling to the next slot, warm start).
    pub fn shift(&mut self) {
        if !self.x.is_empty() {
            self.x.remove(0);
            self.mu.remove(0);
        }
    }
}

/// Agent injections over `H_t`: `p` holds `[p; q]` per slot, `shortfall`
/// the renewable exposure `p_ren - p_min_ren` per bus and slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections<T> {
    pub p: Vec<Vec<T>>,
    pub shortfall: Vec<Vec<T>>,
}

/// Gradient of the partial Lagrangian with respect to `x` and `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub x: Vec<Vec<T>>,
    pub mu: Vec<Vec<T>>,
}

impl<T: Scalar> Dno<T> {
    pub fn new(scenario: &Scenario<T>) -> Result<Self> {
        let net = scenario.network.clone();
        let n = net.n();
        let blocks = assemble_lambda(&net)?;
        let sensitivity = reduced_inverse(&blocks);
        let entities = scenario.entities();
        let mut roles = Vec::with_capacity(n);
        let mut weights = vec![T::one(); 2 * n];
        let mut beta = vec![T::zero(); n];
        let vartheta = scenario.market.vartheta;
        for (b, e) in entities.iter().enumerate() {
            match *e {
                Entity::Aggregator(i) => {
                    let a = &scenario.aggregators[i];
                    let kq = a.reactive_factor();
                    let count = T::of_usize(a.appliances.len());
                    weights[b] = count.max(T::one());
                    weights[n + b] = (kq * count).max(T::one());
                    roles.push(BusRole::Aggregator { reactive_factor: kq });
                }
                Entity::Generator(j) => {
                    let g = &scenario.generators[j];
                    let renewable = g.has_renewable();
                    weights[b] = if renewable { T::two() } else { T::one() };
                    if renewable {
                        beta[b] = vartheta * sensitivity.v_column_sum(b);
                    }
                    roles.push(BusRole::Generator { renewable });
                }
                Entity::None => roles.push(BusRole::Passive),
            }
        }
        let slack = net.slack;
        let slack_has_generator = matches!(entities[slack], Entity::Generator(_));
        let rows: Vec<bool> = (0..2 * n)
            .map(|r| slack_has_generator || (r != slack && r != n + slack))
            .collect();
        let kept: Vec<usize> = (0..2 * n).filter(|&r| rows[r]).collect();
        let a_rf = blocks.lambda.select(&kept, &blocks.free);
        let a_anchor: Vec<T> = kept.iter().map(|&r| blocks.lambda[(r, n + slack)]).collect();
        let mut m = Matrix::zeros(blocks.free.len(), blocks.free.len());
        for (ri, &r) in kept.iter().enumerate() {
            let s = T::one() / weights[r];
            let row = a_rf.row(ri);
            for (i, &ai) in row.iter().enumerate() {
                if ai == T::zero() {
                    continue;
                }
                for (j, &aj) in row.iter().enumerate() {
                    m[(i, j)] = m[(i, j)] + s * ai * aj;
                }
            }
        }
        let minv = Lu::factor(&m)
            .map_err(|s| Error::Singular {
                rows: s.dependent_rows.iter().map(|r| format!("metric row {r}")).collect(),
            })?
            .inverse();

        let mut halfspaces = polygon_halfspaces(&net);
        for (b, bus) in net.buses.iter().enumerate() {
            halfspaces.push(HalfSpace {
                coef: vec![(n + b, T::one())],
                bound: bus.v_max,
            });
            halfspaces.push(HalfSpace {
                coef: vec![(n + b, -T::one())],
                bound: -bus.v_min,
            });
        }
        let anchor = blocks.flat_state();
        let euclid = Projector::new(&halfspaces, &blocks.free, &anchor, None);
        let metric = Projector::new(&halfspaces, &blocks.free, &anchor, Some(&minv));
        Ok(Self {
            network: net,
            blocks,
            sensitivity,
            roles,
            rows,
            weights,
            beta,
            vartheta,
            halfspaces,
            kept,
            a_rf: Sparse::from_dense(&a_rf),
            a_anchor,
            minv,
            euclid,
            metric,
        })
    }

    pub fn n(&self) -> usize {
        self.network.n()
    }

    /// Flat voltages, zero multipliers (the t = 1 initialization).
    pub fn initial_state(&self, slots: usize) -> DnoState<T> {
        DnoState {
            x: vec![self.blocks.flat_state(); slots],
            mu: vec![vec![T::zero(); 2 * self.n()]; slots],
            k: 0,
            step: T::zero(),
        }
    }

    /// Largest violation of the network constraints by one slot's state.
    pub fn infeasibility(&self, x: &[T]) -> T {
        self.halfspaces
            .iter()
            .map(|h| h.eval(x) - h.bound)
            .fold(T::zero(), T::max)
    }

    /// Project one slot's state onto the voltage boxes and polygon limits,
    /// re-imposing the slack anchor.
    pub fn project(&self, x: &[T], metric: Metric) -> Vec<T> {
        let z: Vec<T> = self.blocks.free.iter().map(|&i| x[i]).collect();
        let p = match metric {
            Metric::Euclidean => self.euclid.project(&z),
            Metric::Network => self.metric.project(&z),
        };
        let mut out = self.blocks.flat_state();
        for (&i, &v) in self.blocks.free.iter().zip(&p) {
            out[i] = v;
        }
        out
    }

    /// Worst balance-row mismatch `|P - Λx|` over enforced rows and slots.
    pub fn residual(&self, state: &DnoState<T>, p: &[Vec<T>]) -> T {
        state
            .x
            .iter()
            .zip(p)
            .map(|(x, ph)| {
                let lx = self.blocks.apply(x);
                self.kept.iter().map(|&r| (ph[r] - lx[r]).abs()).fold(T::zero(), T::max)
            })
            .fold(T::zero(), T::max)
    }

    /// DNO risk `Γ = Σ_h Σ_b (v_b - v̂_b)` where `v̂` is the flow solution with
    /// every renewable at its lower bound.
    pub fn risk(&self, inj: &Injections<T>) -> T {
        let n = self.n();
        inj.p
            .iter()
            .zip(&inj.shortfall)
            .map(|(p, s)| {
                let v = &self.blocks.solve_state(p)[n..];
                let v_hat = crate::linpf::worst_case_voltage(&self.blocks, p, s);
                v.iter().zip(&v_hat).map(|(&a, &b)| a - b).sum::<T>()
            })
            .sum()
    }

    /// Partial Lagrangian `L = -ϑΓ + Σ μᵀ(P - Λx)` over the enforced rows,
    /// with its gradient in `x` (slack entries zero) and `μ`.
    pub fn lagrangian_value_and_gradient(&self, state: &DnoState<T>, inj: &Injections<T>) -> Result<(T, Gradient<T>)> {
        let n = self.n();
        let slots = state.x.len();
        if inj.p.len() != slots || inj.p.iter().any(|p| p.len() != 2 * n) || inj.shortfall.len() != slots {
            return Err(Error::Dimension(format!(
                "injections cover {} slots, state covers {slots} slots of {} rows",
                inj.p.len(),
                2 * n
            )));
        }
        let mut value = -self.vartheta * self.risk(inj);
        let mut gx = Vec::with_capacity(slots);
        let mut gmu = Vec::with_capacity(slots);
        for h in 0..slots {
            let lx = self.blocks.apply(&state.x[h]);
            let mut res = vec![T::zero(); 2 * n];
            let mut weighted = vec![T::zero(); 2 * n];
            for &r in &self.kept {
                res[r] = inj.p[h][r] - lx[r];
                weighted[r] = state.mu[h][r];
            }
            value = value + dot(&state.mu[h], &res);
            let mut g = self.blocks.apply_transpose(&weighted);
            for gi in &mut g {
                *gi = -*gi;
            }
            g[self.network.slack] = T::zero();
            g[n + self.network.slack] = T::zero();
            gx.push(g);
            gmu.push(res);
        }
        Ok((value, Gradient { x: gx, mu: gmu }))
    }

    /// Projected saddle step: ascent in `x` followed by projection, descent in
    /// `μ` along the balance residual.
    pub fn update_phi(&self, state: &DnoState<T>, grad: &Gradient<T>, step: T, metric: Metric) -> DnoState<T> {
        let x = state
            .x
            .iter()
            .zip(&grad.x)
            .map(|(x, g)| {
                let moved: Vec<T> = x.iter().zip(g).map(|(&a, &b)| a + step * b).collect();
                self.project(&moved, metric)
            })
            .collect();
        let mu = state
            .mu
            .iter()
            .zip(&grad.mu)
            .map(|(m, g)| m.iter().zip(g).map(|(&a, &b)| a - step * b).collect())
            .collect();
        DnoState {
            x,
            mu,
            k: state.k + 1,
            step,
        }
    }

    /// Preconditioned primal-dual step against the extrapolated injections
    /// `p_bar`: exact network maximization in the `ΛᵀSΛ` metric, then the
    /// multiplier update `μ ← μ - S(p̄ - Λx)` with `S = step · W⁻¹`.
    pub fn network_step(&self, state: &DnoState<T>, p_bar: &[Vec<T>], step: T) -> DnoState<T> {
        let n = self.n();
        let per_slot: Vec<(Vec<T>, Vec<T>)> = (0..state.x.len())
            .into_par_iter()
            .map(|h| {
                let mu = &state.mu[h];
                let target: Vec<T> = self
                    .kept
                    .iter()
                    .zip(&self.a_anchor)
                    .map(|(&r, &anc)| (p_bar[h][r] - mu[r] * self.weights[r] / step - anc) / self.weights[r])
                    .collect();
                let rhs = self.a_rf.tr_mul_vec(&target);
                let z = self.minv.mul_vec(&rhs);
                let xf = self.metric.project(&z);
                let mut x = self.blocks.flat_state();
                for (&i, &v) in self.blocks.free.iter().zip(&xf) {
                    x[i] = v;
                }
                let lx = self.blocks.apply(&x);
                let mut mu_new = vec![T::zero(); 2 * n];
                for &r in &self.kept {
                    mu_new[r] = mu[r] - step / self.weights[r] * (p_bar[h][r] - lx[r]);
                }
                (x, mu_new)
            })
            .collect();
        let (x, mu) = per_slot.into_iter().unzip();
        DnoState {
            x,
            mu,
            k: state.k + 1,
            step,
        }
    }

    /// Price signals from the current multipliers.
    pub fn signals(&self, state: &DnoState<T>) -> SignalBundle<T> {
        let n = self.n();
        let slots = state.mu.len();
        let mut rho = vec![vec![T::zero(); n]; slots];
        let mut varrho = vec![vec![T::zero(); n]; slots];
        let mut beta = vec![vec![T::zero(); n]; slots];
        for h in 0..slots {
            let (lam, gam) = (state.lambda(h), state.gamma(h));
            for (b, role) in self.roles.iter().enumerate() {
                match *role {
                    BusRole::Aggregator { reactive_factor } => rho[h][b] = lam[b] + gam[b] * reactive_factor,
                    BusRole::Generator { renewable } => {
                        rho[h][b] = lam[b];
                        varrho[h][b] = gam[b];
                        if renewable {
                            beta[h][b] = self.beta[b];
                        }
                    }
                    BusRole::Passive => rho[h][b] = lam[b],
                }
            }
        }
        SignalBundle { rho, varrho, beta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_scenario;
    use crate::grid::tests::TWO_BUS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_bus_dno(s_max: f64) -> Dno<f64> {
        let text = TWO_BUS.replace(r#""r": 0.0, "x": 0.1, "s_max": 2.0"#, &format!(r#""r": 0.02, "x": 0.1, "s_max": {s_max}"#));
        Dno::new(&parse_scenario(&text, "two").unwrap()).unwrap()
    }

    fn random_state(d: &Dno<f64>, slots: usize, rng: &mut ChaCha8Rng) -> (DnoState<f64>, Injections<f64>) {
        let n = d.n();
        let mut st = d.initial_state(slots);
        for h in 0..slots {
            for i in d.blocks.free.clone() {
                st.x[h][i] += rng.gen_range(-0.05..0.05);
            }
            for r in 0..2 * n {
                if d.rows[r] {
                    st.mu[h][r] = rng.gen_range(-5.0..5.0);
                }
            }
        }
        let p = (0..slots).map(|_| (0..2 * n).map(|_| rng.gen_range(-0.3..0.3)).collect()).collect();
        let shortfall = vec![vec![0.0; n]; slots];
        (st, Injections { p, shortfall })
    }

    #[test]
    fn flat_zero_multipliers_leave_only_risk() {
        let d = two_bus_dno(2.0);
        let st = d.initial_state(2);
        let inj = Injections {
            p: vec![vec![0.0, -0.1, 0.0, -0.05]; 2],
            shortfall: vec![vec![0.0; 2]; 2],
        };
        let (value, _) = d.lagrangian_value_and_gradient(&st, &inj).unwrap();
        assert_eq!(value, -d.vartheta * d.risk(&inj));
    }

    #[test]
    fn balanced_injections_have_zero_multiplier_gradient() {
        let d = two_bus_dno(2.0);
        let mut st = d.initial_state(1);
        st.x[0] = d.blocks.solve_state(&[0.0, -0.1, 0.0, -0.05]);
        let p = d.blocks.apply(&st.x[0]);
        let inj = Injections {
            p: vec![p],
            shortfall: vec![vec![0.0; 2]],
        };
        let (_, g) = d.lagrangian_value_and_gradient(&st, &inj).unwrap();
        assert!(g.mu[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = two_bus_dno(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (st, inj) = random_state(&d, 2, &mut rng);
        let (_, g) = d.lagrangian_value_and_gradient(&st, &inj).unwrap();
        let h = 1e-6;
        for s in 0..2 {
            for i in d.blocks.free.clone() {
                let mut up = st.clone();
                let mut dn = st.clone();
                up.x[s][i] += h;
                dn.x[s][i] -= h;
                let fd = (d.lagrangian_value_and_gradient(&up, &inj).unwrap().0
                    - d.lagrangian_value_and_gradient(&dn, &inj).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g.x[s][i]).abs() <= 1e-6 * g.x[s][i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let d = two_bus_dno(2.0);
        let st = d.initial_state(2);
        let zero = Gradient {
            x: vec![vec![0.0; 4]; 2],
            mu: vec![vec![0.0; 4]; 2],
        };
        let next = d.update_phi(&st, &zero, 0.5, Metric::Euclidean);
        assert_eq!(next.x, st.x);
        assert_eq!(next.mu, st.mu);
    }

    #[test]
    fn voltage_step_is_clipped() {
        let d = two_bus_dno(100.0);
        let st = d.initial_state(1);
        let mut g = Gradient {
            x: vec![vec![0.0; 4]],
            mu: vec![vec![0.0; 4]],
        };
        g.x[0][3] = 1.0;
        let next = d.update_phi(&st, &g, 1.0, Metric::Euclidean);
        assert!((next.x[0][3] - 1.05).abs() < 1e-12);
        g.x[0][3] = -1.0;
        let next = d.update_phi(&st, &g, 1.0, Metric::Euclidean);
        assert!((next.x[0][3] - 0.95).abs() < 1e-12);
    }

    /// Euclidean projection onto `{a_i·z <= b_i}` in two dimensions by
    /// enumerating active sets of size 0, 1 and 2.
    fn active_set_oracle(z: [f64; 2], cons: &[([f64; 2], f64)]) -> [f64; 2] {
        let feasible = |p: [f64; 2]| cons.iter().all(|(a, b)| a[0] * p[0] + a[1] * p[1] <= b + 1e-9);
        let dist = |p: [f64; 2]| (p[0] - z[0]).powi(2) + (p[1] - z[1]).powi(2);
        let mut best = None::<[f64; 2]>;
        let mut consider = |p: [f64; 2]| {
            if feasible(p) && best.is_none_or(|q| dist(p) < dist(q)) {
                best = Some(p);
            }
        };
        consider(z);
        for (a, b) in cons {
            let t = (a[0] * z[0] + a[1] * z[1] - b) / (a[0] * a[0] + a[1] * a[1]);
            consider([z[0] - t * a[0], z[1] - t * a[1]]);
        }
        for (i, (a1, b1)) in cons.iter().enumerate() {
            for (a2, b2) in &cons[i + 1..] {
                let det = a1[0] * a2[1] - a1[1] * a2[0];
                if det.abs() > 1e-12 {
                    consider([(b1 * a2[1] - b2 * a1[1]) / det, (a1[0] * b2 - a2[0] * b1) / det]);
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn polygon_projection_matches_qp_oracle() {
        let d = two_bus_dno(0.2);
        let n = 2;
        let cons: Vec<([f64; 2], f64)> = d
            .halfspaces
            .iter()
            .map(|h| {
                let a = h.dense(2 * n);
                let b = h.bound - a[0] * 0.0 - a[2] * 1.0;
                ([a[1], a[3]], b)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let z = [rng.gen_range(-0.1..0.1), rng.gen_range(0.9..1.1)];
            let p = d.project(&[0.0, z[0], 1.0, z[1]], Metric::Euclidean);
            let want = active_set_oracle(z, &cons);
            assert!((p[1] - want[0]).abs() < 1e-8 && (p[3] - want[1]).abs() < 1e-8, "{z:?} {p:?} {want:?}");
            assert!(d.infeasibility(&p) < 1e-9);
            let again = d.project(&p, Metric::Euclidean);
            assert!((again[1] - p[1]).abs() < 1e-12 && (again[3] - p[3]).abs() < 1e-12);
        }
    }

    #[test]
    fn signal_identities() {
        let d = two_bus_dno(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (st, _) = random_state(&d, 3, &mut rng);
        let s = d.signals(&st);
        let BusRole::Aggregator { reactive_factor } = d.roles[1] else {
            panic!("bus 1 is an aggregator")
        };
        for h in 0..3 {
            assert_eq!(s.rho[h][1], st.lambda(h)[1] + st.gamma(h)[1] * reactive_factor);
        }
    }
}

//! Linearized AC power flow `[p; q] = Λ [θ; v]`, branch flows and the
//! polygonal apparent-power limits.
//!
//! Vectors over the network state are laid out as `[θ_0..θ_{n-1}, v_0..v_{n-1}]`
//! and injections as `[p_0..p_{n-1}, q_0..q_{n-1}]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{Branch, NetworkModel};
use crate::linalg::{Lu, Matrix, Sparse};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AdmittanceBlocks<T> {
    pub n: usize,
    pub slack: usize,
    pub b: Matrix<T>,
    pub b_prime: Matrix<T>,
    pub g: Matrix<T>,
    pub g_prime: Matrix<T>,
    pub lambda: Matrix<T>,
    /// State indices other than the slack angle and magnitude.
    pub free: Vec<usize>,
    reduced: Lu<T>,
    sparse: Sparse<T>,
}

fn state_label(n: usize, i: usize) -> String {
    if i < n {
        format!("theta_{i}")
    } else {
        format!("v_{}", i - n)
    }
}

/// Build the admittance blocks and `Λ`, and factor the slack-reduced `Λ`.
pub fn assemble_lambda<T: Scalar>(net: &NetworkModel<T>) -> Result<AdmittanceBlocks<T>> {
    let n = net.n();
    let mut g: Matrix<T> = Matrix::zeros(n, n);
    let mut b: Matrix<T> = Matrix::zeros(n, n);
    for br in &net.branches {
        let (r, x) = net.impedance(br);
        let z2 = r * r + x * x;
        let (gs, bs) = (r / z2, -x / z2);
        let (f, t) = (br.from, br.to);
        g[(f, f)] = g[(f, f)] + gs;
        g[(t, t)] = g[(t, t)] + gs;
        g[(f, t)] = g[(f, t)] - gs;
        g[(t, f)] = g[(t, f)] - gs;
        b[(f, f)] = b[(f, f)] + bs;
        b[(t, t)] = b[(t, t)] + bs;
        b[(f, t)] = b[(f, t)] - bs;
        b[(t, f)] = b[(t, f)] - bs;
    }
    let mut g_prime = g.clone();
    let mut b_prime = b.clone();
    for (r, bus) in net.buses.iter().enumerate() {
        g[(r, r)] = g[(r, r)] + bus.g_shunt;
        b[(r, r)] = b[(r, r)] + bus.b_shunt;
        // primed diagonals exclude the shunt: B'_rr = B_rr - b_rr
        g_prime[(r, r)] = g[(r, r)] - bus.g_shunt;
        b_prime[(r, r)] = b[(r, r)] - bus.b_shunt;
    }
    let mut lambda = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            lambda[(i, j)] = -b_prime[(i, j)];
            lambda[(i, n + j)] = g_prime[(i, j)];
            lambda[(n + i, j)] = -g_prime[(i, j)];
            lambda[(n + i, n + j)] = -b[(i, j)];
        }
    }
    let slack = net.slack;
    let free: Vec<usize> = (0..2 * n).filter(|&i| i != slack && i != n + slack).collect();
    let reduced = Lu::factor(&lambda.select(&free, &free)).map_err(|s| Error::Singular {
        rows: s.dependent_rows.iter().map(|&k| state_label(n, free[k])).collect(),
    })?;
    Ok(AdmittanceBlocks {
        n,
        slack,
        b,
        b_prime,
        g,
        g_prime,
        sparse: Sparse::from_dense(&lambda),
        lambda,
        free,
        reduced,
    })
}

impl<T: Scalar> AdmittanceBlocks<T> {
    /// Factorization of `Λ` with the slack rows and columns removed.
    pub fn reduced_lu(&self) -> &Lu<T> {
        &self.reduced
    }

    /// `Λ [θ; v]`
    pub fn apply(&self, state: &[T]) -> Vec<T> {
        self.sparse.mul_vec(state)
    }

    /// `Λᵀ y`
    pub fn apply_transpose(&self, y: &[T]) -> Vec<T> {
        self.sparse.tr_mul_vec(y)
    }

    /// Flat state: θ = 0, v = 1.
    pub fn flat_state(&self) -> Vec<T> {
        let mut x = vec![T::zero(); 2 * self.n];
        for v in &mut x[self.n..] {
            *v = T::one();
        }
        x
    }

    /// State solving the non-slack rows of `Λ x = injection`, with the slack
    /// anchored at θ = 0, v = 1.
    pub fn solve_state(&self, injection: &[T]) -> Vec<T> {
        assert_eq!(injection.len(), 2 * self.n, "injection vector has wrong length");
        let n = self.n;
        let anchor_col = n + self.slack;
        let rhs: Vec<T> = self
            .free
            .iter()
            .map(|&i| injection[i] - self.lambda[(i, anchor_col)])
            .collect();
        let sol = self.reduced.solve(&rhs);
        let mut x = vec![T::zero(); 2 * n];
        x[anchor_col] = T::one();
        for (&i, &s) in self.free.iter().zip(&sol) {
            x[i] = s;
        }
        x
    }

    /// Dense CSV of `Λ`: one header row of state labels, one row per
    /// injection label.
    pub fn lambda_csv(&self) -> String {
        let n = self.n;
        let mut out = String::from("row");
        for j in 0..2 * n {
            let _ = write!(out, ",{}", state_label(n, j));
        }
        out.push('\n');
        for i in 0..2 * n {
            let label = if i < n { format!("p_{i}") } else { format!("q_{}", i - n) };
            out.push_str(&label);
            for j in 0..2 * n {
                let _ = write!(out, ",{:e}", self.lambda[(i, j)].as_f64());
            }
            out.push('\n');
        }
        out
    }
}

/// `Λ⁻¹` of the slack-reduced system, re-embedded in the full index space with
/// zero slack rows and columns.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix<T> {
    pub n: usize,
    pub matrix: Matrix<T>,
}

impl<T: Scalar> SensitivityMatrix<T> {
    /// `d v_b / d p_j`
    pub fn dv_dp(&self, b: usize, j: usize) -> T {
        self.matrix[(self.n + b, j)]
    }

    /// `Σ_b Λ⁻¹(n + b, j)`: total voltage response to active injection at `j`.
    pub fn v_column_sum(&self, j: usize) -> T {
        (0..self.n).map(|b| self.matrix[(self.n + b, j)]).sum()
    }
}

pub fn reduced_inverse<T: Scalar>(blocks: &AdmittanceBlocks<T>) -> SensitivityMatrix<T> {
    let inv = blocks.reduced.inverse();
    let mut m = Matrix::zeros(2 * blocks.n, 2 * blocks.n);
    for (a, &i) in blocks.free.iter().enumerate() {
        for (b, &j) in blocks.free.iter().enumerate() {
            m[(i, j)] = inv[(a, b)];
        }
    }
    SensitivityMatrix { n: blocks.n, matrix: m }
}

/// Bus angles and magnitudes, indexed `[slot][bus]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState<T> {
    pub theta: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> FlowState<T> {
    pub fn slots(&self) -> usize {
        self.theta.len()
    }

    /// Stacked `[θ; v]` of one slot.
    pub fn state(&self, slot: usize) -> Vec<T> {
        let mut x = self.theta[slot].clone();
        x.extend_from_slice(&self.v[slot]);
        x
    }

    pub fn from_states(states: &[Vec<T>], n: usize) -> Self {
        Self {
            theta: states.iter().map(|x| x[..n].to_vec()).collect(),
            v: states.iter().map(|x| x[n..].to_vec()).collect(),
        }
    }
}

/// Solve the flow for a sequence of per-slot injection vectors `[p; q]`.
pub fn solve_flow<T: Scalar>(blocks: &AdmittanceBlocks<T>, injections: &[Vec<T>]) -> Result<FlowState<T>> {
    let mut states = Vec::with_capacity(injections.len());
    for inj in injections {
        if inj.len() != 2 * blocks.n {
            return Err(Error::Dimension(format!(
                "injection has {} entries, network needs {}",
                inj.len(),
                2 * blocks.n
            )));
        }
        states.push(blocks.solve_state(inj));
    }
    Ok(FlowState::from_states(&states, blocks.n))
}

/// Active and reactive flow on a line from its endpoint angle and magnitude
/// differences `Δθ = θ_r - θ_s`, `Δv = v_r - v_s`.
pub fn line_flow<T: Scalar>(r: T, x: T, d_theta: T, d_v: T) -> (T, T) {
    let z2 = r * r + x * x;
    ((r * d_v + x * d_theta) / z2, (x * d_v - r * d_theta) / z2)
}

pub fn branch_flow<T: Scalar>(net: &NetworkModel<T>, state: &FlowState<T>, branch: &Branch<T>, slot: usize) -> (T, T) {
    let (r, x) = net.impedance(branch);
    let th = &state.theta[slot];
    let v = &state.v[slot];
    line_flow(r, x, th[branch.from] - th[branch.to], v[branch.from] - v[branch.to])
}

/// Polygon sides `m` whose half-plane `p cos(mα) + q sin(mα) <= s_max` is
/// violated, with the violation amount.
pub fn polygon_violations<T: Scalar>(p: T, q: T, branch: &Branch<T>) -> Vec<(usize, T)> {
    (0..branch.sides())
        .filter_map(|m| {
            let ang = branch.polygon_angle * T::of_usize(m);
            let excess = p * ang.cos() + q * ang.sin() - branch.s_max;
            (excess > T::zero()).then_some((m, excess))
        })
        .collect()
}

/// A linear inequality `a · [θ; v] <= bound` on one slot's state.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace<T> {
    /// Sparse coefficients `(state index, value)`.
    pub coef: Vec<(usize, T)>,
    pub bound: T,
}

impl<T: Scalar> HalfSpace<T> {
    pub fn eval(&self, x: &[T]) -> T {
        self.coef.iter().map(|&(i, a)| a * x[i]).sum()
    }

    pub fn dense(&self, len: usize) -> Vec<T> {
        let mut a = vec![T::zero(); len];
        for &(i, c) in &self.coef {
            a[i] = a[i] + c;
        }
        a
    }
}

/// Every polygon half-plane of every branch as a constraint on the state.
pub fn polygon_halfspaces<T: Scalar>(net: &NetworkModel<T>) -> Vec<HalfSpace<T>> {
    let n = net.n();
    let mut out = Vec::new();
    for br in &net.branches {
        let (r, x) = net.impedance(br);
        let z2 = r * r + x * x;
        // p = (r Δv + x Δθ)/z², q = (x Δv - r Δθ)/z²
        let (p_th, p_v) = (x / z2, r / z2);
        let (q_th, q_v) = (-r / z2, x / z2);
        for m in 0..br.sides() {
            let ang = br.polygon_angle * T::of_usize(m);
            let (c, s) = (ang.cos(), ang.sin());
            let a_th = c * p_th + s * q_th;
            let a_v = c * p_v + s * q_v;
            out.push(HalfSpace {
                coef: vec![(br.from, a_th), (br.to, -a_th), (n + br.from, a_v), (n + br.to, -a_v)],
                bound: br.s_max,
            });
        }
    }
    out
}

/// Voltage magnitudes when every renewable output drops by `shortfall`
/// (per bus, active power) from the scheduled `injection`.
pub fn worst_case_voltage<T: Scalar>(blocks: &AdmittanceBlocks<T>, injection: &[T], shortfall: &[T]) -> Vec<T> {
    let mut inj = injection.to_vec();
    for (p, &d) in inj.iter_mut().zip(shortfall) {
        *p = *p - d;
    }
    blocks.solve_state(&inj)[blocks.n..].to_vec()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind};
    use std::f64::consts::PI;

    pub fn two_bus(r: f64, x: f64, b_shunt: f64) -> NetworkModel<f64> {
        let bus = |id, kind| Bus {
            id,
            kind,
            g_shunt: 0.0,
            b_shunt: if id == 1 { b_shunt } else { 0.0 },
            v_min: 0.9,
            v_max: 1.1,
        };
        NetworkModel {
            slack: 0,
            split_reactance: 1e-6,
            buses: vec![bus(0, BusKind::Slack), bus(1, BusKind::Aggregator)],
            branches: vec![Branch {
                from: 0,
                to: 1,
                r,
                x,
                s_max: 1.0,
                polygon_angle: PI / 6.0,
            }],
        }
    }

    #[test]
    fn two_bus_lambda_by_hand() {
        let blocks = assemble_lambda(&two_bus(0.0, 0.1, 0.0)).unwrap();
        // y = 1/(j0.1) = -j10: B_11 = B_22 = -10, B_12 = B_21 = +10, G = 0
        let want = [
            [10.0, -10.0, 0.0, 0.0],
            [-10.0, 10.0, 0.0, 0.0],
            [0.0, 0.0, 10.0, -10.0],
            [0.0, 0.0, -10.0, 10.0],
        ];
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                assert!((blocks.lambda[(i, j)] - w).abs() < 1e-12, "entry ({i},{j})");
            }
        }
        assert_eq!(blocks.b, blocks.b_prime);
        assert_eq!(blocks.g, blocks.g_prime);
    }

    #[test]
    fn shunt_offsets_diagonal_only() {
        let blocks = assemble_lambda(&two_bus(0.01, 0.1, 0.05)).unwrap();
        assert!((blocks.b[(1, 1)] - blocks.b_prime[(1, 1)] - 0.05).abs() < 1e-15);
        assert_eq!(blocks.b[(0, 1)], blocks.b_prime[(0, 1)]);
        assert_eq!(blocks.b[(0, 0)], blocks.b_prime[(0, 0)]);
        assert!(blocks.b.is_symmetric(0.0) && blocks.g.is_symmetric(0.0));
    }

    #[test]
    fn reduced_inverse_two_bus() {
        let (r, x) = (0.02, 0.1);
        let blocks = assemble_lambda(&two_bus(r, x, 0.0)).unwrap();
        let sens = reduced_inverse(&blocks);
        // reduced Λ = [[x/z², r/z²], [-r/z², x/z²]], inverse [[x, -r], [r, x]]
        assert!((sens.matrix[(1, 1)] - x).abs() < 1e-12);
        assert!((sens.matrix[(1, 3)] + r).abs() < 1e-12);
        assert!((sens.matrix[(3, 1)] - r).abs() < 1e-12);
        assert!((sens.matrix[(3, 3)] - x).abs() < 1e-12);
        for k in 0..4 {
            assert_eq!(sens.matrix[(0, k)], 0.0);
            assert_eq!(sens.matrix[(k, 2)], 0.0);
        }
        assert!(sens.dv_dp(1, 1) > 0.0);
        let base = blocks.solve_state(&[0.0, -0.1, 0.0, 0.0]);
        let bumped = blocks.solve_state(&[0.0, -0.1 + 1e-6, 0.0, 0.0]);
        assert!(((bumped[3] - base[3]) / 1e-6 - sens.dv_dp(1, 1)).abs() < 1e-6);
    }

    #[test]
    fn full_lambda_is_singular() {
        let blocks = assemble_lambda(&two_bus(0.0, 0.1, 0.0)).unwrap();
        assert!(Lu::factor(&blocks.lambda).is_err());
    }

    #[test]
    fn two_bus_load_solution() {
        let blocks = assemble_lambda(&two_bus(0.0, 0.1, 0.0)).unwrap();
        let f = solve_flow(&blocks, &[vec![0.0, -0.1, 0.0, 0.0]]).unwrap();
        // 10 θ_2 = -0.1 and 10 v_2 - 10 = 0
        assert!((f.theta[0][1] + 0.01).abs() < 1e-12);
        assert!((f.v[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(f.theta[0][0], 0.0);
        assert_eq!(f.v[0][0], 1.0);
    }

    #[test]
    fn flat_start_exact() {
        let blocks = assemble_lambda(&two_bus(0.03, 0.1, 0.0)).unwrap();
        let f = solve_flow(&blocks, &[vec![0.0; 4]]).unwrap();
        assert!(f.theta[0].iter().all(|t| t.abs() < 1e-15));
        assert!(f.v[0].iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn branch_flow_examples() {
        assert_eq!(line_flow(0.0, 0.1, 0.0, 0.0), (0.0, 0.0));
        let (p, q) = line_flow::<f64>(0.0, 0.1, 0.01, 0.0);
        assert!((p - 0.1).abs() < 1e-12 && q == 0.0);
        let (p2, q2) = line_flow(0.0, 0.1, -0.01, 0.0);
        assert_eq!((p2, q2), (-p, -q));
    }

    #[test]
    fn polygon_examples() {
        let mut br = two_bus(0.0, 0.1, 0.0).branches[0].clone();
        assert!(polygon_violations(0.0, 0.0, &br).is_empty());
        br.polygon_angle = PI / 2.0;
        assert!(polygon_violations(1.0, 0.0, &br).is_empty());
        br.polygon_angle = PI / 6.0;
        let (rad, ang) = (1.05, PI / 12.0);
        assert!(!polygon_violations(rad * ang.cos(), rad * ang.sin(), &br).is_empty());
    }

    #[test]
    fn worst_case_lowers_voltage() {
        let blocks = assemble_lambda(&two_bus(0.02, 0.1, 0.0)).unwrap();
        let inj = [0.0, 0.1, 0.0, 0.0];
        let v = blocks.solve_state(&inj)[2..].to_vec();
        let same = worst_case_voltage(&blocks, &inj, &[0.0, 0.0]);
        assert_eq!(v, same);
        let low = worst_case_voltage(&blocks, &inj, &[0.0, 0.1]);
        assert!(low[1] < v[1]);
    }

    #[test]
    fn polygon_halfspace_matches_flow() {
        let net = two_bus(0.02, 0.1, 0.0);
        let hs = polygon_halfspaces(&net);
        assert_eq!(hs.len(), 12);
        let x = [0.0, -0.03, 1.0, 0.98];
        let (p, q) = line_flow(0.02, 0.1, 0.03, 0.02);
        for (m, h) in hs.iter().enumerate() {
            let ang = PI / 6.0 * m as f64;
            assert!((h.eval(&x) - (p * ang.cos() + q * ang.sin())).abs() < 1e-12);
        }
    }
}

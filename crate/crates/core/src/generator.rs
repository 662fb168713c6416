//! Generator agent: quadratic conventional cost, renewable offers under a
//! budget uncertainty set, and the closed-form best response to prices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-slot renewable offer bounds, indexed by slot - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Renewable<T> {
    pub p_min: Vec<T>,
    pub p_max: Vec<T>,
    /// Realized output, used by the complete-information mode. Defaults to
    /// `p_max` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GeneratorAsset<T> {
    pub id: String,
    pub bus: usize,
    pub a2: T,
    pub a1: T,
    #[serde(default)]
    pub a0: T,
    pub p_min: T,
    pub p_max: T,
    pub q_min: T,
    pub q_max: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renewable: Option<Renewable<T>>,
}

impl<T: Scalar> GeneratorAsset<T> {
    pub fn has_renewable(&self) -> bool {
        self.renewable.is_some()
    }

    pub fn ren_min(&self, slot: usize) -> T {
        self.renewable.as_ref().map_or(T::zero(), |r| r.p_min[slot - 1])
    }

    pub fn ren_max(&self, slot: usize) -> T {
        self.renewable.as_ref().map_or(T::zero(), |r| r.p_max[slot - 1])
    }

    pub fn ren_actual(&self, slot: usize) -> T {
        self.renewable.as_ref().map_or(T::zero(), |r| {
            r.actual.as_ref().map_or(r.p_max[slot - 1], |a| a[slot - 1])
        })
    }

    /// `C_j(p) = a2 p² + a1 p + a0`
    pub fn cost(&self, p: T) -> T {
        self.a2 * p * p + self.a1 * p + self.a0
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::Validation(format!("generator {}: {msg}", self.id)));
        if self.a2 < T::zero() {
            return bad("a2 must be nonnegative");
        }
        if self.p_min > self.p_max || self.q_min > self.q_max {
            return bad("conventional limits out of order");
        }
        if let Some(r) = &self.renewable {
            if r.p_min.len() != horizon || r.p_max.len() != horizon {
                return bad("renewable bounds need one entry per slot");
            }
            if r.p_min.iter().zip(&r.p_max).any(|(&lo, &hi)| lo < T::zero() || lo > hi) {
                return bad("renewable bounds need 0 <= p_min <= p_max");
            }
            if let Some(a) = &r.actual {
                if a.len() != horizon || a.iter().zip(&r.p_min).zip(&r.p_max).any(|((&v, &lo), &hi)| v < lo || v > hi) {
                    return bad("renewable actual output must lie within its bounds");
                }
            }
        }
        Ok(())
    }

    /// The asset seen with exact renewable information: bounds collapse to
    /// the realized output.
    pub fn with_exact_renewable(&self) -> Self {
        let mut g = self.clone();
        if let Some(r) = &mut g.renewable {
            let actual = r.actual.clone().unwrap_or_else(|| r.p_max.clone());
            r.p_min = actual.clone();
            r.p_max = actual;
        }
        g
    }
}

/// Decision over `H_t`; entry `k` belongs to slot `t + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorDecision<T> {
    pub p_conv: Vec<T>,
    pub q_conv: Vec<T>,
    pub p_ren: Vec<T>,
    /// Attained value of the budget sum.
    pub delta: T,
}

impl<T: Scalar> GeneratorDecision<T> {
    pub fn active(&self) -> Vec<T> {
        self.p_conv.iter().zip(&self.p_ren).map(|(&a, &b)| a + b).collect()
    }
}

/// Per-slot signals seen by one generator over `H_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSignals<T> {
    pub rho: Vec<T>,
    pub varrho: Vec<T>,
    pub beta: Vec<T>,
}

/// Budget sum `Σ_h (p_max - p_ren)/(p_max - p_min)`; degenerate slots count 0.
pub fn attained_budget<T: Scalar>(asset: &GeneratorAsset<T>, p_ren: &[T], t: usize) -> T {
    p_ren
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let (lo, hi) = (asset.ren_min(t + k), asset.ren_max(t + k));
            if hi > lo {
                (hi - p) / (hi - lo)
            } else {
                T::zero()
            }
        })
        .sum()
}

pub fn shortage_cost<T: Scalar>(asset: &GeneratorAsset<T>, decision: &GeneratorDecision<T>, beta: &[T], t: usize) -> T {
    decision
        .p_ren
        .iter()
        .zip(beta)
        .enumerate()
        .map(|(k, (&p, &b))| b * (p - asset.ren_min(t + k)))
        .sum()
}

pub fn profit<T: Scalar>(asset: &GeneratorAsset<T>, decision: &GeneratorDecision<T>, signals: &GeneratorSignals<T>, t: usize) -> T {
    let revenue: T = (0..decision.p_conv.len())
        .map(|k| {
            (decision.p_conv[k] + decision.p_ren[k]) * signals.rho[k] + decision.q_conv[k] * signals.varrho[k]
                - asset.cost(decision.p_conv[k])
        })
        .sum();
    revenue - shortage_cost(asset, decision, &signals.beta, t)
}

/// Previous decision and step length of a proximal best response.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a, T> {
    pub anchor: &'a GeneratorDecision<T>,
    pub tau: T,
}

/// Best response over `H_t` to the signals. With `prox`, each block also pays
/// `‖y - anchor‖² / (2 tau)`, which turns bang-bang responses into clipped
/// gradient steps.
pub fn local_solve<T: Scalar>(
    asset: &GeneratorAsset<T>,
    signals: &GeneratorSignals<T>,
    t: usize,
    prox: Option<Proximal<'_, T>>,
) -> GeneratorDecision<T> {
    let len = signals.rho.len();
    let mut p_conv = Vec::with_capacity(len);
    let mut q_conv = Vec::with_capacity(len);
    let mut p_ren = Vec::with_capacity(len);
    for k in 0..len {
        let (rho, varrho, beta) = (signals.rho[k], signals.varrho[k], signals.beta[k]);
        let (rlo, rhi) = (asset.ren_min(t + k), asset.ren_max(t + k));
        match prox {
            None => {
                let p = if asset.a2 > T::zero() {
                    (rho - asset.a1) / (T::two() * asset.a2)
                } else if rho > asset.a1 {
                    asset.p_max
                } else {
                    asset.p_min
                };
                p_conv.push(p.clamp_to(asset.p_min, asset.p_max));
                q_conv.push(if varrho > T::zero() { asset.q_max } else { asset.q_min });
                p_ren.push(if rho > beta { rhi } else { rlo });
            }
            Some(Proximal { anchor, tau }) => {
                let inv = T::one() / tau;
                let p = (rho - asset.a1 + anchor.p_conv[k] * inv) / (T::two() * asset.a2 + inv);
                p_conv.push(p.clamp_to(asset.p_min, asset.p_max));
                q_conv.push((anchor.q_conv[k] + tau * varrho).clamp_to(asset.q_min, asset.q_max));
                p_ren.push((anchor.p_ren[k] + tau * (rho - beta)).clamp_to(rlo, rhi));
            }
        }
    }
    let delta = attained_budget(asset, &p_ren, t);
    GeneratorDecision {
        p_conv,
        q_conv,
        p_ren,
        delta,
    }
}

/// Check every constraint of the generator problem, with a budget `delta`.
pub fn is_feasible<T: Scalar>(asset: &GeneratorAsset<T>, d: &GeneratorDecision<T>, delta: T, t: usize) -> bool {
    let boxes = (0..d.p_conv.len()).all(|k| {
        d.p_conv[k] >= asset.p_min
            && d.p_conv[k] <= asset.p_max
            && d.q_conv[k] >= asset.q_min
            && d.q_conv[k] <= asset.q_max
            && d.p_ren[k] >= asset.ren_min(t + k)
            && d.p_ren[k] <= asset.ren_max(t + k)
    });
    boxes && attained_budget(asset, &d.p_ren, t) <= delta + T::lit(1e-12)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn asset(horizon: usize) -> GeneratorAsset<f64> {
        GeneratorAsset {
            id: "g".into(),
            bus: 1,
            a2: 1.0,
            a1: 2.0,
            a0: 0.0,
            p_min: 0.0,
            p_max: 5.0,
            q_min: -1.0,
            q_max: 1.0,
            renewable: Some(Renewable {
                p_min: vec![0.2; horizon],
                p_max: vec![0.8; horizon],
                actual: None,
            }),
        }
    }

    fn decision(p_conv: f64, q: f64, p_ren: f64) -> GeneratorDecision<f64> {
        GeneratorDecision {
            p_conv: vec![p_conv],
            q_conv: vec![q],
            p_ren: vec![p_ren],
            delta: 0.0,
        }
    }

    #[test]
    fn shortage_cost_examples() {
        let g = asset(1);
        assert_eq!(shortage_cost(&g, &decision(0.0, 0.0, 0.2), &[3.0], 1), 0.0);
        assert_eq!(shortage_cost(&g, &decision(0.0, 0.0, 0.7), &[0.0], 1), 0.0);
        assert!((shortage_cost(&g, &decision(0.0, 0.0, 0.5), &[2.0], 1) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn profit_examples() {
        let mut g = asset(1);
        g.renewable = None;
        let zero = GeneratorSignals {
            rho: vec![10.0],
            varrho: vec![0.0],
            beta: vec![0.0],
        };
        assert_eq!(profit(&g, &decision(0.0, 0.0, 0.0), &zero, 1), 0.0);
        assert_eq!(profit(&g, &decision(3.0, 0.0, 0.0), &zero, 1), 15.0);

        let g = asset(1);
        let s = GeneratorSignals {
            rho: vec![4.0],
            varrho: vec![0.0],
            beta: vec![4.0],
        };
        for p in [0.2, 0.5, 0.8] {
            let v = profit(&g, &decision(0.0, 0.0, p), &s, 1);
            assert!((v - 4.0 * 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_responses() {
        let g = asset(3);
        let s = GeneratorSignals {
            rho: vec![2.0, 6.0, 100.0],
            varrho: vec![0.0, 1.0, -1.0],
            beta: vec![3.0, 1.0, 100.0],
        };
        let d = local_solve(&g, &s, 1, None);
        assert_eq!(d.p_conv, vec![0.0, 2.0, 5.0]);
        assert_eq!(d.q_conv, vec![-1.0, 1.0, -1.0]);
        assert_eq!(d.p_ren, vec![0.2, 0.8, 0.2]);
        assert!((d.delta - 2.0).abs() < 1e-12);

        let s = GeneratorSignals {
            rho: vec![5.0; 3],
            varrho: vec![0.0; 3],
            beta: vec![1.0; 3],
        };
        let d = local_solve(&g, &s, 1, None);
        assert_eq!(d.p_ren, vec![0.8; 3]);
        assert_eq!(d.delta, 0.0);
    }

    #[test]
    fn linear_cost_ties_go_to_minimum() {
        let mut g = asset(1);
        g.a2 = 0.0;
        g.p_min = 0.5;
        let s = GeneratorSignals {
            rho: vec![2.0],
            varrho: vec![0.0],
            beta: vec![0.0],
        };
        assert_eq!(local_solve(&g, &s, 1, None).p_conv, vec![0.5]);
    }

    #[test]
    fn degenerate_renewable_slot() {
        let mut g = asset(2);
        g.renewable.as_mut().unwrap().p_min[1] = 0.8;
        let s = GeneratorSignals {
            rho: vec![0.0; 2],
            varrho: vec![0.0; 2],
            beta: vec![1.0; 2],
        };
        let d = local_solve(&g, &s, 1, None);
        assert_eq!(d.p_ren, vec![0.2, 0.8]);
        assert!((d.delta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proximal_response_stays_feasible() {
        let g = asset(2);
        let anchor = local_solve(
            &g,
            &GeneratorSignals {
                rho: vec![3.0; 2],
                varrho: vec![0.5; 2],
                beta: vec![1.0; 2],
            },
            1,
            None,
        );
        let s = GeneratorSignals {
            rho: vec![-50.0, 50.0],
            varrho: vec![-9.0, 9.0],
            beta: vec![0.0; 2],
        };
        let d = local_solve(&g, &s, 1, Some(Proximal { anchor: &anchor, tau: 0.1 }));
        assert!(is_feasible(&g, &d, 2.0, 1));
    }
}

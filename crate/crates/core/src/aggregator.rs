//! Load-aggregator agent: tracks which appliances are awake, estimates the
//! load of sleeping ones and schedules the awake ones against prices.

use crate::appliance::{sleeping_load_estimate, ActiveAppliance, Appliance, ApplianceType, FeasibleSet};
use crate::error::{Error, Result};
use crate::grid::{reactive_factor, AggregatorConfig};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone)]
pub struct AggregatorState<T> {
    pub bus: usize,
    pub power_factor: T,
    pub horizon: usize,
    /// Every appliance of the aggregator, awake or not.
    pub catalog: Vec<Appliance<T>>,
    /// Catalog indices of appliances still asleep.
    pub asleep: Vec<usize>,
    /// Awake appliances, ordered by catalog index.
    pub awake: Vec<ActiveAppliance<T>>,
    awake_index: Vec<usize>,
    /// Current profile over `H_t` of each awake appliance.
    pub profiles: Vec<Vec<T>>,
    /// Last received prices over `H_t`.
    pub prices: Vec<T>,
    /// Awake appliances run their nominal schedule (benchmark world).
    pub uncontrolled: bool,
}

impl<T: Scalar> AggregatorState<T> {
    pub fn new(config: &AggregatorConfig<T>, horizon: usize) -> Self {
        Self {
            bus: config.bus,
            power_factor: config.power_factor,
            horizon,
            catalog: config.appliances.clone(),
            asleep: (0..config.appliances.len()).collect(),
            awake: Vec::new(),
            awake_index: Vec::new(),
            profiles: Vec::new(),
            prices: Vec::new(),
            uncontrolled: false,
        }
    }

    pub fn reactive_factor(&self) -> T {
        reactive_factor(self.power_factor)
    }

    /// Catalog indices of the awake appliances, aligned with `awake`.
    pub fn awake_catalog_indices(&self) -> &[usize] {
        &self.awake_index
    }

    /// Move catalog appliance `ev` from asleep to awake with wake slot
    /// `wake`, observed at slot `t <= wake`.
    pub fn reveal(&mut self, ev: usize, wake: usize, t: usize) -> Result<()> {
        let Some(pos) = self.asleep.iter().position(|&a| a == ev) else {
            return Err(Error::BadWakeEvent {
                bus: self.bus,
                appliance: self.catalog.get(ev).map_or_else(|| format!("#{ev}"), |a| a.id.clone()),
            });
        };
        self.asleep.remove(pos);
        let spec = self.catalog[ev].clone();
        let active = if self.uncontrolled {
            ActiveAppliance::pinned(spec, wake, self.horizon)
        } else {
            ActiveAppliance::new(spec, wake, self.horizon)
        };
        let set = active.feasible_set(t)?;
        let mid: Vec<T> = set.lo.iter().zip(&set.hi).map(|(&l, &h)| (l + h) * T::half()).collect();
        let at = self.awake_index.partition_point(|&i| i < ev);
        self.awake_index.insert(at, ev);
        self.profiles.insert(at, set.project(&mid));
        self.awake.insert(at, active);
        Ok(())
    }

    /// Apply the wake events of slot `t` (catalog indices) and drop
    /// appliances that are finished or can no longer wake.
    pub fn wake_step(&mut self, t: usize, events: &[usize]) -> Result<()> {
        for &ev in events {
            self.reveal(ev, t, t)?;
        }
        let mut k = 0;
        while k < self.awake.len() {
            if self.awake[k].finished_at(t) {
                self.awake.remove(k);
                self.awake_index.remove(k);
                self.profiles.remove(k);
            } else {
                k += 1;
            }
        }
        let catalog = &self.catalog;
        self.asleep
            .retain(|&a| catalog[a].wake_table().remaining(t) > T::lit(1e-12) && t < catalog[a].wake_prob.len());
        Ok(())
    }

    /// Record slot `t` as consumed and shift every profile to `H_{t+1}`.
    pub fn commit_slot(&mut self, t: usize) {
        for (app, prof) in self.awake.iter_mut().zip(&mut self.profiles) {
            if let Some(&e) = prof.first() {
                app.commit(t, e);
                prof.remove(0);
            }
        }
        if !self.prices.is_empty() {
            self.prices.remove(0);
        }
    }

    /// Eq. 8 estimate over `H_t` of the sleeping appliances.
    pub fn sleeping_load(&self, t: usize) -> Result<Vec<T>> {
        let asleep: Vec<&Appliance<T>> = self.asleep.iter().map(|&a| &self.catalog[a]).collect();
        (t..=self.horizon).map(|h| sleeping_load_estimate(&asleep, h, t)).collect()
    }

    /// Active and reactive demand over `H_t` for the given profiles.
    pub fn demand_for(&self, profiles: &[Vec<T>], t: usize) -> Result<(Vec<T>, Vec<T>)> {
        let mut l = self.sleeping_load(t)?;
        for prof in profiles {
            for (acc, &e) in l.iter_mut().zip(prof) {
                *acc = *acc + e;
            }
        }
        let kq = self.reactive_factor();
        let q = l.iter().map(|&x| x * kq).collect();
        Ok((l, q))
    }

    pub fn demand_profile(&self, t: usize) -> Result<(Vec<T>, Vec<T>)> {
        self.demand_for(&self.profiles, t)
    }

    /// `U(e) - Σ_h l(h) ρ(h)` over `H_t`.
    pub fn profit(&self, profiles: &[Vec<T>], prices: &[T], t: usize) -> Result<T> {
        let (l, _) = self.demand_for(profiles, t)?;
        let utility: T = self.awake.iter().zip(profiles).map(|(a, e)| a.utility(e, t)).sum();
        Ok(utility - dot(&l, prices))
    }

    /// Profit-maximizing profiles over `H_t`. With `prox = (anchor, tau)`
    /// each appliance also pays `‖e - anchor‖² / (2 tau)`.
    pub fn local_solve(
        &self,
        prices: &[T],
        t: usize,
        prox: Option<(&[Vec<T>], T)>,
    ) -> Result<Vec<Vec<T>>> {
        let len = self.horizon + 1 - t;
        if prices.len() != len {
            return Err(Error::Dimension(format!("aggregator {} got {} prices for {len} slots", self.bus, prices.len())));
        }
        self.awake
            .iter()
            .enumerate()
            .map(|(k, app)| {
                let set = app.feasible_set(t)?;
                let anchor = prox.map(|(a, tau)| (a[k].as_slice(), tau));
                Ok(solve_appliance(app, &set, prices, t, anchor))
            })
            .collect()
    }
}

/// Exact best response of one appliance.
///
/// Every slot term is concave in its own entry, so for a fixed multiplier `nu`
/// on the in-window total each entry solves a monotone scalar equation. The
/// multiplier is then found by bisection: for types 2 and 3 it is zero unless
/// the energy band binds, for type 1 it also prices the utility of the total.
pub fn solve_appliance<T: Scalar>(
    app: &ActiveAppliance<T>,
    set: &FeasibleSet<T>,
    prices: &[T],
    t: usize,
    prox: Option<(&[T], T)>,
) -> Vec<T> {
    if set.is_singleton() {
        return set.lo.clone();
    }
    let len = set.dim();
    let deferrable = app.spec.kind == ApplianceType::Deferrable;
    let mask: Vec<bool> = match &set.band {
        Some(b) => b.mask.clone(),
        None => (0..len).map(|k| deferrable && app.in_window(t + k)).collect(),
    };
    let entry = |k: usize, nu: T| -> T {
        let c = prices[k] + if mask[k] { nu } else { T::zero() };
        let slope = |e: T| {
            let mut d = app.slot_slope(t + k, e) - c;
            if let Some((a, tau)) = prox {
                d = d - (e - a[k]) / tau;
            }
            d
        };
        scalar_root(slope, set.lo[k], set.hi[k])
    };
    let base: Vec<T> = (0..len).map(|k| entry(k, T::zero())).collect();
    if !mask.iter().any(|&m| m) {
        return base;
    }
    let profile = |nu: T| -> Vec<T> {
        (0..len).map(|k| if mask[k] { entry(k, nu) } else { base[k] }).collect()
    };
    let total = |x: &[T]| -> T { x.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum() };

    // a multiplier of this size saturates every masked entry at a bound
    let box_lo: T = (0..len).filter(|&k| mask[k]).map(|k| set.lo[k]).sum();
    let mut bound = T::one() + app.energy_slope(box_lo).abs();
    for k in (0..len).filter(|&k| mask[k]) {
        let (lo, hi) = (set.lo[k], set.hi[k]);
        let mut m = prices[k].abs() + app.slot_slope(t + k, lo).abs() + app.slot_slope(t + k, hi).abs();
        if let Some((a, tau)) = prox {
            m = m + ((a[k] - lo).abs() + (a[k] - hi).abs()) / tau;
        }
        bound = bound.max(T::one() + m);
    }

    // stationarity in the total: nu + U'(S(nu)) = 0, increasing in nu
    let mut x = if deferrable {
        let (a, b) = bisect(-bound, bound, |nu| nu + app.energy_slope(total(&profile(nu))) > T::zero());
        let (xa, xb) = (profile(a), profile(b));
        let nu = (a + b) * T::half();
        // S jumps inside the bracket when an entry is linear; pick the split
        // that balances the marginal utility against nu
        let (wa, _) = bisect(T::zero(), T::one(), |w| {
            let s = total(&xa) * (T::one() - w) + total(&xb) * w;
            nu + app.energy_slope(s) > T::zero()
        });
        blend(&xa, &xb, wa)
    } else {
        base.clone()
    };

    if let Some(band) = &set.band {
        let s = total(&x);
        let target = if s > band.hi {
            Some(band.hi)
        } else if s < band.lo {
            Some(band.lo)
        } else {
            None
        };
        // any multiplier that meets the bound gives the best split of it
        if let Some(target) = target {
            let (a, b) = bisect(-bound, bound, |nu| total(&profile(nu)) < target);
            let (xa, xb) = (profile(a), profile(b));
            let (sa, sb) = (total(&xa), total(&xb));
            let w = if sa > sb { ((sa - target) / (sa - sb)).clamp_to(T::zero(), T::one()) } else { T::half() };
            x = blend(&xa, &xb, w);
        }
    }
    x
}

/// Smallest bracket `[a, b]` with `!up(a)` and `up(b)` reachable by halving.
fn bisect<T: Scalar>(mut a: T, mut b: T, up: impl Fn(T) -> bool) -> (T, T) {
    for _ in 0..200 {
        let mid = (a + b) * T::half();
        if mid <= a || mid >= b {
            break;
        }
        if up(mid) {
            b = mid;
        } else {
            a = mid;
        }
    }
    (a, b)
}

fn blend<T: Scalar>(xa: &[T], xb: &[T], w: T) -> Vec<T> {
    xa.iter().zip(xb).map(|(&a, &b)| a + (b - a) * w).collect()
}

/// Root of a nonincreasing `slope` on `[lo, hi]`, or the bound it points at.
fn scalar_root<T: Scalar>(slope: impl Fn(T) -> T, lo: T, hi: T) -> T {
    if lo >= hi {
        return lo;
    }
    if slope(hi) >= T::zero() {
        return hi;
    }
    if slope(lo) <= T::zero() {
        return lo;
    }
    let (a, b) = bisect(lo, hi, |e| slope(e) < T::zero());
    (a + b) * T::half()
}

//! Appliance models: the three constraint families, concave utilities and the
//! probabilistic estimate of load from appliances that are still asleep.
//!
//! Slots are numbered from 1. A profile "over H_t" is a vector whose entry
//! `k` belongs to slot `t + k`, ending at the last slot of the day.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ApplianceType {
    /// Must run inside its window, off elsewhere; utility on total energy.
    Deferrable,
    /// Time-dependent utility, may run outside its window at low utility.
    TimePreference,
    /// No total-energy constraint; constant utility weights.
    WindowPreference,
}

impl TryFrom<u8> for ApplianceType {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Self::Deferrable),
            2 => Ok(Self::TimePreference),
            3 => Ok(Self::WindowPreference),
            other => Err(format!("appliance type must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<ApplianceType> for u8 {
    fn from(t: ApplianceType) -> u8 {
        match t {
            ApplianceType::Deferrable => 1,
            ApplianceType::TimePreference => 2,
            ApplianceType::WindowPreference => 3,
        }
    }
}

/// Concave utility kernel `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Log1p,
    SqrtShift,
}

const SQRT_SHIFT_EPS: f64 = 1e-6;

impl Kernel {
    /// `f(x)`, extended linearly below zero so it stays concave and C¹.
    pub fn value<T: Scalar>(self, x: T) -> T {
        if x < T::zero() {
            return self.value(T::zero()) + self.slope(T::zero()) * x;
        }
        match self {
            Kernel::Log1p => x.ln_1p(),
            Kernel::SqrtShift => {
                let eps = T::lit(SQRT_SHIFT_EPS);
                (x + eps).sqrt() - eps.sqrt()
            }
        }
    }

    /// `f'(x)`
    pub fn slope<T: Scalar>(self, x: T) -> T {
        let x = x.max(T::zero());
        match self {
            Kernel::Log1p => T::one() / (T::one() + x),
            Kernel::SqrtShift => T::half() / (x + T::lit(SQRT_SHIFT_EPS)).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Appliance<T> {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: ApplianceType,
    /// Length of the scheduling window, in slots, starting at the wake slot.
    pub window_len: usize,
    pub e_min: T,
    pub e_max: T,
    /// Total-energy band over the window (types 1 and 2 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_min: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_max: Option<T>,
    pub e_nom: T,
    pub energy_nom: T,
    pub kappa: T,
    #[serde(default)]
    pub kappa_out: T,
    /// Per-slot in-window weights, indexed by slot - 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_by_slot: Option<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_out_by_slot: Option<Vec<T>>,
    #[serde(default)]
    pub kernel: Kernel,
    /// Probability of waking in each slot of the day; the missing mass means
    /// the appliance never wakes.
    pub wake_prob: Vec<T>,
}

/// Validation finding that does not reject the scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Warning(pub String);

impl<T: Scalar> Appliance<T> {
    /// Operation duration in whole slots, `ceil(E_nom / e_nom)`.
    pub fn duration(&self) -> usize {
        if self.e_nom <= T::zero() {
            return 0;
        }
        let slots = (self.energy_nom / self.e_nom).as_f64();
        // absorb representation noise such as 2.0000000000000004
        (slots - 1e-9).ceil().max(0.0) as usize
    }

    pub fn has_energy_band(&self) -> bool {
        !matches!(self.kind, ApplianceType::WindowPreference)
    }

    pub fn wake_table(&self) -> WakeProbabilityTable<T> {
        WakeProbabilityTable {
            appliance: self.id.clone(),
            probs: self.wake_prob.clone(),
            duration: self.duration(),
        }
    }

    /// The same appliance under the uncontrolled worst case: every bound is
    /// pinned to the nominal values.
    pub fn worst_case(&self) -> Self {
        let mut a = self.clone();
        a.e_min = self.e_nom;
        a.e_max = self.e_nom;
        if a.has_energy_band() {
            a.energy_min = Some(self.energy_nom);
            a.energy_max = Some(self.energy_nom);
        }
        a
    }

    fn kappa_in(&self, slot: usize) -> T {
        self.kappa_by_slot
            .as_ref()
            .and_then(|k| k.get(slot - 1).copied())
            .unwrap_or(self.kappa)
    }

    fn kappa_outside(&self, slot: usize) -> T {
        self.kappa_out_by_slot
            .as_ref()
            .and_then(|k| k.get(slot - 1).copied())
            .unwrap_or(self.kappa_out)
    }

    pub fn validate(&self, horizon: usize) -> Result<Vec<Warning>> {
        let bad = |msg: String| Err(Error::Validation(format!("appliance {}: {msg}", self.id)));
        if self.window_len == 0 {
            return bad("window_len must be at least 1".into());
        }
        if !(self.e_min >= T::zero() && self.e_min <= self.e_max) {
            return bad(format!("need 0 <= e_min <= e_max, got {} / {}", self.e_min, self.e_max));
        }
        if self.e_nom < T::zero() || self.energy_nom < T::zero() {
            return bad("nominal power and energy must be nonnegative".into());
        }
        if self.kappa < T::zero() || self.kappa_out < T::zero() {
            return bad("utility weights must be nonnegative".into());
        }
        match (self.kind, self.energy_min, self.energy_max) {
            (ApplianceType::WindowPreference, None, None) => {}
            (ApplianceType::WindowPreference, _, _) => {
                return bad("type 3 appliances carry no total-energy bounds".into())
            }
            (_, Some(lo), Some(hi)) if lo <= hi && lo >= T::zero() => {}
            (_, Some(_), Some(_)) => return bad("need 0 <= energy_min <= energy_max".into()),
            _ => return bad("types 1 and 2 need energy_min and energy_max".into()),
        }
        if self.wake_prob.len() != horizon {
            return bad(format!(
                "wake_prob has {} entries, horizon is {horizon}",
                self.wake_prob.len()
            ));
        }
        if self.wake_prob.iter().any(|&p| p < T::zero()) {
            return bad("wake probabilities must be nonnegative".into());
        }
        let total: T = self.wake_prob.iter().copied().sum();
        if total > T::one() + T::lit(1e-9) {
            return bad(format!("wake probabilities sum to {total} > 1"));
        }
        for (name, v) in [("kappa_by_slot", &self.kappa_by_slot), ("kappa_out_by_slot", &self.kappa_out_by_slot)] {
            if let Some(v) = v {
                if v.len() != horizon || v.iter().any(|&k| k < T::zero()) {
                    return bad(format!("{name} needs {horizon} nonnegative entries"));
                }
            }
        }
        let mut warnings = Vec::new();
        if self.kappa_out > T::lit(0.1) * self.kappa {
            warnings.push(Warning(format!(
                "appliance {}: out-of-window weight {} exceeds 0.1 x in-window weight {}",
                self.id, self.kappa_out, self.kappa
            )));
        }
        Ok(warnings)
    }
}

/// Wake-time distribution of one appliance.
#[derive(Debug, Clone, PartialEq)]
pub struct WakeProbabilityTable<T> {
    pub appliance: String,
    /// `probs[h - 1]` is the probability of waking in slot `h`.
    pub probs: Vec<T>,
    /// Operation duration in slots.
    pub duration: usize,
}

impl<T: Scalar> WakeProbabilityTable<T> {
    fn mass_through(&self, t: usize) -> T {
        self.probs.iter().take(t).copied().sum()
    }

    /// Probability mass left after slot `t`, i.e. the conditioning denominator.
    pub fn remaining(&self, t: usize) -> T {
        T::one() - self.mass_through(t)
    }
}

/// Probability of waking in slot `h` given the appliance was still asleep
/// through slot `t`.
pub fn conditional_wake_prob<T: Scalar>(table: &WakeProbabilityTable<T>, h: usize, t: usize) -> Result<T> {
    debug_assert!(h > t, "conditional wake probability needs h > t");
    let denom = table.remaining(t);
    if denom <= T::lit(1e-12) {
        return Err(Error::CertaintyExhausted {
            appliance: table.appliance.clone(),
            slot: t,
        });
    }
    let p = table.probs.get(h - 1).copied().unwrap_or_else(T::zero);
    Ok(p / denom)
}

/// Probability that an appliance asleep through `t` is running in slot `h`,
/// when it runs for `duration` slots right after waking.
pub fn operating_probability<T: Scalar>(table: &WakeProbabilityTable<T>, h: usize, t: usize) -> Result<T> {
    if h <= t || table.duration == 0 {
        return Ok(T::zero());
    }
    let first = (t + 1).max((h + 1).saturating_sub(table.duration));
    let mut acc = T::zero();
    for wake in first..=h {
        acc = acc + conditional_wake_prob(table, wake, t)?;
    }
    Ok(acc)
}

/// Worst-case expected demand in slot `h` of the appliances asleep at `t`.
pub fn sleeping_load_estimate<T: Scalar>(asleep: &[&Appliance<T>], h: usize, t: usize) -> Result<T> {
    let mut total = T::zero();
    for a in asleep {
        let p = operating_probability(&a.wake_table(), h, t)?;
        total = total + a.e_nom * p;
    }
    Ok(total)
}

/// An appliance that has woken up, with its rolling-horizon bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveAppliance<T> {
    pub spec: Appliance<T>,
    pub wake: usize,
    /// Day length; the window is truncated at it.
    pub horizon: usize,
    /// Energy already committed inside the window in past slots.
    pub consumed: T,
    /// Runs its nominal schedule regardless of prices (no demand response).
    pub pinned: bool,
}

impl<T: Scalar> ActiveAppliance<T> {
    pub fn new(spec: Appliance<T>, wake: usize, horizon: usize) -> Self {
        Self {
            spec,
            wake,
            horizon,
            consumed: T::zero(),
            pinned: false,
        }
    }

    pub fn pinned(spec: Appliance<T>, wake: usize, horizon: usize) -> Self {
        Self {
            pinned: true,
            ..Self::new(spec, wake, horizon)
        }
    }

    /// Inclusive window of slots, truncated at the end of the day.
    pub fn window(&self) -> (usize, usize) {
        let end = (self.wake + self.spec.window_len - 1).min(self.horizon);
        (self.wake, end)
    }

    pub fn in_window(&self, slot: usize) -> bool {
        let (a, b) = self.window();
        slot >= a && slot <= b
    }

    fn window_truncated(&self) -> bool {
        self.wake + self.spec.window_len - 1 > self.horizon
    }

    /// Type 1 appliances are finished once their window has passed, pinned
    /// ones once their nominal run is over.
    pub fn finished_at(&self, t: usize) -> bool {
        if self.pinned {
            return t >= self.wake + self.spec.duration();
        }
        self.spec.kind == ApplianceType::Deferrable && t > self.window().1
    }

    /// Record the committed consumption of `slot`.
    pub fn commit(&mut self, slot: usize, energy: T) {
        if self.in_window(slot) {
            self.consumed = self.consumed + energy;
        }
    }

    /// Utility of a profile over `H_t`.
    pub fn utility(&self, profile: &[T], t: usize) -> T {
        let a = &self.spec;
        match a.kind {
            ApplianceType::Deferrable => {
                let inside: T = profile
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| self.in_window(t + k))
                    .map(|(_, &e)| e)
                    .sum();
                let e_lo = a.energy_min.unwrap_or_else(T::zero);
                a.kappa * a.kernel.value(self.consumed + inside - e_lo)
            }
            ApplianceType::TimePreference | ApplianceType::WindowPreference => profile
                .iter()
                .enumerate()
                .map(|(k, &e)| self.slot_utility(t + k, e))
                .sum(),
        }
    }

    fn slot_utility(&self, slot: usize, e: T) -> T {
        let a = &self.spec;
        let constant = a.kind == ApplianceType::WindowPreference;
        if self.in_window(slot) {
            let k = if constant { a.kappa } else { a.kappa_in(slot) };
            k * a.kernel.value(e - a.e_min)
        } else {
            let k = if constant { a.kappa_out } else { a.kappa_outside(slot) };
            k * a.kernel.value(e)
        }
    }

    /// Gradient of [`Self::utility`] with respect to the profile.
    pub fn utility_gradient(&self, profile: &[T], t: usize) -> Vec<T> {
        match self.spec.kind {
            ApplianceType::Deferrable => {
                let inside: T = profile
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| self.in_window(t + k))
                    .map(|(_, &e)| e)
                    .sum();
                let g = self.energy_slope(inside);
                (0..profile.len())
                    .map(|k| if self.in_window(t + k) { g } else { T::zero() })
                    .collect()
            }
            _ => profile.iter().enumerate().map(|(k, &e)| self.slot_slope(t + k, e)).collect(),
        }
    }

    /// Derivative of the per-slot utility term; zero for type 1, whose
    /// utility only depends on the in-window total.
    pub fn slot_slope(&self, slot: usize, e: T) -> T {
        let a = &self.spec;
        let constant = match a.kind {
            ApplianceType::Deferrable => return T::zero(),
            ApplianceType::TimePreference => false,
            ApplianceType::WindowPreference => true,
        };
        if self.in_window(slot) {
            let w = if constant { a.kappa } else { a.kappa_in(slot) };
            w * a.kernel.slope(e - a.e_min)
        } else {
            let w = if constant { a.kappa_out } else { a.kappa_outside(slot) };
            w * a.kernel.slope(e)
        }
    }

    /// Derivative of the type 1 utility in the remaining in-window total;
    /// zero for the other types.
    pub fn energy_slope(&self, inside: T) -> T {
        let a = &self.spec;
        if a.kind != ApplianceType::Deferrable {
            return T::zero();
        }
        let e_lo = a.energy_min.unwrap_or_else(T::zero);
        a.kappa * a.kernel.slope(self.consumed + inside - e_lo)
    }

    /// Constraint set for the profile over `H_t`.
    pub fn feasible_set(&self, t: usize) -> Result<FeasibleSet<T>> {
        if self.pinned {
            let nominal = self.nominal_profile(t);
            return Ok(FeasibleSet {
                lo: nominal.clone(),
                hi: nominal,
                band: None,
            });
        }
        let a = &self.spec;
        let len = self.horizon + 1 - t;
        let mut lo = Vec::with_capacity(len);
        let mut hi = Vec::with_capacity(len);
        let mut mask = Vec::with_capacity(len);
        for k in 0..len {
            let slot = t + k;
            let inside = self.in_window(slot);
            mask.push(inside);
            if inside {
                lo.push(a.e_min);
                hi.push(a.e_max);
            } else if slot < self.wake || a.kind == ApplianceType::Deferrable {
                lo.push(T::zero());
                hi.push(T::zero());
            } else {
                lo.push(T::zero());
                hi.push(a.e_max);
            }
        }
        let band = match (a.energy_min, a.energy_max) {
            (Some(emin), Some(emax)) if a.has_energy_band() => {
                let box_lo: T = lo.iter().zip(&mask).filter(|(_, &m)| m).map(|(&l, _)| l).sum();
                let box_hi: T = hi.iter().zip(&mask).filter(|(_, &m)| m).map(|(&h, _)| h).sum();
                let mut need = emin - self.consumed;
                let mut allow = emax - self.consumed;
                let slack = T::lit(1e-9) * (T::one() + emax.abs());
                if need > box_hi + slack {
                    if self.window_truncated() || self.consumed > T::zero() {
                        need = box_hi;
                    } else {
                        return Err(Error::InfeasibleAppliance {
                            appliance: a.id.clone(),
                            reason: format!("E_min {emin} exceeds the largest attainable total {box_hi}"),
                        });
                    }
                }
                if allow < box_lo - slack {
                    if self.consumed > T::zero() {
                        allow = box_lo;
                    } else {
                        return Err(Error::InfeasibleAppliance {
                            appliance: a.id.clone(),
                            reason: format!("E_max {emax} is below the smallest attainable total {box_lo}"),
                        });
                    }
                }
                Some(Band {
                    mask,
                    lo: need.max(box_lo).min(box_hi),
                    hi: allow.min(box_hi).max(box_lo),
                })
            }
            _ => None,
        };
        Ok(FeasibleSet { lo, hi, band })
    }

    /// Profile of the uncontrolled benchmark: nominal power for the operation
    /// duration right after waking, restricted to `H_t`.
    pub fn nominal_profile(&self, t: usize) -> Vec<T> {
        let d = self.spec.duration();
        (t..=self.horizon)
            .map(|slot| {
                if slot >= self.wake && slot < self.wake + d {
                    self.spec.e_nom
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

/// Subset-sum band `lo <= sum_{k: mask[k]} x[k] <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band<T> {
    pub mask: Vec<bool>,
    pub lo: T,
    pub hi: T,
}

/// Box bounds per slot, optionally intersected with one two-sided band.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSet<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
    pub band: Option<Band<T>>,
}

impl<T: Scalar> FeasibleSet<T> {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_singleton(&self) -> bool {
        self.lo.iter().zip(&self.hi).all(|(l, h)| l == h)
    }

    pub fn contains(&self, x: &[T], tol: T) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let boxed = x
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol);
        boxed
            && self.band.as_ref().is_none_or(|b| {
                let s = masked_sum(x, &b.mask);
                s >= b.lo - tol && s <= b.hi + tol
            })
    }

    /// Euclidean projection onto the set. The band is handled by bisection on
    /// its multiplier: `x(nu) = clamp(z - nu * mask)`.
    pub fn project(&self, z: &[T]) -> Vec<T> {
        let clamp = |shift: T| -> Vec<T> {
            z.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let m = self.band.as_ref().is_some_and(|b| b.mask[k]);
                    let v = if m { v - shift } else { v };
                    v.clamp_to(self.lo[k], self.hi[k])
                })
                .collect()
        };
        let x0 = clamp(T::zero());
        let Some(band) = &self.band else {
            return x0;
        };
        let s0 = masked_sum(&x0, &band.mask);
        let target = if s0 > band.hi {
            band.hi
        } else if s0 < band.lo {
            band.lo
        } else {
            return x0;
        };
        // bracket the multiplier: a shift of the full z range saturates every entry
        let span = z
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &h))| (v - l).abs().max((v - h).abs()))
            .fold(T::one(), T::max);
        let (mut a, mut b) = if s0 > target {
            (T::zero(), span)
        } else {
            (-span, T::zero())
        };
        for _ in 0..200 {
            let mid = (a + b) * T::half();
            if mid == a || mid == b {
                break;
            }
            if masked_sum(&clamp(mid), &band.mask) > target {
                a = mid;
            } else {
                b = mid;
            }
        }
        let mut x = clamp((a + b) * T::half());
        // spread the last rounding error over the free masked entries
        let err = target - masked_sum(&x, &band.mask);
        let free: Vec<usize> = (0..x.len())
            .filter(|&k| band.mask[k] && x[k] > self.lo[k] && x[k] < self.hi[k])
            .collect();
        if !free.is_empty() {
            let share = err / T::of_usize(free.len());
            for k in free {
                x[k] = (x[k] + share).clamp_to(self.lo[k], self.hi[k]);
            }
        }
        x
    }
}

fn masked_sum<T: Scalar>(x: &[T], mask: &[bool]) -> T {
    x.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum()
}

//! Reservation, cancellation and per-scenario cost accounting.
//!
//! A segment's cost is defined by its ledger: every hold, price-switch and
//! under/overbooking solve is one [`LedgerEntry`]. The single-update closed
//! forms at the bottom of this module are an independent algebraic route
//! used to cross-check the ledger sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative tolerance for duration bookkeeping checks.
const DURATION_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CancellationPolicy<T> {
    rate: T,
}

impl<T: Scalar> CancellationPolicy<T> {
    pub fn new(rate: T) -> Result<Self> {
        if !(rate >= T::zero() && rate < T::one()) {
            return Err(Error::Domain(format!("cancellation rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    pub fn free() -> Self {
        Self { rate: T::zero() }
    }

    pub fn rate(&self) -> T {
        self.rate
    }
}

impl<T: Scalar> Default for CancellationPolicy<T> {
    /// 12% of the cancelled reservation's price.
    fn default() -> Self {
        Self { rate: T::of(0.12) }
    }
}

/// Booking scenario flag: actual traversal shorter, equal or longer than
/// planned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Under,
    Exact,
    Over,
}

impl Scenario {
    /// `-1` underbooked, `0` exact, `+1` overbooked.
    pub fn flag(self) -> i8 {
        match self {
            Scenario::Under => -1,
            Scenario::Exact => 0,
            Scenario::Over => 1,
        }
    }

    pub fn from_durations<T: Scalar>(planned: T, actual: T) -> Self {
        if actual > planned {
            Scenario::Under
        } else if actual < planned {
            Scenario::Over
        } else {
            Scenario::Exact
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Under => "under",
            Scenario::Exact => "exact",
            Scenario::Over => "over",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan<T> {
    /// Originally reserved duration, minutes.
    pub planned: T,
    /// Actual traversal time, minutes.
    pub actual: T,
    pub scenario: Scenario,
    /// First timestep of the original reservation.
    pub reservation_start: usize,
    /// One past the last timestep of the original reservation.
    pub reservation_end: usize,
}

impl<T: Scalar> SegmentPlan<T> {
    pub fn new(
        planned: T,
        actual: T,
        reservation_start: usize,
        reservation_end: usize,
    ) -> Result<Self> {
        if !(planned > T::zero() && actual > T::zero()) {
            return Err(Error::Domain("segment durations must be positive".into()));
        }
        Ok(Self {
            planned,
            actual,
            scenario: Scenario::from_durations(planned, actual),
            reservation_start,
            reservation_end,
        })
    }

    /// Absolute booking mismatch |actual - planned|, minutes.
    pub fn deviation(&self) -> T {
        (self.actual - self.planned).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Consumption of the held reservation.
    Hold,
    /// Cancel the remaining reservation and re-book it at a new price.
    Update,
    SolveUnder,
    SolveOver,
}

/// One accounting event.
///
/// Field meaning by kind:
/// * `Hold`: `new_unit_price` is the price paid over `affected_duration`.
/// * `Update`: the remaining `affected_duration` minutes held at (effective)
///   `old_unit_price` are cancelled and re-booked at `new_unit_price`.
/// * `SolveUnder`: `affected_duration` extra minutes are bought at
///   `new_unit_price`; the fee cancels that overlap at the next segment,
///   originally reserved at `old_unit_price`.
/// * `SolveOver`: the `affected_duration` tail held at `old_unit_price` is
///   cancelled and re-reserved at the next segment at `new_unit_price`.
///
/// `settled_duration` is the part of the event's purchase that is paid at the
/// event itself rather than through later holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry<T> {
    pub segment: usize,
    pub kind: EventKind,
    pub timestep: usize,
    pub old_unit_price: T,
    pub new_unit_price: T,
    pub affected_duration: T,
    pub settled_duration: T,
    pub fee: T,
}

impl<T: Scalar> LedgerEntry<T> {
    pub fn hold(segment: usize, timestep: usize, price: T, duration: T) -> Self {
        Self {
            segment,
            kind: EventKind::Hold,
            timestep,
            old_unit_price: price,
            new_unit_price: price,
            affected_duration: duration,
            settled_duration: duration,
            fee: T::zero(),
        }
    }

    pub fn bandwidth_cost(&self) -> T {
        self.new_unit_price * self.settled_duration
    }

    pub fn total_cost(&self) -> T {
        self.bandwidth_cost() + self.fee
    }

    /// The same event with its fee recomputed under `policy`.
    pub fn repriced(&self, policy: &CancellationPolicy<T>) -> Self {
        let mut e = self.clone();
        if e.kind != EventKind::Hold {
            e.fee = policy.rate() * e.old_unit_price * e.affected_duration;
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown<T> {
    pub bandwidth_paid: T,
    pub cancellation_paid: T,
    pub total: T,
    pub per_segment: Vec<T>,
}

pub fn cancellation_fee<T: Scalar>(
    policy: &CancellationPolicy<T>,
    unit_price: T,
    cancelled_duration: T,
) -> Result<T> {
    if !(cancelled_duration >= T::zero()) {
        return Err(Error::Domain(format!(
            "cancelled duration must be >= 0, got {cancelled_duration}"
        )));
    }
    Ok(policy.rate() * unit_price * cancelled_duration)
}

/// Whether re-booking the remaining `remaining` minutes at `p_new` beats
/// keeping them at `p_old` once the cancellation fee is paid.
pub fn update_advantage<T: Scalar>(
    policy: &CancellationPolicy<T>,
    p_old: T,
    p_new: T,
    remaining: T,
) -> Result<bool> {
    let fee = cancellation_fee(policy, p_old, remaining)?;
    Ok(p_new * remaining + fee < p_old * remaining)
}

fn close<T: Scalar>(a: T, b: T) -> bool {
    let tol = DURATION_RTOL.max(64.0 * T::epsilon().as_f64());
    let (a, b) = (a.as_f64(), b.as_f64());
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

struct Tally<T> {
    held: T,
    cost: T,
    solves: Vec<usize>,
}

fn tally<T: Scalar>(ledger: &[LedgerEntry<T>], solve_kind: Option<EventKind>) -> Result<Tally<T>> {
    let mut t = Tally { held: T::zero(), cost: T::zero(), solves: Vec::new() };
    for (idx, e) in ledger.iter().enumerate() {
        if !(e.fee >= T::zero() && e.affected_duration >= T::zero() && e.settled_duration >= T::zero()) {
            return Err(Error::Accounting(format!("negative fee or duration in entry {idx}")));
        }
        match e.kind {
            EventKind::Hold => t.held = t.held + e.affected_duration,
            EventKind::Update => {}
            k if Some(k) == solve_kind => t.solves.push(idx),
            k => {
                return Err(Error::Accounting(format!(
                    "{k:?} event does not belong to this scenario"
                )))
            }
        }
        t.cost = t.cost + e.total_cost();
    }
    Ok(t)
}

fn check_scenario<T>(plan: &SegmentPlan<T>, want: Scenario) -> Result<()> {
    if plan.scenario != want {
        return Err(Error::Accounting(format!(
            "plan scenario is {:?}, expected {want:?}",
            plan.scenario
        )));
    }
    Ok(())
}

fn segment_of<T>(ledger: &[LedgerEntry<T>]) -> usize {
    ledger.first().map_or(0, |e| e.segment)
}

/// Exactbooked segment: every held minute plus every switch fee.
pub fn exact_cost<T: Scalar>(ledger: &[LedgerEntry<T>], plan: &SegmentPlan<T>) -> Result<T> {
    check_scenario(plan, Scenario::Exact)?;
    let t = tally(ledger, None)?;
    if !close(t.held, plan.planned) {
        return Err(Error::Accounting(format!(
            "held {} min, planned {} min",
            t.held, plan.planned
        )));
    }
    Ok(t.cost)
}

/// Underbooked segment: the exact part plus the extension bought at solve
/// time and the fee for cancelling the overlap at the next segment.
pub fn under_cost<T: Scalar>(ledger: &[LedgerEntry<T>], plan: &SegmentPlan<T>) -> Result<T> {
    check_scenario(plan, Scenario::Under)?;
    let t = tally(ledger, Some(EventKind::SolveUnder))?;
    let &[solve] = t.solves.as_slice() else {
        return Err(Error::ConstraintViolation {
            segment: segment_of(ledger),
            message: format!("expected one solve_under event, found {}", t.solves.len()),
        });
    };
    let s = &ledger[solve];
    if !close(s.affected_duration, plan.deviation()) {
        return Err(Error::Accounting(format!(
            "extension of {} min, underbooked by {} min",
            s.affected_duration,
            plan.deviation()
        )));
    }
    if !close(t.held + s.settled_duration, plan.actual) {
        return Err(Error::Accounting(format!(
            "consumed {} min, traversal took {} min",
            t.held + s.settled_duration,
            plan.actual
        )));
    }
    Ok(t.cost)
}

/// Overbooked segment: the exact part plus re-reserving the cancelled tail at
/// the next segment and the fee for cancelling it here.
pub fn over_cost<T: Scalar>(ledger: &[LedgerEntry<T>], plan: &SegmentPlan<T>) -> Result<T> {
    check_scenario(plan, Scenario::Over)?;
    let t = tally(ledger, Some(EventKind::SolveOver))?;
    let &[solve] = t.solves.as_slice() else {
        return Err(Error::ConstraintViolation {
            segment: segment_of(ledger),
            message: format!("expected one solve_over event, found {}", t.solves.len()),
        });
    };
    if !close(ledger[solve].affected_duration, plan.deviation()) {
        return Err(Error::Accounting(format!(
            "cancelled tail of {} min, overbooked by {} min",
            ledger[solve].affected_duration,
            plan.deviation()
        )));
    }
    if !close(t.held, plan.actual) {
        return Err(Error::Accounting(format!(
            "held {} min, traversal took {} min",
            t.held, plan.actual
        )));
    }
    Ok(t.cost)
}

pub fn segment_cost<T: Scalar>(ledger: &[LedgerEntry<T>], plan: &SegmentPlan<T>) -> Result<T> {
    match plan.scenario {
        Scenario::Exact => exact_cost(ledger, plan),
        Scenario::Under => under_cost(ledger, plan),
        Scenario::Over => over_cost(ledger, plan),
    }
}

pub fn episode_cost<T: Scalar>(
    ledgers: &[Vec<LedgerEntry<T>>],
    plans: &[SegmentPlan<T>],
) -> Result<CostBreakdown<T>> {
    if ledgers.len() != plans.len() {
        return Err(Error::Accounting(format!(
            "{} ledgers for {} segments",
            ledgers.len(),
            plans.len()
        )));
    }
    let mut bandwidth = T::zero();
    let mut fees = T::zero();
    let mut per_segment = Vec::with_capacity(plans.len());
    for (ledger, plan) in ledgers.iter().zip(plans) {
        per_segment.push(segment_cost(ledger, plan)?);
        for e in ledger {
            bandwidth = bandwidth + e.bandwidth_cost();
            fees = fees + e.fee;
        }
    }
    Ok(CostBreakdown {
        bandwidth_paid: bandwidth,
        cancellation_paid: fees,
        total: bandwidth + fees,
        per_segment,
    })
}

/// Single price switch in an exactbooked segment: `rebooked` minutes at
/// `p_new`, the rest at `p_old`, plus the fee on the rebooked part.
pub fn single_update_exact_cost<T: Scalar>(
    policy: &CancellationPolicy<T>,
    p_old: T,
    p_new: T,
    planned: T,
    rebooked: T,
) -> T {
    p_new * rebooked + p_old * (planned - rebooked) + policy.rate() * p_old * rebooked
}

/// Underbooking solve on top of an exact part.
pub fn single_solve_under_extra<T: Scalar>(
    policy: &CancellationPolicy<T>,
    solve_price: T,
    next_original_price: T,
    underbooked: T,
) -> T {
    solve_price * underbooked + policy.rate() * next_original_price * underbooked
}

/// Overbooking solve on top of an exact part.
pub fn single_solve_over_extra<T: Scalar>(
    policy: &CancellationPolicy<T>,
    next_price: T,
    held_price: T,
    overbooked: T,
) -> T {
    next_price * overbooked + policy.rate() * held_price * overbooked
}

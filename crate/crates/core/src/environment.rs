//! Episodic reservation-update environment.
//!
//! A vehicle crosses `N` segments. At time zero every segment is reserved at
//! the cheapest operator. Each timestep the agent may keep its reservation,
//! switch the remainder of the current segment to the cheapest operator, or
//! resolve the segment's under/overbooking. Money is paid as it is consumed;
//! fees and solve purchases are paid when they happen.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_model::{
    cancellation_fee, episode_cost, CancellationPolicy, CostBreakdown, EventKind, LedgerEntry,
    Scenario, SegmentPlan,
};
use crate::error::{Error, Result};
use crate::price_data::PriceBook;

pub const ACTION_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    DoNothing = 0,
    SolveUnderbooking = 1,
    SolveOverbooking = 2,
    ChangeToLowestPriceMno = 3,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [
        Action::DoNothing,
        Action::SolveUnderbooking,
        Action::SolveOverbooking,
        Action::ChangeToLowestPriceMno,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::DoNothing => "do_nothing",
            Action::SolveUnderbooking => "solve_underbooking",
            Action::SolveOverbooking => "solve_overbooking",
            Action::ChangeToLowestPriceMno => "change_to_lowest_price_mno",
        }
    }
}

/// Small bitset of actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActionSet(u8);

impl ActionSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn insert(&mut self, a: Action) {
        self.0 |= 1 << a.index();
    }

    pub fn contains(self, a: Action) -> bool {
        self.0 & (1 << a.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL.into_iter().filter(move |&a| self.contains(a))
    }

    /// Legal set implied by an observed booking flag.
    pub fn for_flag(flag: i8) -> Self {
        let mut s = Self::empty();
        s.insert(Action::DoNothing);
        s.insert(Action::ChangeToLowestPriceMno);
        match flag {
            -1 => s.insert(Action::SolveUnderbooking),
            1 => s.insert(Action::SolveOverbooking),
            _ => {}
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    Exact,
    Under,
    Over,
    Mixed,
}

impl ScenarioMode {
    pub const ALL: [ScenarioMode; 4] =
        [ScenarioMode::Exact, ScenarioMode::Under, ScenarioMode::Over, ScenarioMode::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioMode::Exact => "exact",
            ScenarioMode::Under => "under",
            ScenarioMode::Over => "over",
            ScenarioMode::Mixed => "mixed",
        }
    }
}

impl fmt::Display for ScenarioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScenarioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Inclusive range for the number of segments.
    pub segment_count_range: (usize, usize),
    /// Inclusive range for actual traversal time per segment, minutes.
    pub segment_minutes_range: (f64, f64),
    pub timestep_seconds: u32,
    pub mno_count: usize,
    pub scenario_mode: ScenarioMode,
    /// Under/overbooking magnitude as a fraction of the traversal time.
    pub booking_deviation_fraction_range: (f64, f64),
    pub cancellation_rate: f64,
    pub penalty_magnitude: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            segment_count_range: (3, 10),
            segment_minutes_range: (10.0, 20.0),
            timestep_seconds: 30,
            mno_count: 4,
            scenario_mode: ScenarioMode::Mixed,
            booking_deviation_fraction_range: (0.10, 0.50),
            cancellation_rate: 0.12,
            penalty_magnitude: 10.0,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let (n_lo, n_hi) = self.segment_count_range;
        if n_lo == 0 || n_lo > n_hi {
            return Err(Error::Config(format!("bad segment_count_range {n_lo}..={n_hi}")));
        }
        let (d_lo, d_hi) = self.booking_deviation_fraction_range;
        if !(d_lo > 0.0 && d_lo <= d_hi && d_hi < 1.0) {
            return Err(Error::Config(format!(
                "booking deviation range {d_lo}..={d_hi} must lie in (0, 1)"
            )));
        }
        if self.timestep_seconds == 0 {
            return Err(Error::Config("timestep_seconds must be positive".into()));
        }
        if self.mno_count < 2 {
            return Err(Error::Config("mno_count must be at least 2".into()));
        }
        if !(self.penalty_magnitude > 0.0) {
            return Err(Error::Config("penalty_magnitude must be positive".into()));
        }
        CancellationPolicy::new(self.cancellation_rate)?;
        self.step_range().map(|_| ())
    }

    pub fn minutes_per_step(&self) -> f64 {
        f64::from(self.timestep_seconds) / 60.0
    }

    /// Inclusive range of traversal lengths in steps.
    pub fn step_range(&self) -> Result<(usize, usize)> {
        let (lo, hi) = self.segment_minutes_range;
        let dt = f64::from(self.timestep_seconds);
        let to_steps = |m: f64| -> Result<usize> {
            let s = m * 60.0 / dt;
            if !(s >= 1.0) || (s - s.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "segment length {m} min is not a positive multiple of the {dt} s timestep"
                )));
            }
            Ok(s.round() as usize)
        };
        let (a, b) = (to_steps(lo)?, to_steps(hi)?);
        if a > b {
            return Err(Error::Config(format!("bad segment_minutes_range {lo}..={hi}")));
        }
        Ok((a, b))
    }

    /// Largest under/overbooking deviation, steps.
    pub fn max_deviation_steps(&self) -> Result<usize> {
        let (_, hi) = self.step_range()?;
        Ok(deviation_steps(self.booking_deviation_fraction_range.1, hi))
    }

    pub fn policy(&self) -> Result<CancellationPolicy<f64>> {
        CancellationPolicy::new(self.cancellation_rate)
    }
}

fn deviation_steps(fraction: f64, actual_steps: usize) -> usize {
    ((fraction * actual_steps as f64).round() as usize).clamp(1, actual_steps.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub planned_steps: usize,
    pub actual_steps: usize,
    pub scenario: Scenario,
}

impl SegmentSpec {
    pub fn deviation_steps(&self) -> usize {
        self.planned_steps.abs_diff(self.actual_steps)
    }
}

/// Everything drawn at episode start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub seed: u64,
    /// Book column of episode time zero.
    pub book_offset: usize,
    pub segments: Vec<SegmentSpec>,
    pub initial_mno: usize,
    pub initial_price: f64,
}

impl EpisodePlan {
    pub fn total_steps(&self) -> usize {
        self.segments.iter().map(|s| s.actual_steps).sum()
    }

    pub fn segment_plans(&self, minutes_per_step: f64) -> Vec<SegmentPlan<f64>> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|s| {
                let plan = SegmentPlan {
                    planned: s.planned_steps as f64 * minutes_per_step,
                    actual: s.actual_steps as f64 * minutes_per_step,
                    scenario: s.scenario,
                    reservation_start: start,
                    reservation_end: start + s.planned_steps,
                };
                start += s.planned_steps;
                plan
            })
            .collect()
    }
}

/// Observation handed to policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Price currently paid.
    pub reserved_price: f64,
    /// Prices available at the current segment, per operator.
    pub current_prices: Vec<f64>,
    /// Prices available at the next segment, per operator.
    pub next_prices: Vec<f64>,
    /// `-1` unsolved underbooking, `+1` unsolved overbooking, `0` otherwise.
    pub booking_flag: i8,
    pub steps_to_handoff: usize,
    /// Normalized encoding, length `2M + 3`.
    pub features: Vec<f64>,
}

impl State {
    pub fn legal_actions(&self) -> ActionSet {
        ActionSet::for_flag(self.booking_flag)
    }

    pub fn lowest_current_price(&self) -> f64 {
        self.current_prices.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Why a step was penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    IllegalAction,
    DeadlineMiss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Money paid during this step, fees included.
    pub cost_delta: f64,
    pub fees: f64,
    pub violation: Option<Violation>,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
    pub done: bool,
    pub info: StepInfo,
}

/// Min-max cost scaling plus constraint penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNorm {
    pub c_min: f64,
    pub c_max: f64,
    pub penalty: f64,
}

impl RewardNorm {
    /// Per-step cost bounds for `config` on prices within `[p_min, p_max]`.
    ///
    /// The cheapest step consumes no reserved time (an underbooked segment
    /// past its reservation). The dearest step pays the top price and the
    /// largest lump: either cancelling a full remaining reservation or
    /// solving the largest deviation at the top price.
    pub fn for_config(config: &EpisodeConfig, p_max: f64) -> Result<Self> {
        let dt = config.minutes_per_step();
        let (_, max_steps) = config.step_range()?;
        let dev = config.max_deviation_steps()? as f64 * dt;
        let longest_reservation = (max_steps as f64) * dt + dev;
        let rate = config.cancellation_rate;
        let lump = (rate * p_max * longest_reservation).max((1.0 + rate) * p_max * dev);
        Ok(Self { c_min: 0.0, c_max: p_max * dt + lump, penalty: config.penalty_magnitude })
    }
}

pub fn reward_from_cost(cost_delta: f64, norm: &RewardNorm, violated: bool) -> f64 {
    let base = -(cost_delta - norm.c_min) / (norm.c_max - norm.c_min);
    if violated {
        base - norm.penalty
    } else {
        base
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    price: f64,
    steps: usize,
    mno: usize,
}

/// One row of the paid-price trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub timestep: usize,
    pub segment: usize,
    pub paid_price: f64,
    pub available: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub deadline_misses: usize,
    pub illegal_actions: usize,
    pub updates_per_segment: Vec<usize>,
    /// Position of each price switch within its segment, in `[0, 1)`.
    pub update_positions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Environment<'a> {
    config: EpisodeConfig,
    book: &'a PriceBook,
    policy: CancellationPolicy<f64>,
    norm: RewardNorm,
    dt: f64,
    max_steps: usize,
    plan: EpisodePlan,
    segment: usize,
    step_in_segment: usize,
    t: usize,
    blocks: VecDeque<Block>,
    last_price: f64,
    solved: bool,
    unreserved: usize,
    ledgers: Vec<Vec<LedgerEntry<f64>>>,
    accumulated_cost: f64,
    done: bool,
    stats: EpisodeStats,
    trace: Option<Vec<TracePoint>>,
}

/// Draw an episode and place the initial reservations.
pub fn new_episode<'a>(
    config: &EpisodeConfig,
    book: &'a PriceBook,
    seed: u64,
) -> Result<(Environment<'a>, State)> {
    let env = Environment::new(config, book, seed)?;
    let s = env.observe()?;
    Ok((env, s))
}

impl<'a> Environment<'a> {
    pub fn new(config: &EpisodeConfig, book: &'a PriceBook, seed: u64) -> Result<Self> {
        config.validate()?;
        if book.mno_count() != config.mno_count {
            return Err(Error::Config(format!(
                "book has {} operators, config expects {}",
                book.mno_count(),
                config.mno_count
            )));
        }
        if book.timestep_seconds() != config.timestep_seconds {
            return Err(Error::Config(format!(
                "book timestep {} s, config timestep {} s",
                book.timestep_seconds(),
                config.timestep_seconds
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_lo, n_hi) = config.segment_count_range;
        let (s_lo, s_hi) = config.step_range()?;
        let (f_lo, f_hi) = config.booking_deviation_fraction_range;
        let n = rng.random_range(n_lo..=n_hi);
        let mut segments = Vec::with_capacity(n);
        for _ in 0..n {
            let actual = rng.random_range(s_lo..=s_hi);
            let scenario = match config.scenario_mode {
                ScenarioMode::Exact => Scenario::Exact,
                ScenarioMode::Under => Scenario::Under,
                ScenarioMode::Over => Scenario::Over,
                ScenarioMode::Mixed => [Scenario::Exact, Scenario::Under, Scenario::Over]
                    [rng.random_range(0..3)],
            };
            let frac = rng.random_range(f_lo..=f_hi);
            let planned = match scenario {
                Scenario::Exact => actual,
                Scenario::Under => actual - deviation_steps(frac, actual),
                Scenario::Over => actual + deviation_steps(frac, actual),
            };
            // Single-step segments cannot be underbooked.
            let scenario = Scenario::from_durations(planned as f64, actual as f64);
            segments.push(SegmentSpec { planned_steps: planned, actual_steps: actual, scenario });
        }
        let total: usize = segments.iter().map(|s| s.actual_steps).sum();
        if total > book.total_steps() {
            return Err(Error::Config(format!(
                "episode needs {total} steps, price book has {}",
                book.total_steps()
            )));
        }
        let book_offset = rng.random_range(0..=book.total_steps() - total);
        let (initial_mno, initial_price) = book.cheapest_at_step(book_offset);
        let plan = EpisodePlan { seed, book_offset, segments, initial_mno, initial_price };
        Self::from_plan(config, book, plan)
    }

    /// Start an episode from an explicit plan.
    pub fn from_plan(config: &EpisodeConfig, book: &'a PriceBook, plan: EpisodePlan) -> Result<Self> {
        config.validate()?;
        if plan.segments.is_empty() {
            return Err(Error::Config("episode plan has no segments".into()));
        }
        if plan.book_offset + plan.total_steps() > book.total_steps()
            || book.mno_count() != config.mno_count
        {
            return Err(Error::Config("episode plan does not fit the price book".into()));
        }
        for s in &plan.segments {
            if s.planned_steps == 0
                || s.actual_steps == 0
                || s.scenario != Scenario::from_durations(s.planned_steps as f64, s.actual_steps as f64)
            {
                return Err(Error::Config(format!("inconsistent segment spec {s:?}")));
            }
        }
        let (_, max_steps) = config.step_range()?;
        let n = plan.segments.len();
        let mut env = Environment {
            config: config.clone(),
            book,
            policy: config.policy()?,
            norm: RewardNorm::for_config(config, book.p_max())?,
            dt: config.minutes_per_step(),
            max_steps: max_steps.max(plan.segments.iter().map(|s| s.actual_steps).max().unwrap_or(1)),
            segment: 0,
            step_in_segment: 0,
            t: 0,
            blocks: VecDeque::new(),
            last_price: plan.initial_price,
            solved: false,
            unreserved: 0,
            ledgers: vec![Vec::new(); n],
            accumulated_cost: 0.0,
            done: false,
            stats: EpisodeStats { updates_per_segment: vec![0; n], ..EpisodeStats::default() },
            trace: None,
            plan,
        };
        env.enter_segment();
        Ok(env)
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    fn enter_segment(&mut self) {
        let spec = &self.plan.segments[self.segment];
        self.blocks.clear();
        self.blocks.push_back(Block {
            price: self.plan.initial_price,
            steps: spec.planned_steps,
            mno: self.plan.initial_mno,
        });
        self.last_price = self.plan.initial_price;
        self.step_in_segment = 0;
        self.solved = false;
        self.unreserved = 0;
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn plan(&self) -> &EpisodePlan {
        &self.plan
    }

    pub fn norm(&self) -> &RewardNorm {
        &self.norm
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn ledgers(&self) -> &[Vec<LedgerEntry<f64>>] {
        &self.ledgers
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn trace(&self) -> Option<&[TracePoint]> {
        self.trace.as_deref()
    }

    /// Running sum of per-step cost deltas.
    pub fn accumulated_cost(&self) -> f64 {
        self.accumulated_cost
    }

    pub fn segment_plans(&self) -> Vec<SegmentPlan<f64>> {
        self.plan.segment_plans(self.dt)
    }

    /// Ledger-based cost of the episode; only meaningful once done.
    pub fn breakdown(&self) -> Result<CostBreakdown<f64>> {
        episode_cost(&self.ledgers, &self.segment_plans())
    }

    fn column(&self) -> usize {
        self.plan.book_offset + self.t
    }

    fn spec(&self) -> &SegmentSpec {
        &self.plan.segments[self.segment]
    }

    fn observed_flag(&self) -> i8 {
        if self.solved {
            0
        } else {
            self.spec().scenario.flag()
        }
    }

    fn held_price(&self) -> f64 {
        self.blocks.front().map_or(self.last_price, |b| b.price)
    }

    fn scale(&self, p: f64) -> f64 {
        let (lo, hi) = (self.book.p_min(), self.book.p_max());
        if hi > lo {
            ((p - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    fn build_state(&self, col: usize, flag: i8, steps_to_handoff: usize, is_last: bool) -> State {
        let current: Vec<f64> = self.book.prices_at_step(col).collect();
        let next = if is_last { vec![self.book.p_min(); current.len()] } else { current.clone() };
        let reserved = self.held_price();
        let mut features = Vec::with_capacity(2 * current.len() + 3);
        features.push(self.scale(reserved));
        features.extend(current.iter().map(|&p| self.scale(p)));
        features.extend(next.iter().map(|&p| self.scale(p)));
        features.push(f64::from(flag));
        features.push((steps_to_handoff as f64 / self.max_steps as f64).min(1.0));
        State {
            reserved_price: reserved,
            current_prices: current,
            next_prices: next,
            booking_flag: flag,
            steps_to_handoff,
            features,
        }
    }

    pub fn observe(&self) -> Result<State> {
        if self.done {
            return Err(Error::Lifecycle("episode is finished".into()));
        }
        Ok(self.build_state(
            self.column(),
            self.observed_flag(),
            self.spec().actual_steps - self.step_in_segment,
            self.segment + 1 == self.plan.segments.len(),
        ))
    }

    pub fn legal_actions(&self) -> Result<ActionSet> {
        if self.done {
            return Err(Error::Lifecycle("episode is finished".into()));
        }
        Ok(ActionSet::for_flag(self.observed_flag()))
    }

    fn reserved_steps(&self) -> usize {
        self.blocks.iter().map(|b| b.steps).sum()
    }

    fn change_to_lowest(&mut self, col: usize) -> f64 {
        let (mno, price) = self.book.cheapest_at_step(col);
        let remaining = self.reserved_steps();
        let value: f64 = self.blocks.iter().map(|b| b.price * b.steps as f64).sum();
        let old = if remaining > 0 { value / remaining as f64 } else { self.held_price() };
        let duration = remaining as f64 * self.dt;
        let fee = cancellation_fee(&self.policy, old, duration).expect("non-negative duration");
        self.ledgers[self.segment].push(LedgerEntry {
            segment: self.segment,
            kind: EventKind::Update,
            timestep: self.t,
            old_unit_price: old,
            new_unit_price: price,
            affected_duration: duration,
            settled_duration: 0.0,
            fee,
        });
        self.blocks.clear();
        if remaining > 0 {
            self.blocks.push_back(Block { price, steps: remaining, mno });
        }
        self.last_price = price;
        self.stats.updates_per_segment[self.segment] += 1;
        let actual = self.spec().actual_steps as f64;
        self.stats.update_positions.push(self.step_in_segment as f64 / actual);
        fee
    }

    /// Buy the missing time at the cheapest current price and cancel the
    /// overlapping start of the next segment's reservation.
    fn solve_under(&mut self, col: usize) -> (f64, f64) {
        let (mno, price) = self.book.cheapest_at_step(col);
        let dev = self.spec().deviation_steps();
        let has_next = self.segment + 1 < self.plan.segments.len();
        let next_original = if has_next { self.plan.initial_price } else { 0.0 };
        let duration = dev as f64 * self.dt;
        let fee = cancellation_fee(&self.policy, next_original, duration).expect("non-negative");
        let settled_steps = self.unreserved.min(dev);
        let settled = settled_steps as f64 * self.dt;
        if dev > settled_steps {
            self.blocks.push_back(Block { price, steps: dev - settled_steps, mno });
        }
        if settled_steps > 0 {
            self.last_price = price;
        }
        self.ledgers[self.segment].push(LedgerEntry {
            segment: self.segment,
            kind: EventKind::SolveUnder,
            timestep: self.t,
            old_unit_price: next_original,
            new_unit_price: price,
            affected_duration: duration,
            settled_duration: settled,
            fee,
        });
        self.solved = true;
        (price * settled + fee, fee)
    }

    /// Cancel the unused tail here and re-reserve it at the next segment.
    fn solve_over(&mut self, col: usize) -> (f64, f64) {
        let dev = self.spec().deviation_steps();
        let mut to_cut = dev;
        let mut value = 0.0;
        while to_cut > 0 {
            let back = self.blocks.back_mut().expect("overbooked tail is still reserved");
            let take = back.steps.min(to_cut);
            value += back.price * take as f64;
            back.steps -= take;
            to_cut -= take;
            if back.steps == 0 {
                self.blocks.pop_back();
            }
        }
        let old = value / dev as f64;
        let duration = dev as f64 * self.dt;
        let fee = cancellation_fee(&self.policy, old, duration).expect("non-negative");
        let has_next = self.segment + 1 < self.plan.segments.len();
        let (next_price, settled) = if has_next {
            (self.book.cheapest_at_step(col).1, duration)
        } else {
            (0.0, 0.0)
        };
        self.ledgers[self.segment].push(LedgerEntry {
            segment: self.segment,
            kind: EventKind::SolveOver,
            timestep: self.t,
            old_unit_price: old,
            new_unit_price: next_price,
            affected_duration: duration,
            settled_duration: settled,
            fee,
        });
        self.solved = true;
        (next_price * settled + fee, fee)
    }

    fn consume_step(&mut self) -> f64 {
        let Some(front) = self.blocks.front_mut() else {
            self.unreserved += 1;
            return 0.0;
        };
        let price = front.price;
        front.steps -= 1;
        if front.steps == 0 {
            self.blocks.pop_front();
        }
        self.last_price = price;
        let ledger = &mut self.ledgers[self.segment];
        match ledger.last_mut() {
            Some(e)
                if e.kind == EventKind::Hold
                    && e.new_unit_price == price
                    && e.timestep + (e.affected_duration / self.dt).round() as usize == self.t =>
            {
                e.affected_duration += self.dt;
                e.settled_duration = e.affected_duration;
            }
            _ => ledger.push(LedgerEntry::hold(self.segment, self.t, price, self.dt)),
        }
        price * self.dt
    }

    pub fn step(&mut self, action: Action) -> Result<Transition> {
        let state = self.observe()?;
        let legal = state.legal_actions();
        let col = self.column();
        let segment = self.segment;
        let mut cost = 0.0;
        let mut fees = 0.0;
        let mut violation = None;

        if !legal.contains(action) {
            // Rejected outright: no time passes and nothing is booked.
            self.stats.illegal_actions += 1;
            return Ok(Transition {
                next_state: state.clone(),
                state,
                action,
                reward: -self.norm.penalty,
                done: false,
                info: StepInfo {
                    cost_delta: 0.0,
                    fees: 0.0,
                    violation: Some(Violation::IllegalAction),
                    segment,
                },
            });
        }
        match action {
            Action::DoNothing => {}
            Action::ChangeToLowestPriceMno => {
                let fee = self.change_to_lowest(col);
                cost += fee;
                fees += fee;
            }
            Action::SolveUnderbooking => {
                let (c, f) = self.solve_under(col);
                cost += c;
                fees += f;
            }
            Action::SolveOverbooking => {
                let (c, f) = self.solve_over(col);
                cost += c;
                fees += f;
            }
        }

        let paid = self.consume_step();
        cost += paid;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TracePoint {
                timestep: self.t,
                segment,
                paid_price: if paid > 0.0 { paid / self.dt } else { 0.0 },
                available: state.current_prices.clone(),
            });
        }
        self.step_in_segment += 1;
        self.t += 1;

        if self.step_in_segment == self.spec().actual_steps {
            if !self.solved {
                let forced = match self.spec().scenario {
                    Scenario::Exact => None,
                    Scenario::Under => Some(self.solve_under(col)),
                    Scenario::Over => Some(self.solve_over(col)),
                };
                if let Some((c, f)) = forced {
                    cost += c;
                    fees += f;
                    violation = Some(Violation::DeadlineMiss);
                    self.stats.deadline_misses += 1;
                }
            }
            debug_assert!(self.blocks.is_empty(), "reservation left at handoff");
            if self.segment + 1 == self.plan.segments.len() {
                self.done = true;
            } else {
                self.segment += 1;
                self.enter_segment();
            }
        }

        self.accumulated_cost += cost;
        let reward = reward_from_cost(cost, &self.norm, violation.is_some());
        let next_state = if self.done {
            self.build_state(col, 0, 0, true)
        } else {
            self.observe()?
        };
        Ok(Transition {
            state,
            action,
            reward,
            next_state,
            done: self.done,
            info: StepInfo { cost_delta: cost, fees, violation, segment },
        })
    }

    /// Everything that influences future costs, for memoized search.
    pub fn search_key(&self) -> SearchKey {
        SearchKey {
            t: self.t,
            done: self.done,
            solved: self.solved,
            unreserved: self.unreserved,
            last_price: self.last_price.to_bits(),
            blocks: self.blocks.iter().map(|b| (b.price.to_bits(), b.steps)).collect(),
        }
    }

    /// Event log: one JSON object per line, the plan first.
    pub fn event_log(&self) -> Result<String> {
        let mut out = serde_json::to_string(&PlanRecord {
            record: "plan",
            timestep_seconds: self.config.timestep_seconds,
            cancellation_rate: self.config.cancellation_rate,
            plan: &self.plan,
        })?;
        out.push('\n');
        for entry in self.ledgers.iter().flatten() {
            out.push_str(&serde_json::to_string(&EventRecord { record: "event", entry })?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SearchKey {
    t: usize,
    done: bool,
    solved: bool,
    unreserved: usize,
    last_price: u64,
    blocks: Vec<(u64, usize)>,
}

#[derive(Serialize)]
struct PlanRecord<'p> {
    record: &'static str,
    timestep_seconds: u32,
    cancellation_rate: f64,
    plan: &'p EpisodePlan,
}

#[derive(Serialize)]
struct EventRecord<'e> {
    record: &'static str,
    #[serde(flatten)]
    entry: &'e LedgerEntry<f64>,
}

/// Parse an event log back into its plan and ledger entries.
pub fn read_event_log(text: &str) -> Result<(EpisodePlan, Vec<LedgerEntry<f64>>)> {
    #[derive(Deserialize)]
    struct PlanIn {
        plan: EpisodePlan,
    }
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| Error::Serde("empty event log".into()))?;
    let plan = serde_json::from_str::<PlanIn>(first)?.plan;
    let mut entries = Vec::new();
    for l in lines {
        let mut v: serde_json::Value = serde_json::from_str(l)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("record");
        }
        entries.push(serde_json::from_value(v)?);
    }
    Ok((plan, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: ScenarioMode) -> EpisodeConfig {
        EpisodeConfig { scenario_mode: mode, ..EpisodeConfig::default() }
    }

    fn two_mno_book(p0: f64, p1: f64, steps: usize) -> PriceBook {
        PriceBook::from_rows(vec![vec![p0; steps], vec![p1; steps]], vec![steps]).unwrap()
    }

    fn rel_eq(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn exact_mode_flags_are_zero() {
        let book = two_mno_book(1.0, 2.0, 800);
        let c = EpisodeConfig { mno_count: 2, ..cfg(ScenarioMode::Exact) };
        let (env, s) = new_episode(&c, &book, 7).unwrap();
        assert!(env.plan().segments.iter().all(|s| s.scenario == Scenario::Exact));
        assert_eq!(s.booking_flag, 0);
        assert_eq!(s.steps_to_handoff, env.plan().segments[0].actual_steps);
        assert_eq!(env.plan().initial_mno, 0);
        assert_eq!(s.reserved_price, 1.0);
    }

    #[test]
    fn cheapest_operator_gets_initial_reservation() {
        let book = two_mno_book(2.0, 1.0, 800);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let (env, _) = new_episode(&c, &book, 1).unwrap();
        assert_eq!(env.plan().initial_mno, 1);
        assert_eq!(env.plan().initial_price, 1.0);
    }

    #[test]
    fn fixed_seed_same_plan() {
        let book = two_mno_book(2.0, 1.0, 800);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let a = Environment::new(&c, &book, 99).unwrap();
        let b = Environment::new(&c, &book, 99).unwrap();
        assert_eq!(a.plan(), b.plan());
    }

    #[test]
    fn book_too_short_or_mismatched() {
        let book = two_mno_book(2.0, 1.0, 30);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        assert!(matches!(Environment::new(&c, &book, 0), Err(Error::Config(_))));
        let book = two_mno_book(2.0, 1.0, 800);
        assert!(matches!(Environment::new(&EpisodeConfig::default(), &book, 0), Err(Error::Config(_))));
    }

    #[test]
    fn legal_sets() {
        let exact = ActionSet::for_flag(0);
        assert_eq!(exact.len(), 2);
        assert!(exact.contains(Action::DoNothing) && exact.contains(Action::ChangeToLowestPriceMno));
        assert!(ActionSet::for_flag(-1).contains(Action::SolveUnderbooking));
        assert!(!ActionSet::for_flag(-1).contains(Action::SolveOverbooking));
        assert!(ActionSet::for_flag(1).contains(Action::SolveOverbooking));
    }

    fn single_segment(planned: usize, actual: usize) -> EpisodePlan {
        EpisodePlan {
            seed: 0,
            book_offset: 0,
            segments: vec![SegmentSpec {
                planned_steps: planned,
                actual_steps: actual,
                scenario: Scenario::from_durations(planned as f64, actual as f64),
            }],
            initial_mno: 0,
            initial_price: 2.0,
        }
    }

    #[test]
    fn do_nothing_pays_one_step() {
        let book = two_mno_book(2.0, 3.0, 100);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let mut env = Environment::from_plan(&c, &book, single_segment(20, 20)).unwrap();
        let tr = env.step(Action::DoNothing).unwrap();
        assert_eq!(tr.info.cost_delta, 1.0);
        assert_eq!(env.ledgers()[0].len(), 1);
        assert!(tr.info.violation.is_none());
    }

    #[test]
    fn change_books_fee_and_new_price() {
        // 20 steps; operator 1 drops to 1.0 from step 8.
        let mut r1 = vec![3.0; 20];
        r1[8..].fill(1.0);
        let book = PriceBook::from_rows(vec![vec![2.0; 20], r1], vec![20]).unwrap();
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let mut env = Environment::from_plan(&c, &book, single_segment(20, 20)).unwrap();
        for _ in 0..8 {
            env.step(Action::DoNothing).unwrap();
        }
        let tr = env.step(Action::ChangeToLowestPriceMno).unwrap();
        assert!(rel_eq(tr.info.fees, 1.44));
        assert!(rel_eq(tr.info.cost_delta, 1.44 + 0.5));
        assert_eq!(tr.next_state.reserved_price, 1.0);
        while !env.is_done() {
            env.step(Action::DoNothing).unwrap();
        }
        assert!(rel_eq(env.breakdown().unwrap().total, 15.44));
        assert!(rel_eq(env.accumulated_cost(), 15.44));
    }

    #[test]
    fn second_solve_is_illegal() {
        let book = two_mno_book(2.0, 3.0, 100);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let mut env = Environment::from_plan(&c, &book, single_segment(16, 20)).unwrap();
        let s = env.observe().unwrap();
        assert_eq!(s.booking_flag, -1);
        let first = env.step(Action::SolveUnderbooking).unwrap();
        assert!(first.info.violation.is_none());
        assert!(!env.legal_actions().unwrap().contains(Action::SolveUnderbooking));
        let before = env.ledgers()[0].len();
        let second = env.step(Action::SolveUnderbooking).unwrap();
        assert_eq!(second.info.violation, Some(Violation::IllegalAction));
        assert_eq!(second.reward, -c.penalty_magnitude);
        assert_eq!(second.next_state, second.state);
        assert_eq!(env.ledgers()[0].len(), before);
    }

    #[test]
    fn deadline_miss_forces_solve() {
        let book = two_mno_book(2.0, 3.0, 100);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let mut env = Environment::from_plan(&c, &book, single_segment(24, 20)).unwrap();
        let mut last = None;
        while !env.is_done() {
            last = Some(env.step(Action::DoNothing).unwrap());
        }
        let last = last.unwrap();
        assert_eq!(last.info.violation, Some(Violation::DeadlineMiss));
        assert!(last.reward < -c.penalty_magnitude + 1e-12);
        assert_eq!(env.stats().deadline_misses, 1);
        // 10 min held, 2 min tail cancelled at 2.0, no next segment.
        let b = env.breakdown().unwrap();
        assert!(rel_eq(b.total, 20.0 + 0.12 * 2.0 * 2.0));
    }

    #[test]
    fn underbooked_late_solve_backfills() {
        let book = two_mno_book(2.0, 1.5, 100);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let plan = EpisodePlan { initial_mno: 0, initial_price: 2.0, ..single_segment(16, 20) };
        let mut env = Environment::from_plan(&c, &book, plan).unwrap();
        for _ in 0..18 {
            env.step(Action::DoNothing).unwrap();
        }
        env.step(Action::SolveUnderbooking).unwrap();
        env.step(Action::DoNothing).unwrap();
        assert!(env.is_done());
        let b = env.breakdown().unwrap();
        // 8 min at 2.0, 2 extra min at 1.5, final segment so no next fee.
        assert!(rel_eq(b.total, 16.0 + 3.0));
        assert!(rel_eq(env.accumulated_cost(), b.total));
    }

    #[test]
    fn reward_endpoints() {
        let norm = RewardNorm { c_min: 0.0, c_max: 8.0, penalty: 10.0 };
        assert_eq!(reward_from_cost(0.0, &norm, false), 0.0);
        assert_eq!(reward_from_cost(8.0, &norm, false), -1.0);
        assert_eq!(reward_from_cost(4.0, &norm, true), -0.5 - 10.0);
        assert!(reward_from_cost(1.0, &norm, false) > reward_from_cost(1.5, &norm, false));
    }

    #[test]
    fn normalized_price_endpoints() {
        let book = PriceBook::from_rows(vec![vec![1.0; 50], vec![3.0; 50]], vec![50]).unwrap();
        let c = EpisodeConfig { mno_count: 2, segment_count_range: (1, 1), ..cfg(ScenarioMode::Exact) };
        let plan = EpisodePlan { initial_mno: 1, initial_price: 3.0, ..single_segment(20, 20) };
        let env = Environment::from_plan(&c, &book, plan).unwrap();
        let s = env.observe().unwrap();
        assert_eq!(s.features.len(), 2 * 2 + 3);
        assert_eq!(s.features[0], 1.0);
        assert_eq!(&s.features[1..3], &[0.0, 1.0]);
        // final segment: next prices are the p_min sentinel
        assert_eq!(&s.features[3..5], &[0.0, 0.0]);
        assert_eq!(s.next_prices, vec![1.0, 1.0]);
    }

    #[test]
    fn stepping_done_episode_fails() {
        let book = two_mno_book(2.0, 3.0, 100);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let mut env = Environment::from_plan(&c, &book, single_segment(20, 20)).unwrap();
        while !env.is_done() {
            env.step(Action::DoNothing).unwrap();
        }
        assert!(matches!(env.step(Action::DoNothing), Err(Error::Lifecycle(_))));
        assert!(matches!(env.observe(), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn event_log_round_trip() {
        let book = two_mno_book(2.0, 1.0, 800);
        let c = EpisodeConfig { mno_count: 2, ..EpisodeConfig::default() };
        let mut env = Environment::new(&c, &book, 4).unwrap();
        let mut k = 0;
        while !env.is_done() {
            let a = if k % 7 == 3 { Action::ChangeToLowestPriceMno } else { Action::DoNothing };
            env.step(a).unwrap();
            k += 1;
        }
        let log = env.event_log().unwrap();
        let (plan, entries) = read_event_log(&log).unwrap();
        assert_eq!(&plan, env.plan());
        let flat: Vec<_> = env.ledgers().iter().flatten().cloned().collect();
        assert_eq!(entries, flat);
    }
}

//! Training loop, paired evaluation, exhaustive oracle and benchmark tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    act_epsilon_greedy, act_greedy, act_no_policy, build_targets, encode, masked_argmax, AgentKind,
    ExplorationSchedule, NStepBuilder, ReplayBuffer, TargetRule, TargetVariant, Window,
};
use crate::environment::{
    Action, EpisodeConfig, EpisodePlan, EpisodeStats, Environment, ScenarioMode, SearchKey, TracePoint,
};
use crate::error::{Error, Result};
use crate::price_data::PriceBook;
use crate::qnet::{adam_step, init_network, soft_update, AdamState, Minibatch, NetworkSpec, QNetwork};
use crate::scalar::Scalar;

/// Moving-average window for learning curves.
pub const CURVE_WINDOW: usize = 20;
/// Bins over the relative position of a price switch within its segment.
pub const POSITION_BINS: usize = 10;

const STREAM_TRAIN_EPISODES: u64 = 1;
const STREAM_EVAL_EPISODES: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_EXPLORE: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for `(stream, index)` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

pub fn evaluation_seed(base: u64, episode: usize) -> u64 {
    derive_seed(base, STREAM_EVAL_EPISODES, episode as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainCadence {
    /// Gradient steps after each finished episode.
    PerEpisode,
    /// One gradient step every `train_every` environment steps.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    /// Gradient steps between soft target updates.
    pub target_update_every: usize,
    pub tau: f64,
    pub train_cadence: TrainCadence,
    /// Gradient steps per finished episode under `per_episode`.
    pub updates_per_episode: usize,
    /// Environment steps per gradient step under `per_step`.
    pub train_every: usize,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            episodes_per_epoch: 10,
            batch_size: 128,
            target_update_every: 300,
            tau: 0.01,
            train_cadence: TrainCadence::PerEpisode,
            updates_per_episode: 1,
            train_every: 1,
            early_stop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_epoch == 0
            || self.batch_size == 0
            || self.target_update_every == 0
            || self.updates_per_episode == 0
            || self.train_every == 0
        {
            return Err(Error::Config("training counts must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }
}

/// Learner hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSpec {
    pub agent: AgentKind,
    /// Rule used by `double_dqn`; the other learners bootstrap from the target maximum.
    pub target_variant: TargetVariant,
    pub gamma: f64,
    pub n_step: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training episodes over which epsilon decays.
    pub epsilon_decay_fraction: f64,
    pub buffer_capacity: usize,
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self {
            agent: AgentKind::DoubleDqn,
            target_variant: TargetVariant::DoublePaper,
            gamma: 0.99,
            n_step: 3,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            buffer_capacity: 20_000,
            hidden_layers: vec![128; 4],
            learning_rate: 1e-3,
            weight_decay: 1e-6,
        }
    }
}

impl AgentSpec {
    pub fn for_agent(agent: AgentKind) -> Self {
        Self { agent, ..Self::default() }
    }

    pub fn network_spec(&self, mno_count: usize) -> Result<NetworkSpec> {
        NetworkSpec::new(
            2 * mno_count + 3,
            self.hidden_layers.clone(),
            crate::environment::ACTION_COUNT,
            self.agent.head(),
        )
    }

    pub fn target_rule(&self) -> TargetRule {
        TargetRule { variant: self.agent.target_variant(self.target_variant), gamma: self.gamma, n_step: self.n_step }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub reward_ma: Vec<f64>,
    pub cost_ma: Vec<f64>,
}

fn trailing_mean(xs: &[f64], window: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

impl LearningCurve {
    pub fn push(&mut self, reward: f64, cost: f64) {
        self.rewards.push(reward);
        self.costs.push(cost);
        self.reward_ma.push(trailing_mean(&self.rewards, CURVE_WINDOW));
        self.cost_ma.push(trailing_mean(&self.costs, CURVE_WINDOW));
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,reward,cost,reward_ma20,cost_ma20\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                i, self.rewards[i], self.costs[i], self.reward_ma[i], self.cost_ma[i]
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub online: QNetwork<S>,
    pub target: QNetwork<S>,
    pub optimizer: AdamState<S>,
    pub curve: LearningCurve,
    pub gradient_steps: usize,
    pub stopped_early: bool,
}

struct Learner<S> {
    online: QNetwork<S>,
    target: QNetwork<S>,
    optimizer: AdamState<S>,
    buffer: ReplayBuffer<Window<S>>,
    rule: TargetRule,
    batch_size: usize,
    target_update_every: usize,
    tau: S,
    steps: usize,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Learner<S> {
    fn gradient_step(&mut self) -> Result<()> {
        if self.buffer.len() < self.batch_size {
            return Ok(());
        }
        let batch = self.buffer.sample(self.batch_size, &mut self.rng)?;
        let targets = build_targets(&self.rule, &batch, &self.online, &self.target)?;
        let width = self.online.spec().input_width;
        let mut states = Vec::with_capacity(batch.len() * width);
        for w in &batch {
            states.extend_from_slice(&w.state);
        }
        let mb = Minibatch { states, actions: batch.iter().map(|w| w.action).collect(), targets };
        let grads = self.online.td_grad(&mb)?;
        if !grads.loss.is_finite() {
            return Err(Error::Numeric(format!("TD loss diverged at gradient step {}", self.steps)));
        }
        adam_step(&mut self.online, &grads, &mut self.optimizer)?;
        self.steps += 1;
        if self.steps % self.target_update_every == 0 {
            soft_update(&mut self.target, &self.online, self.tau)?;
        }
        Ok(())
    }
}

/// Train one Q-learning agent.
pub fn train<S: Scalar>(
    tc: &TrainConfig,
    ec: &EpisodeConfig,
    book: &PriceBook,
    spec: &AgentSpec,
) -> Result<TrainOutcome<S>> {
    tc.validate()?;
    ec.validate()?;
    if !spec.agent.is_learned() {
        return Err(Error::Config(format!("`{}` has nothing to train", spec.agent)));
    }
    let rule = spec.target_rule();
    rule.validate()?;
    let total = tc.total_episodes();
    let schedule =
        ExplorationSchedule::over_fraction(spec.epsilon_start, spec.epsilon_end, spec.epsilon_decay_fraction, total)?;
    let online: QNetwork<S> =
        init_network(&spec.network_spec(ec.mno_count)?, derive_seed(tc.seed, STREAM_INIT, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, STREAM_EXPLORE, 0));
    let mut learner = Learner {
        target: online.clone(),
        optimizer: AdamState::new(&online, spec.learning_rate, spec.weight_decay),
        online,
        buffer: ReplayBuffer::new(spec.buffer_capacity)?,
        rule,
        batch_size: tc.batch_size,
        target_update_every: tc.target_update_every,
        tau: S::of(tc.tau),
        steps: 0,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, STREAM_EXPLORE, 1)),
    };
    let mut curve = LearningCurve::default();
    let mut windows = Vec::new();
    let mut best_ma = f64::NEG_INFINITY;
    let mut stale_epochs = 0;
    let mut stopped_early = false;

    'epochs: for epoch in 0..tc.epochs {
        for k in 0..tc.episodes_per_epoch {
            let episode = epoch * tc.episodes_per_epoch + k;
            let epsilon = schedule.epsilon(episode);
            let mut env = Environment::new(ec, book, derive_seed(tc.seed, STREAM_TRAIN_EPISODES, episode as u64))?;
            let mut builder = NStepBuilder::new(rule.n_step);
            let mut state = env.observe()?;
            let mut ret = 0.0;
            let mut t = 0usize;
            loop {
                let action = act_epsilon_greedy(&learner.online, &state, epsilon, &mut rng)?;
                let tr = env.step(action)?;
                ret += tr.reward;
                builder.push(&tr.state, action, tr.reward, &tr.next_state, tr.done, &mut windows);
                for w in windows.drain(..) {
                    learner.buffer.push(w);
                }
                t += 1;
                if tc.train_cadence == TrainCadence::PerStep && t % tc.train_every == 0 {
                    learner.gradient_step()?;
                }
                if tr.done {
                    break;
                }
                state = tr.next_state;
            }
            if tc.train_cadence == TrainCadence::PerEpisode {
                for _ in 0..tc.updates_per_episode {
                    learner.gradient_step()?;
                }
            }
            curve.push(ret, env.breakdown()?.total);
        }
        if let Some(es) = tc.early_stop {
            let ma = *curve.reward_ma.last().expect("epoch ran episodes");
            if ma > best_ma {
                best_ma = ma;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= es.patience_epochs {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if total > 0 && learner.steps == 0 {
        return Err(Error::Training(format!(
            "replay buffer held {} windows, never reaching batch size {}",
            learner.buffer.len(),
            tc.batch_size
        )));
    }
    Ok(TrainOutcome {
        online: learner.online,
        target: learner.target,
        optimizer: learner.optimizer,
        curve,
        gradient_steps: learner.steps,
        stopped_early,
    })
}

/// A policy under evaluation; Q-policies act greedily.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a, S> {
    NoPolicy,
    Greedy,
    Q { name: &'a str, net: &'a QNetwork<S> },
}

impl<S: Scalar> Policy<'_, S> {
    pub fn name(&self) -> &str {
        match self {
            Policy::NoPolicy => AgentKind::NoPolicy.name(),
            Policy::Greedy => AgentKind::Greedy.name(),
            Policy::Q { name, .. } => name,
        }
    }

    pub fn act(&self, state: &crate::environment::State) -> Result<Action> {
        match self {
            Policy::NoPolicy => Ok(act_no_policy(state)),
            Policy::Greedy => Ok(act_greedy(state)),
            Policy::Q { net, .. } => {
                let q = net.forward(&encode::<S>(state))?;
                Ok(masked_argmax(&q, state.legal_actions()))
            }
        }
    }
}

/// Result of running one policy through one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub cost: f64,
    pub bandwidth: f64,
    pub cancellation: f64,
    pub reward: f64,
    pub segments: usize,
    pub stats: EpisodeStats,
    pub trace: Option<Vec<TracePoint>>,
}

/// Hard cap on steps per rollout, far above any valid episode length.
const ROLLOUT_STEP_LIMIT: usize = 1_000_000;

pub fn run_episode<S: Scalar>(
    policy: &Policy<'_, S>,
    ec: &EpisodeConfig,
    book: &PriceBook,
    seed: u64,
    record_trace: bool,
) -> Result<EpisodeOutcome> {
    let mut env = Environment::new(ec, book, seed)?;
    if record_trace {
        env = env.with_trace();
    }
    let mut reward = 0.0;
    for _ in 0..ROLLOUT_STEP_LIMIT {
        let s = env.observe()?;
        let tr = env.step(policy.act(&s)?)?;
        reward += tr.reward;
        if tr.done {
            let b = env.breakdown()?;
            return Ok(EpisodeOutcome {
                cost: b.total,
                bandwidth: b.bandwidth_paid,
                cancellation: b.cancellation_paid,
                reward,
                segments: env.plan().segments.len(),
                stats: env.stats().clone(),
                trace: env.trace().map(<[_]>::to_vec),
            });
        }
    }
    Err(Error::Lifecycle(format!("policy `{}` did not finish an episode", policy.name())))
}

/// Per-policy evaluation results over paired episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub policy: String,
    pub costs: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub cancellation: Vec<f64>,
    pub rewards: Vec<f64>,
    pub segments: usize,
    pub updates: usize,
    pub deadline_misses: usize,
    pub illegal_actions: usize,
    /// Counts of switch positions within a segment, `POSITION_BINS` bins on `[0, 1]`.
    pub update_position_hist: Vec<usize>,
    /// `update_count_hist[k]` segments saw `k` switches; the last bin collects the rest.
    pub update_count_hist: Vec<usize>,
    /// Paid-price trace of the first episode.
    pub trace: Vec<TracePoint>,
}

const COUNT_BINS: usize = 11;

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl PolicyEval {
    fn new(policy: &str) -> Self {
        Self {
            policy: policy.to_string(),
            costs: Vec::new(),
            bandwidth: Vec::new(),
            cancellation: Vec::new(),
            rewards: Vec::new(),
            segments: 0,
            updates: 0,
            deadline_misses: 0,
            illegal_actions: 0,
            update_position_hist: vec![0; POSITION_BINS],
            update_count_hist: vec![0; COUNT_BINS],
            trace: Vec::new(),
        }
    }

    fn absorb(&mut self, o: EpisodeOutcome) {
        self.costs.push(o.cost);
        self.bandwidth.push(o.bandwidth);
        self.cancellation.push(o.cancellation);
        self.rewards.push(o.reward);
        self.segments += o.segments;
        self.deadline_misses += o.stats.deadline_misses;
        self.illegal_actions += o.stats.illegal_actions;
        for &n in &o.stats.updates_per_segment {
            self.updates += n;
            self.update_count_hist[n.min(COUNT_BINS - 1)] += 1;
        }
        for &p in &o.stats.update_positions {
            let bin = ((p * POSITION_BINS as f64) as usize).min(POSITION_BINS - 1);
            self.update_position_hist[bin] += 1;
        }
        if let Some(tr) = o.trace {
            self.trace = tr;
        }
    }

    pub fn mean_cost(&self) -> f64 {
        mean(&self.costs)
    }

    pub fn mean_bandwidth(&self) -> f64 {
        mean(&self.bandwidth)
    }

    pub fn mean_cancellation(&self) -> f64 {
        mean(&self.cancellation)
    }

    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }

    pub fn updates_per_segment(&self) -> f64 {
        if self.segments == 0 {
            0.0
        } else {
            self.updates as f64 / self.segments as f64
        }
    }

    pub fn cumulative_costs(&self) -> Vec<f64> {
        self.costs
            .iter()
            .scan(0.0, |acc, &c| {
                *acc += c;
                Some(*acc)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: ScenarioMode,
    pub episodes: usize,
    pub seed: u64,
    pub policies: Vec<PolicyEval>,
}

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyEval> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        for p in &self.policies {
            summary_row(&mut out, p, self.scenario, self.episodes);
        }
        out
    }

    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("scenario,policy,episode,cost,bandwidth,cancellation,reward,cumulative_cost\n");
        for p in &self.policies {
            for (i, c) in p.cumulative_costs().iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    self.scenario, p.policy, i, p.costs[i], p.bandwidth[i], p.cancellation[i], p.rewards[i], c
                );
            }
        }
        out
    }

    pub fn histograms_csv(&self) -> String {
        let mut out = String::from("scenario,policy,histogram,bin,lower,upper,count\n");
        for p in &self.policies {
            for (b, n) in p.update_position_hist.iter().enumerate() {
                let (lo, hi) = (b as f64 / POSITION_BINS as f64, (b + 1) as f64 / POSITION_BINS as f64);
                let _ = writeln!(out, "{},{},update_position,{b},{lo},{hi},{n}", self.scenario, p.policy);
            }
            for (b, n) in p.update_count_hist.iter().enumerate() {
                let _ = writeln!(out, "{},{},updates_per_segment,{b},{b},{},{n}", self.scenario, p.policy, b + 1);
            }
        }
        out
    }

    pub fn traces_csv(&self) -> String {
        let m = self.policies.iter().find_map(|p| p.trace.first()).map_or(0, |t| t.available.len());
        let mut out = String::from("scenario,policy,timestep,segment,paid_price");
        for j in 0..m {
            let _ = write!(out, ",mno_{j}");
        }
        out.push('\n');
        for p in &self.policies {
            for t in &p.trace {
                let _ = write!(out, "{},{},{},{},{}", self.scenario, p.policy, t.timestep, t.segment, t.paid_price);
                for a in &t.available {
                    let _ = write!(out, ",{a}");
                }
                out.push('\n');
            }
        }
        out
    }
}

pub const SUMMARY_HEADER: &str = "policy,scenario,episodes,mean_cost,mean_bandwidth,mean_cancellation,\
updates_per_segment,deadline_misses,illegal_actions\n";

fn summary_row(out: &mut String, p: &PolicyEval, scenario: ScenarioMode, episodes: usize) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{}",
        p.policy,
        scenario,
        episodes,
        p.mean_cost(),
        p.mean_bandwidth(),
        p.mean_cancellation(),
        p.updates_per_segment(),
        p.deadline_misses,
        p.illegal_actions
    );
}

/// Run every policy on the same `episodes` realizations.
///
/// Episodes are split across up to `threads` workers; results are identical
/// for any thread count.
pub fn evaluate<S: Scalar>(
    policies: &[Policy<'_, S>],
    episodes: usize,
    ec: &EpisodeConfig,
    book: &PriceBook,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    ec.validate()?;
    let threads = threads.clamp(1, episodes.max(1));
    let mut out: Vec<PolicyEval> = policies.iter().map(|p| PolicyEval::new(p.name())).collect();
    let run = |range: std::ops::Range<usize>| -> Result<Vec<Vec<EpisodeOutcome>>> {
        range
            .map(|i| {
                policies
                    .iter()
                    .map(|p| run_episode(p, ec, book, evaluation_seed(seed, i), i == 0))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    };
    let chunk = episodes.div_ceil(threads);
    let results: Vec<Vec<EpisodeOutcome>> = if threads == 1 {
        run(0..episodes)?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let lo = (w * chunk).min(episodes);
                    let hi = ((w + 1) * chunk).min(episodes);
                    scope.spawn(move || run(lo..hi))
                })
                .collect();
            let mut all = Vec::with_capacity(episodes);
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    for per_policy in results {
        for (eval, o) in out.iter_mut().zip(per_policy) {
            eval.absorb(o);
        }
    }
    Ok(EvalReport { scenario: ec.scenario_mode, episodes, seed, policies: out })
}

/// Largest instance the oracle accepts.
pub const ORACLE_MAX_SEGMENTS: usize = 2;
pub const ORACLE_MAX_SEGMENT_STEPS: usize = 12;
pub const ORACLE_MAX_MNOS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub cost: f64,
    pub schedule: Vec<Action>,
    pub plan: EpisodePlan,
    /// Distinct environment states visited by the search.
    pub states_explored: usize,
}

/// Cheapest legal action schedule for the episode drawn from `seed`.
///
/// Exhaustive over all legal per-step choices. States that agree on
/// everything affecting future cost share one subtree evaluation.
pub fn brute_force_oracle(ec: &EpisodeConfig, book: &PriceBook, seed: u64) -> Result<OracleResult> {
    let env = Environment::new(ec, book, seed)?;
    let plan = env.plan().clone();
    let longest = plan.segments.iter().map(|s| s.actual_steps).max().unwrap_or(0);
    if plan.segments.len() > ORACLE_MAX_SEGMENTS || longest > ORACLE_MAX_SEGMENT_STEPS || ec.mno_count > ORACLE_MAX_MNOS
    {
        let steps = plan.total_steps();
        return Err(Error::SearchTooLarge(format!(
            "{} segments, up to {} steps per segment, {} operators: about 3^{} = {:.3e} schedules; \
             the bound is N <= {}, <= {} steps per segment, M <= {}",
            plan.segments.len(),
            longest,
            ec.mno_count,
            steps,
            3f64.powi(steps as i32),
            ORACLE_MAX_SEGMENTS,
            ORACLE_MAX_SEGMENT_STEPS,
            ORACLE_MAX_MNOS
        )));
    }
    let mut memo: HashMap<SearchKey, (f64, Action)> = HashMap::new();
    search(&env, &mut memo)?;
    let mut replay = env;
    let mut schedule = Vec::new();
    while !replay.is_done() {
        let a = memo[&replay.search_key()].1;
        schedule.push(a);
        replay.step(a)?;
    }
    Ok(OracleResult { cost: replay.breakdown()?.total, schedule, plan, states_explored: memo.len() })
}

fn search(env: &Environment<'_>, memo: &mut HashMap<SearchKey, (f64, Action)>) -> Result<f64> {
    if env.is_done() {
        return Ok(0.0);
    }
    let key = env.search_key();
    if let Some(&(v, _)) = memo.get(&key) {
        return Ok(v);
    }
    let mut best: Option<(f64, Action)> = None;
    for a in env.legal_actions()?.iter() {
        let mut child = env.clone();
        let tr = child.step(a)?;
        let v = tr.info.cost_delta + search(&child, memo)?;
        let better = match best {
            None => true,
            Some((b, _)) => v < b - 1e-12 * b.abs().max(1.0),
        };
        if better {
            best = Some((v, a));
        }
    }
    let best = best.expect("do_nothing is always legal");
    memo.insert(key, best);
    Ok(best.0)
}

/// Inputs for the cross-scenario comparison.
pub struct BenchmarkBundle<'a, S> {
    pub episode: EpisodeConfig,
    pub book: &'a PriceBook,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub threads: usize,
    /// Trained policies, in table order after the baselines.
    pub networks: Vec<(String, &'a QNetwork<S>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub scenario: ScenarioMode,
    pub episodes: usize,
    pub mean_cost: f64,
    pub mean_bandwidth: f64,
    pub mean_cancellation: f64,
    pub updates_per_segment: f64,
    pub deadline_misses: usize,
    pub illegal_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub rows: Vec<SummaryRow>,
}

impl BenchmarkSummary {
    pub fn row(&self, policy: &str, scenario: ScenarioMode) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.policy == policy && r.scenario == scenario)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.policy,
                r.scenario,
                r.episodes,
                r.mean_cost,
                r.mean_bandwidth,
                r.mean_cancellation,
                r.updates_per_segment,
                r.deadline_misses,
                r.illegal_actions
            );
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = ["policy", "scenario", "episodes", "mean_cost", "bandwidth", "cancellation", "upd/seg", "misses", "illegal"];
        let cells: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.policy.clone(),
                    r.scenario.to_string(),
                    r.episodes.to_string(),
                    format!("{:.4}", r.mean_cost),
                    format!("{:.4}", r.mean_bandwidth),
                    format!("{:.4}", r.mean_cancellation),
                    format!("{:.3}", r.updates_per_segment),
                    r.deadline_misses.to_string(),
                    r.illegal_actions.to_string(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, &header);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// Evaluate the baselines and every supplied network in all four scenario modes.
pub fn reproduce_benchmarks<S: Scalar>(bundle: &BenchmarkBundle<'_, S>) -> Result<(Vec<EvalReport>, BenchmarkSummary)> {
    let mut policies: Vec<Policy<'_, S>> = vec![Policy::NoPolicy, Policy::Greedy];
    policies.extend(bundle.networks.iter().map(|(name, net)| Policy::Q { name: name.as_str(), net }));
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for mode in ScenarioMode::ALL {
        let ec = EpisodeConfig { scenario_mode: mode, ..bundle.episode.clone() };
        let report = evaluate(&policies, bundle.eval_episodes, &ec, bundle.book, bundle.eval_seed, bundle.threads)?;
        for p in &report.policies {
            rows.push(SummaryRow {
                policy: p.policy.clone(),
                scenario: mode,
                episodes: report.episodes,
                mean_cost: p.mean_cost(),
                mean_bandwidth: p.mean_bandwidth(),
                mean_cancellation: p.mean_cancellation(),
                updates_per_segment: p.updates_per_segment(),
                deadline_misses: p.deadline_misses,
                illegal_actions: p.illegal_actions,
            });
        }
        reports.push(report);
    }
    Ok((reports, BenchmarkSummary { rows }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::price_data::PriceBook;

    fn flat_book(m: usize, steps: usize) -> PriceBook {
        let rows = (0..m).map(|j| vec![1.0 + j as f64; steps]).collect();
        PriceBook::from_rows(rows, vec![steps]).unwrap()
    }

    fn small_ec(mode: ScenarioMode, m: usize) -> EpisodeConfig {
        EpisodeConfig {
            segment_count_range: (1, 2),
            segment_minutes_range: (2.5, 6.0),
            mno_count: m,
            scenario_mode: mode,
            ..EpisodeConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig { epochs: 3, episodes_per_epoch: 4, batch_size: 8, seed: 5, ..TrainConfig::default() }
    }

    fn tiny_agent(agent: AgentKind) -> AgentSpec {
        AgentSpec { hidden_layers: vec![16, 16], buffer_capacity: 500, ..AgentSpec::for_agent(agent) }
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let book = flat_book(2, 200);
        let ec = small_ec(ScenarioMode::Exact, 2);
        let tc = TrainConfig { epochs: 0, ..tiny_train() };
        let out = train::<f64>(&tc, &ec, &book, &tiny_agent(AgentKind::DoubleDqn)).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.gradient_steps, 0);
        let init: QNetwork<f64> =
            init_network(&tiny_agent(AgentKind::DoubleDqn).network_spec(2).unwrap(), derive_seed(5, STREAM_INIT, 0))
                .unwrap();
        assert_eq!(out.online, init);
    }

    #[test]
    fn training_is_deterministic() {
        let book = flat_book(2, 200);
        let ec = small_ec(ScenarioMode::Mixed, 2);
        let a = train::<f64>(&tiny_train(), &ec, &book, &tiny_agent(AgentKind::DuelingDqn)).unwrap();
        let b = train::<f64>(&tiny_train(), &ec, &book, &tiny_agent(AgentKind::DuelingDqn)).unwrap();
        assert_eq!(a.curve.to_csv(), b.curve.to_csv());
        assert_eq!(a.online, b.online);
        assert!(a.gradient_steps > 0);
    }

    #[test]
    fn buffer_never_filled_is_diagnosed() {
        let book = flat_book(2, 200);
        let ec = small_ec(ScenarioMode::Exact, 2);
        let tc = TrainConfig { epochs: 1, episodes_per_epoch: 1, batch_size: 10_000, ..tiny_train() };
        assert!(matches!(train::<f64>(&tc, &ec, &book, &tiny_agent(AgentKind::Dqn)), Err(Error::Training(_))));
    }

    #[test]
    fn baselines_are_not_trainable() {
        let book = flat_book(2, 200);
        let ec = small_ec(ScenarioMode::Exact, 2);
        assert!(train::<f64>(&tiny_train(), &ec, &book, &tiny_agent(AgentKind::Greedy)).is_err());
    }

    #[test]
    fn no_policy_exact_closed_form() {
        let book = flat_book(3, 500);
        let ec = EpisodeConfig { mno_count: 3, scenario_mode: ScenarioMode::Exact, ..EpisodeConfig::default() };
        let report = evaluate::<f64>(&[Policy::NoPolicy], 20, &ec, &book, 1, 1).unwrap();
        for i in 0..20 {
            let env = Environment::new(&ec, &book, evaluation_seed(1, i)).unwrap();
            let minutes: f64 = env.plan().segments.iter().map(|s| s.planned_steps as f64 * 0.5).sum();
            assert!((report.policies[0].costs[i] - 1.0 * minutes).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_equals_no_policy_on_flat_book() {
        let book = flat_book(4, 1000);
        for mode in ScenarioMode::ALL {
            let ec = EpisodeConfig { scenario_mode: mode, ..EpisodeConfig::default() };
            let r = evaluate::<f64>(&[Policy::NoPolicy, Policy::Greedy], 10, &ec, &book, 3, 1).unwrap();
            assert_eq!(r.policies[0].costs, r.policies[1].costs);
        }
    }

    #[test]
    fn evaluation_is_paired_and_thread_independent() {
        let book = crate::price_data::synth_price_book(4, &Default::default()).unwrap();
        let ec = EpisodeConfig::default();
        let a = evaluate::<f64>(&[Policy::NoPolicy, Policy::Greedy], 12, &ec, &book, 8, 1).unwrap();
        let b = evaluate::<f64>(&[Policy::Greedy, Policy::NoPolicy], 12, &ec, &book, 8, 3).unwrap();
        assert_eq!(a.policy("greedy"), b.policy("greedy"));
        assert_eq!(a.policy("no_policy"), b.policy("no_policy"));
    }

    #[test]
    fn oracle_flat_book_never_changes() {
        let book = flat_book(2, 100);
        let ec = small_ec(ScenarioMode::Exact, 2);
        let r = brute_force_oracle(&ec, &book, 3).unwrap();
        assert!(r.schedule.iter().all(|&a| a == Action::DoNothing));
        let minutes: f64 = r.plan.segments.iter().map(|s| s.planned_steps as f64 * 0.5).sum();
        assert!((r.cost - minutes).abs() < 1e-12);
    }

    #[test]
    fn oracle_changes_once_at_drop() {
        // Operator 1 drops from 3.0 to 1.0 at step 4; the initial price is 2.0.
        let mut r1 = vec![3.0; 40];
        r1[4..].fill(1.0);
        let book = PriceBook::from_rows(vec![vec![2.0; 40], r1], vec![40]).unwrap();
        let ec = EpisodeConfig {
            segment_count_range: (1, 1),
            segment_minutes_range: (6.0, 6.0),
            mno_count: 2,
            scenario_mode: ScenarioMode::Exact,
            ..EpisodeConfig::default()
        };
        // Find a seed whose episode starts at column 0 so the drop is at step 4.
        let seed = (0..1000).find(|&s| Environment::new(&ec, &book, s).unwrap().plan().book_offset == 0).unwrap();
        let r = brute_force_oracle(&ec, &book, seed).unwrap();
        let changes: Vec<usize> = r
            .schedule
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == Action::ChangeToLowestPriceMno)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(changes, vec![4]);
    }

    #[test]
    fn oracle_prohibitive_fee_never_changes() {
        let mut r1 = vec![3.0; 40];
        r1[4..].fill(1.9);
        let book = PriceBook::from_rows(vec![vec![2.0; 40], r1], vec![40]).unwrap();
        let ec = EpisodeConfig {
            segment_count_range: (1, 1),
            segment_minutes_range: (6.0, 6.0),
            mno_count: 2,
            scenario_mode: ScenarioMode::Exact,
            cancellation_rate: 0.9,
            ..EpisodeConfig::default()
        };
        let r = brute_force_oracle(&ec, &book, 0).unwrap();
        assert!(r.schedule.iter().all(|&a| a == Action::DoNothing));
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let book = flat_book(4, 1000);
        let err = brute_force_oracle(&EpisodeConfig::default(), &book, 0).unwrap_err();
        match err {
            Error::SearchTooLarge(msg) => assert!(msg.contains("N <= 2")),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn benchmark_table_shape() {
        let book = flat_book(4, 1000);
        let bundle: BenchmarkBundle<'_, f64> = BenchmarkBundle {
            episode: EpisodeConfig::default(),
            book: &book,
            eval_episodes: 3,
            eval_seed: 0,
            threads: 1,
            networks: vec![],
        };
        let (reports, summary) = reproduce_benchmarks(&bundle).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(summary.rows.len(), 2 * 4);
        for r in &summary.rows {
            assert!((r.mean_bandwidth + r.mean_cancellation - r.mean_cost).abs() <= 1e-9 * r.mean_cost);
        }
        assert_eq!(summary.to_text().lines().count(), 9);
    }
}

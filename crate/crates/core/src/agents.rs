//! Policies, experience replay and bootstrapped targets.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Action, ActionSet, State, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::qnet::{Head, QNetwork};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    NoPolicy,
    Greedy,
    Dqn,
    DoubleDqn,
    DuelingDqn,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] =
        [AgentKind::NoPolicy, AgentKind::Greedy, AgentKind::Dqn, AgentKind::DoubleDqn, AgentKind::DuelingDqn];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::NoPolicy => "no_policy",
            AgentKind::Greedy => "greedy",
            AgentKind::Dqn => "dqn",
            AgentKind::DoubleDqn => "double_dqn",
            AgentKind::DuelingDqn => "dueling_dqn",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, AgentKind::Dqn | AgentKind::DoubleDqn | AgentKind::DuelingDqn)
    }

    pub fn head(self) -> Head {
        if self == AgentKind::DuelingDqn {
            Head::Dueling
        } else {
            Head::Plain
        }
    }

    /// Target rule used by this agent; `double_variant` applies to Double DQN only.
    pub fn target_variant(self, double_variant: TargetVariant) -> TargetVariant {
        match self {
            AgentKind::DoubleDqn => double_variant,
            _ => TargetVariant::Dqn,
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent `{s}`")))
    }
}

/// Never switches operator; resolves under/overbooking as soon as it is revealed.
pub fn act_no_policy(state: &State) -> Action {
    match state.booking_flag {
        -1 => Action::SolveUnderbooking,
        1 => Action::SolveOverbooking,
        _ => Action::DoNothing,
    }
}

/// Switches whenever any operator is cheaper than the held price, fees ignored.
pub fn act_greedy(state: &State) -> Action {
    match state.booking_flag {
        -1 => Action::SolveUnderbooking,
        1 => Action::SolveOverbooking,
        _ if state.lowest_current_price() < state.reserved_price => Action::ChangeToLowestPriceMno,
        _ => Action::DoNothing,
    }
}

/// Highest-valued legal action, lowest index on ties.
pub fn masked_argmax<S: Scalar>(q: &[S], legal: ActionSet) -> Action {
    let mut best: Option<(Action, S)> = None;
    for a in legal.iter() {
        let v = q[a.index()];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best.map_or(Action::DoNothing, |(a, _)| a)
}

pub fn encode<S: Scalar>(state: &State) -> Vec<S> {
    state.features.iter().map(|&x| S::of(x)).collect()
}

/// With probability `epsilon` a uniform legal action, otherwise the masked argmax.
pub fn act_epsilon_greedy<S: Scalar, R: Rng + ?Sized>(
    net: &QNetwork<S>,
    state: &State,
    epsilon: f64,
    rng: &mut R,
) -> Result<Action> {
    let legal = state.legal_actions();
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        let k = rng.random_range(0..legal.len());
        return Ok(legal.iter().nth(k).expect("k < legal.len()"));
    }
    let q = net.forward(&encode::<S>(state))?;
    Ok(masked_argmax(&q, legal))
}

/// Linear decay from `start` to `end` over `decay_episodes`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub decay_episodes: usize,
}

impl ExplorationSchedule {
    pub fn new(epsilon_start: f64, epsilon_end: f64, decay_episodes: usize) -> Result<Self> {
        if !(0.0 <= epsilon_end && epsilon_end <= epsilon_start && epsilon_start <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= epsilon_end ({epsilon_end}) <= epsilon_start ({epsilon_start}) <= 1"
            )));
        }
        Ok(Self { epsilon_start, epsilon_end, decay_episodes })
    }

    /// Decay over `fraction` of `total_episodes`.
    pub fn over_fraction(epsilon_start: f64, epsilon_end: f64, fraction: f64, total_episodes: usize) -> Result<Self> {
        Self::new(epsilon_start, epsilon_end, (fraction * total_episodes as f64).round() as usize)
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        if episode >= self.decay_episodes {
            return self.epsilon_end;
        }
        let frac = episode as f64 / self.decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetVariant {
    /// Bootstrap from the target network's maximum.
    Dqn,
    /// Target network selects, online network evaluates.
    DoublePaper,
    /// Online network selects, target network evaluates.
    DoubleCanonical,
}

impl std::str::FromStr for TargetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(TargetVariant::Dqn),
            "double_paper" => Ok(TargetVariant::DoublePaper),
            "double_canonical" => Ok(TargetVariant::DoubleCanonical),
            _ => Err(Error::Config(format!("unknown target variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRule {
    pub variant: TargetVariant,
    pub gamma: f64,
    pub n_step: usize,
}

impl Default for TargetRule {
    fn default() -> Self {
        Self { variant: TargetVariant::DoublePaper, gamma: 0.99, n_step: 3 }
    }
}

impl TargetRule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || self.n_step == 0 {
            return Err(Error::Config(format!(
                "need 0 <= gamma <= 1 and n_step >= 1, got {} and {}",
                self.gamma, self.n_step
            )));
        }
        Ok(())
    }
}

/// Up to `n` consecutive rewards starting at `state`, with the state to
/// bootstrap from unless the episode ended inside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<S> {
    pub state: Vec<S>,
    pub action: usize,
    pub rewards: Vec<S>,
    pub bootstrap: Option<(Vec<S>, ActionSet)>,
}

/// Turns an episode's transitions into n-step windows.
#[derive(Debug, Clone)]
pub struct NStepBuilder<S> {
    n: usize,
    pending: VecDeque<(Vec<S>, usize)>,
    rewards: VecDeque<S>,
}

impl<S: Scalar> NStepBuilder<S> {
    pub fn new(n: usize) -> Self {
        Self { n: n.max(1), pending: VecDeque::new(), rewards: VecDeque::new() }
    }

    /// Feed one transition; completed windows are appended to `out`.
    pub fn push(
        &mut self,
        state: &State,
        action: Action,
        reward: f64,
        next: &State,
        done: bool,
        out: &mut Vec<Window<S>>,
    ) {
        self.pending.push_back((encode(state), action.index()));
        self.rewards.push_back(S::of(reward));
        if done {
            while let Some((s, a)) = self.pending.pop_front() {
                out.push(Window { state: s, action: a, rewards: self.rewards.iter().copied().collect(), bootstrap: None });
                self.rewards.pop_front();
            }
            return;
        }
        if self.pending.len() == self.n {
            let (s, a) = self.pending.pop_front().expect("window is full");
            out.push(Window {
                state: s,
                action: a,
                rewards: self.rewards.iter().copied().collect(),
                bootstrap: Some((encode(next), next.legal_actions())),
            });
            self.rewards.pop_front();
        }
    }
}

/// Fixed-capacity ring store; the oldest item is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    cursor: usize,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Stored items, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if k == 0 || self.items.len() < k {
            return Err(Error::NotReady { size: self.items.len(), requested: k });
        }
        Ok((0..k).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&T>> {
        Ok(self.sample_indices(k, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }
}

/// Regression targets for a batch of windows.
pub fn build_targets<S: Scalar>(
    rule: &TargetRule,
    batch: &[&Window<S>],
    online: &QNetwork<S>,
    target: &QNetwork<S>,
) -> Result<Vec<S>> {
    rule.validate()?;
    let gamma = S::of(rule.gamma);
    let mut ys = Vec::with_capacity(batch.len());
    let mut boot_states = Vec::new();
    let mut boot_rows = Vec::new();
    for (i, w) in batch.iter().enumerate() {
        if w.rewards.is_empty() || w.rewards.len() > rule.n_step {
            return Err(Error::Domain(format!(
                "window with {} rewards for n_step {}",
                w.rewards.len(),
                rule.n_step
            )));
        }
        let mut discounted = S::zero();
        let mut g = S::one();
        for &r in &w.rewards {
            discounted = discounted + g * r;
            g = g * gamma;
        }
        ys.push(discounted);
        if let Some((s, _)) = &w.bootstrap {
            boot_states.extend_from_slice(s);
            boot_rows.push(i);
        }
    }
    if boot_rows.is_empty() || rule.gamma == 0.0 {
        return Ok(ys);
    }
    let q_target = target.forward_batch(&boot_states)?;
    let q_online = match rule.variant {
        TargetVariant::Dqn => None,
        _ => Some(online.forward_batch(&boot_states)?),
    };
    for (row, &i) in boot_rows.iter().enumerate() {
        let w = batch[i];
        let legal = w.bootstrap.as_ref().expect("bootstrap row").1;
        let qt = &q_target[row * ACTION_COUNT..(row + 1) * ACTION_COUNT];
        let value = match (rule.variant, &q_online) {
            (TargetVariant::Dqn, _) => qt[masked_argmax(qt, legal).index()],
            (TargetVariant::DoublePaper, Some(qo)) => {
                let qo = &qo[row * ACTION_COUNT..(row + 1) * ACTION_COUNT];
                qo[masked_argmax(qt, legal).index()]
            }
            (TargetVariant::DoubleCanonical, Some(qo)) => {
                let qo = &qo[row * ACTION_COUNT..(row + 1) * ACTION_COUNT];
                qt[masked_argmax(qo, legal).index()]
            }
            _ => unreachable!("online values computed for double variants"),
        };
        ys[i] = ys[i] + gamma.powi(w.rewards.len() as i32) * value;
    }
    Ok(ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::NetworkSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(reserved: f64, current: Vec<f64>, flag: i8) -> State {
        State {
            reserved_price: reserved,
            next_prices: current.clone(),
            features: vec![0.5; 2 * current.len() + 3],
            current_prices: current,
            booking_flag: flag,
            steps_to_handoff: 10,
        }
    }

    #[test]
    fn no_policy_cases() {
        assert_eq!(act_no_policy(&state(2.0, vec![1.0, 3.0], 0)), Action::DoNothing);
        assert_eq!(act_no_policy(&state(2.0, vec![1.0, 3.0], -1)), Action::SolveUnderbooking);
        assert_eq!(act_no_policy(&state(2.0, vec![1.0, 3.0], 1)), Action::SolveOverbooking);
    }

    #[test]
    fn greedy_cases() {
        assert_eq!(act_greedy(&state(2.0, vec![1.9, 3.0], 0)), Action::ChangeToLowestPriceMno);
        assert_eq!(act_greedy(&state(2.0, vec![2.0, 3.0], 0)), Action::DoNothing);
        assert_eq!(act_greedy(&state(2.0, vec![1.0, 3.0], 1)), Action::SolveOverbooking);
    }

    /// Two-input, four-output linear net whose Q-values equal its biases.
    fn bias_net(q: [f64; 4]) -> QNetwork<f64> {
        let spec = NetworkSpec::new(2, vec![], 4, Head::Plain).unwrap();
        let mut p = vec![0.0; spec.parameter_count()];
        p[8..].copy_from_slice(&q);
        QNetwork::from_params(&spec, p).unwrap()
    }

    fn two_feature_state(flag: i8) -> State {
        State { features: vec![0.1, 0.2], ..state(1.0, vec![1.0], flag) }
    }

    #[test]
    fn argmax_masks_and_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = two_feature_state(0);
        let net = bias_net([0.0, 5.0, 5.0, 1.0]);
        assert_eq!(act_epsilon_greedy(&net, &s, 0.0, &mut rng).unwrap(), Action::ChangeToLowestPriceMno);
        let flat = bias_net([1.0; 4]);
        assert_eq!(act_epsilon_greedy(&flat, &two_feature_state(1), 0.0, &mut rng).unwrap(), Action::DoNothing);
    }

    #[test]
    fn epsilon_one_is_uniform_over_legal() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = bias_net([9.0, 0.0, 0.0, 0.0]);
        let s = two_feature_state(-1);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[act_epsilon_greedy(&net, &s, 1.0, &mut rng).unwrap().index()] += 1;
        }
        assert_eq!(counts[Action::SolveOverbooking.index()], 0);
        let expected = draws as f64 / 3.0;
        let chi2: f64 = [0, 1, 3].iter().map(|&i| (counts[i] as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 2 degrees of freedom.
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn schedule_decays_linearly() {
        let s = ExplorationSchedule::over_fraction(1.0, 0.05, 0.5, 200).unwrap();
        assert_eq!(s.epsilon(0), 1.0);
        assert!((s.epsilon(50) - 0.525).abs() < 1e-12);
        assert_eq!(s.epsilon(100), 0.05);
        assert_eq!(s.epsilon(199), 0.05);
        assert!(ExplorationSchedule::new(0.1, 0.5, 10).is_err());
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(2).unwrap();
        b.push(1);
        b.push(2);
        b.push(3);
        assert_eq!(b.iter_oldest_first().copied().collect::<Vec<_>>(), vec![2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(b.sample(3, &mut rng), Err(Error::NotReady { size: 2, requested: 3 })));
    }

    #[test]
    fn sampling_single_and_seeded() {
        let mut b = ReplayBuffer::new(4).unwrap();
        b.push("only");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(b.sample(1, &mut rng).unwrap(), vec![&"only"]);
        for i in 0..4 {
            b.push(["a", "b", "c", "d"][i]);
        }
        let x = b.sample_indices(16, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(x.is_err());
        let mut big = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            big.push(i);
        }
        let a = big.sample_indices(16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = big.sample_indices(16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, c);
    }

    fn window(rewards: Vec<f64>, bootstrap: Option<ActionSet>) -> Window<f64> {
        Window { state: vec![0.1, 0.2], action: 0, rewards, bootstrap: bootstrap.map(|l| (vec![0.3, 0.4], l)) }
    }

    #[test]
    fn terminal_window_is_reward() {
        let net = bias_net([1.0, 2.0, 3.0, 4.0]);
        let w = window(vec![-0.5], None);
        let y = build_targets(&TargetRule::default(), &[&w], &net, &net).unwrap();
        assert_eq!(y, vec![-0.5]);
    }

    #[test]
    fn zero_gamma_is_reward() {
        let net = bias_net([1.0, 2.0, 3.0, 4.0]);
        let w = window(vec![-0.25], Some(ActionSet::for_flag(0)));
        let rule = TargetRule { gamma: 0.0, n_step: 1, variant: TargetVariant::Dqn };
        assert_eq!(build_targets(&rule, &[&w], &net, &net).unwrap(), vec![-0.25]);
    }

    #[test]
    fn three_step_hand_values() {
        // online Q(s') = [1, -, -, 4], target Q(s') = [3, -, -, 2]; legal {0, 3}.
        let online = bias_net([1.0, 100.0, 100.0, 4.0]);
        let target = bias_net([3.0, 100.0, 100.0, 2.0]);
        let w = window(vec![-0.1, -0.2, -0.3], Some(ActionSet::for_flag(0)));
        let g: f64 = 0.99;
        let base = -0.1 + g * -0.2 + g * g * -0.3;
        let g3 = g.powi(3);
        let y = |variant| {
            let rule = TargetRule { variant, gamma: 0.99, n_step: 3 };
            build_targets(&rule, &[&w], &online, &target).unwrap()[0]
        };
        // dqn: max over target = 3
        assert!((y(TargetVariant::Dqn) - (base + g3 * 3.0)).abs() < 1e-12);
        // paper: target picks action 0, online evaluates it = 1
        assert!((y(TargetVariant::DoublePaper) - (base + g3 * 1.0)).abs() < 1e-12);
        // canonical: online picks action 3, target evaluates it = 2
        assert!((y(TargetVariant::DoubleCanonical) - (base + g3 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn one_step_dqn_is_bellman() {
        let net = bias_net([0.5, 0.0, 0.0, 0.75]);
        let w = window(vec![-1.0], Some(ActionSet::for_flag(0)));
        let rule = TargetRule { variant: TargetVariant::Dqn, gamma: 0.9, n_step: 1 };
        let y = build_targets(&rule, &[&w], &net, &net).unwrap()[0];
        assert!((y - (-1.0 + 0.9 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn empty_window_rejected() {
        let net = bias_net([0.0; 4]);
        let w = window(vec![], None);
        assert!(matches!(build_targets(&TargetRule::default(), &[&w], &net, &net), Err(Error::Domain(_))));
    }

    #[test]
    fn nstep_builder_windows() {
        let mut b = NStepBuilder::<f64>::new(3);
        let mut out = Vec::new();
        let s = |k: f64| State { features: vec![k], ..state(1.0, vec![1.0], 0) };
        for k in 0..4 {
            b.push(&s(k as f64), Action::DoNothing, -(k as f64), &s(k as f64 + 1.0), false, &mut out);
        }
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].rewards, vec![0.0, -1.0, -2.0]);
        assert_eq!(out[0].bootstrap.as_ref().unwrap().0, vec![3.0]);
        b.push(&s(4.0), Action::DoNothing, -4.0, &s(5.0), true, &mut out);
        assert_eq!(out.len(), 5);
        assert_eq!(out[2].rewards, vec![-2.0, -3.0, -4.0]);
        assert!(out[2].bootstrap.is_none());
        assert_eq!(out[4].rewards, vec![-4.0]);
    }
}

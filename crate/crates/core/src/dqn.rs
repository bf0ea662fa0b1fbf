//! Deep Q-learning over the joint heading space: replay buffer, ε-greedy
//! exploration, a periodically synchronized target network, and the
//! semi-gradient TD update.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::Position;
use crate::env::{self, EnvConfig, JointAction, WorldState, HEADINGS};
use crate::error::{Error, Result};
use crate::neural::{GradientSet, Network, StepDirection};

/// Episodes covered by the moving average in the convergence log.
pub const MOVING_AVERAGE_WINDOW: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: JointAction,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO store of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::domain("replay buffer capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if batch == 0 {
            return Err(Error::domain("batch size must be >= 1"));
        }
        if self.items.len() < batch {
            return Err(Error::state(format!(
                "replay buffer holds {} transitions, batch needs {batch}",
                self.items.len()
            )));
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub lr_q: f64,
    /// Heavy-ball momentum on the TD gradient; 0 disables it.
    pub momentum: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the run over which ε decays linearly.
    pub eps_decay_fraction: f64,
    /// Environment steps between hard target-network copies.
    pub target_sync_every: usize,
    /// Environment steps between TD updates.
    pub update_every: usize,
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    /// Physical evaluations follow episodes 0, `eval_every`, 2·`eval_every`, ...
    /// and the final episode.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Drop γ from the TD target, as the update is literally printed.
    pub eq7_literal: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            gamma: 0.9,
            lr_q: 1e-3,
            momentum: 0.0,
            batch: 64,
            buffer_capacity: 10_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.5,
            target_sync_every: 100,
            update_every: 1,
            hidden: vec![256, 256],
            head: HeadKind::Joint,
            eval_every: 20,
            eval_episodes: 5,
            eq7_literal: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::domain(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.lr_q >= 0.0 && self.lr_q.is_finite()) {
            return Err(Error::domain(format!("lr_q must be finite and >= 0, got {}", self.lr_q)));
        }
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return Err(Error::domain(format!(
                "need 0 <= eps_end <= eps_start <= 1, got {} and {}",
                self.eps_end, self.eps_start
            )));
        }
        if !(0.0..=1.0).contains(&self.eps_decay_fraction) {
            return Err(Error::domain("eps_decay_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch == 0 || self.batch > self.buffer_capacity {
            return Err(Error::domain(format!(
                "need 1 <= batch <= buffer_capacity, got {} and {}",
                self.batch, self.buffer_capacity
            )));
        }
        if self.target_sync_every == 0 || self.update_every == 0 {
            return Err(Error::domain("target_sync_every and update_every must be >= 1"));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::domain("eval_every and eval_episodes must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::domain("hidden layer widths must be >= 1"));
        }
        Ok(())
    }

    /// ε for a given episode: linear from `eps_start` to `eps_end` over the
    /// first `eps_decay_fraction` of the run, then flat.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let decay_episodes = self.eps_decay_fraction * self.episodes as f64;
        if decay_episodes <= 0.0 {
            return self.eps_end;
        }
        let frac = (episode as f64 / decay_episodes).min(1.0);
        (self.eps_start + (self.eps_end - self.eps_start) * frac).clamp(self.eps_end, self.eps_start)
    }

    pub fn q_dims(&self, env: &EnvConfig) -> Vec<usize> {
        let mut dims = vec![env.state_dim()];
        dims.extend(&self.hidden);
        dims.push(self.q_head(env).outputs());
        dims
    }

    pub fn q_head(&self, env: &EnvConfig) -> QHead {
        QHead::new(self.head, env.m_uavs)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// How the Q-network's output layer maps onto joint actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// One output per joint action, `4^M` in total.
    Joint,
    /// Four outputs per UAV; `Q(s, a) = Σ_j Q_j(s, a_j)`.
    Factored,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Joint => "joint",
            HeadKind::Factored => "factored",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(HeadKind::Joint),
            "factored" => Ok(HeadKind::Factored),
            other => Err(Error::domain(format!("unknown Q head {other:?} (expected joint or factored)"))),
        }
    }
}

/// A [`HeadKind`] bound to a fleet size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QHead {
    pub kind: HeadKind,
    pub uavs: usize,
}

impl QHead {
    pub fn new(kind: HeadKind, uavs: usize) -> Self {
        Self { kind, uavs }
    }

    pub fn joint(uavs: usize) -> Self {
        Self::new(HeadKind::Joint, uavs)
    }

    /// Width of the network output layer.
    pub fn outputs(&self) -> usize {
        match self.kind {
            HeadKind::Joint => HEADINGS.pow(self.uavs as u32),
            HeadKind::Factored => HEADINGS * self.uavs,
        }
    }

    pub fn action_count(&self) -> usize {
        HEADINGS.pow(self.uavs as u32)
    }

    fn check(&self, out: &[f64]) -> Result<()> {
        if out.len() != self.outputs() {
            return Err(Error::domain(format!(
                "Q output width {} does not match a {} head over {} UAVs",
                out.len(),
                self.kind.as_str(),
                self.uavs
            )));
        }
        Ok(())
    }

    /// `Q(s, a)` read off one output row.
    pub fn value(&self, out: &[f64], a: JointAction) -> f64 {
        match self.kind {
            HeadKind::Joint => out[a.0],
            HeadKind::Factored => {
                let mut rest = a.0;
                (0..self.uavs)
                    .map(|j| {
                        let d = rest % HEADINGS;
                        rest /= HEADINGS;
                        out[j * HEADINGS + d]
                    })
                    .sum()
            }
        }
    }

    /// Greedy joint action and its value, lowest index on ties.
    pub fn best(&self, out: &[f64]) -> (JointAction, f64) {
        match self.kind {
            HeadKind::Joint => {
                let a = argmax(out);
                (JointAction(a), out[a])
            }
            HeadKind::Factored => {
                let mut index = 0;
                let mut value = 0.0;
                let mut place = 1;
                for chunk in out.chunks_exact(HEADINGS) {
                    let d = argmax(chunk);
                    index += d * place;
                    value += chunk[d];
                    place *= HEADINGS;
                }
                (JointAction(index), value)
            }
        }
    }

    /// Writes `dL/dQ(s, a) = g` into an output-gradient row.
    fn scatter(&self, row: &mut [f64], a: JointAction, g: f64) {
        match self.kind {
            HeadKind::Joint => row[a.0] = g,
            HeadKind::Factored => {
                let mut rest = a.0;
                for j in 0..self.uavs {
                    row[j * HEADINGS + rest % HEADINGS] = g;
                    rest /= HEADINGS;
                }
            }
        }
    }
}

pub fn greedy_action(q: &Network, head: QHead, state: &[f64]) -> Result<JointAction> {
    let out = q.forward(state)?;
    head.check(&out)?;
    Ok(head.best(&out).0)
}

/// ε-greedy choice: uniform over all joint actions with probability `eps`,
/// otherwise the greedy action.
pub fn select_action<R: Rng + ?Sized>(
    q: &Network,
    head: QHead,
    state: &[f64],
    eps: f64,
    rng: &mut R,
) -> Result<JointAction> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::domain(format!("epsilon must lie in [0, 1], got {eps}")));
    }
    if eps > 0.0 && rng.random::<f64>() < eps {
        return Ok(JointAction(rng.random_range(0..head.action_count())));
    }
    greedy_action(q, head, state)
}

/// Summary of one TD update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdStats {
    /// Mean of `0.5 * (Q(s, a) - target)^2` over the batch.
    pub loss: f64,
    pub mean_abs_td: f64,
}

/// TD target for one transition: `r + γ max_a' Q⁻(s', a')`, or `r` when the
/// transition ends the episode.
pub fn td_target(q_target: &Network, head: QHead, t: &Transition, gamma: f64) -> Result<f64> {
    if t.done {
        return Ok(t.reward);
    }
    let next = q_target.forward(&t.next_state)?;
    head.check(&next)?;
    Ok(t.reward + gamma * head.best(&next).1)
}

/// One semi-gradient descent step on the mean squared TD error. The target
/// network only supplies bootstrap values; gradients flow through
/// `Q(s_t, a_t)` alone.
pub fn td_update(
    q: &mut Network,
    q_target: &Network,
    head: QHead,
    batch: &[&Transition],
    gamma: f64,
    lr_q: f64,
) -> Result<TdStats> {
    let mut grads = GradientSet::zeros_like(q);
    let stats = td_gradients(q, q_target, head, batch, gamma, &mut grads)?;
    q.param_step(&grads, lr_q, StepDirection::Descend)?;
    Ok(stats)
}

/// Gradient of the mean `0.5 * td^2` loss over `batch`, written into `grads`.
pub fn td_gradients(
    q: &Network,
    q_target: &Network,
    head: QHead,
    batch: &[&Transition],
    gamma: f64,
    grads: &mut GradientSet,
) -> Result<TdStats> {
    if batch.is_empty() {
        return Err(Error::domain("TD update needs a non-empty batch"));
    }
    if !q.same_topology(q_target) {
        return Err(Error::domain("online and target networks differ in topology"));
    }
    grads.reset();
    let n = batch.len();
    let in_dim = q.input_dim();
    let out_dim = q.output_dim();
    if out_dim != head.outputs() {
        return Err(Error::domain("Q output width does not match the head"));
    }
    let mut states = Vec::with_capacity(n * in_dim);
    let mut next_states = Vec::with_capacity(n * in_dim);
    for t in batch {
        if t.action.0 >= head.action_count() {
            return Err(Error::domain(format!("transition action {} outside the Q head", t.action.0)));
        }
        states.extend_from_slice(&t.state);
        if !t.done {
            next_states.extend_from_slice(&t.next_state);
        }
    }
    let bootstrap_rows = next_states.len() / in_dim;
    let next_q = q_target.forward_batch(&next_states, bootstrap_rows)?;
    let trace = q.forward_batch(&states, n)?;
    let mut out_grads = vec![0.0; n * out_dim];
    let mut loss = 0.0;
    let mut abs_td = 0.0;
    let mut next_row = 0;
    for (b, t) in batch.iter().enumerate() {
        let target = if t.done {
            t.reward
        } else {
            let row = &next_q.output()[next_row * out_dim..(next_row + 1) * out_dim];
            next_row += 1;
            t.reward + gamma * head.best(row).1
        };
        let out_row = &trace.output()[b * out_dim..(b + 1) * out_dim];
        let td = target - head.value(out_row, t.action);
        if !td.is_finite() {
            return Err(Error::numeric(format!("non-finite TD error for action {}", t.action.0)));
        }
        loss += 0.5 * td * td / n as f64;
        abs_td += td.abs() / n as f64;
        head.scatter(&mut out_grads[b * out_dim..(b + 1) * out_dim], t.action, -td / n as f64);
    }
    q.accumulate_gradients_batch(&trace, &out_grads, grads)?;
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite TD gradient"));
    }
    Ok(TdStats {
        loss,
        mean_abs_td: abs_td,
    })
}

/// Hard copy of the online parameters into the target network.
pub fn sync_target(q: &Network, q_target: &mut Network) -> Result<()> {
    q_target.copy_params_from(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub train_return: f64,
    pub eval_sum_rate: Option<f64>,
    pub moving_avg: Option<f64>,
    pub epsilon: f64,
    pub seed: u64,
    pub scheme_id: String,
}

/// Per-episode training record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceLog {
    pub rows: Vec<LogRow>,
}

pub const CONVERGENCE_HEADER: [&str; 7] = [
    "episode",
    "train_return",
    "eval_sum_rate",
    "moving_avg_200",
    "epsilon",
    "seed",
    "scheme_id",
];

impl ConvergenceLog {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Evaluations recorded in episodes `[from, to)`.
    pub fn evaluations(&self, from: usize, to: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.episode >= from && r.episode < to)
            .filter_map(|r| r.eval_sum_rate)
            .collect()
    }

    /// Mean evaluated sum rate over the first window of the run.
    pub fn first_window_mean(&self) -> Option<f64> {
        mean(&self.evaluations(0, MOVING_AVERAGE_WINDOW))
    }

    /// Mean evaluated sum rate over the last window of the run.
    pub fn final_window_mean(&self) -> Option<f64> {
        let end = self.rows.last()?.episode + 1;
        mean(&self.evaluations(end.saturating_sub(MOVING_AVERAGE_WINDOW), end))
    }

    pub fn with_scheme(mut self, scheme_id: &str) -> Self {
        for r in &mut self.rows {
            r.scheme_id = scheme_id.to_string();
        }
        self
    }

    pub fn write_csv<W: Write>(&self, writer: &mut csv::Writer<W>) -> csv::Result<()> {
        for r in &self.rows {
            writer.write_record([
                r.episode.to_string(),
                fmt_f64(r.train_return),
                r.eval_sum_rate.map(fmt_f64).unwrap_or_default(),
                r.moving_avg.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.epsilon),
                r.seed.to_string(),
                r.scheme_id.clone(),
            ])?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        w.write_record(CONVERGENCE_HEADER)
            .and_then(|_| self.write_csv(&mut w))
            .map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Shortest round-trip decimal form, so CSVs are stable and reload exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Result of a complete training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Network,
    pub log: ConvergenceLog,
    pub users: Vec<Position>,
    /// Mean of the physical evaluations inside the final moving-average window.
    pub final_rate: Option<f64>,
    /// TD updates refused because of non-finite values.
    pub numeric_failures: usize,
}

/// Independent random streams of one run, all derived from the run seed.
pub(crate) struct RunStreams {
    pub users: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub twin_noise: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub init_seed: u64,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            users: stream(1),
            explore: stream(2),
            twin_noise: stream(3),
            replay: stream(4),
            init_seed: stream(5).random(),
        }
    }
}

/// The user layout a run with `seed` trains and evaluates on.
pub fn users_for_seed(env_cfg: &EnvConfig, seed: u64) -> Vec<Position> {
    env::reset(env_cfg, &mut RunStreams::new(seed).users).users
}

/// Trains a Q-network on `env_cfg` under its deployment plan.
///
/// Rewards enter the replay buffer per user and relative to the rate of the
/// fleet parked at the hangar, `(r - r_hangar) / N`; this affine rescaling
/// keeps TD targets near unit scale and leaves greedy action choices
/// unchanged. Logged returns are raw sum rates.
pub fn train(env_cfg: &EnvConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    env_cfg.validate()?;
    tcfg.validate()?;
    let mut streams = RunStreams::new(tcfg.seed);
    let start = env::reset(env_cfg, &mut streams.users);
    let users = start.users.clone();
    let mut q = Network::new(&tcfg.q_dims(env_cfg), streams.init_seed)?;
    let mut q_target = q.clone();
    let mut log = ConvergenceLog::default();
    if tcfg.episodes == 0 {
        return Ok(TrainOutcome {
            policy: q,
            log,
            users,
            final_rate: None,
            numeric_failures: 0,
        });
    }

    let baseline = env::sum_rate_noiseless(&start, &env_cfg.channel)?;
    let reward_scale = 1.0 / env_cfg.n_users as f64;
    let head = tcfg.q_head(env_cfg);
    let gamma = if tcfg.eq7_literal { 1.0 } else { tcfg.gamma };
    let mut buffer = ReplayBuffer::new(tcfg.buffer_capacity)?;
    let mut grads = GradientSet::zeros_like(&q);
    let mut velocity = GradientSet::zeros_like(&q);
    let mut steps = 0usize;
    let mut numeric_failures = 0usize;
    let mut evals: VecDeque<(usize, f64)> = VecDeque::new();

    for episode in 0..tcfg.episodes {
        let eps = tcfg.epsilon(episode);
        let mut w: WorldState = start.restart();
        let mut state = env::encode_state(&w, &env_cfg.movement);
        let mut ret = 0.0;
        loop {
            let action = select_action(&q, head, &state, eps, &mut streams.explore)?;
            let (next, reward, done) = env::step(&w, action, env_cfg, &mut streams.twin_noise)?;
            ret += reward;
            let next_state = env::encode_state(&next, &env_cfg.movement);
            buffer.push(Transition {
                state,
                action,
                reward: (reward - baseline) * reward_scale,
                next_state: next_state.clone(),
                done,
            });
            steps += 1;
            if buffer.len() >= tcfg.batch && steps % tcfg.update_every == 0 {
                let batch = buffer.sample(tcfg.batch, &mut streams.replay)?;
                let step = td_gradients(&q, &q_target, head, &batch, gamma, &mut grads).and_then(|_| {
                    if tcfg.momentum > 0.0 {
                        velocity.mul_add(tcfg.momentum, &grads);
                        q.param_step(&velocity, tcfg.lr_q, StepDirection::Descend)
                    } else {
                        q.param_step(&grads, tcfg.lr_q, StepDirection::Descend)
                    }
                });
                match step {
                    Ok(()) => {}
                    Err(Error::Numeric(msg)) => {
                        numeric_failures += 1;
                        warn!("seed {}: TD update skipped at step {steps}: {msg}", tcfg.seed);
                    }
                    Err(e) => return Err(e),
                }
            }
            if steps % tcfg.target_sync_every == 0 {
                sync_target(&q, &mut q_target)?;
            }
            w = next;
            state = next_state;
            if done {
                break;
            }
        }

        let eval = if episode % tcfg.eval_every == 0 || episode + 1 == tcfg.episodes {
            let policy = |s: &[f64]| greedy_action(&q, head, s);
            let v = env::evaluate_physical(env_cfg, &users, &policy, tcfg.eval_episodes)?;
            evals.push_back((episode, v));
            Some(v)
        } else {
            None
        };
        while evals
            .front()
            .is_some_and(|(e, _)| *e + MOVING_AVERAGE_WINDOW <= episode)
        {
            evals.pop_front();
        }
        let moving_avg = if evals.is_empty() {
            None
        } else {
            Some(evals.iter().map(|(_, v)| v).sum::<f64>() / evals.len() as f64)
        };
        log.rows.push(LogRow {
            episode,
            train_return: ret,
            eval_sum_rate: eval,
            moving_avg,
            epsilon: eps,
            seed: tcfg.seed,
            scheme_id: String::new(),
        });
    }

    let final_rate = log.final_window_mean();
    Ok(TrainOutcome {
        policy: q,
        log,
        users,
        final_rate,
        numeric_failures,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::neural::Layer;

    fn transition(tag: f64) -> Transition {
        Transition {
            state: vec![tag],
            action: JointAction(0),
            reward: tag,
            next_state: vec![tag],
            done: false,
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = ReplayBuffer::new(3).unwrap();
        assert!(b.is_empty());
        b.push(transition(1.0));
        assert_eq!(b.len(), 1);
        for t in 2..=4 {
            b.push(transition(t as f64));
        }
        let tags: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn sample_contract() {
        let mut b = ReplayBuffer::new(4).unwrap();
        b.push(transition(7.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(3, &mut rng), Err(Error::State(_))));
        assert_eq!(b.sample(1, &mut rng).unwrap()[0].reward, 7.0);
        for t in 0..3 {
            b.push(transition(t as f64));
        }
        let pick = |seed| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.sample(4, &mut rng).unwrap().iter().map(|t| t.reward).collect()
        };
        assert_eq!(pick(5), pick(5));
    }

    // A single-output head: zero UAVs, one (empty) joint action.
    const SCALAR: QHead = QHead {
        kind: HeadKind::Joint,
        uavs: 0,
    };

    fn scalar_net(weight: f64) -> Network {
        Network::from_layers(vec![Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![weight],
            biases: vec![0.0],
        }])
        .unwrap()
    }

    #[test]
    fn td_error_arithmetic() {
        // Q(s) = 2.5 online, max Q⁻(s') = 2 target.
        let q = scalar_net(2.5);
        let q_target = scalar_net(2.0);
        let t = Transition {
            state: vec![1.0],
            action: JointAction(0),
            reward: 1.0,
            next_state: vec![1.0],
            done: false,
        };
        let target = td_target(&q_target, SCALAR, &t, 0.9).unwrap();
        assert_relative_eq!(target - q.forward(&t.state).unwrap()[0], 0.3, epsilon = 1e-12);
        let terminal = Transition { done: true, ..t.clone() };
        assert_eq!(td_target(&q_target, SCALAR, &terminal, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn td_update_steps_toward_target() {
        let mut q = scalar_net(2.5);
        let q_target = scalar_net(2.0);
        let t = Transition {
            state: vec![1.0],
            action: JointAction(0),
            reward: 1.0,
            next_state: vec![1.0],
            done: false,
        };
        let stats = td_update(&mut q, &q_target, SCALAR, &[&t], 0.9, 0.5).unwrap();
        assert_relative_eq!(stats.mean_abs_td, 0.3, epsilon = 1e-12);
        // w += lr * td * x, b += lr * td
        assert_relative_eq!(q.layers()[0].weights[0], 2.65, epsilon = 1e-12);
        assert_relative_eq!(q.layers()[0].biases[0], 0.15, epsilon = 1e-12);

        let before = q.clone();
        td_update(&mut q, &q_target, SCALAR, &[&t], 0.9, 0.0).unwrap();
        assert_eq!(q, before);
        assert!(td_update(&mut q, &q_target, SCALAR, &[], 0.9, 0.1).is_err());
    }

    #[test]
    fn td_update_rejects_non_finite() {
        let mut q = scalar_net(1.0);
        let q_target = scalar_net(1.0);
        let t = Transition {
            state: vec![1.0],
            action: JointAction(0),
            reward: f64::INFINITY,
            next_state: vec![1.0],
            done: true,
        };
        let before = q.clone();
        assert!(matches!(td_update(&mut q, &q_target, SCALAR, &[&t], 0.9, 0.1), Err(Error::Numeric(_))));
        assert_eq!(q, before);
    }

    #[test]
    fn target_is_frozen_between_syncs() {
        let mut q = Network::new(&[3, 8, 4], 1).unwrap();
        let mut q_target = Network::new(&[3, 8, 4], 2).unwrap();
        sync_target(&q, &mut q_target).unwrap();
        let probes = [[0.1, 0.2, 0.3], [0.9, -0.4, 0.0], [1.0, 1.0, 1.0]];
        for p in &probes {
            assert_eq!(q.forward(p).unwrap(), q_target.forward(p).unwrap());
        }
        let frozen = q_target.to_bytes();
        let t = Transition {
            state: vec![0.5, 0.5, 0.5],
            action: JointAction(2),
            reward: 1.0,
            next_state: vec![0.4, 0.5, 0.6],
            done: false,
        };
        for _ in 0..5 {
            td_update(&mut q, &q_target, QHead::joint(1), &[&t], 0.9, 0.1).unwrap();
        }
        assert_eq!(q_target.to_bytes(), frozen);
        sync_target(&q, &mut q_target).unwrap();
        let once = q_target.to_bytes();
        sync_target(&q, &mut q_target).unwrap();
        assert_eq!(q_target.to_bytes(), once);
        let mut wrong = Network::new(&[3, 5, 4], 0).unwrap();
        assert!(sync_target(&q, &mut wrong).is_err());
    }

    #[test]
    fn select_action_greedy_and_ties() {
        let net = Network::from_layers(vec![Layer {
            inputs: 1,
            outputs: 4,
            weights: vec![0.0, 1.0, 1.0, -1.0],
            biases: vec![0.0; 4],
        }])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&net, QHead::joint(1), &[1.0], 0.0, &mut rng).unwrap(), JointAction(1));
        assert_eq!(argmax(&[3.0, 5.0, 5.0]), 1);
        assert!(select_action(&net, QHead::joint(1), &[1.0], 1.5, &mut rng).is_err());
    }

    #[test]
    fn select_action_uniform_under_full_exploration() {
        let net = Network::new(&[2, 4], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_action(&net, QHead::joint(1), &[0.3, 0.7], 1.0, &mut rng).unwrap().0] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
        // Pearson chi-square, 3 dof: 16.27 is the 0.999 quantile.
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 16.27, "chi2 {chi2}");
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = TrainConfig {
            episodes: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert_relative_eq!(cfg.epsilon(25), 0.525);
        assert_relative_eq!(cfg.epsilon(50), 0.05, epsilon = 1e-12);
        assert_relative_eq!(cfg.epsilon(99), 0.05, epsilon = 1e-12);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let v = cfg.epsilon(e);
            assert!(v <= prev && (cfg.eps_end..=cfg.eps_start).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn zero_episodes_returns_initial_policy() {
        let env_cfg = EnvConfig {
            n_users: 3,
            m_uavs: 1,
            horizon: 4,
            plan: crate::fleet::DeploymentPlan::all_physical(1),
            ..EnvConfig::default()
        };
        let tcfg = TrainConfig {
            episodes: 0,
            hidden: vec![8],
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&env_cfg, &tcfg).unwrap();
        assert!(out.log.is_empty());
        let init = Network::new(&tcfg.q_dims(&env_cfg), RunStreams::new(3).init_seed).unwrap();
        assert_eq!(out.policy, init);
    }

    #[test]
    fn short_run_is_reproducible() {
        let env_cfg = EnvConfig {
            n_users: 5,
            m_uavs: 2,
            horizon: 6,
            plan: crate::fleet::DeploymentPlan::new(2, 1, 0.8).unwrap(),
            ..EnvConfig::default()
        };
        let tcfg = TrainConfig {
            episodes: 30,
            batch: 8,
            buffer_capacity: 100,
            hidden: vec![16],
            target_sync_every: 10,
            eval_every: 5,
            eval_episodes: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&env_cfg, &tcfg).unwrap();
        let b = train(&env_cfg, &tcfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.policy.to_bytes(), b.policy.to_bytes());
        assert_eq!(a.log.rows.len(), 30);
        // Episodes 0, 5, ..., 25 and the last one.
        assert_eq!(a.log.evaluations(0, 30).len(), 7);
    }
}

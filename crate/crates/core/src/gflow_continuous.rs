//! Continuous GFlowHF: retrieval pretraining, sampled flow matching, flow
//! proportional action selection and the training loop.

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, Point, PointState, Trajectory, ACTION_SPACE_MEASURE};
use crate::error::{Error, Result};
use crate::feedback::{RewardModel, RewardModelConfig, RewardSource, MAX_ORACLE_GRADE};
use crate::harness::labeling::{Labeler, RunHandle};
use crate::harness::metrics::{evaluate_policy, AnswerCriteria, Evaluation, Policy};
use crate::harness::training::{run_loop, Learner, LoopOutcome, Schedule};
use crate::nn::{AdamConfig, AdamState, DenseNet, Gradients, OutputTransform};

/// Rows per forward pass when scoring candidate actions.
const MAX_ROWS: usize = 32_768;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CFlowConfig {
    /// K, uniform actions per state in the loss.
    pub sample_flows: usize,
    /// N, candidate actions scored per action selection.
    pub action_buffer: usize,
    pub epsilon: f64,
    pub action_measure: f64,
    pub log_space: bool,
    /// Replay capacity in transitions.
    pub replay_capacity: usize,
    /// Trajectories per flow-matching update.
    pub batch_size: usize,
    pub updates_per_episode: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for CFlowConfig {
    fn default() -> Self {
        CFlowConfig {
            sample_flows: 100,
            action_buffer: 1000,
            epsilon: 1.0,
            action_measure: ACTION_SPACE_MEASURE,
            log_space: true,
            replay_capacity: 8000,
            batch_size: 128,
            updates_per_episode: 1,
            learning_rate: 3e-4,
            hidden: vec![256, 256],
        }
    }
}

impl CFlowConfig {
    /// `K / mu(A)`.
    pub fn lambda(&self) -> f64 {
        self.sample_flows as f64 / self.action_measure
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_flows == 0 || self.action_buffer == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "sample_flows, action_buffer and batch_size must be positive".into(),
            ));
        }
        if !(self.action_measure > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("action_measure and epsilon must be positive".into()));
        }
        if self.replay_capacity == 0 {
            return Err(Error::InvalidConfig("replay_capacity must be positive".into()));
        }
        Ok(())
    }
}

fn uniform_action(rng: &mut impl Rng) -> Action {
    Action::new(rng.random(), rng.random())
}

/// `F(s, a) = exp(net(x/T, y/T, t/T, dx, dy))`.
#[derive(Clone, Debug)]
pub struct FlowNet {
    net: DenseNet,
    horizon: usize,
}

impl FlowNet {
    pub fn new(hidden: &[usize], horizon: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![5];
        sizes.extend(hidden);
        sizes.push(1);
        Ok(FlowNet {
            net: DenseNet::new(&sizes, OutputTransform::Identity, seed)?,
            horizon,
        })
    }

    pub fn from_net(net: DenseNet, horizon: usize) -> Result<Self> {
        if net.input_dim() != 5 || net.output_dim() != 1 {
            return Err(Error::Shape("flow net must map 5 inputs to 1 output".into()));
        }
        Ok(FlowNet { net, horizon })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    fn write_row(&self, row: &mut [f64], x: f64, y: f64, t: usize, a: Action) {
        let h = self.horizon as f64;
        row[0] = x / h;
        row[1] = y / h;
        row[2] = t as f64 / h;
        row[3] = a.dx;
        row[4] = a.dy;
    }

    pub fn log_flows(&self, pairs: &[(PointState, Action)]) -> Result<Vec<f64>> {
        let mut input = Array2::zeros((pairs.len(), 5));
        for (mut row, (s, a)) in input.rows_mut().into_iter().zip(pairs) {
            self.write_row(row.as_slice_mut().expect("row-major"), s.x, s.y, s.t, *a);
        }
        Ok(self.net.forward_batch(&input)?.into_raw_vec_and_offset().0)
    }

    pub fn flow(&self, state: &PointState, action: Action) -> Result<f64> {
        Ok(self.log_flows(&[(*state, action)])?[0].exp())
    }
}

/// `G(s', a)`: predicted parent position of `s'` under `a`.
#[derive(Clone, Debug)]
pub struct RetrievalNet {
    net: DenseNet,
    horizon: usize,
}

impl RetrievalNet {
    pub fn new(hidden: &[usize], horizon: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![5];
        sizes.extend(hidden);
        sizes.push(2);
        Ok(RetrievalNet {
            net: DenseNet::new(&sizes, OutputTransform::Identity, seed)?,
            horizon,
        })
    }

    pub fn from_net(net: DenseNet, horizon: usize) -> Result<Self> {
        if net.input_dim() != 5 || net.output_dim() != 2 {
            return Err(Error::Shape("retrieval net must map 5 inputs to 2 outputs".into()));
        }
        Ok(RetrievalNet { net, horizon })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    fn features(&self, queries: &[(PointState, Action)]) -> Array2<f64> {
        let h = self.horizon as f64;
        Array2::from_shape_fn((queries.len(), 5), |(r, c)| {
            let (s, a) = &queries[r];
            match c {
                0 => s.x / h,
                1 => s.y / h,
                2 => s.t as f64 / h,
                3 => a.dx,
                _ => a.dy,
            }
        })
    }

    /// Parent positions in raw units; the parent's step is `t - 1`.
    pub fn parents(&self, queries: &[(PointState, Action)]) -> Result<Vec<Point>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.net.forward_batch(&self.features(queries))?;
        let h = self.horizon as f64;
        Ok(out.rows().into_iter().map(|r| Point::new(r[0] * h, r[1] * h)).collect())
    }

    pub fn parent(&self, state: &PointState, action: Action) -> Result<Point> {
        Ok(self.parents(&[(*state, action)])?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub hidden: Vec<usize>,
    pub n_transitions: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate decays geometrically to this value by the last epoch.
    pub final_learning_rate: f64,
    /// Fraction of generated transitions kept out of training.
    pub held_out: f64,
    /// Training actions are uniform on this interval in each coordinate. A
    /// range wider than the action box keeps queries near its edges in
    /// distribution.
    pub action_range: (f64, f64),
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            hidden: vec![256, 256, 256],
            n_transitions: 50_000,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            held_out: 0.1,
            action_range: (-0.5, 2.5),
        }
    }
}

/// Random `(s', a, s)` with `s` uniform over `[-1, T]^2 x {0..T-1}` and
/// `a` uniform on `range^2`, so the children cover every query the loss can
/// make. Returned as (child, action, parent).
pub fn retrieval_samples(env: &EnvConfig, n: usize, range: (f64, f64), rng: &mut impl Rng) -> Vec<(PointState, Action, Point)> {
    let h = env.horizon as f64;
    (0..n)
        .map(|_| {
            let s = PointState::new(
                env.start.x + rng.random_range(-1.0..=h),
                env.start.y + rng.random_range(-1.0..=h),
                rng.random_range(0..env.horizon),
            );
            let a = Action::new(rng.random_range(range.0..=range.1), rng.random_range(range.0..=range.1));
            (PointState::new(s.x + a.dx, s.y + a.dy, s.t + 1), a, s.position())
        })
        .collect()
}

/// Mean squared parent error in normalized units.
pub fn retrieval_mse(net: &RetrievalNet, samples: &[(PointState, Action, Point)]) -> Result<f64> {
    let queries: Vec<(PointState, Action)> = samples.iter().map(|(s, a, _)| (*s, *a)).collect();
    let preds = net.parents(&queries)?;
    let h2 = (net.horizon as f64).powi(2);
    let total: f64 = preds
        .iter()
        .zip(samples)
        .map(|(p, (_, _, target))| p.squared_distance(*target) / h2 / 2.0)
        .sum();
    Ok(total / samples.len().max(1) as f64)
}

pub struct RetrievalTraining {
    pub net: RetrievalNet,
    pub held_out_mse: f64,
}

pub fn pretrain_retrieval(env: &EnvConfig, cfg: &RetrievalConfig, seed: u64) -> Result<RetrievalTraining> {
    env.validate()?;
    if cfg.n_transitions == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("n_transitions and batch_size must be positive".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.final_learning_rate > 0.0) {
        return Err(Error::InvalidConfig("retrieval learning rates must be positive".into()));
    }
    let (lo, hi) = cfg.action_range;
    if !(lo <= 0.0 && hi >= 1.0) {
        return Err(Error::InvalidConfig("retrieval action_range must contain [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = RetrievalNet::new(&cfg.hidden, env.horizon, seed)?;
    let n_eval = ((cfg.n_transitions as f64 * cfg.held_out).round() as usize).max(1);
    let train = retrieval_samples(env, cfg.n_transitions, cfg.action_range, &mut rng);
    let held_out = retrieval_samples(env, n_eval, cfg.action_range, &mut rng);
    let mut adam = AdamState::for_net(&net.net, AdamConfig::with_learning_rate(cfg.learning_rate));
    let h = env.horizon as f64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let decay = if cfg.epochs > 1 {
        (cfg.final_learning_rate / cfg.learning_rate).powf(1.0 / (cfg.epochs - 1) as f64)
    } else {
        1.0
    };
    for epoch in 0..cfg.epochs {
        adam.config.learning_rate = cfg.learning_rate * decay.powi(epoch as i32);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(PointState, Action)> = chunk.iter().map(|&i| (train[i].0, train[i].1)).collect();
            let acts = net.net.forward_cached(net.features(&batch))?;
            let n = chunk.len() as f64;
            let mut upstream = Array2::zeros((chunk.len(), 2));
            for (r, &i) in chunk.iter().enumerate() {
                let target = train[i].2;
                upstream[[r, 0]] = (acts.output()[[r, 0]] - target.x / h) / n;
                upstream[[r, 1]] = (acts.output()[[r, 1]] - target.y / h) / n;
            }
            let (grads, _) = net.net.backward(&acts, &upstream)?;
            adam.step(&mut net.net, &grads)?;
        }
        log::debug!("retrieval epoch {epoch}: held-out mse {:.3e}", retrieval_mse(&net, &held_out)?);
    }
    let held_out_mse = retrieval_mse(&net, &held_out)?;
    Ok(RetrievalTraining { net, held_out_mse })
}

/// Ring buffer of whole trajectories bounded by a transition count.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    trajectories: VecDeque<Trajectory>,
    transitions: usize,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            trajectories: VecDeque::new(),
            transitions: 0,
            capacity,
        }
    }

    pub fn push(&mut self, trajectory: Trajectory) {
        self.transitions += trajectory.actions.len();
        self.trajectories.push_back(trajectory);
        while self.transitions > self.capacity {
            let old = self.trajectories.pop_front().expect("non-empty while over capacity");
            self.transitions -= old.actions.len();
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.trajectories.get(i)
    }

    /// Uniform draw with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a Trajectory> {
        if self.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.trajectories[rng.random_range(0..self.trajectories.len())])
            .collect()
    }
}

/// Per-state parts of the loss, in raw flow units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateTerm {
    pub t: usize,
    pub inflow: f64,
    /// `lambda * r` placed at this state.
    pub reward: f64,
    pub outflow: f64,
    /// Inflow terms that survived parent masking.
    pub unmasked: usize,
    pub residual: f64,
}

pub struct FlowLoss {
    pub loss: f64,
    pub grads: Gradients,
    pub terms: Vec<StateTerm>,
}

/// `ln(c + sum_k w_k exp(o_k))` and its derivative in each `o_k`.
fn log_sum(constant: f64, logs: &[f64]) -> (f64, Vec<f64>) {
    let mut m = if constant > 0.0 { constant.ln() } else { f64::NEG_INFINITY };
    for &o in logs {
        m = m.max(o);
    }
    let c = if constant > 0.0 { (constant.ln() - m).exp() } else { 0.0 };
    let e: Vec<f64> = logs.iter().map(|&o| (o - m).exp()).collect();
    let total = c + e.iter().sum::<f64>();
    (m + total.ln(), e.into_iter().map(|v| v / total).collect())
}

struct StatePlan {
    t: usize,
    inflow: Vec<usize>,
    outflow: Vec<usize>,
    reward: f64,
    /// Log-weight added to every inflow row.
    inflow_log_weight: f64,
}

/// Sampled flow matching over a batch of complete trajectories. For every
/// `s_t` with `t >= 1`, `K` uniform actions give the inflow through the
/// retrieval net's parents and `K` fresh ones the outflow. Parents outside
/// the box reachable at `t - 1` contribute nothing; `s_1` has the start state
/// as its only parent, weighted by `lambda`. The loss is summed over states
/// and averaged over trajectories; gradients are for the flow net only.
#[allow(clippy::too_many_arguments)]
pub fn sampled_flow_match_loss(
    flow: &FlowNet,
    retrieval: &RetrievalNet,
    trajectories: &[&Trajectory],
    reward: &dyn RewardSource,
    env: &EnvConfig,
    cfg: &CFlowConfig,
    rng: &mut impl Rng,
) -> Result<FlowLoss> {
    if trajectories.is_empty() {
        return Err(Error::InvalidConfig("flow matching needs at least one trajectory".into()));
    }
    for tr in trajectories {
        tr.validate(env)?;
    }
    let k = cfg.sample_flows;
    let lambda = cfg.lambda();
    let horizon = env.horizon;

    let finals: Vec<Point> = trajectories.iter().map(|t| t.final_position()).collect();
    let terminal_rewards = reward.rewards(&finals);

    // Retrieval queries for every inflow sample at t >= 2.
    let mut queries = Vec::new();
    for tr in trajectories {
        for s in &tr.states[2..] {
            queries.extend((0..k).map(|_| (*s, uniform_action(rng))));
        }
    }
    let parents = retrieval.parents(&queries)?;

    let mut rows: Vec<(f64, f64, usize, Action)> = Vec::new();
    let mut plans = Vec::new();
    let mut q = 0;
    for (b, tr) in trajectories.iter().enumerate() {
        for t in 1..=horizon {
            let s = tr.states[t];
            let mut plan = StatePlan {
                t,
                inflow: Vec::new(),
                outflow: Vec::new(),
                reward: 0.0,
                inflow_log_weight: 0.0,
            };
            if t == 1 {
                let s0 = tr.states[0];
                plan.inflow.push(rows.len());
                rows.push((s0.x, s0.y, 0, tr.actions[0]));
                plan.inflow_log_weight = lambda.ln();
            } else {
                for _ in 0..k {
                    let (_, a) = queries[q];
                    let p = parents[q];
                    q += 1;
                    if env.is_reachable(p.x, p.y, t - 1) {
                        plan.inflow.push(rows.len());
                        rows.push((p.x, p.y, t - 1, a));
                    }
                }
            }
            if t < horizon {
                for _ in 0..k {
                    plan.outflow.push(rows.len());
                    rows.push((s.x, s.y, t, uniform_action(rng)));
                }
            } else {
                plan.reward = lambda * terminal_rewards[b].max(0.0);
            }
            plans.push(plan);
        }
    }

    let mut input = Array2::zeros((rows.len(), 5));
    for (mut row, &(x, y, t, a)) in input.rows_mut().into_iter().zip(&rows) {
        flow.write_row(row.as_slice_mut().expect("row-major"), x, y, t, a);
    }
    let acts = flow.net.forward_cached(input)?;
    let logs = acts.output().column(0).to_owned();
    let mut upstream = Array2::zeros((rows.len(), 1));
    let scale = 1.0 / trajectories.len() as f64;
    let mut loss = 0.0;
    let mut terms = Vec::with_capacity(plans.len());
    for plan in &plans {
        let in_logs: Vec<f64> = plan.inflow.iter().map(|&i| logs[i] + plan.inflow_log_weight).collect();
        let out_logs: Vec<f64> = plan.outflow.iter().map(|&i| logs[i]).collect();
        let inflow: f64 = in_logs.iter().map(|o| o.exp()).sum();
        let outflow: f64 = out_logs.iter().map(|o| o.exp()).sum();
        let residual;
        if cfg.log_space {
            let (lhs, w_in) = log_sum(cfg.epsilon, &in_logs);
            let (rhs, w_out) = log_sum(cfg.epsilon + plan.reward, &out_logs);
            residual = lhs - rhs;
            for (&i, w) in plan.inflow.iter().zip(w_in) {
                upstream[[i, 0]] += 2.0 * residual * w * scale;
            }
            for (&i, w) in plan.outflow.iter().zip(w_out) {
                upstream[[i, 0]] -= 2.0 * residual * w * scale;
            }
        } else {
            residual = inflow - plan.reward - outflow;
            for (&i, o) in plan.inflow.iter().zip(&in_logs) {
                upstream[[i, 0]] += 2.0 * residual * o.exp() * scale;
            }
            for (&i, o) in plan.outflow.iter().zip(&out_logs) {
                upstream[[i, 0]] -= 2.0 * residual * o.exp() * scale;
            }
        }
        loss += residual * residual * scale;
        terms.push(StateTerm {
            t: plan.t,
            inflow,
            reward: plan.reward,
            outflow,
            unmasked: plan.inflow.len(),
            residual,
        });
    }
    let (grads, _) = flow.net.backward(&acts, &upstream)?;
    Ok(FlowLoss { loss, grads, terms })
}

/// Index of a draw from `softmax(logs)`; uniform when no log-flow is finite.
pub fn sample_proportional(logs: &[f64], rng: &mut impl Rng) -> usize {
    let m = logs.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        log::warn!("all candidate flows vanished; choosing uniformly");
        return rng.random_range(0..logs.len());
    }
    let weights: Vec<f64> = logs
        .iter()
        .map(|&v| if v.is_finite() { (v - m).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(logs.len() - 1)
}

/// Draws `n` uniform candidate actions for each state and picks one per
/// state with probability proportional to its flow.
pub fn select_actions_flow(
    flow: &FlowNet,
    states: &[PointState],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Action>> {
    if n == 0 {
        return Err(Error::InvalidConfig("action buffer must be positive".into()));
    }
    let per_pass = (MAX_ROWS / n).max(1);
    let mut actions = Vec::with_capacity(states.len());
    for chunk in states.chunks(per_pass) {
        let mut candidates = Vec::with_capacity(chunk.len() * n);
        for s in chunk {
            for _ in 0..n {
                candidates.push((*s, uniform_action(rng)));
            }
        }
        let logs = flow.log_flows(&candidates)?;
        for (i, block) in logs.chunks(n).enumerate() {
            let j = sample_proportional(block, rng);
            actions.push(candidates[i * n + j].1);
        }
    }
    Ok(actions)
}

pub fn select_action_flow(flow: &FlowNet, state: &PointState, n: usize, rng: &mut impl Rng) -> Result<Action> {
    Ok(select_actions_flow(flow, std::slice::from_ref(state), n, rng)?[0])
}

/// The sampling policy `pi(a|s) ~ F(s, a)`.
pub struct FlowPolicy<'a> {
    pub flow: &'a FlowNet,
    pub action_buffer: usize,
}

impl Policy for FlowPolicy<'_> {
    fn act(&self, _env: &EnvConfig, state: &PointState, rng: &mut ChaCha8Rng) -> Action {
        select_action_flow(self.flow, state, self.action_buffer, rng).expect("flow net takes state-action input")
    }

    fn act_batch(&self, _env: &EnvConfig, states: &[PointState], rng: &mut ChaCha8Rng) -> Vec<Action> {
        select_actions_flow(self.flow, states, self.action_buffer, rng).expect("flow net takes state-action input")
    }
}

pub struct GFlowHfLearner {
    cfg: CFlowConfig,
    flow: FlowNet,
    adam: AdamState,
    retrieval: RetrievalNet,
    replay: ReplayBuffer,
    env: EnvConfig,
    start_training: u64,
    pub losses: Vec<f64>,
}

impl GFlowHfLearner {
    pub fn new(env: &EnvConfig, cfg: &CFlowConfig, retrieval: RetrievalNet, start_training: u64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut flow = FlowNet::new(&cfg.hidden, env.horizon, seed)?;
        // Start with flows on the scale of the highest grade.
        if let Some(b) = flow.net.biases_mut().last_mut() {
            b.fill((MAX_ORACLE_GRADE as f64).ln());
        }
        let adam = AdamState::for_net(&flow.net, AdamConfig::with_learning_rate(cfg.learning_rate));
        Ok(GFlowHfLearner {
            cfg: cfg.clone(),
            flow,
            adam,
            retrieval,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            env: env.clone(),
            start_training,
            losses: Vec::new(),
        })
    }

    pub fn flow(&self) -> &FlowNet {
        &self.flow
    }

    pub fn into_flow(self) -> FlowNet {
        self.flow
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }
}

impl Learner for GFlowHfLearner {
    fn explore(&mut self, _env: &EnvConfig, state: &PointState, rng: &mut ChaCha8Rng) -> Result<Action> {
        select_action_flow(&self.flow, state, self.cfg.action_buffer, rng)
    }

    fn after_episode(
        &mut self,
        trajectory: &Trajectory,
        timestep: u64,
        reward: &RewardModel,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.replay.push(trajectory.clone());
        if timestep < self.start_training {
            return Ok(());
        }
        for _ in 0..self.cfg.updates_per_episode {
            let batch = self.replay.sample(self.cfg.batch_size, rng);
            let out = sampled_flow_match_loss(
                &self.flow,
                &self.retrieval,
                &batch,
                reward,
                &self.env,
                &self.cfg,
                rng,
            )?;
            self.adam.step(&mut self.flow.net, &out.grads)?;
            self.losses.push(out.loss);
        }
        Ok(())
    }

    fn evaluate(&self, env: &EnvConfig, criteria: &AnswerCriteria, reward: &RewardModel, seed: u64) -> Result<Evaluation> {
        let policy = FlowPolicy {
            flow: &self.flow,
            action_buffer: self.cfg.action_buffer,
        };
        evaluate_policy(&policy, env, criteria, Some(reward), seed)
    }
}

pub struct GFlowHfOutcome {
    pub flow: FlowNet,
    pub outcome: LoopOutcome,
    pub losses: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn train_gflowhf(
    env: &EnvConfig,
    cfg: &CFlowConfig,
    retrieval: RetrievalNet,
    schedule: &Schedule,
    criteria: &AnswerCriteria,
    reward_cfg: &RewardModelConfig,
    labeler: &mut dyn Labeler,
    handle: &Arc<RunHandle>,
    seed: u64,
) -> Result<GFlowHfOutcome> {
    let mut learner = GFlowHfLearner::new(env, cfg, retrieval, schedule.start_training_timestep, seed)?;
    let outcome = run_loop(env, schedule, criteria, reward_cfg, &mut learner, labeler, handle, seed)?;
    let losses = std::mem::take(&mut learner.losses);
    Ok(GFlowHfOutcome {
        flow: learner.into_flow(),
        outcome,
        losses,
    })
}

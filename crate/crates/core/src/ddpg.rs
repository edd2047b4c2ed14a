//! DDPG-HF: an actor-critic baseline trained on the learned terminal reward.

use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, PointState};
use crate::error::{Error, Result};
use crate::feedback::{RewardModel, RewardModelConfig, RewardSource};
use crate::harness::labeling::{Labeler, RunHandle};
use crate::harness::metrics::{evaluate_policy, AnswerCriteria, Evaluation, Policy};
use crate::harness::training::{run_loop, Learner, LoopOutcome, Schedule, Transition};
use crate::nn::{AdamConfig, AdamState, DenseNet, OutputTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub noise_sigma: f64,
    pub updates_per_step: usize,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            actor_learning_rate: 3e-4,
            critic_learning_rate: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            buffer_capacity: 100_000,
            noise_sigma: 0.1,
            updates_per_step: 1,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::InvalidConfig("batch_size and buffer_capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig("gamma and tau must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ring buffer of transitions. Rewards are not stored: the terminal reward
/// is read from the current reward model whenever a batch is drawn.
#[derive(Clone, Debug)]
pub struct TransitionBuffer {
    items: Vec<Transition>,
    head: usize,
    capacity: usize,
}

impl TransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        TransitionBuffer {
            items: Vec::new(),
            head: 0,
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
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

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Transition> {
        (0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdpgLosses {
    pub critic: f64,
    pub actor: f64,
}

#[derive(Clone, Debug)]
pub struct DdpgAgent {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub actor_target: DenseNet,
    pub critic_target: DenseNet,
    actor_adam: AdamState,
    critic_adam: AdamState,
    cfg: DdpgConfig,
    horizon: usize,
}

impl DdpgAgent {
    pub fn new(cfg: &DdpgConfig, horizon: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut a_sizes = vec![3];
        a_sizes.extend(&cfg.actor_hidden);
        a_sizes.push(2);
        let mut c_sizes = vec![5];
        c_sizes.extend(&cfg.critic_hidden);
        c_sizes.push(1);
        let actor = DenseNet::new(&a_sizes, OutputTransform::Sigmoid, seed)?;
        let critic = DenseNet::new(&c_sizes, OutputTransform::Identity, seed.wrapping_add(1))?;
        Ok(DdpgAgent {
            actor_adam: AdamState::for_net(&actor, AdamConfig::with_learning_rate(cfg.actor_learning_rate)),
            critic_adam: AdamState::for_net(&critic, AdamConfig::with_learning_rate(cfg.critic_learning_rate)),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            cfg: cfg.clone(),
            horizon,
        })
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.cfg
    }

    fn state_row(&self, s: &PointState) -> [f64; 3] {
        let h = self.horizon as f64;
        [s.x / h, s.y / h, s.t as f64 / h]
    }

    fn states_matrix(&self, states: &[PointState]) -> Array2<f64> {
        Array2::from_shape_fn((states.len(), 3), |(r, c)| self.state_row(&states[r])[c])
    }

    fn critic_input(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        ndarray::concatenate![ndarray::Axis(1), *states, *actions]
    }

    /// Noise-free actor outputs.
    pub fn act_batch(&self, states: &[PointState]) -> Result<Vec<Action>> {
        let out = self.actor.forward_batch(&self.states_matrix(states))?;
        Ok(out.rows().into_iter().map(|r| Action::new(r[0], r[1])).collect())
    }

    pub fn q_values(&self, states: &[PointState], actions: &[Action]) -> Result<Vec<f64>> {
        let a = Array2::from_shape_fn((actions.len(), 2), |(r, c)| if c == 0 { actions[r].dx } else { actions[r].dy });
        let q = self.critic.forward_batch(&self.critic_input(&self.states_matrix(states), &a))?;
        Ok(q.into_raw_vec_and_offset().0)
    }

    /// Bootstrapped regression targets `r + gamma (1 - d) Q'(s', mu'(s'))`.
    pub fn critic_targets(&self, batch: &[Transition], reward: &dyn RewardSource) -> Result<Vec<f64>> {
        let next: Vec<PointState> = batch.iter().map(|t| t.next).collect();
        let next_m = self.states_matrix(&next);
        let next_a = self.actor_target.forward_batch(&next_m)?;
        let q_next = self.critic_target.forward_batch(&self.critic_input(&next_m, &next_a))?;
        let terminal_pos: Vec<_> = batch.iter().filter(|t| t.terminal).map(|t| t.next.position()).collect();
        let mut terminal_r = reward.rewards(&terminal_pos).into_iter();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.terminal {
                    terminal_r.next().expect("one reward per terminal transition")
                } else {
                    self.cfg.gamma * q_next[[i, 0]]
                }
            })
            .collect())
    }

    /// One critic step, one actor step and the Polyak update of both targets
    /// on `batch`.
    pub fn update_on(&mut self, batch: &[Transition], reward: &dyn RewardSource) -> Result<DdpgLosses> {
        let n = batch.len() as f64;
        let targets = self.critic_targets(batch, reward)?;
        let states: Vec<PointState> = batch.iter().map(|t| t.state).collect();
        let s_m = self.states_matrix(&states);
        let a_m = Array2::from_shape_fn((batch.len(), 2), |(r, c)| {
            if c == 0 {
                batch[r].action.dx
            } else {
                batch[r].action.dy
            }
        });

        let acts = self.critic.forward_cached(self.critic_input(&s_m, &a_m))?;
        let mut upstream = Array2::zeros((batch.len(), 1));
        let mut critic_loss = 0.0;
        for (i, y) in targets.iter().enumerate() {
            let err = acts.output()[[i, 0]] - y;
            critic_loss += err * err / n;
            upstream[[i, 0]] = 2.0 * err / n;
        }
        let (grads, _) = self.critic.backward(&acts, &upstream)?;
        self.critic_adam.step(&mut self.critic, &grads)?;

        let actor_acts = self.actor.forward_cached(s_m.clone())?;
        let q_acts = self
            .critic
            .forward_cached(self.critic_input(&s_m, actor_acts.output()))?;
        let actor_loss = -q_acts.output().sum() / n;
        let (_, input_grad) = self
            .critic
            .backward(&q_acts, &Array2::from_elem((batch.len(), 1), -1.0 / n))?;
        let action_grad = input_grad.slice(s![.., 3..5]).to_owned();
        let (actor_grads, _) = self.actor.backward(&actor_acts, &action_grad)?;
        self.actor_adam.step(&mut self.actor, &actor_grads)?;

        self.actor_target.polyak_update(&self.actor, self.cfg.tau)?;
        self.critic_target.polyak_update(&self.critic, self.cfg.tau)?;
        Ok(DdpgLosses {
            critic: critic_loss,
            actor: actor_loss,
        })
    }
}

/// Actor output plus Gaussian noise, clipped to the action box.
pub fn select_action_ddpg(
    agent: &DdpgAgent,
    state: &PointState,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<Action> {
    let a = agent.act_batch(std::slice::from_ref(state))?[0];
    if noise_sigma == 0.0 {
        return Ok(a);
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(Action::new(a.dx + noise.sample(rng), a.dy + noise.sample(rng)).clamped())
}

/// One update from a uniformly drawn batch; `None` while the buffer is
/// smaller than a batch.
pub fn ddpg_update(
    agent: &mut DdpgAgent,
    buffer: &TransitionBuffer,
    reward: &dyn RewardSource,
    rng: &mut impl Rng,
) -> Result<Option<DdpgLosses>> {
    let n = agent.cfg.batch_size;
    if buffer.len() < n {
        return Ok(None);
    }
    let batch = buffer.sample(n, rng);
    agent.update_on(&batch, reward).map(Some)
}

pub struct ActorPolicy<'a>(pub &'a DdpgAgent);

impl Policy for ActorPolicy<'_> {
    fn act(&self, _env: &EnvConfig, state: &PointState, _rng: &mut ChaCha8Rng) -> Action {
        self.0.act_batch(std::slice::from_ref(state)).expect("actor takes state input")[0]
    }

    fn act_batch(&self, _env: &EnvConfig, states: &[PointState], _rng: &mut ChaCha8Rng) -> Vec<Action> {
        self.0.act_batch(states).expect("actor takes state input")
    }
}

pub struct DdpgLearner {
    agent: DdpgAgent,
    buffer: TransitionBuffer,
    start_training: u64,
    steps: u64,
    pub critic_losses: Vec<f64>,
}

impl DdpgLearner {
    pub fn new(cfg: &DdpgConfig, horizon: usize, start_training: u64, seed: u64) -> Result<Self> {
        Ok(DdpgLearner {
            agent: DdpgAgent::new(cfg, horizon, seed)?,
            buffer: TransitionBuffer::new(cfg.buffer_capacity),
            start_training,
            steps: 0,
            critic_losses: Vec::new(),
        })
    }

    pub fn agent(&self) -> &DdpgAgent {
        &self.agent
    }
}

impl Learner for DdpgLearner {
    fn explore(&mut self, _env: &EnvConfig, state: &PointState, rng: &mut ChaCha8Rng) -> Result<Action> {
        if self.steps < self.start_training {
            return Ok(Action::new(rng.random(), rng.random()));
        }
        select_action_ddpg(&self.agent, state, self.agent.cfg.noise_sigma, rng)
    }

    fn after_step(
        &mut self,
        transition: &Transition,
        timestep: u64,
        reward: &RewardModel,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.steps = timestep;
        self.buffer.push(*transition);
        if timestep < self.start_training {
            return Ok(());
        }
        for _ in 0..self.agent.cfg.updates_per_step {
            if let Some(l) = ddpg_update(&mut self.agent, &self.buffer, reward, rng)? {
                if !l.critic.is_finite() {
                    return Err(Error::Shape(format!("critic loss diverged at step {timestep}")));
                }
                self.critic_losses.push(l.critic);
            }
        }
        Ok(())
    }

    fn evaluate(&self, env: &EnvConfig, criteria: &AnswerCriteria, reward: &RewardModel, seed: u64) -> Result<Evaluation> {
        evaluate_policy(&ActorPolicy(&self.agent), env, criteria, Some(reward), seed)
    }
}

pub struct DdpgOutcome {
    pub agent: DdpgAgent,
    pub outcome: LoopOutcome,
    pub critic_losses: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn train_ddpg_hf(
    env: &EnvConfig,
    cfg: &DdpgConfig,
    schedule: &Schedule,
    criteria: &AnswerCriteria,
    reward_cfg: &RewardModelConfig,
    labeler: &mut dyn Labeler,
    handle: &Arc<RunHandle>,
    seed: u64,
) -> Result<DdpgOutcome> {
    let mut learner = DdpgLearner::new(cfg, env.horizon, schedule.start_training_timestep, seed)?;
    let outcome = run_loop(env, schedule, criteria, reward_cfg, &mut learner, labeler, handle, seed)?;
    Ok(DdpgOutcome {
        agent: learner.agent,
        outcome,
        critic_losses: learner.critic_losses,
    })
}


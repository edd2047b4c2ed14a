//! The episode loop shared by both learners: roll out, label, fit the
//! reward model, let the learner update, evaluate on a fixed cadence.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, PointState, Trajectory};
use crate::error::{Error, Result};
use crate::feedback::{RewardModel, RewardModelConfig};
use crate::harness::labeling::{Labeler, RunHandle};
use crate::harness::metrics::{AnswerCriteria, Evaluation, MetricRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_timesteps: u64,
    /// No learner updates happen before this many environment steps.
    pub start_training_timestep: u64,
    pub eval_interval: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            total_timesteps: 20_000,
            start_training_timestep: 1_500,
            eval_interval: 1_000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_timesteps == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidConfig(
                "total_timesteps and eval_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of metric rows a full run produces.
    pub fn n_evaluations(&self) -> u64 {
        self.total_timesteps / self.eval_interval + 1
    }
}

/// One environment transition as seen by a learner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: PointState,
    pub action: Action,
    pub next: PointState,
    pub terminal: bool,
}

pub trait Learner {
    fn explore(&mut self, env: &EnvConfig, state: &PointState, rng: &mut ChaCha8Rng) -> Result<Action>;

    fn after_step(
        &mut self,
        _transition: &Transition,
        _timestep: u64,
        _reward: &RewardModel,
        _rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        Ok(())
    }

    fn after_episode(
        &mut self,
        _trajectory: &Trajectory,
        _timestep: u64,
        _reward: &RewardModel,
        _rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        Ok(())
    }

    /// Evaluation rollouts with the learner's greedy or sampling policy.
    fn evaluate(
        &self,
        env: &EnvConfig,
        criteria: &AnswerCriteria,
        reward: &RewardModel,
        seed: u64,
    ) -> Result<Evaluation>;
}

pub struct LoopOutcome {
    pub reward_model: RewardModel,
    pub metrics: Vec<MetricRow>,
    pub final_evaluation: Evaluation,
    pub episodes: u64,
}

fn eval_seed(seed: u64, timestep: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ timestep.wrapping_add(0xA5A5)
}

#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    env: &EnvConfig,
    schedule: &Schedule,
    criteria: &AnswerCriteria,
    reward_cfg: &RewardModelConfig,
    learner: &mut dyn Learner,
    labeler: &mut dyn Labeler,
    handle: &Arc<RunHandle>,
    seed: u64,
) -> Result<LoopOutcome> {
    env.validate()?;
    schedule.validate()?;
    criteria.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reward_rng = ChaCha8Rng::seed_from_u64(seed);
    reward_rng.set_stream(1);
    let mut reward_model = RewardModel::new(reward_cfg, env.horizon, seed.wrapping_add(17))?;
    let mut metrics = Vec::new();

    let mut evaluate = |timestep: u64, reward_model: &RewardModel, learner: &dyn Learner| -> Result<Evaluation> {
        let mut ev = learner.evaluate(env, criteria, reward_model, eval_seed(seed, timestep))?;
        ev.row.timestep = timestep;
        ev.row.wall_time = started.elapsed().as_secs_f64();
        log::info!(
            "t={timestep} score={:.3} model={:.3} answers={}",
            ev.row.avg_true_score,
            ev.row.avg_model_reward,
            ev.row.n_valid_distinct
        );
        handle.push_metrics(ev.row.clone(), ev.answers.clone());
        metrics.push(ev.row.clone());
        Ok(ev)
    };

    let mut last = evaluate(0, &reward_model, &*learner)?;
    let mut timestep = 0u64;
    let mut episode_id = 0u64;
    while timestep < schedule.total_timesteps {
        if handle.is_cancelled() {
            return Err(Error::Cancelled);
        }
        let mut traj = Trajectory::start(env.reset());
        while !env.is_terminal(traj.final_state()) && timestep < schedule.total_timesteps {
            let state = *traj.final_state();
            let action = learner.explore(env, &state, &mut rng)?;
            let next = env.step(&state, action)?;
            traj.push(action, next);
            timestep += 1;
            let transition = Transition {
                state,
                action,
                next,
                terminal: env.is_terminal(&next),
            };
            learner.after_step(&transition, timestep, &reward_model, &mut rng)?;
            if timestep % schedule.eval_interval == 0 {
                last = evaluate(timestep, &reward_model, &*learner)?;
            }
        }
        if !traj.is_complete(env) {
            break;
        }
        labeler.submit(episode_id, &traj, timestep)?;
        episode_id += 1;
        let n_labels = handle.store().len();
        if n_labels >= reward_cfg.min_labels.max(1) {
            handle.store().read(|store| {
                reward_model.train(store, reward_cfg.steps_per_episode, reward_cfg.batch_size, &mut reward_rng)
            })?;
        }
        learner.after_episode(&traj, timestep, &reward_model, &mut rng)?;
        handle.set_timestep(timestep);
    }
    handle.set_timestep(timestep);
    Ok(LoopOutcome {
        reward_model,
        metrics,
        final_evaluation: last,
        episodes: episode_id,
    })
}

//! Evaluation metrics: trajectory distance, valid-distinctive answers and
//! the per-checkpoint metric row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, Point, PointState, Trajectory};
use crate::error::{Error, Result};
use crate::feedback::{RewardModel, ScriptedLabeler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerCriteria {
    /// Minimum clean-oracle grade of an answer.
    pub delta_r: u8,
    /// Minimum trajectory MSE to every previously accepted answer.
    pub delta_mse: f64,
    pub eval_episodes: usize,
}

impl Default for AnswerCriteria {
    fn default() -> Self {
        AnswerCriteria {
            delta_r: 4,
            delta_mse: 2.0,
            eval_episodes: 100,
        }
    }
}

impl AnswerCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.delta_r) {
            return Err(Error::InvalidConfig("delta_r must be in 1..=5".into()));
        }
        if !(self.delta_mse > 0.0) {
            return Err(Error::InvalidConfig("delta_mse must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::InvalidConfig("eval_episodes must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over steps of the squared distance between the two position sequences.
pub fn trajectory_mse(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.states.len() != b.states.len() {
        return Err(Error::Shape(format!(
            "trajectories have {} and {} states",
            a.states.len(),
            b.states.len()
        )));
    }
    if a.states.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a
        .positions()
        .zip(b.positions())
        .map(|(p, q)| p.squared_distance(q))
        .sum();
    Ok(total / a.states.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub episode_id: u64,
    pub grade: u8,
    pub trajectory: Trajectory,
}

/// Greedy, order-preserving filter: keep a trajectory when its grade reaches
/// `delta_r` and it is more than `delta_mse` away from everything kept so far.
pub fn count_valid_distinct(
    trajectories: &[Trajectory],
    grades: &[u8],
    criteria: &AnswerCriteria,
) -> Result<(usize, Vec<Answer>)> {
    if trajectories.len() != grades.len() {
        return Err(Error::Shape(format!(
            "{} trajectories but {} grades",
            trajectories.len(),
            grades.len()
        )));
    }
    let mut kept: Vec<Answer> = Vec::new();
    for (i, (tr, &g)) in trajectories.iter().zip(grades).enumerate() {
        if g < criteria.delta_r {
            continue;
        }
        let mut distinct = true;
        for k in &kept {
            if trajectory_mse(tr, &k.trajectory)? <= criteria.delta_mse {
                distinct = false;
                break;
            }
        }
        if distinct {
            kept.push(Answer {
                episode_id: i as u64,
                grade: g,
                trajectory: tr.clone(),
            });
        }
    }
    Ok((kept.len(), kept))
}

/// For each goal, whether some answer ends within `radius` of it.
pub fn goals_covered(answers: &[Answer], goals: &[Point], radius: f64) -> Vec<bool> {
    goals
        .iter()
        .map(|g| {
            answers
                .iter()
                .any(|a| a.trajectory.final_position().distance(*g) <= radius)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub timestep: u64,
    pub avg_true_score: f64,
    pub avg_model_reward: f64,
    pub n_valid_distinct: usize,
    /// Seconds since the run started; not part of `metrics.csv`.
    pub wall_time: f64,
}

pub const METRICS_CSV_HEADER: &str = "timestep,avg_true_score,avg_model_reward,n_valid_distinct";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.timestep, self.avg_true_score, self.avg_model_reward, self.n_valid_distinct
        )
    }
}

/// Something that picks actions for evaluation rollouts.
pub trait Policy {
    fn act(&self, env: &EnvConfig, state: &PointState, rng: &mut ChaCha8Rng) -> Action;

    /// Actions for many states at once; the default defers to [`Policy::act`].
    fn act_batch(&self, env: &EnvConfig, states: &[PointState], rng: &mut ChaCha8Rng) -> Vec<Action> {
        states.iter().map(|s| self.act(env, s, rng)).collect()
    }
}

impl<F> Policy for F
where
    F: Fn(&EnvConfig, &PointState, &mut ChaCha8Rng) -> Action,
{
    fn act(&self, env: &EnvConfig, state: &PointState, rng: &mut ChaCha8Rng) -> Action {
        self(env, state, rng)
    }
}

/// Rolls `count` episodes in lock step.
pub fn rollout_batch(
    policy: &impl Policy,
    env: &EnvConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    let mut trajectories: Vec<Trajectory> = (0..count).map(|_| Trajectory::start(env.reset())).collect();
    for _ in 0..env.horizon {
        let states: Vec<PointState> = trajectories.iter().map(|t| *t.final_state()).collect();
        let actions = policy.act_batch(env, &states, rng);
        for ((tr, s), a) in trajectories.iter_mut().zip(&states).zip(actions) {
            let next = env.step(s, a)?;
            tr.push(a, next);
        }
    }
    Ok(trajectories)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub row: MetricRow,
    pub trajectories: Vec<Trajectory>,
    /// Clean-oracle grade of each trajectory's endpoint.
    pub grades: Vec<u8>,
    pub answers: Vec<Answer>,
}

impl Evaluation {
    pub fn endpoints(&self) -> Vec<Point> {
        self.trajectories.iter().map(Trajectory::final_position).collect()
    }
}

/// Rolls `criteria.eval_episodes` evaluation episodes and grades every
/// endpoint with the clean oracle. The policy's own randomness comes from
/// `seed`, so repeated calls agree.
pub fn evaluate_policy(
    policy: &impl Policy,
    env: &EnvConfig,
    criteria: &AnswerCriteria,
    reward_model: Option<&RewardModel>,
    seed: u64,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = rollout_batch(policy, env, criteria.eval_episodes, &mut rng)?;
    let oracle = ScriptedLabeler::clean();
    let endpoints: Vec<Point> = trajectories.iter().map(Trajectory::final_position).collect();
    let grades: Vec<u8> = endpoints.iter().map(|p| oracle.grade(*p, &env.goals)).collect();
    let n = grades.len() as f64;
    let avg_true_score = grades.iter().map(|&g| g as f64).sum::<f64>() / n;
    let avg_model_reward = reward_model
        .map(|m| m.predict_batch(&endpoints).iter().sum::<f64>() / n)
        .unwrap_or(0.0);
    let (n_valid_distinct, answers) = count_valid_distinct(&trajectories, &grades, criteria)?;
    Ok(Evaluation {
        row: MetricRow {
            timestep: 0,
            avg_true_score,
            avg_model_reward,
            n_valid_distinct,
            wall_time: 0.0,
        },
        trajectories,
        grades,
        answers,
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx * vy).sqrt()
}

//! Flow matching on the grid DAG.
//!
//! Edge flows are kept as a table of log-flows. The residual at a state is
//! `inflow - reward - outflow`; interior states carry no reward, so the
//! terminal rewards are the only sources the flows must explain. An exact
//! backward-induction solution ([`exact_flows`]) serves as ground truth.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, GridAction, GridSpec, GridState, GridTrajectory, Point};
use crate::feedback::GradeBands;
use crate::nn::{AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("reward {reward} at {state} must be strictly positive")]
    InvalidReward { state: GridState, reward: f64 },
    #[error("all outgoing flows at {0} are zero")]
    DegenerateFlow(GridState),
    #[error("invalid flow-matching configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("flow table parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMatchConfig {
    pub log_space: bool,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub training_steps: usize,
    /// Probability of a uniform action while sampling training trajectories.
    pub exploration: f64,
    /// Apply the reward function at interior states as well as terminals.
    pub reward_at_every_state: bool,
}

impl Default for FlowMatchConfig {
    fn default() -> Self {
        FlowMatchConfig {
            log_space: true,
            epsilon: 1.0,
            learning_rate: 0.01,
            training_steps: 20_000,
            exploration: 0.1,
            reward_at_every_state: false,
        }
    }
}

impl FlowMatchConfig {
    pub fn raw_space() -> Self {
        FlowMatchConfig {
            log_space: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_space && self.epsilon <= 0.0 {
            return Err(FlowError::InvalidConfig("epsilon must be positive in log space".into()));
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(FlowError::InvalidConfig("exploration must be a probability".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(FlowError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

pub type Edge = (GridState, GridAction);

/// Log-flow for every edge of a grid, stored densely in a fixed edge order.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFlowTable {
    grid: GridSpec,
    edges: Vec<Edge>,
    index: HashMap<Edge, usize>,
    log_flows: Vec<f64>,
}

impl EdgeFlowTable {
    /// Every edge has log-flow 0 (flow 1).
    pub fn uniform(grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        let mut edges = Vec::new();
        for s in grid.states() {
            for (a, _) in grid.children(s) {
                edges.push((s, a));
            }
        }
        let index = edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        let log_flows = vec![0.0; edges.len()];
        Ok(EdgeFlowTable {
            grid,
            edges,
            index,
            log_flows,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn log_flows(&self) -> &[f64] {
        &self.log_flows
    }

    pub fn log_flows_mut(&mut self) -> &mut [f64] {
        &mut self.log_flows
    }

    pub fn edge_index(&self, s: GridState, a: GridAction) -> Option<usize> {
        self.index.get(&(s, a)).copied()
    }

    pub fn log_flow(&self, s: GridState, a: GridAction) -> Option<f64> {
        self.edge_index(s, a).map(|i| self.log_flows[i])
    }

    pub fn flow(&self, s: GridState, a: GridAction) -> Option<f64> {
        self.log_flow(s, a).map(f64::exp)
    }

    pub fn set_log_flow(&mut self, s: GridState, a: GridAction, value: f64) -> bool {
        match self.edge_index(s, a) {
            Some(i) => {
                self.log_flows[i] = value;
                true
            }
            None => false,
        }
    }

    pub fn inflow(&self, s: GridState) -> f64 {
        self.grid
            .parents(s)
            .into_iter()
            .filter_map(|(p, a)| self.flow(p, a))
            .sum()
    }

    pub fn outflow(&self, s: GridState) -> f64 {
        self.grid
            .children(s)
            .into_iter()
            .filter_map(|(a, _)| self.flow(s, a))
            .sum()
    }

    /// Forward policy at `s`: `F(s, a) / sum_a' F(s, a')` for each legal action.
    pub fn action_probabilities(&self, s: GridState) -> Result<Vec<(GridAction, GridState, f64)>> {
        let children = self.grid.children(s);
        let logs: Vec<f64> = children
            .iter()
            .map(|(a, _)| self.log_flow(s, *a).unwrap_or(f64::NEG_INFINITY))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(FlowError::DegenerateFlow(s));
        }
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Ok(children
            .into_iter()
            .zip(weights)
            .map(|((a, c), w)| (a, c, w / total))
            .collect())
    }

    /// `"i,j,action" -> log-flow`; zero flows are written as `null`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, Option<f64>> = self
            .edges
            .iter()
            .zip(&self.log_flows)
            .map(|((s, a), &v)| {
                (
                    format!("{},{},{}", s.i, s.j, a.as_str()),
                    v.is_finite().then_some(v),
                )
            })
            .collect();
        serde_json::to_string(&map).expect("flow table serializes")
    }

    pub fn from_json(grid: GridSpec, text: &str) -> Result<Self> {
        let map: BTreeMap<String, Option<f64>> =
            serde_json::from_str(text).map_err(|e| FlowError::Parse(e.to_string()))?;
        let mut table = Self::uniform(grid)?;
        if map.len() != table.len() {
            return Err(FlowError::Parse(format!(
                "expected {} edges, found {}",
                table.len(),
                map.len()
            )));
        }
        for (key, value) in map {
            let parts: Vec<&str> = key.split(',').collect();
            let parsed = match parts.as_slice() {
                [i, j, a] => i
                    .parse()
                    .ok()
                    .zip(j.parse().ok())
                    .zip(GridAction::parse(a))
                    .map(|((i, j), a)| (GridState::new(i, j), a)),
                _ => None,
            };
            let (s, a) = parsed.ok_or_else(|| FlowError::Parse(format!("bad edge key {key:?}")))?;
            if !table.set_log_flow(s, a, value.unwrap_or(f64::NEG_INFINITY)) {
                return Err(FlowError::Parse(format!("{key:?} is not an edge of the grid")));
            }
        }
        Ok(table)
    }
}

/// Exact flows for `reward` on the terminal states.
///
/// State flows are computed by backward induction; each state's flow is
/// split evenly over its incoming edges. Any such split satisfies flow
/// matching everywhere and yields terminal probabilities `R / sum(R)`.
pub fn exact_flows(grid: &GridSpec, reward: impl Fn(GridState) -> f64) -> Result<EdgeFlowTable> {
    let mut table = EdgeFlowTable::uniform(*grid)?;
    let mut edge_flow = vec![0.0; table.len()];
    let mut states = grid.states();
    states.reverse();
    for s in states {
        if s.depth() == 0 {
            continue;
        }
        let state_flow = if grid.is_terminal(s) {
            let r = reward(s);
            if !(r > 0.0 && r.is_finite()) {
                return Err(FlowError::InvalidReward { state: s, reward: r });
            }
            r
        } else {
            grid.children(s)
                .iter()
                .map(|(a, _)| edge_flow[table.edge_index(s, *a).expect("child edge")])
                .sum()
        };
        let parents = grid.parents(s);
        let share = state_flow / parents.len() as f64;
        for (p, a) in parents {
            edge_flow[table.edge_index(p, a).expect("parent edge")] = share;
        }
    }
    for (lf, f) in table.log_flows_mut().iter_mut().zip(edge_flow) {
        *lf = f.ln();
    }
    Ok(table)
}

fn state_reward(
    grid: &GridSpec,
    s: GridState,
    reward: &impl Fn(GridState) -> f64,
    cfg: &FlowMatchConfig,
) -> f64 {
    if grid.is_terminal(s) || cfg.reward_at_every_state {
        reward(s)
    } else {
        0.0
    }
}

/// Flow-matching residual at a single state.
pub fn state_residual(
    flow: &EdgeFlowTable,
    s: GridState,
    reward: &impl Fn(GridState) -> f64,
    cfg: &FlowMatchConfig,
) -> f64 {
    let inflow = flow.inflow(s);
    let outflow = flow.outflow(s);
    let r = state_reward(flow.grid(), s, reward, cfg);
    if cfg.log_space {
        (cfg.epsilon + inflow).ln() - (cfg.epsilon + r + outflow).ln()
    } else {
        inflow - r - outflow
    }
}

/// Sum of squared residuals over `s_1..s_f` of `trajectory`, and its gradient
/// with respect to every log-flow in the table.
pub fn flow_match_loss_discrete(
    flow: &EdgeFlowTable,
    trajectory: &GridTrajectory,
    reward: impl Fn(GridState) -> f64,
    cfg: &FlowMatchConfig,
) -> Result<(f64, Vec<f64>)> {
    trajectory.validate(flow.grid())?;
    let grid = flow.grid();
    let mut grads = vec![0.0; flow.len()];
    let mut loss = 0.0;
    for &s in &trajectory.states[1..] {
        let in_edges: Vec<usize> = grid
            .parents(s)
            .into_iter()
            .filter_map(|(p, a)| flow.edge_index(p, a))
            .collect();
        let out_edges: Vec<usize> = grid
            .children(s)
            .into_iter()
            .filter_map(|(a, _)| flow.edge_index(s, a))
            .collect();
        let f = |i: &usize| flow.log_flows()[*i].exp();
        let inflow: f64 = in_edges.iter().map(f).sum();
        let outflow: f64 = out_edges.iter().map(f).sum();
        let r = state_reward(grid, s, &reward, cfg);
        let (res, d_in, d_out) = if cfg.log_space {
            let (a, b) = (cfg.epsilon + inflow, cfg.epsilon + r + outflow);
            (a.ln() - b.ln(), 1.0 / a, -1.0 / b)
        } else {
            (inflow - r - outflow, 1.0, -1.0)
        };
        loss += res * res;
        for i in &in_edges {
            grads[*i] += 2.0 * res * d_in * f(i);
        }
        for i in &out_edges {
            grads[*i] += 2.0 * res * d_out * f(i);
        }
    }
    Ok((loss, grads))
}

fn sample_with(
    flow: &EdgeFlowTable,
    exploration: f64,
    rng: &mut impl Rng,
) -> Result<GridTrajectory> {
    let grid = flow.grid();
    let mut s = grid.root();
    let mut tr = GridTrajectory {
        states: vec![s],
        actions: Vec::new(),
    };
    while !grid.is_terminal(s) {
        let probs = flow.action_probabilities(s)?;
        let (a, c) = if exploration > 0.0 && rng.random::<f64>() < exploration {
            let (a, c, _) = probs[rng.random_range(0..probs.len())];
            (a, c)
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = (probs[0].0, probs[0].1);
            for &(a, c, p) in &probs {
                if p <= 0.0 {
                    continue;
                }
                pick = (a, c);
                acc += p;
                if u < acc {
                    break;
                }
            }
            pick
        };
        tr.actions.push(a);
        tr.states.push(c);
        s = c;
    }
    Ok(tr)
}

/// Rolls out the flow policy from `(0, 0)` to a terminal state.
pub fn sample_grid_trajectory(flow: &EdgeFlowTable, rng: &mut impl Rng) -> Result<GridTrajectory> {
    sample_with(flow, 0.0, rng)
}

pub fn sample_grid_trajectory_seeded(flow: &EdgeFlowTable, seed: u64) -> Result<GridTrajectory> {
    sample_grid_trajectory(flow, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Exact probability of ending in each terminal state, in [`GridSpec::terminal_states`] order.
pub fn terminal_distribution(flow: &EdgeFlowTable) -> Result<Vec<(GridState, f64)>> {
    let grid = flow.grid();
    let mut visit: HashMap<GridState, f64> = HashMap::new();
    visit.insert(grid.root(), 1.0);
    for s in grid.states() {
        if grid.is_terminal(s) {
            continue;
        }
        let p = visit.get(&s).copied().unwrap_or(0.0);
        if p == 0.0 {
            continue;
        }
        for (_, c, q) in flow.action_probabilities(s)? {
            *visit.entry(c).or_insert(0.0) += p * q;
        }
    }
    Ok(grid
        .terminal_states()
        .into_iter()
        .map(|s| (s, visit.get(&s).copied().unwrap_or(0.0)))
        .collect())
}

/// Half the L1 distance between two distributions of equal support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Terminal rewards normalized to a distribution, in terminal-state order.
pub fn reward_distribution(grid: &GridSpec, reward: impl Fn(GridState) -> f64) -> Vec<f64> {
    let r: Vec<f64> = grid.terminal_states().into_iter().map(reward).collect();
    let z: f64 = r.iter().sum();
    r.into_iter().map(|v| v / z).collect()
}

/// Grades each terminal cell `(i, j)` by the oracle at the plane point `(i, j) * cell`.
pub fn oracle_band_rewards(grid: &GridSpec, goals: &[Point], cell: f64) -> BTreeMap<GridState, f64> {
    let bands = GradeBands::default();
    grid.terminal_states()
        .into_iter()
        .map(|s| {
            let p = Point::new(s.i as f64 * cell, s.j as f64 * cell);
            let d = goals.iter().map(|g| p.distance(*g)).fold(f64::INFINITY, f64::min);
            (s, bands.grade_for_distance(d) as f64)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DiscreteTraining {
    pub flow: EdgeFlowTable,
    pub losses: Vec<f64>,
}

/// Adam on the log-flow table, one sampled trajectory per step.
pub fn train_discrete(
    grid: &GridSpec,
    reward: impl Fn(GridState) -> f64,
    cfg: &FlowMatchConfig,
    seed: u64,
) -> Result<DiscreteTraining> {
    cfg.validate()?;
    let mut flow = EdgeFlowTable::uniform(*grid)?;
    let mut adam = AdamState::new(flow.len(), AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(cfg.training_steps);
    for _ in 0..cfg.training_steps {
        let tr = sample_with(&flow, cfg.exploration, &mut rng)?;
        let (loss, grads) = flow_match_loss_discrete(&flow, &tr, &reward, cfg)?;
        adam.update(flow.log_flows_mut(), &grads)
            .expect("gradient length matches table");
        losses.push(loss);
    }
    Ok(DiscreteTraining { flow, losses })
}

//! Point-Robot dynamics and the discrete grid DAG.
//!
//! The continuous robot starts at a fixed point and adds one action from
//! `[0, 1]^2` per step for a fixed horizon. The grid is a staircase DAG on
//! which every state is reached after exactly `i + j` unit moves, so its
//! parent and child sets are small and known in closed form.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack for float round-off when checking reachability of exact inverses.
const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
    #[error("episode is over at t = {0}")]
    EpisodeOver(usize),
    #[error("action ({dx}, {dy}) outside [0, 1]^2")]
    InvalidAction { dx: f64, dy: f64 },
    #[error("state at t = 0 has no parent")]
    NoParent,
    #[error("implied parent ({x}, {y}) at t = {t} is not reachable")]
    InvalidParent { x: f64, y: f64, t: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn squared_distance(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, usize)", into = "(f64, f64, usize)")]
pub struct PointState {
    pub x: f64,
    pub y: f64,
    pub t: usize,
}

impl PointState {
    pub const fn new(x: f64, y: f64, t: usize) -> Self {
        PointState { x, y, t }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

impl From<(f64, f64, usize)> for PointState {
    fn from((x, y, t): (f64, f64, usize)) -> Self {
        PointState { x, y, t }
    }
}

impl From<PointState> for (f64, f64, usize) {
    fn from(s: PointState) -> Self {
        (s.x, s.y, s.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub const fn new(dx: f64, dy: f64) -> Self {
        Action { dx, dy }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.dx) && (0.0..=1.0).contains(&self.dy)
    }

    pub fn clamped(self) -> Self {
        Action::new(self.dx.clamp(0.0, 1.0), self.dy.clamp(0.0, 1.0))
    }
}

impl From<[f64; 2]> for Action {
    fn from([dx, dy]: [f64; 2]) -> Self {
        Action { dx, dy }
    }
}

impl From<Action> for [f64; 2] {
    fn from(a: Action) -> Self {
        [a.dx, a.dy]
    }
}

/// Lebesgue measure of the action box `[0, 1]^2`.
pub const ACTION_SPACE_MEASURE: f64 = 1.0;

pub const DEFAULT_GOALS: [Point; 2] = [Point::new(5.0, 10.0), Point::new(10.0, 5.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub goals: Vec<Point>,
    pub horizon: usize,
    pub start: Point,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            goals: DEFAULT_GOALS.to_vec(),
            horizon: 12,
            start: Point::new(0.0, 0.0),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.goals.is_empty() {
            return Err(EnvError::InvalidConfig("at least one goal is required".into()));
        }
        Ok(())
    }

    pub fn reset(&self) -> PointState {
        PointState::new(self.start.x, self.start.y, 0)
    }

    pub fn is_terminal(&self, state: &PointState) -> bool {
        state.t >= self.horizon
    }

    pub fn step(&self, state: &PointState, action: Action) -> Result<PointState> {
        if self.is_terminal(state) {
            return Err(EnvError::EpisodeOver(state.t));
        }
        if !action.is_valid() {
            return Err(EnvError::InvalidAction {
                dx: action.dx,
                dy: action.dy,
            });
        }
        Ok(PointState::new(
            state.x + action.dx,
            state.y + action.dy,
            state.t + 1,
        ))
    }

    /// Whether `(x, y)` can be occupied at step `t`: each coordinate lies in
    /// `start + [0, t]`.
    pub fn is_reachable(&self, x: f64, y: f64, t: usize) -> bool {
        let span = t as f64 + BOUND_TOL;
        let (ox, oy) = (x - self.start.x, y - self.start.y);
        (-BOUND_TOL..=span).contains(&ox) && (-BOUND_TOL..=span).contains(&oy)
    }

    /// Whether `(x, y)` lies in the square `start + [0, T]^2` that bounds every rollout.
    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        self.is_reachable(x, y, self.horizon)
    }

    /// Exact inverse dynamics: the unique parent of `state` under `action`.
    pub fn inverse_step(&self, state: &PointState, action: Action) -> Result<PointState> {
        if state.t == 0 {
            return Err(EnvError::NoParent);
        }
        let (x, y, t) = (state.x - action.dx, state.y - action.dy, state.t - 1);
        if !self.in_bounds(x, y) {
            return Err(EnvError::InvalidParent { x, y, t });
        }
        Ok(PointState::new(x, y, t))
    }

    /// Network features of a state: `(x / T, y / T, t / T)`.
    pub fn state_features(&self, state: &PointState) -> [f64; 3] {
        let h = self.horizon as f64;
        [state.x / h, state.y / h, state.t as f64 / h]
    }

    pub fn nearest_goal_distance(&self, p: Point) -> f64 {
        self.goals
            .iter()
            .map(|g| p.distance(*g))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<PointState>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn start(state: PointState) -> Self {
        Trajectory {
            states: vec![state],
            actions: Vec::new(),
        }
    }

    pub fn push(&mut self, action: Action, next: PointState) {
        self.actions.push(action);
        self.states.push(next);
    }

    pub fn final_state(&self) -> &PointState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn final_position(&self) -> Point {
        self.final_state().position()
    }

    pub fn positions(&self) -> impl Iterator<Item = Point> + '_ {
        self.states.iter().map(PointState::position)
    }

    pub fn is_complete(&self, env: &EnvConfig) -> bool {
        self.states.len() == env.horizon + 1 && self.actions.len() == env.horizon
    }

    /// Checks that the trajectory starts at reset, has full length and that
    /// every consecutive pair follows the dynamics.
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if !self.is_complete(env) {
            return Err(EnvError::InvalidTrajectory(format!(
                "expected {} states and {} actions, got {} and {}",
                env.horizon + 1,
                env.horizon,
                self.states.len(),
                self.actions.len()
            )));
        }
        if self.states[0] != env.reset() {
            return Err(EnvError::InvalidTrajectory("does not start at reset state".into()));
        }
        for (t, (pair, a)) in self.states.windows(2).zip(&self.actions).enumerate() {
            let next = env
                .step(&pair[0], *a)
                .map_err(|e| EnvError::InvalidTrajectory(format!("step {t}: {e}")))?;
            let s = &pair[1];
            if s.t != next.t
                || (s.x - next.x).abs() > BOUND_TOL
                || (s.y - next.y).abs() > BOUND_TOL
            {
                return Err(EnvError::InvalidTrajectory(format!(
                    "step {t} does not follow the dynamics"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            width: 7,
            height: 7,
            horizon: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub i: usize,
    pub j: usize,
}

impl GridState {
    pub const fn new(i: usize, j: usize) -> Self {
        GridState { i, j }
    }

    pub fn depth(&self) -> usize {
        self.i + self.j
    }
}

impl fmt::Display for GridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.i, self.j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GridAction {
    #[serde(rename = "+x")]
    PlusX,
    #[serde(rename = "+y")]
    PlusY,
}

impl GridAction {
    pub const ALL: [GridAction; 2] = [GridAction::PlusX, GridAction::PlusY];

    pub fn as_str(self) -> &'static str {
        match self {
            GridAction::PlusX => "+x",
            GridAction::PlusY => "+y",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "+x" => Some(GridAction::PlusX),
            "+y" => Some(GridAction::PlusY),
            _ => None,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.horizon == 0 {
            return Err(EnvError::InvalidConfig("grid dimensions and horizon must be positive".into()));
        }
        if self.horizon > self.width.min(self.height) - 1 {
            return Err(EnvError::InvalidConfig(format!(
                "horizon {} exceeds min(width, height) - 1 for a {}x{} grid",
                self.horizon, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn root(&self) -> GridState {
        GridState::new(0, 0)
    }

    pub fn contains(&self, s: GridState) -> bool {
        s.i < self.width && s.j < self.height && s.depth() <= self.horizon
    }

    pub fn is_terminal(&self, s: GridState) -> bool {
        s.depth() == self.horizon
    }

    pub fn apply(&self, s: GridState, a: GridAction) -> Option<GridState> {
        if self.is_terminal(s) {
            return None;
        }
        let next = match a {
            GridAction::PlusX => GridState::new(s.i + 1, s.j),
            GridAction::PlusY => GridState::new(s.i, s.j + 1),
        };
        self.contains(next).then_some(next)
    }

    pub fn parents(&self, s: GridState) -> Vec<(GridState, GridAction)> {
        let mut out = Vec::with_capacity(2);
        if s.i > 0 {
            out.push((GridState::new(s.i - 1, s.j), GridAction::PlusX));
        }
        if s.j > 0 {
            out.push((GridState::new(s.i, s.j - 1), GridAction::PlusY));
        }
        out
    }

    pub fn children(&self, s: GridState) -> Vec<(GridAction, GridState)> {
        GridAction::ALL
            .iter()
            .filter_map(|&a| self.apply(s, a).map(|c| (a, c)))
            .collect()
    }

    /// Every state of the DAG, ordered by depth then `i`.
    pub fn states(&self) -> Vec<GridState> {
        let mut out = Vec::new();
        for d in 0..=self.horizon {
            for i in 0..=d {
                let s = GridState::new(i, d - i);
                if self.contains(s) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Terminal states ordered by `i`.
    pub fn terminal_states(&self) -> Vec<GridState> {
        self.states()
            .into_iter()
            .filter(|&s| self.is_terminal(s))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTrajectory {
    pub states: Vec<GridState>,
    pub actions: Vec<GridAction>,
}

impl GridTrajectory {
    pub fn final_state(&self) -> GridState {
        *self.states.last().expect("trajectory has at least one state")
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.states.first() != Some(&grid.root()) {
            return Err(EnvError::InvalidTrajectory("must start at (0, 0)".into()));
        }
        if self.actions.len() + 1 != self.states.len() {
            return Err(EnvError::InvalidTrajectory("one action per transition required".into()));
        }
        for (pair, &a) in self.states.windows(2).zip(&self.actions) {
            if grid.apply(pair[0], a) != Some(pair[1]) {
                return Err(EnvError::InvalidTrajectory(format!(
                    "{} --{}--> {} is not a grid edge",
                    pair[0],
                    a.as_str(),
                    pair[1]
                )));
            }
        }
        if !grid.is_terminal(self.final_state()) {
            return Err(EnvError::InvalidTrajectory("does not end at a terminal state".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn reset_returns_start() {
        let env = EnvConfig::default();
        assert_eq!(env.reset(), PointState::new(0.0, 0.0, 0));
        assert_eq!(env.reset(), env.reset());
        let shifted = EnvConfig {
            start: Point::new(1.0, 2.0),
            ..EnvConfig::default()
        };
        assert_eq!(shifted.reset(), PointState::new(1.0, 2.0, 0));
    }

    #[test]
    fn config_validation() {
        let mut env = EnvConfig::default();
        assert!(env.validate().is_ok());
        env.horizon = 0;
        assert!(env.validate().is_err());
        let env = EnvConfig {
            goals: vec![],
            ..EnvConfig::default()
        };
        assert!(env.validate().is_err());
    }

    #[test]
    fn step_examples() {
        let env = EnvConfig::default();
        let s = env.step(&env.reset(), Action::new(1.0, 1.0)).unwrap();
        assert_eq!(s, PointState::new(1.0, 1.0, 1));
        let terminal = env
            .step(&PointState::new(5.0, 9.0, 11), Action::new(0.0, 1.0))
            .unwrap();
        assert_eq!(terminal, PointState::new(5.0, 10.0, 12));
        assert!(env.is_terminal(&terminal));
        assert_eq!(terminal.position().distance(env.goals[0]), 0.0);
        assert_eq!(
            env.step(&PointState::new(3.0, 3.0, 12), Action::new(0.5, 0.5)),
            Err(EnvError::EpisodeOver(12))
        );
        assert!(matches!(
            env.step(&env.reset(), Action::new(1.5, 0.0)),
            Err(EnvError::InvalidAction { .. })
        ));
    }

    #[test]
    fn inverse_step_examples() {
        let env = EnvConfig::default();
        assert_eq!(
            env.inverse_step(&PointState::new(3.0, 4.0, 2), Action::new(1.0, 2.0)),
            Ok(PointState::new(2.0, 2.0, 1))
        );
        assert!(matches!(
            env.inverse_step(&PointState::new(0.5, 0.0, 1), Action::new(1.0, 0.0)),
            Err(EnvError::InvalidParent { .. })
        ));
        assert_eq!(
            env.inverse_step(&env.reset(), Action::new(0.0, 0.0)),
            Err(EnvError::NoParent)
        );
    }

    #[test]
    fn straight_rollouts_reach_both_goals() {
        let env = EnvConfig::default();
        for goal in &env.goals {
            let a = Action::new(goal.x / 12.0, goal.y / 12.0);
            let mut s = env.reset();
            let mut steps = 0;
            while !env.is_terminal(&s) {
                s = env.step(&s, a).unwrap();
                steps += 1;
            }
            assert_eq!(steps, 12);
            assert!(s.position().distance(*goal) < 1e-9);
        }
    }

    #[test]
    fn trajectory_json_shape() {
        let env = EnvConfig {
            horizon: 1,
            ..EnvConfig::default()
        };
        let mut tr = Trajectory::start(env.reset());
        tr.push(Action::new(0.5, 1.0), PointState::new(0.5, 1.0, 1));
        tr.validate(&env).unwrap();
        let json = serde_json::to_string(&tr).unwrap();
        assert_eq!(json, r#"{"states":[[0.0,0.0,0],[0.5,1.0,1]],"actions":[[0.5,1.0]]}"#);
        let back: Trajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tr);
        tr.states[1].x = 0.7;
        assert!(tr.validate(&env).is_err());
    }

    #[test]
    fn grid_parent_examples() {
        let g = GridSpec::default();
        assert!(g.parents(GridState::new(0, 0)).is_empty());
        assert_eq!(
            g.parents(GridState::new(2, 0)),
            vec![(GridState::new(1, 0), GridAction::PlusX)]
        );
        assert_eq!(
            g.parents(GridState::new(1, 1)),
            vec![
                (GridState::new(0, 1), GridAction::PlusX),
                (GridState::new(1, 0), GridAction::PlusY)
            ]
        );
    }

    #[test]
    fn grid_children_examples() {
        let g = GridSpec::default();
        assert!(g.children(GridState::new(3, 3)).is_empty());
        assert!(g.children(GridState::new(6, 0)).is_empty());
        assert_eq!(
            g.children(GridState::new(0, 0)),
            vec![
                (GridAction::PlusX, GridState::new(1, 0)),
                (GridAction::PlusY, GridState::new(0, 1))
            ]
        );
    }

    #[test]
    fn grid_validation_and_terminals() {
        assert!(GridSpec::default().validate().is_ok());
        let bad = GridSpec {
            width: 5,
            height: 7,
            horizon: 6,
        };
        assert!(bad.validate().is_err());
        let g = GridSpec::default();
        let terms = g.terminal_states();
        assert_eq!(terms.len(), g.horizon + 1);
        assert!(terms.iter().all(|s| s.depth() == 6));
    }

    #[test]
    fn grid_parents_and_children_agree() {
        let g = GridSpec::default();
        for s in g.states() {
            for (a, c) in g.children(s) {
                assert!(g.parents(c).contains(&(s, a)));
            }
            for (p, a) in g.parents(s) {
                assert!(g.children(p).contains(&(a, s)));
            }
        }
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]
        #[test]
        fn inverse_undoes_step(x in 0.0f64..11.0, y in 0.0f64..11.0, t in 0usize..11,
                               dx in 0.0f64..=1.0, dy in 0.0f64..=1.0) {
            let env = EnvConfig::default();
            // any point of [0, t]^2 is reachable at step t
            let s = PointState::new(x.min(t as f64), y.min(t as f64), t);
            let a = Action::new(dx, dy);
            let next = env.step(&s, a).unwrap();
            let back = env.inverse_step(&next, a).unwrap();
            prop_assert_eq!(back.t, s.t);
            prop_assert!((back.x - s.x).abs() < 1e-12 && (back.y - s.y).abs() < 1e-12);
        }

        #[test]
        fn rollouts_stay_in_reachable_square(actions in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 12)) {
            let env = EnvConfig::default();
            let mut s = env.reset();
            for (dx, dy) in actions {
                s = env.step(&s, Action::new(dx, dy)).unwrap();
                prop_assert!(env.is_reachable(s.x, s.y, s.t));
            }
            prop_assert!(env.is_terminal(&s));
            prop_assert!((0.0..=12.0).contains(&s.x) && (0.0..=12.0).contains(&s.y));
        }
    }
}

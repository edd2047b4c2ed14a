//! Grades for trajectory endpoints, the label store, and the reward network.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Point;
use crate::nn::{AdamConfig, AdamState, DenseNet, NnError, OutputTransform};

pub const MAX_ORACLE_GRADE: u8 = 5;
pub const NOISY_GRADE: u8 = 6;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("episode {0} is already labeled")]
    DuplicateLabel(u64),
    #[error("grade {grade} is not valid for {kind:?} labels")]
    InvalidGrade { grade: u8, kind: LabelSource },
    #[error("label store is empty")]
    NoData,
    #[error("invalid feedback configuration: {0}")]
    InvalidConfig(String),
    #[error("label file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeedbackError>;

/// Upper distance edges of grades 5, 4, 3, 2; anything farther is grade 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeBands {
    pub edges: [f64; 4],
}

impl Default for GradeBands {
    fn default() -> Self {
        GradeBands {
            edges: [1.0, 2.0, 4.0, 6.0],
        }
    }
}

impl GradeBands {
    pub fn grade_for_distance(&self, d: f64) -> u8 {
        self.edges
            .iter()
            .position(|&edge| d <= edge)
            .map_or(1, |band| MAX_ORACLE_GRADE - band as u8)
    }
}

fn nearest_distance(p: Point, goals: &[Point]) -> f64 {
    goals.iter().map(|g| p.distance(*g)).fold(f64::INFINITY, f64::min)
}

/// Clean scripted grade: the closer to the nearest goal, the higher.
pub fn oracle_score(final_position: Point, goals: &[Point]) -> u8 {
    GradeBands::default().grade_for_distance(nearest_distance(final_position, goals))
}

/// A wrong label injected into an otherwise clean oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyLabel {
    pub center: Point,
    pub radius: f64,
    pub grade: u8,
}

impl Default for NoisyLabel {
    fn default() -> Self {
        NoisyLabel {
            center: Point::new(7.0, 10.0),
            radius: 0.5,
            grade: NOISY_GRADE,
        }
    }
}

pub fn noisy_oracle_score(final_position: Point, goals: &[Point]) -> u8 {
    ScriptedLabeler::noisy().grade(final_position, goals)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedLabeler {
    pub bands: GradeBands,
    pub noise: Option<NoisyLabel>,
}

impl ScriptedLabeler {
    pub fn clean() -> Self {
        ScriptedLabeler {
            bands: GradeBands::default(),
            noise: None,
        }
    }

    pub fn noisy() -> Self {
        ScriptedLabeler {
            bands: GradeBands::default(),
            noise: Some(NoisyLabel::default()),
        }
    }

    pub fn source(&self) -> LabelSource {
        if self.noise.is_some() {
            LabelSource::NoisyOracle
        } else {
            LabelSource::Oracle
        }
    }

    pub fn grade(&self, final_position: Point, goals: &[Point]) -> u8 {
        if let Some(noise) = &self.noise {
            if final_position.distance(noise.center) <= noise.radius {
                return noise.grade;
            }
        }
        self.bands
            .grade_for_distance(nearest_distance(final_position, goals))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Oracle,
    NoisyOracle,
    Human,
}

impl LabelSource {
    pub fn accepts(self, grade: u8) -> bool {
        match self {
            LabelSource::Oracle | LabelSource::Human => (1..=MAX_ORACLE_GRADE).contains(&grade),
            LabelSource::NoisyOracle => (1..=NOISY_GRADE).contains(&grade),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub episode_id: u64,
    #[serde(rename = "final")]
    pub final_position: Point,
    pub grade: u8,
    pub source: LabelSource,
    /// Environment timestep at which the label entered the store.
    #[serde(default)]
    pub timestep: u64,
}

/// Append-only sequence of labels with unique episode ids.
#[derive(Clone, Debug, Default)]
pub struct LabelStore {
    records: Vec<LabelRecord>,
    episodes: HashSet<u64>,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: LabelRecord) -> Result<()> {
        if !record.source.accepts(record.grade) {
            return Err(FeedbackError::InvalidGrade {
                grade: record.grade,
                kind: record.source,
            });
        }
        if !self.episodes.insert(record.episode_id) {
            return Err(FeedbackError::DuplicateLabel(record.episode_id));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, episode_id: u64) -> bool {
        self.episodes.contains(&episode_id)
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let mut store = LabelStore::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| FeedbackError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            store.append(rec)?;
        }
        Ok(store)
    }
}

/// The label store shared between the trainer and a labeling service.
#[derive(Clone, Debug, Default)]
pub struct SharedLabelStore(Arc<RwLock<LabelStore>>);

impl SharedLabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, record: LabelRecord) -> Result<()> {
        self.0.write().expect("label store lock poisoned").append(record)
    }

    /// Appends all records or none of them.
    pub fn append_all(&self, records: Vec<LabelRecord>) -> Result<()> {
        let mut store = self.0.write().expect("label store lock poisoned");
        let mut seen = HashSet::new();
        for r in &records {
            if !r.source.accepts(r.grade) {
                return Err(FeedbackError::InvalidGrade {
                    grade: r.grade,
                    kind: r.source,
                });
            }
            if store.contains(r.episode_id) || !seen.insert(r.episode_id) {
                return Err(FeedbackError::DuplicateLabel(r.episode_id));
            }
        }
        for r in records {
            store.append(r)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.read(|s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, episode_id: u64) -> bool {
        self.read(|s| s.contains(episode_id))
    }

    pub fn read<T>(&self, f: impl FnOnce(&LabelStore) -> T) -> T {
        f(&self.0.read().expect("label store lock poisoned"))
    }

    pub fn snapshot(&self) -> Vec<LabelRecord> {
        self.read(|s| s.records().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradeToReward {
    Identity,
    /// `values[g - 1]` is the regression target for grade `g`.
    Table { values: Vec<f64> },
}

impl GradeToReward {
    pub fn target(&self, grade: u8) -> f64 {
        match self {
            GradeToReward::Identity => grade as f64,
            GradeToReward::Table { values } => values[(grade as usize).saturating_sub(1).min(values.len() - 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModelConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub r_min: f64,
    pub mapping: GradeToReward,
    /// Adam steps run each time an episode completes, once `min_labels` exist.
    pub steps_per_episode: usize,
    pub batch_size: usize,
    pub min_labels: usize,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        RewardModelConfig {
            hidden: vec![256, 256, 256],
            learning_rate: 3e-4,
            r_min: 1e-3,
            mapping: GradeToReward::Identity,
            steps_per_episode: 4,
            batch_size: 128,
            min_labels: 100,
        }
    }
}

/// `r(s_f) = softplus(net(x / T, y / T)) + r_min`.
#[derive(Clone, Debug)]
pub struct RewardModel {
    net: DenseNet,
    adam: AdamState,
    r_min: f64,
    scale: f64,
    mapping: GradeToReward,
}

impl RewardModel {
    pub fn new(cfg: &RewardModelConfig, horizon: usize, seed: u64) -> Result<Self> {
        if cfg.r_min <= 0.0 {
            return Err(FeedbackError::InvalidConfig("r_min must be positive".into()));
        }
        let mut sizes = vec![2];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let net = DenseNet::new(&sizes, OutputTransform::Softplus, seed)?;
        Ok(Self::from_net(net, cfg, horizon))
    }

    pub fn from_net(net: DenseNet, cfg: &RewardModelConfig, horizon: usize) -> Self {
        let adam = AdamState::for_net(&net, AdamConfig::with_learning_rate(cfg.learning_rate));
        RewardModel {
            net,
            adam,
            r_min: cfg.r_min,
            scale: 1.0 / horizon as f64,
            mapping: cfg.mapping.clone(),
        }
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    fn features(&self, positions: &[Point]) -> Array2<f64> {
        Array2::from_shape_fn((positions.len(), 2), |(r, c)| {
            let p = positions[r];
            if c == 0 {
                p.x * self.scale
            } else {
                p.y * self.scale
            }
        })
    }

    pub fn predict(&self, final_position: Point) -> f64 {
        self.predict_batch(&[final_position])[0]
    }

    pub fn predict_batch(&self, positions: &[Point]) -> Vec<f64> {
        if positions.is_empty() {
            return Vec::new();
        }
        let out = self
            .net
            .forward_batch(&self.features(positions))
            .expect("reward features match network input");
        out.iter().map(|v| v + self.r_min).collect()
    }

    /// One Adam step on the mean squared error over `records`; returns the loss.
    pub fn fit_batch(&mut self, records: &[&LabelRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(FeedbackError::NoData);
        }
        let positions: Vec<Point> = records.iter().map(|r| r.final_position).collect();
        let acts = self.net.forward_cached(self.features(&positions))?;
        let n = records.len() as f64;
        let mut loss = 0.0;
        let mut upstream = Array2::zeros((records.len(), 1));
        for (i, r) in records.iter().enumerate() {
            let err = acts.output()[[i, 0]] + self.r_min - self.mapping.target(r.grade);
            loss += err * err;
            upstream[[i, 0]] = 2.0 * err / n;
        }
        let (grads, _) = self.net.backward(&acts, &upstream)?;
        self.adam.step(&mut self.net, &grads)?;
        Ok(loss / n)
    }

    /// `steps` minibatch updates with batches drawn uniformly with replacement.
    pub fn train(
        &mut self,
        store: &LabelStore,
        steps: usize,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let records = store.records();
        if records.is_empty() {
            return Err(FeedbackError::NoData);
        }
        let mut loss = f64::NAN;
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..steps {
            batch.clear();
            batch.extend((0..batch_size).map(|_| &records[rng.random_range(0..records.len())]));
            loss = self.fit_batch(&batch)?;
        }
        Ok(loss)
    }
}

/// Anything that scores final positions in batches.
pub trait RewardSource {
    fn rewards(&self, positions: &[Point]) -> Vec<f64>;
}

impl RewardSource for RewardModel {
    fn rewards(&self, positions: &[Point]) -> Vec<f64> {
        self.predict_batch(positions)
    }
}

impl<F: Fn(Point) -> f64> RewardSource for F {
    fn rewards(&self, positions: &[Point]) -> Vec<f64> {
        positions.iter().map(|p| self(*p)).collect()
    }
}

/// Trains `model` like [`RewardModel::train`] and returns it with the last minibatch loss.
pub fn train_reward_model(
    mut model: RewardModel,
    store: &LabelStore,
    steps: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(RewardModel, f64)> {
    let loss = model.train(store, steps, batch_size, rng)?;
    Ok((model, loss))
}

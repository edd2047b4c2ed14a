//! Run configuration and the experiment driver that writes a run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ddpg::{train_ddpg_hf, DdpgConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::feedback::{RewardModelConfig, ScriptedLabeler};
use crate::gflow_continuous::{pretrain_retrieval, train_gflowhf, CFlowConfig, RetrievalConfig, RetrievalNet};
use crate::harness::labeling::{HumanLabeler, Labeler, RunHandle, ScriptedSink, DEFAULT_HUMAN_BATCH};
use crate::harness::metrics::{Answer, AnswerCriteria, MetricRow, METRICS_CSV_HEADER};
use crate::harness::training::Schedule;
use crate::nn::DenseNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gflowhf,
    DdpgHf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelerKind {
    Oracle,
    Noisy,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub labeler: LabelerKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub criteria: AnswerCriteria,
    #[serde(default)]
    pub reward: RewardModelConfig,
    #[serde(default)]
    pub gflow: CFlowConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    /// Pretrained retrieval net; trained at the start of the run when absent.
    #[serde(default)]
    pub retrieval_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub ddpg: DdpgConfig,
    #[serde(default = "default_human_batch")]
    pub human_batch: usize,
}

fn default_human_batch() -> usize {
    DEFAULT_HUMAN_BATCH
}

impl RunConfig {
    /// Full-size networks and samplers.
    pub fn new(algorithm: Algorithm, labeler: LabelerKind, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            algorithm,
            labeler,
            seed,
            output_dir: output_dir.into(),
            env: EnvConfig::default(),
            schedule: Schedule::default(),
            criteria: AnswerCriteria::default(),
            reward: RewardModelConfig::default(),
            gflow: CFlowConfig::default(),
            retrieval: RetrievalConfig::default(),
            retrieval_checkpoint: None,
            ddpg: DdpgConfig::default(),
            human_batch: DEFAULT_HUMAN_BATCH,
        }
    }

    /// Smaller networks and sample counts that finish a run in about a
    /// minute on one core. The schedule, thresholds and optimizer settings
    /// are unchanged.
    pub fn desk(algorithm: Algorithm, labeler: LabelerKind, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::new(algorithm, labeler, seed, output_dir);
        cfg.reward.hidden = vec![64, 64, 64];
        cfg.gflow.hidden = vec![64, 64];
        cfg.gflow.sample_flows = 16;
        cfg.gflow.action_buffer = 128;
        cfg.gflow.batch_size = 16;
        cfg.retrieval.hidden = vec![64, 64];
        cfg.retrieval.n_transitions = 20_000;
        cfg.retrieval.epochs = 10;
        cfg.ddpg.actor_hidden = vec![64, 64];
        cfg.ddpg.critic_hidden = vec![64, 64];
        cfg.ddpg.batch_size = 64;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.schedule.validate()?;
        self.criteria.validate()?;
        self.gflow.validate()?;
        self.ddpg.validate()?;
        if self.human_batch == 0 {
            return Err(Error::InvalidConfig("human_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub metrics: Vec<MetricRow>,
    pub answers: Vec<Answer>,
    /// Final-evaluation endpoints, for analysis.
    pub final_endpoints: Vec<crate::env::Point>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(&path, e))
}

fn save_net(dir: &Path, name: &str, net: &DenseNet) -> Result<()> {
    write(dir, name, &net.to_json())
}

/// The retrieval net named by the config, or a freshly pretrained one.
pub fn retrieval_for(cfg: &RunConfig) -> Result<RetrievalNet> {
    match &cfg.retrieval_checkpoint {
        Some(path) => Ok(RetrievalNet::from_net(DenseNet::load(path)?, cfg.env.horizon)?),
        None => {
            let trained = pretrain_retrieval(&cfg.env, &cfg.retrieval, cfg.seed.wrapping_add(1000))?;
            log::info!("retrieval held-out mse {:.3e}", trained.held_out_mse);
            Ok(trained.net)
        }
    }
}

/// Runs the configured trainer and writes `config.json`, `metrics.csv`,
/// `answers.json`, `labels.jsonl`, `timing.json` and network checkpoints.
pub fn run_experiment(cfg: &RunConfig, handle: &Arc<RunHandle>) -> Result<RunOutcome> {
    run_experiment_with(cfg, handle, None)
}

/// Like [`run_experiment`] with an already pretrained retrieval net.
pub fn run_experiment_with(cfg: &RunConfig, handle: &Arc<RunHandle>, retrieval: Option<RetrievalNet>) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir, "config.json", &cfg.to_json())?;

    let mut labeler: Box<dyn Labeler> = match cfg.labeler {
        LabelerKind::Oracle => Box::new(ScriptedSink::new(
            ScriptedLabeler::clean(),
            cfg.env.goals.clone(),
            handle.store().clone(),
        )),
        LabelerKind::Noisy => Box::new(ScriptedSink::new(
            ScriptedLabeler::noisy(),
            cfg.env.goals.clone(),
            handle.store().clone(),
        )),
        LabelerKind::Human => Box::new(HumanLabeler::new(handle.clone(), cfg.human_batch)),
    };

    let outcome = match cfg.algorithm {
        Algorithm::Gflowhf => {
            let retrieval = match retrieval {
                Some(r) => r,
                None => retrieval_for(cfg)?,
            };
            save_net(&dir, "retrieval.json", retrieval.net())?;
            let out = train_gflowhf(
                &cfg.env,
                &cfg.gflow,
                retrieval,
                &cfg.schedule,
                &cfg.criteria,
                &cfg.reward,
                labeler.as_mut(),
                handle,
                cfg.seed,
            )?;
            save_net(&dir, "flow.json", out.flow.net())?;
            out.outcome
        }
        Algorithm::DdpgHf => {
            let out = train_ddpg_hf(
                &cfg.env,
                &cfg.ddpg,
                &cfg.schedule,
                &cfg.criteria,
                &cfg.reward,
                labeler.as_mut(),
                handle,
                cfg.seed,
            )?;
            save_net(&dir, "actor.json", &out.agent.actor)?;
            save_net(&dir, "critic.json", &out.agent.critic)?;
            out.outcome
        }
    };
    save_net(&dir, "reward.json", outcome.reward_model.net())?;

    write(&dir, "metrics.csv", &metrics_csv(&outcome.metrics))?;
    let answers = outcome.final_evaluation.answers.clone();
    write(&dir, "answers.json", &serde_json::to_string(&answers)?)?;
    let timing: Vec<(u64, f64)> = outcome.metrics.iter().map(|r| (r.timestep, r.wall_time)).collect();
    write(&dir, "timing.json", &serde_json::to_string(&timing)?)?;
    let labels_path = dir.join("labels.jsonl");
    handle.store().read(|s| s.write_jsonl(&labels_path))?;
    handle.set_finished();
    Ok(RunOutcome {
        dir,
        metrics: outcome.metrics,
        answers,
        final_endpoints: outcome.final_evaluation.endpoints(),
    })
}

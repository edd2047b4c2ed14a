//! Command-line front end for GFlowHF experiments.

pub mod service;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gflowhf::ddpg::{ActorPolicy, DdpgAgent};
use gflowhf::feedback::RewardModel;
use gflowhf::gflow_continuous::{pretrain_retrieval, FlowNet, FlowPolicy};
use gflowhf::harness::run::metrics_csv;
use gflowhf::harness::{evaluate_policy, run_experiment, Algorithm, Answer, LabelerKind, RunConfig, RunHandle};
use gflowhf::nn::DenseNet;

#[derive(Debug, Parser)]
#[command(name = "gflowhf", version, about = "Train and evaluate flow networks from graded feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the parent-retrieval net and save it as a checkpoint.
    PretrainRetrieval(PretrainArgs),
    /// Run one experiment and write its artifacts.
    Train(TrainArgs),
    /// Evaluate the policy stored in a run directory.
    Eval(EvalArgs),
    /// Write plot-ready CSV files for a finished run.
    ExportPlot(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Gflowhf,
    DdpgHf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelerArg {
    Oracle,
    Noisy,
    Human,
}

/// Network and sample sizes. `desk` finishes a run in under a minute on
/// one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run config whose retrieval settings to use.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    #[arg(long, value_enum)]
    pub labeler: Option<LabelerArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run config JSON; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Serve the labeling API on this address, e.g. 127.0.0.1:8080.
    #[arg(long)]
    pub serve: Option<String>,
    /// Pretrained retrieval checkpoint.
    #[arg(long)]
    pub retrieval: Option<PathBuf>,
    /// Sizes used when no config file is given.
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the run's evaluation episode count.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Directory for the CSV files; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn base_config(profile: Profile, algorithm: Algorithm, labeler: LabelerKind, seed: u64, out: PathBuf) -> RunConfig {
    match profile {
        Profile::Paper => RunConfig::new(algorithm, labeler, seed, out),
        Profile::Desk => RunConfig::desk(algorithm, labeler, seed, out),
    }
}

/// The run config a `train` invocation describes.
pub fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => base_config(
            args.profile,
            Algorithm::Gflowhf,
            LabelerKind::Oracle,
            0,
            PathBuf::from("runs/latest"),
        ),
    };
    if let Some(a) = args.algo {
        cfg.algorithm = match a {
            AlgoArg::Gflowhf => Algorithm::Gflowhf,
            AlgoArg::DdpgHf => Algorithm::DdpgHf,
        };
    }
    if let Some(l) = args.labeler {
        cfg.labeler = match l {
            LabelerArg::Oracle => LabelerKind::Oracle,
            LabelerArg::Noisy => LabelerKind::Noisy,
            LabelerArg::Human => LabelerKind::Human,
        };
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(r) = &args.retrieval {
        cfg.retrieval_checkpoint = Some(r.clone());
    }
    Ok(cfg)
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => base_config(args.profile, Algorithm::Gflowhf, LabelerKind::Oracle, args.seed, PathBuf::new()),
    };
    let trained = pretrain_retrieval(&cfg.env, &cfg.retrieval, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    trained.net.net().save(&args.out)?;
    println!("held-out mse {:.3e}", trained.held_out_mse);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = train_config(args)?;
    let handle = RunHandle::new();
    match &args.serve {
        Some(addr) => {
            let bound = service::spawn(handle.clone(), addr)?;
            println!("labeling API on http://{bound}/api");
        }
        None if cfg.labeler == LabelerKind::Human => {
            log::warn!("human labeler without --serve: the run will wait for labels that cannot arrive");
        }
        None => {}
    }
    let out = run_experiment(&cfg, &handle)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "timestep {} score {:.3} model {:.3} answers {}",
            last.timestep, last.avg_true_score, last.avg_model_reward, last.n_valid_distinct
        );
    }
    println!("wrote {}", out.dir.display());
    Ok(())
}

fn load_net(dir: &Path, name: &str) -> Result<DenseNet> {
    let path = dir.join(name);
    DenseNet::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let dir = &args.checkpoint;
    let cfg = RunConfig::load(dir.join("config.json")).with_context(|| format!("{} is not a run directory", dir.display()))?;
    let mut criteria = cfg.criteria.clone();
    if let Some(n) = args.episodes {
        criteria.eval_episodes = n;
    }
    let reward = RewardModel::from_net(load_net(dir, "reward.json")?, &cfg.reward, cfg.env.horizon);
    let ev = match cfg.algorithm {
        Algorithm::Gflowhf => {
            let flow = FlowNet::from_net(load_net(dir, "flow.json")?, cfg.env.horizon)?;
            let policy = FlowPolicy {
                flow: &flow,
                action_buffer: cfg.gflow.action_buffer,
            };
            evaluate_policy(&policy, &cfg.env, &criteria, Some(&reward), args.seed)?
        }
        Algorithm::DdpgHf => {
            let mut agent = DdpgAgent::new(&cfg.ddpg, cfg.env.horizon, cfg.seed)?;
            agent.actor = load_net(dir, "actor.json")?;
            evaluate_policy(&ActorPolicy(&agent), &cfg.env, &criteria, Some(&reward), args.seed)?
        }
    };
    println!("{}", serde_json::to_string(&ev.row)?);
    Ok(())
}

pub const ANSWERS_CSV_HEADER: &str = "episode_id,grade,x,y";

fn export_plot(args: &ExportArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = args.run.join("metrics.csv");
    let metrics = fs::read_to_string(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
    // Re-emit through the parser so a damaged file fails here, not in a plot.
    let rows = parse_metrics(&metrics)?;
    let rewards_path = out.join("reward_curve.csv");
    fs::write(&rewards_path, metrics_csv(&rows))?;

    let answers_path = args.run.join("answers.json");
    let text = fs::read_to_string(&answers_path).with_context(|| format!("reading {}", answers_path.display()))?;
    let answers: Vec<Answer> = serde_json::from_str(&text)?;
    let mut csv = String::from(ANSWERS_CSV_HEADER);
    csv.push('\n');
    for a in &answers {
        let p = a.trajectory.final_position();
        csv.push_str(&format!("{},{},{},{}\n", a.episode_id, a.grade, p.x, p.y));
    }
    let scatter_path = out.join("answer_scatter.csv");
    fs::write(&scatter_path, csv)?;
    println!("{}", rewards_path.display());
    println!("{}", scatter_path.display());
    Ok(())
}

fn parse_metrics(text: &str) -> Result<Vec<gflowhf::harness::MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(gflowhf::harness::metrics::METRICS_CSV_HEADER) {
        bail!("metrics.csv has an unexpected header");
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                bail!("bad metrics row {l:?}");
            }
            Ok(gflowhf::harness::MetricRow {
                timestep: f[0].parse()?,
                avg_true_score: f[1].parse()?,
                avg_model_reward: f[2].parse()?,
                n_valid_distinct: f[3].parse()?,
                wall_time: 0.0,
            })
        })
        .collect()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::PretrainRetrieval(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportPlot(a) => export_plot(a),
    }
}

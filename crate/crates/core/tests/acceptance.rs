//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything; extra arguments
//! select criteria by name, e.g. `-- discrete retrieval`. The exit status is
//! 0 unless `GFLOWHF_ACCEPTANCE_STRICT=1` is set and a criterion failed.

use std::collections::BTreeMap;
use std::time::Instant;

use gflowhf::env::{Action, EnvConfig, GridSpec, Point, PointState, DEFAULT_GOALS};
use gflowhf::feedback::{oracle_score, LabelRecord, LabelSource, LabelStore, NoisyLabel, RewardModel, RewardModelConfig};
use gflowhf::gflow_continuous::{pretrain_retrieval, RetrievalConfig, RetrievalNet};
use gflowhf::gflow_discrete::{
    exact_flows, oracle_band_rewards, reward_distribution, state_residual, terminal_distribution, total_variation,
    train_discrete, FlowMatchConfig,
};
use gflowhf::harness::run::metrics_csv;
use gflowhf::harness::{goals_covered, run_experiment_with, spearman, Algorithm, LabelerKind, RunConfig, RunHandle, RunOutcome};
use gflowhf::nn::{AdamConfig, AdamState, DenseNet, Gradients, OutputTransform};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn discrete() -> Verdict {
    let grid = GridSpec::default();
    let rewards = oracle_band_rewards(&grid, &DEFAULT_GOALS, 12.0 / grid.horizon as f64);
    let reward = |s| rewards[&s];

    let exact = exact_flows(&grid, reward).expect("positive rewards");
    let fm = FlowMatchConfig::raw_space();
    let worst_residual = grid
        .states()
        .into_iter()
        .filter(|s| s.depth() > 0)
        .map(|s| state_residual(&exact, s, &reward, &fm).abs())
        .fold(0.0, f64::max);

    let started = Instant::now();
    let trained = train_discrete(&grid, reward, &FlowMatchConfig::default(), 0).expect("training runs");
    let secs = started.elapsed().as_secs_f64();
    let p: Vec<f64> = terminal_distribution(&trained.flow).unwrap().into_iter().map(|(_, p)| p).collect();
    let tv = total_variation(&p, &reward_distribution(&grid, reward));
    verdict(
        tv < 0.05 && secs < 60.0 && worst_residual < 1e-12,
        format!("TV {tv:.4} (< 0.05) in {secs:.1}s (< 60s); exact residual {worst_residual:.1e} (< 1e-12)"),
    )
}

fn reward_fidelity() -> Verdict {
    let env = EnvConfig::default();
    let h = env.horizon as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let points: Vec<Point> = (0..500)
        .map(|_| Point::new(rng.random_range(0.0..=h), rng.random_range(0.0..=h)))
        .collect();
    let grades: Vec<u8> = points.iter().map(|p| oracle_score(*p, &env.goals)).collect();
    let mut store = LabelStore::new();
    for (i, (p, g)) in points.iter().zip(&grades).enumerate().take(400) {
        store
            .append(LabelRecord {
                episode_id: i as u64,
                final_position: *p,
                grade: *g,
                source: LabelSource::Oracle,
                timestep: 0,
            })
            .unwrap();
    }
    let cfg = RewardModelConfig {
        hidden: RunConfig::desk(Algorithm::Gflowhf, LabelerKind::Oracle, 0, "").reward.hidden,
        ..RewardModelConfig::default()
    };
    let mut model = RewardModel::new(&cfg, env.horizon, 21).unwrap();
    model.train(&store, 4_000, cfg.batch_size, &mut rng).unwrap();
    let preds = model.predict_batch(&points[400..]);
    let truth: Vec<f64> = grades[400..].iter().map(|&g| g as f64).collect();
    let rho = spearman(&preds, &truth);
    verdict(rho >= 0.9, format!("held-out Spearman {rho:.3} (>= 0.9) on 100 of 500 endpoints"))
}

fn retrieval() -> (Verdict, RetrievalNet) {
    let env = EnvConfig::default();
    let started = Instant::now();
    let trained = pretrain_retrieval(&env, &RetrievalConfig::default(), 30).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let parent = trained
        .net
        .parent(&PointState::new(3.0, 4.0, 2), Action::new(1.0, 2.0))
        .unwrap();
    let err = parent.distance(Point::new(2.0, 2.0));
    let v = verdict(
        trained.held_out_mse < 1e-3 && err < 0.05,
        format!(
            "held-out mse {:.2e} (< 1e-3); G((3,4,2),(1,2)) = ({:.3}, {:.3}), off by {err:.3} (< 0.05); {secs:.0}s",
            trained.held_out_mse, parent.x, parent.y
        ),
    );
    (v, trained.net)
}

fn max_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn numerical_substrate() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst = 0.0_f64;
    let h = 1e-5;
    for trial in 0..12 {
        let depth = rng.random_range(1..4);
        let mut sizes = vec![rng.random_range(1..6)];
        sizes.extend((0..depth).map(|_| rng.random_range(2..9)));
        sizes.push(rng.random_range(1..4));
        let transform = [OutputTransform::Identity, OutputTransform::Softplus, OutputTransform::Sigmoid][trial % 3];
        // Random biases keep pre-activations off the ReLU kink at exactly 0.
        let mut net = DenseNet::new(&sizes, transform, 100 + trial as u64).unwrap();
        for b in net.biases_mut() {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_fn((4, sizes[0]), |_| rng.random_range(-1.0..1.0));
        let up = Array2::from_shape_fn((4, *sizes.last().unwrap()), |_| rng.random_range(-1.0..1.0));
        let objective = |n: &DenseNet| (n.forward_batch(&x).unwrap() * &up).sum();
        let acts = net.forward_cached(x.clone()).unwrap();
        let (grads, _) = net.backward(&acts, &up).unwrap();
        for l in 0..net.weights().len() {
            for idx in 0..net.weights()[l].len() {
                let c = net.weights()[l].ncols();
                let (r, c) = (idx / c, idx % c);
                let mut plus = net.clone();
                plus.weights_mut()[l][[r, c]] += h;
                let mut minus = net.clone();
                minus.weights_mut()[l][[r, c]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                worst = worst.max(max_rel_err(grads.weights[l][[r, c]], fd));
            }
            for i in 0..net.biases()[l].len() {
                let mut plus = net.clone();
                plus.biases_mut()[l][i] += h;
                let mut minus = net.clone();
                minus.biases_mut()[l][i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                worst = worst.max(max_rel_err(grads.biases[l][i], fd));
            }
        }
    }

    let mut net = DenseNet::new(&[3, 8, 2], OutputTransform::Softplus, 41).unwrap();
    let before = net.clone();
    let mut adam = AdamState::for_net(&net, AdamConfig::default());
    let zero = Gradients::zeros_like(&net);
    for _ in 0..10 {
        adam.step(&mut net, &zero).unwrap();
    }
    let adam_noop = net == before;

    let probe = Array2::from_shape_fn((16, 3), |_| rng.random_range(-3.0..3.0));
    let ckpt = DenseNet::new(&[3, 16, 16, 2], OutputTransform::Sigmoid, 42).unwrap();
    let back = DenseNet::from_json(&ckpt.to_json()).unwrap();
    let bits = |n: &DenseNet| -> Vec<u64> {
        n.weights()
            .iter()
            .flat_map(|w| w.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .chain(n.biases().iter().flat_map(|b| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect()
    };
    let round_trip = bits(&ckpt) == bits(&back)
        && ckpt.forward_batch(&probe).unwrap() == back.forward_batch(&probe).unwrap()
        && back.output_transform() == ckpt.output_transform();

    verdict(
        worst < 1e-4 && adam_noop && round_trip,
        format!("worst gradient relative error {worst:.1e} (< 1e-4); Adam zero-gradient no-op {adam_noop}; checkpoint bit-exact {round_trip}"),
    )
}

fn run(algorithm: Algorithm, labeler: LabelerKind, seed: u64, retrieval: &RetrievalNet) -> (TempDir, RunOutcome) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::desk(algorithm, labeler, seed, dir.path());
    let started = Instant::now();
    let handle = RunHandle::new();
    let retrieval = (algorithm == Algorithm::Gflowhf).then(|| retrieval.clone());
    let out = run_experiment_with(&cfg, &handle, retrieval).expect("run completes");
    let last = out.metrics.last().unwrap();
    eprintln!(
        "  {algorithm:?} {labeler:?} seed {seed}: score {:.2} answers {} covered {:?} ({:.0}s)",
        last.avg_true_score,
        last.n_valid_distinct,
        goals_covered(&out.answers, &DEFAULT_GOALS, 2.0),
        started.elapsed().as_secs_f64()
    );
    (dir, out)
}

fn n_covered(out: &RunOutcome) -> usize {
    goals_covered(&out.answers, &DEFAULT_GOALS, 2.0).into_iter().filter(|&c| c).count()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_score(out: &RunOutcome) -> f64 {
    out.metrics.last().unwrap().avg_true_score
}

fn final_nvd(out: &RunOutcome) -> f64 {
    out.metrics.last().unwrap().n_valid_distinct as f64
}

struct Runs {
    gflow: Vec<RunOutcome>,
    ddpg: Vec<RunOutcome>,
    _dirs: Vec<TempDir>,
}

fn runs(labeler: LabelerKind, retrieval: &RetrievalNet) -> Runs {
    let mut dirs = Vec::new();
    let mut all = |algorithm| -> Vec<RunOutcome> {
        SEEDS
            .iter()
            .map(|&s| {
                let (dir, out) = run(algorithm, labeler, s, retrieval);
                dirs.push(dir);
                out
            })
            .collect()
    };
    let gflow = all(Algorithm::Gflowhf);
    let ddpg = all(Algorithm::DdpgHf);
    Runs { gflow, ddpg, _dirs: dirs }
}

fn mode_coverage(clean: &Runs) -> Verdict {
    let g_both = clean.gflow.iter().filter(|o| n_covered(o) == 2).count();
    let d_one = clean.ddpg.iter().filter(|o| n_covered(o) <= 1).count();
    let g_nvd = mean(clean.gflow.iter().map(final_nvd));
    let d_nvd = mean(clean.ddpg.iter().map(final_nvd));
    verdict(
        g_both >= 4 && d_one >= 4 && g_nvd > d_nvd,
        format!(
            "GFlowHF covers both goals in {g_both}/5 (>= 4); DDPG-HF covers <= 1 in {d_one}/5 (>= 4); mean answers {g_nvd:.1} vs {d_nvd:.1} (must exceed)"
        ),
    )
}

fn average_reward(clean: &Runs) -> Verdict {
    let g = mean(clean.gflow.iter().map(final_score));
    let d = mean(clean.ddpg.iter().map(final_score));
    verdict(g >= d - 0.2, format!("mean final score GFlowHF {g:.3} vs DDPG-HF {d:.3} (>= {:.3})", d - 0.2))
}

fn noisy_robustness(noisy: &Runs) -> Verdict {
    let g_both = noisy.gflow.iter().filter(|o| n_covered(o) == 2).count();
    let lure = NoisyLabel::default().center;
    let lured = |o: &RunOutcome| {
        let near = o.final_endpoints.iter().filter(|p| p.distance(lure) <= 2.0).count();
        2 * near > o.final_endpoints.len()
    };
    let d_lured = noisy.ddpg.iter().filter(|o| lured(o)).count();
    let g_noisy_score = mean(noisy.gflow.iter().map(final_score));
    let d_noisy_score = mean(noisy.ddpg.iter().map(final_score));
    verdict(
        g_both >= 3 && d_lured >= 3,
        format!(
            "GFlowHF covers both goals in {g_both}/5 (>= 3); DDPG-HF mostly within 2 of (7,10) in {d_lured}/5 (>= 3); mean true score {g_noisy_score:.2} vs {d_noisy_score:.2}"
        ),
    )
}

fn determinism(clean: &Runs, retrieval: &RetrievalNet) -> Verdict {
    let mut same = Vec::new();
    for (algorithm, first) in [(Algorithm::Gflowhf, &clean.gflow[0]), (Algorithm::DdpgHf, &clean.ddpg[0])] {
        let (_dir, again) = run(algorithm, LabelerKind::Oracle, SEEDS[0], retrieval);
        let a = std::fs::read(first.dir.join("metrics.csv")).unwrap();
        let b = std::fs::read(again.dir.join("metrics.csv")).unwrap();
        same.push(a == b && a == metrics_csv(&again.metrics).into_bytes());
    }
    verdict(same.iter().all(|&s| s), format!("byte-identical metrics.csv: GFlowHF {}, DDPG-HF {}", same[0], same[1]))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: BTreeMap<usize, (&str, Verdict)> = BTreeMap::new();
    let mut record = |order: usize, name: &'static str, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.insert(order, (name, v));
    };

    if wanted("discrete") {
        record(0, "discrete_proportionality", discrete());
    }
    let training = ["mode_coverage", "average_reward", "noisy_robustness", "determinism"];
    let need_retrieval = wanted("retrieval") || training.iter().any(|n| wanted(n));
    let retrieval_net = if need_retrieval {
        let (v, net) = retrieval();
        if wanted("retrieval") {
            record(5, "retrieval_fidelity", v);
        }
        // Runs use the desk-sized retrieval net like the CLI's desk profile.
        let desk = RunConfig::desk(Algorithm::Gflowhf, LabelerKind::Oracle, 0, "");
        drop(net);
        Some(pretrain_retrieval(&desk.env, &desk.retrieval, 1000).unwrap().net)
    } else {
        None
    };
    if wanted("reward_fidelity") {
        record(4, "reward_fidelity", reward_fidelity());
    }
    if wanted("numerical") {
        record(6, "numerical_substrate", numerical_substrate());
    }
    if let Some(net) = &retrieval_net {
        let need_clean = ["mode_coverage", "average_reward", "determinism"].iter().any(|n| wanted(n));
        if need_clean {
            let clean = runs(LabelerKind::Oracle, net);
            if wanted("mode_coverage") {
                record(1, "mode_coverage", mode_coverage(&clean));
            }
            if wanted("average_reward") {
                record(2, "average_reward", average_reward(&clean));
            }
            if wanted("determinism") {
                record(7, "determinism", determinism(&clean, net));
            }
        }
        if wanted("noisy_robustness") {
            record(3, "noisy_robustness", noisy_robustness(&runs(LabelerKind::Noisy, net)));
        }
    }

    let failed: Vec<&str> = results.values().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        if std::env::var("GFLOWHF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rxr::bench::plot::{plot, PlotKind};
use rxr::bench::sweep::{sweep, Axis, Metric, SweepSpec};
use rxr::bench::{
    coverage_csv, evaluate, extract, plan, pretrain, run, train_stage, ExperimentConfig, Stage, StageError,
    CONFIG_FILE, COVERAGE_FILE, CURVE_FILE, DEMOS_FILE, POLICY_FILE, RESETS_FILE, SUMMARY_FILE, TREE_FILE,
};
use rxr::extract::ResetBuffer;
use rxr::grrt::{load_tree, save_tree};
use rxr::ipt::save_demo_csv;
use rxr::nn::{load_checkpoint, save_checkpoint, Checkpoint};
use rxr::ppo::curve_csv;

#[derive(Parser)]
#[command(name = "rxr", version, about = "Planner trees as reset distributions for policy-gradient training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's `out`, then `.`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan, extract, pre-train, train and evaluate in one go.
    Run(Common),
    /// Grow a planner tree.
    Plan(Common),
    /// Build a reset buffer from a saved tree.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tree: PathBuf,
    },
    /// Imitation pre-training from a saved tree.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tree: PathBuf,
        /// Reset buffer the critic is pre-trained from (fixed start otherwise).
        #[arg(long)]
        resets: Option<PathBuf>,
        /// Override the task kind.
        #[arg(long)]
        task: Option<String>,
        /// Override the label scale.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train with the configured reset strategy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resets: Option<PathBuf>,
        /// Warm-start checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Ablation sweep along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tree_size, k_max, alpha, obs_mask or reset.kind
        #[arg(long)]
        axis: String,
        /// Comma-separated cell values in axis order.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Only grow trees and score coverage.
        #[arg(long)]
        plan_only: bool,
    },
    /// Plot logged CSVs into an SVG.
    Plot {
        /// curve or coverage
        #[arg(long, default_value = "curve")]
        kind: String,
        /// `label=a.csv,b.csv` (one per legend entry; runs of a label form a band).
        #[arg(long = "series", required = true)]
        series: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Stage(StageError),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        if e.stage == Stage::Config {
            Failure::Config(e.to_string())
        } else {
            Failure::Stage(e)
        }
    }
}

fn stage_err<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> Failure {
    move |e| Failure::Stage(StageError { stage, message: e.to_string() })
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if !c.set.is_empty() {
        cfg.apply(&c.set.join("\n")).map_err(|e| Failure::Config(e.to_string()))?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    cfg.out = Some(out.clone());
    fs::create_dir_all(&out).map_err(|e| Failure::Config(format!("{}: {e}", out.display())))?;
    fs::write(out.join(CONFIG_FILE), cfg.echo()).map_err(|e| Failure::Config(e.to_string()))?;
    Ok((cfg, out))
}

fn write(stage: Stage, path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(stage_err(stage))
}

fn execute(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run(c) => {
            let (cfg, out) = load_config(&c)?;
            let r = run(&cfg, &out)?;
            println!(
                "validation return {:.4}, training return {:.4}, {} env steps, {:.1}s -> {}",
                r.metrics.validation_return,
                r.metrics.train_return,
                r.metrics.env_steps,
                r.wall_secs,
                out.join(SUMMARY_FILE).display()
            );
        }
        Cmd::Plan(c) => {
            let (cfg, out) = load_config(&c)?;
            let env = cfg.env.build();
            let tree = plan(&cfg, env.as_ref())?;
            save_tree(&tree, &out.join(TREE_FILE)).map_err(stage_err(Stage::Plan))?;
            write(Stage::Plan, &out.join(COVERAGE_FILE), &coverage_csv(&tree))?;
            println!("{} nodes, coverage {:.4}, hash {}", tree.len(), tree.coverage(), tree.hash());
        }
        Cmd::Extract { common, tree } => {
            let (cfg, out) = load_config(&common)?;
            let t = load_tree(&tree).map_err(stage_err(Stage::Extract))?;
            let b = extract(&cfg, &t)?;
            b.save(&out.join(RESETS_FILE)).map_err(stage_err(Stage::Extract))?;
            println!("{} reset states", b.len());
        }
        Cmd::Pretrain { mut common, tree, resets, task, beta } => {
            if let Some(t) = task {
                common.set.push(format!("task={t}"));
            }
            if let Some(b) = beta {
                common.set.push(format!("ipt.beta={b:?}"));
            }
            let (cfg, out) = load_config(&common)?;
            let env = cfg.env.build();
            let t = load_tree(&tree).map_err(stage_err(Stage::Ipt))?;
            let buf = resets.map(|p| ResetBuffer::load(&p)).transpose().map_err(stage_err(Stage::Extract))?;
            let (ck, demos) = pretrain(&cfg, env.as_ref(), &t, buf.as_ref())?;
            save_checkpoint(&ck, &out.join(POLICY_FILE)).map_err(stage_err(Stage::Ipt))?;
            save_demo_csv(&demos, &out.join(DEMOS_FILE)).map_err(stage_err(Stage::Ipt))?;
            println!("{} demonstration pairs, checkpoint {}", demos.len(), ck.hash());
        }
        Cmd::Train { common, resets, init } => {
            let (cfg, out) = load_config(&common)?;
            let env = cfg.env.build();
            let buf = match resets.or_else(|| cfg.reset.resets.clone()) {
                Some(p) => Some(ResetBuffer::load(&p).map_err(|e| Failure::Stage(StageError {
                    stage: Stage::Extract,
                    message: format!("reset artifact {}: {e}", p.display()),
                }))?),
                None => None,
            };
            let ck = init.or_else(|| cfg.reset.init.clone()).map(|p| load_checkpoint(&p)).transpose().map_err(stage_err(Stage::Ipt))?;
            let (trained, _) = train_stage(&cfg, env.as_ref(), buf, ck, &mut |row| {
                eprintln!("iter {} steps {} return {:.4} drop {:.2}", row.iter, row.env_steps, row.mean_return, row.drop_rate)
            })?;
            write(Stage::Train, &out.join(CURVE_FILE), &curve_csv(&trained.curve))?;
            let ck = Checkpoint { policy: trained.policy, value: Some(trained.value) };
            save_checkpoint(&ck, &out.join(POLICY_FILE)).map_err(stage_err(Stage::Train))?;
            println!("{} iterations, {} env steps", trained.curve.len(), trained.env_steps);
        }
        Cmd::Eval { common, policy } => {
            let (cfg, out) = load_config(&common)?;
            let env = cfg.env.build();
            let ck = load_checkpoint(&policy).map_err(stage_err(Stage::Eval))?;
            let value = ck.value.ok_or_else(|| Failure::Stage(StageError { stage: Stage::Eval, message: "checkpoint has no critic".into() }))?;
            let (vr, m) = evaluate(&cfg, env.as_ref(), &ck.policy, &value)?;
            let json = serde_json::json!({ "config_hash": cfg.hash(), "validation_return": vr, "eval": m });
            write(Stage::Eval, &out.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&json).map_err(stage_err(Stage::Eval))? + "\n"))?;
            println!("validation return {vr:.4}, median progress {:.4}", m.median_progress);
        }
        Cmd::Sweep { common, axis, values, seeds, plan_only } => {
            let (cfg, out) = load_config(&common)?;
            let axis = Axis::parse(&axis).ok_or_else(|| Failure::Config(format!("unknown sweep axis {axis:?}")))?;
            let spec = SweepSpec { base: cfg, axis, values, seeds, plan_only };
            let res = sweep(&spec, &out)?;
            let metric = if plan_only { Metric::Coverage } else { Metric::ValidationReturn };
            for c in res.cells(&spec.values, metric) {
                println!("{} = {}: median {} {:?} ({} failed)", axis.as_str(), c.value, metric.as_str(), c.median, c.failures);
            }
            let v = res.verdicts(&spec.values, metric);
            println!("spearman {:?}, monotone-trend {:?}, interior-peak {:?}", v.spearman, v.monotone, v.interior_peak);
        }
        Cmd::Plot { kind, series, out } => {
            let kind = PlotKind::parse(&kind).map_err(|e| Failure::Config(e.to_string()))?;
            let groups = series
                .iter()
                .map(|s| {
                    let (label, files) = s.split_once('=').ok_or_else(|| Failure::Config(format!("expected label=files, got {s:?}")))?;
                    Ok((label.to_string(), files.split(',').map(PathBuf::from).collect()))
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            plot(&groups, kind, &out).map_err(stage_err(Stage::Eval))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("RXR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}

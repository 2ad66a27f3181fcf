//! Experiment harness: configs, the plan-to-eval pipeline, sweeps and plots.

pub mod config;
pub mod eval;
pub mod plot;
pub mod sweep;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::baselines::{
    er_buffer, fi_sampler, gc_schedule, handcrafted_resets, sgs_sampler, BufferSampler, ResetKind, ResetSampler,
};
use crate::envs::Environment;
use crate::extract::{build_reset_buffer, extract_paths, ResetBuffer, Scoring};
use crate::grrt::{grow, save_tree, Tree};
use crate::ipt::{behavior_clone, build_dataset, pretrain_value, save_demo_csv};
use crate::nn::{load_checkpoint, save_checkpoint, Checkpoint, GaussianPolicy, ValueFn};
use crate::ppo::{curve_csv, obs_dims, train, ActionMode, CurveRow, TrainOutput};
use crate::state::RngHandle;

pub use config::{ConfigError, EnvChoice, ExperimentConfig};
pub use eval::{eval_policy, Controller, EvalMetrics, PolicyController, ScriptedGait, ValidationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Plan,
    Extract,
    Ipt,
    Train,
    Eval,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::Plan => "plan",
            Self::Extract => "extract",
            Self::Ipt => "ipt",
            Self::Train => "train",
            Self::Eval => "eval",
        }
    }
}

/// A pipeline failure tagged with the stage that raised it.
#[derive(Debug, Clone, PartialEq)]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage.as_str(), self.message)
    }
}

impl std::error::Error for StageError {}

impl From<ConfigError> for StageError {
    fn from(e: ConfigError) -> Self {
        StageError { stage: Stage::Config, message: e.to_string() }
    }
}

fn tag<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> StageError {
    move |e| StageError { stage, message: e.to_string() }
}

pub const CONFIG_FILE: &str = "config.echo";
pub const TREE_FILE: &str = "tree.rxrt";
pub const RESETS_FILE: &str = "resets.rxrt";
pub const POLICY_FILE: &str = "policy.rxrp";
pub const DEMOS_FILE: &str = "demos.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Iterations averaged for the final training return.
pub const FINAL_WINDOW: usize = 5;

pub fn coverage_csv(tree: &Tree) -> String {
    let mut s = String::from("attempts,coverage\n");
    for (a, c) in &tree.stats.coverage_curve {
        s.push_str(&format!("{a},{c:?}\n"));
    }
    s
}

/// Mean training return over the last `FINAL_WINDOW` iterations.
pub fn final_return(curve: &[CurveRow]) -> f64 {
    let tail = &curve[curve.len().saturating_sub(FINAL_WINDOW)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|r| r.mean_return).sum::<f64>() / tail.len() as f64
}

fn write(stage: Stage, path: &Path, text: &str) -> Result<(), StageError> {
    fs::write(path, text).map_err(|e| StageError { stage, message: format!("{}: {e}", path.display()) })
}

fn cache_key(cfg: &ExperimentConfig) -> String {
    let keep = |k: &str| k == "env" || k.starts_with("env.");
    cfg.entries().into_iter().filter(|(k, _)| keep(k)).map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Grow the planner tree for `cfg` (seeded from the run seed).
pub fn plan(cfg: &ExperimentConfig, env: &dyn Environment) -> Result<Tree, StageError> {
    let pc = crate::grrt::GrrtConfig { seed: 1000 + cfg.seed, ..cfg.planner.clone() };
    grow(&pc, env, &cfg.task).map_err(tag(Stage::Plan))
}

/// Reset buffer from the tree's best paths (or the whole tree for goal sampling).
pub fn extract(cfg: &ExperimentConfig, tree: &Tree) -> Result<ResetBuffer, StageError> {
    let mut rng = RngHandle::new(cfg.seed, 1);
    build_reset_buffer(tree, &cfg.task, cfg.extract_budget, &Scoring::Progress, &mut rng).map_err(tag(Stage::Extract))
}

/// Fresh nets and the rng stream that continues after their initialisation.
pub fn fresh_nets(cfg: &ExperimentConfig, env: &dyn Environment) -> Result<(GaussianPolicy, ValueFn, RngHandle), StageError> {
    let (od, cd) = obs_dims(env, &cfg.task);
    let mut rng = RngHandle::new(cfg.seed, 2);
    let p = GaussianPolicy::new(od, env.action_dim(), &cfg.hidden, cfg.init_std, &mut rng).map_err(tag(Stage::Train))?;
    let v = ValueFn::new(cd, &cfg.hidden, &mut rng).map_err(tag(Stage::Train))?;
    Ok((p, v, rng))
}

/// Imitation pre-training from the tree's paths. The critic is fitted on
/// rollouts of the cloned policy started from `resets` (the fixed initial
/// state when `None`). Returns the warm-start checkpoint and the demos.
pub fn pretrain(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    tree: &Tree,
    resets: Option<&ResetBuffer>,
) -> Result<(Checkpoint, Vec<crate::ipt::DemoPair>), StageError> {
    let (mut p, mut v, mut rng) = fresh_nets(cfg, env)?;
    let ex = extract_paths(tree, &cfg.task, cfg.extract_paths, &Scoring::Progress, &mut rng).map_err(tag(Stage::Extract))?;
    let data = build_dataset(env, &cfg.task, &ex.paths, cfg.ipt.beta).map_err(tag(Stage::Ipt))?;
    behavior_clone(&mut p, &data, &cfg.ipt, &mut rng).map_err(tag(Stage::Ipt))?;
    let mut sampler: Box<dyn ResetSampler> = match resets {
        Some(b) => Box::new(BufferSampler::new(b.clone(), true).map_err(tag(Stage::Ipt))?),
        None => Box::new(fi_sampler(env, env.initial_state()).map_err(tag(Stage::Ipt))?),
    };
    pretrain_value(&p, &mut v, env, &cfg.task, sampler.as_mut(), &cfg.ipt, &cfg.ppo, &mut rng).map_err(tag(Stage::Ipt))?;
    Ok((Checkpoint { policy: p, value: Some(v) }, data))
}

/// Train with the configured reset strategy. Buffer strategies need
/// `resets`; `init` replaces the fresh nets.
pub fn train_stage(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    resets: Option<ResetBuffer>,
    init: Option<Checkpoint>,
    on_iter: &mut dyn FnMut(&CurveRow),
) -> Result<(TrainOutput, Option<f64>), StageError> {
    let t = Stage::Train;
    let (p, v) = match init {
        Some(Checkpoint { policy, value: Some(value) }) => (policy, value),
        Some(_) => return Err(StageError { stage: t, message: "warm-start checkpoint has no critic".into() }),
        None => {
            let (p, v, _) = fresh_nets(cfg, env)?;
            (p, v)
        }
    };
    let (od, cd) = obs_dims(env, &cfg.task);
    if p.obs_dim() != od || p.act_dim() != env.action_dim() || v.obs_dim() != cd {
        return Err(StageError { stage: t, message: "checkpoint does not match the environment".into() });
    }
    let kind = cfg.reset.kind;
    let budget = cfg.ppo.env_step_budget.unwrap_or(1_000_000);
    let mut sampler: Box<dyn ResetSampler + '_> = match kind {
        ResetKind::Fi | ResetKind::FiIpt => Box::new(fi_sampler(env, env.initial_state()).map_err(tag(t))?),
        ResetKind::Er => Box::new(er_buffer(env, cfg.reset.er_capacity).map_err(tag(t))?),
        ResetKind::Sgs => {
            Box::new(sgs_sampler(env, cfg.reset.sgs_max_tries).map_err(tag(t))?.with_fallback(env.initial_state()))
        }
        ResetKind::Gc => {
            let horizon = if cfg.reset.gc_horizon > 0 { cfg.reset.gc_horizon } else { budget };
            let states = handcrafted_resets(env, cfg.reset.gc_states, cfg.seed).map_err(tag(t))?;
            Box::new(crate::baselines::GcSampler::new(states, gc_schedule(horizon).map_err(tag(t))?).map_err(tag(t))?)
        }
        ResetKind::Rxr | ResetKind::RxrIpt => {
            let buf = resets.ok_or(StageError { stage: Stage::Extract, message: "no reset buffer".into() })?;
            if buf.layout.len() != env.layout().len() || buf.action_dim != env.action_dim() {
                return Err(StageError { stage: Stage::Extract, message: "reset buffer does not match the environment".into() });
            }
            Box::new(BufferSampler::new(buf, kind.uses_ipt()).map_err(tag(Stage::Extract))?)
        }
    };
    let ppo = crate::ppo::PpoConfig { seed: cfg.seed, ..cfg.ppo.clone() };
    let out = train(env, &cfg.task, sampler.as_mut(), p, v, &ppo, on_iter).map_err(tag(t))?;
    let fallback_share = (kind == ResetKind::Sgs).then(|| {
        let eps = out.curve.len() * cfg.ppo.episodes_per_iter;
        sampler.fallbacks() as f64 / eps.max(1) as f64
    });
    Ok((out, fallback_share))
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalMetrics {
    /// Mean deterministic return from the fixed validation starts.
    pub validation_return: f64,
    /// Mean training return of the last iterations.
    pub train_return: f64,
    pub env_steps: u64,
    pub iterations: usize,
    pub best_iter: Option<usize>,
    pub tree_nodes: Option<usize>,
    pub tree_coverage: Option<f64>,
    pub resets: Option<usize>,
    /// Share of SGS draws served by the initial-state fallback.
    pub sgs_fallback_share: Option<f64>,
    pub eval: EvalMetrics,
}

/// Artifacts and results of one pipeline run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub reset_kind: String,
    pub out_dir: PathBuf,
    pub config: PathBuf,
    pub curve: PathBuf,
    pub policy: PathBuf,
    pub tree: Option<PathBuf>,
    pub coverage: Option<PathBuf>,
    pub resets: Option<PathBuf>,
    pub wall_secs: f64,
    pub metrics: FinalMetrics,
    #[serde(skip)]
    pub curve_rows: Vec<CurveRow>,
    #[serde(skip)]
    pub coverage_curve: Vec<(u64, f64)>,
}

/// Evaluate trained nets: validation return plus `eval.episodes` sampled
/// runs from the initial state.
pub fn evaluate(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    policy: &GaussianPolicy,
    value: &ValueFn,
) -> Result<(f64, EvalMetrics), StageError> {
    let e = Stage::Eval;
    let vs = ValidationSet::cached(
        &cache_key(cfg),
        env,
        &cfg.task,
        cfg.eval.reference_nodes,
        cfg.eval.reference_seed,
        cfg.eval.validation_size,
    )
    .map_err(tag(e))?;
    let vr = vs.mean_return(policy, value, env, &cfg.task, cfg.ppo.max_episode_len).map_err(tag(e))?;
    let mut ctl = PolicyController { policy, mode: ActionMode::Sample };
    let mut rng = RngHandle::new(cfg.seed, 3);
    let starts: Vec<_> = match cfg.task.kind {
        crate::envs::TaskKind::Gait => vec![env.initial_state()],
        _ => vs.starts.states().cloned().collect(),
    };
    let m = eval_policy(&mut ctl, env, &cfg.task, &starts, cfg.eval.episodes, cfg.ppo.max_episode_len, &mut rng)
        .map_err(tag(e))?;
    Ok((vr, m))
}

/// Plan, extract, pre-train, train and evaluate, writing every artifact into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, StageError> {
    cfg.validate()?;
    let t0 = Instant::now();
    fs::create_dir_all(out).map_err(|e| StageError { stage: Stage::Config, message: format!("{}: {e}", out.display()) })?;
    let config = out.join(CONFIG_FILE);
    write(Stage::Config, &config, &cfg.echo())?;
    let env = cfg.env.build();
    let env = env.as_ref();
    let kind = cfg.reset.kind;

    let mut resets = match &cfg.reset.resets {
        Some(p) if kind.uses_buffer() => Some(ResetBuffer::load(p).map_err(|e| StageError {
            stage: Stage::Extract,
            message: format!("reset artifact {}: {e}", p.display()),
        })?),
        _ => None,
    };
    let init = match &cfg.reset.init {
        Some(p) => Some(load_checkpoint(p).map_err(|e| StageError {
            stage: Stage::Ipt,
            message: format!("warm-start checkpoint {}: {e}", p.display()),
        })?),
        None => None,
    };
    let need_tree = (kind.uses_buffer() && resets.is_none()) || (kind.uses_ipt() && init.is_none());
    let tree = if need_tree { Some(plan(cfg, env)?) } else { None };
    let (mut tree_path, mut cov_path, mut resets_path) = (None, None, None);
    if let Some(t) = &tree {
        let p = out.join(TREE_FILE);
        save_tree(t, &p).map_err(tag(Stage::Plan))?;
        tree_path = Some(p);
        let p = out.join(COVERAGE_FILE);
        write(Stage::Plan, &p, &coverage_csv(t))?;
        cov_path = Some(p);
    }
    if kind.uses_buffer() && resets.is_none() {
        let b = extract(cfg, tree.as_ref().expect("tree grown for buffer strategies"))?;
        let p = out.join(RESETS_FILE);
        b.save(&p).map_err(tag(Stage::Extract))?;
        resets_path = Some(p);
        resets = Some(b);
    }
    let init = match init {
        Some(c) => Some(c),
        None if kind.uses_ipt() => {
            let (ck, demos) = pretrain(cfg, env, tree.as_ref().expect("tree grown for IPT"), resets.as_ref())?;
            save_demo_csv(&demos, &out.join(DEMOS_FILE)).map_err(tag(Stage::Ipt))?;
            Some(ck)
        }
        None => None,
    };
    let n_resets = resets.as_ref().map(|b| b.len());
    let (trained, sgs_share) = train_stage(cfg, env, resets, init, &mut |_| {})?;
    let curve = out.join(CURVE_FILE);
    write(Stage::Train, &curve, &curve_csv(&trained.curve))?;
    let policy = out.join(POLICY_FILE);
    let ck = Checkpoint { policy: trained.policy.clone(), value: Some(trained.value.clone()) };
    save_checkpoint(&ck, &policy).map_err(tag(Stage::Train))?;

    let (validation_return, eval) = evaluate(cfg, env, &trained.policy, &trained.value)?;
    let record = RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        reset_kind: kind.as_str().to_string(),
        out_dir: out.to_path_buf(),
        config,
        curve,
        policy,
        tree: tree_path,
        coverage: cov_path,
        resets: resets_path,
        wall_secs: t0.elapsed().as_secs_f64(),
        metrics: FinalMetrics {
            validation_return,
            train_return: final_return(&trained.curve),
            env_steps: trained.env_steps,
            iterations: trained.curve.len(),
            best_iter: trained.best_iter,
            tree_nodes: tree.as_ref().map(|t| t.len()),
            tree_coverage: tree.as_ref().map(|t| t.coverage()),
            resets: n_resets,
            sgs_fallback_share: sgs_share,
            eval,
        },
        curve_rows: trained.curve,
        coverage_curve: tree.map(|t| t.stats.coverage_curve.clone()).unwrap_or_default(),
    };
    let json = serde_json::to_string_pretty(&record).map_err(tag(Stage::Eval))?;
    write(Stage::Eval, &out.join(SUMMARY_FILE), &(json + "\n"))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> ExperimentConfig {
        ExperimentConfig::parse(
            "env = corridor\nenv.dim = 2\nplanner.n_max = 200\nppo.iterations = 3\nppo.episodes_per_iter = 8\n\
             ppo.env_steps = none\nppo.max_episode_len = 50\neval.reference_nodes = 100\neval.validation_size = 4\n\
             eval.episodes = 2\nextract.budget = 50\n",
        )
        .unwrap()
    }

    #[test]
    fn run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke();
        let r = run(&cfg, dir.path()).unwrap();
        for f in [CONFIG_FILE, TREE_FILE, RESETS_FILE, POLICY_FILE, CURVE_FILE, COVERAGE_FILE, SUMMARY_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(r.metrics.iterations, 3);
        let echoed = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(echoed.hash(), r.config_hash);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(json["config_hash"], r.config_hash.as_str());
        assert_eq!(json["metrics"]["iterations"], 3);
    }

    #[test]
    fn fixed_start_runs_skip_the_planner() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke();
        cfg.set("reset.kind", "FI").unwrap();
        let r = run(&cfg, dir.path()).unwrap();
        assert!(r.tree.is_none() && r.resets.is_none());
        assert!(!dir.path().join(TREE_FILE).exists());
    }

    #[test]
    fn missing_reset_artifact_is_an_extract_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke();
        cfg.set("reset.resets", dir.path().join("absent.rxrt").to_str().unwrap()).unwrap();
        let e = run(&cfg, &dir.path().join("out")).unwrap_err();
        assert_eq!(e.stage, Stage::Extract);
    }

    #[test]
    fn curriculum_needs_an_object_angle() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke();
        cfg.set("reset.kind", "GC").unwrap();
        assert_eq!(run(&cfg, dir.path()).unwrap_err().stage, Stage::Train);
    }

    #[test]
    fn final_return_averages_the_tail() {
        let row = |r| CurveRow {
            iter: 0,
            env_steps: 0,
            mean_return: r,
            success_rate: 0.0,
            drop_rate: 0.0,
            ep_len: 0.0,
            pi_loss: 0.0,
            v_loss: 0.0,
            entropy: 0.0,
        };
        let c: Vec<_> = (0..8).map(|i| row(i as f64)).collect();
        assert_eq!(final_return(&c), 5.0);
        assert_eq!(final_return(&c[..2]), 0.5);
        assert_eq!(final_return(&[]), 0.0);
    }
}

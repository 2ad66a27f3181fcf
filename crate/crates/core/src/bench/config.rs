//! Flat `key = value` experiment configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::ResetKind;
use crate::envs::{Corridor, CorridorParams, Environment, ObsMask, PlanarGait, PlanarGaitParams, TaskKind, TaskSpec};
use crate::grrt::{hex, GrrtConfig, StabilityHold};
use crate::ipt::IptConfig;
use crate::ppo::PpoConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvChoice {
    PlanarGait(PlanarGaitParams),
    Corridor(CorridorParams),
}

impl EnvChoice {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PlanarGait(_) => "planar_gait",
            Self::Corridor(_) => "corridor",
        }
    }

    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            Self::PlanarGait(p) => Box::new(PlanarGait::new(p.clone())),
            Self::Corridor(p) => Box::new(Corridor::new(p.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResetConfig {
    pub kind: ResetKind,
    pub er_capacity: usize,
    pub sgs_max_tries: u64,
    /// Anneal horizon in env steps; 0 uses the training budget.
    pub gc_horizon: u64,
    pub gc_states: usize,
    /// Pre-built reset buffer; replaces planning and extraction for buffer kinds.
    pub resets: Option<PathBuf>,
    /// Warm-start checkpoint; replaces imitation pre-training for IPT kinds.
    pub init: Option<PathBuf>,
}

impl Default for ResetConfig {
    fn default() -> Self {
        Self {
            kind: ResetKind::Rxr,
            er_capacity: 10_000,
            sgs_max_tries: 10_000,
            gc_horizon: 0,
            gc_states: 20,
            resets: None,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub validation_size: usize,
    pub reference_nodes: usize,
    pub reference_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 10, validation_size: 32, reference_nodes: 3000, reference_seed: 77_777 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvChoice,
    pub task: TaskSpec,
    pub planner: GrrtConfig,
    pub extract_budget: usize,
    pub extract_paths: usize,
    pub ipt: IptConfig,
    pub ppo: PpoConfig,
    pub init_std: f64,
    pub hidden: Vec<usize>,
    pub reset: ResetConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvChoice::PlanarGait(PlanarGaitParams::default()),
            task: TaskSpec::gait(),
            planner: GrrtConfig { max_attempts: Some(200_000), ..GrrtConfig::default() },
            extract_budget: crate::extract::DEFAULT_BUDGET,
            extract_paths: 200,
            ipt: IptConfig::default(),
            ppo: PpoConfig {
                iterations: 1_000_000,
                minibatch_size: 2048,
                env_step_budget: Some(500_000),
                ..PpoConfig::default()
            },
            init_std: 0.15,
            hidden: vec![64, 64],
            reset: ResetConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), msg: e.to_string() })
}

fn bad(key: &str, msg: &str) -> ConfigError {
    ConfigError::Value { key: key.into(), msg: msg.into() }
}

fn opt_u64(key: &str, v: &str) -> Result<Option<u64>, ConfigError> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl ExperimentConfig {
    /// Set one key; the environment kind must be chosen before its parameters.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let p = &mut self.planner;
        let o = &mut self.ppo;
        match key {
            "env" => {
                self.env = match v {
                    "planar_gait" => EnvChoice::PlanarGait(PlanarGaitParams::default()),
                    "corridor" => EnvChoice::Corridor(CorridorParams::default()),
                    _ => return Err(bad(key, "expected planar_gait or corridor")),
                }
            }
            "env.slip_limit" | "env.spread_min" | "env.q_lim" => match &mut self.env {
                EnvChoice::PlanarGait(g) => {
                    let x = parse(key, v)?;
                    match key {
                        "env.slip_limit" => g.slip_limit = x,
                        "env.spread_min" => g.spread_min = x,
                        _ => g.q_lim = x,
                    }
                }
                _ => return Err(bad(key, "only applies to planar_gait")),
            },
            "env.dim" | "env.bends" | "env.half_width" => match &mut self.env {
                EnvChoice::Corridor(c) => match key {
                    "env.dim" => c.dim = parse(key, v)?,
                    "env.bends" => c.bends = parse(key, v)?,
                    _ => c.half_width = parse(key, v)?,
                },
                _ => return Err(bad(key, "only applies to corridor")),
            },
            "task" => {
                let kind = TaskKind::parse(v).ok_or_else(|| bad(key, "expected gait, go_to_root or arbitrary_reorient"))?;
                let goal = (kind == TaskKind::ArbitraryReorient).then_some(self.task.goal.unwrap_or(0.0));
                self.task = TaskSpec { kind, goal, ..self.task.clone() };
            }
            "task.goal" => {
                if self.task.kind != TaskKind::ArbitraryReorient {
                    return Err(bad(key, "only applies to arbitrary_reorient"));
                }
                self.task.goal = Some(parse(key, v)?);
            }
            "task.obs_mask" => self.task.mask = ObsMask::parse(v).ok_or_else(|| bad(key, "expected none, contacts, object_angle or both"))?,
            "planner.n_max" => p.n_max = parse(key, v)?,
            "planner.k_max" => p.k_max = parse(key, v)?,
            "planner.alpha" => p.alpha = parse(key, v)?,
            "planner.horizon" => p.horizon = parse(key, v)?,
            "planner.hold" => p.hold = StabilityHold::parse(v).ok_or_else(|| bad(key, "expected zero or sampled"))?,
            "planner.max_attempts" => p.max_attempts = opt_u64(key, v)?,
            "planner.batch" => p.batch = parse(key, v)?,
            "extract.budget" => self.extract_budget = parse(key, v)?,
            "extract.paths" => self.extract_paths = parse(key, v)?,
            "ipt.beta" => self.ipt.beta = parse(key, v)?,
            "ipt.bc_epochs" => self.ipt.bc_epochs = parse(key, v)?,
            "ipt.value_steps" => self.ipt.value_steps = parse(key, v)?,
            "ipt.batch_size" => self.ipt.batch_size = parse(key, v)?,
            "ipt.lr_pi" => self.ipt.lr_pi = parse(key, v)?,
            "ipt.lr_v" => self.ipt.lr_v = parse(key, v)?,
            "ipt.value_epochs" => self.ipt.value_epochs = parse(key, v)?,
            "ppo.gamma" => o.gamma = parse(key, v)?,
            "ppo.lambda" => o.lambda = parse(key, v)?,
            "ppo.clip" => o.clip = parse(key, v)?,
            "ppo.epochs" => o.epochs = parse(key, v)?,
            "ppo.minibatch_size" => o.minibatch_size = parse(key, v)?,
            "ppo.ent_coef" => o.ent_coef = parse(key, v)?,
            "ppo.episodes_per_iter" => o.episodes_per_iter = parse(key, v)?,
            "ppo.iterations" => o.iterations = parse(key, v)?,
            "ppo.max_episode_len" => o.max_episode_len = parse(key, v)?,
            "ppo.lr_pi" => o.lr_pi = parse(key, v)?,
            "ppo.lr_v" => o.lr_v = parse(key, v)?,
            "ppo.max_grad_norm" => o.max_grad_norm = parse(key, v)?,
            "ppo.env_steps" => o.env_step_budget = opt_u64(key, v)?,
            "ppo.init_std" => self.init_std = parse(key, v)?,
            "ppo.hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|x| parse::<usize>(key, x.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "reset.kind" => self.reset.kind = ResetKind::parse(v).ok_or_else(|| bad(key, "unknown reset kind"))?,
            "reset.er_capacity" => self.reset.er_capacity = parse(key, v)?,
            "reset.sgs_max_tries" => self.reset.sgs_max_tries = parse(key, v)?,
            "reset.gc_horizon" => self.reset.gc_horizon = parse(key, v)?,
            "reset.gc_states" => self.reset.gc_states = parse(key, v)?,
            "reset.resets" => self.reset.resets = opt_path(v),
            "reset.init" => self.reset.init = opt_path(v),
            "eval.episodes" => self.eval.episodes = parse(key, v)?,
            "eval.validation_size" => self.eval.validation_size = parse(key, v)?,
            "eval.reference_nodes" => self.eval.reference_nodes = parse(key, v)?,
            "eval.reference_seed" => self.eval.reference_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = opt_path(v),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key with its resolved value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.planner;
        let o = &self.ppo;
        let mut e = vec![("env", self.env.name().to_string())];
        match &self.env {
            EnvChoice::PlanarGait(g) => {
                e.push(("env.slip_limit", format!("{:?}", g.slip_limit)));
                e.push(("env.spread_min", format!("{:?}", g.spread_min)));
                e.push(("env.q_lim", format!("{:?}", g.q_lim)));
            }
            EnvChoice::Corridor(c) => {
                e.push(("env.dim", c.dim.to_string()));
                e.push(("env.bends", c.bends.to_string()));
                e.push(("env.half_width", format!("{:?}", c.half_width)));
            }
        }
        e.push(("task", self.task.kind.as_str().to_string()));
        if let Some(g) = self.task.goal {
            e.push(("task.goal", format!("{g:?}")));
        }
        e.extend([
            ("task.obs_mask", self.task.mask.as_str().to_string()),
            ("planner.n_max", p.n_max.to_string()),
            ("planner.k_max", p.k_max.to_string()),
            ("planner.alpha", format!("{:?}", p.alpha)),
            ("planner.horizon", p.horizon.to_string()),
            ("planner.hold", p.hold.as_str().to_string()),
            ("planner.max_attempts", show_opt(&p.max_attempts)),
            ("planner.batch", p.batch.to_string()),
            ("extract.budget", self.extract_budget.to_string()),
            ("extract.paths", self.extract_paths.to_string()),
            ("ipt.beta", format!("{:?}", self.ipt.beta)),
            ("ipt.bc_epochs", self.ipt.bc_epochs.to_string()),
            ("ipt.value_steps", self.ipt.value_steps.to_string()),
            ("ipt.batch_size", self.ipt.batch_size.to_string()),
            ("ipt.lr_pi", format!("{:?}", self.ipt.lr_pi)),
            ("ipt.lr_v", format!("{:?}", self.ipt.lr_v)),
            ("ipt.value_epochs", self.ipt.value_epochs.to_string()),
            ("ppo.gamma", format!("{:?}", o.gamma)),
            ("ppo.lambda", format!("{:?}", o.lambda)),
            ("ppo.clip", format!("{:?}", o.clip)),
            ("ppo.epochs", o.epochs.to_string()),
            ("ppo.minibatch_size", o.minibatch_size.to_string()),
            ("ppo.ent_coef", format!("{:?}", o.ent_coef)),
            ("ppo.episodes_per_iter", o.episodes_per_iter.to_string()),
            ("ppo.iterations", o.iterations.to_string()),
            ("ppo.max_episode_len", o.max_episode_len.to_string()),
            ("ppo.lr_pi", format!("{:?}", o.lr_pi)),
            ("ppo.lr_v", format!("{:?}", o.lr_v)),
            ("ppo.max_grad_norm", format!("{:?}", o.max_grad_norm)),
            ("ppo.env_steps", show_opt(&o.env_step_budget)),
            ("ppo.init_std", format!("{:?}", self.init_std)),
            ("ppo.hidden", self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")),
            ("reset.kind", self.reset.kind.as_str().to_string()),
            ("reset.er_capacity", self.reset.er_capacity.to_string()),
            ("reset.sgs_max_tries", self.reset.sgs_max_tries.to_string()),
            ("reset.gc_horizon", self.reset.gc_horizon.to_string()),
            ("reset.gc_states", self.reset.gc_states.to_string()),
            ("reset.resets", show_path(&self.reset.resets)),
            ("reset.init", show_path(&self.reset.init)),
            ("eval.episodes", self.eval.episodes.to_string()),
            ("eval.validation_size", self.eval.validation_size.to_string()),
            ("eval.reference_nodes", self.eval.reference_nodes.to_string()),
            ("eval.reference_seed", self.eval.reference_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("out", show_path(&self.out)),
        ]);
        e
    }

    /// Parse config text on top of the defaults and validate the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply config text on top of `self`. An `env` line is applied before
    /// any other key so environment parameters may appear in any order.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected `key = value`, got {line:?}") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, msg: "empty key".into() });
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "env" && k != "task");
        for (k, v) in &pairs {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.planner.validate().or_else(|e| inv(e.to_string()))?;
        self.ppo.validate().or_else(|e| inv(e.to_string()))?;
        self.ipt.validate().or_else(|e| inv(e.to_string()))?;
        self.task.validate().or_else(|e| inv(e.to_string()))?;
        if let EnvChoice::Corridor(c) = &self.env {
            if c.dim < 2 || c.half_width <= 0.0 {
                return inv("corridor needs dim >= 2 and a positive half width".into());
            }
            if self.task.kind != TaskKind::Gait {
                return inv("the corridor only supports the gait task".into());
            }
        }
        if self.extract_budget < 1 || self.extract_paths < 1 {
            return inv("extract.budget and extract.paths must be positive".into());
        }
        if !(self.init_std > 0.0) || self.hidden.contains(&0) {
            return inv("ppo.init_std must be positive and hidden sizes non-zero".into());
        }
        if self.eval.episodes < 1 || self.eval.validation_size < 1 || self.eval.reference_nodes < 1 {
            return inv("eval counts must be positive".into());
        }
        if self.reset.er_capacity < 1 || self.reset.sgs_max_tries < 1 || self.reset.gc_states < 1 {
            return inv("reset.er_capacity, reset.sgs_max_tries and reset.gc_states must be positive".into());
        }
        if self.reset.resets.is_some() && !self.reset.kind.uses_buffer() {
            return inv(format!("reset.resets does not apply to {}", self.reset.kind.as_str()));
        }
        if self.reset.init.is_some() && !self.reset.kind.uses_ipt() {
            return inv(format!("reset.init does not apply to {}", self.reset.kind.as_str()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the echo, hex.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.echo().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.echo()).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# smoke\nplanner.k_max = 4  # fewer candidates\n\nenv.bends = 2\nenv = corridor\nppo.hidden = 32, 16\nreset.kind = sgs\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.planner.k_max, 4);
        assert_eq!(c.hidden, vec![32, 16]);
        assert_eq!(c.reset.kind, ResetKind::Sgs);
        let EnvChoice::Corridor(p) = &c.env else { panic!() };
        assert_eq!(p.bends, 2);
        let again = ExperimentConfig::parse(&c.echo()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(ExperimentConfig::parse("nope = 1"), Err(ConfigError::UnknownKey("nope".into())));
        assert!(matches!(ExperimentConfig::parse("planner.k_max"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("planner.k_max = x"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("planner.k_max = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("env.dim = 3"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("env = corridor\ntask = go_to_root"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("seed = 1").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn goal_only_for_arbitrary_reorient() {
        let c = ExperimentConfig::parse("task = arbitrary_reorient\ntask.goal = 1.5").unwrap();
        assert_eq!(c.task.goal, Some(1.5));
        assert_eq!(ExperimentConfig::parse(&c.echo()).unwrap(), c);
        assert!(ExperimentConfig::parse("task.goal = 1.5").is_err());
    }
}

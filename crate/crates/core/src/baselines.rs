//! Reset strategies for the trainer: tree buffers and the comparison methods.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::envs::{is_stable, Environment};
use crate::extract::{sample_reset, ExtractError, ResetBuffer};
use crate::grrt::{expand, sample_target, GrrtConfig, Tree};
use crate::nn::{load_checkpoint, Checkpoint, CheckpointError};
use crate::state::{angle_diff, ActionVec, RngHandle, StateVec};

/// Hold horizon used when (re)checking reset candidates.
pub const RESET_HOLD_HORIZON: usize = 50;

#[derive(Debug, Error)]
pub enum ResetError {
    #[error("reset state is not stable")]
    Unstable,
    #[error("no stable state found in {0} tries")]
    NoStableSample(u64),
    #[error("invalid reset strategy: {0}")]
    Invalid(String),
    #[error(transparent)]
    Buffer(#[from] ExtractError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResetKind {
    Fi,
    FiIpt,
    Er,
    Sgs,
    Gc,
    Rxr,
    RxrIpt,
}

impl ResetKind {
    pub const ALL: [ResetKind; 7] =
        [Self::Fi, Self::FiIpt, Self::Er, Self::Sgs, Self::Gc, Self::Rxr, Self::RxrIpt];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str().eq_ignore_ascii_case(s))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fi => "FI",
            Self::FiIpt => "FI_IPT",
            Self::Er => "ER",
            Self::Sgs => "SGS",
            Self::Gc => "GC",
            Self::Rxr => "RXR",
            Self::RxrIpt => "RXR_IPT",
        }
    }

    /// Whether the strategy starts from an imitation-pretrained policy.
    pub fn uses_ipt(self) -> bool {
        matches!(self, Self::FiIpt | Self::RxrIpt)
    }

    /// Whether the strategy needs a tree-derived reset buffer.
    pub fn uses_buffer(self) -> bool {
        matches!(self, Self::Rxr | Self::RxrIpt)
    }
}

/// Where a reset state came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetSource {
    Fixed,
    /// Entry index into a reset buffer.
    Buffer(usize),
    /// Slot of the explored-restart ring (`None` for the seeded initial state).
    Explored(Option<usize>),
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResetDraw {
    pub state: StateVec,
    pub source: ResetSource,
}

/// Source of episode start states, plus optional training-time hooks.
pub trait ResetSampler: Send {
    fn kind(&self) -> ResetKind;

    fn sample(&mut self, rng: &mut RngHandle) -> Result<ResetDraw, ResetError>;

    /// Called by the trainer, in order, for every non-dropped visited state.
    fn on_step(&mut self, _state: &StateVec, _rng: &mut RngHandle) {}

    /// Environment difficulty to train at after `env_steps` steps.
    fn difficulty(&self, _env_steps: u64) -> Option<f64> {
        None
    }

    /// Draws that could not be served by the strategy itself.
    fn fallbacks(&self) -> u64 {
        0
    }
}

fn held_stable(env: &dyn Environment, s: &StateVec) -> bool {
    is_stable(env, s, &ActionVec::zeros(env.action_dim()), RESET_HOLD_HORIZON)
}

/// Always the same start state.
#[derive(Debug, Clone)]
pub struct FixedSampler {
    state: StateVec,
    kind: ResetKind,
}

pub fn fi_sampler(env: &dyn Environment, state: StateVec) -> Result<FixedSampler, ResetError> {
    if !held_stable(env, &state) {
        return Err(ResetError::Unstable);
    }
    Ok(FixedSampler { state, kind: ResetKind::Fi })
}

impl ResetSampler for FixedSampler {
    fn kind(&self) -> ResetKind {
        self.kind
    }

    fn sample(&mut self, _rng: &mut RngHandle) -> Result<ResetDraw, ResetError> {
        Ok(ResetDraw { state: self.state.clone(), source: ResetSource::Fixed })
    }
}

/// Uniform draws from a tree-derived buffer.
#[derive(Debug, Clone)]
pub struct BufferSampler {
    buffer: ResetBuffer,
    kind: ResetKind,
}

impl BufferSampler {
    pub fn new(buffer: ResetBuffer, with_ipt: bool) -> Result<Self, ResetError> {
        if buffer.is_empty() {
            return Err(ExtractError::EmptyBuffer.into());
        }
        Ok(Self { buffer, kind: if with_ipt { ResetKind::RxrIpt } else { ResetKind::Rxr } })
    }

    pub fn buffer(&self) -> &ResetBuffer {
        &self.buffer
    }
}

impl ResetSampler for BufferSampler {
    fn kind(&self) -> ResetKind {
        self.kind
    }

    fn sample(&mut self, rng: &mut RngHandle) -> Result<ResetDraw, ResetError> {
        let (i, s) = sample_reset(&self.buffer, rng)?;
        Ok(ResetDraw { state: s.clone(), source: ResetSource::Buffer(i) })
    }
}

/// Explored restarts: a ring of states the policy itself visited, seeded
/// with the initial state and sampled uniformly.
pub struct ErBuffer<'e> {
    env: &'e dyn Environment,
    initial: StateVec,
    ring: Vec<StateVec>,
    capacity: usize,
    next: usize,
    pub insert_rate: f64,
}

pub const ER_INSERT_RATE: f64 = 0.01;

pub fn er_buffer(env: &dyn Environment, capacity: usize) -> Result<ErBuffer<'_>, ResetError> {
    if capacity < 1 {
        return Err(ResetError::Invalid("capacity must be at least 1".into()));
    }
    Ok(ErBuffer {
        env,
        initial: env.initial_state(),
        ring: Vec::with_capacity(capacity.min(1 << 16)),
        capacity,
        next: 0,
        insert_rate: ER_INSERT_RATE,
    })
}

impl ErBuffer<'_> {
    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Unconditional insert, evicting the oldest state once full.
    pub fn insert(&mut self, s: StateVec) {
        if self.ring.len() < self.capacity {
            self.ring.push(s);
        } else {
            self.ring[self.next] = s;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn stored(&self) -> &[StateVec] {
        &self.ring
    }
}

impl ResetSampler for ErBuffer<'_> {
    fn kind(&self) -> ResetKind {
        ResetKind::Er
    }

    fn sample(&mut self, rng: &mut RngHandle) -> Result<ResetDraw, ResetError> {
        loop {
            let i = rng.random_range(0..=self.ring.len());
            if i == self.ring.len() {
                return Ok(ResetDraw { state: self.initial.clone(), source: ResetSource::Explored(None) });
            }
            if held_stable(self.env, &self.ring[i]) {
                return Ok(ResetDraw { state: self.ring[i].clone(), source: ResetSource::Explored(Some(i)) });
            }
            // an unstable entry is dropped from the ring rather than retried
            self.ring.swap_remove(i);
            self.next = self.ring.len() % self.capacity;
        }
    }

    fn on_step(&mut self, state: &StateVec, rng: &mut RngHandle) {
        if rng.random::<f64>() < self.insert_rate {
            self.insert(state.clone());
        }
    }
}

/// Stable-grasp sampler: rejection sampling over the planner's sampling box.
pub struct SgsSampler<'e> {
    env: &'e dyn Environment,
    bounds: Vec<(f64, f64)>,
    max_tries: u64,
    fallback: Option<StateVec>,
    pub tries: u64,
    pub accepted: u64,
    fallbacks: u64,
}

pub fn sgs_sampler(env: &dyn Environment, max_tries: u64) -> Result<SgsSampler<'_>, ResetError> {
    if max_tries < 1 {
        return Err(ResetError::Invalid("max tries must be at least 1".into()));
    }
    Ok(SgsSampler {
        env,
        bounds: env.sample_bounds(),
        max_tries,
        fallback: None,
        tries: 0,
        accepted: 0,
        fallbacks: 0,
    })
}

impl<'e> SgsSampler<'e> {
    /// Serve `state` instead of failing when no stable sample is found.
    pub fn with_fallback(mut self, state: StateVec) -> Self {
        self.fallback = Some(state);
        self
    }

    pub fn draw(&mut self, rng: &mut RngHandle) -> Result<StateVec, ResetError> {
        for _ in 0..self.max_tries {
            self.tries += 1;
            let s = sample_target(self.env.layout(), &self.bounds, rng).map_err(|e| ResetError::Invalid(e.to_string()))?;
            if held_stable(self.env, &s) {
                self.accepted += 1;
                return Ok(s);
            }
        }
        Err(ResetError::NoStableSample(self.max_tries))
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.tries == 0 {
            0.0
        } else {
            self.accepted as f64 / self.tries as f64
        }
    }
}

impl ResetSampler for SgsSampler<'_> {
    fn kind(&self) -> ResetKind {
        ResetKind::Sgs
    }

    fn sample(&mut self, rng: &mut RngHandle) -> Result<ResetDraw, ResetError> {
        match self.draw(rng) {
            Ok(state) => Ok(ResetDraw { state, source: ResetSource::Sampled }),
            Err(e) => match &self.fallback {
                Some(s) => {
                    self.fallbacks += 1;
                    Ok(ResetDraw { state: s.clone(), source: ResetSource::Fixed })
                }
                None => Err(e),
            },
        }
    }

    fn fallbacks(&self) -> u64 {
        self.fallbacks
    }
}

/// Linear difficulty annealing `min(t / H, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcSchedule {
    pub horizon: u64,
}

pub fn gc_schedule(horizon: u64) -> Result<GcSchedule, ResetError> {
    if horizon < 1 {
        return Err(ResetError::Invalid("curriculum horizon must be at least 1".into()));
    }
    Ok(GcSchedule { horizon })
}

impl GcSchedule {
    pub fn difficulty(&self, t: u64) -> f64 {
        (t as f64 / self.horizon as f64).min(1.0)
    }
}

/// Curriculum: resets from a small fixed set while the env difficulty anneals.
#[derive(Debug, Clone)]
pub struct GcSampler {
    states: Vec<StateVec>,
    schedule: GcSchedule,
}

impl GcSampler {
    pub fn new(states: Vec<StateVec>, schedule: GcSchedule) -> Result<Self, ResetError> {
        if states.is_empty() {
            return Err(ResetError::Invalid("curriculum needs at least one reset state".into()));
        }
        Ok(Self { states, schedule })
    }
}

impl ResetSampler for GcSampler {
    fn kind(&self) -> ResetKind {
        ResetKind::Gc
    }

    fn sample(&mut self, rng: &mut RngHandle) -> Result<ResetDraw, ResetError> {
        let i = rng.random_range(0..self.states.len());
        let source = if self.states.len() == 1 { ResetSource::Fixed } else { ResetSource::Buffer(i) };
        Ok(ResetDraw { state: self.states[i].clone(), source })
    }

    fn difficulty(&self, env_steps: u64) -> Option<f64> {
        Some(self.schedule.difficulty(env_steps))
    }
}

/// `n` grasps with object angles spread evenly over the circle, each reached
/// by a short greedy planner rollout from the initial state.
pub fn handcrafted_resets(env: &dyn Environment, n: usize, seed: u64) -> Result<Vec<StateVec>, ResetError> {
    let root = env.initial_state();
    let theta0 = env.object_angle(&root).ok_or(ResetError::Invalid("env has no object angle".into()))?;
    let cfg = GrrtConfig { k_max: 64, ..GrrtConfig::default() };
    let mut out = Vec::with_capacity(n);
    let mut rng = RngHandle::new(seed, 0x6C);
    for k in 0..n {
        let target_angle = crate::state::wrap_angle(theta0 - std::f64::consts::PI + 2.0 * std::f64::consts::PI * k as f64 / n as f64);
        let mut tree = Tree::new(root.clone(), env.action_dim(), env.layout().default_weights())
            .map_err(|e| ResetError::Invalid(e.to_string()))?;
        let mut cur = 0usize;
        for _ in 0..400 {
            let s = &tree.nodes()[cur].state;
            let err = angle_diff(env.object_angle(s).unwrap_or(0.0), target_angle);
            if err.abs() < 0.05 {
                break;
            }
            // aim one step along the shorter way round, joints left free
            let mut target = s.clone();
            target.values_mut()[0] = crate::state::wrap_angle(target.values()[0] - err.signum() * env.step_limit());
            let Some((next, a)) =
                expand(&tree, cur, &target, &cfg, env, &mut rng).map_err(|e| ResetError::Invalid(e.to_string()))?
            else {
                continue;
            };
            cur = tree.push(cur, next, a, 0.0).map_err(|e| ResetError::Invalid(e.to_string()))?;
        }
        out.push(tree.nodes()[cur].state.clone());
    }
    if out.iter().any(|s| !held_stable(env, s)) {
        return Err(ResetError::Unstable);
    }
    Ok(out)
}

/// FI with a warm-start policy: the fixed sampler plus the loaded checkpoint
/// and its hash.
pub fn fi_ipt(
    checkpoint: &Path,
    env: &dyn Environment,
    state: StateVec,
) -> Result<(FixedSampler, Checkpoint, String), ResetError> {
    let ck = load_checkpoint(checkpoint)?;
    let mut s = fi_sampler(env, state)?;
    s.kind = ResetKind::FiIpt;
    let hash = ck.hash();
    Ok((s, ck, hash))
}

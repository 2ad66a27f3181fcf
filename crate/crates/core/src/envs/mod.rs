//! Deterministic desk-scale environments.
//!
//! An [`Environment`] supplies the raw transition `F(x, a)` and the stability
//! predicate. Everything task-related (rewards, success, observations, the
//! drop bookkeeping) lives in the free functions of this module so that every
//! environment shares one implementation of it.

mod corridor;
mod planar_gait;

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

pub use corridor::{Corridor, CorridorParams};
pub use planar_gait::{PlanarGait, PlanarGaitParams};

use crate::state::{angle_diff, ActionVec, Layout, ObservationVec, RngHandle, StateVec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("step called on a dropped state; the episode must be reset")]
    Dropped,
    #[error("non-finite action component")]
    NonFiniteAction,
    #[error("task {0:?} is not supported by environment {1}")]
    UnsupportedTask(TaskKind, String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
}

/// The transition model and stability predicate of one environment.
///
/// Implementations must be pure: identical inputs give bit-identical outputs.
pub trait Environment: Send + Sync {
    fn name(&self) -> &str;
    fn layout(&self) -> &Arc<Layout>;
    fn action_dim(&self) -> usize;
    fn initial_state(&self) -> StateVec;
    /// Stability predicate of a single state (the "not dropped" condition).
    fn stable(&self, s: &StateVec) -> bool;
    /// Raw transition. `a.len() == action_dim()` is checked by the caller.
    fn transition(&self, s: &StateVec, a: &[f64]) -> StateVec;
    /// Joint setpoints commanded by `a` from `s` (same order as the joint dims).
    fn setpoints(&self, s: &StateVec, a: &[f64]) -> Vec<f64>;
    /// Per-finger (or per-slab) binary contact readout.
    fn contacts(&self, s: &StateVec) -> Vec<bool>;
    /// Task progress: accumulated rotation, or arc length along a spine.
    fn progress(&self, s: &StateVec) -> f64;
    /// Object orientation for goal tasks; `None` when the env has none.
    fn object_angle(&self, s: &StateVec) -> Option<f64>;
    /// Privileged features for the critic, beyond the actor observation.
    fn privileged(&self, s: &StateVec, prev: Option<&StateVec>) -> Vec<f64>;
    /// Default per-dimension sampling box for the planner.
    fn sample_bounds(&self) -> Vec<(f64, f64)>;
    /// Per-step joint displacement limit.
    fn step_limit(&self) -> f64;
    /// Copy of this environment with its difficulty scalar set to `d in [0, 1]`.
    fn with_difficulty(&self, d: f64) -> Box<dyn Environment>;

    fn joint_values(&self, s: &StateVec) -> Vec<f64> {
        self.layout().joint_indices().iter().map(|&i| s.values()[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Gait,
    GoToRoot,
    ArbitraryReorient,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gait" => Some(Self::Gait),
            "go_to_root" | "go-to-root" => Some(Self::GoToRoot),
            "arbitrary_reorient" | "arbitrary-reorient" => Some(Self::ArbitraryReorient),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gait => "gait",
            Self::GoToRoot => "go_to_root",
            Self::ArbitraryReorient => "arbitrary_reorient",
        }
    }
}

/// Progress-rate reward of the gait task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaitReward {
    pub v_clip: f64,
    pub action_penalty: f64,
    pub dt: f64,
}

impl Default for GaitReward {
    fn default() -> Self {
        Self { v_clip: 0.1, action_penalty: 0.001, dt: 1.0 }
    }
}

/// Coefficients of the clipped-progress goal reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalReward {
    /// Scale, must be negative.
    pub c: f64,
    pub epsilon: f64,
    pub c_success: f64,
}

impl Default for GoalReward {
    fn default() -> Self {
        Self { c: -10.0, epsilon: 0.05, c_success: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessCriteria {
    pub theta_thresh: f64,
    pub qdot_thresh: f64,
    pub omega_thresh: f64,
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        Self { theta_thresh: 0.1, qdot_thresh: 0.1, omega_thresh: 0.1 }
    }
}

/// Feedback-ablation mask: which observation groups are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObsMask {
    pub contacts: bool,
    pub object_angle: bool,
}

impl ObsMask {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::default()),
            "contacts" => Some(Self { contacts: true, object_angle: false }),
            "object_angle" => Some(Self { contacts: false, object_angle: true }),
            "both" => Some(Self { contacts: true, object_angle: true }),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match (self.contacts, self.object_angle) {
            (false, false) => "none",
            (true, false) => "contacts",
            (false, true) => "object_angle",
            (true, true) => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Desired object angle; present iff `kind == ArbitraryReorient`.
    pub goal: Option<f64>,
    pub gait: GaitReward,
    pub reward: GoalReward,
    pub success: SuccessCriteria,
    pub mask: ObsMask,
}

impl TaskSpec {
    pub fn gait() -> Self {
        Self::with_kind(TaskKind::Gait, None)
    }

    pub fn go_to_root() -> Self {
        Self::with_kind(TaskKind::GoToRoot, None)
    }

    pub fn arbitrary_reorient(goal: f64) -> Self {
        Self::with_kind(TaskKind::ArbitraryReorient, Some(goal))
    }

    pub fn with_kind(kind: TaskKind, goal: Option<f64>) -> Self {
        Self {
            kind,
            goal,
            gait: GaitReward::default(),
            reward: GoalReward::default(),
            success: SuccessCriteria::default(),
            mask: ObsMask::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let want_goal = self.kind == TaskKind::ArbitraryReorient;
        if want_goal != self.goal.is_some() {
            return Err(EnvError::InvalidTask(format!(
                "goal must be present iff the task is arbitrary_reorient (kind {:?}, goal {:?})",
                self.kind, self.goal
            )));
        }
        if !(self.reward.c < 0.0 && self.reward.epsilon > 0.0 && self.reward.c_success > 0.0) {
            return Err(EnvError::InvalidTask("reward requires c < 0, epsilon > 0, c_success > 0".into()));
        }
        Ok(())
    }

    /// Goal angle: explicit for arbitrary reorientation, the root's angle for go-to-root.
    pub fn goal_angle(&self, env: &dyn Environment) -> Option<f64> {
        match self.kind {
            TaskKind::Gait => None,
            TaskKind::GoToRoot => env.object_angle(&env.initial_state()),
            TaskKind::ArbitraryReorient => self.goal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next: StateVec,
    pub observation: ObservationVec,
    pub reward: f64,
    pub dropped: bool,
    pub success: bool,
}

fn check_action(env: &dyn Environment, a: &ActionVec) -> Result<(), EnvError> {
    if a.dim() != env.action_dim() {
        return Err(EnvError::Dimension { expected: env.action_dim(), got: a.dim() });
    }
    if a.values().iter().any(|v| !v.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    Ok(())
}

fn check_state(env: &dyn Environment, s: &StateVec) -> Result<(), EnvError> {
    if s.len() != env.layout().len() {
        return Err(EnvError::Dimension { expected: env.layout().len(), got: s.len() });
    }
    Ok(())
}

fn check_task(env: &dyn Environment, task: &TaskSpec, s: &StateVec) -> Result<(), EnvError> {
    task.validate()?;
    if task.kind != TaskKind::Gait && env.object_angle(s).is_none() {
        return Err(EnvError::UnsupportedTask(task.kind, env.name().to_string()));
    }
    Ok(())
}

/// Joint and object velocities between two consecutive states:
/// `[q_dot..., omega]` (omega is 0 when the env has no object angle).
pub fn velocities(env: &dyn Environment, prev: &StateVec, next: &StateVec, dt: f64) -> Vec<f64> {
    let mut v: Vec<f64> = env
        .joint_values(next)
        .iter()
        .zip(env.joint_values(prev))
        .map(|(a, b)| (a - b) / dt)
        .collect();
    let omega = match (env.object_angle(next), env.object_angle(prev)) {
        (Some(a), Some(b)) => angle_diff(a, b) / dt,
        _ => 0.0,
    };
    v.push(omega);
    v
}

/// One environment step: transition, drop detection, reward and success.
pub fn step(
    env: &dyn Environment,
    s: &StateVec,
    a: &ActionVec,
    task: &TaskSpec,
) -> Result<StepResult, EnvError> {
    check_state(env, s)?;
    check_action(env, a)?;
    check_task(env, task, s)?;
    if !env.stable(s) {
        return Err(EnvError::Dropped);
    }
    let next = env.transition(s, a.values());
    let dropped = !env.stable(&next);
    let success = match task.kind {
        TaskKind::Gait => false,
        _ if dropped => false,
        _ => {
            let sdot = velocities(env, s, &next, task.gait.dt);
            is_success(env, &next, &sdot, task)
        }
    };
    let reward = match task.kind {
        TaskKind::Gait => reward_gait(env, s, &next, &task.gait),
        _ => goal_reward_with(env, s, &next, task, success),
    };
    let setpoints = env.setpoints(s, a.values());
    let observation = observe(env, &next, &setpoints, task);
    Ok(StepResult { next, observation, reward, dropped, success })
}

/// True iff holding `a_hold` for `horizon` steps from `s` never drops.
pub fn is_stable(env: &dyn Environment, s: &StateVec, a_hold: &ActionVec, horizon: usize) -> bool {
    if !env.stable(s) {
        return false;
    }
    if horizon == 0 {
        return true;
    }
    let mut cur = s.clone();
    for _ in 0..horizon {
        let next = env.transition(&cur, a_hold.values());
        if !env.stable(&next) {
            return false;
        }
        // a fixed point stays stable for the rest of the horizon
        if next == cur {
            return true;
        }
        cur = next;
    }
    true
}

/// Observation `[q, q_setpoint, c]`, extended with `(cos, sin)` of the
/// current (and, for arbitrary reorientation, desired) object angle.
pub fn observe(env: &dyn Environment, s: &StateVec, setpoints: &[f64], task: &TaskSpec) -> ObservationVec {
    let (values, mask) = raw_observation(env, s, setpoints, task);
    ObservationVec::with_mask(values, mask).expect("mask built alongside values")
}

fn raw_observation(
    env: &dyn Environment,
    s: &StateVec,
    setpoints: &[f64],
    task: &TaskSpec,
) -> (Vec<f64>, Vec<bool>) {
    let mut values = env.joint_values(s);
    values.extend_from_slice(setpoints);
    let mut mask = vec![false; values.len()];
    for c in env.contacts(s) {
        values.push(if c { 1.0 } else { 0.0 });
        mask.push(task.mask.contacts);
    }
    if task.kind != TaskKind::Gait {
        let theta = env.object_angle(s).unwrap_or(0.0);
        values.extend_from_slice(&[theta.cos(), theta.sin()]);
        mask.extend_from_slice(&[task.mask.object_angle; 2]);
    }
    if task.kind == TaskKind::ArbitraryReorient {
        let goal = task.goal.unwrap_or(0.0);
        values.extend_from_slice(&[goal.cos(), goal.sin()]);
        mask.extend_from_slice(&[false; 2]);
    }
    (values, mask)
}

/// Critic input: the unmasked actor features followed by privileged state.
pub fn critic_observation(
    env: &dyn Environment,
    s: &StateVec,
    prev: Option<&StateVec>,
    setpoints: &[f64],
    task: &TaskSpec,
) -> Vec<f64> {
    let (mut values, _) = raw_observation(env, s, setpoints, task);
    values.extend(env.privileged(s, prev));
    values
}

/// Rate of task progress, clipped to `+-v_clip`, minus a quadratic penalty on joint motion.
pub fn reward_gait(env: &dyn Environment, prev: &StateVec, next: &StateVec, cfg: &GaitReward) -> f64 {
    let rate = (env.progress(next) - env.progress(prev)) / cfg.dt;
    let penalty: f64 = env
        .joint_values(next)
        .iter()
        .zip(env.joint_values(prev))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    rate.clamp(-cfg.v_clip, cfg.v_clip) - cfg.action_penalty * penalty
}

/// Shortest angular distance between the object and the task goal.
pub fn goal_distance(env: &dyn Environment, s: &StateVec, task: &TaskSpec) -> f64 {
    match (env.object_angle(s), task.goal_angle(env)) {
        (Some(theta), Some(goal)) => angle_diff(theta, goal).abs(),
        _ => 0.0,
    }
}

/// `c * clip(D_t - D_{t-1}, -eps, eps) + c_success * [success]`.
pub fn reward_goal(env: &dyn Environment, prev: &StateVec, next: &StateVec, task: &TaskSpec) -> f64 {
    let sdot = velocities(env, prev, next, task.gait.dt);
    let success = env.stable(next) && is_success(env, next, &sdot, task);
    goal_reward_with(env, prev, next, task, success)
}

fn goal_reward_with(env: &dyn Environment, prev: &StateVec, next: &StateVec, task: &TaskSpec, success: bool) -> f64 {
    let progress = goal_distance(env, next, task) - goal_distance(env, prev, task);
    let eps = task.reward.epsilon;
    let bonus = if success { task.reward.c_success } else { 0.0 };
    task.reward.c * progress.clamp(-eps, eps) + bonus
}

/// Goal reached and the system at rest. `sdot` is `[q_dot..., omega]`.
pub fn is_success(env: &dyn Environment, s: &StateVec, sdot: &[f64], task: &TaskSpec) -> bool {
    if task.kind == TaskKind::Gait || sdot.is_empty() {
        return false;
    }
    let (qdot, omega) = sdot.split_at(sdot.len() - 1);
    let qdot_norm = qdot.iter().map(|v| v * v).sum::<f64>().sqrt();
    goal_distance(env, s, task) < task.success.theta_thresh
        && qdot_norm < task.success.qdot_thresh
        && omega[0].abs() < task.success.omega_thresh
}

/// Uniform goal angle in `[-pi, pi)`.
pub fn sample_goal(rng: &mut RngHandle) -> f64 {
    rng.random_range(-PI..PI)
}

/// Environment selected by name with default parameters.
pub fn by_name(name: &str) -> Option<Box<dyn Environment>> {
    match name {
        "planar_gait" => Some(Box::new(PlanarGait::new(PlanarGaitParams::default()))),
        "corridor" => Some(Box::new(Corridor::new(CorridorParams::default()))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gait_env() -> PlanarGait {
        PlanarGait::new(PlanarGaitParams::default())
    }

    fn act(v: &[f64]) -> ActionVec {
        ActionVec::new(v.to_vec()).unwrap()
    }

    fn with_theta(env: &PlanarGait, theta: f64) -> StateVec {
        let mut s = env.initial_state();
        s.values_mut()[0] = theta;
        s
    }

    #[test]
    fn goal_reward_zero_progress_is_zero() {
        let env = gait_env();
        let task = TaskSpec::arbitrary_reorient(1.0);
        // same distance to the goal on either side
        let prev = with_theta(&env, 0.5);
        let next = with_theta(&env, 1.5);
        assert_eq!(reward_goal(&env, &prev, &next, &task), 0.0);
    }

    #[test]
    fn goal_reward_clips_progress() {
        let env = gait_env();
        let mut task = TaskSpec::arbitrary_reorient(1.0);
        task.reward.c = -1.0;
        task.reward.epsilon = 0.05;
        // distance shrinks 0.6 -> 0.5; velocity criteria fail, so no bonus
        let prev = with_theta(&env, 0.4);
        let next = with_theta(&env, 0.5);
        let r = reward_goal(&env, &prev, &next, &task);
        assert!((r - 0.05).abs() < 1e-12, "{r}");
    }

    #[test]
    fn goal_reward_adds_success_bonus() {
        let env = gait_env();
        let task = TaskSpec::arbitrary_reorient(0.0);
        let s = with_theta(&env, 0.0);
        // at goal, at rest: progress term 0, bonus c_success
        assert_eq!(reward_goal(&env, &s, &s, &task), task.reward.c_success);
        let near = with_theta(&env, 0.02);
        let r = reward_goal(&env, &near, &s, &task);
        let expected = task.reward.c * (-0.02f64).clamp(-0.05, 0.05) + task.reward.c_success;
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn success_requires_all_criteria() {
        let env = gait_env();
        let task = TaskSpec::arbitrary_reorient(0.0);
        let n = env.action_dim();
        let at_rest = vec![0.0; n + 1];
        assert!(is_success(&env, &with_theta(&env, 0.0), &at_rest, &task));
        // strict inequality on the reorientation threshold
        let edge = with_theta(&env, task.success.theta_thresh);
        assert!(!is_success(&env, &edge, &at_rest, &task));
        let mut spinning = at_rest.clone();
        spinning[n] = 1.0;
        assert!(!is_success(&env, &with_theta(&env, 0.0), &spinning, &task));
        let mut joints_moving = at_rest;
        joints_moving[0] = 0.2;
        assert!(!is_success(&env, &with_theta(&env, 0.0), &joints_moving, &task));
    }

    #[test]
    fn go_to_root_uses_initial_angle() {
        let env = gait_env();
        let task = TaskSpec::go_to_root();
        assert_eq!(task.goal_angle(&env), Some(0.0));
        let obs = observe(&env, &env.initial_state(), &env.joint_values(&env.initial_state()), &task);
        let v = obs.values();
        assert_eq!(&v[v.len() - 2..], &[1.0, 0.0]);
    }

    #[test]
    fn task_goal_presence_is_validated() {
        let mut t = TaskSpec::gait();
        t.goal = Some(0.3);
        assert!(t.validate().is_err());
        let mut t = TaskSpec::arbitrary_reorient(0.0);
        t.goal = None;
        assert!(t.validate().is_err());
        assert!(TaskSpec::go_to_root().validate().is_ok());
    }

    #[test]
    fn observation_layout_and_mask() {
        let env = gait_env();
        let s = env.initial_state();
        let sp = env.joint_values(&s);
        let task = TaskSpec::gait();
        let obs = observe(&env, &s, &sp, &task);
        let m = env.params().fingers;
        assert_eq!(obs.len(), 4 * m + m);
        assert!(obs.values()[4 * m..].iter().all(|&c| c == 1.0));

        let mut masked = task.clone();
        masked.mask.contacts = true;
        let mobs = observe(&env, &s, &sp, &masked);
        assert!(mobs.values()[4 * m..].iter().all(|&c| c == 0.0));
        assert_eq!(&mobs.values()[..4 * m], &obs.values()[..4 * m]);

        let ar = observe(&env, &s, &sp, &TaskSpec::arbitrary_reorient(PI / 2.0));
        assert_eq!(ar.len(), 5 * m + 4);
        let tail = &ar.values()[5 * m..];
        assert_eq!(tail[0], 1.0);
        assert!((tail[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corridor_rejects_goal_tasks() {
        let env = Corridor::new(CorridorParams::default());
        let s = env.initial_state();
        let r = step(&env, &s, &ActionVec::zeros(env.action_dim()), &TaskSpec::go_to_root());
        assert!(matches!(r, Err(EnvError::UnsupportedTask(..))));
    }

    #[test]
    fn sample_goal_is_uniform_and_reproducible() {
        let mut a = RngHandle::new(5, 0);
        let mut b = RngHandle::new(5, 0);
        assert_eq!(sample_goal(&mut a), sample_goal(&mut b));
        let mut rng = RngHandle::new(9, 3);
        let n = 10_000;
        let (mut c, mut s) = (0.0, 0.0);
        for _ in 0..n {
            let g = sample_goal(&mut rng);
            assert!((-PI..PI).contains(&g));
            c += g.cos();
            s += g.sin();
        }
        assert!((c / n as f64).abs() < 0.05);
        assert!((s / n as f64).abs() < 0.05);
    }

    #[test]
    fn step_dimension_errors() {
        let env = gait_env();
        let s = env.initial_state();
        assert!(matches!(
            step(&env, &s, &act(&[0.0]), &TaskSpec::gait()),
            Err(EnvError::Dimension { .. })
        ));
    }
}

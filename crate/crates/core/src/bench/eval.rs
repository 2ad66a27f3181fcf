//! Policy evaluation: fixed-start gait runs and the validation-set return.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::baselines::BufferSampler;
use crate::envs::{observe, step, EnvError, Environment, PlanarGait, TaskKind, TaskSpec};
use crate::extract::{build_reset_buffer, ExtractError, ResetBuffer, Scoring};
use crate::grrt::{grow, GrrtConfig, GrrtError};
use crate::nn::{GaussianPolicy, ValueFn};
use crate::ppo::{batch_summary, collect_rollouts, ActionMode, PpoError};
use crate::state::{ActionVec, ObservationVec, RngHandle, StateVec};

/// Anything that maps the current state and observation to an action.
pub trait Controller {
    fn act(&mut self, state: &StateVec, obs: &ObservationVec, rng: &mut RngHandle) -> Vec<f64>;
}

/// Gaussian policy as a controller, acting with its mean or by sampling.
pub struct PolicyController<'a> {
    pub policy: &'a GaussianPolicy,
    pub mode: ActionMode,
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, _state: &StateVec, obs: &ObservationVec, rng: &mut RngHandle) -> Vec<f64> {
        let mu = self.policy.mean.forward(obs.values()).expect("observation width checked by caller");
        match self.mode {
            ActionMode::Mean => mu,
            ActionMode::Sample => mu
                .iter()
                .zip(self.policy.log_std())
                .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }
}

/// Open-loop three-phase gait for [`PlanarGait`]: each finger carries the
/// object at `delta_max / 2` per step for `2k` steps, lifts, returns at
/// `delta_max` for `k` steps and lowers again. Exactly one finger is lifted
/// at any time, so every step rotates the object by `delta_max / 2`.
pub struct ScriptedGait {
    fingers: usize,
    k: usize,
    carry: f64,
    back: f64,
    lift: f64,
    t: usize,
}

impl ScriptedGait {
    pub const RETURN_STEPS: usize = 8;

    /// Controller and the phased start state it expects.
    pub fn new(env: &PlanarGait) -> (Self, StateVec) {
        let p = env.params();
        assert_eq!(p.fingers, 3, "the scripted gait is written for three fingers");
        let k = Self::RETURN_STEPS;
        let carry = p.delta_max / 2.0;
        let back = p.delta_max;
        let span = 2.0 * k as f64 * carry;
        let lift = p.r_release - p.r_grip;
        let mut q = Vec::new();
        let mut r = Vec::new();
        for i in 0..3 {
            let phase = i * k;
            if phase < 2 * k {
                q.push(-span / 2.0 + phase as f64 * carry);
                r.push(p.r_grip);
            } else {
                q.push(span / 2.0 - (phase - 2 * k) as f64 * back);
                r.push(p.r_grip + lift);
            }
        }
        let ctl = Self { fingers: 3, k, carry, back, lift, t: 0 };
        (ctl, env.state(0.0, &q, &r, 0.0))
    }

    /// Rotation per step while the gait runs.
    pub fn speed(&self) -> f64 {
        self.carry
    }
}

impl Controller for ScriptedGait {
    fn act(&mut self, _state: &StateVec, _obs: &ObservationVec, _rng: &mut RngHandle) -> Vec<f64> {
        let m = self.fingers;
        let period = 3 * self.k;
        let mut a = vec![0.0; 2 * m];
        for i in 0..m {
            let phase = (self.t + i * self.k) % period;
            if phase < 2 * self.k {
                a[i] = self.carry;
                if phase == 2 * self.k - 1 {
                    a[m + i] = self.lift;
                }
            } else {
                a[i] = -self.back;
                if phase == period - 1 {
                    a[m + i] = -self.lift;
                }
            }
        }
        self.t += 1;
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    /// Gait: median progress before the first drop (radians or arc length).
    pub median_progress: f64,
    /// Gait on an env with an object angle: median progress in revolutions.
    pub median_revolutions: Option<f64>,
    /// Gait: mean progress per step over all runs.
    pub mean_speed: f64,
    pub drop_rate: f64,
    pub success_rate: f64,
    /// Goal tasks: mean steps to success over successful runs.
    pub mean_time_to_success: Option<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run `episodes` rollouts of `max_len` steps, episode `k` starting from
/// `starts[k % starts.len()]`. Arbitrary reorientation draws a goal per run.
pub fn eval_policy(
    ctl: &mut dyn Controller,
    env: &dyn Environment,
    task: &TaskSpec,
    starts: &[StateVec],
    episodes: usize,
    max_len: usize,
    rng: &mut RngHandle,
) -> Result<EvalMetrics, EnvError> {
    assert!(episodes >= 1 && !starts.is_empty(), "need at least one episode and one start");
    let mut progress = Vec::with_capacity(episodes);
    let mut speeds = Vec::with_capacity(episodes);
    let mut drops = 0usize;
    let mut times = Vec::new();
    for k in 0..episodes {
        let start = &starts[k % starts.len()];
        let mut ep_task = task.clone();
        if task.kind == TaskKind::ArbitraryReorient {
            ep_task.goal = Some(crate::envs::sample_goal(rng));
        }
        let p0 = env.progress(start);
        let mut s = start.clone();
        let mut setpoints = env.setpoints(&s, &vec![0.0; env.action_dim()]);
        let mut steps = 0usize;
        for t in 0..max_len {
            let obs = observe(env, &s, &setpoints, &ep_task);
            let a = ctl.act(&s, &obs, rng);
            let action = ActionVec::new(a).map_err(|_| EnvError::NonFiniteAction)?;
            let res = step(env, &s, &action, &ep_task)?;
            if res.dropped {
                drops += 1;
                break;
            }
            setpoints = env.setpoints(&s, action.values());
            s = res.next;
            steps = t + 1;
            if res.success {
                times.push(steps as f64);
                break;
            }
        }
        let dp = env.progress(&s) - p0;
        progress.push(dp);
        speeds.push(if steps > 0 { dp / steps as f64 } else { 0.0 });
    }
    let e = episodes as f64;
    let has_angle = env.object_angle(&starts[0]).is_some();
    let median_progress = median(&mut progress.clone());
    Ok(EvalMetrics {
        episodes,
        median_progress,
        median_revolutions: has_angle.then(|| median_progress / (2.0 * PI)),
        mean_speed: speeds.iter().sum::<f64>() / e,
        drop_rate: drops as f64 / e,
        success_rate: times.len() as f64 / e,
        mean_time_to_success: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
    })
}

#[derive(Debug, thiserror::Error)]
pub enum ValidationError {
    #[error(transparent)]
    Plan(#[from] GrrtError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Rollout(#[from] PpoError),
}

/// Fixed start states for final-performance comparisons: states drawn
/// uniformly from a reference tree grown with its own seed.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub starts: ResetBuffer,
}

type Cache = Mutex<HashMap<String, Arc<ValidationSet>>>;

fn cache() -> &'static Cache {
    static CACHE: std::sync::OnceLock<Cache> = std::sync::OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl ValidationSet {
    pub fn build(
        env: &dyn Environment,
        task: &TaskSpec,
        nodes: usize,
        seed: u64,
        size: usize,
    ) -> Result<Self, ValidationError> {
        let tree = grow(&GrrtConfig { n_max: nodes, seed, ..GrrtConfig::default() }, env, task)?;
        let mut rng = RngHandle::new(5, 5);
        let uniform = TaskSpec::arbitrary_reorient(0.0);
        let starts = build_reset_buffer(&tree, &uniform, size, &Scoring::Progress, &mut rng)?;
        Ok(Self { starts })
    }

    /// Memoised [`ValidationSet::build`]; `key` must identify the environment.
    pub fn cached(
        key: &str,
        env: &dyn Environment,
        task: &TaskSpec,
        nodes: usize,
        seed: u64,
        size: usize,
    ) -> Result<Arc<Self>, ValidationError> {
        let key = format!("{key}|{}|{nodes}|{seed}|{size}", task.kind.as_str());
        if let Some(v) = cache().lock().expect("validation cache").get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(Self::build(env, task, nodes, seed, size)?);
        cache().lock().expect("validation cache").insert(key, v.clone());
        Ok(v)
    }

    /// Mean deterministic return over `size` episodes started from the set.
    pub fn mean_return(
        &self,
        policy: &GaussianPolicy,
        value: &ValueFn,
        env: &dyn Environment,
        task: &TaskSpec,
        max_len: usize,
    ) -> Result<f64, ValidationError> {
        let mut sampler = BufferSampler::new(self.starts.clone(), false).map_err(PpoError::Reset)?;
        let mut rng = RngHandle::new(99, 0);
        let n = self.starts.len();
        let b = collect_rollouts(policy, value, env, task, &mut sampler, n, max_len, ActionMode::Mean, &mut rng)?;
        Ok(batch_summary(&b).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{PlanarGaitParams, TaskSpec};

    struct Fixed(Vec<f64>);

    impl Controller for Fixed {
        fn act(&mut self, _: &StateVec, _: &ObservationVec, _: &mut RngHandle) -> Vec<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn immediate_drop_scores_zero() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        // a jerk on a touching finger knocks the object loose on step one
        let mut c = Fixed(vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut rng = RngHandle::new(0, 0);
        let m = eval_policy(&mut c, &env, &TaskSpec::gait(), &[env.initial_state()], 10, 200, &mut rng).unwrap();
        assert_eq!(m.median_revolutions, Some(0.0));
        assert_eq!(m.drop_rate, 1.0);
        assert_eq!(m.mean_speed, 0.0);
    }

    #[test]
    fn scripted_gait_hits_the_episode_length_bound() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let (mut ctl, start) = ScriptedGait::new(&env);
        let speed = ctl.speed();
        assert_eq!(speed, 0.025);
        let mut rng = RngHandle::new(0, 0);
        let len = 200;
        let m = eval_policy(&mut ctl, &env, &TaskSpec::gait(), &[start], 1, len, &mut rng).unwrap();
        let bound = len as f64 * 0.025 / (2.0 * PI);
        assert_eq!(m.drop_rate, 0.0);
        assert!((m.median_revolutions.unwrap() - bound).abs() < 1e-9, "{m:?}");
        assert!((m.mean_speed - 0.025).abs() < 1e-12);
    }

    #[test]
    fn constant_push_progress_until_joint_limit() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let mut c = Fixed(vec![0.05, 0.05, 0.05, 0.0, 0.0, 0.0]);
        let mut rng = RngHandle::new(0, 0);
        let m = eval_policy(&mut c, &env, &TaskSpec::gait(), &[env.initial_state()], 3, 200, &mut rng).unwrap();
        // twelve carries reach the joint limit, the thirteenth slides every finger off
        assert!((m.median_progress - 0.6).abs() < 1e-9, "{m:?}");
        assert_eq!(m.drop_rate, 1.0);
    }

    #[test]
    fn goal_task_reports_success_time() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let mut c = Fixed(vec![0.0; 6]);
        let mut rng = RngHandle::new(0, 0);
        let m = eval_policy(&mut c, &env, &TaskSpec::go_to_root(), &[env.initial_state()], 4, 50, &mut rng).unwrap();
        assert_eq!(m.success_rate, 1.0);
        assert_eq!(m.mean_time_to_success, Some(1.0));
        assert_eq!(m.median_revolutions, Some(0.0));
    }

    #[test]
    fn validation_set_is_cached_and_deterministic() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let a = ValidationSet::cached("pg-test", &env, &task, 200, 3, 16).unwrap();
        let b = ValidationSet::cached("pg-test", &env, &task, 200, 3, 16).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let c = ValidationSet::build(&env, &task, 200, 3, 16).unwrap();
        assert_eq!(a.starts.nodes, c.starts.nodes);
        assert_eq!(a.starts.len(), 16);
    }
}

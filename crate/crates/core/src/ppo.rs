//! Asymmetric actor-critic PPO over a pluggable reset distribution.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::baselines::{ResetError, ResetSampler, ResetSource};
use crate::envs::{critic_observation, observe, sample_goal, step, EnvError, Environment, TaskKind, TaskSpec};
use crate::nn::{
    batch_logprob, batch_logprob_grad, clip_grad_norm, diag_gaussian_logprob, mse_loss, AdamState, Checkpoint,
    GaussianPolicy, NnError, ValueFn,
};
use crate::state::{ActionVec, RngHandle, StateVec};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error("reset state is not stable")]
    UnstableReset,
    #[error("network dimensions do not match the environment: {0}")]
    Dims(String),
    #[error(transparent)]
    Reset(#[from] ResetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub ent_coef: f64,
    pub episodes_per_iter: usize,
    pub iterations: usize,
    pub max_episode_len: usize,
    pub lr_pi: f64,
    pub lr_v: f64,
    pub max_grad_norm: f64,
    /// Stop once this many environment steps have been collected.
    pub env_step_budget: Option<u64>,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch_size: 1024,
            ent_coef: 0.003,
            episodes_per_iter: 64,
            iterations: 100,
            max_episode_len: 200,
            lr_pi: 3e-4,
            lr_v: 1e-3,
            max_grad_norm: 0.5,
            env_step_budget: None,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.minibatch_size < 1 || self.max_episode_len < 1 {
            return bad("minibatch size and episode length must be positive");
        }
        if !(self.lr_pi > 0.0 && self.lr_v > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning rates and gradient clip must be positive");
        }
        if !self.ent_coef.is_finite() {
            return bad("entropy coefficient must be finite");
        }
        Ok(())
    }
}

/// Actor and critic input sizes for `env` under `task`.
pub fn obs_dims(env: &dyn Environment, task: &TaskSpec) -> (usize, usize) {
    let s = env.initial_state();
    let sp = env.setpoints(&s, &vec![0.0; env.action_dim()]);
    (observe(env, &s, &sp, task).len(), critic_observation(env, &s, None, &sp, task).len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInfo {
    pub start: usize,
    pub len: usize,
    pub ret: f64,
    pub dropped: bool,
    pub success: bool,
    /// Ended by the length limit; the return is bootstrapped.
    pub truncated: bool,
    pub bootstrap: f64,
    pub reset: ResetSource,
    pub start_state: StateVec,
    pub final_progress: f64,
    pub start_progress: f64,
}

/// Flat per-step records of one collection round, episode-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub critic_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub critic_obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    /// True on the last step of every episode.
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub logps: Vec<f64>,
    pub episodes: Vec<EpisodeInfo>,
}

impl RolloutBatch {
    pub fn empty(obs_dim: usize, critic_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            critic_dim,
            act_dim,
            obs: Vec::new(),
            critic_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            values: Vec::new(),
            logps: Vec::new(),
            episodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.obs_dim), &self.obs).expect("obs shape")
    }

    pub fn critic_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.critic_dim), &self.critic_obs).expect("critic shape")
    }

    pub fn action_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.act_dim), &self.actions).expect("action shape")
    }
}

/// Per-episode scratch during lockstep collection.
struct Live {
    state: StateVec,
    prev: Option<StateVec>,
    setpoints: Vec<f64>,
    task: TaskSpec,
    rng: RngHandle,
    obs: Vec<f64>,
    critic: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    logps: Vec<f64>,
    visited: Vec<StateVec>,
    ret: f64,
    done: bool,
    dropped: bool,
    success: bool,
    reset: ResetSource,
    start_state: StateVec,
}

/// How actions are chosen during collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    /// Always the policy mean (evaluation and fixtures).
    Mean,
}

/// Collect `episodes` episodes in lockstep.
///
/// All randomness is drawn from per-episode streams derived from `rng`, so
/// the batch depends only on the parameters and the seed. Visited states
/// are handed to the sampler's `on_step` hook in episode order afterwards.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &GaussianPolicy,
    value: &ValueFn,
    env: &dyn Environment,
    task: &TaskSpec,
    sampler: &mut dyn ResetSampler,
    episodes: usize,
    max_len: usize,
    mode: ActionMode,
    rng: &mut RngHandle,
) -> Result<RolloutBatch, PpoError> {
    let (od, cd) = obs_dims(env, task);
    let ad = env.action_dim();
    if policy.obs_dim() != od || policy.act_dim() != ad || value.obs_dim() != cd {
        return Err(PpoError::Dims(format!(
            "policy {}->{}, value {} vs env obs {od}, critic {cd}, actions {ad}",
            policy.obs_dim(),
            policy.act_dim(),
            value.obs_dim()
        )));
    }
    let mut live = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let draw = sampler.sample(rng)?;
        if !env.stable(&draw.state) {
            return Err(PpoError::UnstableReset);
        }
        let key = rng.next_u64();
        let mut ep_rng = rng.derive(key);
        let mut ep_task = task.clone();
        if task.kind == TaskKind::ArbitraryReorient {
            ep_task.goal = Some(sample_goal(&mut ep_rng));
        }
        let setpoints = env.setpoints(&draw.state, &vec![0.0; ad]);
        live.push(Live {
            state: draw.state.clone(),
            prev: None,
            setpoints,
            task: ep_task,
            rng: ep_rng,
            obs: Vec::new(),
            critic: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            logps: Vec::new(),
            visited: Vec::new(),
            ret: 0.0,
            done: false,
            dropped: false,
            success: false,
            reset: draw.source,
            start_state: draw.state,
        });
    }
    for _ in 0..max_len {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut x = Array2::zeros((active.len(), od));
        for (r, &i) in active.iter().enumerate() {
            let l = &mut live[i];
            let o = observe(env, &l.state, &l.setpoints, &l.task).into_values();
            x.row_mut(r).assign(&ArrayView1::from(&o));
            let c = critic_observation(env, &l.state, l.prev.as_ref(), &l.setpoints, &l.task);
            l.obs.extend_from_slice(&o);
            l.critic.extend(c);
        }
        let (mu, _) = policy.mean.forward_batch(x.view())?;
        for (r, &i) in active.iter().enumerate() {
            let l = &mut live[i];
            let m = mu.row(r);
            let a: Vec<f64> = match mode {
                ActionMode::Mean => m.to_vec(),
                ActionMode::Sample => m
                    .iter()
                    .zip(policy.log_std())
                    .map(|(mv, ls)| mv + ls.exp() * l.rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            };
            l.logps.push(diag_gaussian_logprob(m.as_slice().expect("row"), policy.log_std(), &a));
            let action = ActionVec::new(a).map_err(|_| PpoError::NonFiniteLoss("action"))?;
            let res = step(env, &l.state, &action, &l.task)?;
            l.actions.extend_from_slice(action.values());
            l.rewards.push(res.reward);
            l.ret += res.reward;
            l.setpoints = env.setpoints(&l.state, action.values());
            l.prev = Some(std::mem::replace(&mut l.state, res.next));
            l.dropped = res.dropped;
            l.success = res.success;
            if res.dropped || res.success {
                l.done = true;
            } else {
                l.visited.push(l.state.clone());
            }
        }
    }
    let mut batch = RolloutBatch::empty(od, cd, ad);
    let mut bootstrap_obs = Vec::new();
    let mut truncated_eps = Vec::new();
    for (e, l) in live.iter_mut().enumerate() {
        let start = batch.len();
        let len = l.rewards.len();
        let truncated = !l.done;
        if truncated {
            let c = critic_observation(env, &l.state, l.prev.as_ref(), &l.setpoints, &l.task);
            bootstrap_obs.extend(c);
            truncated_eps.push(e);
        }
        batch.obs.append(&mut l.obs);
        batch.critic_obs.append(&mut l.critic);
        batch.actions.append(&mut l.actions);
        batch.rewards.append(&mut l.rewards);
        batch.logps.append(&mut l.logps);
        batch.dones.extend((0..len).map(|t| t + 1 == len));
        batch.episodes.push(EpisodeInfo {
            start,
            len,
            ret: l.ret,
            dropped: l.dropped,
            success: l.success,
            truncated,
            bootstrap: 0.0,
            reset: l.reset,
            start_progress: env.progress(&l.start_state),
            start_state: l.start_state.clone(),
            final_progress: env.progress(&l.state),
        });
    }
    if !batch.is_empty() {
        batch.values = value.values(batch.critic_view())?.to_vec();
    }
    if !truncated_eps.is_empty() {
        let v = value.values(ArrayView2::from_shape((truncated_eps.len(), cd), &bootstrap_obs).expect("shape"))?;
        for (k, &e) in truncated_eps.iter().enumerate() {
            batch.episodes[e].bootstrap = v[k];
        }
    }
    for l in &live {
        for s in &l.visited {
            sampler.on_step(s, rng);
        }
    }
    Ok(batch)
}

/// GAE(gamma, lambda) per episode. Terminal episodes do not bootstrap;
/// length-truncated ones bootstrap from the value of their last state.
/// Returns `(advantages, value targets)`.
pub fn compute_gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = batch.len();
    let mut adv = vec![0.0; n];
    for ep in &batch.episodes {
        let mut next_v = ep.bootstrap;
        let mut gae = 0.0;
        for t in (ep.start..ep.start + ep.len).rev() {
            let delta = batch.rewards[t] + gamma * next_v - batch.values[t];
            gae = delta + gamma * lambda * gae;
            adv[t] = gae;
            next_v = batch.values[t];
        }
    }
    let targets = adv.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Shift and scale to zero mean and unit variance (zeros stay zeros).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// Clipped surrogate with entropy bonus on one minibatch; returns the loss
/// and its gradient with respect to the flat policy parameters.
pub fn surrogate_loss(
    policy: &GaussianPolicy,
    obs: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    old_logp: ArrayView1<'_, f64>,
    adv: ArrayView1<'_, f64>,
    clip: f64,
    ent_coef: f64,
) -> Result<(f64, Vec<f64>, SurrogateStats), PpoError> {
    let bl = batch_logprob(policy, obs, actions)?;
    let n = obs.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut w = Array1::zeros(obs.nrows());
    let mut clipped = 0usize;
    let mut kl = 0.0;
    for i in 0..obs.nrows() {
        let ratio = (bl.logp[i] - old_logp[i]).exp();
        let rc = ratio.clamp(1.0 - clip, 1.0 + clip);
        let (u, c) = (ratio * adv[i], rc * adv[i]);
        if u <= c {
            loss -= u / n;
            w[i] = -u / n;
        } else {
            loss -= c / n;
            clipped += 1;
        }
        kl += (old_logp[i] - bl.logp[i]) / n;
    }
    let entropy = policy.entropy();
    loss -= ent_coef * entropy;
    if !loss.is_finite() {
        return Err(PpoError::NonFiniteLoss("policy"));
    }
    let g = batch_logprob_grad(policy, &bl, actions, w.view(), -ent_coef)?;
    Ok((loss, g, SurrogateStats { entropy, clip_frac: clipped as f64 / n, approx_kl: kl }))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateStats {
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

/// Value regression loss on one minibatch and its parameter gradient.
pub fn value_loss(value: &ValueFn, obs: ArrayView2<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<(f64, Vec<f64>), PpoError> {
    let (pred, cache) = value.net.forward_batch(obs)?;
    let t = targets.to_owned().insert_axis(ndarray::Axis(1));
    let (loss, d) = mse_loss(pred.view(), t.view());
    if !loss.is_finite() {
        return Err(PpoError::NonFiniteLoss("value"));
    }
    let (g, _) = value.net.backward(&cache, d.view())?;
    Ok((loss, g))
}

/// Optimizer state carried across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoOptim {
    pub pi: AdamState,
    pub v: AdamState,
}

impl PpoOptim {
    pub fn new(policy: &GaussianPolicy, value: &ValueFn, cfg: &PpoConfig) -> Self {
        Self { pi: AdamState::new(policy.n_params(), cfg.lr_pi), v: AdamState::new(value.net.n_params(), cfg.lr_v) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub pi_loss: f64,
    pub v_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

fn gather(src: &[f64], width: usize, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), width));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&ArrayView1::from(&src[i * width..(i + 1) * width]));
    }
    out
}

/// `epochs` passes of shuffled minibatch updates for actor and critic.
/// `adv` must already be normalized.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut GaussianPolicy,
    value: &mut ValueFn,
    batch: &RolloutBatch,
    adv: &[f64],
    targets: &[f64],
    cfg: &PpoConfig,
    optim: &mut PpoOptim,
    rng: &mut RngHandle,
) -> Result<UpdateStats, PpoError> {
    let n = batch.len();
    let mut stats = UpdateStats::default();
    if n == 0 {
        stats.entropy = policy.entropy();
        return Ok(stats);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch_size) {
            let o = gather(&batch.obs, batch.obs_dim, chunk);
            let a = gather(&batch.actions, batch.act_dim, chunk);
            let c = gather(&batch.critic_obs, batch.critic_dim, chunk);
            let old = Array1::from_iter(chunk.iter().map(|&i| batch.logps[i]));
            let ad = Array1::from_iter(chunk.iter().map(|&i| adv[i]));
            let tg = Array1::from_iter(chunk.iter().map(|&i| targets[i]));

            let (pl, mut g, s) = surrogate_loss(policy, o.view(), a.view(), old.view(), ad.view(), cfg.clip, cfg.ent_coef)?;
            clip_grad_norm(&mut g, cfg.max_grad_norm);
            let mut p = policy.flat_params();
            optim.pi.step(&mut p, &g)?;
            policy.set_flat_params(&p)?;

            let (vl, mut gv) = value_loss(value, c.view(), tg.view())?;
            clip_grad_norm(&mut gv, cfg.max_grad_norm);
            optim.v.step(value.net.params_mut(), &gv)?;

            stats.pi_loss += pl;
            stats.v_loss += vl;
            stats.clip_frac += s.clip_frac;
            stats.approx_kl += s.approx_kl;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.pi_loss /= count;
        stats.v_loss /= count;
        stats.clip_frac /= count;
        stats.approx_kl /= count;
    }
    stats.entropy = policy.entropy();
    Ok(stats)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub iter: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub drop_rate: f64,
    pub ep_len: f64,
    pub pi_loss: f64,
    pub v_loss: f64,
    pub entropy: f64,
}

pub const CURVE_HEADER: &str = "iter,env_steps,mean_return,success_rate,drop_rate,ep_len,pi_loss,v_loss,entropy";

impl CurveRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.env_steps,
            self.mean_return,
            self.success_rate,
            self.drop_rate,
            self.ep_len,
            self.pi_loss,
            self.v_loss,
            self.entropy
        )
    }
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub curve: Vec<CurveRow>,
    pub policy: GaussianPolicy,
    pub value: ValueFn,
    /// Nets of the iteration with the highest mean training return.
    pub best: Checkpoint,
    pub best_iter: Option<usize>,
    pub env_steps: u64,
}

pub fn batch_summary(batch: &RolloutBatch) -> (f64, f64, f64, f64) {
    let e = batch.episodes.len().max(1) as f64;
    let ret = batch.episodes.iter().map(|x| x.ret).sum::<f64>() / e;
    let succ = batch.episodes.iter().filter(|x| x.success).count() as f64 / e;
    let drop = batch.episodes.iter().filter(|x| x.dropped).count() as f64 / e;
    let len = batch.episodes.iter().map(|x| x.len as f64).sum::<f64>() / e;
    (ret, succ, drop, len)
}

/// Full collect, GAE, update loop.
///
/// Runs `cfg.iterations` iterations or until the env-step budget is spent.
/// If the sampler reports a difficulty, each iteration trains on the
/// environment at that difficulty.
pub fn train(
    env: &dyn Environment,
    task: &TaskSpec,
    sampler: &mut dyn ResetSampler,
    init_policy: GaussianPolicy,
    init_value: ValueFn,
    cfg: &PpoConfig,
    on_iter: &mut dyn FnMut(&CurveRow),
) -> Result<TrainOutput, PpoError> {
    cfg.validate()?;
    task.validate()?;
    let mut policy = init_policy;
    let mut value = init_value;
    let mut optim = PpoOptim::new(&policy, &value, cfg);
    let mut rng = RngHandle::new(cfg.seed, 0x990);
    let mut curve = Vec::new();
    let mut env_steps = 0u64;
    let mut best = Checkpoint { policy: policy.clone(), value: Some(value.clone()) };
    let mut best_ret = f64::NEG_INFINITY;
    let mut best_iter = None;
    for iter in 0..cfg.iterations {
        if cfg.env_step_budget.is_some_and(|b| env_steps >= b) {
            break;
        }
        let scaled;
        let env_now: &dyn Environment = match sampler.difficulty(env_steps) {
            Some(d) => {
                scaled = env.with_difficulty(d);
                scaled.as_ref()
            }
            None => env,
        };
        let batch = collect_rollouts(
            &policy,
            &value,
            env_now,
            task,
            sampler,
            cfg.episodes_per_iter,
            cfg.max_episode_len,
            ActionMode::Sample,
            &mut rng,
        )?;
        env_steps += batch.len() as u64;
        let (mut adv, targets) = compute_gae(&batch, cfg.gamma, cfg.lambda);
        normalize_advantages(&mut adv);
        let st = ppo_update(&mut policy, &mut value, &batch, &adv, &targets, cfg, &mut optim, &mut rng)?;
        let (mean_return, success_rate, drop_rate, ep_len) = batch_summary(&batch);
        let row = CurveRow {
            iter,
            env_steps,
            mean_return,
            success_rate,
            drop_rate,
            ep_len,
            pi_loss: st.pi_loss,
            v_loss: st.v_loss,
            entropy: st.entropy,
        };
        on_iter(&row);
        if mean_return > best_ret {
            best_ret = mean_return;
            best_iter = Some(iter);
            best = Checkpoint { policy: policy.clone(), value: Some(value.clone()) };
        }
        curve.push(row);
    }
    Ok(TrainOutput { curve, policy, value, best, best_iter, env_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{fi_sampler, BufferSampler};
    use crate::envs::{PlanarGait, PlanarGaitParams};
    use crate::extract::{build_reset_buffer, Scoring};
    use crate::grrt::{grow, GrrtConfig};
    use crate::nn::{max_relative_error, numeric_gradient, Mlp};
    use crate::state::{DimRole, DimSpec, Layout};
    use proptest::prelude::{prop_assert, proptest};
    use std::sync::Arc;

    /// One-shot bandit: the first action ends the episode with reward
    /// `-|a - a*|^2` under a gait task with no clip and no motion penalty.
    struct Bandit {
        layout: Arc<Layout>,
        target: Vec<f64>,
    }

    impl Bandit {
        fn new(target: Vec<f64>) -> Self {
            let mut dims: Vec<DimSpec> = target.iter().map(|_| DimSpec::linear(DimRole::Joint, -5.0, 5.0)).collect();
            dims.push(DimSpec::linear(DimRole::Object, 0.0, 1.0));
            Self { layout: Layout::new(dims), target }
        }

        fn task() -> TaskSpec {
            let mut t = TaskSpec::gait();
            t.gait.v_clip = 1e9;
            t.gait.action_penalty = 0.0;
            t
        }
    }

    impl Environment for Bandit {
        fn name(&self) -> &str {
            "bandit"
        }
        fn layout(&self) -> &Arc<Layout> {
            &self.layout
        }
        fn action_dim(&self) -> usize {
            self.target.len()
        }
        fn initial_state(&self) -> StateVec {
            StateVec::new(vec![0.0; self.target.len() + 1], self.layout.clone()).unwrap()
        }
        fn stable(&self, s: &StateVec) -> bool {
            s.values()[self.target.len()] == 0.0
        }
        fn transition(&self, s: &StateVec, a: &[f64]) -> StateVec {
            if a.iter().all(|v| *v == 0.0) {
                return s.clone();
            }
            let mut v = a.to_vec();
            v.push(1.0);
            StateVec::new(v, self.layout.clone()).unwrap()
        }
        fn setpoints(&self, s: &StateVec, _a: &[f64]) -> Vec<f64> {
            s.values()[..self.target.len()].to_vec()
        }
        fn contacts(&self, _s: &StateVec) -> Vec<bool> {
            Vec::new()
        }
        fn progress(&self, s: &StateVec) -> f64 {
            if self.stable(s) {
                return 0.0;
            }
            -s.values().iter().zip(&self.target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>()
        }
        fn object_angle(&self, _s: &StateVec) -> Option<f64> {
            None
        }
        fn privileged(&self, _s: &StateVec, _prev: Option<&StateVec>) -> Vec<f64> {
            vec![1.0]
        }
        fn sample_bounds(&self) -> Vec<(f64, f64)> {
            vec![(0.0, 0.0); self.target.len() + 1]
        }
        fn step_limit(&self) -> f64 {
            5.0
        }
        fn with_difficulty(&self, _d: f64) -> Box<dyn Environment> {
            Box::new(Bandit::new(self.target.clone()))
        }
    }

    fn nets(env: &dyn Environment, task: &TaskSpec, seed: u64, std: f64) -> (GaussianPolicy, ValueFn) {
        let (od, cd) = obs_dims(env, task);
        let mut r = RngHandle::new(seed, 7);
        (
            GaussianPolicy::new(od, env.action_dim(), &[16, 16], std, &mut r).unwrap(),
            ValueFn::new(cd, &[16, 16], &mut r).unwrap(),
        )
    }

    fn random_batch(seed: u64, episodes: usize) -> RolloutBatch {
        let mut r = RngHandle::new(seed, 0);
        let env = PlanarGait::new(PlanarGaitParams::default());
        let mut b = RolloutBatch::empty(1, 1, 1);
        for _ in 0..episodes {
            let len = r.random_range(1..=50);
            let start = b.len();
            for t in 0..len {
                b.obs.push(0.0);
                b.critic_obs.push(0.0);
                b.actions.push(0.0);
                b.rewards.push(r.random_range(-1.0..1.0));
                b.values.push(r.random_range(-2.0..2.0));
                b.logps.push(0.0);
                b.dones.push(t + 1 == len);
            }
            let truncated = r.random_bool(0.5);
            b.episodes.push(EpisodeInfo {
                start,
                len,
                ret: 0.0,
                dropped: !truncated,
                success: false,
                truncated,
                bootstrap: if truncated { r.random_range(-2.0..2.0) } else { 0.0 },
                reset: ResetSource::Fixed,
                start_state: env.initial_state(),
                final_progress: 0.0,
                start_progress: 0.0,
            });
        }
        b
    }

    /// Advantage as an explicit double sum of discounted TD errors.
    #[allow(clippy::needless_range_loop)]
    fn brute_gae(b: &RolloutBatch, gamma: f64, lambda: f64) -> Vec<f64> {
        let mut out = vec![0.0; b.len()];
        for ep in &b.episodes {
            let end = ep.start + ep.len;
            let delta = |k: usize| {
                let next = if k + 1 < end { b.values[k + 1] } else { ep.bootstrap };
                b.rewards[k] + gamma * next - b.values[k]
            };
            for t in ep.start..end {
                let mut acc = 0.0;
                for k in t..end {
                    acc += (gamma * lambda).powi((k - t) as i32) * delta(k);
                }
                out[t] = acc;
            }
        }
        out
    }

    #[test]
    fn gae_single_terminal_step() {
        let mut b = random_batch(0, 1);
        b.rewards.truncate(1);
        b.values.truncate(1);
        b.dones = vec![true];
        b.episodes[0].len = 1;
        b.episodes[0].bootstrap = 0.0;
        let (adv, tg) = compute_gae(&b, 0.99, 0.95);
        assert_eq!(adv[0], b.rewards[0] - b.values[0]);
        assert_eq!(tg[0], b.rewards[0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gae_with_unit_discount_telescopes() {
        let mut b = random_batch(1, 3);
        for ep in &mut b.episodes {
            ep.bootstrap = 0.0;
        }
        let (adv, _) = compute_gae(&b, 1.0, 1.0);
        for ep in &b.episodes {
            for t in ep.start..ep.start + ep.len {
                let future: f64 = b.rewards[t..ep.start + ep.len].iter().sum();
                assert!((adv[t] - (future - b.values[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_matches_brute_force() {
        for seed in 0..20 {
            let b = random_batch(seed, 3);
            let (adv, _) = compute_gae(&b, 0.99, 0.95);
            let bf = brute_gae(&b, 0.99, 0.95);
            for (a, e) in adv.iter().zip(&bf) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalization_gives_zero_mean_unit_std() {
        let b = random_batch(4, 5);
        let (mut adv, _) = compute_gae(&b, 0.99, 0.95);
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        let mut zeros = vec![0.0; 5];
        normalize_advantages(&mut zeros);
        assert_eq!(zeros, vec![0.0; 5]);
    }

    fn tiny_policy_batch(seed: u64) -> (GaussianPolicy, Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>) {
        let mut r = RngHandle::new(seed, 0);
        let mut p = GaussianPolicy::new(3, 2, &[8, 8], 0.4, &mut r).unwrap();
        let mut flat = p.flat_params();
        for v in flat.iter_mut() {
            *v *= 5.0;
        }
        let nm = p.mean.n_params();
        flat[nm] = -0.5;
        flat[nm + 1] = 0.2;
        p.set_flat_params(&flat).unwrap();
        let o = Array2::from_shape_fn((6, 3), |_| r.random_range(-1.0..1.0));
        let a = Array2::from_shape_fn((6, 2), |_| r.random_range(-1.0..1.0));
        let bl = batch_logprob(&p, o.view(), a.view()).unwrap();
        // old log-probs spread so that some ratios leave the clip band
        let old = Array1::from_iter(bl.logp.iter().enumerate().map(|(i, l)| l + [0.0, 0.5, -0.5, 0.05, -0.05, 0.3][i]));
        let adv = Array1::from_iter((0..6).map(|i| if i % 2 == 0 { 1.0 } else { -0.7 }));
        (p, o, a, old, adv)
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (p, o, a, old, adv) = tiny_policy_batch(seed);
            let (_, g, _) = surrogate_loss(&p, o.view(), a.view(), old.view(), adv.view(), 0.2, 0.01).unwrap();
            let num = numeric_gradient(&p.flat_params(), 1e-6, |v| {
                let mut q = p.clone();
                q.set_flat_params(v).unwrap();
                surrogate_loss(&q, o.view(), a.view(), old.view(), adv.view(), 0.2, 0.01).unwrap().0
            });
            let err = max_relative_error(&g, &num, 1e-6);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn clipped_favourable_ratio_has_no_gradient() {
        let (p, o, a, _, _) = tiny_policy_batch(1);
        let bl = batch_logprob(&p, o.view(), a.view()).unwrap();
        // ratio = e^1 > 1.2 with positive advantage: clipped branch
        let old = bl.logp.mapv(|l| l - 1.0);
        let adv = Array1::from_elem(6, 1.0);
        let (_, g, s) = surrogate_loss(&p, o.view(), a.view(), old.view(), adv.view(), 0.2, 0.0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(s.clip_frac, 1.0);
    }

    #[test]
    fn value_loss_gradient_matches_finite_differences() {
        let mut r = RngHandle::new(3, 0);
        let v = ValueFn::new(4, &[16, 16], &mut r).unwrap();
        let o = Array2::from_shape_fn((5, 4), |_| r.random_range(-1.0..1.0));
        let t = Array1::from_shape_fn(5, |_| r.random_range(-3.0..3.0));
        let (_, g) = value_loss(&v, o.view(), t.view()).unwrap();
        let num = numeric_gradient(v.net.params(), 1e-5, |p| {
            let w = ValueFn::from_net(Mlp::from_params(v.net.sizes(), p.to_vec()).unwrap()).unwrap();
            value_loss(&w, o.view(), t.view()).unwrap().0
        });
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-4);
    }

    #[test]
    fn actor_loss_ignores_privileged_inputs() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let (p, v) = nets(&env, &task, 0, 0.1);
        let mut s = fi_sampler(&env, env.initial_state()).unwrap();
        let mut r = RngHandle::new(1, 0);
        let b = collect_rollouts(&p, &v, &env, &task, &mut s, 4, 20, ActionMode::Sample, &mut r).unwrap();
        let adv = Array1::from_iter((0..b.len()).map(|i| (i as f64).sin()));
        let old = Array1::from(b.logps.clone());
        let (l1, g1, _) = surrogate_loss(&p, b.obs_view(), b.action_view(), old.view(), adv.view(), 0.2, 0.003).unwrap();
        let mut b2 = b.clone();
        for (i, c) in b2.critic_obs.iter_mut().enumerate() {
            if i % b.critic_dim >= b.obs_dim {
                *c += 100.0;
            }
        }
        let (l2, g2, _) = surrogate_loss(&p, b2.obs_view(), b2.action_view(), old.view(), adv.view(), 0.2, 0.003).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn zero_advantages_leave_the_actor_unchanged() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let (mut p, mut v) = nets(&env, &task, 0, 0.1);
        let mut s = fi_sampler(&env, env.initial_state()).unwrap();
        let mut r = RngHandle::new(1, 0);
        let b = collect_rollouts(&p, &v, &env, &task, &mut s, 4, 30, ActionMode::Sample, &mut r).unwrap();
        let (_, tg) = compute_gae(&b, 0.99, 0.95);
        let adv = vec![0.0; b.len()];
        let cfg = PpoConfig { ent_coef: 0.0, minibatch_size: 16, ..PpoConfig::default() };
        let before = p.clone();
        let vbefore = v.clone();
        let mut opt = PpoOptim::new(&p, &v, &cfg);
        ppo_update(&mut p, &mut v, &b, &adv, &tg, &cfg, &mut opt, &mut r).unwrap();
        assert_eq!(p, before);
        assert_ne!(v, vbefore);
    }

    #[test]
    fn empty_collection() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let (p, v) = nets(&env, &task, 0, 0.1);
        let mut s = fi_sampler(&env, env.initial_state()).unwrap();
        let mut r = RngHandle::new(1, 0);
        let b = collect_rollouts(&p, &v, &env, &task, &mut s, 0, 20, ActionMode::Sample, &mut r).unwrap();
        assert!(b.is_empty() && b.episodes.is_empty());
    }

    #[test]
    fn mean_mode_rollout_matches_a_hand_rolled_fixture() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let (od, cd) = obs_dims(&env, &task);
        // mean net outputs a constant push of 0.02 on every finger
        let mut mean = Mlp::zeros(&[od, 6]).unwrap();
        let n = mean.n_params();
        for k in 0..3 {
            mean.params_mut()[n - 6 + k] = 0.035;
        }
        let p = GaussianPolicy::from_parts(mean, vec![-5.0; 6]).unwrap();
        let mut r = RngHandle::new(0, 0);
        let v = ValueFn::new(cd, &[4], &mut r).unwrap();
        let mut s = fi_sampler(&env, env.initial_state()).unwrap();
        let b = collect_rollouts(&p, &v, &env, &task, &mut s, 2, 40, ActionMode::Mean, &mut r).unwrap();
        // from q = 0 the push reaches 0.595 after 17 steps; the 18th would
        // pass the 0.6 arc limit, so all three fingers slide off
        for ep in &b.episodes {
            assert_eq!(ep.len, 18);
            assert!(ep.dropped && !ep.truncated);
            assert!((ep.final_progress - 0.595).abs() < 1e-9);
        }
        let r0: f64 = b.rewards[..17].iter().sum();
        assert!((r0 - 17.0 * (0.035 - 0.001 * 3.0 * 0.035 * 0.035)).abs() < 1e-9);
        assert_eq!(b.rewards[..18], b.rewards[18..]);
    }

    #[test]
    fn rollouts_start_from_buffer_states() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let cfg = GrrtConfig { n_max: 200, k_max: 8, seed: 2, ..GrrtConfig::default() };
        let tree = grow(&cfg, &env, &task).unwrap();
        let mut r = RngHandle::new(0, 0);
        let buf = build_reset_buffer(&tree, &task, 50, &Scoring::Progress, &mut r).unwrap();
        let mut s = BufferSampler::new(buf.clone(), false).unwrap();
        let (p, v) = nets(&env, &task, 0, 0.05);
        let b = collect_rollouts(&p, &v, &env, &task, &mut s, 16, 10, ActionMode::Sample, &mut r).unwrap();
        for ep in &b.episodes {
            let ResetSource::Buffer(i) = ep.reset else { panic!("not from the buffer") };
            assert_eq!(&ep.start_state, buf.state(i));
        }
    }

    #[test]
    fn bandit_converges_to_the_optimum() {
        let env = Bandit::new(vec![0.3, -0.2]);
        let task = Bandit::task();
        let (p, v) = nets(&env, &task, 1, 0.3);
        let mut s = fi_sampler(&env, env.initial_state()).unwrap();
        let cfg = PpoConfig { iterations: 200, minibatch_size: 64, lr_pi: 3e-3, ent_coef: 0.0, seed: 3, ..PpoConfig::default() };
        let out = train(&env, &task, &mut s, p, v, &cfg, &mut |_| {}).unwrap();
        let (od, _) = obs_dims(&env, &task);
        let mu = out.policy.mean_action(&vec![0.0; od]).unwrap();
        assert!((mu[0] - 0.3).abs() < 0.05 && (mu[1] + 0.2).abs() < 0.05, "{mu:?}");
        let last = out.curve.last().unwrap();
        assert!(last.mean_return > -0.05);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let cfg = PpoConfig { iterations: 3, episodes_per_iter: 8, max_episode_len: 30, minibatch_size: 64, seed: 5, ..PpoConfig::default() };
        let run = |seed| {
            let (p, v) = nets(&env, &task, 0, 0.1);
            let mut s = fi_sampler(&env, env.initial_state()).unwrap();
            train(&env, &task, &mut s, p, v, &PpoConfig { seed, ..cfg.clone() }, &mut |_| {}).unwrap()
        };
        let (a, b, c) = (run(5), run(5), run(6));
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy, b.policy);
        assert_ne!(a.policy, c.policy);
    }

    #[test]
    fn env_step_budget_stops_training() {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let task = TaskSpec::gait();
        let cfg = PpoConfig { iterations: 100, episodes_per_iter: 4, max_episode_len: 25, env_step_budget: Some(150), ..PpoConfig::default() };
        let (p, v) = nets(&env, &task, 0, 0.1);
        let mut s = fi_sampler(&env, env.initial_state()).unwrap();
        let out = train(&env, &task, &mut s, p, v, &cfg, &mut |_| {}).unwrap();
        assert!(out.env_steps >= 150 && out.env_steps < 250);
        assert_eq!(out.curve.last().unwrap().env_steps, out.env_steps);
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn prop_gae_matches_brute_force(seed in 0u64..100_000, eps in 1usize..6, g in 0.5f64..1.0, l in 0.0f64..1.0) {
            let b = random_batch(seed, eps);
            let (adv, tg) = compute_gae(&b, g, l);
            let bf = brute_gae(&b, g, l);
            for i in 0..b.len() {
                prop_assert!((adv[i] - bf[i]).abs() < 1e-10);
                prop_assert!((tg[i] - adv[i] - b.values[i]).abs() < 1e-12);
            }
        }
    }
}

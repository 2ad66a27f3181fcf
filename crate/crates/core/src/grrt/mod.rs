//! Non-holonomic RRT over any [`Environment`].
//!
//! The tree only ever grows through the true transition function: each
//! expansion tries `k_max` random actions from the node nearest a random
//! target and keeps the stable outcome closest to that target.

mod io;
mod kdtree;

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{
    load_container, load_tree, read_container, read_tree, save_container, save_tree, write_container, write_tree,
    Container, ContainerKind, TreeFileError,
};

use crate::envs::{is_stable, Environment, TaskKind, TaskSpec};
use crate::state::{
    distance_unchecked, wrap_in_place, ActionVec, Layout, RngHandle, StateError, StateVec,
};
use kdtree::KdIndex;
use std::sync::Arc;

/// Below this many nodes the nearest-neighbour query is a plain scan.
pub const LINEAR_SCAN_BELOW: usize = 512;

#[derive(Debug, Error)]
pub enum GrrtError {
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error("initial state is not stable")]
    UnstableRoot,
    #[error("tree is empty")]
    EmptyTree,
    #[error("no node with id {0}")]
    NoSuchNode(usize),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Which action is held while checking stability of a new node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityHold {
    /// Keep applying the sampled action.
    Sampled,
    /// Hold the reached setpoint (zero delta).
    Zero,
}

impl StabilityHold {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sampled" => Some(Self::Sampled),
            "zero" => Some(Self::Zero),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sampled => "sampled",
            Self::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrrtConfig {
    pub n_max: usize,
    pub k_max: usize,
    pub alpha: f64,
    pub horizon: usize,
    pub hold: StabilityHold,
    /// Per-dimension sampling box; `None` uses the environment default.
    pub sample_bounds: Option<Vec<(f64, f64)>>,
    /// Metric weights; `None` uses the layout default.
    pub weights: Option<Vec<f64>>,
    pub seed: u64,
    /// Stop after this many expansion attempts even if `n_max` is not reached.
    pub max_attempts: Option<u64>,
    /// Targets expanded against the same tree snapshot before committing.
    pub batch: usize,
}

impl Default for GrrtConfig {
    fn default() -> Self {
        Self {
            n_max: 10_000,
            k_max: 64,
            alpha: 0.15,
            horizon: 50,
            hold: StabilityHold::Zero,
            sample_bounds: None,
            weights: None,
            seed: 0,
            max_attempts: None,
            batch: 1,
        }
    }
}

impl GrrtConfig {
    pub fn validate(&self) -> Result<(), GrrtError> {
        if self.n_max < 1 {
            return Err(GrrtError::Config("n_max must be at least 1".into()));
        }
        if self.k_max < 1 {
            return Err(GrrtError::Config("k_max must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(GrrtError::Config("alpha must be positive".into()));
        }
        if self.batch < 1 {
            return Err(GrrtError::Config("batch must be at least 1".into()));
        }
        if let Some(b) = &self.sample_bounds {
            if b.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
                return Err(GrrtError::Config("sample bounds must be finite with lo <= hi".into()));
            }
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(GrrtError::Config("metric weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    fn bounds_for(&self, env: &dyn Environment) -> Result<Vec<(f64, f64)>, GrrtError> {
        let b = self.sample_bounds.clone().unwrap_or_else(|| env.sample_bounds());
        if b.len() != env.layout().len() {
            return Err(GrrtError::Config(format!(
                "sample bounds have {} dims, state has {}",
                b.len(),
                env.layout().len()
            )));
        }
        Ok(b)
    }

    fn weights_for(&self, env: &dyn Environment) -> Result<Vec<f64>, GrrtError> {
        let w = self.weights.clone().unwrap_or_else(|| env.layout().default_weights());
        if w.len() != env.layout().len() {
            return Err(GrrtError::Config(format!(
                "metric weights have {} dims, state has {}",
                w.len(),
                env.layout().len()
            )));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub state: StateVec,
    pub parent: Option<usize>,
    pub action: Option<ActionVec>,
    pub depth: u32,
    pub progress: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrowStats {
    pub attempts: u64,
    pub successes: u64,
    pub wall_secs: f64,
    /// `(attempts, coverage)` recorded whenever coverage improves, plus the end point.
    pub coverage_curve: Vec<(u64, f64)>,
}

/// Append-only tree of stable states. Node ids equal insertion positions.
#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    layout: Arc<Layout>,
    action_dim: usize,
    weights: Vec<f64>,
    index: KdIndex,
    coverage: f64,
    pub stats: GrowStats,
}

impl PartialEq for Tree {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.layout == other.layout
            && self.action_dim == other.action_dim
            && self.weights == other.weights
    }
}

impl Tree {
    pub fn new(root: StateVec, action_dim: usize, weights: Vec<f64>) -> Result<Self, GrrtError> {
        if weights.len() != root.len() {
            return Err(StateError::Dimension { expected: root.len(), got: weights.len() }.into());
        }
        let layout = root.layout().clone();
        let index = KdIndex::new(layout.dims(), &weights, LINEAR_SCAN_BELOW);
        let mut tree = Self {
            nodes: Vec::new(),
            layout,
            action_dim,
            weights,
            index,
            coverage: f64::NEG_INFINITY,
            stats: GrowStats::default(),
        };
        tree.insert(TreeNode { id: 0, state: root, parent: None, action: None, depth: 0, progress: 0.0 });
        Ok(tree)
    }

    /// Rebuild a tree from stored nodes, checking the structural invariants.
    pub fn from_nodes(
        nodes: Vec<TreeNode>,
        layout: Arc<Layout>,
        action_dim: usize,
        weights: Vec<f64>,
    ) -> Result<Self, GrrtError> {
        let mut it = nodes.into_iter();
        let root = it.next().ok_or(GrrtError::EmptyTree)?;
        if root.id != 0 || root.parent.is_some() || root.action.is_some() || root.depth != 0 {
            return Err(GrrtError::Config("first node must be a root with id 0".into()));
        }
        if root.state.layout() != &layout {
            return Err(StateError::Layout.into());
        }
        let mut tree = Self::new(root.state, action_dim, weights)?;
        tree.nodes[0].progress = root.progress;
        tree.coverage = root.progress;
        for n in it {
            let pid = n.parent.ok_or(GrrtError::Config(format!("node {} has no parent", n.id)))?;
            let ok = n.id == tree.len()
                && pid < n.id
                && n.depth == tree.nodes[pid].depth + 1
                && n.action.as_ref().is_some_and(|a| a.dim() == action_dim)
                && n.state.layout() == &tree.layout;
            if !ok {
                return Err(GrrtError::Config(format!("node {} breaks the tree invariants", n.id)));
            }
            tree.insert(n);
        }
        Ok(tree)
    }

    fn insert(&mut self, node: TreeNode) {
        self.index.insert(node.state.values());
        self.coverage = self.coverage.max(node.progress);
        self.nodes.push(node);
    }

    /// Append a child of `parent`. The caller vouches for stability.
    pub fn push(
        &mut self,
        parent: usize,
        state: StateVec,
        action: ActionVec,
        progress: f64,
    ) -> Result<usize, GrrtError> {
        let depth = self.node(parent)?.depth + 1;
        if !state.same_layout(&self.nodes[0].state) {
            return Err(StateError::Layout.into());
        }
        if action.dim() != self.action_dim {
            return Err(StateError::Dimension { expected: self.action_dim, got: action.dim() }.into());
        }
        let id = self.nodes.len();
        self.insert(TreeNode { id, state, parent: Some(parent), action: Some(action), depth, progress });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode, GrrtError> {
        self.nodes.get(id).ok_or(GrrtError::NoSuchNode(id))
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Maximum cached progress over all nodes.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    /// Nearest node by the weighted state metric; ties go to the lowest id.
    pub fn nearest(&self, x: &StateVec) -> Result<usize, GrrtError> {
        self.check_query(x)?;
        if self.len() < LINEAR_SCAN_BELOW {
            return self.nearest_linear(x);
        }
        let dims = self.layout.dims();
        self.index
            .nearest(x.values(), |id| {
                distance_unchecked(dims, self.nodes[id].state.values(), x.values(), &self.weights)
            })
            .map(|(id, _)| id)
            .ok_or(GrrtError::EmptyTree)
    }

    /// Linear-scan nearest neighbour, the reference for [`Tree::nearest`].
    pub fn nearest_linear(&self, x: &StateVec) -> Result<usize, GrrtError> {
        self.check_query(x)?;
        let dims = self.layout.dims();
        let mut best = (0usize, f64::INFINITY);
        for n in &self.nodes {
            let d = distance_unchecked(dims, n.state.values(), x.values(), &self.weights);
            if d < best.1 {
                best = (n.id, d);
            }
        }
        Ok(best.0)
    }

    /// Nearest node through the kd-index regardless of tree size.
    pub fn nearest_indexed(&self, x: &StateVec) -> Result<usize, GrrtError> {
        self.check_query(x)?;
        let dims = self.layout.dims();
        self.index
            .nearest(x.values(), |id| {
                distance_unchecked(dims, self.nodes[id].state.values(), x.values(), &self.weights)
            })
            .map(|(id, _)| id)
            .ok_or(GrrtError::EmptyTree)
    }

    fn check_query(&self, x: &StateVec) -> Result<(), GrrtError> {
        if self.nodes.is_empty() {
            return Err(GrrtError::EmptyTree);
        }
        if x.len() != self.layout.len() {
            return Err(StateError::Dimension { expected: self.layout.len(), got: x.len() }.into());
        }
        Ok(())
    }

    /// Node ids from the root to `id`, inclusive.
    pub fn path_to_root(&self, id: usize) -> Result<Vec<usize>, GrrtError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = &self.nodes[p];
        }
        path.reverse();
        Ok(path)
    }

    /// SHA-256 over the serialized tree, as lowercase hex.
    pub fn hash(&self) -> String {
        hex(&self.hash_bytes())
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        write_tree(self, &mut buf).expect("writing to memory cannot fail");
        Sha256::digest(&buf).into()
    }

    /// First node whose state is not reproduced by replaying its edge.
    pub fn replay_mismatch(&self, env: &dyn Environment) -> Option<usize> {
        self.nodes.iter().skip(1).find_map(|n| {
            let parent = &self.nodes[n.parent?];
            let a = n.action.as_ref()?;
            let replay = env.transition(&parent.state, a.values());
            (replay != n.state).then_some(n.id)
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Progress value cached on a node: signed env progress for gait, rotation
/// magnitude away from the root for goal tasks.
pub fn task_progress(env: &dyn Environment, task: &TaskSpec, root: &StateVec, s: &StateVec) -> f64 {
    match task.kind {
        TaskKind::Gait => env.progress(s),
        TaskKind::GoToRoot | TaskKind::ArbitraryReorient => (env.progress(s) - env.progress(root)).abs(),
    }
}

/// Uniform sample inside `bounds`, wrapped on angular dims.
pub fn sample_target(layout: &Arc<Layout>, bounds: &[(f64, f64)], rng: &mut RngHandle) -> Result<StateVec, GrrtError> {
    if bounds.len() != layout.len() {
        return Err(StateError::Dimension { expected: layout.len(), got: bounds.len() }.into());
    }
    let mut v = Vec::with_capacity(bounds.len());
    for &(lo, hi) in bounds {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(GrrtError::Config(format!("malformed bound [{lo}, {hi}]")));
        }
        v.push(if lo == hi { lo } else { rng.random_range(lo..hi) });
    }
    let mut s = StateVec::new(v, layout.clone())?;
    wrap_in_place(&mut s);
    Ok(s)
}

/// Action with i.i.d. `N(0, alpha^2)` components, each resampled until it
/// lies within three standard deviations.
pub fn sample_action(dim: usize, alpha: f64, rng: &mut RngHandle) -> ActionVec {
    let v = (0..dim)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 3.0 {
                break alpha * z;
            }
        })
        .collect();
    ActionVec::new(v).expect("finite by construction")
}

struct Candidate {
    state: StateVec,
    action: ActionVec,
    distance: f64,
}

fn evaluate(
    env: &dyn Environment,
    from: &StateVec,
    action: ActionVec,
    target: &StateVec,
    cfg: &GrrtConfig,
    weights: &[f64],
) -> Option<Candidate> {
    let next = env.transition(from, action.values());
    let hold = match cfg.hold {
        StabilityHold::Sampled => action.clone(),
        StabilityHold::Zero => ActionVec::zeros(action.dim()),
    };
    if !is_stable(env, &next, &hold, cfg.horizon) {
        return None;
    }
    let distance = distance_unchecked(env.layout().dims(), next.values(), target.values(), weights);
    Some(Candidate { state: next, action, distance })
}

fn best_of(cands: Vec<Option<Candidate>>) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for c in cands.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| c.distance < b.distance) {
            best = Some(c);
        }
    }
    best
}

/// Candidate evaluations below this count run on the calling thread.
const PARALLEL_MIN_CANDIDATES: usize = 64;

fn evaluate_all(
    env: &dyn Environment,
    jobs: Vec<(&StateVec, ActionVec, &StateVec)>,
    cfg: &GrrtConfig,
    weights: &[f64],
) -> Vec<Option<Candidate>> {
    if jobs.len() >= PARALLEL_MIN_CANDIDATES && rayon::current_num_threads() > 1 {
        jobs.into_par_iter().map(|(from, a, t)| evaluate(env, from, a, t, cfg, weights)).collect()
    } else {
        jobs.into_iter().map(|(from, a, t)| evaluate(env, from, a, t, cfg, weights)).collect()
    }
}

/// One expansion toward `target` from node `node`.
///
/// Returns the stable outcome closest to the target (ties to the earliest
/// sampled action) or `None` when every sampled action leads to a drop.
pub fn expand(
    tree: &Tree,
    node: usize,
    target: &StateVec,
    cfg: &GrrtConfig,
    env: &dyn Environment,
    rng: &mut RngHandle,
) -> Result<Option<(StateVec, ActionVec)>, GrrtError> {
    cfg.validate()?;
    let from = &tree.node(node)?.state;
    let actions: Vec<ActionVec> = (0..cfg.k_max).map(|_| sample_action(env.action_dim(), cfg.alpha, rng)).collect();
    let jobs = actions.into_iter().map(|a| (from, a, target)).collect();
    Ok(best_of(evaluate_all(env, jobs, cfg, tree.weights())).map(|c| (c.state, c.action)))
}

/// Grow a tree from the environment's initial state.
pub fn grow(cfg: &GrrtConfig, env: &dyn Environment, task: &TaskSpec) -> Result<Tree, GrrtError> {
    cfg.validate()?;
    let bounds = cfg.bounds_for(env)?;
    let weights = cfg.weights_for(env)?;
    let root = env.initial_state();
    if !env.stable(&root) {
        return Err(GrrtError::UnstableRoot);
    }
    let start = Instant::now();
    let mut tree = Tree::new(root.clone(), env.action_dim(), weights)?;
    tree.nodes[0].progress = task_progress(env, task, &root, &root);
    tree.coverage = tree.nodes[0].progress;
    let mut rng = RngHandle::new(cfg.seed, 0);
    let mut stats = GrowStats::default();
    stats.coverage_curve.push((0, tree.coverage));
    let max_attempts = cfg.max_attempts.unwrap_or(u64::MAX);
    while tree.len() < cfg.n_max && stats.attempts < max_attempts {
        let batch = cfg
            .batch
            .min((max_attempts - stats.attempts) as usize)
            .min(cfg.n_max - tree.len());
        // draw everything sequentially so the tree does not depend on scheduling
        let mut plans = Vec::with_capacity(batch);
        for _ in 0..batch {
            let target = sample_target(&tree.layout, &bounds, &mut rng)?;
            let near = tree.nearest(&target)?;
            let actions: Vec<ActionVec> =
                (0..cfg.k_max).map(|_| sample_action(env.action_dim(), cfg.alpha, &mut rng)).collect();
            plans.push((target, near, actions));
        }
        let nodes = &tree.nodes;
        let jobs = plans
            .iter()
            .flat_map(|(t, near, acts)| acts.iter().map(move |a| (&nodes[*near].state, a.clone(), t)))
            .collect();
        let mut results = evaluate_all(env, jobs, cfg, &tree.weights).into_iter();
        let mut commits = Vec::with_capacity(batch);
        for (_, near, _) in &plans {
            let chunk: Vec<_> = results.by_ref().take(cfg.k_max).collect();
            commits.push((*near, best_of(chunk)));
        }
        for (near, best) in commits {
            stats.attempts += 1;
            if let Some(c) = best {
                let progress = task_progress(env, task, &root, &c.state);
                tree.push(near, c.state, c.action, progress)?;
                stats.successes += 1;
                if tree.coverage > stats.coverage_curve.last().map_or(f64::NEG_INFINITY, |p| p.1) {
                    stats.coverage_curve.push((stats.attempts, tree.coverage));
                }
            }
        }
    }
    stats.coverage_curve.push((stats.attempts, tree.coverage));
    stats.wall_secs = start.elapsed().as_secs_f64();
    tree.stats = stats;
    Ok(tree)
}

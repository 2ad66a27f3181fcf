//! Turning a grown tree into reset buffers and demonstration paths.

use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::envs::{reward_gait, sample_goal, Environment, TaskKind, TaskSpec};
use crate::grrt::{
    hex, load_container, save_container, Container, ContainerKind, Tree, TreeFileError, TreeNode,
};
use crate::state::{angle_diff, ActionVec, Layout, RngHandle, StateVec};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("tree is empty")]
    EmptyTree,
    #[error("reset buffer is empty")]
    EmptyBuffer,
    #[error("invalid extraction request: {0}")]
    Invalid(String),
    #[error(transparent)]
    File(#[from] TreeFileError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub node: usize,
    pub state: StateVec,
    /// Action from the previous step's state; `None` on the first step.
    pub action: Option<ActionVec>,
}

/// A backtracked tree path, ordered towards the goal node.
///
/// Paths normally start at the root. A goal whose ancestors were already
/// taken by an earlier path yields only the untaken suffix; `anchor` then
/// names the taken node it hangs from.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub anchor: Option<usize>,
    pub progress: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn node_ids(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.node).collect()
    }
}

/// How the goal node of a gait path is ranked.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Scoring {
    /// Cached node progress.
    #[default]
    Progress,
    /// Caller-supplied score per node id, higher is better.
    PerNode(Vec<f64>),
}

/// Per-node score: the gait reward accumulated along the root path.
pub fn path_reward_scores(tree: &Tree, env: &dyn Environment, task: &TaskSpec) -> Vec<f64> {
    let nodes = tree.nodes();
    let mut acc = vec![0.0; nodes.len()];
    for n in nodes.iter().skip(1) {
        let p = n.parent.expect("non-root node has a parent");
        acc[n.id] = acc[p] + reward_gait(env, &nodes[p].state, &n.state, &task.gait);
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub paths: Vec<Trajectory>,
    /// Fewer than the requested number of disjoint paths existed.
    pub exhausted: bool,
}

/// Repeatedly pick a goal node, backtrack it, and delete the visited
/// non-root nodes so that successive paths are disjoint.
pub fn extract_paths(
    tree: &Tree,
    task: &TaskSpec,
    p_max: usize,
    scoring: &Scoring,
    rng: &mut RngHandle,
) -> Result<Extraction, ExtractError> {
    if tree.is_empty() {
        return Err(ExtractError::EmptyTree);
    }
    if p_max < 1 {
        return Err(ExtractError::Invalid("at least one path must be requested".into()));
    }
    if let Scoring::PerNode(s) = scoring {
        if s.len() != tree.len() {
            return Err(ExtractError::Invalid(format!("{} scores for {} nodes", s.len(), tree.len())));
        }
    }
    let mut taken = vec![false; tree.len()];
    let mut paths = Vec::new();
    while paths.len() < p_max {
        let Some(goal) = pick_goal(tree, task, scoring, &taken, rng) else {
            break;
        };
        paths.push(backtrack(tree, goal, &mut taken));
    }
    let exhausted = paths.len() < p_max;
    Ok(Extraction { paths, exhausted })
}

fn pick_goal(
    tree: &Tree,
    task: &TaskSpec,
    scoring: &Scoring,
    taken: &[bool],
    rng: &mut RngHandle,
) -> Option<usize> {
    let live = tree.nodes().iter().skip(1).filter(|n| !taken[n.id]);
    match task.kind {
        TaskKind::Gait => {
            let score = |n: &TreeNode| match scoring {
                Scoring::Progress => n.progress,
                Scoring::PerNode(s) => s[n.id],
            };
            let mut best: Option<(usize, f64)> = None;
            for n in live {
                let s = score(n);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((n.id, s));
                }
            }
            best.map(|b| b.0)
        }
        TaskKind::GoToRoot | TaskKind::ArbitraryReorient => {
            let goal = task.goal.unwrap_or_else(|| sample_goal(rng));
            let angle = |n: &TreeNode| {
                let theta = object_angle_of(tree.layout(), &n.state);
                angle_diff(theta, goal).abs()
            };
            let mut best: Option<(usize, f64)> = None;
            for n in live {
                let d = angle(n);
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((n.id, d));
                }
            }
            best.map(|b| b.0)
        }
    }
}

/// First angular object coordinate of a state (0 when there is none).
fn object_angle_of(layout: &Arc<Layout>, s: &StateVec) -> f64 {
    layout
        .object_indices()
        .into_iter()
        .find(|&i| layout.dim(i).kind == crate::state::DimKind::Angular)
        .map_or(0.0, |i| s.values()[i])
}

fn backtrack(tree: &Tree, goal: usize, taken: &mut [bool]) -> Trajectory {
    let nodes = tree.nodes();
    let mut ids = Vec::new();
    let mut cur = Some(goal);
    let mut anchor = None;
    while let Some(id) = cur {
        if id != 0 && taken[id] {
            anchor = Some(id);
            break;
        }
        ids.push(id);
        cur = nodes[id].parent;
    }
    ids.reverse();
    for &id in &ids {
        if id != 0 {
            taken[id] = true;
        }
    }
    let steps = ids
        .iter()
        .enumerate()
        .map(|(k, &id)| TrajectoryStep {
            node: id,
            state: nodes[id].state.clone(),
            action: if k == 0 && anchor.is_none() { None } else { nodes[id].action.clone() },
        })
        .collect();
    Trajectory { steps, anchor, progress: nodes[goal].progress }
}

/// Stable states harvested from one tree, sampled uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetBuffer {
    /// Hash of the source tree.
    pub source: [u8; 32],
    pub layout: Arc<Layout>,
    pub weights: Vec<f64>,
    pub action_dim: usize,
    /// Copies of the selected tree nodes; `node.id` is the provenance.
    pub nodes: Vec<TreeNode>,
}

impl ResetBuffer {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn state(&self, i: usize) -> &StateVec {
        &self.nodes[i].state
    }

    pub fn states(&self) -> impl Iterator<Item = &StateVec> {
        self.nodes.iter().map(|n| &n.state)
    }

    /// `(source tree hash, node id)` of entry `i`.
    pub fn provenance(&self, i: usize) -> (String, usize) {
        (hex(&self.source), self.nodes[i].id)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        let c = Container {
            kind: ContainerKind::Subset,
            source: self.source,
            layout: self.layout.clone(),
            weights: self.weights.clone(),
            action_dim: self.action_dim,
            nodes: self.nodes.clone(),
        };
        Ok(save_container(&c, path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        let c = load_container(path)?;
        if c.kind != ContainerKind::Subset {
            return Err(ExtractError::Invalid("file holds a full tree, not a reset buffer".into()));
        }
        Ok(Self { source: c.source, layout: c.layout, weights: c.weights, action_dim: c.action_dim, nodes: c.nodes })
    }

    fn from_ids(tree: &Tree, mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self {
            source: tree.hash_bytes(),
            layout: tree.layout().clone(),
            weights: tree.weights().to_vec(),
            action_dim: tree.action_dim(),
            nodes: ids.into_iter().map(|i| tree.nodes()[i].clone()).collect(),
        }
    }
}

/// Desk default: one buffer state per ten tree nodes of a 10^4-node tree.
pub const DEFAULT_BUDGET: usize = 1000;

/// Select up to `budget` states from the tree.
///
/// Arbitrary reorientation uses the whole tree (uniformly subsampled when it
/// is larger than the budget); the other tasks take the states of extracted
/// paths, best first.
pub fn build_reset_buffer(
    tree: &Tree,
    task: &TaskSpec,
    budget: usize,
    scoring: &Scoring,
    rng: &mut RngHandle,
) -> Result<ResetBuffer, ExtractError> {
    if tree.is_empty() {
        return Err(ExtractError::EmptyTree);
    }
    if budget < 1 {
        return Err(ExtractError::Invalid("budget must be at least 1".into()));
    }
    if task.kind == TaskKind::ArbitraryReorient {
        let ids = if tree.len() <= budget {
            (0..tree.len()).collect()
        } else {
            index::sample(rng, tree.len(), budget).into_vec()
        };
        return Ok(ResetBuffer::from_ids(tree, ids));
    }
    let mut ids = vec![0usize];
    let mut taken = vec![false; tree.len()];
    while ids.len() < budget {
        let Some(goal) = pick_goal(tree, task, scoring, &taken, rng) else {
            break;
        };
        let path = backtrack(tree, goal, &mut taken);
        // best states sit at the goal end of the path
        for step in path.steps.iter().rev().filter(|s| s.node != 0) {
            if ids.len() == budget {
                break;
            }
            ids.push(step.node);
        }
    }
    Ok(ResetBuffer::from_ids(tree, ids))
}

/// Uniform draw from the buffer; returns the entry index and its state.
pub fn sample_reset<'a>(buffer: &'a ResetBuffer, rng: &mut RngHandle) -> Result<(usize, &'a StateVec), ExtractError> {
    if buffer.is_empty() {
        return Err(ExtractError::EmptyBuffer);
    }
    let i = rng.random_range(0..buffer.len());
    Ok((i, buffer.state(i)))
}

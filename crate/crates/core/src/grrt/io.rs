//! Binary tree container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "RXRT" | version u32 | kind u8 | source [u8; 32]
//! dim count u32 | per dim: kind u8, role u8, lower f64, upper f64
//! weights f64 * dims | action dim u32 | node count u64
//! per node: id u64 | parent u64 (u64::MAX = none) | depth u32 | progress f64
//!           | state f64 * dims | has action u8 | action f64 * action dim
//! ```
//!
//! Full trees use kind 0 and a zero source. Node subsets (reset buffers)
//! use kind 1 and carry the hash of the tree they were taken from.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{GrrtError, Tree, TreeNode};
use crate::state::{ActionVec, DimKind, DimRole, DimSpec, Layout, StateVec};

pub const MAGIC: &[u8; 4] = b"RXRT";
pub const VERSION: u32 = 1;
const NO_PARENT: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TreeFileError {
    #[error("not a tree file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported tree file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tree file is truncated")]
    Truncated,
    #[error("corrupt tree file: {0}")]
    Corrupt(String),
    #[error("file holds a {found} container, expected a {expected}")]
    WrongKind { found: &'static str, expected: &'static str },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for TreeFileError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TreeFileError::Truncated
        } else {
            TreeFileError::Io(e)
        }
    }
}

impl From<GrrtError> for TreeFileError {
    fn from(e: GrrtError) -> Self {
        TreeFileError::Corrupt(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Tree,
    Subset,
}

impl ContainerKind {
    fn name(self) -> &'static str {
        match self {
            Self::Tree => "tree",
            Self::Subset => "node subset",
        }
    }
}

/// Decoded contents of a tree file of either kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub source: [u8; 32],
    pub layout: Arc<Layout>,
    pub weights: Vec<f64>,
    pub action_dim: usize,
    pub nodes: Vec<TreeNode>,
}

pub fn write_container<W: Write>(c: &Container, w: &mut W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u8(match c.kind {
        ContainerKind::Tree => 0,
        ContainerKind::Subset => 1,
    })?;
    w.write_all(&c.source)?;
    w.write_u32::<LE>(c.layout.len() as u32)?;
    for d in c.layout.dims() {
        w.write_u8(match d.kind {
            DimKind::Linear => 0,
            DimKind::Angular => 1,
        })?;
        w.write_u8(match d.role {
            DimRole::Joint => 0,
            DimRole::Object => 1,
        })?;
        w.write_f64::<LE>(d.lower)?;
        w.write_f64::<LE>(d.upper)?;
    }
    for x in &c.weights {
        w.write_f64::<LE>(*x)?;
    }
    w.write_u32::<LE>(c.action_dim as u32)?;
    w.write_u64::<LE>(c.nodes.len() as u64)?;
    for n in &c.nodes {
        w.write_u64::<LE>(n.id as u64)?;
        w.write_u64::<LE>(n.parent.map_or(NO_PARENT, |p| p as u64))?;
        w.write_u32::<LE>(n.depth)?;
        w.write_f64::<LE>(n.progress)?;
        for x in n.state.values() {
            w.write_f64::<LE>(*x)?;
        }
        match &n.action {
            Some(a) => {
                w.write_u8(1)?;
                for x in a.values() {
                    w.write_f64::<LE>(*x)?;
                }
            }
            None => w.write_u8(0)?,
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Container, TreeFileError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TreeFileError::BadMagic);
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(TreeFileError::VersionMismatch { found: version, expected: VERSION });
    }
    let kind = match r.read_u8()? {
        0 => ContainerKind::Tree,
        1 => ContainerKind::Subset,
        k => return Err(TreeFileError::Corrupt(format!("unknown container kind {k}"))),
    };
    let mut source = [0u8; 32];
    r.read_exact(&mut source)?;
    let n_dims = r.read_u32::<LE>()? as usize;
    if n_dims > 1 << 16 {
        return Err(TreeFileError::Corrupt(format!("implausible dimension count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        let kind = match r.read_u8()? {
            0 => DimKind::Linear,
            1 => DimKind::Angular,
            k => return Err(TreeFileError::Corrupt(format!("unknown dim kind {k}"))),
        };
        let role = match r.read_u8()? {
            0 => DimRole::Joint,
            1 => DimRole::Object,
            k => return Err(TreeFileError::Corrupt(format!("unknown dim role {k}"))),
        };
        let lower = r.read_f64::<LE>()?;
        let upper = r.read_f64::<LE>()?;
        dims.push(DimSpec { kind, role, lower, upper });
    }
    let layout = Layout::new(dims);
    let weights = (0..n_dims).map(|_| r.read_f64::<LE>()).collect::<io::Result<Vec<_>>>()?;
    let action_dim = r.read_u32::<LE>()? as usize;
    let count = r.read_u64::<LE>()?;
    let mut nodes = Vec::new();
    for _ in 0..count {
        let id = r.read_u64::<LE>()? as usize;
        let parent = match r.read_u64::<LE>()? {
            NO_PARENT => None,
            p => Some(p as usize),
        };
        let depth = r.read_u32::<LE>()?;
        let progress = r.read_f64::<LE>()?;
        let values = (0..n_dims).map(|_| r.read_f64::<LE>()).collect::<io::Result<Vec<_>>>()?;
        let state = StateVec::new(values, layout.clone())
            .map_err(|e| TreeFileError::Corrupt(format!("node {id}: {e}")))?;
        let action = match r.read_u8()? {
            0 => None,
            1 => {
                let a = (0..action_dim).map(|_| r.read_f64::<LE>()).collect::<io::Result<Vec<_>>>()?;
                Some(ActionVec::new(a).map_err(|e| TreeFileError::Corrupt(format!("node {id}: {e}")))?)
            }
            k => return Err(TreeFileError::Corrupt(format!("bad action flag {k}"))),
        };
        nodes.push(TreeNode { id, state, parent, action, depth, progress });
    }
    Ok(Container { kind, source, layout, weights, action_dim, nodes })
}

fn container_of(tree: &Tree) -> Container {
    Container {
        kind: ContainerKind::Tree,
        source: [0; 32],
        layout: tree.layout.clone(),
        weights: tree.weights.clone(),
        action_dim: tree.action_dim,
        nodes: tree.nodes.clone(),
    }
}

pub fn write_tree<W: Write>(tree: &Tree, w: &mut W) -> io::Result<()> {
    write_container(&container_of(tree), w)
}

pub fn read_tree<R: Read>(r: &mut R) -> Result<Tree, TreeFileError> {
    let c = read_container(r)?;
    if c.kind != ContainerKind::Tree {
        return Err(TreeFileError::WrongKind { found: c.kind.name(), expected: ContainerKind::Tree.name() });
    }
    Ok(Tree::from_nodes(c.nodes, c.layout, c.action_dim, c.weights)?)
}

pub fn save_tree(tree: &Tree, path: &Path) -> Result<(), TreeFileError> {
    let mut w = BufWriter::new(File::create(path).map_err(TreeFileError::Io)?);
    write_tree(tree, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tree(path: &Path) -> Result<Tree, TreeFileError> {
    let mut r = BufReader::new(File::open(path).map_err(TreeFileError::Io)?);
    read_tree(&mut r)
}

pub fn save_container(c: &Container, path: &Path) -> Result<(), TreeFileError> {
    let mut w = BufWriter::new(File::create(path).map_err(TreeFileError::Io)?);
    write_container(c, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container, TreeFileError> {
    let mut r = BufReader::new(File::open(path).map_err(TreeFileError::Io)?);
    read_container(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{PlanarGait, PlanarGaitParams, TaskSpec};
    use crate::grrt::{grow, GrrtConfig};

    fn tree(n: usize) -> Tree {
        let env = PlanarGait::new(PlanarGaitParams::default());
        let cfg = GrrtConfig { n_max: n, k_max: 4, seed: 8, ..GrrtConfig::default() };
        grow(&cfg, &env, &TaskSpec::gait()).unwrap()
    }

    fn bytes(t: &Tree) -> Vec<u8> {
        let mut b = Vec::new();
        write_tree(t, &mut b).unwrap();
        b
    }

    #[test]
    fn root_only_round_trip() {
        let t = tree(1);
        let back = read_tree(&mut bytes(&t).as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn empty_container_round_trip() {
        let t = tree(1);
        let c = Container { nodes: Vec::new(), kind: ContainerKind::Subset, ..container_of(&t) };
        let mut b = Vec::new();
        write_container(&c, &mut b).unwrap();
        assert_eq!(read_container(&mut b.as_slice()).unwrap(), c);
        // an empty container is not a tree
        let c = Container { kind: ContainerKind::Tree, ..c };
        let mut b = Vec::new();
        write_container(&c, &mut b).unwrap();
        assert!(matches!(read_tree(&mut b.as_slice()), Err(TreeFileError::Corrupt(_))));
    }

    #[test]
    fn thousand_node_round_trip_through_a_file() {
        let t = tree(1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rxrt");
        save_tree(&t, &path).unwrap();
        let back = load_tree(&path).unwrap();
        assert_eq!(back.len(), 1000);
        for (a, b) in t.nodes().iter().zip(back.nodes()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.parent, b.parent);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.action, b.action);
            assert_eq!(a.state.values(), b.state.values());
            assert_eq!(a.progress.to_bits(), b.progress.to_bits());
        }
        assert_eq!(back.hash(), t.hash());
    }

    #[test]
    fn header_errors_are_distinct() {
        let b = bytes(&tree(20));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_tree(&mut bad.as_slice()), Err(TreeFileError::BadMagic)));
        let mut old = b.clone();
        old[4] = 9;
        assert!(matches!(
            read_tree(&mut old.as_slice()),
            Err(TreeFileError::VersionMismatch { found: 9, expected: VERSION })
        ));
        for cut in [3, 10, b.len() / 2, b.len() - 1] {
            assert!(matches!(read_tree(&mut &b[..cut]), Err(TreeFileError::Truncated)), "cut at {cut}");
        }
    }

    #[test]
    fn subset_is_not_loaded_as_tree() {
        let t = tree(5);
        let c = Container { kind: ContainerKind::Subset, ..container_of(&t) };
        let mut b = Vec::new();
        write_container(&c, &mut b).unwrap();
        assert!(matches!(read_tree(&mut b.as_slice()), Err(TreeFileError::WrongKind { .. })));
    }
}

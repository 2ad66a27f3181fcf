//! Exact nearest-neighbour index for tree states.
//!
//! States are embedded into Euclidean space (linear dims scaled by
//! `sqrt(w)`, angular dims as `sqrt(w) * (cos, sin)`). Chord length never
//! exceeds arc length, so embedded distances lower-bound the true metric and
//! can drive branch-and-bound pruning while leaves are scored with the true
//! metric. The result is therefore identical to a linear scan.
//!
//! New points go to an unindexed tail that is scanned linearly; the kd-tree
//! is rebuilt once the tail grows past a fraction of the indexed set.

use crate::state::{DimKind, DimSpec};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct KdIndex {
    dims: Vec<DimSpec>,
    weights: Vec<f64>,
    stride: usize,
    /// Embedded coordinates, `stride` per point, in insertion order.
    points: Vec<f64>,
    /// Point ids in kd order for the indexed prefix.
    order: Vec<usize>,
    nodes: Vec<KdNode>,
    indexed: usize,
    count: usize,
    min_indexed: usize,
}

impl KdIndex {
    pub fn new(dims: &[DimSpec], weights: &[f64], min_indexed: usize) -> Self {
        let stride = dims
            .iter()
            .map(|d| match d.kind {
                DimKind::Linear => 1,
                DimKind::Angular => 2,
            })
            .sum();
        Self {
            dims: dims.to_vec(),
            weights: weights.to_vec(),
            stride,
            points: Vec::new(),
            order: Vec::new(),
            nodes: Vec::new(),
            indexed: 0,
            count: 0,
            min_indexed,
        }
    }

    fn embed_into(&self, x: &[f64], out: &mut Vec<f64>) {
        for ((d, w), v) in self.dims.iter().zip(&self.weights).zip(x) {
            let s = w.sqrt();
            match d.kind {
                DimKind::Linear => out.push(s * v),
                DimKind::Angular => {
                    out.push(s * v.cos());
                    out.push(s * v.sin());
                }
            }
        }
    }

    pub fn insert(&mut self, x: &[f64]) {
        let mut buf = Vec::with_capacity(self.stride);
        self.embed_into(x, &mut buf);
        self.points.extend_from_slice(&buf);
        self.count += 1;
        let tail = self.count - self.indexed;
        if self.count >= self.min_indexed && tail * 4 > self.indexed.max(self.min_indexed) {
            self.rebuild();
        }
    }

    fn rebuild(&mut self) {
        self.order = (0..self.count).collect();
        self.nodes.clear();
        let n = self.count;
        let mut order = std::mem::take(&mut self.order);
        self.build(&mut order, 0, n);
        self.order = order;
        self.indexed = n;
    }

    fn coord(&self, id: usize, k: usize) -> f64 {
        self.points[id * self.stride + k]
    }

    fn build(&mut self, order: &mut [usize], start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return slot;
        }
        // split on the widest embedded coordinate
        let mut best = (0usize, -1.0f64);
        for k in 0..self.stride {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &id in &order[start..end] {
                let c = self.coord(id, k);
                lo = lo.min(c);
                hi = hi.max(c);
            }
            if hi - lo > best.1 {
                best = (k, hi - lo);
            }
        }
        let dim = best.0;
        let mid = start + (end - start) / 2;
        let points = &self.points;
        let stride = self.stride;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * stride + dim].total_cmp(&points[b * stride + dim])
        });
        let value = self.coord(order[mid], dim);
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(order, start, mid);
        let right = self.build(order, mid, end);
        self.nodes[slot] = KdNode::Split { dim, value, left, right };
        slot
    }

    /// Nearest point by the exact metric `dist(id)`, ties to the lowest id.
    pub fn nearest<F: Fn(usize) -> f64>(&self, x: &[f64], dist: F) -> Option<(usize, f64)> {
        if self.count == 0 {
            return None;
        }
        let mut q = Vec::with_capacity(self.stride);
        self.embed_into(x, &mut q);
        let mut best: Option<(usize, f64)> = None;
        let consider = |id: usize, best: &mut Option<(usize, f64)>| {
            let d = dist(id);
            match best {
                Some((bid, bd)) if d > *bd || (d == *bd && id > *bid) => {}
                _ => *best = Some((id, d)),
            }
        };
        if self.indexed > 0 {
            self.search(0, &q, &mut best, &consider);
        }
        for id in self.indexed..self.count {
            consider(id, &mut best);
        }
        best
    }

    fn search<F: Fn(usize, &mut Option<(usize, f64)>)>(
        &self,
        node: usize,
        q: &[f64],
        best: &mut Option<(usize, f64)>,
        consider: &F,
    ) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    consider(id, best);
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best, consider);
                // visit the far side unless its lower bound strictly exceeds the best
                let bound = diff.abs();
                if best.is_none_or(|(_, bd)| bound <= bd) {
                    self.search(far, q, best, consider);
                }
            }
        }
    }
}

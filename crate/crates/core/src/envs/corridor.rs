use std::sync::Arc;

use super::Environment;
use crate::state::{DimRole, DimSpec, Layout, StateVec};

/// Narrow bent corridor in the unit cube.
///
/// The stable set is a union of axis-aligned boxes ("slabs") of half-width
/// `half_width` around an axis-aligned polyline spine with `bends` bends.
/// Motion along the slab axis passes unchanged; motion normal to it is scaled
/// by `normal_gain`, so crossing a bend is only possible through the corner.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorParams {
    pub dim: usize,
    pub bends: usize,
    pub half_width: f64,
    pub segment_length: f64,
    /// Coordinate of the spine start on every axis.
    pub start: f64,
    pub normal_gain: f64,
    pub step_max: f64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            dim: 6,
            bends: 3,
            half_width: 0.05,
            segment_length: 0.6,
            start: 0.2,
            normal_gain: 0.1,
            step_max: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct Segment {
    axis: usize,
    sign: f64,
    from: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    offset: f64,
}

#[derive(Debug, Clone)]
pub struct Corridor {
    params: CorridorParams,
    layout: Arc<Layout>,
    segments: Vec<Segment>,
}

impl Corridor {
    pub fn new(params: CorridorParams) -> Self {
        let n = params.dim;
        let layout = Layout::new((0..n).map(|_| DimSpec::linear(DimRole::Joint, 0.0, 1.0)).collect());
        let w = params.half_width;
        let mut point = vec![params.start; n];
        let mut segments = Vec::with_capacity(params.bends + 1);
        for j in 0..=params.bends {
            let axis = j % n;
            let sign = if (j / n).is_multiple_of(2) { 1.0 } else { -1.0 };
            let from = point.clone();
            let mut to = point.clone();
            to[axis] += sign * params.segment_length;
            let lo = (0..n).map(|i| from[i].min(to[i]) - w).collect();
            let hi = (0..n).map(|i| from[i].max(to[i]) + w).collect();
            segments.push(Segment { axis, sign, from, lo, hi, offset: j as f64 * params.segment_length });
            point = to;
        }
        Self { params, layout, segments }
    }

    pub fn params(&self) -> &CorridorParams {
        &self.params
    }

    pub fn total_length(&self) -> f64 {
        self.segments.len() as f64 * self.params.segment_length
    }

    pub fn state(&self, x: &[f64]) -> StateVec {
        StateVec::new(x.to_vec(), self.layout.clone()).expect("corridor state")
    }

    /// Spine vertex `j` (0 = start, `bends + 1` = end).
    pub fn spine_point(&self, j: usize) -> Vec<f64> {
        if j < self.segments.len() {
            self.segments[j].from.clone()
        } else {
            let last = self.segments.last().expect("at least one segment");
            let mut p = last.from.clone();
            p[last.axis] += last.sign * self.params.segment_length;
            p
        }
    }

    fn inside(seg: &Segment, x: &[f64]) -> bool {
        x.iter().zip(seg.lo.iter().zip(&seg.hi)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    fn membership(&self, x: &[f64]) -> Vec<bool> {
        self.segments.iter().map(|s| Self::inside(s, x)).collect()
    }

    fn along(&self, seg: &Segment, x: &[f64]) -> f64 {
        (seg.sign * (x[seg.axis] - seg.from[seg.axis])).clamp(0.0, self.params.segment_length)
    }

    /// Squared distance from `x` to the segment's spine piece.
    fn spine_gap(&self, seg: &Segment, x: &[f64]) -> f64 {
        let t = self.along(seg, x);
        (0..x.len())
            .map(|i| {
                let p = if i == seg.axis { seg.from[i] + seg.sign * t } else { seg.from[i] };
                (x[i] - p) * (x[i] - p)
            })
            .sum()
    }
}

impl Environment for Corridor {
    fn name(&self) -> &str {
        "corridor"
    }

    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn action_dim(&self) -> usize {
        self.params.dim
    }

    fn initial_state(&self) -> StateVec {
        self.state(&self.segments[0].from)
    }

    fn stable(&self, s: &StateVec) -> bool {
        self.segments.iter().any(|seg| Self::inside(seg, s.values()))
    }

    fn transition(&self, s: &StateVec, a: &[f64]) -> StateVec {
        let x = s.values();
        let member = self.membership(x);
        let mut tangent = vec![false; self.params.dim];
        for (seg, m) in self.segments.iter().zip(member) {
            if m {
                tangent[seg.axis] = true;
            }
        }
        let out = x
            .iter()
            .zip(a)
            .zip(tangent)
            .map(|((xi, ai), free)| {
                let d = ai.clamp(-self.params.step_max, self.params.step_max);
                let gain = if free { 1.0 } else { self.params.normal_gain };
                (xi + gain * d).clamp(0.0, 1.0)
            })
            .collect();
        StateVec::new(out, self.layout.clone()).expect("transition keeps layout")
    }

    fn setpoints(&self, s: &StateVec, a: &[f64]) -> Vec<f64> {
        s.values().iter().zip(a).map(|(x, d)| x + d).collect()
    }

    fn contacts(&self, s: &StateVec) -> Vec<bool> {
        self.membership(s.values())
    }

    /// Arc length of the projection onto the nearest spine segment; ties go
    /// to the later segment.
    fn progress(&self, s: &StateVec) -> f64 {
        let x = s.values();
        let mut best = (f64::INFINITY, 0.0);
        for seg in &self.segments {
            let gap = self.spine_gap(seg, x);
            if gap <= best.0 {
                best = (gap, seg.offset + self.along(seg, x));
            }
        }
        best.1
    }

    fn object_angle(&self, _s: &StateVec) -> Option<f64> {
        None
    }

    fn privileged(&self, s: &StateVec, prev: Option<&StateVec>) -> Vec<f64> {
        let p = self.progress(s);
        let dp = prev.map_or(0.0, |q| p - self.progress(q));
        vec![p / self.total_length(), dp / self.params.step_max]
    }

    fn sample_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.params.dim]
    }

    fn step_limit(&self) -> f64 {
        self.params.step_max
    }

    fn with_difficulty(&self, d: f64) -> Box<dyn Environment> {
        let mut params = self.params.clone();
        let d = d.clamp(0.0, 1.0);
        params.half_width = 0.5 + d * (self.params.half_width - 0.5);
        Box::new(Corridor::new(params))
    }
}

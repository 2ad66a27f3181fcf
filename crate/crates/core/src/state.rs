//! Shared vector types, the state-space metric and seeded randomness.
//!
//! States are flat `f64` vectors paired with a [`Layout`] that tells, per
//! dimension, whether the coordinate is linear (clamped to bounds) or angular
//! (wrapped to `[-pi, pi)`), and whether it belongs to the actuated joints or
//! to the manipulated object.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("layout mismatch between states")]
    Layout,
    #[error("non-finite component at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DimKind {
    Linear,
    Angular,
}

/// Which part of the system a coordinate describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DimRole {
    /// Actuated coordinate; action labels are derived from these.
    Joint,
    /// Object pose coordinate.
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimSpec {
    pub kind: DimKind,
    pub role: DimRole,
    pub lower: f64,
    pub upper: f64,
}

impl DimSpec {
    pub fn linear(role: DimRole, lower: f64, upper: f64) -> Self {
        Self { kind: DimKind::Linear, role, lower, upper }
    }

    pub fn angular(role: DimRole) -> Self {
        Self { kind: DimKind::Angular, role, lower: -PI, upper: PI }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    dims: Vec<DimSpec>,
}

impl Layout {
    pub fn new(dims: Vec<DimSpec>) -> Arc<Self> {
        Arc::new(Self { dims })
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn dims(&self) -> &[DimSpec] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> &DimSpec {
        &self.dims[i]
    }

    pub fn joint_indices(&self) -> Vec<usize> {
        self.indices_with(DimRole::Joint)
    }

    pub fn object_indices(&self) -> Vec<usize> {
        self.indices_with(DimRole::Object)
    }

    fn indices_with(&self, role: DimRole) -> Vec<usize> {
        self.dims
            .iter()
            .enumerate()
            .filter(|(_, d)| d.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    /// Default metric weights: 1.0 on joint dims, 2.0 on object-pose dims.
    pub fn default_weights(&self) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| match d.role {
                DimRole::Joint => 1.0,
                DimRole::Object => 2.0,
            })
            .collect()
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut r = x - TWO_PI * ((x + PI) / TWO_PI).floor();
    if r >= PI {
        r -= TWO_PI;
    }
    if r < -PI {
        r += TWO_PI;
    }
    r
}

/// Signed shortest angular difference `a - b`, in `[-pi, pi)`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// A point in an environment's state space.
#[derive(Clone, PartialEq)]
pub struct StateVec {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl fmt::Debug for StateVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("StateVec").field(&self.values).finish()
    }
}

impl StateVec {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self, StateError> {
        if values.len() != layout.len() {
            return Err(StateError::Dimension { expected: layout.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(StateError::NonFinite(i));
        }
        Ok(Self { values, layout })
    }

    /// Builds a state and wraps/clamps it into the layout's domain.
    pub fn wrapped(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self, StateError> {
        Ok(wrap_state(&Self::new(values, layout)?))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &StateVec) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }
}

/// Per-joint setpoint deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionVec {
    values: Vec<f64>,
}

impl ActionVec {
    pub fn new(values: Vec<f64>) -> Result<Self, StateError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(StateError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Policy input. Components whose mask bit is set are forced to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVec {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ObservationVec {
    pub fn unmasked(values: Vec<f64>) -> Self {
        let mask = vec![false; values.len()];
        Self { values, mask }
    }

    /// `mask[i] == true` zeroes component `i`.
    pub fn with_mask(mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self, StateError> {
        if mask.len() != values.len() {
            return Err(StateError::Dimension { expected: values.len(), got: mask.len() });
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m {
                *v = 0.0;
            }
        }
        Ok(Self { values, mask })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Weighted Euclidean distance with shortest-arc differences on angular dims.
pub fn state_distance(a: &StateVec, b: &StateVec, weights: &[f64]) -> Result<f64, StateError> {
    if !a.same_layout(b) {
        return Err(StateError::Layout);
    }
    if weights.len() != a.len() {
        return Err(StateError::Dimension { expected: a.len(), got: weights.len() });
    }
    Ok(distance_unchecked(a.layout.dims(), &a.values, &b.values, weights))
}

/// Metric kernel shared by nearest-neighbour queries. No layout checks.
pub(crate) fn distance_unchecked(dims: &[DimSpec], a: &[f64], b: &[f64], weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..dims.len() {
        let d = match dims[i].kind {
            DimKind::Linear => a[i] - b[i],
            DimKind::Angular => angle_diff(a[i], b[i]),
        };
        acc += weights[i] * d * d;
    }
    acc.sqrt()
}

/// Wraps angular dims to `[-pi, pi)` and clamps linear dims to their bounds.
pub fn wrap_state(s: &StateVec) -> StateVec {
    let mut out = s.clone();
    wrap_in_place(&mut out);
    out
}

pub(crate) fn wrap_in_place(s: &mut StateVec) {
    let layout = s.layout.clone();
    for (v, d) in s.values.iter_mut().zip(layout.dims()) {
        *v = match d.kind {
            DimKind::Angular => wrap_angle(*v),
            DimKind::Linear => v.clamp(d.lower, d.upper),
        };
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded random stream. The same `(seed, stream)` pair yields the same
/// draws on every platform (ChaCha8 keyed by the seed, stream id selects the
/// ChaCha stream).
#[derive(Clone, Debug)]
pub struct RngHandle {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream, a pure function of `(seed, stream, key)`.
    pub fn derive(&self, key: u64) -> RngHandle {
        let stream = splitmix64(self.stream ^ splitmix64(key.wrapping_add(0x5EED)));
        RngHandle::new(self.seed, stream)
    }
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

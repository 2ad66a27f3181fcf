use std::f64::consts::PI;
use std::sync::Arc;

use super::Environment;
use crate::state::{angle_diff, wrap_angle, DimRole, DimSpec, Layout, StateVec};

/// Parameters of the planar finger-gaiting analogue.
///
/// `m` fingers sit at evenly spaced base angles around a disc whose centre is
/// fixed. Finger `i` has an arm angle `q_i` limited to `[-q_lim, q_lim]` and a
/// radial coordinate `r_i`; it touches the disc iff `r_i <= r_contact`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarGaitParams {
    pub fingers: usize,
    pub q_lim: f64,
    pub spread_min: f64,
    pub delta_max: f64,
    pub r_contact: f64,
    /// Radial coordinate of the fingers in the initial grasp.
    pub r_grip: f64,
    /// Radial coordinate a finger is pushed to when it loses contact at its arc limit.
    pub r_release: f64,
    /// Planner sampling range of the accumulated-rotation coordinate.
    pub rotation_sample_range: f64,
    /// Commanding a touching finger to move further than this in one step
    /// knocks the object loose from every finger.
    pub slip_limit: f64,
}

impl Default for PlanarGaitParams {
    fn default() -> Self {
        Self {
            fingers: 3,
            q_lim: 0.6,
            spread_min: PI / 2.0,
            delta_max: 0.05,
            r_contact: 0.5,
            r_grip: 0.3,
            r_release: 0.75,
            rotation_sample_range: 4.0 * PI,
            slip_limit: 0.2,
        }
    }
}

/// State layout: `[theta, q_0..q_{m-1}, r_0..r_{m-1}, rotation]`.
#[derive(Debug, Clone)]
pub struct PlanarGait {
    params: PlanarGaitParams,
    layout: Arc<Layout>,
    bases: Vec<f64>,
}

impl PlanarGait {
    pub fn new(params: PlanarGaitParams) -> Self {
        let m = params.fingers;
        let mut dims = vec![DimSpec::angular(DimRole::Object)];
        dims.extend((0..m).map(|_| DimSpec::linear(DimRole::Joint, -params.q_lim, params.q_lim)));
        dims.extend((0..m).map(|_| DimSpec::linear(DimRole::Joint, 0.0, 1.0)));
        dims.push(DimSpec::linear(DimRole::Object, f64::NEG_INFINITY, f64::INFINITY));
        let bases = (0..m).map(|i| 2.0 * PI * i as f64 / m as f64).collect();
        Self { params, layout: Layout::new(dims), bases }
    }

    pub fn params(&self) -> &PlanarGaitParams {
        &self.params
    }

    pub fn theta_index(&self) -> usize {
        0
    }

    pub fn q_index(&self, i: usize) -> usize {
        1 + i
    }

    pub fn r_index(&self, i: usize) -> usize {
        1 + self.params.fingers + i
    }

    pub fn rotation_index(&self) -> usize {
        1 + 2 * self.params.fingers
    }

    /// Builds a state from its parts (theta is wrapped).
    pub fn state(&self, theta: f64, q: &[f64], r: &[f64], rotation: f64) -> StateVec {
        let mut v = vec![wrap_angle(theta)];
        v.extend_from_slice(q);
        v.extend_from_slice(r);
        v.push(rotation);
        StateVec::new(v, self.layout.clone()).expect("planar gait state")
    }

    pub fn in_contact(&self, s: &StateVec, i: usize) -> bool {
        s.values()[self.r_index(i)] <= self.params.r_contact
    }

    /// Angular position of finger `i` around the disc.
    pub fn finger_position(&self, s: &StateVec, i: usize) -> f64 {
        self.bases[i] + s.values()[self.q_index(i)]
    }

    /// Largest angular spread between two contacting fingers (0 with fewer than two).
    pub fn contact_spread(&self, s: &StateVec) -> f64 {
        let contacts: Vec<usize> = (0..self.params.fingers).filter(|&i| self.in_contact(s, i)).collect();
        let mut best = 0.0f64;
        for (k, &i) in contacts.iter().enumerate() {
            for &j in &contacts[k + 1..] {
                let d = angle_diff(self.finger_position(s, i), self.finger_position(s, j)).abs();
                best = best.max(d);
            }
        }
        best
    }
}

impl Environment for PlanarGait {
    fn name(&self) -> &str {
        "planar_gait"
    }

    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn action_dim(&self) -> usize {
        2 * self.params.fingers
    }

    fn initial_state(&self) -> StateVec {
        let m = self.params.fingers;
        self.state(0.0, &vec![0.0; m], &vec![self.params.r_grip; m], 0.0)
    }

    fn stable(&self, s: &StateVec) -> bool {
        let m = self.params.fingers;
        let n_contacts = (0..m).filter(|&i| self.in_contact(s, i)).count();
        n_contacts >= 2 && self.contact_spread(s) >= self.params.spread_min
    }

    fn transition(&self, s: &StateVec, a: &[f64]) -> StateVec {
        let p = &self.params;
        let m = p.fingers;
        let v = s.values();
        let mut out = v.to_vec();
        let mut moved = 0.0;
        let mut carriers = 0usize;
        // a jerk on any touching finger knocks the object out of the grasp
        let knocked = (0..m).any(|i| v[self.r_index(i)] <= p.r_contact && a[i].abs() > p.slip_limit);
        for i in 0..m {
            let (qi, ri) = (self.q_index(i), self.r_index(i));
            let q = v[qi];
            let touching = v[ri] <= p.r_contact;
            let target = q + a[i].clamp(-p.delta_max, p.delta_max);
            if target.abs() > p.q_lim || (touching && knocked) {
                // the finger slides off the object
                out[qi] = target.clamp(-p.q_lim, p.q_lim);
                if touching {
                    out[ri] = p.r_release;
                }
                continue;
            }
            out[qi] = target;
            if touching {
                moved += target - q;
                carriers += 1;
            }
            if target.abs() < p.q_lim {
                out[ri] = (v[ri] + a[m + i]).clamp(0.0, 1.0);
            }
        }
        let dtheta = if carriers > 0 { moved / carriers as f64 } else { 0.0 };
        out[0] = wrap_angle(v[0] + dtheta);
        out[self.rotation_index()] = v[self.rotation_index()] + dtheta;
        StateVec::new(out, self.layout.clone()).expect("transition keeps layout")
    }

    fn setpoints(&self, s: &StateVec, a: &[f64]) -> Vec<f64> {
        let m = self.params.fingers;
        let v = s.values();
        (0..m)
            .map(|i| v[self.q_index(i)] + a[i])
            .chain((0..m).map(|i| v[self.r_index(i)] + a[m + i]))
            .collect()
    }

    fn contacts(&self, s: &StateVec) -> Vec<bool> {
        (0..self.params.fingers).map(|i| self.in_contact(s, i)).collect()
    }

    fn progress(&self, s: &StateVec) -> f64 {
        s.values()[self.rotation_index()]
    }

    fn object_angle(&self, s: &StateVec) -> Option<f64> {
        Some(s.values()[0])
    }

    fn privileged(&self, s: &StateVec, prev: Option<&StateVec>) -> Vec<f64> {
        let theta = s.values()[0];
        let omega = prev.map_or(0.0, |p| angle_diff(theta, p.values()[0]));
        vec![theta.cos(), theta.sin(), omega / self.params.delta_max]
    }

    fn sample_bounds(&self) -> Vec<(f64, f64)> {
        let p = &self.params;
        let mut b = vec![(-PI, PI)];
        b.extend((0..p.fingers).map(|_| (-p.q_lim, p.q_lim)));
        b.extend((0..p.fingers).map(|_| (0.0, 1.0)));
        b.push((-p.rotation_sample_range, p.rotation_sample_range));
        b
    }

    fn step_limit(&self) -> f64 {
        self.params.delta_max
    }

    fn with_difficulty(&self, d: f64) -> Box<dyn Environment> {
        let mut params = self.params.clone();
        params.spread_min = self.params.spread_min * d.clamp(0.0, 1.0);
        Box::new(PlanarGait::new(params))
    }
}

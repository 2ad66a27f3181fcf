//! Small dense networks with hand-written reverse mode, a diagonal Gaussian
//! policy head, and Adam.

mod checkpoint;

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};

use crate::state::RngHandle;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("forward cache does not belong to this network")]
    Cache,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid network: {0}")]
    Invalid(String),
}

/// Multi-layer perceptron, tanh on hidden layers and identity on the output.
///
/// Parameters are one flat vector: per layer the `out x in` weight matrix in
/// row-major order followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer activations of a batched forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Array2<f64>>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Invalid(format!("layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] })
    }

    /// Glorot-uniform weights, zero biases; the output layer is scaled by `out_scale`.
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut RngHandle) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes)?;
        let layers = net.layers();
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            let scale = if l + 1 == layers { out_scale } else { 1.0 };
            for w in &mut net.params[off..off + n_in * n_out] {
                *w = scale * rng.random_range(-limit..limit);
            }
            off += n_in * n_out + n_out;
        }
        Ok(net)
    }

    /// Single linear layer with identity weights.
    pub fn identity(n: usize) -> Result<Self, NnError> {
        let mut net = Self::zeros(&[n, n])?;
        for i in 0..n {
            net.params[i * n + i] = 1.0;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(NnError::Shape { expected: net.params.len(), got: params.len() });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("parameters"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn offset(&self, l: usize) -> usize {
        param_count(&self.sizes[..=l])
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        ArrayView2::from_shape((n_out, n_in), &self.params[off..off + n_in * n_out]).expect("layer shape")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l) + n_in * n_out;
        ArrayView1::from(&self.params[off..off + n_out])
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (y, _) = self.forward_batch(xb)?;
        Ok(y.into_raw_vec_and_offset().0)
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpCache), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::Shape { expected: self.input_dim(), got: x.ncols() });
        }
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_owned());
        for l in 0..self.layers() {
            let mut z = acts[l].dot(&self.weights(l).t());
            z += &self.bias(l);
            if l + 1 < self.layers() {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        let out = acts.last().expect("output layer").clone();
        Ok((out, MlpCache { acts }))
    }

    /// Reverse pass: parameter gradient (flat, summed over the batch) and
    /// input gradient, for output gradient `dy`.
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>), NnError> {
        let ok = cache.acts.len() == self.sizes.len()
            && cache.acts.iter().zip(&self.sizes).all(|(a, &n)| a.ncols() == n)
            && dy.dim() == cache.acts[self.layers()].dim();
        if !ok {
            return Err(NnError::Cache);
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut da = dy.to_owned();
        for l in (0..self.layers()).rev() {
            let dz = if l + 1 < self.layers() {
                let h = &cache.acts[l + 1];
                da * &h.mapv(|v| 1.0 - v * v)
            } else {
                da
            };
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let dw = dz.t().dot(&cache.acts[l]);
            grads[off..off + n_in * n_out].copy_from_slice(dw.as_slice().expect("standard layout"));
            let db = dz.sum_axis(Axis(0));
            grads[off + n_in * n_out..off + n_in * n_out + n_out].copy_from_slice(db.as_slice().expect("contiguous"));
            da = dz.dot(&self.weights(l));
        }
        Ok((grads, da))
    }
}

/// Stack row vectors into a matrix.
pub fn rows_to_array(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>, NnError> {
    let mut flat = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(NnError::Shape { expected: width, got: r.len() });
        }
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("sized above"))
}

/// Diagonal Gaussian policy with a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    log_std: Vec<f64>,
}

impl GaussianPolicy {
    /// Default architecture with the initial std set to `init_std`.
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], init_std: f64, rng: &mut RngHandle) -> Result<Self, NnError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(act_dim);
        let mean = Mlp::new(&sizes, 0.01, rng)?;
        Self::from_parts(mean, vec![init_std.ln(); act_dim])
    }

    pub fn from_parts(mean: Mlp, log_std: Vec<f64>) -> Result<Self, NnError> {
        if log_std.len() != mean.output_dim() {
            return Err(NnError::Shape { expected: mean.output_dim(), got: log_std.len() });
        }
        if log_std.iter().any(|v| v.is_nan()) {
            return Err(NnError::NonFinite("log-std"));
        }
        let mut p = Self { mean, log_std };
        p.clamp_log_std();
        Ok(p)
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn set_log_std(&mut self, v: &[f64]) {
        self.log_std.copy_from_slice(v);
        self.clamp_log_std();
    }

    fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn n_params(&self) -> usize {
        self.mean.n_params() + self.log_std.len()
    }

    /// Mean-net parameters followed by the log-std vector.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.mean.params().to_vec();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn set_flat_params(&mut self, v: &[f64]) -> Result<(), NnError> {
        if v.len() != self.n_params() {
            return Err(NnError::Shape { expected: self.n_params(), got: v.len() });
        }
        let n = self.mean.n_params();
        self.mean.params_mut().copy_from_slice(&v[..n]);
        self.log_std.copy_from_slice(&v[n..]);
        self.clamp_log_std();
        Ok(())
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        self.mean.forward(obs)
    }

    /// Draw an action and return it with its log-probability.
    pub fn sample(&self, obs: &[f64], rng: &mut RngHandle) -> Result<(Vec<f64>, f64), NnError> {
        let mu = self.mean_action(obs)?;
        let a: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let lp = diag_gaussian_logprob(&mu, &self.log_std, &a);
        Ok((a, lp))
    }

    /// Entropy of the action distribution (independent of the observation).
    pub fn entropy(&self) -> f64 {
        let c = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        self.log_std.iter().map(|ls| ls + c).sum()
    }
}

/// `log N(a; mu, diag(exp(log_std))^2)`.
pub fn diag_gaussian_logprob(mu: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * PI).ln();
    mu.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - c
        })
        .sum()
}

/// Log-probability of `action` at `obs` and its gradient with respect to the
/// flat policy parameters (see [`GaussianPolicy::flat_params`]).
pub fn gaussian_logprob(policy: &GaussianPolicy, obs: &[f64], action: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if action.len() != policy.act_dim() {
        return Err(NnError::Shape { expected: policy.act_dim(), got: action.len() });
    }
    let x = ArrayView2::from_shape((1, obs.len()), obs).expect("row vector");
    let (mu, cache) = policy.mean.forward_batch(x)?;
    let mu = mu.row(0).to_vec();
    let lp = diag_gaussian_logprob(&mu, policy.log_std(), action);
    let mut dmu = Array2::zeros((1, mu.len()));
    let mut dls = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let var = (2.0 * policy.log_std[i]).exp();
        let d = action[i] - mu[i];
        dmu[[0, i]] = d / var;
        dls.push(d * d / var - 1.0);
    }
    let (mut g, _) = policy.mean.backward(&cache, dmu.view())?;
    g.extend(dls);
    Ok((lp, g))
}

/// Per-row log-probabilities and the pieces needed for their gradients.
pub struct BatchLogprob {
    pub logp: Array1<f64>,
    pub mu: Array2<f64>,
    pub cache: MlpCache,
}

pub fn batch_logprob(policy: &GaussianPolicy, obs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<BatchLogprob, NnError> {
    if actions.ncols() != policy.act_dim() || actions.nrows() != obs.nrows() {
        return Err(NnError::Shape { expected: policy.act_dim(), got: actions.ncols() });
    }
    let (mu, cache) = policy.mean.forward_batch(obs)?;
    let logp = Array1::from_iter(
        mu.rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(m, a)| diag_gaussian_logprob(m.as_slice().expect("row"), policy.log_std(), &a.to_vec())),
    );
    Ok(BatchLogprob { logp, mu, cache })
}

/// Gradient of `sum_i w_i * logp_i + ent_coef_grad * sum(log_std)` with
/// respect to the flat policy parameters, given per-row weights `w`.
pub fn batch_logprob_grad(
    policy: &GaussianPolicy,
    bl: &BatchLogprob,
    actions: ArrayView2<'_, f64>,
    w: ArrayView1<'_, f64>,
    log_std_extra: f64,
) -> Result<Vec<f64>, NnError> {
    let inv_var: Vec<f64> = policy.log_std().iter().map(|ls| (-2.0 * ls).exp()).collect();
    let diff = &actions - &bl.mu;
    let mut dmu = diff.clone();
    for (mut row, wi) in dmu.rows_mut().into_iter().zip(w) {
        for (v, iv) in row.iter_mut().zip(&inv_var) {
            *v *= wi * iv;
        }
    }
    let (mut g, _) = policy.mean.backward(&bl.cache, dmu.view())?;
    for (j, iv) in inv_var.iter().enumerate() {
        let col = diff.slice(s![.., j]);
        let dl: f64 = col.iter().zip(w).map(|(d, wi)| wi * (d * d * iv - 1.0)).sum();
        g.push(dl + log_std_extra);
    }
    Ok(g)
}

/// Scalar state-value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFn {
    pub net: Mlp,
}

impl ValueFn {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut RngHandle) -> Result<Self, NnError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self { net: Mlp::new(&sizes, 1.0, rng)? })
    }

    pub fn from_net(net: Mlp) -> Result<Self, NnError> {
        if net.output_dim() != 1 {
            return Err(NnError::Shape { expected: 1, got: net.output_dim() });
        }
        Ok(Self { net })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, NnError> {
        Ok(self.net.forward(obs)?[0])
    }

    pub fn values(&self, obs: ArrayView2<'_, f64>) -> Result<Array1<f64>, NnError> {
        let (v, _) = self.net.forward_batch(obs)?;
        Ok(v.column(0).to_owned())
    }
}

/// Mean squared error over all entries and its gradient with respect to `pred`.
pub fn mse_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let n = pred.len().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Scale `g` in place so its Euclidean norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= k);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected Adam step, descending along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Shape { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("gradient"));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let fp = f(&p);
            p[i] = orig - h;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error `|a - n| / max(|a| + |n|, floor)` over components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::{prop_assert, proptest};

    fn rng() -> RngHandle {
        RngHandle::new(42, 0)
    }

    fn random_input(n: usize, r: &mut RngHandle) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Direct re-evaluation with explicit loops.
    fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let sizes = net.sizes();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (ni, no) = (sizes[l], sizes[l + 1]);
            let p = net.params();
            let mut z = vec![0.0; no];
            for o in 0..no {
                let mut acc = p[off + ni * no + o];
                for i in 0..ni {
                    acc += p[off + o * ni + i] * a[i];
                }
                z[o] = if l + 2 < sizes.len() { acc.tanh() } else { acc };
            }
            off += ni * no + no;
            a = z;
        }
        a
    }

    #[test]
    fn zero_net_outputs_the_bias() {
        let mut net = Mlp::zeros(&[3, 4, 2]).unwrap();
        let n = net.n_params();
        net.params_mut()[n - 2] = 0.7;
        net.params_mut()[n - 1] = -1.5;
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.7, -1.5]);
    }

    #[test]
    fn identity_net_is_identity() {
        let net = Mlp::identity(4).unwrap();
        let x = vec![0.5, -2.0, 3.0, 0.0];
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut r = rng();
        let net = Mlp::new(&[5, 16, 16, 3], 1.0, &mut r).unwrap();
        for _ in 0..50 {
            let x = random_input(5, &mut r);
            let a = net.forward(&x).unwrap();
            let b = naive_forward(&net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(matches!(net.forward(&[1.0]), Err(NnError::Shape { expected: 5, got: 1 })));
    }

    #[test]
    fn linear_weight_grad_is_an_outer_product() {
        let mut r = rng();
        let net = Mlp::new(&[3, 2], 1.0, &mut r).unwrap();
        let x = Array::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let dy = Array::from_shape_vec((1, 2), vec![0.3, -0.7]).unwrap();
        let (g, dx) = net.backward(&cache, dy.view()).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g[o * 3 + i], dy[[0, o]] * x[[0, i]]);
            }
            assert_eq!(g[6 + o], dy[[0, o]]);
        }
        assert_eq!(dx.dim(), (1, 3));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut r = rng();
        let net = Mlp::new(&[2, 8, 2], 1.0, &mut r).unwrap();
        let x = Array::from_shape_vec((3, 2), random_input(6, &mut r)).unwrap();
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (g, dx) = net.backward(&cache, Array2::zeros((3, 2)).view()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn foreign_cache_is_rejected() {
        let mut r = rng();
        let a = Mlp::new(&[2, 8, 2], 1.0, &mut r).unwrap();
        let b = Mlp::new(&[3, 8, 2], 1.0, &mut r).unwrap();
        let x = Array2::zeros((1, 2));
        let (_, cache) = a.forward_batch(x.view()).unwrap();
        assert_eq!(b.backward(&cache, Array2::zeros((1, 2)).view()).unwrap_err(), NnError::Cache);
    }

    /// Loss `sum(c * y)` for a fixed random `c` drives a full backward pass.
    fn mlp_fd_error(sizes: &[usize], batch: usize, seed: u64) -> f64 {
        let mut r = RngHandle::new(seed, 0);
        let net = Mlp::new(sizes, 1.0, &mut r).unwrap();
        let x = Array::from_shape_vec((batch, sizes[0]), random_input(batch * sizes[0], &mut r)).unwrap();
        let out = *sizes.last().unwrap();
        let c = Array::from_shape_vec((batch, out), random_input(batch * out, &mut r)).unwrap();
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (g, dx) = net.backward(&cache, c.view()).unwrap();
        let loss = |p: &[f64]| {
            let n = Mlp::from_params(sizes, p.to_vec()).unwrap();
            (n.forward_batch(x.view()).unwrap().0 * &c).sum()
        };
        let num = numeric_gradient(net.params(), 1e-5, loss);
        let e1 = max_relative_error(&g, &num, 1e-6);
        let flat_x = x.as_slice().unwrap().to_vec();
        let num_x = numeric_gradient(&flat_x, 1e-5, |xv| {
            let xa = ArrayView2::from_shape((batch, sizes[0]), xv).unwrap();
            (net.forward_batch(xa).unwrap().0 * &c).sum()
        });
        let e2 = max_relative_error(dx.as_slice().unwrap(), &num_x, 1e-6);
        e1.max(e2)
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        assert!(mlp_fd_error(&[2, 16, 16, 2], 4, 1) < 1e-4);
    }

    #[test]
    fn logprob_at_the_mean_with_unit_std() {
        let net = Mlp::zeros(&[2, 3]).unwrap();
        let p = GaussianPolicy::from_parts(net, vec![0.0; 3]).unwrap();
        let (lp, _) = gaussian_logprob(&p, &[0.3, 0.1], &[0.0, 0.0, 0.0]).unwrap();
        assert!((lp + 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn logprob_is_translation_invariant() {
        let mu = [0.2, -0.4];
        let ls = [-0.3, 0.1];
        let a = [0.5, 0.0];
        let shift = 1.7;
        let mu2: Vec<f64> = mu.iter().map(|v| v + shift).collect();
        let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let d = diag_gaussian_logprob(&mu, &ls, &a) - diag_gaussian_logprob(&mu2, &ls, &a2);
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let mut r = rng();
        let p = GaussianPolicy::new(4, 3, &[16, 16], 0.3, &mut r).unwrap();
        // widen the mean head so the check is not dominated by the log-std terms
        let mut p = p;
        let mut flat = p.flat_params();
        for v in &mut flat {
            *v *= 3.0;
        }
        p.set_flat_params(&flat).unwrap();
        let obs = random_input(4, &mut r);
        let act = random_input(3, &mut r);
        let (_, g) = gaussian_logprob(&p, &obs, &act).unwrap();
        let num = numeric_gradient(&p.flat_params(), 1e-5, |v| {
            let mut q = p.clone();
            q.set_flat_params(v).unwrap();
            gaussian_logprob(&q, &obs, &act).unwrap().0
        });
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-4);
    }

    #[test]
    fn batch_logprob_gradient_matches_single_rows() {
        let mut r = rng();
        let p = GaussianPolicy::new(3, 2, &[8], 0.5, &mut r).unwrap();
        let obs = Array::from_shape_vec((4, 3), random_input(12, &mut r)).unwrap();
        let act = Array::from_shape_vec((4, 2), random_input(8, &mut r)).unwrap();
        let w = Array1::from(vec![0.5, -1.0, 2.0, 0.25]);
        let bl = batch_logprob(&p, obs.view(), act.view()).unwrap();
        let g = batch_logprob_grad(&p, &bl, act.view(), w.view(), 0.0).unwrap();
        let mut expect = vec![0.0; p.n_params()];
        for i in 0..4 {
            let (lp, gi) = gaussian_logprob(&p, &obs.row(i).to_vec(), &act.row(i).to_vec()).unwrap();
            assert!((lp - bl.logp[i]).abs() < 1e-12);
            for (e, v) in expect.iter_mut().zip(gi) {
                *e += w[i] * v;
            }
        }
        assert!(max_relative_error(&g, &expect, 1e-9) < 1e-10);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut r = rng();
        let net = Mlp::new(&[3, 16, 16, 2], 1.0, &mut r).unwrap();
        let x = Array::from_shape_vec((5, 3), random_input(15, &mut r)).unwrap();
        let y = Array::from_shape_vec((5, 2), random_input(10, &mut r)).unwrap();
        let (pred, cache) = net.forward_batch(x.view()).unwrap();
        let (_, dpred) = mse_loss(pred.view(), y.view());
        let (g, _) = net.backward(&cache, dpred.view()).unwrap();
        let num = numeric_gradient(net.params(), 1e-5, |p| {
            let n = Mlp::from_params(net.sizes(), p.to_vec()).unwrap();
            mse_loss(n.forward_batch(x.view()).unwrap().0.view(), y.view()).0
        });
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-4);
    }

    #[test]
    fn log_std_is_clamped() {
        let net = Mlp::zeros(&[1, 2]).unwrap();
        let p = GaussianPolicy::from_parts(net, vec![-9.0, 4.0]).unwrap();
        assert_eq!(p.log_std(), &[LOG_STD_MIN, LOG_STD_MAX]);
    }

    #[test]
    fn adam_basics() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3, 0.01);
        st.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        let mut st = AdamState::new(3, 0.01);
        st.step(&mut p, &[3.0, -0.2, 1e-3]).unwrap();
        for (v, (orig, sign)) in p.iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
            assert!((v - (orig - 0.01 * sign)).abs() < 1e-6);
        }
        assert!(st.step(&mut p, &[f64::NAN, 0.0, 0.0]).is_err());
        assert!(st.step(&mut p, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut r = rng();
            let mut p: Vec<f64> = random_input(10, &mut r);
            let mut st = AdamState::new(10, 0.05);
            for _ in 0..20 {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v + 0.1).collect();
                st.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_scales_to_the_max_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
        assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);
        let mut g = vec![0.1, 0.1];
        clip_grad_norm(&mut g, 0.5);
        assert_eq!(g, vec![0.1, 0.1]);
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn prop_outputs_are_finite_on_bounded_inputs(seed in 0u64..10_000, scale in 0.0f64..10.0) {
            let mut r = RngHandle::new(seed, 0);
            let p = GaussianPolicy::new(6, 3, &DEFAULT_HIDDEN, 0.1, &mut r).unwrap();
            let obs: Vec<f64> = (0..6).map(|_| r.random_range(-scale..=scale)).collect();
            let act: Vec<f64> = (0..3).map(|_| r.random_range(-10.0..10.0)).collect();
            let (lp, g) = gaussian_logprob(&p, &obs, &act).unwrap();
            prop_assert!(lp.is_finite());
            prop_assert!(g.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn prop_mlp_gradients_match(seed in 0u64..10_000) {
            prop_assert!(mlp_fd_error(&[3, 6, 2], 2, seed) < 1e-4);
        }
    }
}

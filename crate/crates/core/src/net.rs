//! Small tanh MLPs for the policy and value function.
//!
//! Parameters live in one flat [`ParamVector`]; each layer is stored as a
//! `fan_in x fan_out` row-major weight block followed by its bias. Gaussian
//! policies append a state-independent log-std block after the last layer.
//! Gradients are exact backpropagation over whole batches, with identical
//! observations folded into a single row so repeated grid states cost one
//! forward pass.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    SoftmaxDiscrete,
    TanhGaussianMean,
    LinearScalar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub head: Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub bias_len: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.bias_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, head: Head) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("layer_sizes", "need at least input and output sizes"));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::config("layer_sizes", "sizes must be positive"));
        }
        if head == Head::LinearScalar && *layer_sizes.last().unwrap() != 1 {
            return Err(Error::config("layer_sizes", "scalar head needs output size 1"));
        }
        Ok(Self { layer_sizes, head })
    }

    /// `input -> hidden... -> output` with the given head.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, head: Head) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, head)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layer_sizes
            .windows(2)
            .map(|w| LayerShape {
                rows: w[0],
                cols: w[1],
                bias_len: w[1],
            })
            .collect()
    }

    pub fn log_std_len(&self) -> usize {
        match self.head {
            Head::TanhGaussianMean => self.output_dim(),
            _ => 0,
        }
    }

    pub fn param_len(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum::<usize>() + self.log_std_len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub shapes: Vec<LayerShape>,
    pub log_std_len: usize,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_len()],
            shapes: spec.layer_shapes(),
            log_std_len: spec.log_std_len(),
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            values: vec![0.0; other.values.len()],
            shapes: other.shapes.clone(),
            log_std_len: other.log_std_len,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        self.shapes == spec.layer_shapes()
            && self.log_std_len == spec.log_std_len()
            && self.values.len() == spec.param_len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(LayerShape::len).sum()
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let s = self.shapes[layer];
        let off = self.layer_offset(layer);
        ArrayView2::from_shape((s.rows, s.cols), &self.values[off..off + s.rows * s.cols])
            .expect("layer shape")
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let off = self.layer_offset(layer) + s.rows * s.cols;
        &self.values[off..off + s.bias_len]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let off = self.layer_offset(layer);
        &mut self.values[off..off + s.rows * s.cols]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let off = self.layer_offset(layer) + s.rows * s.cols;
        &mut self.values[off..off + s.bias_len]
    }

    pub fn log_std(&self) -> &[f64] {
        &self.values[self.values.len() - self.log_std_len..]
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        &mut self.values[n - self.log_std_len..]
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Glorot-uniform weights, zero biases, zero log-std.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(spec);
    for (layer, shape) in spec.layer_shapes().iter().enumerate() {
        let limit = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
        for w in params.weights_mut(layer) {
            *w = rng.random_range(-limit..=limit);
        }
    }
    params
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyOutput {
    Discrete { probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl PolicyOutput {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            PolicyOutput::Discrete { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Action::Discrete(i);
                    }
                }
                Action::Discrete(probs.len() - 1)
            }
            PolicyOutput::Gaussian { mean, std } => {
                let normal = rand_distr::StandardNormal;
                Action::Continuous(
                    mean.iter()
                        .zip(std)
                        .map(|(m, s)| {
                            let z: f64 = rng.sample(normal);
                            m + s * z
                        })
                        .collect(),
                )
            }
        }
    }
}

pub fn log_prob(out: &PolicyOutput, action: &Action) -> Result<f64> {
    match (out, action) {
        (PolicyOutput::Discrete { probs }, Action::Discrete(a)) => {
            let p = probs.get(*a).ok_or(Error::ActionOutOfRange {
                action: *a,
                n_actions: probs.len(),
            })?;
            Ok(p.ln())
        }
        (PolicyOutput::Gaussian { mean, std }, Action::Continuous(a)) => {
            if a.len() != mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: mean.len(),
                    got: a.len(),
                });
            }
            Ok(gaussian_log_density(a, mean, std))
        }
        _ => Err(Error::ActionKindMismatch),
    }
}

fn gaussian_log_density(a: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(std)
        .map(|((a, m), s)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Post-activation values of every layer; the last entry holds the raw
/// (pre-head) output.
struct Activations {
    layers: Vec<Array2<f64>>,
}

fn forward_raw(params: &ParamVector, input: Array2<f64>) -> Activations {
    let n_layers = params.shapes.len();
    let mut layers = Vec::with_capacity(n_layers + 1);
    layers.push(input);
    for l in 0..n_layers {
        let mut z = layers[l].dot(&params.weights(l));
        let b = ndarray::ArrayView1::from(params.bias(l));
        z += &b;
        if l + 1 < n_layers {
            z.mapv_inplace(f64::tanh);
        }
        layers.push(z);
    }
    Activations { layers }
}

/// Backpropagates `d_out` (gradient w.r.t. the raw output) into a flat
/// gradient; the log-std block is left zero for the caller.
fn backward_raw(params: &ParamVector, acts: &Activations, d_out: Array2<f64>) -> ParamVector {
    let mut grad = ParamVector::zeros_like(params);
    let n_layers = params.shapes.len();
    let mut delta = d_out;
    for l in (0..n_layers).rev() {
        let a_prev = &acts.layers[l];
        let dw = a_prev.t().dot(&delta);
        // `iter` walks logical row-major order whatever the memory layout.
        for (dst, src) in grad.weights_mut(l).iter_mut().zip(dw.iter()) {
            *dst = *src;
        }
        let db = delta.sum_axis(Axis(0));
        for (dst, src) in grad.bias_mut(l).iter_mut().zip(db.iter()) {
            *dst = *src;
        }
        if l > 0 {
            let mut d_prev = delta.dot(&params.weights(l).t());
            // a_prev = tanh(z_prev)
            ndarray::Zip::from(&mut d_prev)
                .and(a_prev)
                .for_each(|d, &a| *d *= 1.0 - a * a);
            delta = d_prev;
        }
    }
    grad
}

fn check_params(params: &ParamVector, spec: &MlpSpec) -> Result<()> {
    if !params.matches(spec) {
        return Err(Error::DimensionMismatch {
            expected: spec.param_len(),
            got: params.len(),
        });
    }
    Ok(())
}

fn row_matrix(obs: &[f64], spec: &MlpSpec) -> Result<Array2<f64>> {
    if obs.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: obs.len(),
        });
    }
    Ok(Array2::from_shape_vec((1, obs.len()), obs.to_vec()).unwrap())
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn head_output(spec: &MlpSpec, params: &ParamVector, raw: &[f64]) -> PolicyOutput {
    match spec.head {
        Head::SoftmaxDiscrete => PolicyOutput::Discrete {
            probs: softmax_row(raw),
        },
        Head::TanhGaussianMean | Head::LinearScalar => PolicyOutput::Gaussian {
            mean: raw.iter().map(|z| z.tanh()).collect(),
            std: params.log_std().iter().map(|l| l.exp()).collect(),
        },
    }
}

pub fn forward_policy(params: &ParamVector, obs: &[f64], spec: &MlpSpec) -> Result<PolicyOutput> {
    check_params(params, spec)?;
    if spec.head == Head::LinearScalar {
        return Err(Error::config("head", "value head used as policy"));
    }
    let acts = forward_raw(params, row_matrix(obs, spec)?);
    let raw = acts.layers.last().unwrap().row(0).to_vec();
    Ok(head_output(spec, params, &raw))
}

pub fn forward_value(params: &ParamVector, obs: &[f64], spec: &MlpSpec) -> Result<f64> {
    check_params(params, spec)?;
    let acts = forward_raw(params, row_matrix(obs, spec)?);
    Ok(acts.layers.last().unwrap()[[0, 0]])
}

pub fn forward_value_batch(params: &ParamVector, obs: &[&[f64]], spec: &MlpSpec) -> Result<Vec<f64>> {
    let batch = ValueBatch::new(spec, obs.iter().copied(), obs.iter().map(|_| 0.0))?;
    batch.values(params)
}

/// Identical observation rows collapsed to one matrix row each.
#[derive(Clone, Debug)]
struct UniqueRows {
    rows: Array2<f64>,
    index: Vec<usize>,
}

impl UniqueRows {
    fn build<'a>(dim: usize, obs: impl Iterator<Item = &'a [f64]>) -> Result<Self> {
        let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut flat = Vec::new();
        let mut index = Vec::new();
        for o in obs {
            if o.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: o.len(),
                });
            }
            let key: Vec<u64> = o.iter().map(|v| v.to_bits()).collect();
            let next = lookup.len();
            let row = *lookup.entry(key).or_insert_with(|| {
                flat.extend_from_slice(o);
                next
            });
            index.push(row);
        }
        let n = lookup.len();
        Ok(Self {
            rows: Array2::from_shape_vec((n, dim), flat).unwrap(),
            index,
        })
    }
}

/// A fixed set of (observation, action) samples whose log-probabilities and
/// weighted log-probability gradients can be evaluated at any parameters.
#[derive(Clone, Debug)]
pub struct PolicyBatch {
    spec: MlpSpec,
    unique: UniqueRows,
    actions: Vec<Action>,
}

pub struct PolicyEval<'b> {
    batch: &'b PolicyBatch,
    acts: Activations,
    /// Softmax probabilities (discrete) or tanh means (gaussian), one row per unique obs.
    head: Array2<f64>,
    log_std: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyBatch {
    pub fn new<'a>(
        spec: &MlpSpec,
        obs: impl Iterator<Item = &'a [f64]>,
        actions: Vec<Action>,
    ) -> Result<Self> {
        let unique = UniqueRows::build(spec.input_dim(), obs)?;
        if unique.index.len() != actions.len() {
            return Err(Error::DimensionMismatch {
                expected: unique.index.len(),
                got: actions.len(),
            });
        }
        for a in &actions {
            match (spec.head, a) {
                (Head::SoftmaxDiscrete, Action::Discrete(i)) if *i < spec.output_dim() => {}
                (Head::SoftmaxDiscrete, Action::Discrete(i)) => {
                    return Err(Error::ActionOutOfRange {
                        action: *i,
                        n_actions: spec.output_dim(),
                    })
                }
                (Head::TanhGaussianMean, Action::Continuous(v)) if v.len() == spec.output_dim() => {}
                (Head::TanhGaussianMean, Action::Continuous(v)) => {
                    return Err(Error::DimensionMismatch {
                        expected: spec.output_dim(),
                        got: v.len(),
                    })
                }
                _ => return Err(Error::ActionKindMismatch),
            }
        }
        Ok(Self {
            spec: spec.clone(),
            unique,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn unique_rows(&self) -> usize {
        self.unique.rows.nrows()
    }

    pub fn evaluate(&self, params: &ParamVector) -> Result<PolicyEval<'_>> {
        check_params(params, &self.spec)?;
        let acts = forward_raw(params, self.unique.rows.clone());
        let raw = acts.layers.last().unwrap();
        let log_std = params.log_std().to_vec();
        let (head, log_probs) = match self.spec.head {
            Head::SoftmaxDiscrete => {
                let mut probs = raw.clone();
                for mut row in probs.rows_mut() {
                    let p = softmax_row(&row.to_vec());
                    row.assign(&ndarray::ArrayView1::from(&p));
                }
                let mut logz = Vec::with_capacity(raw.nrows());
                for row in raw.rows() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    logz.push(max + s.ln());
                }
                let lp = self
                    .unique
                    .index
                    .iter()
                    .zip(&self.actions)
                    .map(|(&r, a)| match a {
                        Action::Discrete(i) => raw[[r, *i]] - logz[r],
                        Action::Continuous(_) => unreachable!(),
                    })
                    .collect();
                (probs, lp)
            }
            Head::TanhGaussianMean => {
                let mean = raw.mapv(f64::tanh);
                let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
                let lp = self
                    .unique
                    .index
                    .iter()
                    .zip(&self.actions)
                    .map(|(&r, a)| match a {
                        Action::Continuous(v) => {
                            gaussian_log_density(v, &mean.row(r).to_vec(), &std)
                        }
                        Action::Discrete(_) => unreachable!(),
                    })
                    .collect();
                (mean, lp)
            }
            Head::LinearScalar => return Err(Error::config("head", "value head used as policy")),
        };
        Ok(PolicyEval {
            batch: self,
            acts,
            head,
            log_std,
            log_probs,
        })
    }
}

impl PolicyEval<'_> {
    /// Exact gradient of `(1/n) * sum_i weights[i] * log pi(a_i | s_i)`.
    pub fn grad(&self, params: &ParamVector, weights: &[f64]) -> Result<ParamVector> {
        let batch = self.batch;
        if weights.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                got: weights.len(),
            });
        }
        let n = batch.len() as f64;
        let out_dim = batch.spec.output_dim();
        let mut d_out = Array2::<f64>::zeros((batch.unique_rows(), out_dim));
        let mut d_log_std = vec![0.0; params.log_std_len];
        for ((&r, a), &w) in batch.unique.index.iter().zip(&batch.actions).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let c = w / n;
            match a {
                Action::Discrete(i) => {
                    // d log softmax_i / dz = onehot(i) - p
                    for k in 0..out_dim {
                        d_out[[r, k]] -= c * self.head[[r, k]];
                    }
                    d_out[[r, *i]] += c;
                }
                Action::Continuous(v) => {
                    for k in 0..out_dim {
                        let mu = self.head[[r, k]];
                        let var = (2.0 * self.log_std[k]).exp();
                        let diff = v[k] - mu;
                        d_out[[r, k]] += c * diff / var * (1.0 - mu * mu);
                        d_log_std[k] += c * (diff * diff / var - 1.0);
                    }
                }
            }
        }
        let mut grad = backward_raw(params, &self.acts, d_out);
        grad.log_std_mut().copy_from_slice(&d_log_std);
        Ok(grad)
    }
}

/// Exact gradient of `(1/|batch|) * sum weight * log pi(a|s)` over `(obs, action, weight)` triples.
pub fn weighted_logprob_grad(
    params: &ParamVector,
    batch: &[(Vec<f64>, Action, f64)],
    spec: &MlpSpec,
) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("gradient batch"));
    }
    let pb = PolicyBatch::new(
        spec,
        batch.iter().map(|(o, _, _)| o.as_slice()),
        batch.iter().map(|(_, a, _)| a.clone()).collect(),
    )?;
    let weights: Vec<f64> = batch.iter().map(|(_, _, w)| *w).collect();
    pb.evaluate(params)?.grad(params, &weights)
}

/// Observations paired with regression targets for the value network.
#[derive(Clone, Debug)]
pub struct ValueBatch {
    spec: MlpSpec,
    unique: UniqueRows,
    targets: Vec<f64>,
}

impl ValueBatch {
    pub fn new<'a>(
        spec: &MlpSpec,
        obs: impl Iterator<Item = &'a [f64]>,
        targets: impl Iterator<Item = f64>,
    ) -> Result<Self> {
        let unique = UniqueRows::build(spec.input_dim(), obs)?;
        let targets: Vec<f64> = targets.collect();
        if targets.len() != unique.index.len() {
            return Err(Error::DimensionMismatch {
                expected: unique.index.len(),
                got: targets.len(),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            unique,
            targets,
        })
    }

    pub fn values(&self, params: &ParamVector) -> Result<Vec<f64>> {
        check_params(params, &self.spec)?;
        let acts = forward_raw(params, self.unique.rows.clone());
        let out = acts.layers.last().unwrap();
        Ok(self.unique.index.iter().map(|&r| out[[r, 0]]).collect())
    }

    /// Mean squared error and its gradient.
    pub fn mse_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        check_params(params, &self.spec)?;
        let acts = forward_raw(params, self.unique.rows.clone());
        let out = acts.layers.last().unwrap();
        let n = self.targets.len() as f64;
        let mut d_out = Array2::<f64>::zeros((self.unique.rows.nrows(), 1));
        let mut loss = 0.0;
        for (&r, &t) in self.unique.index.iter().zip(&self.targets) {
            let e = out[[r, 0]] - t;
            loss += e * e;
            d_out[[r, 0]] += 2.0 * e / n;
        }
        Ok((loss / n, backward_raw(params, &acts, d_out)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &ParamVector) -> Self {
        Self::new(params.len())
    }
}

/// One Adam descent step on `params` along `grad`.
pub fn adam_step(params: &mut ParamVector, grad: &ParamVector, state: &mut AdamState, lr: f64) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .values
        .iter_mut()
        .zip(&grad.values)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Serialized network: spec, flat values and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub spec: MlpSpec,
    pub values: Vec<f64>,
    pub adam: AdamState,
}

impl NetCheckpoint {
    pub fn new(spec: &MlpSpec, params: &ParamVector, adam: &AdamState) -> Self {
        Self {
            spec: spec.clone(),
            values: params.values.clone(),
            adam: adam.clone(),
        }
    }

    pub fn params(&self) -> Result<ParamVector> {
        let mut p = ParamVector::zeros(&self.spec);
        if p.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: self.values.len(),
            });
        }
        p.values.copy_from_slice(&self.values);
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_policy() -> MlpSpec {
        MlpSpec::with_hidden(4, &[64, 64], 4, Head::SoftmaxDiscrete).unwrap()
    }

    #[test]
    fn param_count_for_default_grid_policy() {
        // 4*64+64 + 64*64+64 + 64*4+4
        assert_eq!(grid_policy().param_len(), 320 + 4160 + 260);
        assert_eq!(init_params(&grid_policy(), 0).len(), 4740);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = grid_policy();
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 8));
        for l in 0..a.shapes.len() {
            assert!(a.bias(l).iter().all(|&b| b == 0.0));
            let limit = (6.0 / (a.shapes[l].rows + a.shapes[l].cols) as f64).sqrt();
            assert!(a.weights(l).iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn zero_params_give_uniform_policy_and_zero_value() {
        let spec = grid_policy();
        let p = ParamVector::zeros(&spec);
        let out = forward_policy(&p, &[0.1, 0.2, 1.0, 0.0], &spec).unwrap();
        assert_eq!(
            out,
            PolicyOutput::Discrete {
                probs: vec![0.25; 4]
            }
        );
        assert_eq!(log_prob(&out, &Action::Discrete(2)).unwrap(), 0.25f64.ln());

        let vspec = MlpSpec::with_hidden(4, &[64, 64], 1, Head::LinearScalar).unwrap();
        let v = forward_value(&ParamVector::zeros(&vspec), &[0.3, 0.1, 0.0, 1.0], &vspec).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn hand_evaluated_two_action_policy() {
        // 1 input -> 1 hidden (tanh) -> 2 logits
        let spec = MlpSpec::new(vec![1, 1, 2], Head::SoftmaxDiscrete).unwrap();
        let mut p = ParamVector::zeros(&spec);
        p.weights_mut(0)[0] = 2.0;
        p.bias_mut(0)[0] = -0.5;
        p.weights_mut(1).copy_from_slice(&[1.5, -1.0]);
        p.bias_mut(1).copy_from_slice(&[0.2, 0.0]);
        let x = 0.7;
        let h = (2.0f64 * x - 0.5).tanh();
        let z0 = 1.5 * h + 0.2;
        let z1 = -h;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        match forward_policy(&p, &[x], &spec).unwrap() {
            PolicyOutput::Discrete { probs } => {
                assert!((probs[0] - p0).abs() < 1e-15);
                assert!((probs[1] - (1.0 - p0)).abs() < 1e-15);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn hand_evaluated_value_net() {
        let spec = MlpSpec::new(vec![2, 1, 1], Head::LinearScalar).unwrap();
        let mut p = ParamVector::zeros(&spec);
        p.weights_mut(0).copy_from_slice(&[0.5, -0.25]);
        p.bias_mut(0)[0] = 0.1;
        p.weights_mut(1)[0] = 3.0;
        p.bias_mut(1)[0] = -1.0;
        let expected = 3.0 * (0.5f64 * 0.4 - 0.25 * 0.8 + 0.1).tanh() - 1.0;
        let got = forward_value(&p, &[0.4, 0.8], &spec).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn batched_value_matches_single_calls() {
        let spec = MlpSpec::with_hidden(3, &[8, 8], 1, Head::LinearScalar).unwrap();
        let p = init_params(&spec, 3);
        let obs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.1, 0.5, -(i as f64) * 0.05]).collect();
        let refs: Vec<&[f64]> = obs.iter().map(|o| o.as_slice()).collect();
        let batched = forward_value_batch(&p, &refs, &spec).unwrap();
        for (o, b) in obs.iter().zip(batched) {
            assert!((forward_value(&p, o, &spec).unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_log_prob_closed_form() {
        let out = PolicyOutput::Gaussian {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        let lp = log_prob(&out, &Action::Continuous(vec![0.0, 0.0])).unwrap();
        assert!((lp - 2.0 * (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-14);

        let out = PolicyOutput::Gaussian {
            mean: vec![0.3],
            std: vec![0.5],
        };
        let lp = log_prob(&out, &Action::Continuous(vec![0.1])).unwrap();
        // N(0.1; 0.3, 0.5^2): -0.5*(0.4)^2 - ln 0.5 - 0.5 ln 2pi
        let expected = -0.08 - 0.5f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-14);
    }

    #[test]
    fn errors_on_bad_dimensions_and_actions() {
        let spec = grid_policy();
        let p = ParamVector::zeros(&spec);
        assert!(matches!(
            forward_policy(&p, &[0.0; 3], &spec),
            Err(Error::DimensionMismatch { .. })
        ));
        let out = forward_policy(&p, &[0.0; 4], &spec).unwrap();
        assert!(matches!(
            log_prob(&out, &Action::Discrete(4)),
            Err(Error::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let spec = grid_policy();
        let p = init_params(&spec, 1);
        let batch = vec![
            (vec![0.1, 0.2, 0.0, 0.0], Action::Discrete(1), 0.0),
            (vec![0.3, 0.2, 1.0, 0.0], Action::Discrete(3), 0.0),
        ];
        let g = weighted_logprob_grad(&p, &batch, &spec).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_gradient_equals_single() {
        let spec = MlpSpec::with_hidden(4, &[16, 16], 4, Head::SoftmaxDiscrete).unwrap();
        let p = init_params(&spec, 2);
        let s = (vec![0.1, 0.7, 1.0, 0.0], Action::Discrete(2), 1.0);
        let single = weighted_logprob_grad(&p, std::slice::from_ref(&s), &spec).unwrap();
        let many = weighted_logprob_grad(&p, &vec![s; 5], &spec).unwrap();
        for (a, b) in single.values.iter().zip(&many.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let spec = MlpSpec::new(vec![1, 1], Head::LinearScalar).unwrap();
        let mut p = ParamVector::zeros(&spec);
        p.values = vec![0.5, 0.0];
        let mut st = AdamState::for_params(&p);
        let zero = ParamVector::zeros_like(&p);
        adam_step(&mut p, &zero, &mut st, 0.1).unwrap();
        assert_eq!(p.values, vec![0.5, 0.0]);
        assert_eq!(st.step, 1);

        let mut p = ParamVector::zeros(&spec);
        p.values = vec![1.0, 0.0];
        let mut st = AdamState::for_params(&p);
        let mut g = ParamVector::zeros_like(&p);
        g.values = vec![1.0, 0.0];
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        assert!((p.values[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let spec = MlpSpec::new(vec![1, 1], Head::LinearScalar).unwrap();
        let mut p = ParamVector::zeros(&spec);
        let mut st = AdamState::for_params(&p);
        let mut g = ParamVector::zeros_like(&p);
        g.values[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn adam_two_steps_equal_sequential_calls() {
        let spec = MlpSpec::new(vec![2, 1], Head::LinearScalar).unwrap();
        let mut g = ParamVector::zeros(&spec);
        g.values = vec![0.3, -1.2, 0.05];
        let mut p1 = ParamVector::zeros(&spec);
        let mut s1 = AdamState::for_params(&p1);
        adam_step(&mut p1, &g, &mut s1, 0.01).unwrap();
        adam_step(&mut p1, &g, &mut s1, 0.01).unwrap();

        let mut p2 = ParamVector::zeros(&spec);
        let mut s2 = AdamState::for_params(&p2);
        for _ in 0..2 {
            let (np, ns) = {
                let mut np = p2.clone();
                let mut ns = s2.clone();
                adam_step(&mut np, &g, &mut ns, 0.01).unwrap();
                (np, ns)
            };
            p2 = np;
            s2 = ns;
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
        assert_eq!(s1.step, 2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = MlpSpec::with_hidden(2, &[8], 1, Head::TanhGaussianMean).unwrap();
        let mut p = init_params(&spec, 9);
        p.log_std_mut()[0] = 0.65f64.ln();
        let mut st = AdamState::for_params(&p);
        let mut g = ParamVector::zeros_like(&p);
        g.values.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin() / 3.0);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let ck = NetCheckpoint::new(&spec, &p, &st);
        let text = serde_json::to_string(&ck).unwrap();
        let back: NetCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.values.iter().zip(&p.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.params().unwrap(), p);
    }
}

//! Learned state features `phi(s)` and the linear reward head.
//!
//! The feature network is a small MLP with hand-written forward and backward
//! passes. Hidden layers use the configured activation and the output layer
//! is linear. Parameters are addressed through one flat vector, laid out
//! layer by layer as the row-major weight followed by the bias.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    /// Second derivative expressed through the activation output `y`.
    pub fn second_deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * y * (1.0 - y * y),
            Activation::Linear => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InputEncoding {
    OneHot,
    /// `(x, y)` rescaled to `[-1, 1]`.
    #[default]
    Coordinates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Activations recorded by [`Mlp::forward`]: the input of every layer and
/// the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for weights
    /// and biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-bound..bound)),
                    bias: Array1::from_shape_fn(w[1], |_| rng.gen_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.bias.to_vec();
            for (o, row) in out.iter_mut().zip(layer.weight.rows()) {
                *o += row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
            }
            if l < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        MlpCache { inputs, output: h }
    }

    /// Gradient of `upstream . output` with respect to the flat parameters,
    /// added into `grad`, and with respect to the input (returned).
    pub fn backward_into(&self, cache: &MlpCache, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut delta = upstream.to_vec();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.n_params();
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let base = offsets[l];
            let n_in = input.len();
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + i * n_in..base + (i + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let bias_base = base + layer.weight.len();
            for (i, &d) in delta.iter().enumerate() {
                grad[bias_base + i] += d;
            }
            let mut back = vec![0.0; n_in];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (b, w) in back.iter_mut().zip(layer.weight.row(i)) {
                    *b += w * d;
                }
            }
            if l > 0 {
                for (b, &y) in back.iter_mut().zip(input) {
                    *b *= self.activation.deriv_from_output(y);
                }
            }
            delta = back;
        }
        delta
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// Offset of every layer's weight block in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            out.push(off);
            off += l.n_params();
        }
        out
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::InvalidInput("network needs an input and an output size".into()));
    }
    if sizes[0] == 0 || sizes[1..sizes.len() - 1].contains(&0) {
        return Err(Error::InvalidInput(format!("layer sizes {sizes:?} must be positive")));
    }
    Ok(())
}

/// Maps state (or state-action) indices to network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encoder {
    pub encoding: InputEncoding,
    pub width: usize,
    pub height: usize,
    /// When set, inputs are `(state, action)` pairs and the action is
    /// appended as a one-hot block.
    #[serde(default)]
    pub n_actions: Option<usize>,
}

impl Encoder {
    pub fn states(encoding: InputEncoding, width: usize, height: usize) -> Self {
        Self {
            encoding,
            width,
            height,
            n_actions: None,
        }
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    /// Number of distinct items: states, or state-action pairs.
    pub fn n_items(&self) -> usize {
        self.n_states() * self.n_actions.unwrap_or(1)
    }

    pub fn state_dim(&self) -> usize {
        match self.encoding {
            InputEncoding::OneHot => self.n_states(),
            InputEncoding::Coordinates => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.n_actions.unwrap_or(0)
    }

    pub fn encode_state(&self, s: usize, out: &mut Vec<f64>) {
        match self.encoding {
            InputEncoding::OneHot => {
                let start = out.len();
                out.resize(start + self.n_states(), 0.0);
                out[start + s] = 1.0;
            }
            InputEncoding::Coordinates => {
                let scale = |v: usize, n: usize| {
                    if n > 1 {
                        2.0 * v as f64 / (n - 1) as f64 - 1.0
                    } else {
                        0.0
                    }
                };
                out.push(scale(s % self.width, self.width));
                out.push(scale(s / self.width, self.height));
            }
        }
    }

    pub fn encode(&self, item: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.input_dim());
        match self.n_actions {
            None => self.encode_state(item, &mut out),
            Some(n_a) => {
                self.encode_state(item / n_a, &mut out);
                let start = out.len();
                out.resize(start + n_a, 0.0);
                out[start + item % n_a] = 1.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub encoding: InputEncoding,
}

fn default_hidden() -> Vec<usize> {
    vec![1]
}

fn default_output_dim() -> usize {
    1
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            output_dim: default_output_dim(),
            activation: Activation::default(),
            encoding: InputEncoding::default(),
        }
    }
}

/// An MLP over encoded items with a per-item forward cache.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub mlp: Mlp,
    pub encoder: Encoder,
    caches: Vec<Option<MlpCache>>,
}

impl PartialEq for FeatureNet {
    fn eq(&self, other: &Self) -> bool {
        self.mlp == other.mlp && self.encoder == other.encoder
    }
}

impl FeatureNet {
    pub fn new(encoder: Encoder, cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut sizes = vec![encoder.input_dim()];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.output_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_mlp(encoder, Mlp::new(&sizes, cfg.activation, &mut rng)?))
    }

    pub fn from_mlp(encoder: Encoder, mlp: Mlp) -> Self {
        let n = encoder.n_items();
        Self {
            mlp,
            encoder,
            caches: vec![None; n],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn n_items(&self) -> usize {
        self.encoder.n_items()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.n_items() {
            return Err(Error::InvalidInput(format!("index {item} out of range 0..{}", self.n_items())));
        }
        Ok(())
    }

    /// Evaluates and caches activations for `backward`.
    pub fn forward(&mut self, item: usize) -> Result<Vec<f64>> {
        self.check_item(item)?;
        let cache = self.mlp.forward(&self.encoder.encode(item));
        let out = cache.output.clone();
        self.caches[item] = Some(cache);
        Ok(out)
    }

    /// Evaluates without touching the cache.
    pub fn eval(&self, item: usize) -> Result<Vec<f64>> {
        self.check_item(item)?;
        Ok(self.mlp.forward(&self.encoder.encode(item)).output)
    }

    /// Forward pass over every item; row `i` is the output for item `i`.
    pub fn forward_all(&mut self) -> Array2<f64> {
        let n = self.n_items();
        let mut out = Array2::zeros((n, self.output_dim()));
        for i in 0..n {
            let cache = self.mlp.forward(&self.encoder.encode(i));
            out.row_mut(i).assign(&Array1::from_vec(cache.output.clone()));
            self.caches[i] = Some(cache);
        }
        out
    }

    pub fn eval_all(&self) -> Array2<f64> {
        let n = self.n_items();
        let mut out = Array2::zeros((n, self.output_dim()));
        for i in 0..n {
            out.row_mut(i)
                .assign(&Array1::from_vec(self.mlp.forward(&self.encoder.encode(i)).output));
        }
        out
    }

    pub fn clear_cache(&mut self) {
        self.caches.iter_mut().for_each(|c| *c = None);
    }

    pub fn cache(&self, item: usize) -> Option<&MlpCache> {
        self.caches.get(item).and_then(Option::as_ref)
    }

    /// Parameter gradient of `upstream . phi(item)`.
    pub fn backward(&self, item: usize, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.n_params()];
        self.backward_into(item, upstream, &mut grad)?;
        Ok(grad)
    }

    pub fn backward_into(&self, item: usize, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_item(item)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::InvalidInput(format!(
                "upstream has length {}, expected {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let cache = self.caches[item]
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("backward called for item {item} without a cached forward pass")))?;
        self.mlp.backward_into(cache, upstream, grad);
        Ok(())
    }

    /// Sums `backward` over all items with a nonzero upstream row.
    pub fn backward_table(&self, upstream: &Array2<f64>) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.n_params()];
        for (i, row) in upstream.rows().into_iter().enumerate() {
            if row.iter().all(|&u| u == 0.0) {
                continue;
            }
            self.backward_into(i, row.as_slice().unwrap(), &mut grad)?;
        }
        Ok(grad)
    }

    pub fn params(&self) -> Vec<f64> {
        self.mlp.params()
    }

    /// Replaces the parameters and drops stale caches.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.mlp.set_params(params)?;
        self.clear_cache();
        Ok(())
    }
}

/// `r(s) = psi . phi(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: FeatureNet,
    pub head: Vec<f64>,
}

impl RewardModel {
    pub fn new(encoder: Encoder, cfg: &NetConfig, seed: u64) -> Result<Self> {
        if encoder.n_actions.is_some() {
            return Err(Error::InvalidInput("reward model features are state-only".into()));
        }
        let net = FeatureNet::new(encoder, cfg, seed)?;
        let head = vec![1.0; net.output_dim()];
        Ok(Self { net, head })
    }

    pub fn n_states(&self) -> usize {
        self.net.n_items()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.len()
    }

    pub fn state_rewards(&self) -> Vec<f64> {
        let phi = self.net.eval_all();
        phi.rows()
            .into_iter()
            .map(|row| row.iter().zip(&self.head).map(|(f, h)| f * h).sum())
            .collect()
    }

    /// Network parameters followed by the head.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params();
        p.extend(&self.head);
        p
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.head.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.net.n_params();
        if params.len() != n + self.head.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                n + self.head.len(),
                params.len()
            )));
        }
        self.net.set_params(&params[..n])?;
        self.head.copy_from_slice(&params[n..]);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_net("reward-model", &self.net);
        c.tensors.push(NamedTensor {
            name: "head".into(),
            shape: vec![self.head.len()],
            data: self.head.clone(),
        });
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("reward-model")?;
        let net = c.to_net()?;
        let head = c.tensor("head", &[net.output_dim()])?.to_vec();
        Ok(Self { net, head })
    }
}

/// Anything that yields a reward table over `(state, action)`.
pub trait RewardFunction {
    fn reward_table(&self, mdp: &TabularMdp) -> Result<Array2<f64>>;
}

impl RewardFunction for RewardModel {
    fn reward_table(&self, mdp: &TabularMdp) -> Result<Array2<f64>> {
        state_table(mdp, &self.state_rewards())
    }
}

impl RewardFunction for [f64] {
    fn reward_table(&self, mdp: &TabularMdp) -> Result<Array2<f64>> {
        state_table(mdp, self)
    }
}

impl RewardFunction for Vec<f64> {
    fn reward_table(&self, mdp: &TabularMdp) -> Result<Array2<f64>> {
        state_table(mdp, self)
    }
}

impl RewardFunction for Array2<f64> {
    fn reward_table(&self, mdp: &TabularMdp) -> Result<Array2<f64>> {
        if self.dim() != (mdp.n_states(), mdp.n_actions()) {
            return Err(Error::InvalidInput(format!("reward table has shape {:?}", self.dim())));
        }
        Ok(self.clone())
    }
}

fn state_table(mdp: &TabularMdp, r: &[f64]) -> Result<Array2<f64>> {
    if r.len() != mdp.n_states() {
        return Err(Error::InvalidInput(format!(
            "reward has {} entries, expected {}",
            r.len(),
            mdp.n_states()
        )));
    }
    Ok(Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, _)| r[s]))
}

/// RMSProp accumulator. The update is `p -= lr * g / (sqrt(v) + eps)` with
/// `v <- decay * v + (1 - decay) * g^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub sq_avg: Vec<f64>,
}

pub const DEFAULT_LR: f64 = 1e-3;

impl RmsProp {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            decay: 0.99,
            eps: 1e-8,
            sq_avg: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        rmsprop_step(params, grads, &mut self.sq_avg, self.lr, self.decay, self.eps);
    }
}

pub fn rmsprop_step(params: &mut [f64], grads: &[f64], sq_avg: &mut [f64], lr: f64, decay: f64, eps: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), sq_avg.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(sq_avg.iter_mut()) {
        *v = decay * *v + (1.0 - decay) * g * g;
        if g != 0.0 {
            *p -= lr * g / (v.sqrt() + eps);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: a list of named tensors with shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub activation: Activation,
    pub encoder: Encoder,
    pub tensors: Vec<NamedTensor>,
    /// Method label and regularization weight of the run that produced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl Checkpoint {
    pub fn from_net(kind: &str, net: &FeatureNet) -> Self {
        let mut tensors = Vec::new();
        for (i, l) in net.mlp.layers.iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("layer{i}.weight"),
                shape: vec![l.weight.nrows(), l.weight.ncols()],
                data: l.weight.iter().copied().collect(),
            });
            tensors.push(NamedTensor {
                name: format!("layer{i}.bias"),
                shape: vec![l.bias.len()],
                data: l.bias.to_vec(),
            });
        }
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.into(),
            activation: net.mlp.activation,
            encoder: net.encoder,
            tensors,
            label: None,
            lambda: None,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::InvalidInput(format!("checkpoint holds a {}, expected a {kind}", self.kind)));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint has no tensor '{name}'")))?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidInput(format!(
                "tensor '{name}' has shape {:?} with {} values, expected {shape:?}",
                t.shape,
                t.data.len()
            )));
        }
        Ok(&t.data)
    }

    pub fn to_net(&self) -> Result<FeatureNet> {
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut layers = Vec::new();
        let mut expected_in = self.encoder.input_dim();
        for i in 0.. {
            let Some(w) = by_name.get(format!("layer{i}.weight").as_str()) else {
                break;
            };
            if w.shape.len() != 2 || w.shape[1] != expected_in {
                return Err(Error::InvalidInput(format!("layer {i} weight has shape {:?}", w.shape)));
            }
            let weight = self.tensor(&w.name, &w.shape.clone())?;
            let bias = self.tensor(&format!("layer{i}.bias"), &[w.shape[0]])?;
            layers.push(Layer {
                weight: Array2::from_shape_vec((w.shape[0], w.shape[1]), weight.to_vec())
                    .map_err(|e| Error::InvalidInput(e.to_string()))?,
                bias: Array1::from_vec(bias.to_vec()),
            });
            expected_in = w.shape[0];
        }
        if layers.is_empty() {
            return Err(Error::InvalidInput("checkpoint has no layers".into()));
        }
        Ok(FeatureNet::from_mlp(
            self.encoder,
            Mlp {
                layers,
                activation: self.activation,
            },
        ))
    }
}

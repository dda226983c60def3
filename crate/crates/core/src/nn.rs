//! Tanh multilayer perceptrons, the Gaussian policy, the value function,
//! Adam, and the versioned checkpoint container.
//!
//! Every network has two evaluation paths: a plain `ndarray` forward pass for
//! rollouts, and a tape-traced pass that exposes weights as leaves so the
//! training losses can be differentiated.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{CcdError, Result};
use crate::seed::Rng;
use crate::vehicle::{DesignBounds, Observation, SuspensionDesign, ACT_DIM, OBS_DIM};

/// Network input: two normalised design variables followed by the scaled observation.
pub const INPUT_DIM: usize = 2 + OBS_DIM;

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpConfig {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self { input, hidden: hidden.to_vec(), output }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

/// Fully connected network: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(cfg: &MlpConfig, rng: &mut Rng) -> Self {
        let widths = cfg.widths();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)));
            biases.push(Array2::zeros((1, fan_out)));
        }
        Self { weights, biases }
    }

    /// Every weight set to `weight` and every bias to `bias`.
    pub fn constant(cfg: &MlpConfig, weight: f64, bias: f64) -> Self {
        let widths = cfg.widths();
        let weights = widths.windows(2).map(|p| Array2::from_elem((p[0], p[1]), weight)).collect();
        let biases = widths[1..].iter().map(|&n| Array2::from_elem((1, n), bias)).collect();
        Self { weights, biases }
    }

    pub fn config(&self) -> MlpConfig {
        let hidden = self.weights[..self.weights.len() - 1].iter().map(|w| w.ncols()).collect();
        MlpConfig { input: self.weights[0].nrows(), hidden, output: self.weights.last().expect("layers").ncols() }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("layers").ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(CcdError::Shape(format!("network expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        let last = self.weights.len() - 1;
        let mut h = x.dot(&self.weights[0]) + &self.biases[0];
        for l in 1..=last {
            h.mapv_inplace(f64::tanh);
            h = h.dot(&self.weights[l]) + &self.biases[l];
        }
        Ok(h)
    }

    /// Register all parameters as tape leaves.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> MlpVars<'t> {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Parameters in the canonical order `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.dim()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn push_tensors(&self, prefix: &str, out: &mut Vec<(String, Array2<f64>)>) {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.w{l}"), w.clone()));
            out.push((format!("{prefix}.b{l}"), b.clone()));
        }
    }

    fn from_tensors(ck: &Checkpoint, prefix: &str, layers: usize) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layers {
            weights.push(ck.tensor(&format!("{prefix}.w{l}"))?.clone());
            biases.push(ck.tensor(&format!("{prefix}.b{l}"))?.clone());
        }
        Ok(Self { weights, biases })
    }
}

/// Tape leaves of one network.
#[derive(Debug, Clone)]
pub struct MlpVars<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

impl<'t> MlpVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        let last = self.weights.len() - 1;
        let mut h = x.matmul(self.weights[0]) + self.biases[0];
        for l in 1..=last {
            h = h.tanh().matmul(self.weights[l]) + self.biases[l];
        }
        h
    }

    /// Leaves in the same order as [`Mlp::params`].
    pub fn all(&self) -> Vec<Var<'t>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn grads(&self, g: &Gradients) -> Vec<Array2<f64>> {
        self.all().into_iter().map(|v| g.wrt(v)).collect()
    }
}

/// Maps a design and an observation to the 13-wide network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encoder {
    /// Design variables are divided by these (the bound midpoints).
    pub design_scale: [f64; 2],
    /// Observation channels are divided by these.
    pub obs_scale: [f64; OBS_DIM],
}

impl Encoder {
    pub fn new(bounds: &DesignBounds, obs_scale: [f64; OBS_DIM]) -> Result<Self> {
        if obs_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(CcdError::invalid("observation scales must be positive"));
        }
        let mid = bounds.midpoint();
        Ok(Self { design_scale: [mid.k_s, mid.c_s], obs_scale })
    }

    /// Per-channel scale from sample standard deviations, with a floor
    /// relative to the largest channel so silent channels stay finite.
    pub fn fit(bounds: &DesignBounds, observations: &[Observation]) -> Result<Self> {
        if observations.is_empty() {
            return Err(CcdError::invalid("cannot fit an encoder on no observations"));
        }
        let n = observations.len() as f64;
        let mut scale = [0.0; OBS_DIM];
        for (j, s) in scale.iter_mut().enumerate() {
            let mean = observations.iter().map(|o| o.0[j]).sum::<f64>() / n;
            *s = (observations.iter().map(|o| (o.0[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        }
        let top = scale.iter().cloned().fold(0.0, f64::max);
        let floor = if top > 0.0 { 1e-3 * top } else { 1.0 };
        Self::new(bounds, scale.map(|s| s.max(floor)))
    }

    pub fn design_features(&self, d: &SuspensionDesign) -> [f64; 2] {
        [d.k_s / self.design_scale[0], d.c_s / self.design_scale[1]]
    }

    pub fn design_from_features(&self, f: [f64; 2]) -> SuspensionDesign {
        SuspensionDesign::new(f[0] * self.design_scale[0], f[1] * self.design_scale[1])
    }

    pub fn encode(&self, d: &SuspensionDesign, obs: &Observation) -> [f64; INPUT_DIM] {
        let f = self.design_features(d);
        std::array::from_fn(|j| if j < 2 { f[j] } else { obs.0[j - 2] / self.obs_scale[j - 2] })
    }

    pub fn encode_row(&self, d: &SuspensionDesign, obs: &Observation) -> Array2<f64> {
        Array2::from_shape_vec((1, INPUT_DIM), self.encode(d, obs).to_vec()).expect("row shape")
    }

    /// Traced input: `features` is a `1 x 2` node, `obs` an `n x 11` node.
    pub fn encode_var<'t>(&self, features: Var<'t>, obs: Var<'t>) -> Var<'t> {
        let tape = obs.tape();
        let n = obs.shape().0;
        let inv = Array2::from_shape_fn((1, OBS_DIM), |(_, j)| 1.0 / self.obs_scale[j]);
        let scaled = obs * tape.leaf(inv);
        Var::concat(&[features.broadcast_rows(n), scaled])
    }
}

/// Diagonal Gaussian policy conditioned on design and observation.
///
/// `mean = action_scale * mean_net(x)`, `std = std_scale * softplus(std_net(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub std: Mlp,
    pub action_scale: f64,
    pub std_scale: f64,
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s;
            -(s.ln() + LOG_SQRT_2PI + 0.5 * z * z)
        })
        .sum()
}

impl GaussianPolicy {
    /// Random mean network; std network with zero weights and bias `std_bias`.
    pub fn new(hidden: &[usize], action_scale: f64, std_scale: f64, std_bias: f64, rng: &mut Rng) -> Self {
        let cfg = MlpConfig::new(INPUT_DIM, hidden, ACT_DIM);
        Self { mean: Mlp::new(&cfg, rng), std: Mlp::constant(&cfg, 0.0, std_bias), action_scale, std_scale }
    }

    pub fn mean_std(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mean = self.mean.forward(input)? * self.action_scale;
        let std = self.std.forward(input)?.mapv(|v| self.std_scale * crate::autodiff::softplus(v));
        Ok((mean, std))
    }

    /// Mean action for one encoded input.
    pub fn deterministic(&self, input: &[f64; INPUT_DIM]) -> [f64; ACT_DIM] {
        let row = Array2::from_shape_vec((1, INPUT_DIM), input.to_vec()).expect("row");
        let m = self.mean.forward(&row).expect("width checked by type") * self.action_scale;
        std::array::from_fn(|i| m[(0, i)])
    }

    /// Sample an action and its log-density.
    pub fn sample(&self, input: &[f64; INPUT_DIM], rng: &mut Rng) -> ([f64; ACT_DIM], f64) {
        let row = Array2::from_shape_vec((1, INPUT_DIM), input.to_vec()).expect("row");
        let (m, s) = self.mean_std(&row).expect("width checked by type");
        let mean: [f64; ACT_DIM] = std::array::from_fn(|i| m[(0, i)]);
        let std: [f64; ACT_DIM] = std::array::from_fn(|i| s[(0, i)]);
        let action: [f64; ACT_DIM] = std::array::from_fn(|i| {
            let z: f64 = StandardNormal.sample(rng);
            mean[i] + std[i] * z
        });
        (action, gaussian_log_prob(&mean, &std, &action))
    }

    pub fn log_prob(&self, input: &[f64; INPUT_DIM], action: &[f64; ACT_DIM]) -> f64 {
        let row = Array2::from_shape_vec((1, INPUT_DIM), input.to_vec()).expect("row");
        let (m, s) = self.mean_std(&row).expect("width checked by type");
        gaussian_log_prob(m.row(0).as_slice().expect("contiguous"), s.row(0).as_slice().expect("contiguous"), action)
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> PolicyVars<'t> {
        PolicyVars { mean: self.mean.leaves(tape), std: self.std.leaves(tape), action_scale: self.action_scale, std_scale: self.std_scale }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.mean.params_mut();
        p.extend(self.std.params_mut());
        p
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s = self.mean.shapes();
        s.extend(self.std.shapes());
        s
    }

    pub fn push_tensors(&self, prefix: &str, out: &mut Vec<(String, Array2<f64>)>) {
        self.mean.push_tensors(&format!("{prefix}.mean"), out);
        self.std.push_tensors(&format!("{prefix}.std"), out);
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "mean": self.mean.config(),
            "std": self.std.config(),
            "action_scale": self.action_scale,
            "std_scale": self.std_scale,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, meta: &serde_json::Value) -> Result<Self> {
        let layers = |key: &str| -> Result<usize> {
            let cfg: MlpConfig = serde_json::from_value(meta[key].clone())?;
            Ok(cfg.hidden.len() + 1)
        };
        let num = |key: &str| meta[key].as_f64().ok_or_else(|| CcdError::Format { path: "checkpoint".into(), reason: format!("missing {key}") });
        Ok(Self {
            mean: Mlp::from_tensors(ck, &format!("{prefix}.mean"), layers("mean")?)?,
            std: Mlp::from_tensors(ck, &format!("{prefix}.std"), layers("std")?)?,
            action_scale: num("action_scale")?,
            std_scale: num("std_scale")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PolicyVars<'t> {
    pub mean: MlpVars<'t>,
    pub std: MlpVars<'t>,
    pub action_scale: f64,
    pub std_scale: f64,
}

impl<'t> PolicyVars<'t> {
    pub fn mean_std(&self, input: Var<'t>) -> (Var<'t>, Var<'t>) {
        (self.mean.forward(input) * self.action_scale, self.std.forward(input).softplus() * self.std_scale)
    }

    /// Per-row log-density (`n x 1`) of `actions` (`n x 4`).
    pub fn log_prob(&self, input: Var<'t>, actions: Var<'t>) -> Var<'t> {
        let (mean, std) = self.mean_std(input);
        let z = (actions - mean) / std;
        let per = std.ln() + z.square() * 0.5 + LOG_SQRT_2PI;
        -per.sum_cols()
    }

    pub fn all(&self) -> Vec<Var<'t>> {
        let mut v = self.mean.all();
        v.extend(self.std.all());
        v
    }
}

/// Scalar state-value estimate, `output_scale * net(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFn {
    pub net: Mlp,
    pub output_scale: f64,
}

impl ValueFn {
    pub fn new(hidden: &[usize], output_scale: f64, rng: &mut Rng) -> Self {
        Self { net: Mlp::new(&MlpConfig::new(INPUT_DIM, hidden, 1), rng), output_scale }
    }

    pub fn value(&self, input: &[f64; INPUT_DIM]) -> f64 {
        let row = Array2::from_shape_vec((1, INPUT_DIM), input.to_vec()).expect("row");
        self.net.forward(&row).expect("width checked by type")[(0, 0)] * self.output_scale
    }

    pub fn values(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward(inputs)?.column(0).iter().map(|v| v * self.output_scale).collect())
    }

    /// Change the output scale without changing predictions.
    pub fn rescale(&mut self, new_scale: f64) {
        if new_scale > 0.0 && new_scale.is_finite() && self.output_scale > 0.0 {
            let ratio = self.output_scale / new_scale;
            let last = self.net.weights.len() - 1;
            self.net.weights[last].mapv_inplace(|w| w * ratio);
            self.net.biases[last].mapv_inplace(|b| b * ratio);
            self.output_scale = new_scale;
        }
    }

    pub fn push_tensors(&self, prefix: &str, out: &mut Vec<(String, Array2<f64>)>) {
        self.net.push_tensors(prefix, out);
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "net": self.net.config(), "output_scale": self.output_scale })
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, meta: &serde_json::Value) -> Result<Self> {
        let cfg: MlpConfig = serde_json::from_value(meta["net"].clone())?;
        let output_scale = meta["output_scale"].as_f64().ok_or_else(|| CcdError::Format { path: "checkpoint".into(), reason: "missing output_scale".into() })?;
        Ok(Self { net: Mlp::from_tensors(ck, prefix, cfg.hidden.len() + 1)?, output_scale })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self { cfg, m: shapes.iter().map(|s| Array2::zeros(*s)).collect(), v: shapes.iter().map(|s| Array2::zeros(*s)).collect(), t: 0 }
    }

    /// One update. Non-finite gradients leave parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(CcdError::Shape(format!("adam: {} params, {} grads, {} moments", params.len(), grads.len(), self.m.len())));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(CcdError::TrainingAborted("non-finite gradient".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.dim() != g.dim() {
                return Err(CcdError::Shape(format!("adam: parameter {:?} vs gradient {:?}", p.dim(), g.dim())));
            }
            ndarray::Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(())
    }

    pub fn push_tensors(&self, prefix: &str, out: &mut Vec<(String, Array2<f64>)>) {
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}.m{i}"), m.clone()));
            out.push((format!("{prefix}.v{i}"), v.clone()));
        }
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "cfg": self.cfg, "t": self.t, "count": self.m.len() })
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, meta: &serde_json::Value) -> Result<Self> {
        let bad = |r: &str| CcdError::Format { path: "checkpoint".into(), reason: r.into() };
        let cfg: AdamConfig = serde_json::from_value(meta["cfg"].clone())?;
        let t = meta["t"].as_u64().ok_or_else(|| bad("missing adam step"))?;
        let count = meta["count"].as_u64().ok_or_else(|| bad("missing adam count"))? as usize;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for i in 0..count {
            m.push(ck.tensor(&format!("{prefix}.m{i}"))?.clone());
            v.push(ck.tensor(&format!("{prefix}.v{i}"))?.clone());
        }
        Ok(Self { cfg, m, v, t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch: 256, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean squared error over the training set after the last epoch (N²).
    pub train_mse: f64,
    pub steps: usize,
}

/// Fit the policy mean to `targets` (`n x 4`, newtons) by minibatch MSE.
pub fn pretrain_mean(policy: &mut GaussianPolicy, inputs: &Array2<f64>, targets: &Array2<f64>, cfg: &PretrainConfig, rng: &mut Rng) -> Result<PretrainReport> {
    let n = inputs.nrows();
    if n == 0 || targets.nrows() != n || targets.ncols() != ACT_DIM {
        return Err(CcdError::Shape(format!("pretraining data: {} inputs, targets {:?}", n, targets.dim())));
    }
    let scaled = targets / policy.action_scale;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &policy.mean.shapes());
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xb = inputs.select(Axis(0), chunk);
            let yb = scaled.select(Axis(0), chunk);
            let tape = Tape::new();
            let vars = policy.mean.leaves(&tape);
            let diff = vars.forward(tape.leaf(xb)) - tape.leaf(yb);
            let loss = diff.square().mean();
            let g = tape.backward(loss)?;
            adam.step(&mut policy.mean.params_mut(), &vars.grads(&g))?;
            steps += 1;
        }
    }
    let pred = policy.mean.forward(inputs)? * policy.action_scale;
    let err = &pred - targets;
    Ok(PretrainReport { train_mse: err.mapv(|e| e * e).mean().unwrap_or(0.0), steps })
}

const CKPT_MAGIC: &[u8; 8] = b"CCDCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus a JSON metadata block.
///
/// Layout: magic, `u32` version, `u64` header length, JSON header, then the
/// tensors' `f64` little-endian data in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CcdError::Format { path: self.kind.clone(), reason: format!("missing tensor {name}") })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CkptHeader {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), rows: t.nrows(), cols: t.ncols() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CcdError::MissingPath(path.to_path_buf()));
        }
        let bad = |reason: &str| CcdError::Format { path: path.display().to_string(), reason: reason.to_string() };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != CKPT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != CKPT_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: CkptHeader = serde_json::from_slice(&json)?;
        let mut tensors = Vec::new();
        for e in header.tensors {
            let mut data = vec![0.0; e.rows * e.cols];
            for v in data.iter_mut() {
                r.read_exact(&mut b8).map_err(|_| bad("truncated tensor data"))?;
                *v = f64::from_le_bytes(b8);
            }
            tensors.push((e.name, Array2::from_shape_vec((e.rows, e.cols), data).map_err(|_| bad("bad tensor shape"))?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }
}

/// Serializable ChaCha position so a resumed run continues the same stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<Rng> {
        use rand::SeedableRng;
        let bad = || CcdError::Format { path: "rng state".into(), reason: "malformed rng state".into() };
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Minibatch index sets over a random permutation of `0..n`.
pub fn minibatches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Standard-normal draw; shared helper for rollouts and tests.
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn rng() -> Rng {
        Rng::seed_from_u64(42)
    }

    #[test]
    fn log_sqrt_2pi_constant() {
        assert_abs_diff_eq!(LOG_SQRT_2PI, 0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
    }

    #[test]
    fn zero_weight_net_outputs_bias() {
        let net = Mlp::constant(&MlpConfig::new(13, &[8, 8], 4), 0.0, 0.3);
        let x = Array2::from_elem((3, 13), 5.0);
        let y = net.forward(&x).unwrap();
        assert!(y.iter().all(|v| (*v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn width_mismatch_rejected() {
        let net = Mlp::new(&MlpConfig::new(13, &[4], 1), &mut rng());
        assert!(net.forward(&Array2::zeros((1, 12))).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut r = rng();
        let net = Mlp::new(&MlpConfig::new(5, &[7, 6], 3), &mut r);
        let x = Array2::from_shape_fn((4, 5), |_| normal(&mut r));
        let tape = Tape::new();
        let vars = net.leaves(&tape);
        let y = vars.forward(tape.leaf(x.clone())).value();
        let plain = net.forward(&x).unwrap();
        for (a, b) in y.iter().zip(plain.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng();
        let net = Mlp::new(&MlpConfig::new(3, &[4, 4], 2), &mut r);
        let x = Array2::from_shape_fn((5, 3), |_| normal(&mut r));
        let loss_of = |n: &Mlp| n.forward(&x).unwrap().mapv(|v| v * v).sum();
        let tape = Tape::new();
        let vars = net.leaves(&tape);
        let out = vars.forward(tape.leaf(x.clone()));
        let g = tape.backward(out.square().sum()).unwrap();
        let grads = vars.grads(&g);
        let h = 1e-6;
        for (pi, grad) in grads.iter().enumerate() {
            for idx in 0..grad.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.params_mut()[pi].as_slice_mut().unwrap()[idx] += h;
                minus.params_mut()[pi].as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grad.as_slice().unwrap()[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pi}[{idx}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn log_prob_at_mean() {
        let lp = gaussian_log_prob(&[1.0, 2.0], &[0.5, 2.0], &[1.0, 2.0]);
        assert_abs_diff_eq!(lp, -((0.5f64).ln() + LOG_SQRT_2PI + 2.0f64.ln() + LOG_SQRT_2PI), epsilon = 1e-14);
        let shifted = gaussian_log_prob(&[0.0], &[1.0], &[1.0]);
        assert_abs_diff_eq!(gaussian_log_prob(&[0.0], &[1.0], &[0.0]) - shifted, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn policy_tape_log_prob_matches_plain() {
        let mut r = rng();
        let mut p = GaussianPolicy::new(&[6, 6], 100.0, 10.0, 0.01, &mut r);
        p.std = Mlp::new(&p.std.config(), &mut r);
        let input: [f64; INPUT_DIM] = std::array::from_fn(|_| normal(&mut r));
        let (a, lp) = p.sample(&input, &mut r);
        assert_abs_diff_eq!(lp, p.log_prob(&input, &a), epsilon = 1e-12);
        let tape = Tape::new();
        let vars = p.leaves(&tape);
        let x = tape.leaf(Array2::from_shape_vec((1, INPUT_DIM), input.to_vec()).unwrap());
        let act = tape.leaf(Array2::from_shape_vec((1, 4), a.to_vec()).unwrap());
        assert_abs_diff_eq!(vars.log_prob(x, act).item(), lp, epsilon = 1e-10);
    }

    #[test]
    fn std_positive_for_extreme_weights() {
        let mut r = rng();
        let mut p = GaussianPolicy::new(&[4], 1.0, 1.0, 0.01, &mut r);
        p.std = Mlp::constant(&p.std.config(), -50.0, -50.0);
        let (_, s) = p.mean_std(&Array2::from_elem((1, INPUT_DIM), 1.0)).unwrap();
        assert!(s.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn initial_std_matches_softplus_of_bias() {
        let p = GaussianPolicy::new(&[8, 8], 1.0, 1.0, 0.01, &mut rng());
        let (_, s) = p.mean_std(&Array2::from_elem((2, INPUT_DIM), 3.0)).unwrap();
        for v in s.iter() {
            assert_abs_diff_eq!(*v, (1.0 + 0.01f64.exp()).ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_first_step_is_lr() {
        let mut x = Array2::from_elem((1, 1), 3.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[(1, 1)]);
        adam.step(&mut [&mut x], &[Array2::zeros((1, 1))]).unwrap();
        assert_eq!(x[(0, 0)], 3.0);
        for g in [1e-3, 1.0, 1e4] {
            let mut y = Array2::from_elem((1, 1), 0.0);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[(1, 1)]);
            adam.step(&mut [&mut y], &[Array2::from_elem((1, 1), g)]).unwrap();
            assert_abs_diff_eq!(y[(0, 0)], -0.01, epsilon = 1e-6);
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut x = Array2::from_elem((1, 2), 1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[(1, 2)]);
        let g = Array2::from_shape_vec((1, 2), vec![1.0, f64::NAN]).unwrap();
        assert!(adam.step(&mut [&mut x], &[g]).is_err());
        assert_eq!(x, Array2::from_elem((1, 2), 1.0));
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f = (x - 1)^2 + 10 (y + 2)^2
        let mut p = Array2::from_shape_vec((1, 2), vec![5.0, 5.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &[(1, 2)]);
        for step in 0..5000 {
            let g = Array2::from_shape_vec((1, 2), vec![2.0 * (p[(0, 0)] - 1.0), 20.0 * (p[(0, 1)] + 2.0)]).unwrap();
            adam.step(&mut [&mut p], &[g]).unwrap();
            if (p[(0, 0)] - 1.0).abs() < 1e-6 && (p[(0, 1)] + 2.0).abs() < 1e-6 {
                assert!(step < 5000);
                return;
            }
        }
        panic!("did not converge: {p:?}");
    }

    #[test]
    fn value_rescale_preserves_output() {
        let mut r = rng();
        let mut v = ValueFn::new(&[5, 5], 1.0, &mut r);
        let x: [f64; INPUT_DIM] = std::array::from_fn(|_| normal(&mut r));
        let before = v.value(&x);
        v.rescale(250.0);
        assert_abs_diff_eq!(v.value(&x), before, epsilon = 1e-12);
    }

    #[test]
    fn pretrain_constant_target() {
        let mut r = rng();
        let mut p = GaussianPolicy::new(&[8], 10.0, 1.0, 0.01, &mut r);
        let x = Array2::from_shape_fn((64, INPUT_DIM), |_| normal(&mut r));
        let y = Array2::from_elem((64, 4), 3.0);
        let rep = pretrain_mean(&mut p, &x, &y, &PretrainConfig { epochs: 2000, batch: 64, lr: 1e-2 }, &mut r).unwrap();
        // rms spread below 3% of the target
        assert!(rep.train_mse.sqrt() < 0.03 * 3.0, "mse {}", rep.train_mse);
    }

    #[test]
    fn checkpoint_round_trip_and_rng_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng();
        let p = GaussianPolicy::new(&[6, 6], 1000.0, 50.0, 0.01, &mut r);
        let mut ck = Checkpoint::new("policy", serde_json::json!({ "policy": p.meta(), "rng": RngState::capture(&r) }));
        p.push_tensors("pi", &mut ck.tensors);
        let path = dir.path().join("p.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let q = GaussianPolicy::from_checkpoint(&back, "pi", &back.meta["policy"]).unwrap();
        assert_eq!(p, q);
        let state: RngState = serde_json::from_value(back.meta["rng"].clone()).unwrap();
        let mut resumed = state.restore().unwrap();
        assert_eq!(r.random::<u64>(), resumed.random::<u64>());
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(CcdError::MissingPath(_))));
    }
}

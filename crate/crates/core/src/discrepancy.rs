//! Quantile model of the mismatch between the nominal model and the
//! physical vehicle.
//!
//! The error `e_k = y_k - ŷ_k` is the one-step observation error of the
//! nominal model started from the physical state. Three tanh networks map
//! `(e_k, y_k, u_k, a, v, delta)` to the 10th, 50th and 90th percentiles of
//! `e_{k+1}`, and [`UpdatedModel`] adds them to nominal predictions.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{CcdError, Result};
use crate::nn::{minibatches, Adam, AdamConfig, Checkpoint, Encoder, GaussianPolicy, Mlp, MlpConfig};
use crate::seed::Rng;
use crate::vehicle::{observe, Divergence, DrivingCondition, FullState, Observation, Plant, SuspensionDesign, WheelDisturbance, ACT_DIM, OBS_DIM};

/// Model input width: error, observation, actuator forces, `(a, v, delta)`.
pub const FEATURE_DIM: usize = OBS_DIM + OBS_DIM + ACT_DIM + 3;
pub const TAUS: [f64; 3] = [0.1, 0.5, 0.9];

/// One time-aligned training pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub e: [f64; OBS_DIM],
    pub y: Observation,
    pub u: [f64; ACT_DIM],
    pub drive: DrivingCondition,
    pub e_next: [f64; OBS_DIM],
}

impl ErrorRecord {
    pub fn features(&self) -> [f64; FEATURE_DIM] {
        features(&self.e, &self.y, &self.u, &self.drive)
    }
}

pub fn features(e: &[f64; OBS_DIM], y: &Observation, u: &[f64; ACT_DIM], drive: &DrivingCondition) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[..OBS_DIM].copy_from_slice(e);
    f[OBS_DIM..2 * OBS_DIM].copy_from_slice(&y.0);
    f[2 * OBS_DIM..2 * OBS_DIM + ACT_DIM].copy_from_slice(u);
    f[2 * OBS_DIM + ACT_DIM..].copy_from_slice(&[drive.a, drive.v, drive.delta]);
    f
}

/// Chronological error dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorDataset {
    pub records: Vec<ErrorRecord>,
    /// Set when either plant diverged and collection stopped early.
    pub truncated: bool,
}

impl ErrorDataset {
    /// Contiguous split: first 80% for training, last 20% for validation.
    pub fn split(&self) -> (&[ErrorRecord], &[ErrorRecord]) {
        let cut = (self.records.len() * 4) / 5;
        self.records.split_at(cut)
    }

    pub fn error_rms(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.records.iter().flat_map(|r| r.e_next.iter()).map(|v| v * v).sum();
        (ss / (self.records.len() * OBS_DIM) as f64).sqrt()
    }

    pub fn header() -> Vec<String> {
        let mut h = Vec::new();
        h.extend((0..OBS_DIM).map(|i| format!("e{i}")));
        h.extend((0..OBS_DIM).map(|i| format!("y{i}")));
        h.extend((0..ACT_DIM).map(|i| format!("u{i}")));
        h.extend(["a", "v", "delta"].map(String::from));
        h.extend((0..OBS_DIM).map(|i| format!("e_next{i}")));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header())?;
        for r in &self.records {
            let row = r.features().into_iter().chain(r.e_next);
            w.write_record(row.map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CcdError::MissingPath(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header != Self::header() {
            return Err(CcdError::Format { path: path.display().to_string(), reason: "unexpected error dataset header".into() });
        }
        let mut records = Vec::new();
        for row in r.records() {
            let row = row?;
            let v: Vec<f64> = row.iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| CcdError::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            let arr = |a: usize| -> [f64; OBS_DIM] { std::array::from_fn(|i| v[a + i]) };
            let o = 2 * OBS_DIM;
            records.push(ErrorRecord {
                e: arr(0),
                y: Observation(arr(OBS_DIM)),
                u: std::array::from_fn(|i| v[o + i]),
                drive: DrivingCondition::new(v[o + ACT_DIM + 1], v[o + ACT_DIM], v[o + ACT_DIM + 2]),
                e_next: arr(FEATURE_DIM),
            });
        }
        Ok(Self { records, truncated: false })
    }
}

/// Deploy `policy` (mean actions) on the physical plant along a route and
/// record the nominal model's one-step prediction error at every step.
#[allow(clippy::too_many_arguments)]
pub fn collect_errors(
    real: &Plant,
    nominal: &Plant,
    policy: &GaussianPolicy,
    encoder: &Encoder,
    design: &SuspensionDesign,
    drives: &[DrivingCondition],
    roads: &[WheelDisturbance],
    dt: f64,
) -> Result<ErrorDataset> {
    if drives.len() != roads.len() {
        return Err(CcdError::Shape(format!("{} drive samples vs {} road samples", drives.len(), roads.len())));
    }
    let mut out = ErrorDataset::default();
    let mut x = FullState::ZERO;
    let mut e = [0.0; OBS_DIM];
    for k in 0..drives.len() {
        let y = observe(&x);
        let u = policy.deterministic(&encoder.encode(design, &y));
        let next_real = real.step(&x, &u, &drives[k], &roads[k], design, dt);
        let next_nom = nominal.step(&x, &u, &drives[k], &roads[k], design, dt);
        let (Ok(xr), Ok(xn)) = (next_real, next_nom) else {
            out.truncated = true;
            break;
        };
        let (yr, yn) = (observe(&xr), observe(&xn));
        let e_next: [f64; OBS_DIM] = std::array::from_fn(|i| yr.0[i] - yn.0[i]);
        out.records.push(ErrorRecord { e, y, u, drive: drives[k], e_next });
        e = e_next;
        x = xr;
    }
    Ok(out)
}

/// Pinball loss of residual `r = y - q` at level `tau`.
pub fn pinball(r: f64, tau: f64) -> f64 {
    if r >= 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileOutput {
    pub upper: [f64; OBS_DIM],
    pub median: [f64; OBS_DIM],
    pub lower: [f64; OBS_DIM],
}

impl QuantileOutput {
    pub fn width(&self) -> [f64; OBS_DIM] {
        std::array::from_fn(|i| self.upper[i] - self.lower[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantileFitConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Use every `stride`-th training record (1 keeps all).
    pub stride: usize,
}

impl Default for QuantileFitConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], epochs: 20, batch: 256, lr: 1e-3, stride: 1 }
    }
}

/// Three quantile heads with the standardisation statistics they were
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileModel {
    /// Networks for `TAUS` in order (lower, median, upper).
    pub heads: [Mlp; 3],
    pub in_mean: [f64; FEATURE_DIM],
    pub in_std: [f64; FEATURE_DIM],
    pub out_mean: [f64; OBS_DIM],
    pub out_std: [f64; OBS_DIM],
}

/// Held-out diagnostics of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_records: usize,
    pub validation_records: usize,
    /// Mean pinball loss per level on the validation split (original units).
    pub validation_pinball: [f64; 3],
    /// RMSE of the median head on the validation split.
    pub validation_rmse: f64,
    /// Fraction of validation targets inside `[lower, upper]`, per channel.
    pub coverage: Vec<f64>,
}

fn mean_std<const N: usize>(rows: &[[f64; N]]) -> ([f64; N], [f64; N]) {
    let n = rows.len() as f64;
    let mean: [f64; N] = std::array::from_fn(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n);
    let std: [f64; N] = std::array::from_fn(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt());
    let top = std.iter().cloned().fold(0.0, f64::max);
    // constant columns would divide by zero
    let floor = if top > 0.0 { 1e-6 * top } else { 1.0 };
    (mean, std.map(|s| if s > floor { s } else { floor.max(1e-300) }))
}

impl QuantileModel {
    /// Heads with zero output layers and identity scaling: predicts 0.
    pub fn zero(hidden: &[usize], rng: &mut Rng) -> Self {
        let cfg = MlpConfig::new(FEATURE_DIM, hidden, OBS_DIM);
        let head = |rng: &mut Rng| {
            let mut m = Mlp::new(&cfg, rng);
            let last = m.weights.len() - 1;
            m.weights[last].fill(0.0);
            m.biases[last].fill(0.0);
            m
        };
        Self { heads: [head(rng), head(rng), head(rng)], in_mean: [0.0; FEATURE_DIM], in_std: [1.0; FEATURE_DIM], out_mean: [0.0; OBS_DIM], out_std: [1.0; OBS_DIM] }
    }

    /// Input-independent model returning the given quantiles.
    pub fn constant(lower: [f64; OBS_DIM], median: [f64; OBS_DIM], upper: [f64; OBS_DIM]) -> Self {
        let cfg = MlpConfig::new(FEATURE_DIM, &[1], OBS_DIM);
        let head = |v: [f64; OBS_DIM]| {
            let mut m = Mlp::constant(&cfg, 0.0, 0.0);
            m.biases[1] = Array2::from_shape_vec((1, OBS_DIM), v.to_vec()).expect("row");
            m
        };
        Self { heads: [head(lower), head(median), head(upper)], in_mean: [0.0; FEATURE_DIM], in_std: [1.0; FEATURE_DIM], out_mean: [0.0; OBS_DIM], out_std: [1.0; OBS_DIM] }
    }

    fn standardize(&self, f: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        std::array::from_fn(|j| (f[j] - self.in_mean[j]) / self.in_std[j])
    }

    /// Raw head outputs in original units, before the sorting guard.
    pub fn predict_raw(&self, f: &[f64; FEATURE_DIM]) -> [[f64; OBS_DIM]; 3] {
        let x = Array2::from_shape_vec((1, FEATURE_DIM), self.standardize(f).to_vec()).expect("row");
        std::array::from_fn(|h| {
            let out = self.heads[h].forward(&x).expect("feature width fixed");
            std::array::from_fn(|i| self.out_mean[i] + self.out_std[i] * out[(0, i)])
        })
    }

    /// Quantiles with the componentwise sorting guard applied.
    pub fn predict(&self, f: &[f64; FEATURE_DIM]) -> QuantileOutput {
        let raw = self.predict_raw(f);
        let mut out = QuantileOutput { upper: [0.0; OBS_DIM], median: [0.0; OBS_DIM], lower: [0.0; OBS_DIM] };
        for i in 0..OBS_DIM {
            let mut v = [raw[0][i], raw[1][i], raw[2][i]];
            v.sort_by(f64::total_cmp);
            out.lower[i] = v[0];
            out.median[i] = v[1];
            out.upper[i] = v[2];
        }
        out
    }

    pub fn predict_record(&self, r: &ErrorRecord) -> QuantileOutput {
        self.predict(&r.features())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "heads": self.heads[0].config(),
            "taus": TAUS,
            "in_mean": self.in_mean.to_vec(),
            "in_std": self.in_std.to_vec(),
            "out_mean": self.out_mean.to_vec(),
            "out_std": self.out_std.to_vec(),
        });
        let mut ck = Checkpoint::new("quantile-model", meta);
        for (h, net) in self.heads.iter().enumerate() {
            for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
                ck.tensors.push((format!("q{h}.w{l}"), w.clone()));
                ck.tensors.push((format!("q{h}.b{l}"), b.clone()));
            }
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let bad = |r: &str| CcdError::Format { path: path.display().to_string(), reason: r.to_string() };
        if ck.kind != "quantile-model" {
            return Err(bad("not a quantile model checkpoint"));
        }
        let cfg: MlpConfig = serde_json::from_value(ck.meta["heads"].clone())?;
        let vecf = |key: &str| -> Result<Vec<f64>> { Ok(serde_json::from_value(ck.meta[key].clone())?) };
        let fixed = |v: Vec<f64>, n: usize| -> Result<Vec<f64>> { if v.len() == n { Ok(v) } else { Err(bad("bad scaling length")) } };
        let in_mean = fixed(vecf("in_mean")?, FEATURE_DIM)?;
        let in_std = fixed(vecf("in_std")?, FEATURE_DIM)?;
        let out_mean = fixed(vecf("out_mean")?, OBS_DIM)?;
        let out_std = fixed(vecf("out_std")?, OBS_DIM)?;
        let layers = cfg.hidden.len() + 1;
        let head = |h: usize| -> Result<Mlp> {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for l in 0..layers {
                weights.push(ck.tensor(&format!("q{h}.w{l}"))?.clone());
                biases.push(ck.tensor(&format!("q{h}.b{l}"))?.clone());
            }
            Ok(Mlp { weights, biases })
        };
        Ok(Self {
            heads: [head(0)?, head(1)?, head(2)?],
            in_mean: std::array::from_fn(|i| in_mean[i]),
            in_std: std::array::from_fn(|i| in_std[i]),
            out_mean: std::array::from_fn(|i| out_mean[i]),
            out_std: std::array::from_fn(|i| out_std[i]),
        })
    }
}

/// Fit the three heads by minibatch Adam on the pinball loss with a linearly
/// decaying learning rate.
pub fn fit_quantiles(train: &[ErrorRecord], validation: &[ErrorRecord], cfg: &QuantileFitConfig, rng: &mut Rng) -> Result<(QuantileModel, FitReport)> {
    let pairs: Vec<([f64; FEATURE_DIM], [f64; OBS_DIM])> = train.iter().step_by(cfg.stride.max(1)).map(|r| (r.features(), r.e_next)).collect();
    fit_quantiles_raw(&pairs, validation, cfg, rng)
}

/// As [`fit_quantiles`] but on arbitrary `(features, target)` pairs.
pub fn fit_quantiles_raw(
    train: &[([f64; FEATURE_DIM], [f64; OBS_DIM])],
    validation: &[ErrorRecord],
    cfg: &QuantileFitConfig,
    rng: &mut Rng,
) -> Result<(QuantileModel, FitReport)> {
    if train.is_empty() {
        return Err(CcdError::invalid("quantile fit needs a nonempty training split"));
    }
    let xs: Vec<[f64; FEATURE_DIM]> = train.iter().map(|p| p.0).collect();
    let ys: Vec<[f64; OBS_DIM]> = train.iter().map(|p| p.1).collect();
    let (in_mean, in_std) = mean_std(&xs);
    let (out_mean, out_std) = mean_std(&ys);
    let mut model = QuantileModel::zero(&cfg.hidden, rng);
    model.in_mean = in_mean;
    model.in_std = in_std;
    model.out_mean = out_mean;
    model.out_std = out_std;

    let n = train.len();
    let x = Array2::from_shape_fn((n, FEATURE_DIM), |(i, j)| (xs[i][j] - in_mean[j]) / in_std[j]);
    let y = Array2::from_shape_fn((n, OBS_DIM), |(i, j)| (ys[i][j] - out_mean[j]) / out_std[j]);
    let mut adams: Vec<Adam> = model.heads.iter().map(|h| Adam::new(AdamConfig::with_lr(cfg.lr), &h.shapes())).collect();
    let steps_per_epoch = n.div_ceil(cfg.batch.max(1));
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        for batch in minibatches(n, cfg.batch, rng) {
            let lr = cfg.lr * (1.0 - step as f64 / total as f64);
            let xb = x.select(Axis(0), &batch);
            let yb = y.select(Axis(0), &batch);
            for (h, tau) in TAUS.iter().enumerate() {
                let tape = Tape::new();
                let vars = model.heads[h].leaves(&tape);
                let r = tape.leaf(yb.clone()) - vars.forward(tape.leaf(xb.clone()));
                let zero = tape.scalar(0.0);
                let loss = (r * *tau - r.min(zero)).mean();
                let g = tape.backward(loss)?;
                adams[h].cfg.lr = lr;
                adams[h].step(&mut model.heads[h].params_mut(), &vars.grads(&g))?;
            }
            step += 1;
        }
    }
    let report = evaluate_fit(&model, n, validation);
    Ok((model, report))
}

fn evaluate_fit(model: &QuantileModel, train_records: usize, validation: &[ErrorRecord]) -> FitReport {
    let mut pin = [0.0; 3];
    let mut sq = 0.0;
    let mut inside = [0usize; OBS_DIM];
    for r in validation {
        let q = model.predict_record(r);
        for i in 0..OBS_DIM {
            let t = r.e_next[i];
            pin[0] += pinball(t - q.lower[i], TAUS[0]);
            pin[1] += pinball(t - q.median[i], TAUS[1]);
            pin[2] += pinball(t - q.upper[i], TAUS[2]);
            sq += (t - q.median[i]).powi(2);
            if t >= q.lower[i] && t <= q.upper[i] {
                inside[i] += 1;
            }
        }
    }
    let m = (validation.len() * OBS_DIM).max(1) as f64;
    FitReport {
        train_records,
        validation_records: validation.len(),
        validation_pinball: pin.map(|p| p / m),
        validation_rmse: (sq / m).sqrt(),
        coverage: inside.iter().map(|c| *c as f64 / validation.len().max(1) as f64).collect(),
    }
}

/// One step of the discrepancy-corrected model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdatedStep {
    pub next_state: FullState,
    pub nominal_obs: Observation,
    pub errors: QuantileOutput,
    pub y_upper: Observation,
    pub y_median: Observation,
    pub y_lower: Observation,
}

/// Nominal plant plus learned error quantiles.
#[derive(Debug, Clone)]
pub struct UpdatedModel<'a> {
    pub nominal: &'a Plant,
    pub model: &'a QuantileModel,
}

impl UpdatedModel<'_> {
    /// `err` is the caller's running error `e_k`, `y` the current observation.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        state: &FullState,
        err: &[f64; OBS_DIM],
        y: &Observation,
        u: &[f64; ACT_DIM],
        drive: &DrivingCondition,
        road: &WheelDisturbance,
        design: &SuspensionDesign,
        dt: f64,
    ) -> std::result::Result<UpdatedStep, Divergence> {
        let next = self.nominal.step(state, u, drive, road, design, dt)?;
        let y_nom = observe(&next);
        let q = self.model.predict(&features(err, y, u, drive));
        let add = |e: &[f64; OBS_DIM]| Observation(std::array::from_fn(|i| y_nom.0[i] + e[i]));
        Ok(UpdatedStep { next_state: next, nominal_obs: y_nom, errors: q, y_upper: add(&q.upper), y_median: add(&q.median), y_lower: add(&q.lower) })
    }
}

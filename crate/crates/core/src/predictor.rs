//! MLP latency regressor.
//!
//! A fully connected network (three hidden layers of 64 by default) maps an
//! encoded architecture to latency in ms. Inputs are standardized with
//! training statistics; training minimizes MSE with Adam and decoupled weight
//! decay on mini-batches reshuffled every epoch.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::archspace::DepthBins;
use crate::dataset::LatencyDataset;
use crate::encoding::{Encoder, EncodingScheme};
use crate::error::{Error, PersistError, Result};
use crate::par::{self, Execution};
use crate::seed;

pub const MODEL_FORMAT_TAG: &str = "latsurr-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

// Slack for inclusive threshold comparisons.
const THRESHOLD_EPS: f64 = 1e-12;
// Rows per chunk when predicting in parallel.
const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Linear,
}

/// Space the network regresses in. Predictions are always returned in ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    #[default]
    Raw,
    Log,
}

impl TargetTransform {
    fn forward(self, ms: f64) -> f64 {
        match self {
            TargetTransform::Raw => ms,
            TargetTransform::Log => ms.ln(),
        }
    }

    fn inverse(self, t: f64) -> f64 {
        match self {
            TargetTransform::Raw => t,
            TargetTransform::Log => t.exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub target: TargetTransform,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            weight_decay: 1e-4,
            epochs: 300,
            batch_size: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            hidden: vec![64, 64, 64],
            activation: Activation::Relu,
            target: TargetTransform::Raw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must be in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("adam epsilon must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// Shape (inputs, outputs).
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub spec_name: String,
    pub scheme: EncodingScheme,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub config: TrainConfig,
    layers: Vec<Layer>,
}

/// Weight and bias gradients of one layer.
type LayerGrads = (Array2<f64>, Array1<f64>);

/// Forward-pass intermediates for back-propagation.
struct Trace {
    /// Input to each layer (normalized inputs first).
    inputs: Vec<Array2<f64>>,
    out: Array2<f64>,
}

impl MlpModel {
    /// Randomly initialized network with identity normalization.
    ///
    /// Weights are uniform in `±sqrt(6 / fan_in)` for ReLU layers and
    /// `±sqrt(3 / fan_in)` otherwise; biases start at zero.
    pub fn init(input_len: usize, cfg: &TrainConfig, spec_name: &str, scheme: EncodingScheme) -> Result<Self> {
        cfg.validate()?;
        if input_len == 0 {
            return Err(Error::InvalidArgument("input length must be positive".into()));
        }
        let mut rng = seed::rng(seed::derive(cfg.seed, "init"));
        let mut widths = vec![input_len];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let gain = if l + 1 < n_layers && cfg.activation == Activation::Relu { 6.0 } else { 3.0 };
                let limit = (gain / fan_in as f64).sqrt();
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit));
                Layer { w, b: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(MlpModel {
            spec_name: spec_name.into(),
            scheme,
            input_mean: vec![0.0; input_len],
            input_std: vec![1.0; input_len],
            config: cfg.clone(),
            layers,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_mean.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Sets every weight and bias of the output layer to zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.w.fill(0.0);
        last.b.fill(0.0);
    }

    fn normalize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mean = Array1::from(self.input_mean.clone());
        let std = Array1::from(self.input_std.clone());
        (&x - &mean) / &std
    }

    fn forward(&self, x: ArrayView2<f64>, keep: bool) -> Trace {
        let mut a = self.normalize(x);
        let mut inputs = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w) + &layer.b;
            if l < last && self.config.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            if keep {
                inputs.push(std::mem::replace(&mut a, z));
            } else {
                a = z;
            }
        }
        Trace { inputs, out: a }
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.input_len() {
            return Err(Error::LengthMismatch { expected: self.input_len(), got });
        }
        Ok(())
    }

    fn to_matrix(&self, xs: &[Vec<f64>]) -> Result<Array2<f64>> {
        let d = self.input_len();
        let mut flat = Vec::with_capacity(xs.len() * d);
        for x in xs {
            self.check_len(x.len())?;
            flat.extend_from_slice(x);
        }
        Ok(Array2::from_shape_vec((xs.len(), d), flat).expect("shape checked"))
    }

    /// Latency in ms for one encoded vector.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x.len())?;
        let m = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.config.target.inverse(self.forward(m, false).out[[0, 0]]))
    }

    /// Latency in ms for many encoded vectors, in input order.
    pub fn predict_batch(&self, xs: &[Vec<f64>], exec: Execution) -> Result<Vec<f64>> {
        for x in xs {
            self.check_len(x.len())?;
        }
        let chunks: Vec<&[Vec<f64>]> = xs.chunks(PREDICT_CHUNK).collect();
        let parts = par::try_map(exec, &chunks, |chunk| -> Result<Vec<f64>> {
            let m = self.to_matrix(chunk)?;
            let out = self.forward(m.view(), false).out;
            Ok(out.column(0).iter().map(|&t| self.config.target.inverse(t)).collect())
        })?;
        Ok(parts.concat())
    }

    /// Squared error on one sample, in the regression space.
    fn sample_loss(&self, x: &[f64], actual_ms: f64) -> f64 {
        let m = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let diff = self.forward(m, false).out[[0, 0]] - self.config.target.forward(actual_ms);
        diff * diff
    }

    /// Gradients of mean squared error over the rows of `x`.
    fn gradients(&self, x: ArrayView2<f64>, t: &Array1<f64>) -> (f64, Vec<LayerGrads>) {
        let trace = self.forward(x, true);
        let n = x.nrows() as f64;
        let resid = &trace.out.column(0) - t;
        let loss = resid.dot(&resid) / n;
        let mut delta = (resid * (2.0 / n)).insert_axis(Axis(1));
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].w.t());
                if self.config.activation == Activation::Relu {
                    Zip::from(&mut back).and(input).for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                }
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        (loss, grads)
    }

    /// ReLU on/off pattern of every hidden unit for one input.
    fn mask(&self, x: &[f64]) -> Vec<bool> {
        let m = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let trace = self.forward(m, true);
        trace.inputs[1..].iter().flat_map(|a| a.iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect()
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if index < layer.w.len() {
                let cols = layer.w.ncols();
                return &mut layer.w[[index / cols, index % cols]];
            }
            index -= layer.w.len();
            if index < layer.b.len() {
                return &mut layer.b[index];
            }
            index -= layer.b.len();
        }
        panic!("parameter index out of range")
    }
}

// ---------------------------------------------------------------------------
// Training

struct AdamState {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    step: i32,
}

impl AdamState {
    fn new(model: &MlpModel) -> Self {
        let zeros = || model.layers.iter().map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.len()))).collect();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }

    fn apply(&mut self, model: &mut MlpModel, grads: &[(Array2<f64>, Array1<f64>)]) {
        let cfg = &model.config;
        let (lr, wd, b1, b2, eps) = (cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.epsilon);
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[l];
            let (mw, mb) = &mut self.m[l];
            let (vw, vb) = &mut self.v[l];
            // Decoupled decay acts on weights only.
            Zip::from(&mut layer.w).and(gw).and(mw).and(vw).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p);
            });
            Zip::from(&mut layer.b).and(gb).and(mb).and(vb).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Result of [`fit`]: the model and its mean training loss per epoch.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: MlpModel,
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh network on encoded inputs `xs` and latencies `ys` (ms).
pub fn fit(xs: &[Vec<f64>], ys: &[f64], cfg: &TrainConfig, spec_name: &str, scheme: EncodingScheme) -> Result<Fitted> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { expected: xs.len(), got: ys.len() });
    }
    if let Some(bad) = ys.iter().find(|y| !(y.is_finite() && **y > 0.0)) {
        return Err(Error::InvalidArgument(format!("latency target {bad} is not positive")));
    }
    let d = xs[0].len();
    let mut model = MlpModel::init(d, cfg, spec_name, scheme)?;
    let x = model.to_matrix(xs)?;
    let n = x.nrows();

    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let var = x.var_axis(Axis(0), 0.0);
    model.input_mean = mean.to_vec();
    model.input_std = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();

    let t: Array1<f64> = ys.iter().map(|&y| cfg.target.forward(y)).collect();
    // Start the output at the target mean so early epochs fit shape, not scale.
    model.layers.last_mut().expect("output layer").b[0] = t.mean().expect("non-empty");

    let mut adam = AdamState::new(&model);
    let mut rng = seed::rng(seed::derive(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut last_finite = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), idx);
            let tb = t.select(Axis(0), idx);
            let (loss, grads) = model.gradients(xb.view(), &tb);
            total += loss * idx.len() as f64;
            adam.apply(&mut model, &grads);
        }
        let epoch_loss = total / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, last_finite });
        }
        last_finite = epoch_loss;
        epoch_losses.push(epoch_loss);
    }
    log::debug!("fit: {n} samples, final mse {last_finite:.6}");
    Ok(Fitted { model, epoch_losses })
}

/// Trains on the non-reference samples of `ds` under the dataset's scheme.
pub fn train(ds: &LatencyDataset, cfg: &TrainConfig, exec: Execution) -> Result<MlpModel> {
    let (xs, ys) = ds.xy(exec)?;
    Ok(fit(&xs, &ys, cfg, ds.spec_name(), ds.scheme)?.model)
}

// ---------------------------------------------------------------------------
// Evaluation

/// `max(0, 1 - |pred - actual| / actual)`.
pub fn sample_accuracy(pred: f64, actual: f64) -> f64 {
    (1.0 - (pred - actual).abs() / actual).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalStrategy {
    Overall,
    #[default]
    BinWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub actual_ms: f64,
    pub predicted_ms: f64,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: EvalStrategy,
    pub acc_th: f64,
    /// Mean per-sample accuracy over the whole test set.
    pub overall: f64,
    /// Mean accuracy per bin; `None` for bins without test samples.
    pub per_bin: Vec<Option<f64>>,
    pub bin_counts: Vec<usize>,
    pub empty_bins: Vec<usize>,
    pub points: Vec<ScatterPoint>,
    pub pass: bool,
}

impl EvalReport {
    /// Lowest accuracy among non-empty bins.
    pub fn min_bin(&self) -> Option<f64> {
        self.per_bin.iter().flatten().copied().reduce(f64::min)
    }
}

/// Scores (actual, predicted, bin) triples.
pub fn evaluate_points(
    points: Vec<ScatterPoint>,
    n_bins: usize,
    strategy: EvalStrategy,
    acc_th: f64,
) -> Result<EvalReport> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let mut sums = vec![0.0; n_bins];
    let mut bin_counts = vec![0usize; n_bins];
    let mut total = 0.0;
    for p in &points {
        if p.bin >= n_bins {
            return Err(Error::InvalidArgument(format!("bin {} out of range for {n_bins} bins", p.bin)));
        }
        let acc = sample_accuracy(p.predicted_ms, p.actual_ms);
        sums[p.bin] += acc;
        bin_counts[p.bin] += 1;
        total += acc;
    }
    let per_bin: Vec<Option<f64>> =
        sums.iter().zip(&bin_counts).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect();
    let empty_bins: Vec<usize> = (0..n_bins).filter(|&i| bin_counts[i] == 0).collect();
    let overall = total / points.len() as f64;
    let score = match strategy {
        EvalStrategy::Overall => overall,
        EvalStrategy::BinWise => per_bin.iter().flatten().copied().fold(f64::INFINITY, f64::min),
    };
    let pass = score + THRESHOLD_EPS >= acc_th;
    Ok(EvalReport { strategy, acc_th, overall, per_bin, bin_counts, empty_bins, points, pass })
}

/// Checks that `model` was trained for the spec and scheme of `ds`.
pub fn check_compatible(model: &MlpModel, ds: &LatencyDataset) -> Result<()> {
    if model.spec_name != ds.spec_name() {
        return Err(Error::Mismatch(format!(
            "model is for spec '{}', dataset is '{}'",
            model.spec_name,
            ds.spec_name()
        )));
    }
    let len = Encoder::new(&ds.spec, model.scheme).len();
    if len != model.input_len() {
        return Err(Error::Mismatch(format!(
            "model expects {} inputs, {} encoding of spec '{}' has {len}",
            model.input_len(),
            model.scheme,
            ds.spec_name()
        )));
    }
    Ok(())
}

/// Predicts every non-reference sample of `test` and scores the result.
pub fn evaluate(
    model: &MlpModel,
    test: &LatencyDataset,
    strategy: EvalStrategy,
    acc_th: f64,
    exec: Execution,
) -> Result<EvalReport> {
    check_compatible(model, test)?;
    let ds = if test.scheme == model.scheme { None } else { Some(test.with_scheme(model.scheme, exec)?) };
    let (xs, ys) = ds.as_ref().unwrap_or(test).xy(exec)?;
    let preds = model.predict_batch(&xs, exec)?;
    score(&test.bins, test, &ys, &preds, strategy, acc_th)
}

fn score(
    bins: &DepthBins,
    test: &LatencyDataset,
    actual: &[f64],
    preds: &[f64],
    strategy: EvalStrategy,
    acc_th: f64,
) -> Result<EvalReport> {
    let points = test
        .trainable()
        .zip(actual.iter().zip(preds))
        .map(|(s, (&a, &p))| {
            Ok(ScatterPoint { actual_ms: a, predicted_ms: p, bin: bins.bin_of(s.arch.total_depth())? })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_points(points, bins.n_bins, strategy, acc_th)
}

/// Scores externally produced predictions (e.g. a lookup table) on `test`.
pub fn evaluate_predictions(
    test: &LatencyDataset,
    preds: &[f64],
    strategy: EvalStrategy,
    acc_th: f64,
) -> Result<EvalReport> {
    let actual: Vec<f64> = test.trainable().map(|s| s.latency_ms).collect();
    if actual.len() != preds.len() {
        return Err(Error::LengthMismatch { expected: actual.len(), got: preds.len() });
    }
    score(&test.bins, test, &actual, preds, strategy, acc_th)
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because the perturbation moved a ReLU across its
    /// kink, where the finite difference is not a derivative.
    pub skipped: usize,
}

/// Compares back-propagated gradients of the squared error on one sample with
/// central differences, `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn gradient_check(model: &MlpModel, x: &[f64], actual_ms: f64, epsilon: f64) -> Result<GradCheck> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    model.check_len(x.len())?;
    let xm = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let t = Array1::from(vec![model.config.target.forward(actual_ms)]);
    let (_, grads) = model.gradients(xm, &t);
    let analytic: Vec<f64> =
        grads.iter().flat_map(|(gw, gb)| gw.iter().chain(gb.iter()).copied().collect::<Vec<_>>()).collect();
    let base_mask = model.mask(x);
    let mut probe = model.clone();
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + epsilon;
        let (plus, plus_mask) = (probe.sample_loss(x, actual_ms), probe.mask(x));
        *probe.param_mut(i) = orig - epsilon;
        let (minus, minus_mask) = (probe.sample_loss(x, actual_ms), probe.mask(x));
        *probe.param_mut(i) = orig;
        if plus_mask != base_mask || minus_mask != base_mask {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        out.max_rel_error = out.max_rel_error.max((a - numeric).abs() / (a.abs() + 1e-8));
        out.checked += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    format_version: u32,
    spec_name: String,
    scheme: EncodingScheme,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    config: TrainConfig,
    layers: Vec<LayerRecord>,
}

pub fn model_to_string(model: &MlpModel) -> String {
    let layers = model
        .layers
        .iter()
        .map(|l| LayerRecord { weights: l.w.rows().into_iter().map(|r| r.to_vec()).collect(), bias: l.b.to_vec() })
        .collect();
    let ck = Checkpoint {
        format: MODEL_FORMAT_TAG.into(),
        format_version: MODEL_FORMAT_VERSION,
        spec_name: model.spec_name.clone(),
        scheme: model.scheme,
        input_mean: model.input_mean.clone(),
        input_std: model.input_std.clone(),
        config: model.config.clone(),
        layers,
    };
    serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
}

pub fn model_from_str(text: &str) -> Result<MlpModel> {
    let schema = |message: String| Error::from(PersistError::Schema { line: 0, message });
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT_TAG) {
        return Err(schema(format!("not a {MODEL_FORMAT_TAG} file")));
    }
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found > MODEL_FORMAT_VERSION {
        return Err(PersistError::VersionMismatch { found, supported: MODEL_FORMAT_VERSION }.into());
    }
    let ck: Checkpoint = serde_json::from_value(raw).map_err(|e| schema(e.to_string()))?;
    let mut width = ck.input_mean.len();
    if ck.input_std.len() != width || ck.input_std.iter().any(|s| s.is_nan() || *s <= 0.0) {
        return Err(schema("normalization statistics are inconsistent".into()));
    }
    let mut layers = Vec::new();
    for (i, rec) in ck.layers.into_iter().enumerate() {
        let out = rec.bias.len();
        if rec.weights.len() != width || rec.weights.iter().any(|r| r.len() != out) {
            return Err(schema(format!("layer {i} does not chain from width {width}")));
        }
        let w = Array2::from_shape_vec((width, out), rec.weights.concat()).expect("shape checked");
        layers.push(Layer { w, b: Array1::from(rec.bias) });
        width = out;
    }
    if layers.is_empty() || width != 1 {
        return Err(schema("network must end in a single output".into()));
    }
    Ok(MlpModel {
        spec_name: ck.spec_name,
        scheme: ck.scheme,
        input_mean: ck.input_mean,
        input_std: ck.input_std,
        config: ck.config,
        layers,
    })
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_string(model)).map_err(PersistError::from)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let text = fs::read_to_string(path).map_err(PersistError::from)?;
    model_from_str(&text)
}

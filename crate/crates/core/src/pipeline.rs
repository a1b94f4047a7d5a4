//! The train, evaluate, extend loop.
//!
//! An initial dataset is sampled and measured, a predictor is trained and
//! scored on a fixed held-out set, and while the accuracy target is missed
//! the dataset grows: bins below the threshold receive a larger share of the
//! next samples. Each round retrains from scratch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archspace::{make_bins, sample_bins, sample_features, ArchConfig, DepthBins, SupernetSpec};
use crate::dataset::LatencyDataset;
use crate::encoding::EncodingScheme;
use crate::error::{BackendError, Error, Result};
use crate::measurement::{
    inject_references, measure_batch, qc_check, MeasurementBackend, DEFAULT_QC_THRESHOLD, DEFAULT_REFERENCE_COUNT,
    DEFAULT_RUNS_PER_ARCH,
};
use crate::par::Execution;
use crate::predictor::{evaluate, train, EvalReport, EvalStrategy, MlpModel, TrainConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    #[default]
    Balanced,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingStrategy::Random),
            "balanced" => Ok(SamplingStrategy::Balanced),
            other => Err(Error::InvalidArgument(format!("unknown sampling strategy '{other}' (random|balanced)"))),
        }
    }
}

/// User inputs of one run.
///
/// `train.seed` is ignored: every round trains with a seed derived from
/// `seed`, recorded in the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsmConfig {
    pub strategy: SamplingStrategy,
    pub n_initial: usize,
    pub n_step: usize,
    /// Weight of bins below the accuracy threshold.
    pub w_below: f64,
    /// Weight of bins at or above it.
    pub w_above: f64,
    pub scheme: EncodingScheme,
    pub eval: EvalStrategy,
    pub n_bins: usize,
    pub acc_th: f64,
    pub max_iterations: usize,
    pub test_size: usize,
    pub runs_per_arch: usize,
    pub n_refs: usize,
    pub qc_threshold: f64,
    /// Re-measurement attempts for batches flagged by QC.
    pub qc_retries: usize,
    /// Trainable archs per measurement batch; references are added to each.
    pub batch_size: usize,
    /// Largest tolerated fraction of failed archs in a batch.
    pub max_failure_fraction: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for EsmConfig {
    fn default() -> Self {
        EsmConfig {
            strategy: SamplingStrategy::Balanced,
            n_initial: 300,
            n_step: 100,
            w_below: 3.0,
            w_above: 1.0,
            scheme: EncodingScheme::Fcc,
            eval: EvalStrategy::BinWise,
            n_bins: 4,
            acc_th: 0.9,
            max_iterations: 50,
            test_size: 1000,
            runs_per_arch: DEFAULT_RUNS_PER_ARCH,
            n_refs: DEFAULT_REFERENCE_COUNT,
            qc_threshold: DEFAULT_QC_THRESHOLD,
            qc_retries: 2,
            batch_size: 100,
            max_failure_fraction: 0.05,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl EsmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_bins < 1 {
            return bad("n_bins must be >= 1".into());
        }
        if self.strategy == SamplingStrategy::Balanced && self.n_initial < self.n_bins {
            return bad(format!(
                "n_initial ({}) must be >= n_bins ({}) for balanced sampling",
                self.n_initial, self.n_bins
            ));
        }
        if self.n_initial < 1 || self.n_step < 1 {
            return bad("n_initial and n_step must be >= 1".into());
        }
        if !(self.w_below > 0.0 && self.w_above > 0.0) {
            return bad("extension weights must be positive".into());
        }
        if !(self.acc_th >= 0.0 && self.acc_th <= 1.0) {
            return bad(format!("acc_th must be in [0, 1], got {}", self.acc_th));
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1".into());
        }
        if self.test_size < self.n_bins {
            return bad("test_size must be >= n_bins".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must be in [0, 1]".into());
        }
        if self.qc_threshold.is_nan() || self.qc_threshold < 0.0 {
            return bad("qc_threshold must be >= 0".into());
        }
        self.train.validate()
    }
}

// ---------------------------------------------------------------------------
// Extension allocation

/// How many new samples to draw, and where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Count per depth bin.
    PerBin(Vec<usize>),
    /// Count drawn uniformly from the whole space.
    Anywhere(usize),
}

impl Allocation {
    pub fn total(&self) -> usize {
        match self {
            Allocation::PerBin(c) => c.iter().sum(),
            Allocation::Anywhere(n) => *n,
        }
    }
}

/// Splits `n_step` new samples over bins by accuracy.
///
/// With `B` bins below `acc_th` and `A` at or above it, each below bin gets
/// `ceil(n_step * w_below / N)` and each above bin `ceil(n_step * w_above / N)`
/// where `N = w_below * B + w_above * A`. Bins without accuracy data count as
/// below. The ceilings can push the total up to `n_step + n_bins`.
pub fn allocate_extension(
    bin_accs: &[Option<f64>],
    acc_th: f64,
    w_below: f64,
    w_above: f64,
    n_step: usize,
) -> Result<Vec<usize>> {
    if !(w_below > 0.0 && w_above > 0.0) {
        return Err(Error::InvalidArgument("extension weights must be positive".into()));
    }
    if n_step < 1 {
        return Err(Error::InvalidArgument("n_step must be >= 1".into()));
    }
    if bin_accs.iter().all(Option::is_none) {
        return Err(Error::InvalidArgument("no bin has accuracy data".into()));
    }
    let below: Vec<bool> = bin_accs.iter().map(|a| a.is_none_or(|a| a < acc_th)).collect();
    let n_below = below.iter().filter(|&&b| b).count() as f64;
    let n_above = below.len() as f64 - n_below;
    let norm = w_below * n_below + w_above * n_above;
    // The slack keeps exact quotients such as 100 * 1 / 4 from ceiling upward.
    let share = |w: f64| (n_step as f64 * w / norm - 1e-9).ceil().max(0.0) as usize;
    Ok(below.iter().map(|&b| share(if b { w_below } else { w_above })).collect())
}

// ---------------------------------------------------------------------------
// Measurement with references and QC

/// Measures architectures in reference-injected batches and enforces QC.
pub struct Measurer<'a> {
    pub backend: &'a mut dyn MeasurementBackend,
    pub runs_per_arch: usize,
    pub batch_size: usize,
    pub qc_threshold: f64,
    pub qc_retries: usize,
    pub max_failure_fraction: f64,
    pub seed: u64,
}

impl<'a> Measurer<'a> {
    pub fn new(backend: &'a mut dyn MeasurementBackend, cfg: &EsmConfig) -> Self {
        Measurer {
            backend,
            runs_per_arch: cfg.runs_per_arch,
            batch_size: cfg.batch_size,
            qc_threshold: cfg.qc_threshold,
            qc_retries: cfg.qc_retries,
            max_failure_fraction: cfg.max_failure_fraction,
            seed: seed::derive(cfg.seed, "measure"),
        }
    }

    fn measure_one(
        &mut self,
        ds: &LatencyDataset,
        archs: &[ArchConfig],
        batch_id: &str,
        attempt: u64,
    ) -> Result<crate::measurement::BatchReport> {
        let entries = inject_references(archs.to_vec(), &ds.refs);
        let stream = seed::derive_indexed(self.seed, "attempt", attempt);
        let report = measure_batch(self.backend, &entries, self.runs_per_arch, batch_id, stream)?;
        let failed = report.failures.len();
        if failed as f64 > self.max_failure_fraction * entries.len() as f64 {
            return Err(
                BackendError::TooManyFailures { batch_id: batch_id.into(), failed, total: entries.len() }.into()
            );
        }
        Ok(report)
    }

    /// Appends measurements of `archs` to `ds` as batches `<prefix>-b<j>`, then
    /// runs QC over the dataset's whole reference history.
    pub fn measure_into(&mut self, ds: &mut LatencyDataset, archs: &[ArchConfig], prefix: &str) -> Result<()> {
        for (j, chunk) in archs.chunks(self.batch_size).enumerate() {
            let report = self.measure_one(ds, chunk, &format!("{prefix}-b{j}"), 0)?;
            ds.append_batch(&report);
        }
        self.enforce_qc(ds)
    }

    /// Re-measures outlier batches until QC passes or retries run out.
    pub fn enforce_qc(&mut self, ds: &mut LatencyDataset) -> Result<()> {
        if ds.refs.is_empty() {
            return Ok(());
        }
        for attempt in 0..=self.qc_retries {
            let history = ds.reference_history();
            let report = match qc_check(&history, self.qc_threshold) {
                Ok(r) => r,
                Err(Error::InsufficientHistory { .. }) => {
                    log::debug!("qc skipped: fewer than two batches with every reference");
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            if report.pass {
                return Ok(());
            }
            if attempt == self.qc_retries {
                return Err(Error::QcFailed { batches: report.outlier_batches, attempts: self.qc_retries });
            }
            for batch_id in &report.outlier_batches {
                log::warn!("qc: re-measuring batch {batch_id} (attempt {})", attempt + 1);
                let archs: Vec<ArchConfig> = ds
                    .samples
                    .iter()
                    .filter(|s| &s.batch_id == batch_id && !s.is_reference())
                    .map(|s| s.arch.clone())
                    .collect();
                let report = self.measure_one(ds, &archs, batch_id, attempt as u64 + 1)?;
                ds.replace_batch(&report);
            }
        }
        unreachable!("loop returns on its last attempt")
    }
}

/// Draws the architectures an allocation asks for.
pub fn sample_allocation(
    spec: &SupernetSpec,
    bins: &DepthBins,
    allocation: &Allocation,
    seed: u64,
) -> Result<Vec<ArchConfig>> {
    let mut rng = seed::rng(seed);
    match allocation {
        Allocation::PerBin(counts) => {
            if counts.len() != bins.n_bins {
                return Err(Error::LengthMismatch { expected: bins.n_bins, got: counts.len() });
            }
            sample_bins(spec, bins, counts, &mut rng)
        }
        Allocation::Anywhere(n) => Ok((0..*n)
            .map(|_| {
                let depths = spec
                    .units
                    .iter()
                    .map(|u| u.depth_options[rand::Rng::random_range(&mut rng, 0..u.depth_options.len())])
                    .collect();
                sample_features(spec, depths, &mut rng)
            })
            .collect()),
    }
}

/// Samples per `allocation`, measures, and returns the next dataset version.
pub fn extend_dataset(
    ds: &LatencyDataset,
    allocation: &Allocation,
    measurer: &mut Measurer,
    batch_prefix: &str,
    seed: u64,
) -> Result<LatencyDataset> {
    let archs = sample_allocation(&ds.spec, &ds.bins, allocation, seed)?;
    let mut next = ds.clone();
    next.version += 1;
    if !archs.is_empty() {
        measurer.measure_into(&mut next, &archs, batch_prefix)?;
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// The loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Trainable samples in the dataset this round trained on.
    pub dataset_size: usize,
    /// Reference measurements taken so far (not used for training).
    pub reference_measurements: usize,
    pub per_bin: Vec<Option<f64>>,
    pub overall: f64,
    pub pass: bool,
    pub train_seed: u64,
    /// Samples requested for the next round; empty on the last round.
    pub allocation: Option<Allocation>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsmHistory {
    pub strategy: SamplingStrategy,
    pub scheme: EncodingScheme,
    pub acc_th: f64,
    pub seed: u64,
    pub converged: bool,
    pub records: Vec<IterationRecord>,
}

impl EsmHistory {
    /// Trainable samples measured up to the final round.
    pub fn final_size(&self) -> usize {
        self.records.last().map_or(0, |r| r.dataset_size)
    }
}

pub struct EsmOutcome {
    pub model: MlpModel,
    pub history: EsmHistory,
    pub dataset: LatencyDataset,
    pub test: LatencyDataset,
    pub report: EvalReport,
}

/// Observers for the artifacts of a run. Every method defaults to a no-op.
pub trait EsmHooks {
    fn on_test_set(&mut self, _test: &LatencyDataset) -> Result<()> {
        Ok(())
    }

    fn on_dataset(&mut self, _ds: &LatencyDataset) -> Result<()> {
        Ok(())
    }

    fn on_iteration(&mut self, _record: &IterationRecord, _report: &EvalReport, _model: &MlpModel) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl EsmHooks for NoHooks {}

/// Runs the loop until the evaluation passes or `max_iterations` rounds have
/// been trained. Non-convergence is reported in the history, not as an error.
pub fn run_esm(
    spec: &SupernetSpec,
    cfg: &EsmConfig,
    backend: &mut dyn MeasurementBackend,
    exec: Execution,
    hooks: &mut dyn EsmHooks,
) -> Result<EsmOutcome> {
    spec.validate()?;
    cfg.validate()?;
    let bins = make_bins(spec, cfg.n_bins)?;
    let refs = crate::archspace::sample_random(spec, cfg.n_refs, seed::derive(cfg.seed, "refs"))?;
    let mut ds = LatencyDataset::new(spec.clone(), cfg.scheme, bins.clone(), refs, backend.id())?;
    ds.seeds.insert("root".into(), cfg.seed);
    let mut measurer = Measurer::new(backend, cfg);

    // Held out once, before any training data exists.
    let test_seed = seed::derive(cfg.seed, "test");
    let mut test = ds.clone();
    test.seeds.insert("test".into(), test_seed);
    let test_archs = crate::archspace::sample_balanced(spec, cfg.test_size, &bins, test_seed)?;
    measurer.measure_into(&mut test, &test_archs, "test")?;
    hooks.on_test_set(&test)?;

    let initial = match cfg.strategy {
        SamplingStrategy::Balanced => Allocation::PerBin(crate::archspace::balanced_counts(cfg.n_initial, cfg.n_bins)),
        SamplingStrategy::Random => Allocation::Anywhere(cfg.n_initial),
    };
    let initial_seed = seed::derive(cfg.seed, "sample-initial");
    ds.seeds.insert("sample-initial".into(), initial_seed);
    let archs = sample_allocation(spec, &bins, &initial, initial_seed)?;
    measurer.measure_into(&mut ds, &archs, "it0")?;
    hooks.on_dataset(&ds)?;

    let mut records = Vec::new();
    let mut iteration = 0;
    loop {
        let started = Instant::now();
        let train_seed = seed::derive_indexed(cfg.seed, "train", iteration as u64);
        let tcfg = TrainConfig { seed: train_seed, ..cfg.train.clone() };
        let model = train(&ds, &tcfg, exec)?;
        let report = evaluate(&model, &test, cfg.eval, cfg.acc_th, exec)?;
        let last = report.pass || iteration + 1 >= cfg.max_iterations;
        let allocation = if last {
            None
        } else {
            Some(match cfg.strategy {
                SamplingStrategy::Balanced => Allocation::PerBin(allocate_extension(
                    &report.per_bin,
                    cfg.acc_th,
                    cfg.w_below,
                    cfg.w_above,
                    cfg.n_step,
                )?),
                SamplingStrategy::Random => Allocation::Anywhere(cfg.n_step),
            })
        };
        let record = IterationRecord {
            iteration,
            dataset_size: ds.trainable_len(),
            reference_measurements: ds.samples.len() - ds.trainable_len(),
            per_bin: report.per_bin.clone(),
            overall: report.overall,
            pass: report.pass,
            train_seed,
            allocation: allocation.clone(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "round {iteration}: {} samples, overall {:.4}, worst bin {:.4}, pass {}",
            record.dataset_size,
            record.overall,
            report.min_bin().unwrap_or(f64::NAN),
            record.pass
        );
        hooks.on_iteration(&record, &report, &model)?;
        records.push(record);

        let Some(allocation) = allocation else {
            let history = EsmHistory {
                strategy: cfg.strategy,
                scheme: cfg.scheme,
                acc_th: cfg.acc_th,
                seed: cfg.seed,
                converged: report.pass,
                records,
            };
            return Ok(EsmOutcome { model, history, dataset: ds, test, report });
        };
        iteration += 1;
        let sample_seed = seed::derive_indexed(cfg.seed, "sample", iteration as u64);
        ds = extend_dataset(&ds, &allocation, &mut measurer, &format!("it{iteration}"), sample_seed)?;
        hooks.on_dataset(&ds)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::resnet;
    use crate::measurement::{OracleBackend, OracleParams};

    #[test]
    fn allocation_hand_example() {
        let accs = [Some(0.8), Some(0.85), Some(0.95), Some(0.97), Some(0.99)];
        let a = allocate_extension(&accs, 0.9, 3.0, 1.0, 100).unwrap();
        assert_eq!(a, vec![34, 34, 12, 12, 12]);
        assert_eq!(a.iter().sum::<usize>(), 104);
    }

    #[test]
    fn allocation_symmetric_cases() {
        let above = [Some(0.95); 4];
        assert_eq!(allocate_extension(&above, 0.9, 1.0, 1.0, 100).unwrap(), vec![25; 4]);
        assert_eq!(allocate_extension(&[Some(0.95); 3], 0.9, 1.0, 1.0, 100).unwrap(), vec![34; 3]);
        let below = [Some(0.5); 4];
        assert_eq!(
            allocate_extension(&below, 0.9, 3.0, 1.0, 100).unwrap(),
            allocate_extension(&below, 0.9, 3.0, 7.0, 100).unwrap()
        );
        assert_eq!(allocate_extension(&[None, Some(0.99)], 0.9, 3.0, 1.0, 100).unwrap(), vec![75, 25]);
        assert!(allocate_extension(&[None, None], 0.9, 3.0, 1.0, 100).is_err());
        assert!(allocate_extension(&[Some(1.0)], 0.9, 0.0, 1.0, 100).is_err());
    }

    fn quick_cfg(seed: u64) -> EsmConfig {
        EsmConfig {
            n_initial: 40,
            n_step: 20,
            test_size: 40,
            runs_per_arch: 10,
            n_refs: 2,
            batch_size: 20,
            max_iterations: 3,
            seed,
            train: TrainConfig { epochs: 5, hidden: vec![8, 8], ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn zero_threshold_stops_immediately() {
        let spec = resnet();
        let mut backend = OracleBackend::new(spec.clone(), OracleParams::default()).unwrap();
        let cfg = EsmConfig { acc_th: 0.0, ..quick_cfg(1) };
        let out = run_esm(&spec, &cfg, &mut backend, Execution::default(), &mut NoHooks).unwrap();
        assert!(out.history.converged);
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.dataset.trainable_len(), 40);
    }

    #[test]
    fn unreachable_threshold_stops_at_limit() {
        let spec = resnet();
        let mut backend = OracleBackend::new(spec.clone(), OracleParams::default()).unwrap();
        let cfg = EsmConfig { acc_th: 1.0, ..quick_cfg(2) };
        let out = run_esm(&spec, &cfg, &mut backend, Execution::default(), &mut NoHooks).unwrap();
        assert!(!out.history.converged);
        let sizes: Vec<usize> = out.history.records.iter().map(|r| r.dataset_size).collect();
        assert_eq!(sizes.len(), 3);
        assert!(sizes.windows(2).all(|w| w[1] > w[0]));
        for w in sizes.windows(2) {
            let grew = w[1] - w[0];
            assert!((20..=24).contains(&grew), "{grew}");
        }
        let train_ids: std::collections::HashSet<_> = out.dataset.samples.iter().map(|s| &s.id).collect();
        assert!(out.test.samples.iter().all(|s| !train_ids.contains(&s.id)));
    }

    #[test]
    fn runs_are_reproducible() {
        let spec = resnet();
        let cfg = EsmConfig { acc_th: 1.0, max_iterations: 2, ..quick_cfg(3) };
        let run = || {
            let mut backend = OracleBackend::new(spec.clone(), OracleParams::default()).unwrap();
            run_esm(&spec, &cfg, &mut backend, Execution::default(), &mut NoHooks).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.model, b.model);
        let strip = |h: &EsmHistory| {
            h.records.iter().map(|r| (r.dataset_size, r.per_bin.clone(), r.train_seed)).collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.history), strip(&b.history));
    }

    #[test]
    fn extension_counts_land_in_their_bins() {
        let spec = resnet();
        let mut backend = OracleBackend::new(spec.clone(), OracleParams::default()).unwrap();
        let cfg = quick_cfg(4);
        let bins = make_bins(&spec, 4).unwrap();
        let ds = LatencyDataset::new(spec.clone(), EncodingScheme::Fcc, bins, vec![], "oracle".into()).unwrap();
        let mut m = Measurer::new(&mut backend, &cfg);
        let same = extend_dataset(&ds, &Allocation::PerBin(vec![0; 4]), &mut m, "x", 1).unwrap();
        assert_eq!(same.samples, ds.samples);
        assert_eq!(same.version, ds.version + 1);
        let grown = extend_dataset(&same, &Allocation::PerBin(vec![0, 0, 34, 0]), &mut m, "y", 2).unwrap();
        assert_eq!(grown.trainable_len(), 34);
        assert!(grown.trainable().all(|s| grown.bin_of(s).unwrap() == 2));
        let again = extend_dataset(&grown, &Allocation::Anywhere(5), &mut m, "z", 3).unwrap();
        assert!(grown.samples.iter().all(|s| again.samples.iter().any(|t| t.id == s.id)));
    }

    #[test]
    fn config_validation() {
        assert!(EsmConfig::default().validate().is_ok());
        assert!(EsmConfig { n_initial: 3, ..Default::default() }.validate().is_err());
        assert!(EsmConfig { w_below: 0.0, ..Default::default() }.validate().is_err());
        assert!(EsmConfig { acc_th: 1.5, ..Default::default() }.validate().is_err());
        assert!(EsmConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
    }
}

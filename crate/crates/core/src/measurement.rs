//! Ground-truth latency collection.
//!
//! Backends return raw per-inference latencies; [`measure_batch`] collects them
//! one architecture at a time and reduces each list with a 20% two-sided
//! trimmed mean. Fixed reference architectures are interleaved into every
//! batch and [`qc_check`] compares their readings across batches.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archspace::{ArchConfig, Scope, SupernetSpec};
use crate::error::{BackendError, Error, Result};
use crate::par::{self, Execution};
use crate::seed;

pub const DEFAULT_RUNS_PER_ARCH: usize = 150;
pub const DEFAULT_QC_THRESHOLD: f64 = 0.03;
pub const DEFAULT_REFERENCE_COUNT: usize = 5;
pub const DEFAULT_TIMEOUT_SECS: u64 = 600;
pub const MIN_RUNS: usize = 5;

/// Feature names the oracle reads as kernel size and width-expansion ratio.
pub const KERNEL_DIM: &str = "kernel_size";
pub const RATIO_DIM: &str = "expansion_ratio";

// Slack for the inclusive threshold comparison.
const THRESHOLD_EPS: f64 = 1e-12;

/// Sorts, drops `floor(n/5)` runs from each end and averages the rest.
pub fn aggregate_latency(runs: &[f64]) -> Result<f64> {
    if runs.len() < MIN_RUNS {
        return Err(Error::TooFewRuns { got: runs.len(), min: MIN_RUNS });
    }
    if runs.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidArgument("non-finite latency run".into()));
    }
    let mut sorted = runs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let trim = runs.len() / 5;
    let kept = &sorted[trim..runs.len() - trim];
    // Averaging offsets from the first kept run keeps identical runs exact.
    let base = kept[0];
    Ok(base + kept.iter().map(|x| x - base).sum::<f64>() / kept.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeasurement {
    pub arch_id: String,
    pub runs: Vec<f64>,
    pub backend_id: String,
    pub batch_id: String,
}

impl RawMeasurement {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.runs.is_empty() {
            return Err("no runs".into());
        }
        if let Some(bad) = self.runs.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(format!("non-positive or non-finite latency {bad}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    /// Upper bound on runs per arch, if the backend has one.
    pub max_runs_per_arch: Option<usize>,
    /// Same archs and seed give identical runs.
    pub deterministic: bool,
}

/// Per-arch outcome from a backend: raw runs or a failure reason.
pub type ArchRuns = std::result::Result<Vec<f64>, String>;

/// A source of raw latency runs.
///
/// Exclusive access (`&mut self`) is what serializes measurements: only one
/// architecture is in flight per backend at any time.
pub trait MeasurementBackend {
    fn id(&self) -> String;

    fn capabilities(&self) -> BackendCapabilities;

    fn measure_arch(&mut self, batch_id: &str, arch_id: &str, arch: &ArchConfig, runs: usize, seed: u64) -> ArchRuns;

    /// Measures a batch in order. Backends that talk to a device in whole
    /// batches override this; a returned `Err` fails the whole batch.
    fn measure_many(
        &mut self,
        batch_id: &str,
        items: &[(String, &ArchConfig)],
        runs: usize,
        seed: u64,
    ) -> std::result::Result<Vec<ArchRuns>, BackendError> {
        Ok(items.iter().map(|(id, arch)| self.measure_arch(batch_id, id, arch, runs, seed)).collect())
    }
}

// ---------------------------------------------------------------------------
// Synthetic oracle

/// Coefficients of the synthetic latency model.
///
/// Mean latency is a per-block additive term scaled by stage width, plus a
/// penalty per kernel-size change between neighbouring blocks and a step
/// cost per started wave of `rho` blocks. Runs carry multiplicative log-normal
/// noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub rho: usize,
    pub sigma: f64,
    pub width_ref: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams { a1: 0.002, a2: 0.05, a3: 0.5, alpha: 0.12, gamma: 0.3, rho: 4, sigma: 0.01, width_ref: 256.0 }
    }
}

impl OracleParams {
    /// Purely additive, noiseless world: a lookup table is exact here.
    pub fn additive() -> Self {
        OracleParams { alpha: 0.0, gamma: 0.0, sigma: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = [self.a1, self.a2, self.a3, self.alpha, self.gamma, self.sigma];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidArgument("oracle coefficients must be finite and >= 0".into()));
        }
        if self.rho < 1 {
            return Err(Error::InvalidArgument("oracle rho must be >= 1".into()));
        }
        if !(self.width_ref.is_finite() && self.width_ref > 0.0) {
            return Err(Error::InvalidArgument("oracle width_ref must be positive".into()));
        }
        Ok(())
    }
}

/// Where a feature lives in an arch: which slot of which list.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Block(usize, usize),
    Unit(usize, usize),
    Absent,
}

fn locate(spec: &SupernetSpec, name: &str) -> Slot {
    let Some(d) = spec.feature_index(name) else { return Slot::Absent };
    match spec.features[d].scope {
        Scope::PerBlock => Slot::Block(d, spec.per_block_dims().iter().position(|&x| x == d).unwrap()),
        Scope::PerUnit => Slot::Unit(d, spec.per_unit_dims().iter().position(|&x| x == d).unwrap()),
    }
}

fn feature_at(spec: &SupernetSpec, slot: Slot, arch: &ArchConfig, u: usize, b: usize) -> f64 {
    match slot {
        Slot::Block(d, s) => spec.features[d].options[arch.block_features[u][b][s]],
        Slot::Unit(d, s) => spec.features[d].options[arch.unit_features[u][s]],
        Slot::Absent => 1.0,
    }
}

/// Noise-free oracle latency in ms.
pub fn oracle_mean(spec: &SupernetSpec, arch: &ArchConfig, params: &OracleParams) -> f64 {
    let kernel = locate(spec, KERNEL_DIM);
    let ratio = locate(spec, RATIO_DIM);
    let mut additive = 0.0;
    let mut transitions = 0usize;
    for (u, unit) in spec.units.iter().enumerate() {
        let scale = unit.stage_width.map_or(1.0, |w| w as f64 / params.width_ref);
        let mut prev_k = None;
        for b in 0..arch.unit_depths[u] {
            let k = feature_at(spec, kernel, arch, u, b);
            let e = feature_at(spec, ratio, arch, u, b);
            additive += scale * (params.a1 * k * k + params.a2) * (params.a3 + e);
            if prev_k.is_some_and(|p| p != k) {
                transitions += 1;
            }
            prev_k = Some(k);
        }
    }
    let waves = arch.total_depth().div_ceil(params.rho);
    additive + params.alpha * transitions as f64 + params.gamma * waves as f64
}

/// Noisy oracle runs: `mean * exp(sigma * g)`, `g` standard normal.
pub fn oracle_latency(
    spec: &SupernetSpec,
    arch: &ArchConfig,
    params: &OracleParams,
    runs: usize,
    seed: u64,
) -> Vec<f64> {
    let mean = oracle_mean(spec, arch, params);
    let mut rng = seed::rng(seed);
    (0..runs)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            mean * (params.sigma * g).exp()
        })
        .collect()
}

/// Noise-free latencies for many archs.
pub fn oracle_means(spec: &SupernetSpec, archs: &[ArchConfig], params: &OracleParams, exec: Execution) -> Vec<f64> {
    par::map(exec, archs, |a| oracle_mean(spec, a, params))
}

/// Backend that samples runs from the synthetic oracle.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    pub spec: SupernetSpec,
    pub params: OracleParams,
}

impl OracleBackend {
    pub fn new(spec: SupernetSpec, params: OracleParams) -> Result<Self> {
        spec.validate()?;
        params.validate()?;
        Ok(OracleBackend { spec, params })
    }
}

impl MeasurementBackend for OracleBackend {
    fn id(&self) -> String {
        let p = &self.params;
        format!(
            "oracle(a1={},a2={},a3={},alpha={},gamma={},rho={},sigma={},width_ref={})",
            p.a1, p.a2, p.a3, p.alpha, p.gamma, p.rho, p.sigma, p.width_ref
        )
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { max_runs_per_arch: None, deterministic: true }
    }

    fn measure_arch(&mut self, batch_id: &str, arch_id: &str, arch: &ArchConfig, runs: usize, seed: u64) -> ArchRuns {
        arch.validate(&self.spec).map_err(|e| e.to_string())?;
        let stream = seed::derive(seed, &format!("{batch_id}|{arch_id}"));
        Ok(oracle_latency(&self.spec, arch, &self.params, runs, stream))
    }
}

// ---------------------------------------------------------------------------
// External command backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalArch {
    pub arch_id: String,
    pub spec_name: String,
    pub unit_depths: Vec<usize>,
    pub block_features: Vec<Vec<Vec<usize>>>,
    pub unit_features: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRequest {
    pub batch_id: String,
    pub runs_per_arch: usize,
    pub archs: Vec<ExternalArch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchResult {
    pub arch_id: String,
    pub runs_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureResponse {
    pub batch_id: String,
    pub results: Vec<ArchResult>,
}

/// Runs a user command per batch: one JSON request line on stdin, one JSON
/// response line on stdout.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub command: String,
    pub timeout: Duration,
}

impl ExternalBackend {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        ExternalBackend { command: command.into(), timeout }
    }

    fn exchange(&self, batch_id: &str, request: &str) -> std::result::Result<String, BackendError> {
        let spawn_err = |e: std::io::Error| BackendError::Spawn { batch_id: batch_id.into(), message: e.to_string() };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(spawn_err)?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload = format!("{request}\n");
        let writer = std::thread::spawn(move || {
            // a command that exits without reading closes the pipe; that is
            // reported through its exit status instead
            let _ = stdin.write_all(payload.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait().map_err(spawn_err)? {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(BackendError::Timeout { batch_id: batch_id.into(), seconds: self.timeout.as_secs() });
                }
                None => std::thread::sleep(Duration::from_millis(5)),
            }
        };
        let _ = writer.join();
        let out = reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(BackendError::NonZeroExit {
                batch_id: batch_id.into(),
                status: status.code().unwrap_or(-1),
                stderr: err.trim().to_string(),
            });
        }
        Ok(out)
    }
}

/// Matches a response against the request; protocol violations fail the batch,
/// bad latencies fail only their arch.
pub fn parse_response(
    batch_id: &str,
    requested: &[String],
    runs: usize,
    raw: &str,
) -> std::result::Result<Vec<ArchRuns>, BackendError> {
    let malformed = |message: String| BackendError::Malformed { batch_id: batch_id.into(), message };
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).ok_or_else(|| malformed("empty response".into()))?;
    let resp: MeasureResponse = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    if resp.batch_id != batch_id {
        return Err(malformed(format!("response is for batch `{}`", resp.batch_id)));
    }
    requested
        .iter()
        .map(|id| {
            let result = resp
                .results
                .iter()
                .find(|r| &r.arch_id == id)
                .ok_or_else(|| BackendError::MissingArch { batch_id: batch_id.into(), arch_id: id.clone() })?;
            if result.runs_ms.len() != runs {
                return Err(BackendError::RunCount {
                    batch_id: batch_id.into(),
                    arch_id: id.clone(),
                    expected: runs,
                    got: result.runs_ms.len(),
                });
            }
            Ok(match result.runs_ms.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
                Some(bad) => Err(format!("non-positive or non-finite latency {bad}")),
                None => Ok(result.runs_ms.clone()),
            })
        })
        .collect()
}

impl MeasurementBackend for ExternalBackend {
    fn id(&self) -> String {
        format!("external({})", self.command)
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { max_runs_per_arch: None, deterministic: false }
    }

    fn measure_arch(&mut self, batch_id: &str, arch_id: &str, arch: &ArchConfig, runs: usize, seed: u64) -> ArchRuns {
        let items = [(arch_id.to_string(), arch)];
        match self.measure_many(batch_id, &items, runs, seed) {
            Ok(mut v) => v.pop().unwrap_or_else(|| Err("empty result".into())),
            Err(e) => Err(e.to_string()),
        }
    }

    fn measure_many(
        &mut self,
        batch_id: &str,
        items: &[(String, &ArchConfig)],
        runs: usize,
        _seed: u64,
    ) -> std::result::Result<Vec<ArchRuns>, BackendError> {
        let request = MeasureRequest {
            batch_id: batch_id.into(),
            runs_per_arch: runs,
            archs: items
                .iter()
                .map(|(id, a)| ExternalArch {
                    arch_id: id.clone(),
                    spec_name: a.spec_name.clone(),
                    unit_depths: a.unit_depths.clone(),
                    block_features: a.block_features.clone(),
                    unit_features: a.unit_features.clone(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&request).expect("request serializes");
        let raw = self.exchange(batch_id, &line)?;
        let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
        parse_response(batch_id, &ids, runs, &raw)
    }
}

// ---------------------------------------------------------------------------
// Batches and references

/// One arch scheduled in a measurement batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntry {
    pub arch: ArchConfig,
    /// Index into the reference list when this entry is a reference model.
    pub reference: Option<usize>,
}

/// Interleaves `refs` evenly into `batch`. Reference `j` is placed after
/// `floor((j + 1) * n / (r + 1))` batch items.
pub fn inject_references(batch: Vec<ArchConfig>, refs: &[ArchConfig]) -> Vec<BatchEntry> {
    let n = batch.len();
    let r = refs.len();
    let mut out = Vec::with_capacity(n + r);
    let mut next_ref = 0;
    let mut items = batch.into_iter();
    for i in 0..=n {
        while next_ref < r && (next_ref + 1) * n / (r + 1) == i {
            out.push(BatchEntry { arch: refs[next_ref].clone(), reference: Some(next_ref) });
            next_ref += 1;
        }
        if let Some(arch) = items.next() {
            out.push(BatchEntry { arch, reference: None });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredArch {
    pub arch_id: String,
    pub arch: ArchConfig,
    pub reference: Option<usize>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchFailure {
    pub arch_id: String,
    pub reference: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub batch_id: String,
    pub backend_id: String,
    pub measured: Vec<MeasuredArch>,
    pub failures: Vec<ArchFailure>,
}

impl BatchReport {
    /// Reading of each reference in this batch, `None` where it failed.
    pub fn reference_readings(&self, n_refs: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; n_refs];
        for m in &self.measured {
            if let Some(j) = m.reference {
                if j < n_refs {
                    out[j] = Some(m.latency_ms);
                }
            }
        }
        out
    }
}

/// Ids used for batch entries: `<batch>/<i>` for trainable archs and
/// `<batch>/ref<j>` for references.
pub fn entry_ids(batch_id: &str, entries: &[BatchEntry]) -> Vec<String> {
    let mut next = 0;
    entries
        .iter()
        .map(|e| match e.reference {
            Some(j) => format!("{batch_id}/ref{j}"),
            None => {
                next += 1;
                format!("{batch_id}/{}", next - 1)
            }
        })
        .collect()
}

/// Measures every entry with `runs_per_arch` runs and aggregates each.
///
/// Per-arch failures (backend error, invalid runs) are recorded and the arch
/// is left out of `measured`.
pub fn measure_batch(
    backend: &mut dyn MeasurementBackend,
    entries: &[BatchEntry],
    runs_per_arch: usize,
    batch_id: &str,
    seed: u64,
) -> Result<BatchReport> {
    if runs_per_arch < MIN_RUNS {
        return Err(Error::TooFewRuns { got: runs_per_arch, min: MIN_RUNS });
    }
    if let Some(max) = backend.capabilities().max_runs_per_arch {
        if runs_per_arch > max {
            return Err(Error::InvalidArgument(format!("backend supports at most {max} runs per arch")));
        }
    }
    let ids = entry_ids(batch_id, entries);
    let items: Vec<(String, &ArchConfig)> = ids.iter().cloned().zip(entries.iter().map(|e| &e.arch)).collect();
    let outcomes = backend.measure_many(batch_id, &items, runs_per_arch, seed)?;
    let backend_id = backend.id();
    let mut report =
        BatchReport { batch_id: batch_id.into(), backend_id: backend_id.clone(), measured: vec![], failures: vec![] };
    for ((id, entry), outcome) in ids.into_iter().zip(entries).zip(outcomes) {
        let raw = outcome.and_then(|runs| {
            let m =
                RawMeasurement { arch_id: id.clone(), runs, backend_id: backend_id.clone(), batch_id: batch_id.into() };
            m.validate()?;
            if m.runs.len() != runs_per_arch {
                return Err(format!("{} runs, requested {runs_per_arch}", m.runs.len()));
            }
            aggregate_latency(&m.runs).map_err(|e| e.to_string())
        });
        match raw {
            Ok(latency_ms) => report.measured.push(MeasuredArch {
                arch_id: id,
                arch: entry.arch.clone(),
                reference: entry.reference,
                latency_ms,
            }),
            Err(reason) => {
                log::warn!("batch {batch_id}: arch {id} failed: {reason}");
                report.failures.push(ArchFailure { arch_id: id, reference: entry.reference, reason });
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Quality control

/// Reference readings from one batch, indexed by reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReadings {
    pub batch_id: String,
    pub readings: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub threshold: f64,
    /// `deviations[j]`: (batch id, relative deviation) for reference `j`.
    pub deviations: Vec<Vec<(String, f64)>>,
    pub outlier_batches: Vec<String>,
    pub pass: bool,
}

/// Flags batches whose reference readings drift from the references'
/// running means.
///
/// Batches are visited in order. Each reading is compared with the mean of
/// that reference's readings in earlier retained batches (the first reading
/// anchors the mean). A batch with any deviation above `threshold` is an
/// outlier and does not enter the running means. The threshold is inclusive.
pub fn qc_check(history: &[BatchReadings], threshold: f64) -> Result<QcReport> {
    let n_refs = history.iter().map(|b| b.readings.len()).max().unwrap_or(0);
    for j in 0..n_refs {
        let count = history.iter().filter(|b| b.readings.get(j).copied().flatten().is_some()).count();
        if count < 2 {
            return Err(Error::InsufficientHistory { reference: j, count });
        }
    }
    let mut sums = vec![0.0; n_refs];
    let mut counts = vec![0usize; n_refs];
    let mut deviations = vec![Vec::new(); n_refs];
    let mut outlier_batches = Vec::new();
    for batch in history {
        let mut devs = Vec::new();
        for (j, reading) in batch.readings.iter().enumerate() {
            let Some(x) = *reading else { continue };
            let dev = if counts[j] == 0 {
                0.0
            } else {
                let mean = sums[j] / counts[j] as f64;
                (x - mean).abs() / mean
            };
            devs.push((j, x, dev));
            deviations[j].push((batch.batch_id.clone(), dev));
        }
        if devs.iter().any(|&(_, _, d)| d > threshold + THRESHOLD_EPS) {
            outlier_batches.push(batch.batch_id.clone());
        } else {
            for (j, x, _) in devs {
                sums[j] += x;
                counts[j] += 1;
            }
        }
    }
    let pass = outlier_batches.is_empty();
    Ok(QcReport { threshold, deviations, outlier_batches, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{densenet, resnet, sample_random};

    fn readings(batches: &[&[f64]]) -> Vec<BatchReadings> {
        batches
            .iter()
            .enumerate()
            .map(|(i, r)| BatchReadings { batch_id: format!("b{i}"), readings: r.iter().map(|&x| Some(x)).collect() })
            .collect()
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_latency(&[5.0; 150]).unwrap(), 5.0);
        let runs: Vec<f64> = (1..=150).map(f64::from).collect();
        assert_eq!(aggregate_latency(&runs).unwrap(), 75.5);
        assert_eq!(aggregate_latency(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap(), 3.0);
        assert!(matches!(aggregate_latency(&[1.0; 4]), Err(Error::TooFewRuns { got: 4, .. })));
    }

    #[test]
    fn oracle_hand_value() {
        let spec = resnet();
        let arch = spec.minimum_arch();
        let m = oracle_mean(&spec, &arch, &OracleParams::default());
        assert!((m - 1.32).abs() < 1e-12, "{m}");
    }

    #[test]
    fn oracle_transitions_depend_on_order() {
        let spec = resnet();
        let mut a = spec.minimum_arch();
        a.unit_depths[0] = 3;
        a.block_features[0] = vec![vec![0, 0], vec![1, 0], vec![0, 0]];
        let mut b = a.clone();
        b.block_features[0] = vec![vec![0, 0], vec![0, 0], vec![1, 0]];
        let p = OracleParams::default();
        let diff = oracle_mean(&spec, &a, &p) - oracle_mean(&spec, &b, &p);
        assert!((diff - p.alpha).abs() < 1e-12);
        let add = OracleParams::additive();
        assert!((oracle_mean(&spec, &a, &add) - oracle_mean(&spec, &b, &add)).abs() < 1e-12);
    }

    #[test]
    fn oracle_noise_free_runs_aggregate_to_mean() {
        let spec = resnet();
        let params = OracleParams { sigma: 0.0, ..Default::default() };
        let mut backend = OracleBackend::new(spec.clone(), params).unwrap();
        let archs = sample_random(&spec, 10, 3).unwrap();
        let entries = inject_references(archs.clone(), &[]);
        let report = measure_batch(&mut backend, &entries, 150, "b0", 1).unwrap();
        for (m, a) in report.measured.iter().zip(&archs) {
            assert_eq!(m.latency_ms, oracle_mean(&spec, a, &params));
        }
    }

    #[test]
    fn oracle_backend_is_deterministic() {
        let spec = densenet();
        let archs = sample_random(&spec, 8, 3).unwrap();
        let entries = inject_references(archs, &[]);
        let run = || {
            let mut backend = OracleBackend::new(spec.clone(), OracleParams::default()).unwrap();
            measure_batch(&mut backend, &entries, 150, "b0", 42).unwrap()
        };
        assert_eq!(run(), run());
    }

    struct Flaky;

    impl MeasurementBackend for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn capabilities(&self) -> BackendCapabilities {
            BackendCapabilities { max_runs_per_arch: None, deterministic: true }
        }
        fn measure_arch(&mut self, _: &str, arch_id: &str, _: &ArchConfig, runs: usize, _: u64) -> ArchRuns {
            if arch_id.ends_with("/1") {
                Ok(vec![-1.0; runs])
            } else {
                Ok(vec![2.0; runs])
            }
        }
    }

    #[test]
    fn non_positive_latency_fails_the_arch() {
        let spec = resnet();
        let entries = inject_references(sample_random(&spec, 3, 0).unwrap(), &[]);
        let report = measure_batch(&mut Flaky, &entries, 10, "b7", 0).unwrap();
        assert_eq!(report.measured.len(), 2);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].arch_id, "b7/1");
    }

    #[test]
    fn references_interleave_evenly() {
        let spec = resnet();
        let batch = sample_random(&spec, 100, 1).unwrap();
        let refs = sample_random(&spec, 5, 2).unwrap();
        let entries = inject_references(batch.clone(), &refs);
        assert_eq!(entries.len(), 105);
        assert_eq!(entries.iter().filter(|e| e.reference.is_none()).count(), 100);
        let positions: Vec<usize> =
            entries.iter().enumerate().filter(|(_, e)| e.reference.is_some()).map(|(i, _)| i).collect();
        // ref j after floor((j+1)*100/6) items: 16, 33, 50, 66, 83
        assert_eq!(positions, vec![16, 34, 52, 69, 87]);
        let trainable: Vec<ArchConfig> =
            entries.iter().filter(|e| e.reference.is_none()).map(|e| e.arch.clone()).collect();
        assert_eq!(trainable, batch);

        assert_eq!(inject_references(batch.clone(), &[]).len(), 100);
        let small = inject_references(batch[..2].to_vec(), &refs);
        assert_eq!(small.iter().filter(|e| e.reference.is_some()).count(), 5);
        assert_eq!(inject_references(vec![], &refs).len(), 5);
    }

    #[test]
    fn qc_examples() {
        let same = qc_check(&readings(&[&[10.0, 4.0], &[10.0, 4.0], &[10.0, 4.0]]), 0.03).unwrap();
        assert!(same.pass);
        assert!(same.deviations.iter().flatten().all(|(_, d)| *d == 0.0));

        let drift = qc_check(&readings(&[&[10.0], &[10.0], &[10.5], &[10.0]]), 0.03).unwrap();
        assert_eq!(drift.outlier_batches, vec!["b2".to_string()]);
        assert!(!drift.pass);
        assert!((drift.deviations[0][2].1 - 0.05).abs() < 1e-12);

        let edge = qc_check(&readings(&[&[10.0, 10.0], &[10.3, 9.7]]), 0.03).unwrap();
        assert!(edge.pass, "{edge:?}");
    }

    #[test]
    fn qc_needs_two_readings_per_reference() {
        let err = qc_check(&readings(&[&[10.0, 5.0]]), 0.03).unwrap_err();
        assert!(matches!(err, Error::InsufficientHistory { reference: 0, count: 1 }));
        let mut h = readings(&[&[10.0, 5.0], &[10.0, 5.0]]);
        h[1].readings[1] = None;
        assert!(matches!(qc_check(&h, 0.03), Err(Error::InsufficientHistory { reference: 1, .. })));
    }

    #[test]
    fn qc_threshold_extremes() {
        let h = readings(&[&[10.0], &[10.4], &[9.0], &[10.0]]);
        assert!(qc_check(&h, 1.0).unwrap().pass);
        let strict = qc_check(&h, 0.0).unwrap();
        assert_eq!(strict.outlier_batches, vec!["b1".to_string(), "b2".to_string()]);
    }

    #[test]
    fn response_validation() {
        let ids = vec!["b/0".to_string(), "b/1".to_string()];
        let ok = r#"{"batch_id":"b","results":[{"arch_id":"b/1","runs_ms":[1,2,3,4,5]},{"arch_id":"b/0","runs_ms":[5,5,5,5,5]}]}"#;
        let parsed = parse_response("b", &ids, 5, ok).unwrap();
        assert_eq!(parsed[0].as_ref().unwrap(), &vec![5.0; 5]);
        assert_eq!(parsed[1].as_ref().unwrap(), &vec![1.0, 2.0, 3.0, 4.0, 5.0]);

        let missing = r#"{"batch_id":"b","results":[{"arch_id":"b/0","runs_ms":[5,5,5,5,5]}]}"#;
        match parse_response("b", &ids, 5, missing) {
            Err(BackendError::MissingArch { arch_id, .. }) => assert_eq!(arch_id, "b/1"),
            other => panic!("{other:?}"),
        }
        let short = r#"{"batch_id":"b","results":[{"arch_id":"b/0","runs_ms":[5]},{"arch_id":"b/1","runs_ms":[5]}]}"#;
        assert!(matches!(parse_response("b", &ids, 5, short), Err(BackendError::RunCount { .. })));
        let neg = r#"{"batch_id":"b","results":[{"arch_id":"b/0","runs_ms":[5,5,5,5,0]},{"arch_id":"b/1","runs_ms":[1,1,1,1,1]}]}"#;
        let parsed = parse_response("b", &ids, 5, neg).unwrap();
        assert!(parsed[0].is_err() && parsed[1].is_ok());
        assert!(matches!(parse_response("b", &ids, 5, "not json"), Err(BackendError::Malformed { .. })));
    }

    #[test]
    fn params_validation() {
        assert!(OracleParams::default().validate().is_ok());
        assert!(OracleParams { rho: 0, ..Default::default() }.validate().is_err());
        assert!(OracleParams { sigma: -0.1, ..Default::default() }.validate().is_err());
    }
}

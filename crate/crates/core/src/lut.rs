//! Additive lookup-table baseline.
//!
//! Every (unit, block feature combination, unit feature combination) gets a
//! cost in ms, profiled by appending probe blocks to the minimum architecture
//! and differencing. A prediction is a constant offset plus the cost of every
//! block. An affine bias correction fitted by least squares can be layered on
//! top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archspace::{ArchConfig, SupernetSpec};
use crate::dataset::{read_header, seal, unseal};
use crate::error::{BackendError, Error, PersistError, Result};
use crate::measurement::{measure_batch, BatchEntry, MeasurementBackend, DEFAULT_RUNS_PER_ARCH};
use crate::par::{self, Execution};

pub const LUT_FORMAT_TAG: &str = "latsurr-lut";
pub const LUT_FORMAT_VERSION: u32 = 1;

/// Default number of balanced samples used to fit the bias correction.
pub const DEFAULT_CALIBRATION_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LutConfig {
    pub runs_per_arch: usize,
    /// Independent profiling passes averaged per entry. Probe differences are
    /// small next to the architectures they are taken from, so a single pass
    /// leaves visible noise in the cheapest entries.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for LutConfig {
    fn default() -> Self {
        LutConfig { runs_per_arch: DEFAULT_RUNS_PER_ARCH, repeats: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyLut {
    pub spec_name: String,
    /// Offset left after removing the minimum architecture's own blocks.
    pub c0: f64,
    /// `entries[u][block_combo * unit_combo_count + unit_combo]`, ms per block.
    pub entries: Vec<Vec<f64>>,
    pub unit_combo_count: usize,
    /// (unit, slot) of entries whose differenced value was negative and was
    /// clamped to zero.
    pub clamped: Vec<(usize, usize)>,
    pub backend: String,
}

impl LatencyLut {
    pub fn entry_count(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn entry(&self, unit: usize, block_combo: usize, unit_combo: usize) -> Option<f64> {
        self.entries.get(unit)?.get(block_combo * self.unit_combo_count + unit_combo).copied()
    }
}

/// Per-unit probe: the depth used and how many probe blocks it adds over the
/// minimum depth.
fn probe_depth(spec: &SupernetSpec, u: usize) -> Result<(usize, usize)> {
    let unit = &spec.units[u];
    let min = unit.min_depth();
    let next =
        unit.depth_options.iter().copied().filter(|&d| d > min).min().ok_or_else(|| {
            Error::InvalidSpec(format!("unit {u} has a single depth option; blocks cannot be profiled"))
        })?;
    Ok((next, next - min))
}

struct Probe {
    unit: usize,
    slot: usize,
    extra: usize,
    /// Index of the probe arch.
    arch: usize,
    /// Index of the baseline arch it is differenced against.
    base: usize,
}

/// Profiles every block cost on `backend`.
pub fn build_lut(spec: &SupernetSpec, backend: &mut dyn MeasurementBackend, cfg: &LutConfig) -> Result<LatencyLut> {
    spec.validate()?;
    if cfg.repeats == 0 {
        return Err(Error::InvalidArgument("lut repeats must be >= 1".into()));
    }
    let min_arch = spec.minimum_arch();
    let n_block = spec.block_combo_count();
    let n_unit = spec.unit_combo_count();

    // Baselines: the minimum arch with unit u's per-unit combo set.
    let mut archs: Vec<ArchConfig> = vec![min_arch.clone()];
    let mut base_of = vec![vec![0usize; n_unit]; spec.units.len()];
    for (u, bases) in base_of.iter_mut().enumerate() {
        for (uc, base) in bases.iter_mut().enumerate().skip(1) {
            let mut a = min_arch.clone();
            a.unit_features[u] = spec.unit_combo(uc);
            *base = archs.len();
            archs.push(a);
        }
    }
    let mut probes = Vec::new();
    for (u, unit_bases) in base_of.iter().enumerate() {
        let (depth, extra) = probe_depth(spec, u)?;
        for bc in 0..n_block {
            for (uc, &base) in unit_bases.iter().enumerate() {
                let mut a = archs[base].clone();
                a.unit_depths[u] = depth;
                a.block_features[u].extend(std::iter::repeat_n(spec.block_combo(bc), extra));
                probes.push(Probe { unit: u, slot: bc * n_unit + uc, extra, arch: archs.len(), base });
                archs.push(a);
            }
        }
    }

    let mut sums = vec![0.0; archs.len()];
    let mut counts = vec![0usize; archs.len()];
    let entries: Vec<BatchEntry> = archs.iter().map(|a| BatchEntry { arch: a.clone(), reference: None }).collect();
    let mut backend_id = String::new();
    for rep in 0..cfg.repeats {
        let batch_id = format!("lut{rep}");
        let report = measure_batch(backend, &entries, cfg.runs_per_arch, &batch_id, cfg.seed)?;
        backend_id = report.backend_id.clone();
        for m in &report.measured {
            let i: usize = m.arch_id.rsplit('/').next().and_then(|s| s.parse().ok()).expect("entry id");
            sums[i] += m.latency_ms;
            counts[i] += 1;
        }
    }
    let never = counts.iter().filter(|&&c| c == 0).count();
    if never > 0 {
        return Err(BackendError::TooManyFailures {
            batch_id: format!("lut0..lut{}", cfg.repeats - 1),
            failed: never,
            total: archs.len(),
        }
        .into());
    }
    let lat: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();

    let mut table = vec![vec![0.0; n_block * n_unit]; spec.units.len()];
    let mut clamped = Vec::new();
    for p in &probes {
        let cost = (lat[p.arch] - lat[p.base]) / p.extra as f64;
        if cost < 0.0 {
            log::warn!("lut entry (unit {}, slot {}) differenced to {cost:.6} ms, clamped to 0", p.unit, p.slot);
            clamped.push((p.unit, p.slot));
        }
        table[p.unit][p.slot] = cost.max(0.0);
    }
    let mut lut = LatencyLut {
        spec_name: spec.name.clone(),
        c0: 0.0,
        entries: table,
        unit_combo_count: n_unit,
        clamped,
        backend: backend_id,
    };
    lut.c0 = lat[0] - blocks_cost(&lut, spec, &min_arch)?;
    Ok(lut)
}

fn blocks_cost(lut: &LatencyLut, spec: &SupernetSpec, arch: &ArchConfig) -> Result<f64> {
    let mut total = 0.0;
    for u in 0..arch.unit_depths.len() {
        let uc = spec.unit_combo_index(&arch.unit_features[u]);
        for block in &arch.block_features[u] {
            let bc = spec.block_combo_index(block);
            total += lut.entry(u, bc, uc).ok_or_else(|| {
                Error::Mismatch(format!("lut has no entry for unit {u}, block combo {bc}, unit combo {uc}"))
            })?;
        }
    }
    Ok(total)
}

fn check_spec(lut: &LatencyLut, spec: &SupernetSpec) -> Result<()> {
    if lut.spec_name != spec.name {
        return Err(Error::Mismatch(format!("lut is for spec '{}', not '{}'", lut.spec_name, spec.name)));
    }
    Ok(())
}

/// `c0` plus the entry of every block of `arch`.
pub fn lut_predict(lut: &LatencyLut, spec: &SupernetSpec, arch: &ArchConfig) -> Result<f64> {
    check_spec(lut, spec)?;
    arch.validate(spec)?;
    Ok(lut.c0 + blocks_cost(lut, spec, arch)?)
}

pub fn lut_predict_batch(
    lut: &LatencyLut,
    spec: &SupernetSpec,
    archs: &[ArchConfig],
    exec: Execution,
) -> Result<Vec<f64>> {
    par::try_map(exec, archs, |a| lut_predict(lut, spec, a))
}

/// Affine map `slope * lut + intercept` fitted to measured latencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrection {
    pub slope: f64,
    pub intercept: f64,
}

impl BiasCorrection {
    pub const IDENTITY: BiasCorrection = BiasCorrection { slope: 1.0, intercept: 0.0 };

    pub fn apply(&self, lut_ms: f64) -> f64 {
        self.slope * lut_ms + self.intercept
    }
}

/// Ordinary least squares of `actual` on `predicted`.
pub fn fit_affine(predicted: &[f64], actual: &[f64]) -> Result<BiasCorrection> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch { expected: predicted.len(), got: actual.len() });
    }
    if predicted.len() < 2 {
        return Err(Error::Degenerate(format!("{} calibration point(s); need at least 2", predicted.len())));
    }
    let n = predicted.len() as f64;
    let mx = predicted.iter().sum::<f64>() / n;
    let my = actual.iter().sum::<f64>() / n;
    let sxx: f64 = predicted.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = predicted.iter().zip(actual).map(|(x, y)| (x - mx) * (y - my)).sum();
    let scale = predicted.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if sxx <= (scale * 1e-12).powi(2) * n {
        return Err(Error::Degenerate("calibration predictions are constant".into()));
    }
    let slope = sxy / sxx;
    Ok(BiasCorrection { slope, intercept: my - slope * mx })
}

/// Fits the bias correction on measured (arch, latency) pairs.
pub fn fit_bias(lut: &LatencyLut, spec: &SupernetSpec, calibration: &[(ArchConfig, f64)]) -> Result<BiasCorrection> {
    let predicted = calibration.iter().map(|(a, _)| lut_predict(lut, spec, a)).collect::<Result<Vec<_>>>()?;
    let actual: Vec<f64> = calibration.iter().map(|(_, y)| *y).collect();
    fit_affine(&predicted, &actual)
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LutHeader {
    format: String,
    format_version: u32,
    spec_name: String,
    c0: f64,
    units: usize,
    unit_combo_count: usize,
    backend: String,
    clamped: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<BiasCorrection>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    unit: usize,
    slot: usize,
    ms: f64,
}

pub fn lut_to_string(lut: &LatencyLut, bias: Option<BiasCorrection>) -> String {
    let header = LutHeader {
        format: LUT_FORMAT_TAG.into(),
        format_version: LUT_FORMAT_VERSION,
        spec_name: lut.spec_name.clone(),
        c0: lut.c0,
        units: lut.entries.len(),
        unit_combo_count: lut.unit_combo_count,
        backend: lut.backend.clone(),
        clamped: lut.clamped.clone(),
        bias,
    };
    let mut body = serde_json::to_string(&header).expect("header serializes");
    body.push('\n');
    for (unit, row) in lut.entries.iter().enumerate() {
        for (slot, &ms) in row.iter().enumerate() {
            body.push_str(&serde_json::to_string(&EntryRecord { unit, slot, ms }).expect("entry serializes"));
            body.push('\n');
        }
    }
    seal(body, lut.entry_count())
}

pub fn lut_from_str(text: &str) -> Result<(LatencyLut, Option<BiasCorrection>)> {
    let header: LutHeader = read_header(text, LUT_FORMAT_TAG, LUT_FORMAT_VERSION)?;
    let (body, records) = unseal(text)?;
    let mut entries: Vec<Vec<f64>> = vec![Vec::new(); header.units];
    for (i, line) in body.lines().enumerate().skip(1) {
        let rec: EntryRecord =
            serde_json::from_str(line).map_err(|e| PersistError::Schema { line: i + 1, message: e.to_string() })?;
        let row = entries
            .get_mut(rec.unit)
            .ok_or_else(|| PersistError::Schema { line: i + 1, message: format!("unit {} out of range", rec.unit) })?;
        if rec.slot != row.len() || !rec.ms.is_finite() {
            return Err(PersistError::Schema {
                line: i + 1,
                message: "entries must be finite and in slot order".into(),
            }
            .into());
        }
        row.push(rec.ms);
    }
    let total: usize = entries.iter().map(Vec::len).sum();
    if total != records {
        return Err(PersistError::Checksum(format!("trailer counts {records} entries, found {total}")).into());
    }
    let lut = LatencyLut {
        spec_name: header.spec_name,
        c0: header.c0,
        entries,
        unit_combo_count: header.unit_combo_count,
        clamped: header.clamped,
        backend: header.backend,
    };
    Ok((lut, header.bias))
}

pub fn save_lut(lut: &LatencyLut, bias: Option<BiasCorrection>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, lut_to_string(lut, bias)).map_err(PersistError::from)?;
    Ok(())
}

pub fn load_lut(path: impl AsRef<Path>) -> Result<(LatencyLut, Option<BiasCorrection>)> {
    let text = fs::read_to_string(path).map_err(PersistError::from)?;
    lut_from_str(&text)
}

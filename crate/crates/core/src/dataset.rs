//! Architecture/latency datasets and their on-disk format.
//!
//! A dataset file is line-delimited JSON: a header record (format version,
//! spec, scheme, bins, references, backend descriptor, seeds), one record per
//! sample, and a trailer holding the SHA-256 of every preceding byte. Samples
//! can be appended by rewriting the trailer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archspace::{ArchConfig, DepthBins, SupernetSpec};
use crate::encoding::{Encoder, EncodingScheme};
use crate::error::{Error, PersistError, Result};
use crate::measurement::{BatchReadings, BatchReport};
use crate::par::{self, Execution};
use crate::seed;

pub const FORMAT_TAG: &str = "latsurr-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub arch: ArchConfig,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoded: Option<Vec<f64>>,
    /// Index into the dataset's reference list for reference measurements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<usize>,
    pub batch_id: String,
}

impl Sample {
    pub fn is_reference(&self) -> bool {
        self.reference.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyDataset {
    pub spec: SupernetSpec,
    pub scheme: EncodingScheme,
    pub bins: DepthBins,
    pub refs: Vec<ArchConfig>,
    /// Descriptor of the backend that produced the latencies.
    pub backend: String,
    pub seeds: BTreeMap<String, u64>,
    /// Bumped on every extension.
    pub version: u32,
    #[serde(default)]
    pub samples: Vec<Sample>,
}

impl LatencyDataset {
    pub fn new(
        spec: SupernetSpec,
        scheme: EncodingScheme,
        bins: DepthBins,
        refs: Vec<ArchConfig>,
        backend: String,
    ) -> Result<Self> {
        spec.validate()?;
        bins.check_against(&spec)?;
        for r in &refs {
            r.validate(&spec)?;
        }
        Ok(LatencyDataset { spec, scheme, bins, refs, backend, seeds: BTreeMap::new(), version: 0, samples: vec![] })
    }

    pub fn spec_name(&self) -> &str {
        &self.spec.name
    }

    /// Non-reference samples, the ones usable for training and testing.
    pub fn trainable(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| !s.is_reference())
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable().count()
    }

    pub fn bin_of(&self, sample: &Sample) -> Result<usize> {
        self.bins.bin_of(sample.arch.total_depth())
    }

    /// Appends every measured arch of a batch report.
    pub fn append_batch(&mut self, report: &BatchReport) {
        for m in &report.measured {
            self.samples.push(Sample {
                id: m.arch_id.clone(),
                arch: m.arch.clone(),
                latency_ms: m.latency_ms,
                encoded: None,
                reference: m.reference,
                batch_id: report.batch_id.clone(),
            });
        }
    }

    /// Swaps the samples of `report.batch_id` for a re-measured report,
    /// keeping their position in the dataset.
    pub fn replace_batch(&mut self, report: &BatchReport) {
        let Some(first) = self.samples.iter().position(|s| s.batch_id == report.batch_id) else {
            self.append_batch(report);
            return;
        };
        self.samples.retain(|s| s.batch_id != report.batch_id);
        let fresh: Vec<Sample> = report
            .measured
            .iter()
            .map(|m| Sample {
                id: m.arch_id.clone(),
                arch: m.arch.clone(),
                latency_ms: m.latency_ms,
                encoded: None,
                reference: m.reference,
                batch_id: report.batch_id.clone(),
            })
            .collect();
        self.samples.splice(first..first, fresh);
    }

    /// Batch ids in order of first appearance.
    pub fn batch_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in &self.samples {
            if ids.last() != Some(&s.batch_id) && !ids.contains(&s.batch_id) {
                ids.push(s.batch_id.clone());
            }
        }
        ids
    }

    /// Reference readings per batch, for [`crate::measurement::qc_check`].
    /// Batches without reference samples are skipped.
    pub fn reference_history(&self) -> Vec<BatchReadings> {
        self.batch_ids()
            .into_iter()
            .filter_map(|batch_id| {
                let mut readings = vec![None; self.refs.len()];
                let mut any = false;
                for s in self.samples.iter().filter(|s| s.batch_id == batch_id) {
                    if let Some(j) = s.reference {
                        if j < readings.len() {
                            readings[j] = Some(s.latency_ms);
                            any = true;
                        }
                    }
                }
                any.then_some(BatchReadings { batch_id, readings })
            })
            .collect()
    }

    /// Fills `encoded` for every sample under the dataset's scheme.
    pub fn encode_all(&mut self, exec: Execution) -> Result<()> {
        let encoder = Encoder::new(&self.spec, self.scheme);
        let vectors = par::try_map(exec, &self.samples, |s| encoder.encode(&s.arch).map(|e| e.values))?;
        for (s, v) in self.samples.iter_mut().zip(vectors) {
            s.encoded = Some(v);
        }
        Ok(())
    }

    /// Same samples under another scheme; stored encodings are recomputed.
    pub fn with_scheme(&self, scheme: EncodingScheme, exec: Execution) -> Result<LatencyDataset> {
        let mut out = self.clone();
        out.scheme = scheme;
        out.encode_all(exec)?;
        Ok(out)
    }

    /// Encoded inputs and latency targets of the trainable samples, encoding on
    /// the fly where no stored vector exists.
    pub fn xy(&self, exec: Execution) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let encoder = Encoder::new(&self.spec, self.scheme);
        let samples: Vec<&Sample> = self.trainable().collect();
        let xs = par::try_map(exec, &samples, |s| match &s.encoded {
            Some(v) if v.len() == encoder.len() => Ok(v.clone()),
            _ => encoder.encode(&s.arch).map(|e| e.values),
        })?;
        let ys = samples.iter().map(|s| s.latency_ms).collect();
        Ok((xs, ys))
    }

    /// A dataset sharing this header with the given samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> LatencyDataset {
        LatencyDataset {
            spec: self.spec.clone(),
            scheme: self.scheme,
            bins: self.bins.clone(),
            refs: self.refs.clone(),
            backend: self.backend.clone(),
            seeds: self.seeds.clone(),
            version: self.version,
            samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.bins.check_against(&self.spec)?;
        let len = Encoder::new(&self.spec, self.scheme).len();
        for s in &self.samples {
            s.arch.validate(&self.spec)?;
            if !(s.latency_ms.is_finite() && s.latency_ms > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: latency {} is not positive",
                    s.id, s.latency_ms
                )));
            }
            if let Some(v) = &s.encoded {
                if v.len() != len {
                    return Err(Error::LengthMismatch { expected: len, got: v.len() });
                }
            }
            if let Some(j) = s.reference {
                if j >= self.refs.len() {
                    return Err(Error::InvalidArgument(format!("sample {}: reference index {j} out of range", s.id)));
                }
            }
        }
        Ok(())
    }
}

/// Non-reference samples grouped by depth bin. Empty bins are absent.
pub fn partition_by_bin(ds: &LatencyDataset) -> Result<BTreeMap<usize, Vec<&Sample>>> {
    let mut out: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in ds.trainable() {
        out.entry(ds.bin_of(s)?).or_default().push(s);
    }
    Ok(out)
}

/// Stratified split of the non-reference samples into (train, test).
///
/// Each bin contributes `round(len * test_fraction)` test samples; both
/// outputs keep the original sample order.
pub fn split(ds: &LatencyDataset, test_fraction: f64, seed: u64) -> Result<(LatencyDataset, LatencyDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test_fraction must be in (0, 1), got {test_fraction}")));
    }
    let mut rng = seed::rng(seed);
    let mut by_bin: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if !s.is_reference() {
            by_bin.entry(ds.bin_of(s)?).or_default().push(i);
        }
    }
    let mut is_test = vec![false; ds.samples.len()];
    for bin in 0..ds.bins.n_bins {
        let Some(members) = by_bin.get_mut(&bin) else {
            log::warn!("split: bin {bin} is empty");
            continue;
        };
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        if members.len() < 2 {
            log::warn!("split: bin {bin} has {} sample(s), cannot stratify", members.len());
        }
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let pick = |want: bool| -> Vec<Sample> {
        ds.samples
            .iter()
            .zip(&is_test)
            .filter(|(s, &t)| !s.is_reference() && t == want)
            .map(|(s, _)| s.clone())
            .collect()
    };
    Ok((ds.with_samples(pick(false)), ds.with_samples(pick(true))))
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    format_version: u32,
    spec: SupernetSpec,
    scheme: EncodingScheme,
    bins: DepthBins,
    refs: Vec<ArchConfig>,
    backend: String,
    seeds: BTreeMap<String, u64>,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample: Sample,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    checksum: String,
    records: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a dataset to the line-delimited format.
pub fn to_string(ds: &LatencyDataset) -> String {
    let header = Header {
        format: FORMAT_TAG.into(),
        format_version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        scheme: ds.scheme,
        bins: ds.bins.clone(),
        refs: ds.refs.clone(),
        backend: ds.backend.clone(),
        seeds: ds.seeds.clone(),
        version: ds.version,
    };
    let mut body = serde_json::to_string(&header).expect("header serializes");
    body.push('\n');
    for s in &ds.samples {
        body.push_str(&serde_json::to_string(&SampleRecord { sample: s.clone() }).expect("sample serializes"));
        body.push('\n');
    }
    seal(body, ds.samples.len())
}

/// Appends the checksum trailer to a header-plus-records body.
pub(crate) fn seal(mut body: String, records: usize) -> String {
    let trailer = Trailer { checksum: sha256_hex(body.as_bytes()), records };
    body.push_str(&serde_json::to_string(&trailer).expect("trailer serializes"));
    body.push('\n');
    body
}

/// Verifies the trailer and returns the body before it with the record count.
pub(crate) fn unseal(text: &str) -> Result<(&str, usize)> {
    let body_end = text.trim_end_matches('\n').rfind('\n').map(|i| i + 1).unwrap_or(0);
    let (body, trailer_text) = text.split_at(body_end);
    let trailer: Trailer = serde_json::from_str(trailer_text.trim())
        .map_err(|_| PersistError::Checksum("missing or unreadable trailer (truncated file?)".into()))?;
    let actual = sha256_hex(body.as_bytes());
    if actual != trailer.checksum {
        return Err(PersistError::Checksum(format!("expected {}, computed {actual}", trailer.checksum)).into());
    }
    Ok((body, trailer.records))
}

/// Parses a sealed file's header line, checking its format tag and version.
pub(crate) fn read_header<H: serde::de::DeserializeOwned>(text: &str, tag: &str, supported: u32) -> Result<H> {
    let schema = |message: String| Error::from(PersistError::Schema { line: 1, message });
    let header_line = text.lines().next().ok_or_else(|| schema("empty file".into()))?;
    let raw: serde_json::Value = serde_json::from_str(header_line).map_err(|e| schema(e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(tag) {
        return Err(schema(format!("not a {tag} file")));
    }
    let found =
        raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| schema("missing format_version".into()))?;
    if found > supported as u64 {
        return Err(PersistError::VersionMismatch { found: found as u32, supported }.into());
    }
    serde_json::from_value(raw).map_err(|e| schema(e.to_string()))
}

pub fn save(ds: &LatencyDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_string(ds)).map_err(PersistError::from)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LatencyDataset> {
    let text = fs::read_to_string(path).map_err(PersistError::from)?;
    from_str(&text)
}

pub fn from_str(text: &str) -> Result<LatencyDataset> {
    let schema = |line: usize, message: String| Error::from(PersistError::Schema { line, message });
    let header: Header = read_header(text, FORMAT_TAG, FORMAT_VERSION)?;
    // Checksum covers every byte before the trailer line.
    let (body, records) = unseal(text)?;

    let mut samples = Vec::new();
    for (i, line) in body.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| schema(i + 1, e.to_string()))?;
        samples.push(rec.sample);
    }
    if samples.len() != records {
        return Err(PersistError::Checksum(format!("trailer counts {records} records, found {}", samples.len())).into());
    }
    let ds = LatencyDataset {
        spec: header.spec,
        scheme: header.scheme,
        bins: header.bins,
        refs: header.refs,
        backend: header.backend,
        seeds: header.seeds,
        version: header.version,
        samples,
    };
    ds.validate().map_err(|e| schema(0, e.to_string()))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{make_bins, resnet, sample_balanced, sample_random};

    pub(crate) fn toy(n: usize, seed: u64) -> LatencyDataset {
        let spec = resnet();
        let bins = make_bins(&spec, 4).unwrap();
        let refs = sample_random(&spec, 2, seed ^ 1).unwrap();
        let mut ds =
            LatencyDataset::new(spec.clone(), EncodingScheme::Fcc, bins.clone(), refs.clone(), "test".into()).unwrap();
        let archs = if n == 0 { vec![] } else { sample_balanced(&spec, n.max(4), &bins, seed).unwrap() };
        for (i, a) in archs.into_iter().take(n).enumerate() {
            ds.samples.push(Sample {
                id: format!("b0/{i}"),
                latency_ms: 1.0 + a.total_depth() as f64 / 3.0,
                arch: a,
                encoded: None,
                reference: None,
                batch_id: "b0".into(),
            });
        }
        for (j, r) in refs.into_iter().enumerate() {
            ds.samples.push(Sample {
                id: format!("b0/ref{j}"),
                arch: r,
                latency_ms: 2.5,
                encoded: None,
                reference: Some(j),
                batch_id: "b0".into(),
            });
        }
        ds.seeds.insert("sampling".into(), seed);
        ds
    }

    #[test]
    fn split_sizes() {
        let ds = toy(12_000, 3);
        let (train, test) = split(&ds, 1.0 / 3.0, 9).unwrap();
        assert_eq!(train.samples.len(), 8000);
        assert_eq!(test.samples.len(), 4000);
        assert!(train.samples.iter().chain(&test.samples).all(|s| !s.is_reference()));
        let ids: std::collections::HashSet<_> = train.samples.iter().map(|s| &s.id).collect();
        assert!(test.samples.iter().all(|s| !ids.contains(&s.id)));
        let (train2, test2) = split(&ds, 1.0 / 3.0, 9).unwrap();
        assert_eq!((train, test), (train2, test2));
    }

    #[test]
    fn split_single_bin_half() {
        let mut ds = toy(10, 1);
        ds.bins = make_bins(&ds.spec, 1).unwrap();
        let (train, test) = split(&ds, 0.5, 0).unwrap();
        assert_eq!((train.samples.len(), test.samples.len()), (5, 5));
        assert!(split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn partition_covers_trainable() {
        let ds = toy(401, 2);
        let parts = partition_by_bin(&ds).unwrap();
        let total: usize = parts.values().map(Vec::len).sum();
        assert_eq!(total, 401);
        let sizes: Vec<usize> = parts.values().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let empty = toy(0, 0).with_samples(vec![]);
        assert!(partition_by_bin(&empty).unwrap().is_empty());
    }

    #[test]
    fn reference_history_groups_batches() {
        let mut ds = toy(8, 5);
        let mut second: Vec<Sample> = ds.samples.iter().filter(|s| s.is_reference()).cloned().collect();
        for s in &mut second {
            s.batch_id = "b1".into();
            s.latency_ms = 2.6;
        }
        ds.samples.extend(second);
        let h = ds.reference_history();
        assert_eq!(h.len(), 2);
        assert_eq!(h[1].readings, vec![Some(2.6), Some(2.6)]);
    }

    #[test]
    fn save_load_round_trip() {
        let mut ds = toy(40, 7);
        ds.encode_all(Execution::default()).unwrap();
        ds.samples[0].latency_ms = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);
    }

    #[test]
    fn unknown_scheme_is_a_schema_error() {
        let text = to_string(&toy(4, 1));
        let edited = text.replacen("\"scheme\":\"fcc\"", "\"scheme\":\"gcn\"", 1);
        match from_str(&edited) {
            Err(Error::Persist(PersistError::Schema { message, .. })) => assert!(message.contains("gcn"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let text = to_string(&toy(20, 1));
        let cut = &text[..text.len() * 2 / 3];
        assert!(matches!(from_str(cut), Err(Error::Persist(PersistError::Checksum(_)))));
        let tampered = text.replacen("\"latency_ms\":", "\"latency_ms\":1", 1);
        assert!(matches!(from_str(&tampered), Err(Error::Persist(PersistError::Checksum(_)))));
    }

    #[test]
    fn newer_version_is_rejected() {
        let text = to_string(&toy(4, 1)).replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(from_str(&text), Err(Error::Persist(PersistError::VersionMismatch { found: 9, .. }))));
    }
}

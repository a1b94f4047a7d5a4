//! Fixed-length vector encodings of architectures.
//!
//! Slot order is global and stable: unit-major, then feature dimensions in
//! declaration order, then options in declaration order. Counts are raw
//! integers; normalization belongs to the predictor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archspace::{ArchConfig, SupernetSpec};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingScheme {
    /// Per-unit histogram over the cartesian product of per-block options.
    Fcc,
    /// Per-unit, per-dimension option counts.
    #[serde(alias = "fc")]
    FeatureCount,
    /// Per-unit depth, mean and population std of numeric block features.
    Statistical,
    /// Numeric feature values per block slot, zero padded to the unit's max depth.
    Feature,
    /// Per-block-slot activity bit plus one-hot option indicators.
    #[serde(alias = "onehot")]
    OneHot,
}

impl EncodingScheme {
    pub const ALL: [EncodingScheme; 5] = [
        EncodingScheme::Fcc,
        EncodingScheme::FeatureCount,
        EncodingScheme::Statistical,
        EncodingScheme::Feature,
        EncodingScheme::OneHot,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EncodingScheme::Fcc => "fcc",
            EncodingScheme::FeatureCount => "feature_count",
            EncodingScheme::Statistical => "statistical",
            EncodingScheme::Feature => "feature",
            EncodingScheme::OneHot => "one_hot",
        }
    }
}

impl fmt::Display for EncodingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EncodingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcc" => Ok(EncodingScheme::Fcc),
            "fc" | "feature_count" => Ok(EncodingScheme::FeatureCount),
            "statistical" => Ok(EncodingScheme::Statistical),
            "feature" => Ok(EncodingScheme::Feature),
            "onehot" | "one_hot" => Ok(EncodingScheme::OneHot),
            other => Err(Error::InvalidArgument(format!("unknown encoding scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedVector {
    pub values: Vec<f64>,
    pub scheme: EncodingScheme,
    pub spec_name: String,
}

/// Layout for one (spec, scheme) pair, computed once and reused per arch.
#[derive(Debug, Clone)]
pub struct Encoder<'a> {
    spec: &'a SupernetSpec,
    scheme: EncodingScheme,
    block_dims: Vec<usize>,
    unit_dims: Vec<usize>,
    unit_lens: Vec<usize>,
}

impl<'a> Encoder<'a> {
    pub fn new(spec: &'a SupernetSpec, scheme: EncodingScheme) -> Self {
        let block_dims = spec.per_block_dims();
        let unit_dims = spec.per_unit_dims();
        let n_opts = |dims: &[usize]| -> usize { dims.iter().map(|&d| spec.features[d].options.len()).sum() };
        let unit_opts = n_opts(&unit_dims);
        let unit_lens = spec
            .units
            .iter()
            .map(|unit| match scheme {
                EncodingScheme::Fcc => {
                    let combos = if block_dims.is_empty() { 0 } else { spec.block_combo_count() };
                    combos + unit_opts
                }
                EncodingScheme::FeatureCount => n_opts(&block_dims) + unit_opts,
                EncodingScheme::Statistical => 1 + 2 * block_dims.len() + unit_dims.len(),
                EncodingScheme::Feature => unit.max_depth() * block_dims.len() + unit_dims.len(),
                EncodingScheme::OneHot => unit.max_depth() * (1 + n_opts(&block_dims)) + unit_opts,
            })
            .collect();
        Encoder { spec, scheme, block_dims, unit_dims, unit_lens }
    }

    pub fn len(&self) -> usize {
        self.unit_lens.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, dim: usize, option: usize) -> f64 {
        self.spec.features[dim].options[option]
    }

    pub fn encode(&self, arch: &ArchConfig) -> Result<EncodedVector> {
        arch.validate(self.spec)?;
        let mut values = Vec::with_capacity(self.len());
        for u in 0..self.spec.units.len() {
            let start = values.len();
            match self.scheme {
                EncodingScheme::Fcc => self.fcc_unit(arch, u, &mut values),
                EncodingScheme::FeatureCount => self.feature_count_unit(arch, u, &mut values),
                EncodingScheme::Statistical => self.statistical_unit(arch, u, &mut values),
                EncodingScheme::Feature => self.feature_unit(arch, u, &mut values),
                EncodingScheme::OneHot => self.one_hot_unit(arch, u, &mut values),
            }
            debug_assert_eq!(values.len() - start, self.unit_lens[u]);
        }
        Ok(EncodedVector { values, scheme: self.scheme, spec_name: self.spec.name.clone() })
    }

    /// Count block per option of each per-unit dim: the unit depth lands in
    /// the selected option's slot.
    fn unit_counts(&self, arch: &ArchConfig, u: usize, out: &mut Vec<f64>) {
        let depth = arch.unit_depths[u] as f64;
        for (slot, &d) in self.unit_dims.iter().enumerate() {
            let selected = arch.unit_features[u][slot];
            out.extend((0..self.spec.features[d].options.len()).map(|o| if o == selected { depth } else { 0.0 }));
        }
    }

    fn fcc_unit(&self, arch: &ArchConfig, u: usize, out: &mut Vec<f64>) {
        if !self.block_dims.is_empty() {
            let base = out.len();
            out.resize(base + self.spec.block_combo_count(), 0.0);
            for block in &arch.block_features[u] {
                out[base + self.spec.block_combo_index(block)] += 1.0;
            }
        }
        self.unit_counts(arch, u, out);
    }

    fn feature_count_unit(&self, arch: &ArchConfig, u: usize, out: &mut Vec<f64>) {
        let depth = arch.unit_depths[u] as f64;
        let (mut bslot, mut uslot) = (0, 0);
        // dims interleaved in declaration order
        for (d, feat) in self.spec.features.iter().enumerate() {
            let base = out.len();
            out.resize(base + feat.options.len(), 0.0);
            if self.block_dims.contains(&d) {
                for block in &arch.block_features[u] {
                    out[base + block[bslot]] += 1.0;
                }
                bslot += 1;
            } else {
                out[base + arch.unit_features[u][uslot]] = depth;
                uslot += 1;
            }
        }
    }

    fn statistical_unit(&self, arch: &ArchConfig, u: usize, out: &mut Vec<f64>) {
        let blocks = &arch.block_features[u];
        let n = blocks.len() as f64;
        out.push(n);
        for (slot, &d) in self.block_dims.iter().enumerate() {
            let mean = blocks.iter().map(|b| self.value(d, b[slot])).sum::<f64>() / n;
            let var = blocks.iter().map(|b| (self.value(d, b[slot]) - mean).powi(2)).sum::<f64>() / n;
            out.push(mean);
            out.push(var.sqrt());
        }
        for (slot, &d) in self.unit_dims.iter().enumerate() {
            out.push(self.value(d, arch.unit_features[u][slot]));
        }
    }

    fn feature_unit(&self, arch: &ArchConfig, u: usize, out: &mut Vec<f64>) {
        let max_depth = self.spec.units[u].max_depth();
        for b in 0..max_depth {
            match arch.block_features[u].get(b) {
                Some(block) => {
                    out.extend(self.block_dims.iter().zip(block).map(|(&d, &o)| self.value(d, o)));
                }
                None => out.extend(std::iter::repeat_n(0.0, self.block_dims.len())),
            }
        }
        for (slot, &d) in self.unit_dims.iter().enumerate() {
            out.push(self.value(d, arch.unit_features[u][slot]));
        }
    }

    fn one_hot_unit(&self, arch: &ArchConfig, u: usize, out: &mut Vec<f64>) {
        let max_depth = self.spec.units[u].max_depth();
        for b in 0..max_depth {
            let block = arch.block_features[u].get(b);
            out.push(if block.is_some() { 1.0 } else { 0.0 });
            for (slot, &d) in self.block_dims.iter().enumerate() {
                let n = self.spec.features[d].options.len();
                let hot = block.map(|blk| blk[slot]);
                out.extend((0..n).map(|o| if hot == Some(o) { 1.0 } else { 0.0 }));
            }
        }
        for (slot, &d) in self.unit_dims.iter().enumerate() {
            let selected = arch.unit_features[u][slot];
            out.extend((0..self.spec.features[d].options.len()).map(|o| if o == selected { 1.0 } else { 0.0 }));
        }
    }

    /// Recovers the architecture from a one-hot vector.
    pub fn decode_one_hot(&self, encoded: &EncodedVector) -> Result<ArchConfig> {
        if self.scheme != EncodingScheme::OneHot || encoded.scheme != EncodingScheme::OneHot {
            return Err(Error::Mismatch("decode requires the one_hot scheme".into()));
        }
        if encoded.values.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: encoded.values.len() });
        }
        let argmax = |xs: &[f64]| -> Result<usize> {
            let hot: Vec<usize> = xs.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
            match hot.as_slice() {
                [i] if xs.iter().filter(|&&v| v != 0.0).count() == 1 => Ok(*i),
                _ => Err(Error::InvalidArch(format!("not a one-hot group: {xs:?}"))),
            }
        };
        let v = &encoded.values;
        let mut pos = 0;
        let mut arch = ArchConfig {
            spec_name: self.spec.name.clone(),
            unit_depths: vec![],
            block_features: vec![],
            unit_features: vec![],
        };
        for unit in &self.spec.units {
            let mut blocks = Vec::new();
            for _ in 0..unit.max_depth() {
                let active = v[pos] == 1.0;
                pos += 1;
                let mut block = Vec::with_capacity(self.block_dims.len());
                for &d in &self.block_dims {
                    let n = self.spec.features[d].options.len();
                    if active {
                        block.push(argmax(&v[pos..pos + n])?);
                    }
                    pos += n;
                }
                if active {
                    blocks.push(block);
                }
            }
            let mut uf = Vec::with_capacity(self.unit_dims.len());
            for &d in &self.unit_dims {
                let n = self.spec.features[d].options.len();
                uf.push(argmax(&v[pos..pos + n])?);
                pos += n;
            }
            arch.unit_depths.push(blocks.len());
            arch.block_features.push(blocks);
            arch.unit_features.push(uf);
        }
        arch.validate(self.spec)?;
        Ok(arch)
    }
}

pub fn encoding_length(spec: &SupernetSpec, scheme: EncodingScheme) -> usize {
    Encoder::new(spec, scheme).len()
}

pub fn encode(spec: &SupernetSpec, scheme: EncodingScheme, arch: &ArchConfig) -> Result<EncodedVector> {
    Encoder::new(spec, scheme).encode(arch)
}

pub fn encode_fcc(spec: &SupernetSpec, arch: &ArchConfig) -> Result<EncodedVector> {
    encode(spec, EncodingScheme::Fcc, arch)
}

pub fn encode_feature_count(spec: &SupernetSpec, arch: &ArchConfig) -> Result<EncodedVector> {
    encode(spec, EncodingScheme::FeatureCount, arch)
}

pub fn encode_statistical(spec: &SupernetSpec, arch: &ArchConfig) -> Result<EncodedVector> {
    encode(spec, EncodingScheme::Statistical, arch)
}

pub fn encode_feature(spec: &SupernetSpec, arch: &ArchConfig) -> Result<EncodedVector> {
    encode(spec, EncodingScheme::Feature, arch)
}

pub fn encode_one_hot(spec: &SupernetSpec, arch: &ArchConfig) -> Result<EncodedVector> {
    encode(spec, EncodingScheme::OneHot, arch)
}

pub fn decode_one_hot(spec: &SupernetSpec, encoded: &EncodedVector) -> Result<ArchConfig> {
    Encoder::new(spec, EncodingScheme::OneHot).decode_one_hot(encoded)
}

/// Encodes many architectures; order is preserved.
pub fn encode_batch(
    spec: &SupernetSpec,
    scheme: EncodingScheme,
    archs: &[ArchConfig],
    exec: Execution,
) -> Result<Vec<EncodedVector>> {
    let encoder = Encoder::new(spec, scheme);
    par::try_map(exec, archs, |a| encoder.encode(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{densenet, resnet, sample_random};

    fn uniform_arch(depths: [usize; 4], block: [usize; 2]) -> ArchConfig {
        ArchConfig {
            spec_name: "resnet".into(),
            unit_depths: depths.to_vec(),
            block_features: depths.iter().map(|&d| vec![block.to_vec(); d]).collect(),
            unit_features: vec![vec![]; 4],
        }
    }

    #[test]
    fn resnet_lengths() {
        let spec = resnet();
        assert_eq!(encoding_length(&spec, EncodingScheme::Fcc), 36);
        assert_eq!(encoding_length(&spec, EncodingScheme::FeatureCount), 24);
        assert_eq!(encoding_length(&spec, EncodingScheme::Statistical), 20);
        assert_eq!(encoding_length(&spec, EncodingScheme::Feature), 56);
        assert_eq!(encoding_length(&spec, EncodingScheme::OneHot), 196);
    }

    #[test]
    fn fcc_hand_count() {
        let spec = resnet();
        // kernel 3 = option 0, ratio 1/2 = option 0 -> slot 0 of each unit
        let arch = uniform_arch([2, 1, 1, 1], [0, 0]);
        let v = encode_fcc(&spec, &arch).unwrap().values;
        let mut expect = vec![0.0; 36];
        expect[0] = 2.0;
        expect[9] = 1.0;
        expect[18] = 1.0;
        expect[27] = 1.0;
        assert_eq!(v, expect);
    }

    #[test]
    fn fcc_per_unit_scope() {
        let spec = densenet();
        let mut arch = spec.minimum_arch();
        arch.unit_depths[2] = 13;
        arch.block_features[2] = vec![vec![]; 13];
        arch.unit_features[2] = vec![2]; // kernel 5
        let v = encode_fcc(&spec, &arch).unwrap().values;
        assert_eq!(v.len(), 25);
        assert_eq!(&v[10..15], &[0.0, 0.0, 13.0, 0.0, 0.0]);
        assert_eq!(&v[0..5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn feature_count_hand_count() {
        let spec = resnet();
        let mut arch = uniform_arch([2, 1, 1, 1], [0, 0]);
        arch.block_features[0] = vec![vec![0, 0], vec![1, 0]]; // (3, 1/2), (5, 1/2)
        let v = encode_feature_count(&spec, &arch).unwrap().values;
        assert_eq!(&v[0..6], &[1.0, 1.0, 0.0, 2.0, 0.0, 0.0]);
        // minimum-depth unit: exactly one 1 per dimension block
        assert_eq!(&v[6..12], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn statistical_population_std() {
        let spec = resnet();
        let mut arch = uniform_arch([3, 1, 1, 1], [0, 2]);
        arch.block_features[0] = vec![vec![0, 2], vec![1, 2], vec![2, 2]];
        let v = encode_statistical(&spec, &arch).unwrap().values;
        assert_eq!(v.len(), 20);
        assert_eq!(v[0], 3.0);
        assert_eq!(v[1], 5.0);
        assert!((v[2] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((v[2] - 1.63299).abs() < 1e-5);
        assert_eq!(v[3], 1.0);
        assert_eq!(v[4], 0.0);
        // depth-1 unit has zero std terms
        assert_eq!(&v[5..10], &[1.0, 3.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn feature_padding() {
        let spec = resnet();
        let arch = uniform_arch([1, 7, 7, 7], [1, 1]);
        let v = encode_feature(&spec, &arch).unwrap().values;
        assert_eq!(v.len(), 56);
        assert_eq!(&v[0..2], &[5.0, 2.0 / 3.0]);
        assert!(v[2..14].iter().all(|&x| x == 0.0));
        let full = encode_feature(&spec, &uniform_arch([7; 4], [0, 0])).unwrap().values;
        assert!(full.iter().all(|&x| x != 0.0));
    }

    #[test]
    fn one_hot_active_slots_and_round_trip() {
        let spec = resnet();
        for arch in sample_random(&spec, 200, 4).unwrap() {
            let enc = encode_one_hot(&spec, &arch).unwrap();
            assert_eq!(enc.values.len(), 196);
            for u in 0..4 {
                for b in 0..7 {
                    let slot = &enc.values[u * 49 + b * 7..u * 49 + b * 7 + 7];
                    let ones = slot.iter().filter(|&&x| x == 1.0).count();
                    assert_eq!(ones, if b < arch.unit_depths[u] { 3 } else { 0 });
                }
            }
            assert_eq!(decode_one_hot(&spec, &enc).unwrap(), arch);
        }
        let spec = densenet();
        for arch in sample_random(&spec, 50, 4).unwrap() {
            let enc = encode_one_hot(&spec, &arch).unwrap();
            assert_eq!(decode_one_hot(&spec, &enc).unwrap(), arch);
        }
    }

    #[test]
    fn mismatched_arch_is_rejected() {
        let arch = resnet().minimum_arch();
        assert!(encode_fcc(&densenet(), &arch).is_err());
        let mut bad = arch.clone();
        bad.block_features[0][0][0] = 3;
        assert!(encode_fcc(&resnet(), &bad).is_err());
    }

    #[test]
    fn scheme_tags_parse() {
        for s in EncodingScheme::ALL {
            assert_eq!(s.tag().parse::<EncodingScheme>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<EncodingScheme>(&json).unwrap(), s);
        }
        assert_eq!("fc".parse::<EncodingScheme>().unwrap(), EncodingScheme::FeatureCount);
        assert_eq!(serde_json::from_str::<EncodingScheme>("\"onehot\"").unwrap(), EncodingScheme::OneHot);
        assert!("gcn".parse::<EncodingScheme>().is_err());
    }

    #[test]
    fn batch_matches_single() {
        let spec = resnet();
        let archs = sample_random(&spec, 64, 8).unwrap();
        let batch = encode_batch(&spec, EncodingScheme::Fcc, &archs, Execution::default()).unwrap();
        let seq = encode_batch(&spec, EncodingScheme::Fcc, &archs, Execution::Sequential).unwrap();
        assert_eq!(batch, seq);
        assert_eq!(batch[5], encode_fcc(&spec, &archs[5]).unwrap());
    }
}

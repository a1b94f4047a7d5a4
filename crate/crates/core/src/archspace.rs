//! Supernet architecture spaces and architecture sampling.
//!
//! A supernet is an ordered list of units. Each unit picks a depth (number of
//! blocks) from its own option set, and each block picks one option from
//! every per-block feature dimension. Per-unit dimensions are chosen once and
//! apply to every block in the unit.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerBlock,
    PerUnit,
}

/// A categorical feature with numeric option values. Option order fixes the
/// encoding slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDim {
    pub name: String,
    pub options: Vec<f64>,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitSpec {
    pub index: usize,
    pub depth_options: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_width: Option<u32>,
}

impl UnitSpec {
    pub fn min_depth(&self) -> usize {
        self.depth_options.iter().copied().min().unwrap_or(0)
    }

    pub fn max_depth(&self) -> usize {
        self.depth_options.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetSpec {
    pub name: String,
    pub units: Vec<UnitSpec>,
    pub features: Vec<FeatureDim>,
}

/// One sampled architecture.
///
/// `block_features[u][b]` holds one option index per per-block dimension (in
/// declaration order); `unit_features[u]` one option index per per-unit
/// dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub spec_name: String,
    pub unit_depths: Vec<usize>,
    pub block_features: Vec<Vec<Vec<usize>>>,
    pub unit_features: Vec<Vec<usize>>,
}

impl ArchConfig {
    pub fn total_depth(&self) -> usize {
        self.unit_depths.iter().sum()
    }

    pub fn validate(&self, spec: &SupernetSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArch(msg));
        if self.spec_name != spec.name {
            return bad(format!("arch is for spec `{}`, not `{}`", self.spec_name, spec.name));
        }
        let k = spec.units.len();
        if self.unit_depths.len() != k || self.block_features.len() != k || self.unit_features.len() != k {
            return bad(format!("expected {k} units"));
        }
        let block_dims = spec.per_block_dims();
        let unit_dims = spec.per_unit_dims();
        for (u, unit) in spec.units.iter().enumerate() {
            let depth = self.unit_depths[u];
            if !unit.depth_options.contains(&depth) {
                return bad(format!("unit {u}: depth {depth} not in {:?}", unit.depth_options));
            }
            if self.block_features[u].len() != depth {
                return bad(format!("unit {u}: {} block entries for depth {depth}", self.block_features[u].len()));
            }
            for (b, block) in self.block_features[u].iter().enumerate() {
                if block.len() != block_dims.len() {
                    return bad(format!("unit {u} block {b}: expected {} feature indices", block_dims.len()));
                }
                for (&opt, &d) in block.iter().zip(&block_dims) {
                    if opt >= spec.features[d].options.len() {
                        return bad(format!(
                            "unit {u} block {b}: option {opt} out of range for `{}`",
                            spec.features[d].name
                        ));
                    }
                }
            }
            if self.unit_features[u].len() != unit_dims.len() {
                return bad(format!("unit {u}: expected {} per-unit indices", unit_dims.len()));
            }
            for (&opt, &d) in self.unit_features[u].iter().zip(&unit_dims) {
                if opt >= spec.features[d].options.len() {
                    return bad(format!("unit {u}: option {opt} out of range for `{}`", spec.features[d].name));
                }
            }
        }
        Ok(())
    }
}

impl SupernetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.name.is_empty() {
            return bad("name is empty".into());
        }
        if self.units.is_empty() {
            return bad("units is empty".into());
        }
        for (i, unit) in self.units.iter().enumerate() {
            if unit.index != i {
                return bad(format!("units[{i}] has index {}", unit.index));
            }
            if unit.depth_options.is_empty() {
                return bad(format!("units[{i}].depth_options is empty"));
            }
            if unit.depth_options.contains(&0) {
                return bad(format!("units[{i}].depth_options contains 0"));
            }
            let mut sorted = unit.depth_options.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != unit.depth_options.len() {
                return bad(format!("units[{i}].depth_options has duplicates"));
            }
            if unit.stage_width == Some(0) {
                return bad(format!("units[{i}].stage_width must be positive"));
            }
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.options.is_empty() {
                return bad(format!("features[{i}] (`{}`) has no options", f.name));
            }
            if f.options.iter().any(|v| !v.is_finite()) {
                return bad(format!("features[{i}] (`{}`) has a non-finite option", f.name));
            }
            for (a, x) in f.options.iter().enumerate() {
                if f.options[..a].contains(x) {
                    return bad(format!("features[{i}] (`{}`) repeats option {x}", f.name));
                }
            }
            if self.features[..i].iter().any(|g| g.name == f.name) {
                return bad(format!("feature name `{}` declared twice", f.name));
            }
        }
        Ok(())
    }

    /// Indices into `features` of the per-block dimensions, in declaration order.
    pub fn per_block_dims(&self) -> Vec<usize> {
        self.dims_with_scope(Scope::PerBlock)
    }

    /// Indices into `features` of the per-unit dimensions, in declaration order.
    pub fn per_unit_dims(&self) -> Vec<usize> {
        self.dims_with_scope(Scope::PerUnit)
    }

    fn dims_with_scope(&self, scope: Scope) -> Vec<usize> {
        self.features.iter().enumerate().filter(|(_, f)| f.scope == scope).map(|(i, _)| i).collect()
    }

    /// Number of distinct per-block feature combinations (1 with no per-block dims).
    pub fn block_combo_count(&self) -> usize {
        self.per_block_dims().iter().map(|&d| self.features[d].options.len()).product()
    }

    /// Number of distinct per-unit feature combinations (1 with no per-unit dims).
    pub fn unit_combo_count(&self) -> usize {
        self.per_unit_dims().iter().map(|&d| self.features[d].options.len()).product()
    }

    pub fn min_total_depth(&self) -> usize {
        self.units.iter().map(UnitSpec::min_depth).sum()
    }

    pub fn max_total_depth(&self) -> usize {
        self.units.iter().map(UnitSpec::max_depth).sum()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Every unit at its minimum depth with every feature at its first option.
    pub fn minimum_arch(&self) -> ArchConfig {
        let nb = self.per_block_dims().len();
        let nu = self.per_unit_dims().len();
        ArchConfig {
            spec_name: self.name.clone(),
            unit_depths: self.units.iter().map(UnitSpec::min_depth).collect(),
            block_features: self.units.iter().map(|u| vec![vec![0; nb]; u.min_depth()]).collect(),
            unit_features: vec![vec![0; nu]; self.units.len()],
        }
    }

    /// Mixed-radix index of a per-block option tuple, first dimension most significant.
    pub fn block_combo_index(&self, block: &[usize]) -> usize {
        self.per_block_dims().iter().zip(block).fold(0, |acc, (&d, &opt)| acc * self.features[d].options.len() + opt)
    }

    /// Inverse of [`SupernetSpec::block_combo_index`].
    pub fn block_combo(&self, mut index: usize) -> Vec<usize> {
        let dims = self.per_block_dims();
        let mut out = vec![0; dims.len()];
        for (slot, &d) in dims.iter().enumerate().rev() {
            let n = self.features[d].options.len();
            out[slot] = index % n;
            index /= n;
        }
        out
    }

    /// Mixed-radix index of a per-unit option tuple.
    pub fn unit_combo_index(&self, unit: &[usize]) -> usize {
        self.per_unit_dims().iter().zip(unit).fold(0, |acc, (&d, &opt)| acc * self.features[d].options.len() + opt)
    }

    /// Inverse of [`SupernetSpec::unit_combo_index`].
    pub fn unit_combo(&self, mut index: usize) -> Vec<usize> {
        let dims = self.per_unit_dims();
        let mut out = vec![0; dims.len()];
        for (slot, &d) in dims.iter().enumerate().rev() {
            let n = self.features[d].options.len();
            out[slot] = index % n;
            index /= n;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Presets

const RATIOS: [f64; 3] = [0.5, 2.0 / 3.0, 1.0];

fn block_space(name: &str, widths: [u32; 4]) -> SupernetSpec {
    SupernetSpec {
        name: name.to_string(),
        units: (0..4)
            .map(|i| UnitSpec { index: i, depth_options: (1..=7).collect(), stage_width: Some(widths[i]) })
            .collect(),
        features: vec![
            FeatureDim { name: "kernel_size".into(), options: vec![3.0, 5.0, 7.0], scope: Scope::PerBlock },
            FeatureDim { name: "expansion_ratio".into(), options: RATIOS.to_vec(), scope: Scope::PerBlock },
        ],
    }
}

pub fn resnet() -> SupernetSpec {
    block_space("resnet", [256, 512, 1024, 2048])
}

pub fn mobilenetv3() -> SupernetSpec {
    block_space("mobilenetv3", [16, 32, 64, 128])
}

pub fn densenet() -> SupernetSpec {
    SupernetSpec {
        name: "densenet".into(),
        units: (0..5).map(|i| UnitSpec { index: i, depth_options: (1..=20).collect(), stage_width: None }).collect(),
        features: vec![FeatureDim {
            name: "kernel_size".into(),
            options: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            scope: Scope::PerUnit,
        }],
    }
}

pub const PRESETS: [&str; 3] = ["resnet", "mobilenetv3", "densenet"];

pub fn preset(name: &str) -> Option<SupernetSpec> {
    match name {
        "resnet" => Some(resnet()),
        "mobilenetv3" => Some(mobilenetv3()),
        "densenet" => Some(densenet()),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Counting

/// Exact number of distinct architectures in the space.
pub fn space_size(spec: &SupernetSpec) -> BigUint {
    let per_block = BigUint::from(spec.block_combo_count());
    let per_unit = BigUint::from(spec.unit_combo_count());
    spec.units.iter().fold(BigUint::one(), |acc, unit| {
        let depth_sum = unit.depth_options.iter().fold(BigUint::zero(), |s, &d| s + per_block.pow(d as u32));
        acc * depth_sum * &per_unit
    })
}

/// Three significant digits in exponent form, e.g. `8.38e26`.
pub fn format_count(n: &BigUint) -> String {
    let digits = n.to_string();
    let approx = n.to_f64().unwrap_or(f64::INFINITY);
    if approx.is_finite() {
        format!("{approx:.2e}")
    } else {
        format!("{}.{}e{}", &digits[..1], &digits[1..3], digits.len() - 1)
    }
}

pub fn total_depth(arch: &ArchConfig) -> usize {
    arch.total_depth()
}

// ---------------------------------------------------------------------------
// Depth bins

/// Equal-width bins over total depth. Bin `i` is `[edges[i], edges[i+1])`
/// except the last, which includes its upper edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthBins {
    pub n_bins: usize,
    pub edges: Vec<usize>,
}

impl DepthBins {
    pub fn bin_of(&self, total: usize) -> Result<usize> {
        let lo = self.edges[0];
        let hi = self.edges[self.n_bins];
        if total < lo || total > hi {
            return Err(Error::InvalidBins(format!("total depth {total} outside [{lo}, {hi}]")));
        }
        if total == hi {
            return Ok(self.n_bins - 1);
        }
        // edges are strictly increasing
        Ok(self.edges[1..].partition_point(|&e| e <= total))
    }

    /// Inclusive total-depth range of bin `i`.
    pub fn range(&self, i: usize) -> (usize, usize) {
        let hi = if i + 1 == self.n_bins { self.edges[i + 1] } else { self.edges[i + 1] - 1 };
        (self.edges[i], hi)
    }

    pub fn check_against(&self, spec: &SupernetSpec) -> Result<()> {
        if self.edges.len() != self.n_bins + 1 || self.n_bins == 0 {
            return Err(Error::InvalidBins(format!("{} edges for {} bins", self.edges.len(), self.n_bins)));
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidBins("edges not strictly increasing".into()));
        }
        if self.edges[0] != spec.min_total_depth() || self.edges[self.n_bins] != spec.max_total_depth() {
            return Err(Error::InvalidBins(format!(
                "edges span [{}, {}] but spec totals span [{}, {}]",
                self.edges[0],
                self.edges[self.n_bins],
                spec.min_total_depth(),
                spec.max_total_depth()
            )));
        }
        Ok(())
    }
}

pub fn make_bins(spec: &SupernetSpec, n_bins: usize) -> Result<DepthBins> {
    spec.validate()?;
    let lo = spec.min_total_depth();
    let hi = spec.max_total_depth();
    let distinct = hi - lo + 1;
    if n_bins == 0 || n_bins > distinct {
        return Err(Error::InvalidBins(format!("n_bins must be in 1..={distinct}, got {n_bins}")));
    }
    let width = distinct / n_bins;
    let mut edges: Vec<usize> = (0..n_bins).map(|i| lo + i * width).collect();
    edges.push(hi);
    Ok(DepthBins { n_bins, edges })
}

pub fn bin_index(arch: &ArchConfig, bins: &DepthBins) -> Result<usize> {
    bins.bin_of(arch.total_depth())
}

// ---------------------------------------------------------------------------
// Sampling

/// `ways[u][t]`: number of depth assignments of units `u..` summing to `t`.
struct CompositionTable {
    ways: Vec<Vec<u128>>,
}

impl CompositionTable {
    fn new(spec: &SupernetSpec) -> Result<Self> {
        let k = spec.units.len();
        let max_total = spec.max_total_depth();
        let mut ways = vec![vec![0u128; max_total + 1]; k + 1];
        ways[k][0] = 1;
        for u in (0..k).rev() {
            for t in 0..=max_total {
                let mut acc = 0u128;
                for &d in &spec.units[u].depth_options {
                    if d <= t {
                        acc = acc
                            .checked_add(ways[u + 1][t - d])
                            .ok_or_else(|| Error::InvalidSpec("composition count overflows u128".into()))?;
                    }
                }
                ways[u][t] = acc;
            }
        }
        Ok(CompositionTable { ways })
    }

    fn attainable(&self, total: usize) -> bool {
        self.ways[0].get(total).is_some_and(|&w| w > 0)
    }

    /// Uniform draw over unit-depth vectors summing to `total`.
    fn draw(&self, spec: &SupernetSpec, total: usize, rng: &mut seed::Rng) -> Vec<usize> {
        let mut remaining = total;
        let mut depths = Vec::with_capacity(spec.units.len());
        for (u, unit) in spec.units.iter().enumerate() {
            let weight = |d: usize| if d <= remaining { self.ways[u + 1][remaining - d] } else { 0 };
            let sum: u128 = unit.depth_options.iter().map(|&d| weight(d)).sum();
            let mut pick = rng.random_range(0..sum);
            let mut chosen = unit.depth_options[0];
            for &d in &unit.depth_options {
                let w = weight(d);
                if pick < w {
                    chosen = d;
                    break;
                }
                pick -= w;
            }
            depths.push(chosen);
            remaining -= chosen;
        }
        depths
    }
}

/// Fills in uniformly random features for a fixed depth vector.
pub fn sample_features(spec: &SupernetSpec, unit_depths: Vec<usize>, rng: &mut seed::Rng) -> ArchConfig {
    let block_dims = spec.per_block_dims();
    let unit_dims = spec.per_unit_dims();
    let draw = |dims: &[usize], rng: &mut seed::Rng| -> Vec<usize> {
        dims.iter().map(|&d| rng.random_range(0..spec.features[d].options.len())).collect()
    };
    let mut block_features = Vec::with_capacity(unit_depths.len());
    let mut unit_features = Vec::with_capacity(unit_depths.len());
    for &depth in &unit_depths {
        block_features.push((0..depth).map(|_| draw(&block_dims, rng)).collect());
        unit_features.push(draw(&unit_dims, rng));
    }
    ArchConfig { spec_name: spec.name.clone(), unit_depths, block_features, unit_features }
}

fn draw_random(spec: &SupernetSpec, rng: &mut seed::Rng) -> ArchConfig {
    let depths = spec.units.iter().map(|u| u.depth_options[rng.random_range(0..u.depth_options.len())]).collect();
    sample_features(spec, depths, rng)
}

/// `n` architectures drawn independently and uniformly per decision.
pub fn sample_random(spec: &SupernetSpec, n: usize, seed: u64) -> Result<Vec<ArchConfig>> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    Ok((0..n).map(|_| draw_random(spec, &mut rng)).collect())
}

/// Per-bin sample counts: `n / n_bins` each, remainder to the lowest bins.
pub fn balanced_counts(n: usize, n_bins: usize) -> Vec<usize> {
    (0..n_bins).map(|i| n / n_bins + usize::from(i < n % n_bins)).collect()
}

/// Samples for several bins at once; `counts[i]` architectures land in bin `i`.
///
/// Within a bin the total depth is uniform over the bin's attainable totals,
/// the unit-depth composition is uniform over those realizing that total, and
/// features are uniform.
pub fn sample_bins(
    spec: &SupernetSpec,
    bins: &DepthBins,
    counts: &[usize],
    rng: &mut seed::Rng,
) -> Result<Vec<ArchConfig>> {
    spec.validate()?;
    bins.check_against(spec)?;
    if counts.len() != bins.n_bins {
        return Err(Error::InvalidArgument(format!("{} counts for {} bins", counts.len(), bins.n_bins)));
    }
    let table = CompositionTable::new(spec)?;
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (bin, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let (lo, hi) = bins.range(bin);
        let totals: Vec<usize> = (lo..=hi).filter(|&t| table.attainable(t)).collect();
        if totals.is_empty() {
            return Err(Error::InvalidBins(format!("bin {bin} [{lo}, {hi}] has no attainable total depth")));
        }
        for _ in 0..count {
            let total = totals[rng.random_range(0..totals.len())];
            let depths = table.draw(spec, total, rng);
            out.push(sample_features(spec, depths, rng));
        }
    }
    Ok(out)
}

/// `n` architectures spread equally over the depth bins.
pub fn sample_balanced(spec: &SupernetSpec, n: usize, bins: &DepthBins, seed: u64) -> Result<Vec<ArchConfig>> {
    if n < bins.n_bins {
        return Err(Error::InvalidArgument(format!("n = {n} is smaller than n_bins = {}", bins.n_bins)));
    }
    let mut rng = seed::rng(seed);
    sample_bins(spec, bins, &balanced_counts(n, bins.n_bins), &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn single() -> SupernetSpec {
        SupernetSpec {
            name: "single".into(),
            units: vec![UnitSpec { index: 0, depth_options: vec![1], stage_width: None }],
            features: vec![FeatureDim { name: "kernel_size".into(), options: vec![3.0], scope: Scope::PerBlock }],
        }
    }

    /// Small space with both scopes, used for brute-force enumeration.
    pub(crate) fn tiny() -> SupernetSpec {
        SupernetSpec {
            name: "tiny".into(),
            units: vec![
                UnitSpec { index: 0, depth_options: vec![1, 2], stage_width: Some(8) },
                UnitSpec { index: 1, depth_options: vec![1, 3], stage_width: Some(16) },
            ],
            features: vec![
                FeatureDim { name: "kernel_size".into(), options: vec![3.0, 5.0], scope: Scope::PerBlock },
                FeatureDim { name: "act".into(), options: vec![0.0, 1.0], scope: Scope::PerUnit },
            ],
        }
    }

    type UnitChoice = (usize, Vec<Vec<usize>>, Vec<usize>);

    fn enumerate(spec: &SupernetSpec) -> Vec<ArchConfig> {
        let nb = spec.block_combo_count();
        let nu = spec.unit_combo_count();
        let mut per_unit: Vec<Vec<UnitChoice>> = Vec::new();
        for unit in &spec.units {
            let mut opts = Vec::new();
            for &d in &unit.depth_options {
                for code in 0..nb.pow(d as u32) {
                    let mut c = code;
                    let blocks: Vec<Vec<usize>> = (0..d)
                        .map(|_| {
                            let b = spec.block_combo(c % nb);
                            c /= nb;
                            b
                        })
                        .collect();
                    for uc in 0..nu {
                        opts.push((d, blocks.clone(), spec.unit_combo(uc)));
                    }
                }
            }
            per_unit.push(opts);
        }
        let mut out = vec![ArchConfig {
            spec_name: spec.name.clone(),
            unit_depths: vec![],
            block_features: vec![],
            unit_features: vec![],
        }];
        for opts in per_unit {
            out = out
                .into_iter()
                .flat_map(|a| {
                    opts.iter().map(move |(d, b, uf)| {
                        let mut a = a.clone();
                        a.unit_depths.push(*d);
                        a.block_features.push(b.clone());
                        a.unit_features.push(uf.clone());
                        a
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn resnet_space_size_matches_closed_form() {
        let per_unit: BigUint = (1..=7u32).map(|d| BigUint::from(9u32).pow(d)).sum();
        assert_eq!(space_size(&resnet()), per_unit.pow(4));
        assert_eq!(space_size(&mobilenetv3()), space_size(&resnet()));
        assert_eq!(format_count(&space_size(&resnet())), "8.38e26");
    }

    #[test]
    fn densenet_space_size_is_ten_billion() {
        assert_eq!(space_size(&densenet()), BigUint::from(10u64.pow(10)));
        assert_eq!(format_count(&space_size(&densenet())), "1.00e10");
    }

    #[test]
    fn single_architecture_space() {
        assert_eq!(space_size(&single()), BigUint::one());
        let archs = sample_random(&single(), 1, 3).unwrap();
        assert_eq!(archs[0], single().minimum_arch());
    }

    #[test]
    fn space_size_matches_enumeration() {
        let spec = tiny();
        let all = enumerate(&spec);
        let distinct: std::collections::HashSet<_> = all.iter().cloned().collect();
        assert_eq!(distinct.len(), all.len());
        assert_eq!(BigUint::from(all.len()), space_size(&spec));
        for a in &all {
            a.validate(&spec).unwrap();
        }
    }

    #[test]
    fn total_depth_sums_units() {
        let mut a = resnet().minimum_arch();
        assert_eq!(total_depth(&a), 4);
        a.unit_depths = vec![7, 7, 7, 7];
        assert_eq!(total_depth(&a), 28);
        a.unit_depths = vec![2, 5, 1, 3];
        assert_eq!(total_depth(&a), 11);
    }

    #[test]
    fn bins_for_presets() {
        assert_eq!(make_bins(&resnet(), 4).unwrap().edges, vec![4, 10, 16, 22, 28]);
        assert_eq!(make_bins(&densenet(), 5).unwrap().edges, vec![5, 24, 43, 62, 81, 100]);
        assert_eq!(make_bins(&resnet(), 1).unwrap().edges, vec![4, 28]);
        assert_eq!(make_bins(&resnet(), 25).unwrap().edges.len(), 26);
        assert!(make_bins(&resnet(), 26).is_err());
        assert!(make_bins(&resnet(), 0).is_err());
    }

    #[test]
    fn bin_boundaries() {
        let bins = make_bins(&resnet(), 4).unwrap();
        assert_eq!(bins.bin_of(4).unwrap(), 0);
        assert_eq!(bins.bin_of(9).unwrap(), 0);
        assert_eq!(bins.bin_of(10).unwrap(), 1);
        assert_eq!(bins.bin_of(16).unwrap(), 2);
        assert_eq!(bins.bin_of(28).unwrap(), 3);
        assert!(bins.bin_of(3).is_err());
        assert!(bins.bin_of(29).is_err());
    }

    #[test]
    fn random_depth_histogram_is_bell_shaped() {
        let archs = sample_random(&resnet(), 10_000, 11).unwrap();
        let mut hist = [0usize; 29];
        for a in &archs {
            hist[a.total_depth()] += 1;
        }
        let mode = (0..29).max_by_key(|&t| hist[t]).unwrap();
        assert!((15..=17).contains(&mode), "mode {mode}");
        // P(total = 4) = 1/2401
        assert!(hist[4] < 10 && hist[28] < 10, "{} {}", hist[4], hist[28]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let bins = make_bins(&resnet(), 4).unwrap();
        assert_eq!(sample_random(&resnet(), 50, 9).unwrap(), sample_random(&resnet(), 50, 9).unwrap());
        assert_eq!(
            sample_balanced(&resnet(), 50, &bins, 9).unwrap(),
            sample_balanced(&resnet(), 50, &bins, 9).unwrap()
        );
        assert_ne!(sample_random(&resnet(), 50, 9).unwrap(), sample_random(&resnet(), 50, 10).unwrap());
    }

    #[test]
    fn balanced_fills_bins_equally() {
        let spec = resnet();
        let bins = make_bins(&spec, 4).unwrap();
        let archs = sample_balanced(&spec, 400, &bins, 1).unwrap();
        let mut counts = [0usize; 4];
        for a in &archs {
            a.validate(&spec).unwrap();
            counts[bin_index(a, &bins).unwrap()] += 1;
        }
        assert_eq!(counts, [100; 4]);

        let archs = sample_balanced(&spec, 4, &bins, 2).unwrap();
        let idx: Vec<usize> = archs.iter().map(|a| bin_index(a, &bins).unwrap()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(sample_balanced(&spec, 3, &bins, 2).is_err());
    }

    #[test]
    fn single_total_bin_has_unique_composition() {
        let spec = resnet();
        let bins = DepthBins { n_bins: 2, edges: vec![4, 5, 28] };
        let archs = sample_balanced(&spec, 40, &bins, 5).unwrap();
        for a in archs.iter().filter(|a| bins.bin_of(a.total_depth()).unwrap() == 0) {
            assert_eq!(a.unit_depths, vec![1, 1, 1, 1]);
        }
    }

    #[test]
    fn unattainable_bin_is_rejected() {
        let spec = SupernetSpec {
            name: "gappy".into(),
            units: vec![UnitSpec { index: 0, depth_options: vec![2, 6], stage_width: None }],
            features: vec![],
        };
        let bins = make_bins(&spec, 5).unwrap();
        let err = sample_balanced(&spec, 5, &bins, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidBins(_)), "{err}");
    }

    #[test]
    fn composition_sampling_is_uniform() {
        let spec = SupernetSpec {
            name: "two".into(),
            units: (0..2).map(|i| UnitSpec { index: i, depth_options: vec![1, 2], stage_width: None }).collect(),
            features: vec![],
        };
        let bins = make_bins(&spec, 1).unwrap();
        let n = 100_000;
        let archs = sample_balanced(&spec, n, &bins, 77).unwrap();
        let mut by_total: HashMap<usize, HashMap<Vec<usize>, usize>> = HashMap::new();
        for a in &archs {
            *by_total.entry(a.total_depth()).or_default().entry(a.unit_depths.clone()).or_default() += 1;
        }
        // totals 2,3,4 uniform; total 3 splits over (1,2) and (2,1)
        let expect: [(Vec<usize>, f64); 4] =
            [(vec![1, 1], 1.0 / 3.0), (vec![1, 2], 1.0 / 6.0), (vec![2, 1], 1.0 / 6.0), (vec![2, 2], 1.0 / 3.0)];
        for (comp, p) in expect {
            let total: usize = comp.iter().sum();
            let seen = by_total[&total].get(&comp).copied().unwrap_or(0) as f64;
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((seen - mean).abs() < 3.0 * sd, "{comp:?}: {seen} vs {mean}");
        }
    }

    #[test]
    fn spec_validation_rejects_bad_input() {
        let mut s = resnet();
        s.units[1].depth_options.clear();
        assert!(s.validate().is_err());
        let mut s = resnet();
        s.features[0].options.clear();
        assert!(s.validate().is_err());
        let mut s = resnet();
        s.units.clear();
        assert!(s.validate().is_err());
        let mut s = resnet();
        s.units[0].stage_width = Some(0);
        assert!(s.validate().is_err());
        for p in PRESETS {
            preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn combo_index_round_trip() {
        let spec = resnet();
        for i in 0..spec.block_combo_count() {
            assert_eq!(spec.block_combo_index(&spec.block_combo(i)), i);
        }
        // kernel-major
        assert_eq!(spec.block_combo_index(&[1, 0]), 3);
    }
}

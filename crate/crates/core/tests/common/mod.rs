#![allow(dead_code)]

use latsurr::archspace::{ArchConfig, FeatureDim, Scope, SupernetSpec, UnitSpec};
use rand::seq::SliceRandom;

/// Two units, two per-block dims and one per-unit dim: 6720 architectures.
pub fn tiny_spec() -> SupernetSpec {
    SupernetSpec {
        name: "tiny".into(),
        units: vec![
            UnitSpec { index: 0, depth_options: vec![1, 2, 3], stage_width: Some(64) },
            UnitSpec { index: 1, depth_options: vec![1, 2], stage_width: Some(128) },
        ],
        features: vec![
            FeatureDim { name: "kernel_size".into(), options: vec![3.0, 5.0], scope: Scope::PerBlock },
            FeatureDim { name: "width_mult".into(), options: vec![1.0, 2.0], scope: Scope::PerUnit },
            FeatureDim { name: "expansion_ratio".into(), options: vec![0.5, 1.0], scope: Scope::PerBlock },
        ],
    }
}

/// Every (depth, blocks, unit features) choice for one unit.
fn unit_choices(spec: &SupernetSpec, u: usize) -> Vec<(usize, Vec<Vec<usize>>, Vec<usize>)> {
    let combos: Vec<Vec<usize>> = (0..spec.block_combo_count()).map(|i| spec.block_combo(i)).collect();
    let unit_combos: Vec<Vec<usize>> = (0..spec.unit_combo_count()).map(|i| spec.unit_combo(i)).collect();
    let mut out = Vec::new();
    for &depth in &spec.units[u].depth_options {
        let mut seqs: Vec<Vec<Vec<usize>>> = vec![vec![]];
        for _ in 0..depth {
            seqs = seqs
                .into_iter()
                .flat_map(|s| {
                    combos.iter().map(move |c| {
                        let mut s = s.clone();
                        s.push(c.clone());
                        s
                    })
                })
                .collect();
        }
        for s in seqs {
            for uc in &unit_combos {
                out.push((depth, s.clone(), uc.clone()));
            }
        }
    }
    out
}

/// Brute-force enumeration of a small space.
pub fn enumerate(spec: &SupernetSpec) -> Vec<ArchConfig> {
    let mut archs = vec![ArchConfig {
        spec_name: spec.name.clone(),
        unit_depths: vec![],
        block_features: vec![],
        unit_features: vec![],
    }];
    for u in 0..spec.units.len() {
        let choices = unit_choices(spec, u);
        archs = archs
            .into_iter()
            .flat_map(|a| {
                choices.iter().map(move |(d, blocks, uf)| {
                    let mut a = a.clone();
                    a.unit_depths.push(*d);
                    a.block_features.push(blocks.clone());
                    a.unit_features.push(uf.clone());
                    a
                })
            })
            .collect();
    }
    archs
}

/// Same architecture with the blocks of every unit shuffled.
pub fn shuffle_blocks(arch: &ArchConfig, seed: u64) -> ArchConfig {
    let mut rng = latsurr::seed::rng(seed);
    let mut out = arch.clone();
    for blocks in &mut out.block_features {
        blocks.shuffle(&mut rng);
    }
    out
}

/// Canonical form up to within-unit block order.
pub fn multiset_key(arch: &ArchConfig) -> ArchConfig {
    let mut out = arch.clone();
    for blocks in &mut out.block_features {
        blocks.sort();
    }
    out
}

/// Feature counts rebuilt from the FCC histogram by summing out the other dims.
pub fn marginalize(spec: &SupernetSpec, fcc: &[f64]) -> Vec<f64> {
    let combos = if spec.per_block_dims().is_empty() { 0 } else { spec.block_combo_count() };
    let unit_opts: usize = spec.per_unit_dims().iter().map(|&d| spec.features[d].options.len()).sum();
    let mut out = Vec::new();
    for u in 0..spec.units.len() {
        let base = u * (combos + unit_opts);
        let (hist, unit_counts) = fcc[base..base + combos + unit_opts].split_at(combos);
        let (mut bslot, mut uoff) = (0, 0);
        for feat in &spec.features {
            let n = feat.options.len();
            match feat.scope {
                Scope::PerBlock => {
                    let mut marg = vec![0.0; n];
                    for (c, &count) in hist.iter().enumerate() {
                        marg[spec.block_combo(c)[bslot]] += count;
                    }
                    out.extend(marg);
                    bslot += 1;
                }
                Scope::PerUnit => {
                    out.extend_from_slice(&unit_counts[uoff..uoff + n]);
                    uoff += n;
                }
            }
        }
    }
    out
}

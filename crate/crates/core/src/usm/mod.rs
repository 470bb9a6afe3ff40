//! Uniform semantic mapping: optimal-transport assignment of the last
//! quantization level, and two-stage resolution of index collisions.

mod assignment;
mod sinkhorn;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sq_dist;
use crate::rqvae::{BatchQuantization, Codebook};

pub use assignment::{assignment_cost, min_cost_assignment};
pub use sinkhorn::{sinkhorn, sinkhorn_log, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsmConfig {
    /// Entropic regularisation, relative to the batch-mean cost.
    pub epsilon: f64,
    pub iters: usize,
}

impl Default for UsmConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            iters: 100,
        }
    }
}

/// Plan entries within this fraction of the row maximum count as tied.
pub const ROUNDING_TIE_TOL: f64 = 1e-5;

/// Squared distances `n x K` between residual rows and code vectors.
pub fn cost_matrix(residuals: &[f64], codes: &[f64], dim: usize) -> Vec<f64> {
    let mut cost = Vec::with_capacity(residuals.len() / dim * codes.len() / dim);
    for r in residuals.chunks_exact(dim) {
        cost.extend(codes.chunks_exact(dim).map(|v| sq_dist(r, v)));
    }
    cost
}

/// Row-wise arg max of a plan; near-ties go to the lowest column.
pub fn round_plan(plan: &TransportPlan) -> Vec<u32> {
    (0..plan.rows())
        .map(|n| {
            let row = plan.row(n);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let floor = max - ROUNDING_TIE_TOL * max.abs();
            row.iter().position(|&p| p >= floor).unwrap_or(0) as u32
        })
        .collect()
}

/// Assign each of `n` residuals (row-major, `dim` wide) to a code of `level_codes`
/// (`K x dim`) by balanced transport followed by greedy rounding.
pub fn assign_last_level(residuals: &[f64], level_codes: &[f64], dim: usize, cfg: UsmConfig) -> Result<Vec<u32>> {
    let n = residuals.len() / dim;
    let k = level_codes.len() / dim;
    if n == 0 {
        return Err(Error::Domain("assign_last_level needs at least one residual".into()));
    }
    let mut cost = cost_matrix(residuals, level_codes, dim);
    let mean = cost.iter().sum::<f64>() / cost.len() as f64;
    if mean > 0.0 && mean.is_finite() {
        cost.iter_mut().for_each(|c| *c /= mean);
    }
    let plan = sinkhorn(&cost, n, k, cfg.epsilon, cfg.iters)?;
    Ok(round_plan(&plan))
}

/// Residual quantization of a batch with greedy levels `1..H-1` and a
/// transport-balanced final level.
pub fn quantize_with_usm(batch_z: &[f64], n: usize, cb: &Codebook, cfg: UsmConfig) -> Result<BatchQuantization> {
    cb.quantize_batch_with(batch_z, n, |cb, level, r| {
        assign_last_level(r, cb.level(level), cb.dim(), cfg)
    })
}

/// One group of items that shared a full index before resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictGroup {
    pub index: Vec<u32>,
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub groups: Vec<ConflictGroup>,
    /// Items whose last-level code changed.
    pub reassigned: usize,
}

impl ConflictReport {
    pub fn colliding_items(&self) -> usize {
        self.groups.iter().map(|g| g.items.len()).sum()
    }

    /// `(group size, number of groups)` pairs, ascending by size.
    pub fn size_histogram(&self) -> Vec<(usize, usize)> {
        let mut hist = BTreeMap::new();
        for g in &self.groups {
            *hist.entry(g.items.len()).or_insert(0) += 1;
        }
        hist.into_iter().collect()
    }
}

/// Second stage of index construction: within every prefix that holds
/// colliding items, redistribute the colliding items' last-level codes over
/// the codes not taken by that prefix's unique items, by exact minimum-cost
/// assignment on squared residual distance.
///
/// `codes` is `N x H` row-major and is rewritten in place; only the last
/// column ever changes. `residuals_last` is `N x dim` (the level-H residuals),
/// `last_level` is the `K x dim` final codebook level.
pub fn resolve_conflicts(
    codes: &mut [u32],
    levels: usize,
    residuals_last: &[f64],
    last_level: &[f64],
    dim: usize,
) -> Result<ConflictReport> {
    assert!(levels >= 1);
    let n = codes.len() / levels;
    assert_eq!(residuals_last.len(), n * dim);
    let k = last_level.len() / dim;

    let mut by_index: BTreeMap<&[u32], Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        by_index.entry(&codes[i * levels..(i + 1) * levels]).or_default().push(i);
    }
    let mut report = ConflictReport::default();
    // prefix -> (movable items, occupied codes)
    let mut prefixes: BTreeMap<Vec<u32>, (Vec<usize>, Vec<bool>)> = BTreeMap::new();
    for (index, items) in &by_index {
        if items.len() > 1 {
            report.groups.push(ConflictGroup {
                index: index.to_vec(),
                items: items.clone(),
            });
            prefixes
                .entry(index[..levels - 1].to_vec())
                .or_insert_with(|| (Vec::new(), vec![false; k]));
        }
    }
    if report.groups.is_empty() {
        return Ok(report);
    }
    for (index, items) in &by_index {
        if let Some((movable, occupied)) = prefixes.get_mut(&index[..levels - 1]) {
            if items.len() > 1 {
                movable.extend(items);
            } else {
                occupied[index[levels - 1] as usize] = true;
            }
        }
    }
    drop(by_index);

    for (prefix, (mut movable, occupied)) in prefixes {
        movable.sort_unstable();
        let free: Vec<usize> = (0..k).filter(|&c| !occupied[c]).collect();
        if movable.len() > free.len() {
            return Err(Error::Unresolvable {
                prefix,
                size: movable.len() + (k - free.len()),
                codes: k,
            });
        }
        let mut cost = Vec::with_capacity(movable.len() * free.len());
        for &i in &movable {
            let r = &residuals_last[i * dim..(i + 1) * dim];
            cost.extend(free.iter().map(|&c| sq_dist(r, &last_level[c * dim..(c + 1) * dim])));
        }
        let assignment = min_cost_assignment(&cost, movable.len(), free.len());
        for (&i, &slot) in movable.iter().zip(&assignment) {
            let code = free[slot] as u32;
            let last = &mut codes[i * levels + levels - 1];
            if *last != code {
                report.reassigned += 1;
                *last = code;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use std::collections::HashSet;

    fn random_codebook(levels: usize, k: usize, dim: usize, seed: u64) -> Codebook {
        let mut rng = seeded_rng(seed);
        let data = (0..levels * k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Codebook::from_data(levels, k, dim, data).unwrap()
    }

    #[test]
    fn single_row_takes_its_argmax() {
        // one row against K columns of mass 1/K: the plan is forced uniform,
        // so every entry ties and the lowest code wins
        let codes = [0.0, 0.0, 1.0, 1.0, -1.0, 2.0];
        let cost = cost_matrix(&[0.9, 1.1], &codes, 2);
        let plan = sinkhorn(&cost, 1, 3, 0.05, 100).unwrap();
        assert!((plan.row_sums()[0] - 1.0).abs() < 1e-12);
        let argmax = crate::linalg::argmax(plan.row(0).iter().copied());
        let out = assign_last_level(&[0.9, 1.1], &codes, 2, UsmConfig::default()).unwrap();
        assert_eq!(out, vec![0]);
        assert!((plan.get(0, argmax) - plan.get(0, 0)).abs() < 1e-12);
    }

    /// Minimum-cost permutation by enumeration, for K <= 6.
    fn best_permutation(cost: &[f64], k: usize) -> Vec<usize> {
        fn permute(prefix: &mut Vec<usize>, k: usize, cost: &[f64], best: &mut (f64, Vec<usize>)) {
            if prefix.len() == k {
                let c: f64 = prefix.iter().enumerate().map(|(i, &j)| cost[i * k + j]).sum();
                if c < best.0 {
                    *best = (c, prefix.clone());
                }
                return;
            }
            for j in 0..k {
                if !prefix.contains(&j) {
                    prefix.push(j);
                    permute(prefix, k, cost, best);
                    prefix.pop();
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        permute(&mut Vec::new(), k, cost, &mut best);
        best.1
    }

    #[test]
    fn exact_residuals_recover_the_permutation() {
        for k in 2..=6 {
            let cb = random_codebook(1, k, 3, k as u64);
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut seeded_rng(100 + k as u64));
            let residuals: Vec<f64> = perm.iter().flat_map(|&c| cb.vector(0, c).to_vec()).collect();
            let got = assign_last_level(&residuals, cb.level(0), 3, UsmConfig { epsilon: 0.01, iters: 200 }).unwrap();
            let want = best_permutation(&cost_matrix(&residuals, cb.level(0), 3), k);
            assert_eq!(got.iter().map(|&c| c as usize).collect::<Vec<_>>(), want);
            assert_eq!(want, perm);
        }
    }

    #[test]
    fn identical_residuals_balance_columns_but_may_collide() {
        let cb = random_codebook(1, 4, 2, 9);
        let residuals = [0.3, -0.2].repeat(4);
        let mut cost = cost_matrix(&residuals, cb.level(0), 2);
        let mean = cost.iter().sum::<f64>() / cost.len() as f64;
        cost.iter_mut().for_each(|c| *c /= mean);
        let plan = sinkhorn(&cost, 4, 4, 1e-3, 200).unwrap();
        for s in plan.col_sums() {
            assert!((s - 1.0).abs() < 1e-6);
        }
        let codes = assign_last_level(&residuals, cb.level(0), 2, UsmConfig { epsilon: 1e-3, iters: 200 }).unwrap();
        assert!(codes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn single_level_usm_is_assign_last_level() {
        let cb = random_codebook(1, 5, 3, 2);
        let mut rng = seeded_rng(8);
        let z: Vec<f64> = (0..7 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = UsmConfig::default();
        let q = quantize_with_usm(&z, 7, &cb, cfg).unwrap();
        assert_eq!(q.codes, assign_last_level(&z, cb.level(0), 3, cfg).unwrap());
    }

    #[test]
    fn huge_epsilon_rounds_everything_to_code_zero() {
        let cb = random_codebook(2, 6, 3, 5);
        let mut rng = seeded_rng(6);
        let z: Vec<f64> = (0..10 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quantize_with_usm(&z, 10, &cb, UsmConfig { epsilon: 1e6, iters: 100 }).unwrap();
        for i in 0..10 {
            assert_eq!(q.item_codes(i)[1], 0);
        }
    }

    #[test]
    fn well_separated_clusters_keep_greedy_prefix() {
        let mut cb = Codebook::zeros(2, 4, 2).unwrap();
        let centers = [[5.0, 5.0], [-5.0, 5.0], [5.0, -5.0], [-5.0, -5.0]];
        for (c, v) in centers.iter().enumerate() {
            cb.vector_mut(0, c).copy_from_slice(v);
            cb.vector_mut(1, c).copy_from_slice(&[0.1 * c as f64, -0.05 * c as f64]);
        }
        let mut rng = seeded_rng(12);
        let z: Vec<f64> = (0..8)
            .flat_map(|i| {
                let c = centers[i % 4];
                vec![c[0] + rng.random_range(-0.3..0.3), c[1] + rng.random_range(-0.3..0.3)]
            })
            .collect();
        let usm = quantize_with_usm(&z, 8, &cb, UsmConfig::default()).unwrap();
        let greedy = cb.quantize_batch(&z, 8);
        for i in 0..8 {
            assert_eq!(usm.item_codes(i)[0], greedy.item_codes(i)[0]);
            assert_eq!(greedy.item_codes(i)[0], cb.quantize(&z[i * 2..i * 2 + 2]).codes[0]);
        }
    }

    #[test]
    fn no_conflicts_is_identity() {
        let mut codes = vec![0, 1, 0, 2, 1, 1];
        let before = codes.clone();
        let report = resolve_conflicts(&mut codes, 2, &[0.0; 3], &[0.0; 3], 1).unwrap();
        assert_eq!(codes, before);
        assert!(report.groups.is_empty());
    }

    #[test]
    fn duplicate_pair_gets_the_cheapest_distinct_codes() {
        let k = 5;
        let cb = random_codebook(2, k, 3, 21);
        let e = [0.2, -0.4, 0.1];
        let z = [e, e].concat();
        let mut q = cb.quantize_batch(&z, 2);
        assert_eq!(q.item_codes(0), q.item_codes(1));
        let r_last = q.residuals[1].clone();
        resolve_conflicts(&mut q.codes, 2, &r_last, cb.level(1), 3).unwrap();
        assert_eq!(q.item_codes(0)[0], q.item_codes(1)[0]);
        assert_ne!(q.item_codes(0)[1], q.item_codes(1)[1]);
        let cost = cost_matrix(&r_last, cb.level(1), 3);
        let got = cost[q.item_codes(0)[1] as usize] + cost[k + q.item_codes(1)[1] as usize];
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    best = best.min(cost[a] + cost[k + b]);
                }
            }
        }
        assert!((got - best).abs() < 1e-12);
    }

    #[test]
    fn three_way_collision_matches_enumeration() {
        let k = 4;
        let cb = random_codebook(1, k, 2, 31);
        let mut rng = seeded_rng(32);
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut codes = vec![2, 2, 2];
        resolve_conflicts(&mut codes, 1, &r, cb.level(0), 2).unwrap();
        let cost = cost_matrix(&r, cb.level(0), 2);
        let got: f64 = codes.iter().enumerate().map(|(i, &c)| cost[i * k + c as usize]).sum();
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    if a != b && b != c && a != c {
                        best = best.min(cost[a] + cost[k + b] + cost[2 * k + c]);
                    }
                }
            }
        }
        assert!((got - best).abs() < 1e-12);
        assert_eq!(codes.iter().collect::<HashSet<_>>().len(), 3);
    }

    #[test]
    fn unique_neighbours_keep_their_codes() {
        // items 0,1 collide on (0,0); item 2 holds (0,1) and must not move
        let mut codes = vec![0, 0, 0, 0, 0, 1];
        let last = [0.0, 1.0, 2.0];
        let r = [0.1, 0.1, 1.0];
        resolve_conflicts(&mut codes, 2, &r, &last, 1).unwrap();
        assert_eq!(&codes[4..], &[0, 1]);
        let mut tuples: Vec<_> = codes.chunks(2).collect();
        tuples.sort();
        tuples.dedup();
        assert_eq!(tuples.len(), 3);
    }

    #[test]
    fn oversized_group_is_unresolvable() {
        let mut codes = vec![1, 0, 1, 0, 1, 0];
        let err = resolve_conflicts(&mut codes, 2, &[0.0; 3], &[0.0, 1.0], 1).unwrap_err();
        match err {
            Error::Unresolvable { prefix, size, codes } => {
                assert_eq!(prefix, vec![1]);
                assert_eq!(size, 3);
                assert_eq!(codes, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn resolution_is_conflict_free_and_prefix_preserving(
            n in 1usize..60,
            seed in any::<u64>(),
        ) {
            let (levels, k, dim) = (3, 8, 2);
            let mut rng = seeded_rng(seed);
            // few distinct prefixes so collisions are common
            let mut codes: Vec<u32> = (0..n)
                .flat_map(|_| vec![rng.random_range(0..2u32), rng.random_range(0..2u32), rng.random_range(0..3u32)])
                .collect();
            let r: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let last: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let before = codes.clone();
            let result = resolve_conflicts(&mut codes, levels, &r, &last, dim);
            let mut per_prefix = std::collections::HashMap::new();
            for row in before.chunks(levels) {
                *per_prefix.entry(row[..levels - 1].to_vec()).or_insert(0usize) += 1;
            }
            if per_prefix.values().any(|&c| c > k) {
                prop_assert!(result.is_err());
            } else {
                result.unwrap();
                let unique: HashSet<&[u32]> = codes.chunks(levels).collect();
                prop_assert_eq!(unique.len(), n);
                for (a, b) in codes.chunks(levels).zip(before.chunks(levels)) {
                    prop_assert_eq!(&a[..levels - 1], &b[..levels - 1]);
                }
            }
        }
    }
}

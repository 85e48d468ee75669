use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::LabeledSample;
use crate::error::{Error, Result};

/// Client shards as sorted index lists into the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }
}

/// Splits `total` items over `weights` (summing to 1) by largest remainder;
/// ties go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-`(y, g)` cell Dirichlet split over `n` clients.
pub fn dirichlet_partition(
    data: &[LabeledSample],
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if n == 0 {
        return Err(Error::invalid("partition needs at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha = {alpha} must be positive")));
    }
    if n > data.len() {
        return Err(Error::invalid(format!(
            "{n} clients for only {} samples",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut shards = vec![Vec::new(); n];
    for cell in 0..4 {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].cell() == cell).collect();
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = draws.iter().sum();
        let weights: Vec<f64> = if sum > 0.0 && sum.is_finite() {
            draws.iter().map(|d| d / sum).collect()
        } else {
            // Every draw underflowed: give the cell to the largest draw's owner.
            let top = (0..n).max_by(|&a, &b| draws[a].total_cmp(&draws[b])).unwrap_or(0);
            (0..n).map(|i| if i == top { 1.0 } else { 0.0 }).collect()
        };
        let mut start = 0;
        for (shard, c) in shards.iter_mut().zip(largest_remainder(idx.len(), &weights)) {
            shard.extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..n)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("n >= 1");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(Partition { shards, alpha })
}

/// Withholds `frac` of every client's `(y, g)` cells for evaluation.
/// Returns the training partition and the per-client held-out indices; a
/// cell with a single sample stays in training.
pub fn split_holdout(
    data: &[LabeledSample],
    partition: Partition,
    frac: f64,
    seed: u64,
) -> Result<(Partition, Vec<Vec<usize>>)> {
    if !(0.0..0.5).contains(&frac) {
        return Err(Error::invalid(format!("holdout fraction {frac} must lie in [0, 0.5)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(partition.shards.len());
    let mut held = Vec::with_capacity(partition.shards.len());
    for shard in partition.shards {
        let (mut keep, mut out) = (Vec::new(), Vec::new());
        for cell in 0..4 {
            let mut idx: Vec<usize> = shard.iter().copied().filter(|&i| data[i].cell() == cell).collect();
            idx.shuffle(&mut rng);
            let take = (frac * idx.len() as f64).round() as usize;
            out.extend_from_slice(&idx[..take]);
            keep.extend_from_slice(&idx[take..]);
        }
        keep.sort_unstable();
        out.sort_unstable();
        train.push(keep);
        held.push(out);
    }
    Ok((Partition { shards: train, alpha: partition.alpha }, held))
}

/// Draws `size / 4` indices from each `(y, g)` cell, skipping `exclude`.
pub fn balanced_test_sample(
    data: &[LabeledSample],
    size: usize,
    exclude: &[usize],
    seed: u64,
) -> Result<Vec<usize>> {
    if size % 4 != 0 {
        return Err(Error::invalid(format!(
            "balanced sample size {size} is not divisible by the 4 label/group cells"
        )));
    }
    let per = size / 4;
    let mut excluded = vec![false; data.len()];
    for &i in exclude {
        if let Some(e) = excluded.get_mut(i) {
            *e = true;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for cell in 0..4 {
        let pool: Vec<usize> = (0..data.len())
            .filter(|&i| !excluded[i] && data[i].cell() == cell)
            .collect();
        if pool.len() < per {
            return Err(Error::invalid(format!(
                "cell (y={}, g={}) has {} eligible samples, {per} needed",
                cell / 2,
                cell % 2,
                pool.len()
            )));
        }
        out.extend(
            rand::seq::index::sample(&mut rng, pool.len(), per)
                .into_iter()
                .map(|k| pool[k]),
        );
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn labels_only(n: usize, seed: u64) -> Vec<LabeledSample> {
        generate_synthetic(&SyntheticSpec {
            n,
            seed,
            noise_sigma: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    fn check_cover(p: &Partition, n: usize) {
        let mut all: Vec<usize> = p.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(p.shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn single_client_gets_everything() {
        let d = labels_only(100, 0);
        let p = dirichlet_partition(&d, 1, 0.5, 3).unwrap();
        assert_eq!(p.shards, vec![(0..100).collect::<Vec<_>>()]);
    }

    #[test]
    fn concentrated_alpha_is_near_uniform() {
        let d = labels_only(5000, 1);
        let p = dirichlet_partition(&d, 5, 100.0, 4).unwrap();
        check_cover(&p, 5000);
        for s in p.sizes() {
            assert!((850..=1150).contains(&s), "{s}");
        }
    }

    #[test]
    fn heterogeneity_grows_as_alpha_shrinks() {
        let d = labels_only(1000, 2);
        let ratio = |alpha: f64| {
            (0..20)
                .map(|seed| {
                    let s = dirichlet_partition(&d, 5, alpha, seed).unwrap().sizes();
                    *s.iter().max().unwrap() as f64 / *s.iter().min().unwrap() as f64
                })
                .sum::<f64>()
                / 20.0
        };
        assert!(ratio(0.1) > ratio(100.0));
    }

    #[test]
    fn holdout_is_a_stratified_disjoint_split() {
        let d = labels_only(2000, 5);
        let p = dirichlet_partition(&d, 4, 0.5, 6).unwrap();
        let (train, held) = split_holdout(&d, p.clone(), 0.2, 7).unwrap();
        for ((all, kept), out) in p.shards.iter().zip(&train.shards).zip(&held) {
            let mut joined: Vec<usize> = kept.iter().chain(out).copied().collect();
            joined.sort_unstable();
            assert_eq!(&joined, all);
            assert!(!kept.is_empty());
            for cell in 0..4 {
                let n = all.iter().filter(|&&i| d[i].cell() == cell).count();
                let h = out.iter().filter(|&&i| d[i].cell() == cell).count();
                assert_eq!(h, (0.2 * n as f64).round() as usize);
            }
        }
        let (same, none) = split_holdout(&d, p.clone(), 0.0, 7).unwrap();
        assert_eq!(same, p);
        assert!(none.iter().all(Vec::is_empty));
        assert!(split_holdout(&d, p, 0.5, 7).is_err());
    }

    #[test]
    fn errors() {
        let d = labels_only(3, 0);
        assert!(dirichlet_partition(&d, 4, 1.0, 0).is_err());
        assert!(dirichlet_partition(&d, 2, 0.0, 0).is_err());
        assert!(dirichlet_partition(&d, 0, 1.0, 0).is_err());
    }

    #[test]
    fn balanced_sampling() {
        let d = generate_synthetic(&SyntheticSpec {
            n: 2000,
            spurious_strength: 0.0,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let exclude: Vec<usize> = (0..500).collect();
        let s = balanced_test_sample(&d, 400, &exclude, 9).unwrap();
        assert_eq!(s.len(), 400);
        for cell in 0..4 {
            assert_eq!(s.iter().filter(|&&i| d[i].cell() == cell).count(), 100);
        }
        assert!(s.iter().all(|&i| i >= 500));
        assert_eq!(s, balanced_test_sample(&d, 400, &exclude, 9).unwrap());
        assert!(balanced_test_sample(&d, 402, &[], 9).is_err());
        assert!(balanced_test_sample(&d[..40], 400, &[], 9).is_err());
    }

    #[test]
    fn largest_remainder_preserves_total() {
        assert_eq!(largest_remainder(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(largest_remainder(7, &[1.0 / 3.0; 3]).iter().sum::<usize>(), 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn disjoint_and_covering(n in 1usize..12, alpha in 0.05f64..50.0, seed in any::<u64>()) {
            let d = labels_only(60, 7);
            let p = dirichlet_partition(&d, n, alpha, seed).unwrap();
            prop_assert_eq!(p.shards.len(), n);
            check_cover(&p, 60);
        }
    }
}

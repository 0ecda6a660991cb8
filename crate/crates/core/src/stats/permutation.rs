use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::divergence::jsd_probs;
use super::{add_one_p, mean, percentile_ci, sample_sd, SongDistribution};
use crate::error::{Error, Result};
use crate::rng::{stream_seed, SplitMix64};

/// Fewest permutations accepted by the null-model tests.
pub const MIN_PERMUTATIONS: usize = 100;

/// Null draws within this distance of the observed value count as ties.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermResult {
    pub observed: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub z: f64,
    pub cohens_d: f64,
    /// One-sided, `(1 + #{null >= observed}) / (n_perm + 1)`.
    pub p: f64,
    pub n_perm: usize,
    pub seed: u64,
    pub n_groups: usize,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionContrast {
    /// Same-region minus different-region, over the pooled SD.
    pub cohens_d: f64,
    /// Two-sided, on `|d|`.
    pub p: f64,
    pub mean_same: f64,
    pub mean_diff: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub n_perm: usize,
    pub seed: u64,
}

/// Cohen's d of `a` against `b` with the pooled standard deviation.
pub(crate) fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = a.iter().chain(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if hi - lo <= TIE_TOL * hi.abs().max(1.0) {
        return 0.0;
    }
    let diff = mean(a) - mean(b);
    let df = (a.len() + b.len()).saturating_sub(2);
    let ss = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let pooled = if df == 0 { 0.0 } else { ((ss(a) + ss(b)) / df as f64).sqrt() };
    if pooled == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    } else {
        diff / pooled
    }
}

struct Groups<'a> {
    probs: Vec<&'a [f64]>,
    labels: Vec<usize>,
    n_groups: usize,
    dim: usize,
}

impl<'a> Groups<'a> {
    fn new(songs: &'a [SongDistribution]) -> Result<Self> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for s in songs {
            index.insert(&s.country, 0);
        }
        if index.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 countries, got {}",
                index.len()
            )));
        }
        for (i, v) in index.values_mut().enumerate() {
            *v = i;
        }
        let dim = songs[0].dist.probs.len();
        if songs.iter().any(|s| s.dist.kind != songs[0].dist.kind || s.dist.probs.len() != dim) {
            return Err(Error::GridMismatch("songs mix density kinds".into()));
        }
        Ok(Self {
            probs: songs.iter().map(|s| s.dist.probs.as_slice()).collect(),
            labels: songs.iter().map(|s| index[s.country.as_str()]).collect(),
            n_groups: index.len(),
            dim,
        })
    }

    /// Pairwise JSDs of group means for the given song-to-group labels and
    /// song indices.
    fn pair_jsds(&self, labels: &[usize], members: &[usize]) -> Vec<f64> {
        let mut sums = vec![vec![0.0; self.dim]; self.n_groups];
        let mut counts = vec![0usize; self.n_groups];
        for (&song, &g) in members.iter().zip(labels) {
            sums[g].iter_mut().zip(self.probs[song]).for_each(|(a, p)| *a += p);
            counts[g] += 1;
        }
        for (s, c) in sums.iter_mut().zip(&counts) {
            let c = *c as f64;
            s.iter_mut().for_each(|v| *v /= c);
        }
        let mut out = Vec::with_capacity(self.n_groups * (self.n_groups - 1) / 2);
        for i in 0..self.n_groups {
            for j in i + 1..self.n_groups {
                out.push(jsd_probs(&sums[i], &sums[j]));
            }
        }
        out
    }
}

/// Country-label permutation test on the mean pairwise JSD between country
/// means. Group sizes are preserved by shuffling the label vector.
///
/// With `n_boot > 0` a percentile interval for the observed statistic is
/// added, resampling songs within each country.
pub fn between_country_null(
    songs: &[SongDistribution],
    n_perm: usize,
    seed: u64,
    n_boot: usize,
) -> Result<PermResult> {
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::InvalidArgument(format!(
            "n_perm must be at least {MIN_PERMUTATIONS}, got {n_perm}"
        )));
    }
    let groups = Groups::new(songs)?;
    let all: Vec<usize> = (0..songs.len()).collect();
    let observed_pairs = groups.pair_jsds(&groups.labels, &all);
    let observed = mean(&observed_pairs);

    let perm_seed = stream_seed(seed, "permutation");
    let null_pairs: Vec<Vec<f64>> = (0..n_perm)
        .into_par_iter()
        .map(|i| {
            let mut labels = groups.labels.clone();
            SplitMix64::for_index(perm_seed, i as u64).shuffle(&mut labels);
            groups.pair_jsds(&labels, &all)
        })
        .collect();
    let null: Vec<f64> = null_pairs.iter().map(|p| mean(p)).collect();
    let null_mean = mean(&null);
    let null_sd = sample_sd(&null);
    let diff = observed - null_mean;
    let z = if null_sd > 0.0 {
        diff / null_sd
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    let exceed = null.iter().filter(|&&v| v >= observed - TIE_TOL).count();
    let pooled_null: Vec<f64> = null_pairs.into_iter().flatten().collect();
    let cohens_d = cohens_d(&observed_pairs, &pooled_null);

    let (ci_low, ci_high) = if n_boot > 0 {
        let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); groups.n_groups];
        for (song, &g) in groups.labels.iter().enumerate() {
            by_group[g].push(song);
        }
        let boot_seed = stream_seed(seed, "bootstrap");
        let stats: Vec<f64> = (0..n_boot)
            .into_par_iter()
            .map(|b| {
                let mut rng = SplitMix64::for_index(boot_seed, b as u64);
                let mut members = Vec::with_capacity(songs.len());
                let mut labels = Vec::with_capacity(songs.len());
                for (g, idx) in by_group.iter().enumerate() {
                    for _ in 0..idx.len() {
                        members.push(idx[rng.below(idx.len() as u64) as usize]);
                        labels.push(g);
                    }
                }
                mean(&groups.pair_jsds(&labels, &members))
            })
            .collect();
        let (lo, hi) = percentile_ci(stats, observed);
        (Some(lo), Some(hi))
    } else {
        (None, None)
    };

    Ok(PermResult {
        observed,
        null_mean,
        null_sd,
        z,
        cohens_d,
        p: add_one_p(exceed, n_perm),
        n_perm,
        seed,
        n_groups: groups.n_groups,
        ci_low,
        ci_high,
    })
}

/// Same-region against different-region country pairs of a divergence
/// matrix. `regions[i]` is the region of `matrix.labels[i]`.
pub fn region_contrast(
    matrix: &super::PairMatrix,
    regions: &[String],
    n_perm: usize,
    seed: u64,
) -> Result<RegionContrast> {
    if regions.len() != matrix.len() {
        return Err(Error::InvalidArgument(format!(
            "{} regions for {} countries",
            regions.len(),
            matrix.len()
        )));
    }
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::InvalidArgument(format!(
            "n_perm must be at least {MIN_PERMUTATIONS}, got {n_perm}"
        )));
    }
    let pairs = matrix.upper();
    let values: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let same: Vec<bool> = pairs.iter().map(|(i, j, _)| regions[*i] == regions[*j]).collect();
    let split = |flags: &[bool]| -> (Vec<f64>, Vec<f64>) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (v, &f) in values.iter().zip(flags) {
            if f {
                a.push(*v);
            } else {
                b.push(*v);
            }
        }
        (a, b)
    };
    let (a, b) = split(&same);
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData(format!(
            "region contrast needs both pair types, got {} same-region and {} different-region",
            a.len(),
            b.len()
        )));
    }
    let d = cohens_d(&a, &b);
    let perm_seed = stream_seed(seed, "region");
    let exceed = (0..n_perm)
        .into_par_iter()
        .filter(|&i| {
            let mut flags = same.clone();
            SplitMix64::for_index(perm_seed, i as u64).shuffle(&mut flags);
            let (pa, pb) = split(&flags);
            cohens_d(&pa, &pb).abs() >= d.abs() - TIE_TOL
        })
        .count();
    Ok(RegionContrast {
        cohens_d: d,
        p: add_one_p(exceed, n_perm),
        mean_same: mean(&a),
        mean_diff: mean(&b),
        n_same: a.len(),
        n_diff: b.len(),
        n_perm,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Kind;
    use crate::stats::{Distribution, PairMatrix};

    fn song(id: usize, country: &str, probs: Vec<f64>) -> SongDistribution {
        SongDistribution {
            song_id: format!("{country}{id}"),
            country: country.into(),
            region: "R".into(),
            dist: Distribution::new(Kind::Rhythm, probs).unwrap(),
        }
    }

    /// A bump of random width near `centre`.
    fn bump(rng: &mut SplitMix64, centre: usize) -> Vec<f64> {
        let mut v = vec![0.0; 1001];
        let c = centre + rng.below(20) as usize;
        for k in 0..10 {
            v[c + k] = 1.0 + rng.next_f64();
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    fn corpus(seed: u64, centre_b: usize) -> Vec<SongDistribution> {
        let mut rng = SplitMix64::new(seed);
        let mut out = Vec::new();
        for i in 0..40 {
            out.push(song(i, "A", bump(&mut rng, 300)));
            out.push(song(i, "B", bump(&mut rng, centre_b)));
        }
        out
    }

    #[test]
    fn identical_songs_give_flat_null() {
        let mut v = vec![0.0; 1001];
        v[500] = 1.0;
        let songs: Vec<_> = (0..30)
            .map(|i| song(i, if i % 3 == 0 { "A" } else { "B" }, v.clone()))
            .collect();
        let r = between_country_null(&songs, 200, 1, 0).unwrap();
        assert_eq!(r.observed, 0.0);
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.cohens_d, 0.0);
    }

    #[test]
    fn shared_generator_is_not_significant() {
        let r = between_country_null(&corpus(3, 300), 300, 9, 0).unwrap();
        assert!(r.p > 0.05, "{r:?}");
        assert!(r.z.abs() < 3.0);
    }

    #[test]
    fn disjoint_generators_hit_the_floor() {
        let r = between_country_null(&corpus(3, 700), 300, 9, 200).unwrap();
        assert_eq!(r.p, 1.0 / 301.0);
        assert!(r.z > 10.0 && r.cohens_d > 1.0);
        assert!(r.ci_low.unwrap() <= r.observed && r.observed <= r.ci_high.unwrap());
    }

    #[test]
    fn deterministic_given_seed() {
        let songs = corpus(4, 320);
        let a = between_country_null(&songs, 150, 11, 50).unwrap();
        let b = between_country_null(&songs, 150, 11, 50).unwrap();
        assert_eq!(a, b);
        let c = between_country_null(&songs, 150, 12, 50).unwrap();
        assert_ne!(a.null_mean, c.null_mean);
    }

    #[test]
    fn parallel_matches_single_thread() {
        let songs = corpus(6, 330);
        let a = between_country_null(&songs, 120, 2, 30).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| between_country_null(&songs, 120, 2, 30).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_small_n_perm_and_single_country() {
        let songs = corpus(1, 300);
        assert!(between_country_null(&songs, 99, 0, 0).is_err());
        let one: Vec<_> = songs.into_iter().filter(|s| s.country == "A").collect();
        assert!(between_country_null(&one, 100, 0, 0).is_err());
    }

    fn block_matrix(n: usize, same: f64, diff: f64, jitter: f64, seed: u64) -> (PairMatrix, Vec<String>) {
        let labels: Vec<String> = (0..n).map(|i| format!("C{i:02}")).collect();
        let regions: Vec<String> = (0..n).map(|i| format!("R{}", i % 4)).collect();
        let mut rng = SplitMix64::new(seed);
        let mut m = PairMatrix::zeros(labels);
        for i in 0..n {
            for j in i + 1..n {
                let base = if regions[i] == regions[j] { same } else { diff };
                m.set(i, j, base + jitter * rng.next_f64());
            }
        }
        (m, regions)
    }

    #[test]
    fn region_contrast_on_block_matrix() {
        let (m, regions) = block_matrix(24, 0.1, 0.3, 0.05, 1);
        let r = region_contrast(&m, &regions, 10_000, 3).unwrap();
        assert!(r.cohens_d < 0.0);
        assert!(r.p <= 0.001);
        assert_eq!(r.n_same + r.n_diff, 24 * 23 / 2);
    }

    #[test]
    fn region_contrast_flat_matrix() {
        let (m, regions) = block_matrix(12, 0.2, 0.2, 0.0, 1);
        let r = region_contrast(&m, &regions, 200, 3).unwrap();
        assert_eq!(r.cohens_d, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn region_contrast_needs_both_pair_types() {
        let (m, _) = block_matrix(5, 0.1, 0.2, 0.0, 1);
        let regions: Vec<String> = (0..5).map(|i| format!("R{i}")).collect();
        assert!(region_contrast(&m, &regions, 200, 0).is_err());
    }

    #[test]
    fn cohens_d_antisymmetry() {
        let a = [0.1, 0.2, 0.25, 0.3];
        let b = [0.5, 0.4, 0.45];
        assert_eq!(cohens_d(&a, &b), -cohens_d(&b, &a));
        assert!(cohens_d(&a, &b) < 0.0);
    }
}

//! Aggregation, divergence, null models, diversity and correlation analyses.

mod correlation;
mod divergence;
mod diversity;
mod permutation;

pub use correlation::{
    bh_adjust, corr, mantel_spearman, partial_region, pearson, spearman, CorrMethod,
    CorrOptions, CorrResult,
};
pub use divergence::{country_pairwise_jsd, group_means, jsd, jsd_probs, CountryProfile, PairMatrix};
pub use diversity::{diversity, DiversityIndex};
pub use permutation::{between_country_null, region_contrast, PermResult, RegionContrast, MIN_PERMUTATIONS};

use serde::{Deserialize, Serialize};

use crate::density::{Density, Kind};
use crate::error::{Error, Result};

/// Tolerance on `sum(probs) = 1`.
pub const NORM_TOL: f64 = 1e-9;

/// A probability vector on a kind's fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub kind: Kind,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn new(kind: Kind, probs: Vec<f64>) -> Result<Self> {
        let n = kind.grid().n;
        if probs.len() != n {
            return Err(Error::GridMismatch(format!(
                "{kind} distribution needs {n} values, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidValue(format!("{kind} distribution has a negative or non-finite value")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidValue(format!("{kind} distribution sums to {total}")));
        }
        Ok(Self { kind, probs })
    }

    pub fn from_density(density: &Density) -> Self {
        Self {
            kind: density.kind,
            probs: density.probabilities(),
        }
    }

    pub fn to_density(&self) -> Density {
        Density::from_probabilities(self.kind, self.probs.clone())
    }
}

/// One song's distribution with its grouping labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SongDistribution {
    pub song_id: String,
    pub country: String,
    pub region: String,
    pub dist: Distribution,
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
pub(crate) fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub(crate) fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

/// Percentile 95% interval of finite values, widened to contain `estimate`.
pub(crate) fn percentile_ci(mut values: Vec<f64>, estimate: f64) -> (f64, f64) {
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return (estimate, estimate);
    }
    values.sort_unstable_by(f64::total_cmp);
    let lo = quantile_sorted(&values, 0.025);
    let hi = quantile_sorted(&values, 0.975);
    (lo.min(estimate), hi.max(estimate))
}

/// Add-one permutation p-value.
pub(crate) fn add_one_p(exceed: usize, n_perm: usize) -> f64 {
    (1 + exceed) as f64 / (n_perm + 1) as f64
}

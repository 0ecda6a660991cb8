//! Inter-onset ratios and the per-song rhythmic density.

use serde::{Deserialize, Serialize};

use crate::density::{gaussian_kde, Density, Kind};
use crate::error::{Error, Result};
use crate::onsets::OnsetList;

/// KDE bandwidth on the ratio axis.
pub const RHYTHM_BANDWIDTH: f64 = 0.005;
/// Fewest ratios a song needs for a density.
pub const MIN_RATIO_SAMPLES: usize = 30;
/// Ratios are kept only strictly inside `(RATIO_LOW, RATIO_HIGH)`.
pub const RATIO_LOW: f64 = 0.15;
pub const RATIO_HIGH: f64 = 0.85;
/// Grid indices at or beyond these bounds carry no mass.
const LOW_INDEX: usize = 150;
const HIGH_INDEX: usize = 850;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub r: f64,
    /// First onset of the triplet, seconds.
    pub t1: f64,
}

/// `r = IOI1 / (IOI1 + IOI2)` over every consecutive onset triplet.
pub fn ratios(onsets: &OnsetList) -> Result<Vec<RatioSample>> {
    let t = &onsets.times;
    if t.len() < 3 {
        return Err(Error::InsufficientOnsets { got: t.len(), need: 3 });
    }
    Ok(t.windows(3)
        .filter_map(|w| {
            let ioi1 = w[1] - w[0];
            let ioi2 = w[2] - w[1];
            let r = ioi1 / (ioi1 + ioi2);
            (r > RATIO_LOW && r < RATIO_HIGH).then_some(RatioSample { r, t1: w[0] })
        })
        .collect())
}

pub fn rhythmic_density(samples: &[RatioSample]) -> Result<Density> {
    let values: Vec<f64> = samples.iter().map(|s| s.r).collect();
    density_from_ratios(&values)
}

/// KDE on the `[0, 1]` grid with the excluded margins zeroed, summing to one.
pub fn density_from_ratios(values: &[f64]) -> Result<Density> {
    if values.len() < MIN_RATIO_SAMPLES {
        return Err(Error::InsufficientRatios {
            got: values.len(),
            need: MIN_RATIO_SAMPLES,
        });
    }
    let mut kde = gaussian_kde(values, &Kind::Rhythm.grid(), RHYTHM_BANDWIDTH);
    let n = kde.len();
    kde[..=LOW_INDEX].iter_mut().for_each(|v| *v = 0.0);
    kde[HIGH_INDEX.min(n)..].iter_mut().for_each(|v| *v = 0.0);
    Density::normalized(Kind::Rhythm, kde).map_err(|_| Error::InsufficientRatios {
        got: 0,
        need: MIN_RATIO_SAMPLES,
    })
}

//! Multi-timescale melodic intervals and the per-song melodic density.

use serde::{Deserialize, Serialize};

use crate::density::{gaussian_kde, Density, Kind};
use crate::error::{Error, Result};
use crate::pitch::PitchTrack;

/// KDE bandwidth in semitones.
pub const MELODY_BANDWIDTH: f64 = 0.10;
/// Fewest pooled intervals a song needs for a density.
pub const MIN_INTERVAL_SAMPLES: usize = 100;
/// Lags are `(LAG_MIN_CS + k * LAG_STEP_CS) / 100` seconds.
const LAG_MIN_CS: usize = 10;
const LAG_MAX_CS: usize = 200;
const LAG_STEP_CS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSample {
    /// Time of the later endpoint, seconds.
    pub t: f64,
    pub lag: f64,
    /// Signed semitones, later minus earlier.
    pub interval: f64,
}

/// MIDI pitch `12 log2(f / 440) + 69`.
pub fn midi(f_hz: f64) -> Result<f64> {
    if !(f_hz > 0.0) || !f_hz.is_finite() {
        return Err(Error::NonPositiveFrequency(f_hz));
    }
    Ok(12.0 * (f_hz / 440.0).log2() + 69.0)
}

/// The 191 lags 0.10, 0.11, ..., 2.00 s.
pub fn lags() -> Vec<f64> {
    (LAG_MIN_CS..=LAG_MAX_CS)
        .step_by(LAG_STEP_CS)
        .map(|cs| cs as f64 / 100.0)
        .collect()
}

/// Lagged intervals `m(t) - m(t - lag)` over every lag and every frame
/// where both endpoints are voiced. The earlier endpoint is the frame
/// nearest to `t - lag` (always within half a frame on a regular track);
/// frames in between are not inspected.
pub fn intervals(track: &PitchTrack) -> Vec<IntervalSample> {
    let n = track.len();
    if n == 0 || track.frame_period <= 0.0 {
        return Vec::new();
    }
    let dt = track.frame_period;
    let pitches: Vec<Option<f64>> = track
        .f0_hz
        .iter()
        .map(|f| f.and_then(|f| midi(f).ok()))
        .collect();

    let mut out = Vec::new();
    for lag in lags() {
        let offset = (lag / dt).round() as usize;
        if offset == 0 || offset >= n {
            continue;
        }
        for i in offset..n {
            if let (Some(now), Some(before)) = (pitches[i], pitches[i - offset]) {
                out.push(IntervalSample {
                    t: track.times[i],
                    lag,
                    interval: now - before,
                });
            }
        }
    }
    out
}

/// Gaussian KDE (bandwidth 0.10 st) of the pooled intervals on the
/// ±24 st grid, renormalized to unit integral after truncation.
pub fn melodic_density(samples: &[IntervalSample]) -> Result<Density> {
    if samples.len() < MIN_INTERVAL_SAMPLES {
        return Err(Error::InsufficientVoiced {
            got: samples.len(),
            need: MIN_INTERVAL_SAMPLES,
        });
    }
    let values: Vec<f64> = samples.iter().map(|s| s.interval).collect();
    density_from_intervals(&values)
}

/// [`melodic_density`] over bare interval values.
pub fn density_from_intervals(values: &[f64]) -> Result<Density> {
    if values.len() < MIN_INTERVAL_SAMPLES {
        return Err(Error::InsufficientVoiced {
            got: values.len(),
            need: MIN_INTERVAL_SAMPLES,
        });
    }
    let kde = gaussian_kde(values, &Kind::Melody.grid(), MELODY_BANDWIDTH);
    Density::normalized(Kind::Melody, kde).map_err(|_| Error::InsufficientVoiced {
        got: 0,
        need: MIN_INTERVAL_SAMPLES,
    })
}

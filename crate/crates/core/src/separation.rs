//! Vocal-like / percussive stem separation.
//!
//! The built-in route is median-filter harmonic-percussive separation on
//! the magnitude STFT with soft (Wiener-like) masks. Externally separated
//! stems laid out as `<stems_dir>/<song_id>/{vocals,drums}.wav` can be
//! used instead.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, Spectrogram};
use crate::error::{Error, Result};

/// Largest tolerated length difference between external stems, seconds.
pub const STEM_DURATION_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationMethod {
    Hpss,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemPair {
    pub vocal_like: AudioClip,
    pub percussive: AudioClip,
    pub method: SeparationMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpssConfig {
    /// Median length along time, in frames.
    pub harmonic_kernel: usize,
    /// Median length along frequency, in bins.
    pub percussive_kernel: usize,
    pub mask_power: f64,
}

impl Default for HpssConfig {
    fn default() -> Self {
        Self {
            harmonic_kernel: 31,
            percussive_kernel: 31,
            mask_power: 2.0,
        }
    }
}

/// Soft masks, frames × bins, row-major like [`Spectrogram::mags`].
#[derive(Debug, Clone)]
pub struct HpssMasks {
    pub harmonic: Vec<f64>,
    pub percussive: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
}

fn median(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (_, &mut upper, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = buf[..mid].iter().cloned().fold(f64::MIN, f64::max);
        0.5 * (lower + upper)
    }
}

/// Centred running median; the window is truncated at the ends.
fn running_median(x: &[f64], kernel: usize, out: &mut [f64], scratch: &mut Vec<f64>) {
    let half = kernel / 2;
    let n = x.len();
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        scratch.clear();
        scratch.extend_from_slice(&x[lo..hi]);
        out[i] = median(scratch);
    }
}

pub fn hpss_masks(spec: &Spectrogram, config: &HpssConfig) -> Result<HpssMasks> {
    let (n_frames, n_bins) = (spec.n_frames, spec.n_bins);
    if config.harmonic_kernel > n_frames {
        return Err(Error::KernelTooLarge {
            kernel: config.harmonic_kernel,
            extent: n_frames,
        });
    }
    if config.percussive_kernel > n_bins {
        return Err(Error::KernelTooLarge {
            kernel: config.percussive_kernel,
            extent: n_bins,
        });
    }
    if config.harmonic_kernel == 0 || config.percussive_kernel == 0 {
        return Err(Error::InvalidArgument("median kernel of length 0".into()));
    }

    let mut scratch = Vec::with_capacity(config.harmonic_kernel.max(config.percussive_kernel));

    // Harmonic enhancement: median across time within each bin.
    let mut harmonic = vec![0.0; n_frames * n_bins];
    let mut column = vec![0.0; n_frames];
    let mut filtered = vec![0.0; n_frames];
    for k in 0..n_bins {
        for (f, c) in column.iter_mut().enumerate() {
            *c = spec.get(f, k);
        }
        running_median(&column, config.harmonic_kernel, &mut filtered, &mut scratch);
        for (f, &v) in filtered.iter().enumerate() {
            harmonic[f * n_bins + k] = v;
        }
    }

    // Percussive enhancement: median across frequency within each frame.
    let mut percussive = vec![0.0; n_frames * n_bins];
    for f in 0..n_frames {
        running_median(
            spec.frame(f),
            config.percussive_kernel,
            &mut percussive[f * n_bins..(f + 1) * n_bins],
            &mut scratch,
        );
    }

    for (h, p) in harmonic.iter_mut().zip(percussive.iter_mut()) {
        let hp = h.powf(config.mask_power);
        let pp = p.powf(config.mask_power);
        let total = hp + pp;
        if total > 0.0 {
            *h = hp / total;
            *p = pp / total;
        } else {
            *h = 0.5;
            *p = 0.5;
        }
    }
    Ok(HpssMasks {
        harmonic,
        percussive,
        n_frames,
        n_bins,
    })
}

/// Splits `clip` into harmonic (vocal-like) and percussive stems. `spec`
/// must be the magnitude STFT of `clip`; resynthesis reuses the phase of
/// the complex STFT computed with the same geometry.
pub fn hpss(spec: &Spectrogram, clip: &AudioClip, config: &HpssConfig) -> Result<StemPair> {
    let complex = audio::stft_complex(clip, spec.window_size, spec.frame_hop)?;
    if complex.n_frames != spec.n_frames || complex.n_bins != spec.n_bins {
        return Err(Error::InvalidArgument(format!(
            "spectrogram {}x{} does not match clip ({}x{})",
            spec.n_frames, spec.n_bins, complex.n_frames, complex.n_bins
        )));
    }
    let masks = hpss_masks(spec, config)?;

    let mut harmonic = complex.clone();
    for (c, m) in harmonic.bins.iter_mut().zip(&masks.harmonic) {
        *c *= *m;
    }
    let mut percussive = complex;
    for (c, m) in percussive.bins.iter_mut().zip(&masks.percussive) {
        *c *= *m;
    }
    let mut vocal_like = harmonic.inverse();
    let mut drums = percussive.inverse();
    vocal_like.origin_offset = clip.origin_offset;
    drums.origin_offset = clip.origin_offset;
    Ok(StemPair {
        vocal_like,
        percussive: drums,
        method: SeparationMethod::Hpss,
    })
}

/// Loads `<stems_dir>/<song_id>/vocals.wav` and `drums.wav` through
/// [`audio::decode`], trimming both to the shorter length.
pub fn load_external_stems(song_id: &str, stems_dir: impl AsRef<Path>) -> Result<StemPair> {
    let dir = stems_dir.as_ref().join(song_id);
    let vocals_path = dir.join("vocals.wav");
    let drums_path = dir.join("drums.wav");
    for p in [&vocals_path, &drums_path] {
        if !p.is_file() {
            return Err(Error::MissingStem(p.clone()));
        }
    }
    let mut vocal_like = audio::decode(&vocals_path)?;
    let mut percussive = audio::decode(&drums_path)?;
    let (dv, dd) = (vocal_like.duration(), percussive.duration());
    if (dv - dd).abs() > STEM_DURATION_TOLERANCE {
        return Err(Error::StemDurationMismatch {
            vocals: dv,
            drums: dd,
        });
    }
    let len = vocal_like.samples.len().min(percussive.samples.len());
    vocal_like.samples.truncate(len);
    percussive.samples.truncate(len);
    Ok(StemPair {
        vocal_like,
        percussive,
        method: SeparationMethod::External,
    })
}

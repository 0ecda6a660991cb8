//! Percussive onset detection: log-spectral flux novelty and peak picking.

use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, Spectrogram};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetConfig {
    /// Floor applied to magnitudes before taking logs.
    pub log_floor: f64,
    /// Length of the centred running median subtracted from the flux.
    pub median_seconds: f64,
    /// A peak must be the maximum over `[i - pre_max, i + post_max]`.
    pub pre_max: usize,
    pub post_max: usize,
    /// ... and exceed the mean over `[i - pre_avg, i + post_avg]` by delta.
    pub pre_avg: usize,
    pub post_avg: usize,
    /// delta = `delta_fraction * max(novelty)`.
    pub delta_fraction: f64,
    /// Minimum frames between consecutive onsets.
    pub wait: usize,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        Self {
            log_floor: 1e-10,
            median_seconds: 0.5,
            pre_max: 3,
            post_max: 3,
            pre_avg: 8,
            post_avg: 1,
            delta_fraction: 0.07,
            wait: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OnsetList {
    /// Strictly increasing, seconds.
    pub times: Vec<f64>,
}

impl OnsetList {
    pub fn new(times: Vec<f64>) -> Self {
        Self { times }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `onset_time`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("onset_time\n");
        for t in &self.times {
            out.push_str(&format!("{t}\n"));
        }
        out
    }
}

fn running_median(x: &[f64], half: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(2 * half + 1);
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            buf.clear();
            buf.extend_from_slice(&x[lo..hi]);
            buf.sort_unstable_by(f64::total_cmp);
            let m = buf.len() / 2;
            if buf.len() % 2 == 1 {
                buf[m]
            } else {
                0.5 * (buf[m - 1] + buf[m])
            }
        })
        .collect()
}

/// Spectral novelty with the default configuration.
pub fn novelty(spec: &Spectrogram) -> Vec<f64> {
    novelty_with(spec, &OnsetConfig::default())
}

/// Half-wave-rectified frame-to-frame increase of log magnitude summed over
/// bins, minus its centred running median, clipped at zero.
pub fn novelty_with(spec: &Spectrogram, config: &OnsetConfig) -> Vec<f64> {
    let n = spec.n_frames;
    if n == 0 {
        return Vec::new();
    }
    let log_frame = |f: usize| -> Vec<f64> {
        spec.frame(f)
            .iter()
            .map(|m| m.max(config.log_floor).ln())
            .collect()
    };
    let mut flux = vec![0.0; n];
    let mut prev = log_frame(0);
    for (f, out) in flux.iter_mut().enumerate().skip(1) {
        let cur = log_frame(f);
        *out = cur
            .iter()
            .zip(&prev)
            .map(|(c, p)| (c - p).max(0.0))
            .sum();
        prev = cur;
    }
    let frame_period = spec.frame_hop as f64 / f64::from(spec.sample_rate);
    let half = ((config.median_seconds / frame_period).round() as usize) / 2;
    let baseline = running_median(&flux, half);
    flux.iter()
        .zip(&baseline)
        .map(|(f, b)| (f - b).max(0.0))
        .collect()
}

/// Peak picking: frame `i` is an onset when it is the maximum of its
/// neighbourhood, exceeds the local mean by `delta_fraction * max`, and at
/// least `wait` frames have passed since the previous onset.
///
/// The reported time is the frame time shifted by the novelty centroid over
/// `i-1..=i+1`, which stays within half a frame of frame `i`.
pub fn pick_onsets(nov: &[f64], frame_period: f64, config: &OnsetConfig) -> OnsetList {
    let n = nov.len();
    let max = nov.iter().cloned().fold(0.0, f64::max);
    if n == 0 || max <= 0.0 {
        return OnsetList::default();
    }
    let delta = config.delta_fraction * max;
    let mut times = Vec::new();
    let mut last: Option<usize> = None;
    for i in 0..n {
        if nov[i] <= 0.0 {
            continue;
        }
        let lo = i.saturating_sub(config.pre_max);
        let hi = (i + config.post_max + 1).min(n);
        if nov[lo..hi].iter().any(|&v| v > nov[i]) {
            continue;
        }
        let lo = i.saturating_sub(config.pre_avg);
        let hi = (i + config.post_avg + 1).min(n);
        let mean = nov[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        if nov[i] < mean + delta {
            continue;
        }
        if last.is_some_and(|l| i - l < config.wait) {
            continue;
        }
        last = Some(i);
        let before = if i > 0 { nov[i - 1] } else { 0.0 };
        let after = if i + 1 < n { nov[i + 1] } else { 0.0 };
        let offset = (after - before) / (before + nov[i] + after);
        times.push((i as f64 + offset) * frame_period);
    }
    OnsetList { times }
}

/// STFT, novelty and peak picking in one step.
pub fn detect_onsets(clip: &AudioClip, config: &OnsetConfig) -> Result<OnsetList> {
    let spec = audio::stft(clip, audio::WINDOW_SIZE, audio::HOP)?;
    let nov = novelty_with(&spec, config);
    let frame_period = spec.frame_hop as f64 / f64::from(spec.sample_rate);
    Ok(pick_onsets(&nov, frame_period, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{stft, HOP, WINDOW_SIZE};
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    const SR: usize = 22050;

    fn click_train(seconds: f64, positions: &[usize], seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        // Low dither keeps every bin above the log floor, as in a recorded stem.
        let mut x: Vec<f64> = (0..(seconds * SR as f64) as usize)
            .map(|_| 1e-4 * rng.next_gaussian())
            .collect();
        let len = (0.005 * SR as f64) as usize;
        for &p in positions {
            for j in 0..len {
                if p + j < x.len() {
                    let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / len as f64).cos();
                    x[p + j] += w * (2.0 * rng.next_f64() - 1.0);
                }
            }
        }
        x
    }

    fn onsets_of(x: Vec<f64>) -> OnsetList {
        detect_onsets(&AudioClip::new(x, SR as u32), &OnsetConfig::default()).unwrap()
    }

    #[test]
    fn silence_has_no_novelty_and_no_onsets() {
        let spec = stft(&AudioClip::new(vec![0.0; SR * 2], SR as u32), WINDOW_SIZE, HOP).unwrap();
        assert!(novelty(&spec).iter().all(|&v| v == 0.0));
        assert!(onsets_of(vec![0.0; SR * 2]).is_empty());
    }

    #[test]
    fn single_click_has_one_dominant_frame() {
        let pos = 30_000;
        let x = click_train(3.0, &[pos], 1);
        let spec = stft(&AudioClip::new(x, SR as u32), WINDOW_SIZE, HOP).unwrap();
        let nov = novelty(&spec);
        let argmax = (0..nov.len()).max_by(|&a, &b| nov[a].total_cmp(&nov[b])).unwrap();
        // Log compression reacts as soon as the click enters the window tail.
        let click_frame = (pos as f64 / HOP as f64).round() as i64;
        assert!((argmax as i64 - click_frame).abs() <= 2, "{argmax} vs {click_frame}");
        // The click spreads over neighbouring frames but nowhere else.
        for (i, v) in nov.iter().enumerate() {
            if (i as i64 - argmax as i64).abs() > 1 {
                assert!(*v < 0.1 * nov[argmax], "frame {i}: {v}");
            }
        }
    }

    #[test]
    fn steady_sine_has_no_novelty_after_attack() {
        let start = SR;
        let x: Vec<f64> = (0..SR * 3)
            .map(|i| {
                if i < start {
                    0.0
                } else {
                    0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / SR as f64).sin()
                }
            })
            .collect();
        let spec = stft(&AudioClip::new(x, SR as u32), WINDOW_SIZE, HOP).unwrap();
        let nov = novelty(&spec);
        let peak = nov.iter().cloned().fold(0.0, f64::max);
        let attack = (0..nov.len()).find(|&i| nov[i] == peak).unwrap();
        assert!(attack * HOP + WINDOW_SIZE / 2 >= start && attack * HOP <= start + WINDOW_SIZE / 2);
        for (i, v) in nov.iter().enumerate().take(nov.len() - 4).skip(attack + 3) {
            assert!(*v < 0.1 * peak, "frame {i}: {v} vs {peak}");
        }
        let picked = pick_onsets(&nov, HOP as f64 / SR as f64, &OnsetConfig::default());
        let interior: Vec<f64> = picked.times.into_iter().filter(|t| *t < 2.9).collect();
        assert_eq!(interior.len(), 1, "{interior:?}");
    }

    #[test]
    fn click_train_at_120_bpm() {
        let positions: Vec<usize> = (0..20).map(|k| 2000 + k * SR / 2).collect();
        let onsets = onsets_of(click_train(10.0, &positions, 3));
        assert!((19..=21).contains(&onsets.len()), "{}", onsets.len());
        for w in onsets.times.windows(2) {
            assert!((w[1] - w[0] - 0.5).abs() <= 0.012, "spacing {}", w[1] - w[0]);
        }
    }

    #[test]
    fn close_clicks_merge() {
        let onsets = onsets_of(click_train(2.0, &[20_000, 20_000 + SR / 50], 4));
        assert_eq!(onsets.len(), 1);
    }

    #[test]
    fn wait_suppresses_adjacent_peaks() {
        let mut nov = vec![0.0; 40];
        nov[10] = 5.0;
        nov[11] = 5.0;
        let o = pick_onsets(&nov, 0.01, &OnsetConfig::default());
        assert_eq!(o.len(), 1);
        assert!((o.times[0] - 0.105).abs() < 1e-12);
    }

    #[test]
    fn csv_dump() {
        assert_eq!(OnsetList::new(vec![0.5, 1.0]).to_csv(), "onset_time\n0.5\n1\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn onset_count_is_monotone_in_delta(nov in prop::collection::vec(0.0f64..1.0, 5..120), a in 0.0f64..0.5, b in 0.0f64..0.5) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let base = OnsetConfig::default();
            let n_lo = pick_onsets(&nov, 0.01, &OnsetConfig { delta_fraction: lo, ..base.clone() }).len();
            let n_hi = pick_onsets(&nov, 0.01, &OnsetConfig { delta_fraction: hi, ..base }).len();
            prop_assert!(n_hi <= n_lo);
        }

        #[test]
        fn picked_times_increase(nov in prop::collection::vec(0.0f64..1.0, 5..120)) {
            let o = pick_onsets(&nov, 0.02, &OnsetConfig::default());
            for w in o.times.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn amplitude_scaling_keeps_onsets() {
        let positions: Vec<usize> = (0..12).map(|k| 3000 + k * 9000 + (k * k * 37) % 500).collect();
        let x = click_train(6.0, &positions, 8);
        let a = onsets_of(x.clone());
        for c in [0.1, 3.0] {
            let b = onsets_of(x.iter().map(|v| v * c).collect());
            assert_eq!(a.len(), b.len(), "scale {c}");
            for (s, t) in a.times.iter().zip(&b.times) {
                assert!((s - t).abs() < 1e-9, "scale {c}: {s} vs {t}");
            }
        }
    }

    #[test]
    fn shift_by_whole_hops() {
        let positions: Vec<usize> = (0..8).map(|k| 6000 + k * 7000).collect();
        let x = click_train(4.0, &positions, 2);
        let k = 3;
        let mut shifted = vec![0.0; k * HOP];
        shifted.extend_from_slice(&x);
        shifted.truncate(x.len());
        let a = onsets_of(x);
        let b = onsets_of(shifted);
        let dt = HOP as f64 / SR as f64;
        let inner: Vec<f64> = a.times.iter().filter(|t| **t > 0.3 && **t < 3.5).copied().collect();
        for t in inner {
            assert!(b.times.iter().any(|u| (u - t - k as f64 * dt).abs() < 1e-9), "{t}");
        }
    }
}

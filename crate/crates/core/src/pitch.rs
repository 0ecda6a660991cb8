//! Probabilistic YIN (pYIN) fundamental-frequency tracking.
//!
//! Per frame the cumulative-mean-normalized difference function is scanned
//! for troughs; each of 100 thresholds (weighted by a Beta(2, 18) prior)
//! distributes probability over the troughs below it with a Boltzmann
//! preference for shorter periods. The resulting per-frame pitch
//! observations feed a two-layer (voiced / unvoiced) HMM decoded by Viterbi.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub fmin: f64,
    pub fmax: f64,
    pub frame_length: usize,
    pub hop: usize,
    /// Integration window of the difference function.
    pub win_length: usize,
    pub bins_per_semitone: usize,
    pub n_thresholds: usize,
    /// Integer shape parameters of the threshold prior.
    pub beta_shape: (u32, u32),
    pub boltzmann_parameter: f64,
    pub no_trough_prob: f64,
    /// Half-width of the triangular pitch-transition kernel, in semitones.
    pub max_semitones_per_frame: f64,
    pub switch_prob: f64,
    /// Frames whose voicing probability falls below this are unvoiced.
    pub voicing_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin: 65.0,
            fmax: 2093.0,
            frame_length: 2048,
            hop: 512,
            win_length: 1024,
            bins_per_semitone: 10,
            n_thresholds: 100,
            beta_shape: (2, 18),
            boltzmann_parameter: 2.0,
            no_trough_prob: 0.01,
            max_semitones_per_frame: 1.0,
            switch_prob: 0.01,
            voicing_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    pub times: Vec<f64>,
    /// `None` marks an unvoiced frame.
    pub f0_hz: Vec<Option<f64>>,
    pub voiced_prob: Vec<f64>,
    /// Frame step in seconds.
    pub frame_period: f64,
}

impl PitchTrack {
    /// Builds a track on the regular grid `t_i = i * frame_period`.
    pub fn from_frames(f0_hz: Vec<Option<f64>>, frame_period: f64) -> Self {
        let n = f0_hz.len();
        Self {
            times: (0..n).map(|i| i as f64 * frame_period).collect(),
            voiced_prob: f0_hz.iter().map(|f| if f.is_some() { 1.0 } else { 0.0 }).collect(),
            f0_hz,
            frame_period,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.f0_hz.iter().filter(|f| f.is_some()).count()
    }

    /// CSV with header `time,f0,voiced_prob`; unvoiced frames have an
    /// empty `f0` cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,f0,voiced_prob\n");
        for ((t, f), p) in self.times.iter().zip(&self.f0_hz).zip(&self.voiced_prob) {
            match f {
                Some(f) => out.push_str(&format!("{t},{f},{p}\n")),
                None => out.push_str(&format!("{t},,{p}\n")),
            }
        }
        out
    }
}

/// Regularized incomplete beta `I_x(a, b)` for integer shapes, via the
/// binomial tail identity `I_x(a, b) = P(Binomial(a + b - 1, x) >= a)`.
fn beta_cdf_int(x: f64, a: u32, b: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let n = a + b - 1;
    let mut coeff = 1.0f64;
    let mut total = 0.0;
    for j in 0..=n {
        if j > 0 {
            coeff *= f64::from(n - j + 1) / f64::from(j);
        }
        if j >= a {
            total += coeff * x.powi(j as i32) * (1.0 - x).powi((n - j) as i32);
        }
    }
    total.clamp(0.0, 1.0)
}

fn boltzmann_pmf(k: usize, lambda: f64, n: usize) -> f64 {
    (1.0 - (-lambda).exp()) * (-lambda * k as f64).exp() / (1.0 - (-lambda * n as f64).exp())
}

struct Trough {
    /// Refined period in samples.
    period: f64,
    height: f64,
    prob: f64,
}

/// Prepared per-run state: FFT plans and prior tables.
struct Tracker {
    config: PitchConfig,
    sample_rate: f64,
    min_period: usize,
    max_period: usize,
    thresholds: Vec<f64>,
    beta_probs: Vec<f64>,
    n_bins: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Tracker {
    fn new(config: &PitchConfig, sample_rate: u32) -> Result<Self> {
        let c = config;
        if !(c.fmin > 0.0 && c.fmax > c.fmin) {
            return Err(Error::InvalidArgument(format!(
                "pitch band [{}, {}] is empty",
                c.fmin, c.fmax
            )));
        }
        if c.win_length == 0 || c.win_length >= c.frame_length || c.hop == 0 {
            return Err(Error::InvalidArgument("bad pitch frame geometry".into()));
        }
        let sr = f64::from(sample_rate);
        let min_period = ((sr / c.fmax).floor() as usize).max(1);
        let max_period = ((sr / c.fmin).ceil() as usize).min(c.frame_length - c.win_length - 1);
        if max_period <= min_period + 1 {
            return Err(Error::InvalidArgument("pitch band too narrow for frame".into()));
        }
        let thresholds: Vec<f64> = (0..=c.n_thresholds)
            .map(|i| i as f64 / c.n_thresholds as f64)
            .collect();
        let (a, b) = c.beta_shape;
        let cdf: Vec<f64> = thresholds.iter().map(|&t| beta_cdf_int(t, a, b)).collect();
        let beta_probs = cdf.windows(2).map(|w| w[1] - w[0]).collect();
        let n_bins = (12.0 * c.bins_per_semitone as f64 * (c.fmax / c.fmin).log2()).floor()
            as usize
            + 1;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config: c.clone(),
            sample_rate: sr,
            min_period,
            max_period,
            thresholds,
            beta_probs,
            n_bins,
            forward: planner.plan_fft_forward(c.frame_length),
            inverse: planner.plan_fft_inverse(c.frame_length),
        })
    }

    fn bin_of(&self, f0: f64) -> usize {
        let b = (12.0 * self.config.bins_per_semitone as f64 * (f0 / self.config.fmin).log2())
            .round();
        b.clamp(0.0, (self.n_bins - 1) as f64) as usize
    }

    fn bin_freq(&self, bin: usize) -> f64 {
        self.config.fmin * 2f64.powf(bin as f64 / (12.0 * self.config.bins_per_semitone as f64))
    }

    /// Cumulative-mean-normalized difference for periods
    /// `min_period..=max_period`.
    fn cmndf(&self, frame: &[f64], a_buf: &mut [Complex64], b_buf: &mut [Complex64]) -> Vec<f64> {
        let w = self.config.win_length;
        let n = frame.len();
        for (i, c) in a_buf.iter_mut().enumerate() {
            *c = Complex64::new(if i < w { frame[i] } else { 0.0 }, 0.0);
        }
        for (c, &x) in b_buf.iter_mut().zip(frame) {
            *c = Complex64::new(x, 0.0);
        }
        self.forward.process(a_buf);
        self.forward.process(b_buf);
        for (a, b) in a_buf.iter_mut().zip(b_buf.iter()) {
            *a = a.conj() * b;
        }
        self.inverse.process(a_buf);

        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + frame[i] * frame[i];
        }
        let energy = |tau: usize| prefix[tau + w] - prefix[tau];
        let e0 = energy(0);
        let diff: Vec<f64> = (0..=self.max_period)
            .map(|tau| {
                let acf = a_buf[tau].re / n as f64;
                (e0 + energy(tau) - 2.0 * acf).max(0.0)
            })
            .collect();

        let mut running = 0.0;
        let mut out = Vec::with_capacity(self.max_period - self.min_period + 1);
        for (tau, &d) in diff.iter().enumerate().skip(1) {
            running += d;
            if tau >= self.min_period {
                let mean = running / tau as f64;
                out.push(if mean > 0.0 { d / mean } else { 1.0 });
            }
        }
        out
    }

    fn troughs(&self, yin: &[f64]) -> Vec<Trough> {
        let n = yin.len();
        let mut troughs: Vec<Trough> = (0..n - 1)
            .filter(|&i| {
                if i == 0 {
                    yin[0] < yin[1]
                } else {
                    yin[i] < yin[i - 1] && yin[i] <= yin[i + 1]
                }
            })
            .map(|i| {
                let mut shift = 0.0;
                if i > 0 {
                    let a = yin[i + 1] + yin[i - 1] - 2.0 * yin[i];
                    let b = 0.5 * (yin[i + 1] - yin[i - 1]);
                    if b.abs() < a.abs() {
                        shift = -b / a;
                    }
                }
                Trough {
                    period: (self.min_period + i) as f64 + shift,
                    height: yin[i],
                    prob: 0.0,
                }
            })
            .collect();
        if troughs.is_empty() {
            return troughs;
        }

        let lambda = self.config.boltzmann_parameter;
        for (thr, &weight) in self.thresholds[1..].iter().zip(&self.beta_probs) {
            let below = troughs.iter().filter(|t| t.height < *thr).count();
            if below == 0 {
                continue;
            }
            let mut pos = 0;
            for t in troughs.iter_mut().filter(|t| t.height < *thr) {
                t.prob += boltzmann_pmf(pos, lambda, below) * weight;
                pos += 1;
            }
        }
        let global_min = (0..troughs.len())
            .min_by(|&a, &b| troughs[a].height.total_cmp(&troughs[b].height))
            .expect("non-empty");
        let n_below_min = self.thresholds[1..]
            .iter()
            .filter(|&&t| troughs[global_min].height >= t)
            .count();
        let missed: f64 = self.beta_probs[..n_below_min].iter().sum();
        troughs[global_min].prob += self.config.no_trough_prob * missed;
        troughs
    }
}

/// Tracks f0 over `clip`. Frame `i` is stamped `i * hop / sample_rate`,
/// matching the STFT frame times.
pub fn track_pitch(clip: &AudioClip, config: &PitchConfig) -> Result<PitchTrack> {
    let tracker = Tracker::new(config, clip.sample_rate)?;
    let fl = config.frame_length;
    if clip.samples.len() < fl {
        return Err(Error::TooShort {
            len: clip.samples.len(),
            window: fl,
        });
    }
    let n_frames = 1 + clip.samples.len() / config.hop;
    let n_bins = tracker.n_bins;
    let last_start = clip.samples.len() - fl;

    let mut a_buf = vec![Complex64::new(0.0, 0.0); fl];
    let mut b_buf = vec![Complex64::new(0.0, 0.0); fl];
    let mut frame_troughs = Vec::with_capacity(n_frames);
    let mut voiced_prob = Vec::with_capacity(n_frames);
    let mut log_obs = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        // The integration window is centred on the frame time; frames near
        // the ends are analysed on the nearest in-bounds span.
        let start = (f * config.hop).saturating_sub(config.win_length / 2).min(last_start);
        let frame = &clip.samples[start..start + fl];
        let yin = tracker.cmndf(frame, &mut a_buf, &mut b_buf);
        let troughs = tracker.troughs(&yin);
        let vp = troughs.iter().map(|t| t.prob).sum::<f64>().clamp(0.0, 1.0);

        let mut obs = vec![0.0; 2 * n_bins];
        for t in troughs.iter().filter(|t| t.prob > 0.0) {
            obs[tracker.bin_of(tracker.sample_rate / t.period)] += t.prob;
        }
        let unvoiced = (1.0 - vp) / n_bins as f64;
        obs[n_bins..].iter_mut().for_each(|o| *o = unvoiced);
        log_obs.push(obs.iter().map(|&o| (o + f64::MIN_POSITIVE).ln()).collect::<Vec<_>>());

        voiced_prob.push(vp);
        frame_troughs.push(troughs);
    }

    let states = viterbi(&log_obs, n_bins, &tracker);

    let frame_period = config.hop as f64 / tracker.sample_rate;
    let f0_hz = states
        .iter()
        .zip(&frame_troughs)
        .zip(&voiced_prob)
        .map(|((&s, troughs), &vp)| {
            if s >= n_bins || vp < config.voicing_threshold {
                return None;
            }
            let refined = troughs
                .iter()
                .filter(|t| t.prob > 0.0)
                .map(|t| tracker.sample_rate / t.period)
                .filter(|&f| tracker.bin_of(f).abs_diff(s) <= 1)
                .min_by(|a, b| {
                    let da = (tracker.bin_of(*a) as f64 - s as f64).abs();
                    let db = (tracker.bin_of(*b) as f64 - s as f64).abs();
                    da.total_cmp(&db)
                });
            Some(
                refined
                    .unwrap_or_else(|| tracker.bin_freq(s))
                    .clamp(config.fmin, config.fmax),
            )
        })
        .collect();

    Ok(PitchTrack {
        times: (0..n_frames).map(|i| i as f64 * frame_period).collect(),
        f0_hz,
        voiced_prob,
        frame_period,
    })
}

/// Viterbi over `2 * n_bins` states (voiced bins, then unvoiced bins) with a
/// banded triangular pitch transition and a fixed voicing switch
/// probability. Returns the most likely state per frame.
fn viterbi(log_obs: &[Vec<f64>], n_bins: usize, tracker: &Tracker) -> Vec<usize> {
    let n_states = 2 * n_bins;
    let n_frames = log_obs.len();
    if n_frames == 0 {
        return Vec::new();
    }
    let c = &tracker.config;
    let half = (c.max_semitones_per_frame * c.bins_per_semitone as f64).round() as usize;
    let tri = |d: usize| (half + 1 - d) as f64;

    // log T[from][to] for |to - from| <= half, rows normalized after edge
    // truncation; stored as (from, offset + half).
    let width = 2 * half + 1;
    let mut log_t = vec![f64::NEG_INFINITY; n_bins * width];
    for from in 0..n_bins {
        let lo = from.saturating_sub(half);
        let hi = (from + half).min(n_bins - 1);
        let total: f64 = (lo..=hi).map(|to| tri(to.abs_diff(from))).sum();
        for to in lo..=hi {
            log_t[from * width + (to + half - from)] = (tri(to.abs_diff(from)) / total).ln();
        }
    }
    let stay = (1.0 - c.switch_prob).ln();
    let switch = c.switch_prob.ln();

    let mut delta: Vec<f64> = log_obs[0]
        .iter()
        .map(|o| o - (n_states as f64).ln())
        .collect();
    let mut next = vec![0.0; n_states];
    let mut back = vec![0u32; n_frames * n_states];
    for (t, obs) in log_obs.iter().enumerate().skip(1) {
        let back_row = &mut back[t * n_states..(t + 1) * n_states];
        for to_layer in 0..2 {
            for to in 0..n_bins {
                let lo = to.saturating_sub(half);
                let hi = (to + half).min(n_bins - 1);
                let mut best = f64::NEG_INFINITY;
                let mut arg = to_layer * n_bins + to;
                for from_layer in 0..2 {
                    let layer_cost = if from_layer == to_layer { stay } else { switch };
                    for from in lo..=hi {
                        let s = from_layer * n_bins + from;
                        let v = delta[s] + layer_cost + log_t[from * width + (to + half - from)];
                        if v > best {
                            best = v;
                            arg = s;
                        }
                    }
                }
                let j = to_layer * n_bins + to;
                next[j] = best + obs[j];
                back_row[j] = arg as u32;
            }
        }
        std::mem::swap(&mut delta, &mut next);
    }

    let mut state = (0..n_states)
        .max_by(|&a, &b| delta[a].total_cmp(&delta[b]))
        .expect("states");
    let mut path = vec![0; n_frames];
    for t in (0..n_frames).rev() {
        path[t] = state;
        if t > 0 {
            state = back[t * n_states + state] as usize;
        }
    }
    path
}

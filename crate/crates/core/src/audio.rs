//! Audio decoding, analysis-clip selection and the shared STFT.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Rate every clip is resampled to before analysis.
pub const CANONICAL_RATE: u32 = 22050;
pub const WINDOW_SIZE: usize = 2048;
pub const HOP: usize = 512;
/// Length of the analysis window taken from each song.
pub const CLIP_SECONDS: f64 = 60.0;

const RESAMPLER_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;
const RESAMPLER_ROLLOFF: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Seconds into the source file where `samples[0]` lies.
    pub origin_offset: f64,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            origin_offset: 0.0,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            ..self.clone()
        }
    }
}

/// Reads a PCM WAV file (8/16/24/32-bit integer or 32-bit float), averages
/// channels to mono, resamples to [`CANONICAL_RATE`] and peak-normalizes.
pub fn decode(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedAudio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()
        }
        (format, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{}: {bits}-bit {format:?}",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;

    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    from_samples(&mono, spec.sample_rate)
}

/// Shared tail of [`decode`]: validation, resampling and peak normalization.
pub fn from_samples(samples: &[f64], sample_rate: u32) -> Result<AudioClip> {
    if samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if sample_rate == 0 {
        return Err(Error::UnsupportedAudio("sample rate 0".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::UnsupportedAudio("non-finite samples".into()));
    }
    let mut out = resample(samples, sample_rate, CANONICAL_RATE);
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(Error::SilentInput);
    }
    for x in &mut out {
        *x /= peak;
    }
    Ok(AudioClip::new(out, CANONICAL_RATE))
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedAudio(format!("{}: {other}", path.display())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        w.write_sample(s as f32).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Polyphase windowed-sinc resampler: one 64-tap Kaiser-windowed
/// (beta 8.6) filter per output phase, each normalized to unit DC gain.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let g = gcd(u64::from(from), u64::from(to));
    let up = u64::from(to) / g;
    let down = u64::from(from) / g;
    let cutoff = (up as f64 / down as f64).min(1.0) * RESAMPLER_ROLLOFF;
    let half = (RESAMPLER_TAPS / 2) as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let left = RESAMPLER_TAPS / 2 - 1;

    let phases: Vec<[f64; RESAMPLER_TAPS]> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps = [0.0; RESAMPLER_TAPS];
            for (j, tap) in taps.iter_mut().enumerate() {
                let t = j as f64 - left as f64 - frac;
                let x = cutoff * t;
                let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let r = (t / half).clamp(-1.0, 1.0);
                let kaiser = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                *tap = sinc * kaiser;
            }
            let dc: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= dc);
            taps
        })
        .collect();

    let n_in = samples.len() as u64;
    let n_out = (n_in * up).div_ceil(down);
    (0..n_out)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as i64;
            let taps = &phases[(pos % up) as usize];
            let start = base - left as i64;
            taps.iter()
                .enumerate()
                .filter_map(|(j, &h)| {
                    let idx = start + j as i64;
                    (idx >= 0 && idx < n_in as i64).then(|| h * samples[idx as usize])
                })
                .sum()
        })
        .collect()
}

fn clip_window(sample_rate: u32) -> usize {
    (CLIP_SECONDS * f64::from(sample_rate)).round() as usize
}

/// Start sample of the analysis window for a signal of `len` samples, or
/// `None` when the whole signal is used.
pub fn clip_start(len: usize, sample_rate: u32, seed: u64, song_id: &str) -> Option<usize> {
    let window = clip_window(sample_rate);
    if len <= window {
        return None;
    }
    let mut rng = SplitMix64::for_stream(seed, song_id);
    Some(rng.below((len - window + 1) as u64) as usize)
}

/// Picks the analysis window: the whole clip when it is at most
/// [`CLIP_SECONDS`] long, otherwise a 60 s window whose start is uniform
/// over all valid sample offsets, drawn from `stream_seed(seed, song_id)`.
pub fn select_clip(clip: &AudioClip, seed: u64, song_id: &str) -> AudioClip {
    let Some(start) = clip_start(clip.samples.len(), clip.sample_rate, seed, song_id) else {
        return clip.clone();
    };
    let window = clip_window(clip.sample_rate);
    AudioClip {
        samples: clip.samples[start..start + window].to_vec(),
        sample_rate: clip.sample_rate,
        origin_offset: clip.origin_offset + start as f64 / f64::from(clip.sample_rate),
    }
}

/// Magnitude STFT, frames × bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub mags: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub frame_hop: usize,
    pub window_size: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.mags[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.mags[frame * self.n_bins + bin]
    }

    /// Time of frame `i`: its window is centred on sample `i * hop`.
    pub fn frame_time(&self, i: usize) -> f64 {
        (i * self.frame_hop) as f64 / f64::from(self.sample_rate)
    }

    pub fn frame_energy(&self, i: usize) -> f64 {
        self.frame(i).iter().map(|m| m * m).sum()
    }
}

/// Complex STFT kept for resynthesis.
#[derive(Debug, Clone)]
pub struct ComplexStft {
    pub bins: Vec<Complex64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub window_size: usize,
    pub hop: usize,
    pub signal_len: usize,
    pub sample_rate: u32,
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

fn check_geometry(len: usize, window_size: usize, hop: usize) -> Result<()> {
    if !window_size.is_power_of_two() || window_size < 4 {
        return Err(Error::InvalidArgument(format!(
            "window size {window_size} is not a power of two"
        )));
    }
    if hop == 0 || hop > window_size {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} must be in 1..={window_size}"
        )));
    }
    if len < window_size {
        return Err(Error::TooShort {
            len,
            window: window_size,
        });
    }
    Ok(())
}

/// Hann-windowed complex STFT. The signal is reflection-padded by half a
/// window on each side, so frame `i` is centred on sample `i * hop` and the
/// padded length `len + window_size` yields
/// `1 + floor(len / hop)` frames.
pub fn stft_complex(clip: &AudioClip, window_size: usize, hop: usize) -> Result<ComplexStft> {
    check_geometry(clip.samples.len(), window_size, hop)?;
    let padded = reflect_pad(&clip.samples, window_size / 2);
    let n_frames = 1 + (padded.len() - window_size) / hop;
    let n_bins = window_size / 2 + 1;
    let window = hann(window_size);
    let fft = FftPlanner::new().plan_fft_forward(window_size);

    let mut bins = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    for f in 0..n_frames {
        let frame = &padded[f * hop..f * hop + window_size];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        bins.extend_from_slice(&buf[..n_bins]);
    }
    Ok(ComplexStft {
        bins,
        n_frames,
        n_bins,
        window_size,
        hop,
        signal_len: clip.samples.len(),
        sample_rate: clip.sample_rate,
    })
}

impl ComplexStft {
    pub fn magnitude(&self) -> Spectrogram {
        Spectrogram {
            mags: self.bins.iter().map(|c| c.norm()).collect(),
            n_frames: self.n_frames,
            n_bins: self.n_bins,
            frame_hop: self.hop,
            window_size: self.window_size,
            sample_rate: self.sample_rate,
        }
    }

    /// Weighted overlap-add inverse (least-squares, Hann synthesis window),
    /// cropped back to the original signal length.
    pub fn inverse(&self) -> AudioClip {
        let n = self.window_size;
        let pad = n / 2;
        let padded_len = self.signal_len + n;
        let window = hann(n);
        let ifft = FftPlanner::new().plan_fft_inverse(n);
        let mut out = vec![0.0; padded_len];
        let mut norm = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..self.n_frames {
            let frame = &self.bins[f * self.n_bins..(f + 1) * self.n_bins];
            buf[..self.n_bins].copy_from_slice(frame);
            for k in 1..n / 2 {
                buf[n - k] = frame[k].conj();
            }
            // One-sided spectrum of a real signal: DC and Nyquist are real.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            ifft.process(&mut buf);
            let start = f * self.hop;
            for (j, (&w, c)) in window.iter().zip(&buf).enumerate() {
                out[start + j] += w * c.re / n as f64;
                norm[start + j] += w * w;
            }
        }
        let samples = (pad..pad + self.signal_len)
            .map(|i| if norm[i] > 1e-10 { out[i] / norm[i] } else { 0.0 })
            .collect();
        AudioClip::new(samples, self.sample_rate)
    }
}

/// Magnitude STFT with the module defaults' geometry rules.
pub fn stft(clip: &AudioClip, window_size: usize, hop: usize) -> Result<Spectrogram> {
    Ok(stft_complex(clip, window_size, hop)?.magnitude())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, rate: u32, seconds: f64) -> Vec<f64> {
        let n = (seconds * f64::from(rate)) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / f64::from(rate)).sin())
            .collect()
    }

    /// Frequency from the spacing of rising zero crossings, with linear
    /// interpolation of each crossing instant.
    fn zero_crossing_freq(x: &[f64], rate: u32) -> f64 {
        let mut crossings = Vec::new();
        for i in 1..x.len() {
            if x[i - 1] < 0.0 && x[i] >= 0.0 {
                crossings.push((i - 1) as f64 + x[i - 1] / (x[i - 1] - x[i]));
            }
        }
        let first = crossings[0];
        let last = *crossings.last().unwrap();
        (crossings.len() - 1) as f64 * f64::from(rate) / (last - first)
    }

    #[test]
    fn resampling_halves_length_for_44100() {
        let x = sine(1000.0, 44100, 1.0);
        let y = resample(&x, 44100, 22050);
        assert_eq!(y.len(), x.len() / 2);
    }

    #[test]
    fn resampled_sine_keeps_frequency() {
        let x = sine(440.0, 48000, 2.0);
        let clip = from_samples(&x, 48000).unwrap();
        assert_eq!(clip.sample_rate, CANONICAL_RATE);
        // Skip the filter's edge transients.
        let inner = &clip.samples[200..clip.samples.len() - 200];
        let f = zero_crossing_freq(inner, CANONICAL_RATE);
        assert!((f - 440.0).abs() < 0.1, "measured {f}");
        assert!((clip.peak() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silence_and_empty_are_errors() {
        assert!(matches!(from_samples(&[0.0; 4000], 22050), Err(Error::SilentInput)));
        assert!(matches!(from_samples(&[], 22050), Err(Error::EmptyAudio)));
    }

    #[test]
    fn decode_stereo_wav() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        let x = sine(500.0, 44100, 1.0);
        for &s in &x {
            let v = (s * 16000.0) as i16;
            w.write_sample(v).unwrap();
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let clip = decode(&path).unwrap();
        assert_eq!(clip.sample_rate, 22050);
        assert_eq!(clip.samples.len(), x.len() / 2);
        assert!((clip.peak() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_missing_file() {
        assert!(matches!(decode("/nonexistent/x.wav"), Err(Error::Io { .. })));
    }

    #[test]
    fn short_clip_is_kept_whole() {
        let clip = AudioClip::new(vec![0.1; 45 * 22050], 22050);
        assert_eq!(select_clip(&clip, 1, "a"), clip);
    }

    #[test]
    fn long_clip_selection_is_deterministic() {
        let clip = AudioClip::new((0..180 * 22050).map(|i| i as f64).collect(), 22050);
        let a = select_clip(&clip, 9, "song");
        let b = select_clip(&clip, 9, "song");
        assert_eq!(a.origin_offset, b.origin_offset);
        assert_eq!(a.samples.len(), 60 * 22050);
        assert_eq!(a.samples[0], a.origin_offset * 22050.0);
        assert!(a.origin_offset <= 120.0);
    }

    #[test]
    fn sine_peaks_at_analytic_bin() {
        let clip = AudioClip::new(sine(1000.0, 22050, 1.0), 22050);
        let spec = stft(&clip, 2048, 512).unwrap();
        assert_eq!(spec.n_bins, 1025);
        assert_eq!(spec.n_frames, 1 + clip.samples.len() / 512);
        let expected = (1000.0 * 2048.0 / 22050.0f64).round() as usize;
        assert_eq!(expected, 93);
        // Interior frames only: reflection at the edges breaks the phase.
        for f in 2..spec.n_frames - 2 {
            let frame = spec.frame(f);
            let argmax = (0..frame.len())
                .max_by(|&a, &b| frame[a].total_cmp(&frame[b]))
                .unwrap();
            assert_eq!(argmax, expected, "frame {f}");
        }
    }

    #[test]
    fn zero_signal_gives_zero_spectrum() {
        let clip = AudioClip::new(vec![0.0; 22050], 22050);
        let spec = stft(&clip, 2048, 512).unwrap();
        assert!(spec.mags.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn impulses_light_up_their_frames() {
        let mut x = vec![0.0; 22050 * 2];
        let positions = [5120usize, 20480, 35840];
        for &p in &positions {
            x[p] = 1.0;
        }
        let spec = stft(&AudioClip::new(x, 22050), 2048, 512).unwrap();
        for &p in &positions {
            let f = p / 512;
            let e = spec.frame_energy(f);
            assert!(e > 100.0, "frame {f} energy {e}");
            let frame = spec.frame(f);
            let lo = frame.iter().cloned().fold(f64::MAX, f64::min);
            assert!(lo > 0.99, "impulse frame is not broadband");
        }
        // Midway between impulses nothing is visible.
        assert_eq!(spec.frame_energy((5120 + 20480) / 2 / 512), 0.0);
    }

    #[test]
    fn too_short_is_an_error() {
        let clip = AudioClip::new(vec![0.0; 1000], 22050);
        assert!(matches!(stft(&clip, 2048, 512), Err(Error::TooShort { .. })));
        let clip = AudioClip::new(vec![0.0; 4096], 22050);
        assert!(stft(&clip, 2000, 512).is_err());
        assert!(stft(&clip, 2048, 4096).is_err());
    }

    #[test]
    fn inverse_reconstructs_signal() {
        let x: Vec<f64> = sine(330.0, 22050, 1.0)
            .iter()
            .enumerate()
            .map(|(i, s)| s * (1.0 + (i % 97) as f64 / 97.0))
            .collect();
        let clip = AudioClip::new(x.clone(), 22050);
        let y = stft_complex(&clip, 2048, 512).unwrap().inverse();
        assert_eq!(y.samples.len(), x.len());
        let err = x
            .iter()
            .zip(&y.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn parseval_bound(seed in any::<u64>(), len in 2048usize..6000) {
            let mut rng = SplitMix64::new(seed);
            let x: Vec<f64> = (0..len).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            let spec = stft(&AudioClip::new(x, 22050), 2048, 512).unwrap();
            let window_energy: f64 = hann(2048).iter().map(|w| w * w).sum();
            for f in 0..spec.n_frames {
                prop_assert!(spec.frame_energy(f) <= window_energy * 2048.0);
            }
        }

        #[test]
        fn start_offsets_are_valid(seed in any::<u64>()) {
            let clip = AudioClip::new(vec![0.5; 70 * 22050], 22050);
            let c = select_clip(&clip, seed, "x");
            prop_assert!(c.origin_offset >= 0.0 && c.origin_offset <= 10.0);
            prop_assert!(c.duration() <= 60.5);
        }
    }
}

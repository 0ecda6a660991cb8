//! Synthetic songs with known interval and ratio content.
//!
//! A song is a sine melody walking by drawn intervals plus a noise-burst
//! click track whose consecutive IOI pairs realize drawn ratios. The
//! generator returns the intended samples so analyzers can be checked
//! against values they did not produce.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, CANONICAL_RATE};
use crate::corpus::{write_manifest, CorpusManifest, SongMeta};
use crate::error::{Error, Result};
use crate::pitch::{PitchConfig, PitchTrack};
use crate::rhythm::{RATIO_HIGH, RATIO_LOW};
use crate::rng::{stream_seed, SplitMix64};

const FADE_SECONDS: f64 = 0.010;
const CLICK_SECONDS: f64 = 0.005;
const NOTE_AMPLITUDE: f64 = 0.5;
/// Gaussian floor added to the mix, relative to its peak (-80 dB).
const DITHER: f64 = 1e-4;
/// IOIs stay within `[base / IOI_SPAN, base * IOI_SPAN]`.
const IOI_SPAN: f64 = 2.0;
/// Pause inserted when no drawn ratio keeps the IOI in range. Ratios
/// spanning it fall outside the kept band and are discarded downstream.
const GAP_IOIS: f64 = 12.0;
/// Melody offsets are reflected to stay within one octave of `f0_base`.
const MAX_OFFSET: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// `(semitones, weight)` steps for the melodic walk.
    pub melody_intervals: Vec<(f64, f64)>,
    pub note_dur: f64,
    /// `(r, weight)` inter-onset ratios for the click track.
    pub rhythm_ratios: Vec<(f64, f64)>,
    pub base_ioi: f64,
    pub f0_base: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let check_weights = |name: &str, w: &[(f64, f64)]| -> Result<()> {
            if w.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if w.iter().any(|(v, p)| !v.is_finite() || !(*p >= 0.0) || !p.is_finite()) {
                return bad(format!("{name} has a negative or non-finite entry"));
            }
            if w.iter().map(|(_, p)| p).sum::<f64>() <= 0.0 {
                return bad(format!("{name} weights sum to zero"));
            }
            Ok(())
        };
        check_weights("melody_intervals", &self.melody_intervals)?;
        check_weights("rhythm_ratios", &self.rhythm_ratios)?;
        if let Some((s, _)) = self.melody_intervals.iter().find(|(s, _)| s.abs() > MAX_OFFSET) {
            return bad(format!("interval {s} exceeds one octave"));
        }
        if let Some((r, _)) = self
            .rhythm_ratios
            .iter()
            .find(|(r, _)| !(*r > RATIO_LOW && *r < RATIO_HIGH))
        {
            return bad(format!("ratio {r} outside ({RATIO_LOW}, {RATIO_HIGH})"));
        }
        for (name, v) in [
            ("note_dur", self.note_dur),
            ("base_ioi", self.base_ioi),
            ("duration", self.duration),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let band = PitchConfig::default();
        if !(self.f0_base / 2.0 >= band.fmin && self.f0_base * 2.0 <= band.fmax) {
            return bad(format!(
                "f0_base {} must keep one octave either side within [{}, {}] Hz",
                self.f0_base, band.fmin, band.fmax
            ));
        }
        Ok(())
    }
}

/// The generator's intended content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Semitone offset of each note from `f0_base`.
    pub note_offsets: Vec<f64>,
    pub note_dur: f64,
    pub f0_base: f64,
    /// Realized note-to-note steps.
    pub steps: Vec<f64>,
    pub click_times: Vec<f64>,
    /// Drawn ratios, one per realized IOI pair (gaps excluded).
    pub ratios: Vec<f64>,
}

impl GroundTruth {
    /// Frame-level f0 contour of the notes, ignoring fades.
    pub fn ideal_track(&self, frame_period: f64) -> PitchTrack {
        let total = self.note_offsets.len() as f64 * self.note_dur;
        let n = (total / frame_period).floor() as usize;
        let f0s = (0..n)
            .map(|i| {
                let k = ((i as f64 * frame_period) / self.note_dur) as usize;
                self.note_offsets
                    .get(k)
                    .map(|o| self.f0_base * 2f64.powf(o / 12.0))
            })
            .collect();
        PitchTrack::from_frames(f0s, frame_period)
    }
}

#[derive(Debug, Clone)]
pub struct SynthSong {
    pub mix: AudioClip,
    pub vocal: Vec<f64>,
    pub percussive: Vec<f64>,
    pub truth: GroundTruth,
}

fn weighted<'a>(rng: &mut SplitMix64, items: &'a [(f64, f64)]) -> &'a (f64, f64) {
    let w: Vec<f64> = items.iter().map(|(_, p)| *p).collect();
    &items[rng.weighted_index(&w)]
}

fn melody(spec: &SynthSpec, n: usize) -> (Vec<f64>, GroundTruth) {
    let mut rng = SplitMix64::for_stream(spec.seed, "melody");
    let sr = f64::from(CANONICAL_RATE);
    let n_notes = (spec.duration / spec.note_dur).ceil() as usize;
    let mut offsets = Vec::with_capacity(n_notes);
    let mut steps = Vec::with_capacity(n_notes.saturating_sub(1));
    let mut cur = 0.0;
    offsets.push(cur);
    for _ in 1..n_notes {
        let mut step = weighted(&mut rng, &spec.melody_intervals).0;
        if (cur + step).abs() > MAX_OFFSET {
            step = -step;
        }
        cur += step;
        steps.push(step);
        offsets.push(cur);
    }
    let mut x = vec![0.0; n];
    let note_len = (spec.note_dur * sr).round() as usize;
    let fade = ((FADE_SECONDS * sr).round() as usize).min(note_len / 2).max(1);
    for (k, o) in offsets.iter().enumerate() {
        let f = spec.f0_base * 2f64.powf(o / 12.0);
        let start = k * note_len;
        for j in 0..note_len {
            let Some(s) = x.get_mut(start + j) else { break };
            let ramp = if j < fade {
                j as f64 / fade as f64
            } else if note_len - j <= fade {
                (note_len - j) as f64 / fade as f64
            } else {
                1.0
            };
            *s = NOTE_AMPLITUDE * ramp * (2.0 * PI * f * j as f64 / sr).sin();
        }
    }
    let truth = GroundTruth {
        note_offsets: offsets,
        note_dur: spec.note_dur,
        f0_base: spec.f0_base,
        steps,
        click_times: Vec::new(),
        ratios: Vec::new(),
    };
    (x, truth)
}

/// Click times and the ratios they realize. The first click is at
/// `base_ioi`; each later IOI is `prev * (1 - r) / r` for a drawn `r`
/// among those keeping it within range.
fn click_times(spec: &SynthSpec) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SplitMix64::for_stream(spec.seed, "rhythm");
    let (lo, hi) = (spec.base_ioi / IOI_SPAN, spec.base_ioi * IOI_SPAN);
    // Relative slack so ratios written to a few decimals (0.6667) still
    // reach the range edges; the realized IOI is clamped into range.
    let tol = 1e-3 * spec.base_ioi;
    let mut times = vec![spec.base_ioi];
    let mut ratios = Vec::new();
    let mut prev = spec.base_ioi;
    let mut t = spec.base_ioi + prev;
    let end = spec.duration - CLICK_SECONDS;
    // False right after a gap: the following IOI restarts at `base_ioi`.
    let mut prev_ok = true;
    while t < end {
        times.push(t);
        let feasible: Vec<(f64, f64)> = spec
            .rhythm_ratios
            .iter()
            .filter(|(r, _)| {
                let next = prev * (1.0 - r) / r;
                next >= lo - tol && next <= hi + tol
            })
            .copied()
            .collect();
        let next = if !prev_ok {
            prev_ok = true;
            spec.base_ioi
        } else if feasible.iter().any(|(_, w)| *w > 0.0) {
            let r = weighted(&mut rng, &feasible).0;
            let next = (prev * (1.0 - r) / r).clamp(lo, hi);
            if t + next < end {
                ratios.push(prev / (prev + next));
            }
            next
        } else {
            prev_ok = false;
            GAP_IOIS * spec.base_ioi
        };
        prev = next;
        t += next;
    }
    (times, ratios)
}

fn clicks(spec: &SynthSpec, times: &[f64], n: usize) -> Vec<f64> {
    let mut rng = SplitMix64::for_stream(spec.seed, "clicks");
    let sr = f64::from(CANONICAL_RATE);
    let len = (CLICK_SECONDS * sr).round() as usize;
    let mut x = vec![0.0; n];
    for t in times {
        let start = (t * sr).round() as usize;
        for j in 0..len {
            if let Some(s) = x.get_mut(start + j) {
                let w = 0.5 - 0.5 * (2.0 * PI * j as f64 / len as f64).cos();
                *s += w * (2.0 * rng.next_f64() - 1.0);
            }
        }
    }
    x
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Renders one song at the canonical rate.
pub fn synth_song(spec: &SynthSpec) -> Result<SynthSong> {
    spec.validate()?;
    let n = (spec.duration * f64::from(CANONICAL_RATE)).round() as usize;
    let (vocal, mut truth) = melody(spec, n);
    let (times, ratios) = click_times(spec);
    let mut percussive = clicks(spec, &times, n);
    let (rv, rp) = (rms(&vocal), rms(&percussive));
    if rp > 0.0 {
        let g = rv / rp;
        percussive.iter_mut().for_each(|v| *v *= g);
    }
    let mut rng = SplitMix64::for_stream(spec.seed, "dither");
    let mut mix: Vec<f64> = vocal.iter().zip(&percussive).map(|(a, b)| a + b).collect();
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    mix.iter_mut().for_each(|v| *v += DITHER * peak * rng.next_gaussian());
    truth.click_times = times;
    truth.ratios = ratios;
    Ok(SynthSong {
        mix: audio::from_samples(&mix, CANONICAL_RATE)?,
        vocal,
        percussive,
        truth,
    })
}

/// One country's generator in a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySynth {
    pub region: String,
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_per_country: usize,
    pub countries: BTreeMap<String, CountrySynth>,
}

pub fn song_id(country: &str, index: usize) -> String {
    format!("{country}_{index:04}")
}

/// Seed of song `index` of `country`, independent of generation order.
pub fn song_seed(corpus_seed: u64, country: &str, index: usize) -> u64 {
    stream_seed(corpus_seed, &format!("{country}/{index}"))
}

/// The spec of every song of the corpus, in manifest order.
pub fn corpus_songs(spec: &CorpusSpec) -> Vec<(SongMeta, SynthSpec)> {
    let mut out = Vec::new();
    for (country, c) in &spec.countries {
        for i in 0..spec.n_per_country {
            let id = song_id(country, i);
            let meta = SongMeta {
                song_id: id.clone(),
                country: country.clone(),
                region: c.region.clone(),
                audio_path: PathBuf::from("audio").join(format!("{id}.wav")),
                chart_countries: BTreeSet::from([country.clone()]),
            };
            let song_spec = SynthSpec {
                seed: song_seed(spec.seed, country, i),
                ..c.spec.clone()
            };
            out.push((meta, song_spec));
        }
    }
    out
}

/// Writes `audio/<id>.wav`, `truth/<id>.json` and `manifest.csv` under
/// `out_dir`; manifest audio paths are relative to `out_dir`.
pub fn synth_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    for c in spec.countries.values() {
        c.spec.validate()?;
    }
    for sub in ["audio", "truth"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let songs = corpus_songs(spec);
    songs.par_iter().try_for_each(|(meta, song_spec)| -> Result<()> {
        let song = synth_song(song_spec)?;
        audio::write_wav(out_dir.join(&meta.audio_path), &song.mix)?;
        let path = out_dir.join("truth").join(format!("{}.json", meta.song_id));
        let json = serde_json::to_string_pretty(&song.truth)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    })?;
    let manifest = CorpusManifest {
        songs: songs.into_iter().map(|(m, _)| m).collect(),
        seed: spec.seed,
    };
    write_manifest(out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

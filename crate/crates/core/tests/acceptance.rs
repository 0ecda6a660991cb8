//! End-to-end acceptance criteria P1-P9. Each test prints one PASS/FAIL
//! line to stdout (outside the test harness capture) and then asserts.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use melrhy::audio::{self, AudioClip, HOP, WINDOW_SIZE};
use melrhy::density::Kind;
use melrhy::melody;
use melrhy::onsets::{detect_onsets, OnsetConfig, OnsetList};
use melrhy::pipeline::{self, AnalysisConfig, DumpFlags, RunConfig, JOURNAL_FILE};
use melrhy::pitch::{track_pitch, PitchConfig};
use melrhy::rhythm::{self, RATIO_HIGH, RATIO_LOW};
use melrhy::rng::SplitMix64;
use melrhy::separation::{hpss, hpss_masks, HpssConfig};
use melrhy::stats::{self, CorrMethod, CorrOptions, Distribution, SongDistribution};
use melrhy::synth::{synth_corpus, synth_song, CorpusSpec, CountrySynth, SynthSpec};

const SR: usize = 22050;

fn report(id: &str, pass: bool, elapsed: Duration, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("{id} {verdict} ({:.2} s) {detail}", elapsed.as_secs_f64());
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    assert!(pass, "{line}");
}

fn sine(freq: f64, seconds: f64, amp: f64) -> Vec<f64> {
    (0..(seconds * SR as f64) as usize)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64).sin())
        .collect()
}

/// Hann-windowed noise bursts of 5 ms over a -80 dB noise floor.
fn click_train(seconds: f64, positions: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut x: Vec<f64> = (0..(seconds * SR as f64) as usize).map(|_| 1e-4 * rng.next_gaussian()).collect();
    let len = (0.005 * SR as f64) as usize;
    for &p in positions {
        for j in 0..len {
            if let Some(s) = x.get_mut(p + j) {
                let w = 0.5 - 0.5 * (2.0 * PI * j as f64 / len as f64).cos();
                *s += w * (2.0 * rng.next_f64() - 1.0);
            }
        }
    }
    x
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn p1_formula_fidelity() {
    let t0 = Instant::now();
    let m440 = melody::midi(440.0).unwrap();
    let m880 = melody::midi(880.0).unwrap();
    let r = |times: Vec<f64>| rhythm::ratios(&OnsetList::new(times)).unwrap()[0].r;
    let r11 = r(vec![0.0, 1.0, 2.0]);
    let r21 = r(vec![0.0, 2.0, 3.0]);
    let bh = stats::bh_adjust(&[0.01, 0.02, 0.03, 0.04]);
    let elapsed = t0.elapsed();
    let pass = m440 == 69.0
        && m880 == 81.0
        && (r11 - 0.5).abs() <= 1e-12
        && (r21 - 2.0 / 3.0).abs() <= 1e-12
        && bh.iter().all(|q| (q - 0.04).abs() <= 1e-12)
        && elapsed < Duration::from_secs(1);
    report("P1", pass, elapsed, format!("midi {m440}/{m880}, r {r11}/{r21}, bh {bh:?}"));
}

#[test]
fn p2_pitch_oracle() {
    let t0 = Instant::now();
    let cfg = PitchConfig::default();
    let track = track_pitch(&AudioClip::new(sine(440.0, 5.0, 0.5), SR as u32), &cfg).unwrap();
    let voiced: Vec<f64> = track.f0_hz.iter().flatten().copied().collect();
    let f0 = if voiced.is_empty() { f64::NAN } else { median(voiced) };

    let mut rng = SplitMix64::new(11);
    let noise: Vec<f64> = (0..5 * SR).map(|_| 0.3 * rng.next_gaussian()).collect();
    let nt = track_pitch(&AudioClip::new(noise, SR as u32), &cfg).unwrap();
    let unvoiced = 1.0 - nt.voiced_count() as f64 / nt.len() as f64;
    let elapsed = t0.elapsed();
    let pass = (f0 - 440.0).abs() <= 1.0 && unvoiced >= 0.9 && elapsed < Duration::from_secs(30);
    report("P2", pass, elapsed, format!("median f0 {f0:.3} Hz, noise unvoiced {:.1}%", 100.0 * unvoiced));
}

#[test]
fn p3_onset_oracle() {
    let t0 = Instant::now();
    let positions: Vec<usize> = (0..20).map(|k| 1000 + k * SR / 2).collect();
    let x = click_train(10.0, &positions, 5);
    let cfg = OnsetConfig::default();
    let loud = detect_onsets(&AudioClip::new(x.clone(), SR as u32), &cfg).unwrap();
    let quiet = detect_onsets(&AudioClip::new(x.iter().map(|v| 0.1 * v).collect(), SR as u32), &cfg).unwrap();
    let max_err = loud
        .times
        .windows(2)
        .map(|w| (w[1] - w[0] - 0.5).abs())
        .fold(0.0, f64::max);
    let same = loud.len() == quiet.len() && loud.times.iter().zip(&quiet.times).all(|(a, b)| (a - b).abs() < 1e-9);
    let elapsed = t0.elapsed();
    let pass = (19..=21).contains(&loud.len()) && max_err <= 0.012 && same && elapsed < Duration::from_secs(10);
    report(
        "P3",
        pass,
        elapsed,
        format!("{} onsets, max spacing error {:.2} ms, scaled set identical: {same}", loud.len(), 1e3 * max_err),
    );
}

fn snr_db(source: &[f64], estimate: &[f64]) -> f64 {
    let n = source.len().min(estimate.len());
    let s: f64 = source[..n].iter().map(|v| v * v).sum();
    let e: f64 = source[..n].iter().zip(&estimate[..n]).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (s / e).log10()
}

#[test]
fn p4_hpss_oracle() {
    let t0 = Instant::now();
    // Raised-cosine fades: a hard start or stop is itself a broadband
    // transient and belongs in the percussive stem.
    let mut tone = sine(440.0, 4.0, 0.3);
    let (n, ramp) = (tone.len(), SR / 20);
    for i in 0..ramp {
        let g = 0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos();
        tone[i] *= g;
        tone[n - 1 - i] *= g;
    }
    let mut clicks = vec![0.0; tone.len()];
    let mut i = SR / 4;
    while i + 5 < clicks.len() {
        for (j, v) in [1.0, -0.8, 0.6, -0.4, 0.2].iter().enumerate() {
            clicks[i + j] = *v;
        }
        i += SR / 2;
    }
    let mix: Vec<f64> = tone.iter().zip(&clicks).map(|(a, b)| a + b).collect();
    let clip = AudioClip::new(mix, SR as u32);
    let spec = audio::stft(&clip, WINDOW_SIZE, HOP).unwrap();
    let cfg = HpssConfig::default();
    let stems = hpss(&spec, &clip, &cfg).unwrap();
    let masks = hpss_masks(&spec, &cfg).unwrap();
    let comp = masks
        .harmonic
        .iter()
        .zip(&masks.percussive)
        .map(|(h, p)| (h + p - 1.0).abs())
        .fold(0.0, f64::max);
    let snr_h = snr_db(&tone, &stems.vocal_like.samples);
    let snr_p = snr_db(&clicks, &stems.percussive.samples);
    let elapsed = t0.elapsed();
    let pass = snr_h >= 6.0 && snr_p >= 6.0 && comp <= 1e-6 && elapsed < Duration::from_secs(30);
    report(
        "P4",
        pass,
        elapsed,
        format!("harmonic SNR {snr_h:.1} dB, percussive SNR {snr_p:.1} dB, mask sum error {comp:.1e}"),
    );
}

#[test]
fn p5_density_closure() {
    let t0 = Instant::now();
    let spec = SynthSpec {
        melody_intervals: vec![(2.0, 1.0), (-2.0, 1.0), (7.0, 1.0), (-7.0, 1.0)],
        note_dur: 1.0,
        rhythm_ratios: vec![(1.0 / 3.0, 1.0), (0.5, 1.0), (2.0 / 3.0, 1.0)],
        // A whole number of hops keeps clicks on the frame grid.
        base_ioi: 24.0 * HOP as f64 / SR as f64,
        f0_base: 220.0,
        duration: 60.0,
        seed: 7,
    };
    let song = synth_song(&spec).unwrap();
    let a = pipeline::analyze(&song.mix, None, &AnalysisConfig::default()).unwrap();

    let rg = Kind::Rhythm.grid();
    let top: Vec<f64> = a.rhythm.peaks().iter().take(3).map(|&i| rg.point(i)).collect();
    let mut rhythm_ok = top.len() == 3;
    for target in [1.0 / 3.0, 0.5, 2.0 / 3.0] {
        rhythm_ok &= top.iter().any(|p| (p - target).abs() <= 0.01);
    }

    let mg = Kind::Melody.grid();
    let maxima: Vec<f64> = a.melody.peaks().iter().map(|&i| mg.point(i)).collect();
    let nearest: Vec<f64> = [-7.0, -2.0, 2.0, 7.0]
        .iter()
        .map(|t: &f64| maxima.iter().map(|p| (p - t).abs()).fold(f64::INFINITY, f64::min))
        .collect();
    let melody_ok = nearest.iter().all(|d| *d <= 0.25);
    let elapsed = t0.elapsed();
    let pass = rhythm_ok && melody_ok && elapsed < Duration::from_secs(120);
    report(
        "P5",
        pass,
        elapsed,
        format!("rhythm top-3 peaks {top:.3?}, melody distance to nearest maximum for -7/-2/+2/+7 {nearest:.3?}"),
    );
}

/// One song's rhythm distribution from `n` ratios drawn from `components`
/// with Gaussian timing jitter.
fn generated_song(rng: &mut SplitMix64, components: &[f64], n: usize) -> Distribution {
    let mut values = Vec::with_capacity(n);
    while values.len() < n {
        let c = components[rng.below(components.len() as u64) as usize];
        let r = c + 0.01 * rng.next_gaussian();
        if r > RATIO_LOW && r < RATIO_HIGH {
            values.push(r);
        }
    }
    Distribution::from_density(&rhythm::density_from_ratios(&values).unwrap())
}

fn generated_country(rng: &mut SplitMix64, country: &str, generators: &[&[f64]], n_songs: usize) -> Vec<SongDistribution> {
    (0..n_songs)
        .map(|i| {
            let g = generators[rng.below(generators.len() as u64) as usize];
            SongDistribution {
                song_id: format!("{country}_{i:04}"),
                country: country.into(),
                region: "R".into(),
                dist: generated_song(rng, g, 60),
            }
        })
        .collect()
}

#[test]
fn p6_statistical_calibration() {
    let t0 = Instant::now();
    let n_perm = 500;
    let duple: &[f64] = &[0.5];
    let triple: &[f64] = &[1.0 / 3.0, 2.0 / 3.0];

    let same_reps = 50;
    let mut same_pass = 0;
    for rep in 0..same_reps {
        let mut rng = SplitMix64::for_index(0x51, rep);
        let mut songs = generated_country(&mut rng, "AA", &[duple], 60);
        songs.extend(generated_country(&mut rng, "BB", &[duple], 60));
        if stats::between_country_null(&songs, n_perm, rep, 0).unwrap().p > 0.05 {
            same_pass += 1;
        }
    }

    let diff_reps = 20;
    let floor = 1.0 / (n_perm as f64 + 1.0);
    let mut diff_pass = 0;
    for rep in 0..diff_reps {
        let mut rng = SplitMix64::for_index(0x52, rep);
        let mut songs = generated_country(&mut rng, "AA", &[duple], 60);
        songs.extend(generated_country(&mut rng, "BB", &[triple], 60));
        if stats::between_country_null(&songs, n_perm, rep, 0).unwrap().p == floor {
            diff_pass += 1;
        }
    }

    let div_reps = 20;
    let mut div_pass = 0;
    for rep in 0..div_reps {
        let mut rng = SplitMix64::for_index(0x53, rep);
        let mut songs = generated_country(&mut rng, "MIX", &[duple, triple], 30);
        songs.extend(generated_country(&mut rng, "ONE", &[duple], 30));
        let d = stats::diversity(&songs).unwrap();
        let raw = |c: &str| d.iter().find(|x| x.country == c).unwrap().raw_median_jsd;
        if raw("MIX") > raw("ONE") {
            div_pass += 1;
        }
    }

    let elapsed = t0.elapsed();
    let pass = same_pass * 10 >= same_reps * 9
        && diff_pass == diff_reps
        && div_pass == div_reps
        && elapsed < Duration::from_secs(600);
    report(
        "P6",
        pass,
        elapsed,
        format!(
            "(a) p > 0.05 in {same_pass}/{same_reps}, (b) p = 1/{} in {diff_pass}/{diff_reps}, (c) mixture ranked higher in {div_pass}/{div_reps}",
            n_perm + 1
        ),
    );
}

#[test]
fn p7_independence_machinery() {
    let t0 = Instant::now();
    let n = 59;
    let regions: Vec<String> = (0..n).map(|i| format!("R{}", i % 6)).collect();
    let reps = 100;
    let (mut corr_pass, mut partial_pass) = (0, 0);
    for rep in 0..reps {
        let mut rng = SplitMix64::for_index(0x71, rep);
        let mel: Vec<Option<f64>> = (0..n).map(|_| Some(rng.next_f64())).collect();
        let rhy: Vec<Option<f64>> = (0..n).map(|_| Some(rng.next_f64())).collect();
        let opts = CorrOptions { n_boot: 1000, n_perm: 1000, seed: rep };
        let c = stats::corr(&mel, &rhy, CorrMethod::Pearson, &opts).unwrap();
        let p = stats::partial_region(&mel, &rhy, &regions, &opts).unwrap();
        corr_pass += usize::from(c.estimate.abs() < 0.3 && c.p > 0.05);
        partial_pass += usize::from(p.estimate.abs() < 0.3 && p.p > 0.05);
    }

    let coupled_reps = 20;
    let mut min_coupled = f64::INFINITY;
    for rep in 0..coupled_reps {
        let mut rng = SplitMix64::for_index(0x72, rep);
        let mel: Vec<Option<f64>> = (0..n).map(|_| Some(rng.next_f64())).collect();
        let rhy: Vec<Option<f64>> = mel.iter().map(|m| m.map(|v| 0.4 * v + 0.1)).collect();
        let opts = CorrOptions { n_boot: 200, n_perm: 200, seed: rep };
        let c = stats::corr(&mel, &rhy, CorrMethod::Pearson, &opts).unwrap();
        let p = stats::partial_region(&mel, &rhy, &regions, &opts).unwrap();
        min_coupled = min_coupled.min(c.estimate).min(p.estimate);
    }

    let elapsed = t0.elapsed();
    let pass = corr_pass * 10 >= reps as usize * 9
        && partial_pass * 10 >= reps as usize * 9
        && min_coupled > 0.95
        && elapsed < Duration::from_secs(60);
    report(
        "P7",
        pass,
        elapsed,
        format!(
            "independent: corr {corr_pass}/{reps}, partial_region {partial_pass}/{reps} with |r| < 0.3 and p > 0.05; coupled min estimate {min_coupled:.4}"
        ),
    );
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != JOURNAL_FILE {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let hash = Sha256::digest(std::fs::read(&path).unwrap());
                out.insert(rel, format!("{hash:x}"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn p8_determinism_and_parallel_invariance() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let base = SynthSpec {
        melody_intervals: vec![(2.0, 1.0), (-2.0, 1.0), (5.0, 1.0)],
        note_dur: 0.4,
        rhythm_ratios: vec![(1.0 / 3.0, 1.0), (0.5, 2.0), (2.0 / 3.0, 1.0)],
        base_ioi: 24.0 * HOP as f64 / SR as f64,
        f0_base: 220.0,
        duration: 30.0,
        seed: 0,
    };
    let countries = ["AA", "BB", "CC", "DD"]
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let spec = SynthSpec { f0_base: 180.0 + 20.0 * i as f64, ..base.clone() };
            (c.to_string(), CountrySynth { region: format!("R{}", i % 2), spec })
        })
        .collect();
    let corpus = tmp.path().join("corpus");
    synth_corpus(&CorpusSpec { seed: 17, n_per_country: 5, countries }, &corpus).unwrap();

    let run = |name: &str, workers: usize, max_songs: Option<usize>| {
        let mut cfg = RunConfig::new(corpus.join("manifest.csv"), tmp.path().join(name));
        cfg.workers = workers;
        cfg.seed = 3;
        cfg.dumps = DumpFlags { pitch: true, onsets: true, stems: false };
        cfg.max_songs = max_songs;
        pipeline::extract_all(&cfg).unwrap()
    };
    let one = run("w1", 1, None);
    let eight = run("w8", 8, None);
    let partial = run("resumed", 8, Some(7));
    let resumed = run("resumed", 8, None);

    let (h1, h8, hr) = (digests(&tmp.path().join("w1")), digests(&tmp.path().join("w8")), digests(&tmp.path().join("resumed")));
    let elapsed = t0.elapsed();
    let pass = one.n_ok == 20
        && eight.n_ok == 20
        && partial.n_pending == 13
        && resumed.n_resumed == 7
        && h1 == h8
        && h1 == hr
        && elapsed < Duration::from_secs(300);
    report(
        "P8",
        pass,
        elapsed,
        format!(
            "{} ok songs, {} artifacts; workers 1 vs 8 identical: {}; interrupted after 7 then resumed ({} reused) identical: {}",
            one.n_ok,
            h1.len(),
            h1 == h8,
            resumed.n_resumed,
            h1 == hr
        ),
    );
}

fn random_distribution(rng: &mut SplitMix64, kind: Kind) -> Distribution {
    let n = kind.grid().n;
    // Sparse supports exercise zero bins on one or both sides.
    let keep = 0.05 + 0.95 * rng.next_f64();
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.next_f64() < keep { -rng.next_f64().ln() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    Distribution::new(kind, raw.iter().map(|v| v / total).collect()).unwrap()
}

#[test]
fn p9_divergence_properties() {
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(0x99);
    let mut worst_identity = 0.0f64;
    let mut worst_symmetry = 0.0f64;
    let mut in_range = true;
    for i in 0..1000 {
        let kind = if i % 2 == 0 { Kind::Melody } else { Kind::Rhythm };
        let p = random_distribution(&mut rng, kind);
        let q = random_distribution(&mut rng, kind);
        let pq = stats::jsd(&p, &q).unwrap();
        let qp = stats::jsd(&q, &p).unwrap();
        worst_identity = worst_identity.max(stats::jsd(&p, &p).unwrap().abs());
        worst_symmetry = worst_symmetry.max((pq - qp).abs());
        in_range &= (-1e-9..=1.0 + 1e-9).contains(&pq);
    }
    let n = Kind::Rhythm.grid().n;
    let half = |lo: usize, hi: usize| {
        let probs: Vec<f64> = (0..n).map(|i| if (lo..hi).contains(&i) { 1.0 / (hi - lo) as f64 } else { 0.0 }).collect();
        Distribution::new(Kind::Rhythm, probs).unwrap()
    };
    let disjoint = stats::jsd(&half(200, 400), &half(600, 800)).unwrap();
    let elapsed = t0.elapsed();
    let pass = worst_identity <= 1e-9 && worst_symmetry <= 1e-9 && in_range && disjoint == 1.0;
    report(
        "P9",
        pass,
        elapsed,
        format!("identity {worst_identity:.1e}, symmetry {worst_symmetry:.1e}, range ok {in_range}, disjoint {disjoint}"),
    );
}

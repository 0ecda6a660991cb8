//! Batch extraction over a manifest, with a resumable journal.
//!
//! Output layout under `out_dir`:
//!
//! - `densities/<song_id>.{melody,rhythm}.mrd`
//! - `records.csv`, one row per song sorted by `song_id`
//! - `journal.jsonl`, append-only records with per-stage timings
//! - `debug/` when dumps are requested

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, HOP, WINDOW_SIZE};
use crate::corpus::{load_manifest, SongMeta};
use crate::density::{Density, Kind};
use crate::error::{Error, Result};
use crate::melody;
use crate::onsets::{self, OnsetConfig, OnsetList};
use crate::pitch::{self, PitchConfig, PitchTrack};
use crate::rhythm;
use crate::separation::{self, HpssConfig, StemPair};
use crate::stats::{group_means, CountryProfile, Distribution, SongDistribution};

pub const RECORDS_FILE: &str = "records.csv";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const DENSITY_DIR: &str = "densities";
pub const DEBUG_DIR: &str = "debug";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StemsMode {
    Hpss,
    External(PathBuf),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DumpFlags {
    pub pitch: bool,
    pub onsets: bool,
    pub stems: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalysisConfig {
    pub pitch: PitchConfig,
    pub hpss: HpssConfig,
    pub onsets: OnsetConfig,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub stems: StemsMode,
    pub workers: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dumps: DumpFlags,
    pub analysis: AnalysisConfig,
    /// Reuse journaled results; when false the journal and densities are
    /// cleared first.
    pub resume: bool,
    /// Stop after this many newly processed songs.
    pub max_songs: Option<usize>,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            stems: StemsMode::Hpss,
            workers: 1,
            seed: 0,
            out_dir: out_dir.into(),
            dumps: DumpFlags::default(),
            analysis: AnalysisConfig::default(),
            resume: true,
            max_songs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Ok,
    Skipped(String),
    Error(String),
}

impl Status {
    pub fn is_ok(&self) -> bool {
        matches!(self, Status::Ok)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Ok => write!(f, "ok"),
            Status::Skipped(r) => write!(f, "skipped:{r}"),
            Status::Error(r) => write!(f, "error:{r}"),
        }
    }
}

impl FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ok" {
            return Ok(Status::Ok);
        }
        match s.split_once(':') {
            Some(("skipped", r)) => Ok(Status::Skipped(r.to_string())),
            Some(("error", r)) => Ok(Status::Error(r.to_string())),
            _ => Err(Error::InvalidValue(format!("unknown status {s:?}"))),
        }
    }
}

impl Serialize for Status {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Status {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub song_id: String,
    pub country: String,
    pub region: String,
    pub status: Status,
    /// Paths relative to the output directory; empty unless ok.
    pub melody_path: String,
    pub rhythm_path: String,
    /// Milliseconds per stage. Kept in the journal only.
    #[serde(default)]
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionSummary {
    pub records: Vec<ExtractionRecord>,
    pub n_ok: usize,
    pub n_skipped: usize,
    pub n_error: usize,
    pub n_resumed: usize,
    /// Songs left unprocessed because of `max_songs`.
    pub n_pending: usize,
}

/// Everything computed for one song.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub stems: StemPair,
    pub track: PitchTrack,
    pub onsets: OnsetList,
    pub melody: Density,
    pub rhythm: Density,
}

struct Timer(BTreeMap<String, f64>, Instant);

impl Timer {
    fn new() -> Self {
        Self(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.0.insert(stage.to_string(), (now - self.1).as_secs_f64() * 1e3);
        self.1 = now;
    }
}

fn analyze_timed(clip: &AudioClip, external: Option<StemPair>, config: &AnalysisConfig, timer: &mut Timer) -> Result<Analysis> {
    let stems = match external {
        Some(s) => s,
        None => {
            let spec = audio::stft(clip, WINDOW_SIZE, HOP)?;
            separation::hpss(&spec, clip, &config.hpss)?
        }
    };
    timer.lap("separate");
    let track = pitch::track_pitch(&stems.vocal_like, &config.pitch)?;
    timer.lap("pitch");
    let melody = melody::melodic_density(&melody::intervals(&track))?;
    timer.lap("melody");
    let onsets = onsets::detect_onsets(&stems.percussive, &config.onsets)?;
    timer.lap("onsets");
    let rhythm = rhythm::rhythmic_density(&rhythm::ratios(&onsets)?)?;
    timer.lap("rhythm");
    Ok(Analysis {
        stems,
        track,
        onsets,
        melody,
        rhythm,
    })
}

/// Separation, pitch, onsets and both densities for an already clipped
/// song. `external` replaces HPSS when given.
pub fn analyze(clip: &AudioClip, external: Option<StemPair>, config: &AnalysisConfig) -> Result<Analysis> {
    analyze_timed(clip, external, config, &mut Timer::new())
}

/// Errors that mean "not enough material" rather than a broken input.
fn is_skip(e: &Error) -> bool {
    matches!(
        e,
        Error::InsufficientVoiced { .. } | Error::InsufficientOnsets { .. } | Error::InsufficientRatios { .. }
    )
}

fn clip_stems(stems: StemPair, seed: u64, song_id: &str) -> StemPair {
    StemPair {
        vocal_like: audio::select_clip(&stems.vocal_like, seed, song_id),
        percussive: audio::select_clip(&stems.percussive, seed, song_id),
        method: stems.method,
    }
}

pub fn density_path(song_id: &str, kind: Kind) -> String {
    format!("{DENSITY_DIR}/{song_id}.{}.mrd", kind.name())
}

/// Writes to a temporary sibling, fsyncs and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn dump(config: &RunConfig, song_id: &str, a: &Analysis) -> Result<()> {
    let dir = config.out_dir.join(DEBUG_DIR);
    if config.dumps.pitch {
        let p = dir.join(format!("{song_id}.pitch.csv"));
        fs::write(&p, a.track.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    if config.dumps.onsets {
        let p = dir.join(format!("{song_id}.onsets.csv"));
        fs::write(&p, a.onsets.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    if config.dumps.stems {
        audio::write_wav(dir.join(format!("{song_id}.vocals.wav")), &a.stems.vocal_like)?;
        audio::write_wav(dir.join(format!("{song_id}.drums.wav")), &a.stems.percussive)?;
    }
    Ok(())
}

fn process_song(meta: &SongMeta, base: &Path, config: &RunConfig) -> Result<ExtractionRecord> {
    let mut timer = Timer::new();
    let mut record = ExtractionRecord {
        song_id: meta.song_id.clone(),
        country: meta.country.clone(),
        region: meta.region.clone(),
        status: Status::Ok,
        melody_path: String::new(),
        rhythm_path: String::new(),
        timings_ms: BTreeMap::new(),
    };
    let audio_path = base.join(&meta.audio_path);
    let result = audio::decode(&audio_path).and_then(|clip| {
        let clip = audio::select_clip(&clip, config.seed, &meta.song_id);
        let external = match &config.stems {
            StemsMode::Hpss => None,
            StemsMode::External(dir) => Some(clip_stems(
                separation::load_external_stems(&meta.song_id, dir)?,
                config.seed,
                &meta.song_id,
            )),
        };
        timer.lap("decode");
        analyze_timed(&clip, external, &config.analysis, &mut timer)
    });
    match result {
        Ok(a) => {
            for (kind, d) in [(Kind::Melody, &a.melody), (Kind::Rhythm, &a.rhythm)] {
                let rel = density_path(&meta.song_id, kind);
                write_atomic(&config.out_dir.join(&rel), &d.to_bytes())?;
                match kind {
                    Kind::Melody => record.melody_path = rel,
                    Kind::Rhythm => record.rhythm_path = rel,
                }
            }
            dump(config, &meta.song_id, &a)?;
            timer.lap("write");
        }
        Err(e) if is_skip(&e) => record.status = Status::Skipped(e.to_string()),
        Err(e) => record.status = Status::Error(e.to_string()),
    }
    record.timings_ms = timer.0;
    Ok(record)
}

/// Journaled ok records whose density files are still present.
fn read_journal(path: &Path, out_dir: &Path) -> Result<HashMap<String, ExtractionRecord>> {
    let mut done = HashMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ExtractionRecord>(&line) {
            Ok(r) if r.status.is_ok() => {
                if out_dir.join(&r.melody_path).is_file() && out_dir.join(&r.rhythm_path).is_file() {
                    done.insert(r.song_id.clone(), r);
                }
            }
            Ok(_) => {}
            // A torn final line from an interrupted run.
            Err(e) => warn!("ignoring journal line {}: {e}", i + 1),
        }
    }
    Ok(done)
}

pub fn write_records(path: &Path, records: &[ExtractionRecord]) -> Result<()> {
    let mut sorted: Vec<&ExtractionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.song_id.cmp(&b.song_id));
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["song_id", "country", "region", "status", "melody_path", "rhythm_path"])
        .map_err(csv_err)?;
    for r in sorted {
        let status = r.status.to_string();
        w.write_record([&r.song_id, &r.country, &r.region, &status, &r.melody_path, &r.rhythm_path])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_records(path: &Path) -> Result<Vec<ExtractionRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        out.push(ExtractionRecord {
            song_id: field(0),
            country: field(1),
            region: field(2),
            status: field(3).parse()?,
            melody_path: field(4),
            rhythm_path: field(5),
            timings_ms: BTreeMap::new(),
        });
    }
    Ok(out)
}

/// Runs extraction for every manifest song. Song-level failures become
/// records; only output errors abort the run.
pub fn extract_all(config: &RunConfig) -> Result<ExtractionSummary> {
    if config.workers == 0 {
        return Err(Error::InvalidArgument("workers must be at least 1".into()));
    }
    let manifest = load_manifest(&config.manifest)?;
    let base = config
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = &config.out_dir;
    let journal_path = out.join(JOURNAL_FILE);
    if !config.resume {
        for p in [journal_path.clone(), out.join(RECORDS_FILE)] {
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let d = out.join(DENSITY_DIR);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    for d in [out.join(DENSITY_DIR), out.join(DEBUG_DIR)] {
        if d.ends_with(DEBUG_DIR) && config.dumps == DumpFlags::default() {
            continue;
        }
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let done = read_journal(&journal_path, out)?;
    let journal = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(|e| Error::io(&journal_path, e))?,
    );

    let todo: Vec<&SongMeta> = manifest
        .songs
        .iter()
        .filter(|s| !done.contains_key(&s.song_id))
        .collect();
    let budget = config.max_songs.unwrap_or(usize::MAX).min(todo.len());
    info!(
        "extracting {} of {} songs ({} resumed) with {} workers",
        budget,
        manifest.songs.len(),
        manifest.songs.len() - todo.len(),
        config.workers
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let finished = AtomicUsize::new(0);
    let fresh: Vec<ExtractionRecord> = pool.install(|| {
        todo[..budget]
            .par_iter()
            .map(|meta| -> Result<ExtractionRecord> {
                let record = process_song(meta, &base, config)?;
                let line = serde_json::to_string(&record)?;
                {
                    let mut j = journal.lock().unwrap_or_else(|p| p.into_inner());
                    writeln!(j, "{line}").map_err(|e| Error::io(&journal_path, e))?;
                    j.sync_data().map_err(|e| Error::io(&journal_path, e))?;
                }
                let n = finished.fetch_add(1, Ordering::Relaxed) + 1;
                debug!("[{n}/{budget}] {} {}", record.song_id, record.status);
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut records: Vec<ExtractionRecord> = done.into_values().collect();
    let n_resumed = records.len();
    records.extend(fresh);
    records.sort_by(|a, b| a.song_id.cmp(&b.song_id));
    write_records(&out.join(RECORDS_FILE), &records)?;
    let count = |f: fn(&Status) -> bool| records.iter().filter(|r| f(&r.status)).count();
    let summary = ExtractionSummary {
        n_ok: count(Status::is_ok),
        n_skipped: count(|s| matches!(s, Status::Skipped(_))),
        n_error: count(|s| matches!(s, Status::Error(_))),
        n_resumed,
        n_pending: todo.len() - budget,
        records,
    };
    info!(
        "done: {} ok, {} skipped, {} errors, {} pending",
        summary.n_ok, summary.n_skipped, summary.n_error, summary.n_pending
    );
    Ok(summary)
}

/// Per-song distributions of one kind from an extraction directory.
pub fn load_song_distributions(dir: &Path, kind: Kind) -> Result<Vec<SongDistribution>> {
    let records = read_records(&dir.join(RECORDS_FILE))?;
    let mut out = Vec::new();
    for r in records.into_iter().filter(|r| r.status.is_ok()) {
        let rel = match kind {
            Kind::Melody => &r.melody_path,
            Kind::Rhythm => &r.rhythm_path,
        };
        let d = Density::read(dir.join(rel))?;
        if d.kind != kind {
            return Err(Error::GridMismatch(format!("{rel} holds a {} density", d.kind)));
        }
        out.push(SongDistribution {
            song_id: r.song_id,
            country: r.country,
            region: r.region,
            dist: Distribution::from_density(&d),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    All,
    Country,
    Region,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(GroupBy::All),
            "country" => Ok(GroupBy::Country),
            "region" => Ok(GroupBy::Region),
            _ => Err(Error::InvalidArgument(format!("unknown grouping {s:?}"))),
        }
    }
}

/// Uniform mean distribution per group, groups in sorted order.
pub fn aggregate(songs: &[SongDistribution], by: GroupBy) -> Result<Vec<CountryProfile>> {
    if songs.is_empty() {
        return Err(Error::InsufficientData("no densities to aggregate".into()));
    }
    group_means(songs, |s| match by {
        GroupBy::All => "all".to_string(),
        GroupBy::Country => s.country.clone(),
        GroupBy::Region => s.region.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_round_trip() {
        for s in [Status::Ok, Status::Skipped("insufficient onsets: 2".into()), Status::Error("x:y".into())] {
            assert_eq!(s.to_string().parse::<Status>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<Status>(&json).unwrap(), s);
        }
        assert!("done".parse::<Status>().is_err());
    }

    #[test]
    fn group_by_parsing() {
        assert_eq!("region".parse::<GroupBy>().unwrap(), GroupBy::Region);
        assert!("planet".parse::<GroupBy>().is_err());
    }

    #[test]
    fn aggregate_single_and_identical() {
        let mut p = vec![0.0; 1001];
        p[400] = 0.25;
        p[600] = 0.75;
        let dist = Distribution::new(Kind::Rhythm, p).unwrap();
        let song = |id: &str, c: &str| SongDistribution {
            song_id: id.into(),
            country: c.into(),
            region: "R".into(),
            dist: dist.clone(),
        };
        let one = aggregate(&[song("a", "A")], GroupBy::All).unwrap();
        assert_eq!(one[0].mean, dist);
        let two = aggregate(&[song("a", "A"), song("b", "B")], GroupBy::Region).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].mean, dist);
        assert_eq!(two[0].n_songs, 2);
        assert!(aggregate(&[], GroupBy::All).is_err());
    }

    #[test]
    fn records_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |id: &str, status: Status| ExtractionRecord {
            song_id: id.into(),
            country: "AA".into(),
            region: "North".into(),
            melody_path: if status.is_ok() { density_path(id, Kind::Melody) } else { String::new() },
            rhythm_path: if status.is_ok() { density_path(id, Kind::Rhythm) } else { String::new() },
            status,
            timings_ms: BTreeMap::new(),
        };
        let records = vec![rec("b", Status::Error("silent input".into())), rec("a", Status::Ok)];
        let path = dir.path().join("records.csv");
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back[0], records[1]);
        assert_eq!(back[1], records[0]);
    }
}

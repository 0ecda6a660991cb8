//! Corpus metadata, sampling rules and demographic side tables.
//!
//! The manifest CSV has the header
//! `song_id,country,region,audio_path,chart_countries`, where
//! `chart_countries` is a `;`-separated list of ISO alpha-2 codes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Songs retained per country after capping.
pub const MAX_SONGS_PER_COUNTRY: usize = 1500;
/// Countries with fewer retained songs are dropped.
pub const MIN_SONGS_PER_COUNTRY: usize = 50;

pub const MANIFEST_COLUMNS: [&str; 5] =
    ["song_id", "country", "region", "audio_path", "chart_countries"];
pub const DEMOGRAPHIC_COLUMNS: [&str; 5] =
    ["country", "ethnic", "linguistic", "religious", "genetic"];
pub const DISTANCE_COLUMNS: [&str; 3] = ["country_a", "country_b", "distance"];

const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SongMeta {
    pub song_id: String,
    pub country: String,
    pub region: String,
    pub audio_path: PathBuf,
    pub chart_countries: BTreeSet<String>,
}

impl SongMeta {
    /// True when the song charted in exactly one country.
    pub fn is_exclusive(&self) -> bool {
        self.chart_countries.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub songs: Vec<SongMeta>,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn countries(&self) -> BTreeSet<&str> {
        self.songs.iter().map(|s| s.country.as_str()).collect()
    }

    pub fn counts_by_country(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.songs {
            *counts.entry(s.country.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn get(&self, song_id: &str) -> Option<&SongMeta> {
        self.songs.iter().find(|s| s.song_id == song_id)
    }
}

fn check_header(path: &Path, header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for name in header.iter() {
        if !expected.contains(&name) {
            return Err(Error::UnknownColumn(name.to_string()));
        }
    }
    for name in expected {
        if !header.iter().any(|h| h == *name) {
            return Err(Error::parse(path, format!("missing column `{name}`")));
        }
    }
    Ok(())
}

fn column(header: &csv::StringRecord, name: &str) -> usize {
    header.iter().position(|h| h == name).expect("header checked")
}

fn open_csv(path: &Path) -> Result<(csv::Reader<File>, csv::StringRecord)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if file.metadata().map_err(|e| Error::io(path, e))?.len() == 0 {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    Ok((reader, header))
}

/// Parses a manifest CSV. Malformed rows are errors, never skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let (mut reader, header) = open_csv(path)?;
    check_header(path, &header, &MANIFEST_COLUMNS)?;
    let [id_col, country_col, region_col, audio_col, charts_col] =
        MANIFEST_COLUMNS.map(|c| column(&header, c));

    let mut songs = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let song_id = field(id_col);
        let country = field(country_col);
        if song_id.is_empty() || country.is_empty() {
            return Err(Error::parse(
                path,
                format!("row {}: empty song_id or country", line + 2),
            ));
        }
        if !seen.insert(song_id.clone()) {
            return Err(Error::DuplicateSong(song_id));
        }
        let chart_countries: BTreeSet<String> = field(charts_col)
            .split(';')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        if !chart_countries.contains(&country) {
            return Err(Error::parse(
                path,
                format!("row {}: country {country} not among chart_countries", line + 2),
            ));
        }
        songs.push(SongMeta {
            song_id,
            country,
            region: field(region_col),
            audio_path: PathBuf::from(field(audio_col)),
            chart_countries,
        });
    }
    if songs.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(CorpusManifest { songs, seed: 0 })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &CorpusManifest) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    for s in &manifest.songs {
        let charts = s
            .chart_countries
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            s.song_id.as_str(),
            s.country.as_str(),
            s.region.as_str(),
            &s.audio_path.to_string_lossy(),
            &charts,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps country-exclusive songs, caps each country at
/// [`MAX_SONGS_PER_COUNTRY`] by seeded sampling without replacement and
/// drops countries below [`MIN_SONGS_PER_COUNTRY`].
///
/// Each country samples from its own stream `stream_seed(seed, country)`
/// over its songs ordered by `song_id`, so the result does not depend on
/// manifest row order. Retained songs keep their manifest order.
pub fn apply_sampling(manifest: &CorpusManifest) -> Result<CorpusManifest> {
    let mut by_country: BTreeMap<&str, Vec<&SongMeta>> = BTreeMap::new();
    for song in manifest.songs.iter().filter(|s| s.is_exclusive()) {
        by_country.entry(song.country.as_str()).or_default().push(song);
    }

    let mut keep: HashSet<&str> = HashSet::new();
    for (country, mut songs) in by_country {
        if songs.len() > MAX_SONGS_PER_COUNTRY {
            songs.sort_by(|a, b| a.song_id.cmp(&b.song_id));
            let mut rng = SplitMix64::for_stream(manifest.seed, country);
            let picked = rng.sample_indices(songs.len(), MAX_SONGS_PER_COUNTRY);
            songs = picked.into_iter().map(|i| songs[i]).collect();
        }
        if songs.len() < MIN_SONGS_PER_COUNTRY {
            log::info!("dropping {country}: {} songs", songs.len());
            continue;
        }
        keep.extend(songs.iter().map(|s| s.song_id.as_str()));
    }
    if keep.is_empty() {
        return Err(Error::EmptySample);
    }

    let songs = manifest
        .songs
        .iter()
        .filter(|s| keep.contains(s.song_id.as_str()))
        .cloned()
        .collect();
    Ok(CorpusManifest {
        songs,
        seed: manifest.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Demographics {
    pub ethnic: Option<f64>,
    pub linguistic: Option<f64>,
    pub religious: Option<f64>,
    pub genetic: Option<f64>,
}

/// The four demographic covariates, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Ethnic,
    Linguistic,
    Religious,
    Genetic,
}

impl Factor {
    pub const ALL: [Factor; 4] = [
        Factor::Ethnic,
        Factor::Linguistic,
        Factor::Religious,
        Factor::Genetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Ethnic => "ethnic",
            Factor::Linguistic => "linguistic",
            Factor::Religious => "religious",
            Factor::Genetic => "genetic",
        }
    }
}

impl Demographics {
    pub fn get(&self, factor: Factor) -> Option<f64> {
        match factor {
            Factor::Ethnic => self.ethnic,
            Factor::Linguistic => self.linguistic,
            Factor::Religious => self.religious,
            Factor::Genetic => self.genetic,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemographicTable {
    pub rows: BTreeMap<String, Demographics>,
}

impl DemographicTable {
    pub fn get(&self, country: &str) -> Option<&Demographics> {
        self.rows.get(country)
    }

    /// Countries in the table that the manifest does not contain. They are
    /// kept, only reported.
    pub fn flagged(&self, manifest: &CorpusManifest) -> Vec<String> {
        let known = manifest.countries();
        self.rows
            .keys()
            .filter(|c| !known.contains(c.as_str()))
            .cloned()
            .collect()
    }
}

fn parse_optional(path: &Path, raw: &str, what: &str, country: &str) -> Result<Option<f64>> {
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::parse(path, format!("{country}: bad {what} value `{raw}`")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidValue(format!(
            "{country}: {what} = {v} outside [0, 1]"
        )));
    }
    Ok(Some(v))
}

/// Reads `country,ethnic,linguistic,religious,genetic`. Empty cells (or
/// `NA`) are absent values, never zero.
pub fn load_demographics(path: impl AsRef<Path>) -> Result<DemographicTable> {
    let path = path.as_ref();
    let (mut reader, header) = open_csv(path)?;
    for name in header.iter() {
        if !DEMOGRAPHIC_COLUMNS.contains(&name) {
            return Err(Error::UnknownColumn(name.to_string()));
        }
    }
    if !header.iter().any(|h| h == "country") {
        return Err(Error::parse(path, "missing column `country`"));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let country_col = col("country").expect("checked");
    let cols = Factor::ALL.map(|f| col(f.name()));

    let mut table = DemographicTable::default();
    for row in reader.records() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        let country = row.get(country_col).unwrap_or("").to_string();
        if country.is_empty() {
            return Err(Error::parse(path, "empty country"));
        }
        let mut values = [None; 4];
        for (slot, (factor, c)) in values.iter_mut().zip(Factor::ALL.iter().zip(cols)) {
            if let Some(c) = c {
                *slot = parse_optional(path, row.get(c).unwrap_or(""), factor.name(), &country)?;
            }
        }
        let [ethnic, linguistic, religious, genetic] = values;
        if table
            .rows
            .insert(
                country.clone(),
                Demographics {
                    ethnic,
                    linguistic,
                    religious,
                    genetic,
                },
            )
            .is_some()
        {
            return Err(Error::parse(path, format!("duplicate country {country}")));
        }
    }
    if table.rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(table)
}

/// Symmetric country-pair distances with an implicit zero diagonal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistanceTable {
    entries: BTreeMap<(String, String), f64>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl DistanceTable {
    /// Inserts `d(a, b) = d(b, a) = distance`, rejecting conflicting
    /// entries and non-zero self-distances.
    pub fn insert(&mut self, a: &str, b: &str, distance: f64) -> Result<()> {
        if !distance.is_finite() || distance < 0.0 {
            return Err(Error::InvalidValue(format!(
                "distance({a}, {b}) = {distance} is not a nonnegative number"
            )));
        }
        if a == b {
            if distance != 0.0 {
                return Err(Error::InvalidValue(format!(
                    "distance({a}, {a}) = {distance}, diagonal must be 0"
                )));
            }
            return Ok(());
        }
        let key = ordered(a, b);
        if let Some(&prev) = self.entries.get(&key) {
            if (prev - distance).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::InvalidValue(format!(
                    "asymmetric distance: ({a}, {b}) = {distance} vs {prev}"
                )));
            }
            return Ok(());
        }
        self.entries.insert(key, distance);
        Ok(())
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return Some(0.0);
        }
        self.entries.get(&ordered(a, b)).copied()
    }

    pub fn countries(&self) -> BTreeSet<&str> {
        self.entries
            .keys()
            .flat_map(|(a, b)| [a.as_str(), b.as_str()])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads `country_a,country_b,distance`.
pub fn load_distances(path: impl AsRef<Path>) -> Result<DistanceTable> {
    let path = path.as_ref();
    let (mut reader, header) = open_csv(path)?;
    check_header(path, &header, &DISTANCE_COLUMNS)?;
    let [a_col, b_col, d_col] = DISTANCE_COLUMNS.map(|c| column(&header, c));
    let mut table = DistanceTable::default();
    for row in reader.records() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        let a = row.get(a_col).unwrap_or("");
        let b = row.get(b_col).unwrap_or("");
        let raw = row.get(d_col).unwrap_or("");
        let d: f64 = raw
            .parse()
            .map_err(|_| Error::parse(path, format!("bad distance `{raw}` for ({a}, {b})")))?;
        table.insert(a, b, d)?;
    }
    if table.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(table)
}

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use melrhy::corpus::{self, Factor};
use melrhy::density::{Density, Kind};
use melrhy::pipeline::{self, DumpFlags, GroupBy, RunConfig, StemsMode};
use melrhy::plot::{self, Bar, ScatterPoint};
use melrhy::stats::{self, CorrMethod, CorrOptions, CorrResult, PairMatrix, PermResult, RegionContrast, SongDistribution};
use melrhy::synth::{self, CorpusSpec, CountrySynth, SynthSpec};

use crate::{ByArg, Cli, Command, CorpusCommand};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Bad flags or unusable inputs; exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config<T, E: fmt::Display>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| ConfigError(e.to_string()).into())
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = match cli.workers {
        Some(0) => return Err(config_err("--workers must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // Stats commands parallelize on the global pool.
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().ok();
    let ctx = Ctx { seed: cli.seed, workers, out: cli.out };

    match cli.command {
        Command::Corpus(CorpusCommand::Sample { manifest }) => corpus_sample(&ctx, &manifest),
        Command::Corpus(CorpusCommand::Check { manifest, demographics, lingdist }) => {
            corpus_check(&manifest, demographics.as_deref(), lingdist.as_deref())
        }
        Command::Synth(a) => synth_cmd(&ctx, &a.spec, a.n),
        Command::Extract(a) => extract(&ctx, a),
        Command::Aggregate(a) => aggregate(&ctx, &a.densities, a.by, a.kind.kinds()),
        Command::Divergence(a) => divergence(&ctx, &a.densities, a.by, a.kind.kinds()),
        Command::Permtest(a) => permtest(&ctx, &a),
        Command::Diversity(a) => diversity(&ctx, &a.densities),
        Command::Correlate(a) => correlate(&ctx, &a),
        Command::PlotData(a) => plot_data(&ctx, &a.densities, a.diversity.as_deref(), a.corr.as_deref()),
    }
}

struct Ctx {
    seed: u64,
    workers: usize,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| config_err("--out is required"))
    }

    /// `--out` as a file whose parent directory is created.
    fn out_file(&self) -> Result<&Path> {
        let p = self.out()?;
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(p)
    }

    fn out_dir(&self) -> Result<&Path> {
        let p = self.out()?;
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn load_songs(dir: &Path, kind: Kind) -> Result<Vec<SongDistribution>> {
    let songs = config(pipeline::load_song_distributions(dir, kind))
        .with_context(|| format!("loading {kind} densities from {}", dir.display()))?;
    if songs.is_empty() {
        return Err(config_err(format!("no ok songs in {}", dir.display())));
    }
    Ok(songs)
}

fn group_by(by: ByArg) -> GroupBy {
    match by {
        ByArg::All => GroupBy::All,
        ByArg::Country => GroupBy::Country,
        ByArg::Region => GroupBy::Region,
    }
}

fn by_name(by: ByArg) -> &'static str {
    match by {
        ByArg::All => "all",
        ByArg::Country => "country",
        ByArg::Region => "region",
    }
}

fn corpus_sample(ctx: &Ctx, manifest: &Path) -> Result<()> {
    let m = config(corpus::load_manifest(manifest))?.with_seed(ctx.seed);
    let sampled = config(corpus::apply_sampling(&m))?;
    let out = ctx.out_file()?;
    corpus::write_manifest(out, &sampled)?;
    log::info!(
        "kept {} of {} songs in {} countries",
        sampled.songs.len(),
        m.songs.len(),
        sampled.countries().len()
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckReport<'a> {
    version: &'static str,
    n_songs: usize,
    songs_per_country: BTreeMap<&'a str, usize>,
    flagged_demographics: Vec<String>,
    lingdist_pairs: Option<usize>,
}

fn corpus_check(manifest: &Path, demographics: Option<&Path>, lingdist: Option<&Path>) -> Result<()> {
    let m = config(corpus::load_manifest(manifest))?;
    let flagged = match demographics {
        Some(p) => config(corpus::load_demographics(p))?.flagged(&m),
        None => Vec::new(),
    };
    for c in &flagged {
        log::warn!("demographics row {c} has no songs in the manifest");
    }
    let lingdist_pairs = match lingdist {
        Some(p) => Some(config(corpus::load_distances(p))?.len()),
        None => None,
    };
    let report = CheckReport {
        version: VERSION,
        n_songs: m.songs.len(),
        songs_per_country: m.counts_by_country(),
        flagged_demographics: flagged,
        lingdist_pairs,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn synth_cmd(ctx: &Ctx, spec_path: &Path, n: usize) -> Result<()> {
    let text = config(fs::read_to_string(spec_path)).with_context(|| format!("reading {}", spec_path.display()))?;
    let value: serde_json::Value = config(serde_json::from_str(&text))?;
    let spec = if value.get("countries").is_some() {
        config(serde_json::from_value::<CorpusSpec>(value))?
    } else {
        let song: SynthSpec = config(serde_json::from_value(value))?;
        CorpusSpec {
            seed: ctx.seed,
            n_per_country: n,
            countries: BTreeMap::from([(
                "SYN".to_string(),
                CountrySynth { region: "synthetic".into(), spec: song },
            )]),
        }
    };
    for c in spec.countries.values() {
        config(c.spec.validate())?;
    }
    let out = ctx.out_dir()?;
    let manifest = synth::synth_corpus(&spec, out)?;
    log::info!("wrote {} songs to {}", manifest.songs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ExtractReport {
    version: &'static str,
    seed: u64,
    workers: usize,
    n_ok: usize,
    n_skipped: usize,
    n_error: usize,
    n_resumed: usize,
    n_pending: usize,
}

fn extract(ctx: &Ctx, a: crate::ExtractArgs) -> Result<()> {
    if !a.manifest.is_file() {
        return Err(config_err(format!("manifest {} not found", a.manifest.display())));
    }
    let mut cfg = RunConfig::new(&a.manifest, ctx.out_dir()?);
    if let Some(dir) = a.stems_dir {
        if !dir.is_dir() {
            return Err(config_err(format!("stems dir {} not found", dir.display())));
        }
        cfg.stems = StemsMode::External(dir);
    }
    cfg.workers = ctx.workers;
    cfg.seed = ctx.seed;
    cfg.dumps = DumpFlags { pitch: a.dump_pitch, onsets: a.dump_onsets, stems: a.dump_stems };
    cfg.resume = !a.fresh;
    cfg.max_songs = a.max_songs;
    let s = pipeline::extract_all(&cfg).map_err(|e| match e {
        melrhy::Error::Parse { .. }
        | melrhy::Error::UnknownColumn(_)
        | melrhy::Error::DuplicateSong(_)
        | melrhy::Error::EmptyFile(_)
        | melrhy::Error::InvalidArgument(_) => config_err(e.to_string()),
        other => other.into(),
    })?;
    let report = ExtractReport {
        version: VERSION,
        seed: ctx.seed,
        workers: ctx.workers,
        n_ok: s.n_ok,
        n_skipped: s.n_skipped,
        n_error: s.n_error,
        n_resumed: s.n_resumed,
        n_pending: s.n_pending,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct GroupRow<'a> {
    kind: &'a str,
    group: &'a str,
    n_songs: usize,
    mrd: String,
    csv: String,
}

fn aggregate(ctx: &Ctx, dir: &Path, by: ByArg, kinds: Vec<Kind>) -> Result<()> {
    let out = ctx.out_dir()?;
    let mut index = csv::Writer::from_path(out.join("groups.csv"))?;
    for kind in kinds {
        let songs = load_songs(dir, kind)?;
        for p in pipeline::aggregate(&songs, group_by(by))? {
            let stem = format!("{}.{}.{}", kind.name(), by_name(by), p.country);
            let d = p.mean.to_density();
            d.write(out.join(format!("{stem}.mrd")))?;
            write(&out.join(format!("{stem}.csv")), d.to_csv())?;
            index.serialize(GroupRow {
                kind: kind.name(),
                group: &p.country,
                n_songs: p.n_songs,
                mrd: format!("{stem}.mrd"),
                csv: format!("{stem}.csv"),
            })?;
        }
    }
    index.flush()?;
    Ok(())
}

fn group_matrix(songs: &[SongDistribution], by: ByArg) -> Result<PairMatrix> {
    let profiles = pipeline::aggregate(songs, group_by(by))?;
    Ok(stats::country_pairwise_jsd(&profiles)?)
}

fn divergence(ctx: &Ctx, dir: &Path, by: ByArg, kinds: Vec<Kind>) -> Result<()> {
    if by == ByArg::All {
        return Err(config_err("divergence needs --by country or --by region"));
    }
    let out = ctx.out_file()?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["kind", "a", "b", "jsd"])?;
    for kind in kinds {
        let m = group_matrix(&load_songs(dir, kind)?, by)?;
        for (i, j, v) in m.upper() {
            w.write_record([kind.name(), &m.labels[i], &m.labels[j], &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn country_regions(songs: &[SongDistribution]) -> BTreeMap<String, String> {
    songs.iter().map(|s| (s.country.clone(), s.region.clone())).collect()
}

#[derive(Serialize)]
struct PermEntry {
    kind: Kind,
    between_country: PermResult,
    region_contrast: Option<RegionContrast>,
}

#[derive(Serialize)]
struct PermReport {
    version: &'static str,
    seed: u64,
    results: Vec<PermEntry>,
}

fn permtest(ctx: &Ctx, a: &crate::PermtestArgs) -> Result<()> {
    if a.n_perm < stats::MIN_PERMUTATIONS || a.region_perm < stats::MIN_PERMUTATIONS {
        return Err(config_err(format!("permutation counts must be at least {}", stats::MIN_PERMUTATIONS)));
    }
    let out = ctx.out_file()?;
    let mut results = Vec::new();
    for kind in a.kind.kinds() {
        let songs = load_songs(&a.densities, kind)?;
        let between_country = stats::between_country_null(&songs, a.n_perm, ctx.seed, a.n_boot)?;
        let m = group_matrix(&songs, ByArg::Country)?;
        let regions = country_regions(&songs);
        let labels: Vec<String> = m.labels.iter().map(|c| regions[c].clone()).collect();
        let region_contrast = match stats::region_contrast(&m, &labels, a.region_perm, ctx.seed) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("{kind}: no region contrast: {e}");
                None
            }
        };
        log::info!("{kind}: observed {:.5}, z {:.2}, p {:.4}", between_country.observed, between_country.z, between_country.p);
        results.push(PermEntry { kind, between_country, region_contrast });
    }
    write_json(out, &PermReport { version: VERSION, seed: ctx.seed, results })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DiversityRow {
    country: String,
    region: String,
    kind: Kind,
    n_songs: usize,
    raw_median_jsd: f64,
    normalized: f64,
}

fn diversity(ctx: &Ctx, dir: &Path) -> Result<()> {
    let out = ctx.out_file()?;
    let mut w = csv::Writer::from_path(out)?;
    for kind in Kind::ALL {
        let songs = load_songs(dir, kind)?;
        let regions = country_regions(&songs);
        for d in stats::diversity(&songs)? {
            w.serialize(DiversityRow {
                region: regions[&d.country].clone(),
                country: d.country,
                kind: d.kind,
                n_songs: d.n_songs,
                raw_median_jsd: d.raw_median_jsd,
                normalized: d.normalized,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Country → (region, normalized diversity per kind).
type DiversityTable = BTreeMap<String, (String, BTreeMap<Kind, f64>)>;

fn read_diversity(path: &Path) -> Result<DiversityTable> {
    let mut r = config(csv::Reader::from_path(path)).with_context(|| format!("reading {}", path.display()))?;
    let mut table = DiversityTable::new();
    for row in r.deserialize() {
        let row: DiversityRow = config(row).with_context(|| format!("parsing {}", path.display()))?;
        let e = table.entry(row.country).or_insert_with(|| (row.region.clone(), BTreeMap::new()));
        e.1.insert(row.kind, row.normalized);
    }
    if table.is_empty() {
        return Err(config_err(format!("{} has no rows", path.display())));
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrEntry {
    x: String,
    y: String,
    #[serde(flatten)]
    result: CorrResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrReport {
    version: String,
    seed: u64,
    n_countries: usize,
    melody_vs_rhythm: Vec<CorrEntry>,
    demographics: Vec<CorrEntry>,
    linguistic: Vec<CorrEntry>,
}

fn correlate(ctx: &Ctx, a: &crate::CorrelateArgs) -> Result<()> {
    if a.lingdist.is_some() && a.densities.is_none() {
        return Err(config_err("--lingdist needs --densities"));
    }
    let table = read_diversity(&a.diversity)?;
    let opts = CorrOptions { n_boot: a.n_boot, n_perm: a.n_perm, seed: ctx.seed };
    let countries: Vec<&String> = table.keys().collect();
    let column = |kind: Kind| -> Vec<Option<f64>> { table.values().map(|(_, v)| v.get(&kind).copied()).collect() };
    let regions: Vec<String> = table.values().map(|(r, _)| r.clone()).collect();
    let (mel, rhy) = (column(Kind::Melody), column(Kind::Rhythm));
    let entry = |x: &str, y: &str, result: CorrResult| CorrEntry { x: x.into(), y: y.into(), result };

    let melody_vs_rhythm = vec![
        entry("melody", "rhythm", stats::corr(&mel, &rhy, CorrMethod::Pearson, &opts)?),
        entry("melody", "rhythm", stats::partial_region(&mel, &rhy, &regions, &opts)?),
    ];

    let mut demographics = Vec::new();
    if let Some(path) = &a.demographics {
        let demo = config(corpus::load_demographics(path))?;
        for kind in Kind::ALL {
            let div = column(kind);
            for factor in Factor::ALL {
                let f: Vec<Option<f64>> = countries.iter().map(|c| demo.get(c).and_then(|d| d.get(factor))).collect();
                match stats::corr(&div, &f, CorrMethod::Pearson, &opts) {
                    Ok(r) => demographics.push(entry(kind.name(), factor.name(), r)),
                    Err(e @ melrhy::Error::InsufficientData(_)) => {
                        log::warn!("{kind} ~ {}: skipped: {e}", factor.name());
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let adj = stats::bh_adjust(&demographics.iter().map(|e| e.result.p).collect::<Vec<_>>());
        for (e, q) in demographics.iter_mut().zip(adj) {
            e.result.p_adj = Some(q);
        }
    }

    let mut linguistic = Vec::new();
    if let (Some(path), Some(dir)) = (&a.lingdist, &a.densities) {
        let dist = config(corpus::load_distances(path))?;
        for kind in Kind::ALL {
            let m = group_matrix(&load_songs(dir, kind)?, ByArg::Country)?;
            let mut ling = PairMatrix::zeros(m.labels.clone());
            for i in 0..m.len() {
                for j in i + 1..m.len() {
                    ling.set(i, j, dist.get(&m.labels[i], &m.labels[j]).unwrap_or(f64::NAN));
                }
            }
            linguistic.push(entry(kind.name(), "linguistic_distance", stats::mantel_spearman(&m, &ling, &opts)?));
        }
    }

    let report = CorrReport {
        version: VERSION.into(),
        seed: ctx.seed,
        n_countries: table.len(),
        melody_vs_rhythm,
        demographics,
        linguistic,
    };
    write_json(ctx.out_file()?, &report)
}

fn plot_data(ctx: &Ctx, dir: &Path, diversity: Option<&Path>, corr: Option<&Path>) -> Result<()> {
    let out = ctx.out_dir()?;
    for kind in Kind::ALL {
        let songs = load_songs(dir, kind)?;
        let global = pipeline::aggregate(&songs, GroupBy::All)?[0].mean.to_density();
        write(&out.join(format!("{}_global.csv", kind.name())), global.to_csv())?;
        let title = format!("Global {} distribution", kind.name());
        write(&out.join(format!("{}_global.svg", kind.name())), plot::density_svg(&title, &[("all".into(), &global)]))?;

        let by_region: Vec<(String, Density)> = pipeline::aggregate(&songs, GroupBy::Region)?
            .into_iter()
            .map(|p| (p.country, p.mean.to_density()))
            .collect();
        let mut long = String::from("group,grid,density\n");
        for (name, d) in &by_region {
            for line in d.to_csv().lines().skip(1) {
                long.push_str(&format!("{name},{line}\n"));
            }
        }
        write(&out.join(format!("{}_by_region.csv", kind.name())), long)?;
        let series: Vec<(String, &Density)> = by_region.iter().map(|(n, d)| (n.clone(), d)).collect();
        let title = format!("{} distribution by region", kind.name());
        write(&out.join(format!("{}_by_region.svg", kind.name())), plot::density_svg(&title, &series))?;
    }

    if let Some(path) = diversity {
        let table = read_diversity(path)?;
        let mut w = csv::Writer::from_path(out.join("diversity_scatter.csv"))?;
        w.write_record(["country", "region", "melody", "rhythm"])?;
        let mut points = Vec::new();
        for (country, (region, v)) in &table {
            let (Some(&x), Some(&y)) = (v.get(&Kind::Melody), v.get(&Kind::Rhythm)) else { continue };
            w.write_record([country, region, &x.to_string(), &y.to_string()])?;
            points.push(ScatterPoint { label: country.clone(), group: region.clone(), x, y });
        }
        w.flush()?;
        let svg = plot::scatter_svg("Within-country diversity", "melodic diversity", "rhythmic diversity", &points);
        write(&out.join("diversity_scatter.svg"), svg)?;
    }

    if let Some(path) = corr {
        let text = config(fs::read_to_string(path)).with_context(|| format!("reading {}", path.display()))?;
        let report: CorrReport = config(serde_json::from_str(&text)).with_context(|| format!("parsing {}", path.display()))?;
        if report.demographics.is_empty() {
            bail!("{} holds no demographic correlations", path.display());
        }
        let mut w = csv::Writer::from_path(out.join("demographics.csv"))?;
        w.write_record(["kind", "factor", "estimate", "ci_low", "ci_high", "p", "p_adj", "n"])?;
        let mut bars = Vec::new();
        for e in &report.demographics {
            let r = &e.result;
            let p_adj = r.p_adj.map(|q| q.to_string()).unwrap_or_default();
            w.write_record([
                &e.x,
                &e.y,
                &r.estimate.to_string(),
                &r.ci_low.to_string(),
                &r.ci_high.to_string(),
                &r.p.to_string(),
                &p_adj,
                &r.n.to_string(),
            ])?;
            bars.push(Bar { label: format!("{} {}", e.x, e.y), estimate: r.estimate, ci_low: r.ci_low, ci_high: r.ci_high });
        }
        w.flush()?;
        write(&out.join("demographics.svg"), plot::bar_svg("Diversity and demographics", "Pearson r", &bars))?;
    }
    Ok(())
}

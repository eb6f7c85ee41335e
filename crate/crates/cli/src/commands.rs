use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mapseries::analytics::{
    corpus_histograms, emd_strategy_table, kmeans_colors, palette_from_clusters, sample_pixels,
    AnalyticsError, EmdTable,
};
use mapseries::config::{ConfigError, RunConfig};
use mapseries::corpus::{
    build_mm_pairs, build_rm_pairs, corpus_stats, fetch_tiles, materialize_pairs, CorpusError,
    FetchRequest, FsTileReader, Manifest, Split, TileKind, TileReader, MANIFEST_FILE,
};
use mapseries::generators::{load_registry, Palette};
use mapseries::report::{evaluate as evaluate_runs, trend_svg, Report, ReportError};
use mapseries::strategies::{load_run, run_strategy, write_run, Level, StrategyError};
use mapseries::TileImage;

use crate::{Format, GlobalArgs};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<StrategyError> for CliError {
    fn from(e: StrategyError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Fetch { failed, fetched } => {
                let mut msg = format!(
                    "{} tiles failed to download ({} succeeded):",
                    failed.len(),
                    fetched.len()
                );
                for (coord, why) in failed {
                    msg.push_str(&format!("\n  {coord}: {why}"));
                }
                CliError::Runtime(msg)
            }
            CorpusError::Source(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Coverage(gaps) => {
                CliError::Runtime(format!("zoom coverage gaps:\n  {}", gaps.join("\n  ")))
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::Coverage(missing) => {
                CliError::Runtime(format!("missing histograms:\n  {}", missing.join("\n  ")))
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(kind) = g.strategy {
        cfg.strategy.kind = kind;
    }
    if let Some((top, bottom)) = g.zooms {
        cfg.strategy.top_zoom = top;
        cfg.strategy.bottom_zoom = bottom;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest, CliError> {
    cfg.validate_with_corpus()?;
    let path = cfg.corpus.root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "{} not found; run `mapseries ingest` first",
            path.display()
        )));
    }
    Ok(Manifest::read(&path)?)
}

fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn render(report: &Report, format: Format) -> Result<String, CliError> {
    Ok(match format {
        Format::Csv => report.to_csv(),
        Format::Structured => report.to_json(),
        Format::Svg => trend_svg(report)?,
    })
}

pub fn fetch(g: &GlobalArgs) -> CliResult {
    let cfg = load_config(g)?;
    let source = cfg
        .source
        .as_ref()
        .ok_or_else(|| CliError::Config("configuration has no [source] section".into()))?;
    if source.regions.is_empty() {
        return Err(CliError::Config("[source] lists no regions".into()));
    }
    let [lo, hi] = source.zooms;
    if lo > hi {
        return Err(CliError::Config(format!(
            "source zooms [{lo}, {hi}] are reversed"
        )));
    }
    let root = &cfg.corpus.root;
    fs::create_dir_all(root).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.is_file() {
        Manifest::read(&manifest_path)?
    } else {
        Manifest::default()
    };
    let src = source.tile_source();
    let policy = cfg.corpus.split_policy();
    let mut downloaded = 0;
    for r in &source.regions {
        let req = FetchRequest {
            city: r.city.clone(),
            kind: r.kind,
            split: policy.split_for(&r.city),
            region: r.region,
            zooms: lo..=hi,
        };
        let out = fetch_tiles(&src, &req, root, &manifest)?;
        downloaded += out.downloaded;
        manifest = manifest.merge(&out.manifest);
        manifest.write(&manifest_path)?;
    }
    println!(
        "downloaded {downloaded} tiles; manifest lists {}",
        manifest.len()
    );
    Ok(())
}

pub fn ingest(g: &GlobalArgs) -> CliResult {
    let cfg = load_config(g)?;
    cfg.validate_with_corpus()?;
    let found = mapseries::corpus::ingest(&cfg.corpus.root, &cfg.corpus.split_policy())?;
    for w in &found.warnings {
        warn!("{w}");
    }
    found.manifest.write(&cfg.corpus.root.join(MANIFEST_FILE))?;
    print!("{}", corpus_stats(&found.manifest).render());
    Ok(())
}

fn real_maps(m: &Manifest, reader: &FsTileReader, zoom: u8) -> Result<Level, CliError> {
    let mut level = Level::new();
    for e in m.select(TileKind::Map, zoom, None) {
        if let std::collections::btree_map::Entry::Vacant(slot) = level.entry(e.coord) {
            slot.insert(reader.read(e)?);
        }
    }
    Ok(level)
}

pub fn pairs(g: &GlobalArgs, run: Option<&Path>, out: Option<&Path>) -> CliResult {
    let cfg = load_config(g)?;
    let m = load_manifest(&cfg)?;
    let reader = FsTileReader::new(&cfg.corpus.root);
    let generated = run.map(load_run).transpose()?;
    let (top, bottom) = (cfg.strategy.top_zoom, cfg.strategy.bottom_zoom);
    let mut all = Vec::new();
    for z in (bottom..=top).rev() {
        let rm = build_rm_pairs(&m, z);
        if !rm.unpaired.is_empty() {
            warn!("zoom {z}: {} tiles lack a counterpart", rm.unpaired.len());
        }
        println!("RM zoom {z}: {} pairs", rm.pairs.len());
        all.extend(rm.pairs);
        if z > bottom {
            let inputs = match &generated {
                Some(atlas) => atlas.level(z).cloned().unwrap_or_default(),
                None => real_maps(&m, &reader, z)?,
            };
            let mm = build_mm_pairs(&inputs, &m, z)?;
            if !mm.incomplete.is_empty() || !mm.missing_targets.is_empty() {
                warn!(
                    "zoom {z}: {} incomplete quads, {} quads without a real map",
                    mm.incomplete.len(),
                    mm.missing_targets.len()
                );
            }
            println!("MM zoom {z}->{}: {} pairs", z - 1, mm.pairs.len());
            all.extend(mm.pairs);
        }
    }
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join("pairs"));
    materialize_pairs(&all, &cfg.corpus.root, &dir)?;
    println!("{}", dir.join("pairs.tsv").display());
    Ok(())
}

pub fn translate(g: &GlobalArgs, out: Option<&Path>) -> CliResult {
    let cfg = load_config(g)?;
    let m = load_manifest(&cfg)?;
    let strategy = cfg.strategy.config();
    let registry = load_registry(&cfg.registry, &strategy, cfg.corpus.tile_size)
        .map_err(StrategyError::from)?;
    let reader = FsTileReader::new(&cfg.corpus.root);
    let atlas = run_strategy(
        &m,
        &reader,
        &registry,
        &strategy,
        &cfg.registry.hash(),
        cfg.workers,
    )?;
    for w in &atlas.warnings {
        warn!("{w}");
    }
    let root = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.clone());
    let dir = write_run(&atlas, &root)?;
    for (z, n) in atlas.level_sizes().iter().rev() {
        info!("zoom {z}: {n} tiles");
    }
    println!("{}", dir.display());
    Ok(())
}

fn evaluation_palette(
    cfg: &RunConfig,
    m: &Manifest,
    reader: &FsTileReader,
    zooms: &[u8],
) -> Result<Palette, CliError> {
    let Some(km) = &cfg.metrics.kmeans else {
        return Ok(cfg.palette());
    };
    let mut tiles: Vec<TileImage> = Vec::new();
    for &z in zooms {
        for e in m.select(TileKind::Map, z, Some(Split::Test)) {
            tiles.push(reader.read(e)?);
        }
    }
    if tiles.is_empty() {
        return Err(CliError::Runtime(
            "no test-split map tiles to derive a palette from".into(),
        ));
    }
    let refs: Vec<&TileImage> = tiles.iter().collect();
    let samples = sample_pixels(&refs, km.samples, cfg.seed);
    let centers = kmeans_colors(&samples, km.k, km.iterations, cfg.seed)?;
    Ok(palette_from_clusters(&centers, &km.classes)?)
}

pub fn evaluate(g: &GlobalArgs, runs: &[PathBuf], out: Option<&Path>) -> CliResult {
    let cfg = load_config(g)?;
    let m = load_manifest(&cfg)?;
    let reader = FsTileReader::new(&cfg.corpus.root);
    let atlases = runs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>, _>>()?;
    let mut zooms: Vec<u8> = atlases
        .iter()
        .flat_map(|a| a.provenance.bottom_zoom..=a.provenance.top_zoom)
        .collect();
    zooms.sort_unstable();
    zooms.dedup();
    let palette = if cfg.metrics.selection.is_empty() {
        cfg.palette()
    } else {
        evaluation_palette(&cfg, &m, &reader, &zooms)?
    };
    let report = evaluate_runs(
        &atlases,
        &m,
        &reader,
        &palette,
        &cfg.metrics.selection,
        cfg.seed,
    )?;

    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.clone());
    write_file(&dir.join("report.csv"), &report.to_csv())?;
    write_file(&dir.join("report.json"), &report.to_json())?;
    if report.zooms().len() >= 2 {
        write_file(&dir.join("trend.svg"), &trend_svg(&report)?)?;
    }
    emit(&render(&report, g.format.unwrap_or(Format::Csv))?, None)
}

fn emd_csv(t: &EmdTable) -> String {
    let mut s = String::from("zoom,parallel,series\n");
    for r in &t.rows {
        s.push_str(&format!("{},{},{}\n", r.zoom, r.parallel, r.series));
    }
    s
}

pub fn emd(g: &GlobalArgs) -> CliResult {
    let cfg = load_config(g)?;
    let m = load_manifest(&cfg)?;
    let reader = FsTileReader::new(&cfg.corpus.root);
    let (top, bottom) = (cfg.strategy.top_zoom, cfg.strategy.bottom_zoom);
    let rsi = corpus_histograms(&m, &reader, TileKind::Rsi, Some(Split::Test), bottom..=top)?;
    let maps = corpus_histograms(&m, &reader, TileKind::Map, Some(Split::Test), bottom..=top)?;
    let table = emd_strategy_table(&rsi, &maps, top, bottom)?;
    let text = match g.format.unwrap_or(Format::Csv) {
        Format::Csv => emd_csv(&table),
        Format::Structured => {
            let mut s = serde_json::to_string_pretty(&table).expect("table serializes");
            s.push('\n');
            s
        }
        Format::Svg => return Err(CliError::Config("the EMD table has no SVG form".into())),
    };
    emit(&text, None)
}

pub fn report(g: &GlobalArgs, input: &Path, out: Option<&Path>) -> CliResult {
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", input.display())))?;
    let report = if text.trim_start().starts_with('{') {
        Report::from_json(&text)?
    } else {
        Report::from_csv(&text)?
    };
    for imp in &report.improvements {
        if let Some(p) = imp.percent {
            info!("average increase {}: {p:.2}%", imp.metric.name());
        }
    }
    emit(&render(&report, g.format.unwrap_or(Format::Csv))?, out)
}

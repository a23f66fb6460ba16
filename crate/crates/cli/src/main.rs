use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use airmine_core::ingest::{write_store, UidMode};
use airmine_core::model::{PipelineConfig, VisitBounds};
use airmine_core::pipeline::{
    anchor_report, anchor_stage, cohort_report, cohort_stage, community_reports, community_stage, flatten, funnel,
    funnel_report, load_app, load_census_file, load_location, load_pois_file, run_pipeline, tower_reports,
    visit_report, visit_stage, weekday_report, work_hours_reports, write_manifest, write_reports, InputCounts,
    PipelineInputs, ReportContext, RunOptions, MANIFEST_FILE,
};
use airmine_core::poi_apps::study_span_weeks;
use airmine_core::report::{emit_report, Report, ReportFormat};
use airmine_core::synth::{generate, write_outputs, SynthConfig};
use airmine_core::towers::estimate_towers;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "airmine", version, about = "Mine location and app traces into k-anonymous aggregate reports")]
struct Cli {
    /// key=value config file (a synth config for `synth`, a pipeline config otherwise)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Minimum distinct users per emitted report row
    #[arg(long, global = true)]
    k: Option<u32>,
    /// Hash raw device ids in input files with this salt
    #[arg(long, global = true)]
    salt: Option<String>,
    /// Report file format
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Override one config key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Location,
    App,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic city with ground truth
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse raw CSV files into a partitioned store
    Ingest {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Home/work detection; writes anchor, funnel, weekday and work-hour aggregates
    Anchors {
        /// Location store(s) or raw location CSV files
        #[arg(long, num_args = 1.., required = true)]
        store: Vec<PathBuf>,
        #[arg(long)]
        census: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Income cohorts of home districts
    Cohorts {
        #[arg(long, num_args = 1.., required = true)]
        store: Vec<PathBuf>,
        #[arg(long)]
        census: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Visits to points of interest
    Poi {
        #[arg(long, num_args = 1.., required = true)]
        store: Vec<PathBuf>,
        #[arg(long)]
        pois: PathBuf,
        /// Per-category dwell bounds in minutes, e.g. mall=10:360,fastfood=5:120
        #[arg(long)]
        bounds: Option<String>,
        /// Break visits down by cohort
        #[arg(long)]
        census: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// App communities and their visit behaviour
    Community {
        /// App store(s) or raw app CSV files
        #[arg(long, num_args = 1.., required = true)]
        store: Vec<PathBuf>,
        /// App id; repeatable. Defaults to every app seen.
        #[arg(long)]
        app: Vec<String>,
        /// Invocations a member must exceed
        #[arg(long)]
        min: Option<u32>,
        /// Location store, for visit rates
        #[arg(long, num_args = 1..)]
        location: Vec<PathBuf>,
        #[arg(long)]
        pois: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tower localization and distance distributions
    Towers {
        #[arg(long, num_args = 1.., required = true)]
        store: Vec<PathBuf>,
        /// Output directory, or four comma-separated files: towers,distances,cdf,opcounts
        #[arg(long)]
        out: String,
    },
    /// Run every stage and write all reports plus a manifest
    Report {
        /// Directory holding location.csv, app.csv, census.csv and pois.csv
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        location: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        app: Vec<PathBuf>,
        #[arg(long)]
        census: Option<PathBuf>,
        #[arg(long)]
        pois: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building the worker pool")?;
    }
    if let Command::Synth { out } = &cli.command {
        return synth(&cli, out);
    }
    let cfg = pipeline_config(&cli)?;
    let mode = match &cli.salt {
        Some(s) => UidMode::Salted(s.clone()),
        None => UidMode::Verbatim,
    };
    let format = ReportFormat::from(cli.format);
    match &cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Ingest { kind, inputs, out } => ingest(*kind, inputs, out, &mode),
        Command::Anchors { store, census, out } => anchors(&cfg, &mode, store, census.as_deref(), out, format),
        Command::Cohorts { store, census, out } => cohorts(&cfg, &mode, store, census, out, format),
        Command::Poi {
            store,
            pois,
            bounds,
            census,
            out,
        } => poi(&cfg, &mode, store, pois, bounds.as_deref(), census.as_deref(), out, format),
        Command::Community {
            store,
            app,
            min,
            location,
            pois,
            out,
        } => community(&cfg, &mode, store, app, *min, location, pois.as_deref(), out, format),
        Command::Towers { store, out } => towers(&cfg, &mode, store, out, format),
        Command::Report {
            input,
            location,
            app,
            census,
            pois,
            out,
        } => {
            let mut inputs = input.as_deref().map(PipelineInputs::from_dir).unwrap_or_default();
            inputs.location.extend(location.iter().cloned());
            inputs.app.extend(app.iter().cloned());
            inputs.census = census.clone().or(inputs.census);
            inputs.pois = pois.clone().or(inputs.pois);
            report(&cfg, &mode, &inputs, out, format)
        }
    }
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| anyhow!("expected KEY=VALUE, got {s:?}"))
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_kv_str(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    for s in &cli.set {
        let (k, v) = split_kv(s)?;
        cfg.set(k, v).with_context(|| format!("--set {s}"))?;
    }
    if let Some(k) = cli.k {
        cfg.k_anonymity = k;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn synth(cli: &Cli, out: &Path) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthConfig::from_kv_str(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    for s in &cli.set {
        let (k, v) = split_kv(s)?;
        cfg.set(k, v).with_context(|| format!("--set {s}"))?;
    }
    let city = generate(&cfg)?;
    write_outputs(out, &cfg, &city)?;
    eprintln!(
        "synth: {} users, {} location records, {} app records -> {}",
        city.truth.users.len(),
        city.location.len(),
        city.app.len(),
        out.display()
    );
    Ok(())
}

fn counts_meta(c: &InputCounts) -> Vec<(String, String)> {
    let mut meta = vec![
        ("input_lines".to_string(), c.lines.to_string()),
        ("rejected".to_string(), c.rejected.to_string()),
    ];
    meta.extend(c.rejected_by_class.iter().map(|(k, v)| (format!("rejected.{k}"), v.to_string())));
    meta
}

fn ingest(kind: Kind, inputs: &[PathBuf], out: &Path, mode: &UidMode) -> Result<()> {
    let counts = match kind {
        Kind::Location => {
            let (parts, c) = load_location(inputs, mode)?;
            write_store(out, &parts, &counts_meta(&c))?;
            c
        }
        Kind::App => {
            let (parts, c) = load_app(inputs, mode)?;
            write_store(out, &parts, &counts_meta(&c))?;
            c
        }
    };
    eprintln!(
        "ingest: {} lines, {} parsed, {} rejected, {} users -> {}",
        counts.lines,
        counts.parsed,
        counts.rejected,
        counts.users,
        out.display()
    );
    Ok(())
}

fn ctx(cfg: &PipelineConfig, inputs: &[(&str, u64)]) -> ReportContext {
    ReportContext::new(cfg, inputs.iter().map(|(n, c)| (n.to_string(), *c)).collect())
}

fn write_all(out: &Path, reports: &[Report], format: ReportFormat) -> Result<()> {
    for p in write_reports(out, reports, format)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn load_census_opt(path: Option<&Path>) -> Result<Option<Vec<airmine_core::cohorts::CensusDistrict>>> {
    path.map(|p| load_census_file(p).map_err(|e| anyhow!(e))).transpose()
}

fn anchors(
    cfg: &PipelineConfig,
    mode: &UidMode,
    store: &[PathBuf],
    census: Option<&Path>,
    out: &Path,
    format: ReportFormat,
) -> Result<()> {
    let (loc, counts) = load_location(store, mode)?;
    let census = load_census_opt(census)?;
    let stage = anchor_stage(&loc, None, cfg).context("stage anchors")?;
    let cohorts = cohort_stage(&stage, census.as_deref(), cfg);
    let ctx = ctx(cfg, &[("location_records", counts.parsed)]);
    let f = funnel(loc.len(), loc.len(), &stage, &cohorts);
    let (hist, hours) = work_hours_reports(&ctx, &stage, &cohorts, cfg)?;
    let reports = vec![
        anchor_report(&ctx, &stage)?,
        funnel_report(&ctx, &f)?,
        weekday_report(&ctx, &loc, cfg)?,
        hist,
        hours,
    ];
    write_all(out, &reports, format)
}

fn cohorts(
    cfg: &PipelineConfig,
    mode: &UidMode,
    store: &[PathBuf],
    census: &Path,
    out: &Path,
    format: ReportFormat,
) -> Result<()> {
    let (loc, counts) = load_location(store, mode)?;
    let census = load_census_file(census).map_err(|e| anyhow!(e))?;
    let stage = anchor_stage(&loc, None, cfg).context("stage anchors")?;
    let cohorts = cohort_stage(&stage, Some(&census), cfg);
    let ctx = ctx(cfg, &[("location_records", counts.parsed), ("districts", census.len() as u64)]);
    write_all(out, &[cohort_report(&ctx, &cohorts)?], format)
}

#[allow(clippy::too_many_arguments)]
fn poi(
    cfg: &PipelineConfig,
    mode: &UidMode,
    store: &[PathBuf],
    pois: &Path,
    bounds: Option<&str>,
    census: Option<&Path>,
    out: &Path,
    format: ReportFormat,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(b) = bounds {
        cfg.visit_bounds = VisitBounds::parse(b).with_context(|| format!("--bounds {b}"))?;
    }
    let (loc, counts) = load_location(store, mode)?;
    let pois = load_pois_file(pois).map_err(|e| anyhow!(e))?;
    let census = load_census_opt(census)?;
    let cohorts = match &census {
        Some(c) => {
            let stage = anchor_stage(&loc, None, &cfg).context("stage anchors")?;
            cohort_stage(&stage, Some(c), &cfg)
        }
        None => BTreeMap::new(),
    };
    let visits = visit_stage(&loc, &pois, &cfg);
    let ctx = ctx(&cfg, &[("location_records", counts.parsed), ("pois", pois.len() as u64)]);
    write_all(out, &[visit_report(&ctx, &visits, &cohorts)?], format)
}

#[allow(clippy::too_many_arguments)]
fn community(
    cfg: &PipelineConfig,
    mode: &UidMode,
    store: &[PathBuf],
    apps: &[String],
    min: Option<u32>,
    location: &[PathBuf],
    pois: Option<&Path>,
    out: &Path,
    format: ReportFormat,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if !apps.is_empty() {
        cfg.report_apps = apps.to_vec();
    }
    if let Some(m) = min {
        cfg.app_min_invocations = m;
    }
    let (app_parts, app_counts) = load_app(store, mode)?;
    let app = flatten(app_parts);
    let communities = community_stage(&app, &cfg);
    let (visits, span, loc_records) = match (location.is_empty(), pois) {
        (false, Some(p)) => {
            let (loc, c) = load_location(location, mode)?;
            let pois = load_pois_file(p).map_err(|e| anyhow!(e))?;
            let span = study_span_weeks(loc.values().flatten().map(|r| r.ts.epoch_seconds), &cfg);
            (visit_stage(&loc, &pois, &cfg), span, c.parsed)
        }
        (true, None) => (Vec::new(), 0.0, 0),
        _ => bail!("--location and --pois go together"),
    };
    let ctx = ctx(&cfg, &[("app_records", app_counts.parsed), ("location_records", loc_records)]);
    let (sizes, overlap) = community_reports(&ctx, &communities, &visits, span)?;
    write_all(out, &[sizes, overlap], format)
}

fn towers(cfg: &PipelineConfig, mode: &UidMode, store: &[PathBuf], out: &str, format: ReportFormat) -> Result<()> {
    let (parts, counts) = load_app(store, mode)?;
    let app = flatten(parts);
    let est = estimate_towers(&app);
    let ctx = ctx(cfg, &[("app_records", counts.parsed)]);
    let t = tower_reports(&ctx, &app, &est)?;
    let reports = [t.towers, t.distances, t.cdf, t.opcounts];
    if out.contains(',') {
        let files: Vec<&str> = out.split(',').map(str::trim).collect();
        if files.len() != reports.len() {
            bail!("--out takes a directory or exactly four files (towers,distances,cdf,opcounts)");
        }
        for (r, f) in reports.iter().zip(files) {
            let p = Path::new(f);
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            emit_report(r, format, p)?;
            eprintln!("wrote {}", p.display());
        }
        Ok(())
    } else {
        write_all(Path::new(out), &reports, format)
    }
}

fn report(cfg: &PipelineConfig, mode: &UidMode, inputs: &PipelineInputs, out: &Path, format: ReportFormat) -> Result<()> {
    let opts = RunOptions { uid_mode: mode.clone() };
    let run = match run_pipeline(cfg, inputs, &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("manifest so far:\n{}", e.manifest().to_json());
            return Err(e.into());
        }
    };
    write_all(out, &run.reports, format)?;
    let m = out.join(MANIFEST_FILE);
    write_manifest(&m, &run.manifest)?;
    eprintln!("wrote {}", m.display());
    Ok(())
}

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use trace_auth::harness::{self, RunManifest, RunSummary, TrainRunConfig};
use trace_auth::models::{load_model, save_model, ModelKind};
use trace_auth::raster::{rasterize, to_pgm, PgmFormat, RasterConfig};
use trace_auth::stroke::{self, DatasetManifest};
use trace_auth::synth::{write_cohort, CohortConfig};
use trace_auth::plot;

#[derive(Parser)]
#[command(name = "trace-auth", version, about = "Finger-drawn digit authentication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Import drawings from a directory of JSON files into the dataset layout.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write PGM rasters for every drawing.
    Rasterize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        width: u32,
        #[arg(long)]
        participant: Option<String>,
        #[arg(long, value_enum, default_value_t = Pgm::P5)]
        format: Pgm,
    },
    /// Train per-participant models.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Participants to train; all of them when omitted.
        #[arg(long = "participant")]
        participants: Vec<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a saved model on its participant's test partition.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        participant: String,
        /// Split seed; must match the training run.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one model per image size and line width.
    SweepRaster {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        participant: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![32, 64, 128, 256])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 6])]
        widths: Vec<u32>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test accuracy as a function of the number of training drawings.
    SweepDatasize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        participant: String,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate the summaries of a `train` output directory and draw plots.
    Report {
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the REST service.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 100)]
        min_drawings: usize,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// TOML enrollment defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        prompt_seed: Option<u64>,
    },
    /// Generate a seeded synthetic cohort in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        participants: usize,
        #[arg(long, default_value_t = 20)]
        per_digit: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pgm {
    P2,
    P5,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file mirroring the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    line_width: Option<u32>,
    #[arg(long)]
    calibrate_threshold: bool,
}

impl RunArgs {
    fn config(&self) -> Result<TrainRunConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(s) = self.image_size {
            cfg.raster.image_size = s;
        }
        if let Some(w) = self.line_width {
            cfg.raster.line_width = w;
        }
        cfg.calibrate_threshold |= self.calibrate_threshold;
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self) -> Result<DatasetManifest> {
        load(&self.data)
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainRunConfig> {
    match path {
        None => Ok(TrainRunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load(data: &Path) -> Result<DatasetManifest> {
    let m = stroke::load_dataset(data)?;
    if !m.rejections.is_empty() {
        tracing::warn!(count = m.rejections.len(), "skipped invalid drawings");
    }
    tracing::info!(drawings = m.len(), participants = m.participants.len(), "dataset loaded");
    Ok(m)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn ingest(input: &Path, out: &Path) -> Result<()> {
    let mut stored = 0;
    let mut rejected = Vec::new();
    for entry in walkdir::WalkDir::new(input).sort_by_file_name() {
        let entry = entry?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let parsed = fs::read(path)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
            .and_then(|v| stroke::adapt_external(&v).map_err(|e| e.to_string()))
            .and_then(|d| stroke::validate_drawing(&d).map_err(|e| e.to_string()));
        match parsed {
            Ok(d) => {
                stroke::store_drawing(out, &d)?;
                stored += 1;
            }
            Err(reason) => rejected.push(stroke::Rejection { path: path.to_path_buf(), reason }),
        }
    }
    write_json(&out.join("ingest-rejections.json"), &rejected)?;
    println!("stored {stored} drawings, rejected {} (see ingest-rejections.json)", rejected.len());
    Ok(())
}

fn rasterize_all(data: &Path, out: &Path, cfg: RasterConfig, participant: Option<&str>, format: PgmFormat) -> Result<()> {
    let m = load(data)?;
    let mut n = 0;
    for r in m.records().filter(|r| participant.is_none_or(|p| r.drawing.participant_id == p)) {
        let img = rasterize(&r.drawing, &cfg)?;
        let dir = out.join(&r.drawing.participant_id).join(r.drawing.digit.to_string());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{}.pgm", r.id)), to_pgm(&img, format))?;
        n += 1;
    }
    println!("wrote {n} rasters ({}px, width {})", cfg.image_size, cfg.line_width);
    Ok(())
}

fn train(run: &RunArgs, participants: &[String], workers: usize, out: &Path) -> Result<()> {
    let cfg = run.config()?;
    let m = run.dataset()?;
    let who: Vec<String> = if participants.is_empty() { m.participants.clone() } else { participants.to_vec() };
    let results = harness::run_participants(&m, &who, &cfg, workers)?;
    let mut summaries = Vec::new();
    for r in &results {
        let dir = out.join(&r.participant_id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("model.tam"), save_model(&r.model))?;
        write_json(&dir.join("summary.json"), &r.summary())?;
        summaries.push(r.summary());
        println!(
            "{}: acc {:.3} far {:.3} frr {:.3} auc {} ({} epochs, {:.0}s)",
            r.participant_id,
            r.report.acc,
            r.report.far,
            r.report.frr,
            r.report.auc.map_or("-".into(), |a| format!("{a:.3}")),
            r.history.len(),
            r.duration_secs
        );
    }
    write_json(&out.join("run-manifest.json"), &RunManifest::new(&cfg, &m, who))?;
    write_json(&out.join("config.json"), &cfg)?;
    let agg = harness::aggregate(&summaries);
    write_json(&out.join("aggregate.json"), &agg)?;
    print!("{}", agg.render());
    Ok(())
}

fn evaluate(data: &Path, model: &Path, participant: &str, seed: u64) -> Result<()> {
    let m = load(data)?;
    let model = load_model(&fs::read(model).with_context(|| format!("reading {}", model.display()))?)?;
    let split = harness::make_split(&m, participant, seed)?;
    let report = harness::evaluate(&model, &split, harness::Part::Test)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn report(runs: &Path, out: Option<&Path>) -> Result<()> {
    let out = out.unwrap_or(runs);
    let mut summaries: Vec<RunSummary> = Vec::new();
    for entry in walkdir::WalkDir::new(runs).min_depth(2).max_depth(2).sort_by_file_name() {
        let entry = entry?;
        if entry.file_name() == "summary.json" {
            summaries.push(serde_json::from_slice(&fs::read(entry.path())?)?);
        }
    }
    if summaries.is_empty() {
        bail!("no */summary.json under {}", runs.display());
    }
    for s in &summaries {
        let dir = out.join("plots").join(&s.participant_id);
        fs::create_dir_all(&dir)?;
        let r = &s.report;
        if let Some(roc) = &r.roc {
            fs::write(dir.join("roc.svg"), plot::roc_svg(&format!("ROC {}", s.participant_id), roc, r.auc))?;
        }
        fs::write(dir.join("tradeoff.svg"), plot::tradeoff_svg(&format!("FAR/FRR {}", s.participant_id), &r.tradeoff))?;
        let tau = if s.model.is_classifier() { r.threshold } else { -r.threshold };
        fs::write(dir.join("scores.svg"), plot::score_histogram_svg(&format!("scores {}", s.participant_id), &r.scores, &r.labels, tau, 30))?;
        let losses = |f: fn(&harness::EpochRecord) -> f64| s.history.iter().map(|h| (h.epoch as f64, f(h))).collect();
        let top = s.history.iter().flat_map(|h| [h.train_loss, h.val_loss]).fold(0.0, f64::max);
        fs::write(
            dir.join("loss.svg"),
            plot::line_chart(
                &format!("loss {}", s.participant_id),
                "epoch",
                "loss",
                (1.0, s.history.len().max(2) as f64),
                (0.0, top.max(1e-9)),
                &[
                    plot::Series { label: "train", color: "#1f77b4", points: losses(|h| h.train_loss) },
                    plot::Series { label: "validation", color: "#ff7f0e", points: losses(|h| h.val_loss) },
                ],
            ),
        )?;
    }
    let agg = harness::aggregate(&summaries);
    let per_digit: BTreeMap<u32, f64> = (0..10)
        .filter_map(|d| {
            let v: Vec<f64> = summaries.iter().filter_map(|s| s.report.per_digit.get(&d).copied()).collect();
            (!v.is_empty()).then(|| (d, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    write_json(&out.join("aggregate.json"), &agg)?;
    write_json(&out.join("per-digit.json"), &per_digit)?;
    let table = agg.render();
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    let mut ranked: Vec<_> = per_digit.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("per-digit accuracy: {}", ranked.iter().map(|(d, a)| format!("{d}:{a:.2}")).collect::<Vec<_>>().join(" "));
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest { input, out } => ingest(&input, &out),
        Command::Rasterize { data, out, size, width, participant, format } => {
            let format = match format {
                Pgm::P2 => PgmFormat::P2,
                Pgm::P5 => PgmFormat::P5,
            };
            rasterize_all(&data, &out, RasterConfig::new(size, width)?, participant.as_deref(), format)
        }
        Command::Train { run, participants, workers, out } => train(&run, &participants, workers, &out),
        Command::Evaluate { data, model, participant, seed } => evaluate(&data, &model, &participant, seed),
        Command::SweepRaster { run, participant, sizes, widths, workers, out } => {
            let cfg = run.config()?;
            let grid: Vec<(usize, u32)> = sizes.iter().flat_map(|&s| widths.iter().map(move |&w| (s, w))).collect();
            let cells = harness::raster_param_sweep(&run.dataset()?, &participant, &grid, &cfg, workers)?;
            println!("{:>5} {:>5} {:>8} {:>9} {:>8}", "size", "width", "val_acc", "val_loss", "test_acc");
            for c in &cells {
                println!("{:>5} {:>5} {:>8.3} {:>9.4} {:>8.3}", c.image_size, c.line_width, c.val_acc, c.best_val_loss, c.test_acc);
            }
            if let Some(out) = out {
                write_json(&out, &cells)?;
            }
            Ok(())
        }
        Command::SweepDatasize { run, participant, sizes, workers, out } => {
            let cfg = run.config()?;
            let accs = harness::data_quantity_sweep(&run.dataset()?, &participant, &sizes, &cfg, workers)?;
            for (n, acc) in &accs {
                println!("{n:>6} {acc:.3}");
            }
            if let Some(out) = out {
                write_json(&out, &accs)?;
            }
            Ok(())
        }
        Command::Report { runs, out } => report(&runs, out.as_deref()),
        Command::Serve { data, port, host, workers, min_drawings, static_dir, config, prompt_seed } => {
            let mut cfg = trace_auth_service::ServiceConfig::new(data);
            cfg.workers = workers;
            cfg.min_drawings = min_drawings;
            cfg.static_dir = static_dir;
            cfg.prompt_seed = prompt_seed;
            cfg.run = load_config(config.as_deref())?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host/port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(trace_auth_service::serve(cfg, addr)).map_err(anyhow::Error::msg)
        }
        Command::Synth { out, participants, per_digit, seed } => {
            let n = write_cohort(&out, &CohortConfig { participants, drawings_per_digit: per_digit, seed, ..Default::default() })?;
            println!("wrote {n} drawings to {}", out.display());
            Ok(())
        }
    }
}

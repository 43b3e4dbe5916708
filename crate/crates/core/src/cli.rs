//! Command-line surface: dataset synthesis, training stages, counting,
//! evaluation and ablation sweeps over one TOML configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::checkpoint::Archive;
use crate::config::PipelineConfig;
use crate::counter::CounterModel;
use crate::error::Error;
use crate::features::Embedding;
use crate::imageio;
use crate::metrics::MetricsReport;
use crate::pipeline::{
    check_zero_shot, load_manifest, train_counter_stage, train_errpred_stage, train_vae_stage, Arm, Pipeline, Settings,
    ALIGNMENT_FILE, COUNTER_FILE, ERRPRED_FILE, VAE_FILE,
};
use crate::pool::TopK;
use crate::prototype::PrototypeSource;
use crate::select::normalized_heatmap;
use crate::synth::{build_dataset, Split};

#[derive(Debug, Parser)]
#[command(name = "zsc", version, about = "Zero-shot object counting from a class name")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file (built-in defaults when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `dotted.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads (0 = one per core); overrides the config file.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset and its manifest into `data_dir`.
    Synth,
    /// Train the exemplar-based density counter.
    TrainCounter,
    /// Train the conditional VAE and the semantic alignment baseline.
    TrainVae,
    /// Train the exemplar error predictor.
    TrainErrpred,
    /// Count one image given only a class name.
    Count {
        image: PathBuf,
        class_name: String,
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Score a split, one row per (prototype source, n, s).
    Evaluate {
        #[arg(long)]
        split: Option<Split>,
    },
    /// Sweep n, k and the component grid.
    Ablate,
}

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::MissingArtifact(_)) => 3,
        Some(Error::Numerical { .. }) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    if cfg.workers > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::TrainCounter => cmd_train_counter(&cfg),
        Command::TrainVae => cmd_train_vae(&cfg),
        Command::TrainErrpred => cmd_train_errpred(&cfg),
        Command::Count { image, class_name, arm } => cmd_count(&cfg, &image, &class_name, arm).map(|_| ()),
        Command::Evaluate { split } => cmd_evaluate(&cfg, split.unwrap_or(cfg.evaluate.split)).map(|_| ()),
        Command::Ablate => cmd_ablate(&cfg).map(|_| ()),
    }
}

pub fn resolve_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write_out(cfg: &PipelineConfig, name: &str, text: &str) -> Result<PathBuf> {
    let path = cfg.artifact(name);
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load_counter(cfg: &PipelineConfig) -> Result<CounterModel> {
    Ok(CounterModel::from_archive(&Archive::load(&cfg.artifact(COUNTER_FILE))?)?)
}

pub fn cmd_synth(cfg: &PipelineConfig) -> Result<()> {
    let manifest = build_dataset(&cfg.dataset, cfg.seed, &cfg.data_dir)?;
    for split in Split::ALL {
        info!("{split}: {} images", manifest.records(split).count());
    }
    println!("{}", cfg.manifest_path().display());
    Ok(())
}

pub fn cmd_train_counter(cfg: &PipelineConfig) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let (model, log) = train_counter_stage(cfg, &manifest)?;
    model.to_archive()?.save(&cfg.artifact(COUNTER_FILE))?;
    let mut tsv = String::from("epoch\ttrain_loss\tval_mae\n");
    for e in &log {
        let val = e.val_mae.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(tsv, "{}\t{:.6}\t{val}", e.epoch, e.train_loss)?;
    }
    write_out(cfg, "counter_log.tsv", &tsv)?;
    write_out(cfg, "config.toml", &cfg.to_toml()?)?;
    println!("{}", cfg.artifact(COUNTER_FILE).display());
    Ok(())
}

fn loss_log(losses: &[f64]) -> String {
    let mut tsv = String::from("epoch\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(tsv, "{}\t{l:.6}", i + 1);
    }
    tsv
}

pub fn cmd_train_vae(cfg: &PipelineConfig) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let counter = load_counter(cfg)?;
    let (vae, alignment, losses) = train_vae_stage(cfg, &counter, &manifest)?;
    vae.to_archive()?.save(&cfg.artifact(VAE_FILE))?;
    alignment.to_archive().save(&cfg.artifact(ALIGNMENT_FILE))?;
    write_out(cfg, "vae_log.tsv", &loss_log(&losses))?;
    println!("{}", cfg.artifact(VAE_FILE).display());
    Ok(())
}

pub fn cmd_train_errpred(cfg: &PipelineConfig) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let counter = load_counter(cfg)?;
    let (predictor, losses) = train_errpred_stage(cfg, &counter, &manifest)?;
    predictor.to_archive()?.save(&cfg.artifact(ERRPRED_FILE))?;
    write_out(cfg, "errpred_log.tsv", &loss_log(&losses))?;
    println!("{}", cfg.artifact(ERRPRED_FILE).display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CountRecord {
    pub image: PathBuf,
    pub class_name: String,
    pub arm: Arm,
    pub count: f64,
    pub prototype_source: Option<PrototypeSource>,
    pub selected: Vec<[usize; 4]>,
    pub density_png: PathBuf,
    pub overlay_png: PathBuf,
    pub heatmap_png: PathBuf,
}

/// Counts `image`, writes the density, overlay and heatmap PNGs plus a JSON
/// record into the output directory and prints the record.
pub fn cmd_count(cfg: &PipelineConfig, image: &Path, class_name: &str, arm: Arm) -> Result<CountRecord> {
    let pipeline = Pipeline::load(cfg.clone())?;
    let tensor = imageio::load_rgb(image)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let out = pipeline.count_arm(arm, &stem, &tensor, class_name, &Settings::from_config(cfg))?;

    let density_png = cfg.artifact(&format!("{stem}_density.png"));
    let overlay_png = cfg.artifact(&format!("{stem}_overlay.png"));
    let heatmap_png = cfg.artifact(&format!("{stem}_heatmap.png"));
    let rects: Vec<_> = out.selected.iter().map(|p| p.rect).collect();
    imageio::save_gray(&out.density, &density_png)?;
    imageio::save_overlay(&out.image, &rects, &overlay_png)?;
    let heatmap = match &out.mask {
        Some(m) => m.clone(),
        None => {
            let exemplars = rects
                .iter()
                .map(|&r| pipeline.embedder.embed_rect(&out.image, r))
                .collect::<crate::Result<Vec<_>>>()?;
            let mean = Embedding::mean(&exemplars).context("no exemplars selected")?;
            normalized_heatmap(&pipeline.counter.image_features(&out.image)?, &mean)?
        }
    };
    imageio::save_gray(&heatmap, &heatmap_png)?;

    let record = CountRecord {
        image: image.to_path_buf(),
        class_name: class_name.to_owned(),
        arm,
        count: out.count,
        prototype_source: out.prototype.as_ref().map(|p| p.source),
        selected: rects.iter().map(|r| [r.x0, r.y0, r.x1, r.y1]).collect(),
        density_png,
        overlay_png,
        heatmap_png,
    };
    let json = serde_json::to_string_pretty(&record)?;
    write_out(cfg, &format!("{stem}_count.json"), &format!("{json}\n"))?;
    println!("{json}");
    Ok(record)
}

/// One scored configuration of a report table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub sweep: &'static str,
    pub arm: Arm,
    pub source: PrototypeSource,
    pub n: usize,
    pub k: TopK,
    pub s: usize,
    pub report: MetricsReport,
}

const COLUMNS: [&str; 12] = ["sweep", "arm", "source", "n", "k", "s", "mae", "rmse", "nae", "sre", "n_images", "n_excluded"];

impl Row {
    fn cells(&self) -> [String; 12] {
        let r = &self.report;
        [
            self.sweep.to_owned(),
            self.arm.to_string(),
            self.source.to_string(),
            self.n.to_string(),
            self.k.to_string(),
            self.s.to_string(),
            format!("{:.4}", r.mae),
            format!("{:.4}", r.rmse),
            format!("{:.4}", r.nae),
            format!("{:.4}", r.sre),
            r.n_images.to_string(),
            r.n_excluded_zero_gt.to_string(),
        ]
    }
}

pub fn rows_to_tsv(rows: &[Row]) -> String {
    let mut out = COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join("\t"));
        out.push('\n');
    }
    out
}

/// Column-aligned plain-text table.
pub fn rows_to_text(rows: &[Row]) -> String {
    let cells: Vec<[String; 12]> = rows.iter().map(Row::cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|i| cells.iter().map(|c| c[i].len()).chain([COLUMNS[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |vals: Vec<&str>| {
        let mut s = vals
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(COLUMNS.to_vec());
    for c in &cells {
        out.push_str(&line(c.iter().map(String::as_str).collect()));
    }
    out
}

fn or_default<T: Clone>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

fn load_split_checked(pipeline: &Pipeline, cfg: &PipelineConfig, split: Split) -> Result<Vec<crate::synth::AnnotatedImage>> {
    let images = load_manifest(cfg)?.load_split(split)?;
    check_zero_shot(split, &images, &pipeline.counter)?;
    Ok(images)
}

fn score(pipeline: &Pipeline, images: &[crate::synth::AnnotatedImage], sweep: &'static str, arm: Arm, settings: Settings) -> Result<Row> {
    let (report, _) = pipeline.evaluate(images, arm, &settings)?;
    info!("{sweep} {arm} {} n={} k={} s={}: {}", settings.source, settings.n, settings.k, settings.s, report.to_record());
    Ok(Row {
        sweep,
        arm,
        source: settings.source,
        n: settings.n,
        k: settings.k,
        s: settings.s,
        report,
    })
}

/// Full-method table over a split; writes `evaluate_<split>.tsv` and `.txt`.
pub fn cmd_evaluate(cfg: &PipelineConfig, split: Split) -> Result<Vec<Row>> {
    let pipeline = Pipeline::load(cfg.clone())?;
    let images = load_split_checked(&pipeline, cfg, split)?;
    let base = Settings::from_config(cfg);
    let mut rows = Vec::new();
    for source in or_default(&cfg.evaluate.sources, base.source) {
        for n in or_default(&cfg.evaluate.n_values, base.n) {
            for s in or_default(&cfg.evaluate.s_values, base.s) {
                let settings = Settings { source, n, s, ..base };
                rows.push(score(&pipeline, &images, "evaluate", Arm::Full, settings)?);
            }
        }
    }
    write_out(cfg, &format!("evaluate_{split}.tsv"), &rows_to_tsv(&rows))?;
    let text = rows_to_text(&rows);
    write_out(cfg, &format!("evaluate_{split}.txt"), &text)?;
    print!("{text}");
    Ok(rows)
}

/// N sweep, k sweep (pool source) and the component grid; writes
/// `ablate.tsv` and `ablate.txt`.
pub fn cmd_ablate(cfg: &PipelineConfig) -> Result<Vec<Row>> {
    let pipeline = Pipeline::load(cfg.clone())?;
    let images = load_split_checked(&pipeline, cfg, cfg.ablation.split)?;
    let base = Settings::from_config(cfg);
    let mut rows = Vec::new();
    for &n in &cfg.ablation.n_values {
        rows.push(score(&pipeline, &images, "n", Arm::Full, Settings { n, ..base })?);
    }
    for &k in &cfg.ablation.k_values {
        let settings = Settings {
            source: PrototypeSource::Pool,
            k,
            ..base
        };
        rows.push(score(&pipeline, &images, "k", Arm::Full, settings)?);
    }
    for arm in Arm::ALL {
        rows.push(score(&pipeline, &images, "components", arm, base)?);
    }
    write_out(cfg, "ablate.tsv", &rows_to_tsv(&rows))?;
    let text = rows_to_text(&rows);
    write_out(cfg, "ablate.txt", &text)?;
    print!("{text}");
    Ok(rows)
}

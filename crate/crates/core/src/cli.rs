//! Operator surface: dataset synthesis, training, evaluation, single-query
//! search and the verification suites, all driven by one layered config.
//!
//! Every command writes a run manifest next to its outputs. Data outputs
//! (datasets, checkpoints, metric reports, rankings) are byte-deterministic
//! given identical inputs and seed; the manifest records wall-clock timing
//! and is the one file excluded from that contract.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::Config;
use crate::data::{generate_synthetic, load_annotations, normalize_pixels, read_pixels};
use crate::error::{Error, Result};
use crate::eval::{build_gallery, evaluate, extract_query_feature, search};
use crate::geometry::BBox;
use crate::train::{fit_loop, load_checkpoint, Trainer};
use crate::verify::run_suites;

pub const DATA_ROOT_ENV: &str = "PERSEARCH_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "persearch", version, about = "End-to-end person search at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic person-search dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the run seed (data generation and training).
        #[arg(long)]
        seed: Option<u64>,
        /// Config overrides, `key.path=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (default: $PERSEARCH_DATA_ROOT).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint (its embedded config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint: mAP, top-1, recall, sweeps, cross-view.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the metrics report and rankings.
        #[arg(long)]
        out: PathBuf,
        /// Gallery sizes to sweep, comma separated.
        #[arg(long = "gallery-size", value_delimiter = ',')]
        gallery_size: Vec<usize>,
        /// Restrict each query's gallery to other cameras.
        #[arg(long = "cross-view")]
        cross_view: bool,
        /// Detection score threshold for gallery candidates.
        #[arg(long = "score-thresh")]
        score_thresh: Option<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Rank gallery candidates for one query image + box.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw pixel container of the query image.
        #[arg(long = "query-image")]
        query_image: PathBuf,
        /// Target box `x1,y1,x2,y2` in absolute pixels.
        #[arg(long = "query-box")]
        query_box: String,
        /// Gallery dataset directory (default: $PERSEARCH_DATA_ROOT).
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long = "top-k", default_value_t = 10)]
        top_k: usize,
        #[arg(long = "score-thresh")]
        score_thresh: Option<f64>,
        /// Output file for the ranked results.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run verification suites (oracles, gradients, invariants).
    Verify {
        /// `all`, a comma-separated list of suites, or `checkpoint`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Checkpoint to validate (enables the checkpoint suite).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_digest: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

fn load_config(file: Option<&PathBuf>, seed: Option<u64>, set: &[String]) -> Result<Config> {
    let mut cfg = Config::load(file.map(|p| p.as_path()), set)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn data_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or_else(|| {
            Error::Config(format!("no --data given and {DATA_ROOT_ENV} is unset"))
        }),
    }
}

fn parse_box(spec: &str) -> Result<BBox> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad --query-box `{spec}`: {e}")))?;
    if parts.len() != 4 {
        return Err(Error::Config(format!("--query-box needs x1,y1,x2,y2, got `{spec}`")));
    }
    BBox::absolute(parts[0], parts[1], parts[2], parts[3])
}

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<()> {
    let started = Instant::now();
    let ds = generate_synthetic(&cfg.synth)?;
    ds.save(out)?;
    RunManifest {
        command: "synth".into(),
        config_path: None,
        config_digest: cfg.digest(),
        inputs: vec![],
        outputs: vec![out.display().to_string()],
        seed: cfg.synth.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    }
    .write(out)?;
    println!(
        "dataset: {} images ({} train / {} gallery / {} query), {} identities -> {}",
        ds.num_images(),
        cfg.synth.n_train_images,
        cfg.synth.n_gallery_images,
        cfg.synth.n_query_images,
        ds.num_labeled(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(
    cfg: &Config,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    let ds = load_annotations(data)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = load_checkpoint(ckpt)?;
            println!("resumed from {} at iteration {}", ckpt.display(), t.iteration);
            t
        }
        None => Trainer::new(cfg, ds.num_labeled())?,
    };
    fit_loop(&mut trainer, &ds, Some(out))?;
    let digest = trainer.cfg.digest();
    RunManifest {
        command: "train".into(),
        config_path: None,
        config_digest: digest,
        inputs: vec![data.display().to_string()],
        outputs: vec![out.display().to_string()],
        seed: trainer.cfg.train.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    }
    .write(out)?;
    println!(
        "trained {} iterations -> {}",
        trainer.iteration,
        out.join("checkpoint_final.ckpt").display()
    );
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    gallery_sizes: &[usize],
    cross_view: bool,
    score_thresh: Option<f64>,
    set: &[String],
) -> Result<()> {
    let started = Instant::now();
    let trainer = load_checkpoint(checkpoint)?;
    let ds = load_annotations(data)?;
    let mut cfg = trainer.cfg.clone();
    // command-line flags override the checkpointed eval settings
    for ov in set {
        // allow eval.* tweaks without rebuilding the whole layered config
        let mut value = toml::Value::try_from(&cfg)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        crate::config::apply_override_public(&mut value, ov)?;
        cfg = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    }
    if !gallery_sizes.is_empty() {
        cfg.eval.gallery_sizes = gallery_sizes.to_vec();
    }
    cfg.eval.cross_view = cross_view;
    if let Some(t) = score_thresh {
        cfg.eval.score_thresh = t;
    }
    let digest = cfg.digest();
    let (report, results) =
        evaluate(&trainer.model, &ds, &cfg.eval, &cfg.pixel_norm, &digest)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    let mut rankings = String::new();
    for r in &results {
        rankings.push_str(&serde_json::to_string(r)?);
        rankings.push('\n');
    }
    std::fs::write(out.join("rankings.jsonl"), rankings)?;
    RunManifest {
        command: "eval".into(),
        config_path: None,
        config_digest: digest,
        inputs: vec![checkpoint.display().to_string(), data.display().to_string()],
        outputs: vec![out.display().to_string()],
        seed: cfg.train.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    }
    .write(out)?;
    println!(
        "mAP {:.4}  top-1 {:.4}  detection recall {:.4}  ({} queries{})",
        report.map,
        report.top1,
        report.detection_recall,
        report.queries.len(),
        if cross_view { ", cross-view" } else { "" }
    );
    for row in &report.sweep {
        println!("gallery size {:>4}: mAP {:.4}  top-1 {:.4}", row.size, row.map, row.top1);
    }
    Ok(())
}

#[derive(Serialize)]
struct SearchOutputRow {
    rank: usize,
    image_id: u32,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    similarity: f64,
}

pub fn cmd_search(
    checkpoint: &Path,
    query_image: &Path,
    query_box: &BBox,
    gallery_dir: &Path,
    top_k: usize,
    score_thresh: Option<f64>,
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    let trainer = load_checkpoint(checkpoint)?;
    let ds = load_annotations(gallery_dir)?;
    let cfg = &trainer.cfg;
    let thresh = score_thresh.unwrap_or(cfg.eval.score_thresh);
    let px = read_pixels(query_image)?;
    let image = normalize_pixels(&px, &cfg.pixel_norm);
    let qf = extract_query_feature(&trainer.model, &image, query_box)?;
    if qf.low_overlap {
        eprintln!("warning: no prediction overlaps the target box; using the closest one");
    }
    let gallery = build_gallery(&trainer.model, &ds, &cfg.pixel_norm, thresh)?;
    let ranking = search(&qf.feature, &gallery, None);
    let mut rows = String::new();
    for (rank, &(ci, sim)) in ranking.iter().take(top_k).enumerate() {
        let c = &gallery[ci];
        let row = SearchOutputRow {
            rank: rank + 1,
            image_id: c.image_id,
            x1: c.box_abs.x1,
            y1: c.box_abs.y1,
            x2: c.box_abs.x2,
            y2: c.box_abs.y2,
            score: c.score,
            similarity: sim,
        };
        rows.push_str(&serde_json::to_string(&row)?);
        rows.push('\n');
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, rows)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            RunManifest {
                command: "search".into(),
                config_path: None,
                config_digest: cfg.digest(),
                inputs: vec![
                    checkpoint.display().to_string(),
                    query_image.display().to_string(),
                    gallery_dir.display().to_string(),
                ],
                outputs: vec![out.display().to_string()],
                seed: cfg.train.seed,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            }
            .write(parent)?;
        }
    }
    println!("wrote top-{} ranking to {}", top_k.min(ranking.len()), out.display());
    Ok(())
}

pub fn cmd_verify(suite: &str, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let reports = run_suites(suite, checkpoint)?;
    let mut failed = Vec::new();
    for r in &reports {
        for c in &r.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!("[{status}] {}/{}: {}", r.suite, c.name, c.detail);
            if !c.passed {
                failed.push(format!("{}/{}", r.suite, c.name));
            }
        }
    }
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&reports)?)?;
    }
    if !failed.is_empty() {
        return Err(Error::Verification(format!("failed checks: {}", failed.join(", "))));
    }
    println!("all checks passed");
    Ok(())
}

/// Entry point: parse arguments, dispatch, map errors to exit codes and a
/// machine-readable stderr record.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let record = serde_json::json!({
                "error": { "kind": error_kind(&e), "message": e.to_string() }
            });
            eprintln!("{record}");
            e.exit_code()
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Verification(_) => "verification",
        Error::Dataset(_) | Error::DatasetFile { .. } => "dataset",
        Error::Checkpoint(_) => "checkpoint",
        Error::NonFinite(_) => "non_finite",
        _ => "runtime",
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed, set } => {
            let cfg = load_config(config.as_ref(), seed, &set)?;
            cmd_synth(&cfg, &out)
        }
        Command::Train { config, data, out, seed, resume, set } => {
            let cfg = load_config(config.as_ref(), seed, &set)?;
            let data = data_dir(data)?;
            cmd_train(&cfg, &data, &out, resume.as_deref())
        }
        Command::Eval { checkpoint, data, out, gallery_size, cross_view, score_thresh, set } => {
            let data = data_dir(data)?;
            cmd_eval(&checkpoint, &data, &out, &gallery_size, cross_view, score_thresh, &set)
        }
        Command::Search {
            checkpoint,
            query_image,
            query_box,
            gallery,
            top_k,
            score_thresh,
            out,
        } => {
            let b = parse_box(&query_box)?;
            let gallery = data_dir(gallery)?;
            cmd_search(&checkpoint, &query_image, &b, &gallery, top_k, score_thresh, &out)
        }
        Command::Verify { suite, checkpoint, out } => {
            cmd_verify(&suite, checkpoint.as_deref(), out.as_deref())
        }
    }
}

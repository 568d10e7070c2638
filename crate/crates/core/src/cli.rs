//! Command-line front end: `train`, `encode`, `decode`, `eval`, `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{EvalConfig, RunConfig};
use crate::dataset::{badge_digest, scan_dir};
use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, ImageTensor, SaveFormat};
use crate::losses::PerceptualBackend;
use crate::metrics::{
    control_clean_decode, control_text_watermark, encode_all, evaluate_model, psnr, reports_to_csv,
    robustness_sweep, sweep_to_csv, MetricsReport,
};
use crate::models::{decode, embed, load_checkpoint, Checkpoint};
use crate::training::{resume, train, TrainOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cpmark", version, about = "Train and apply invisible copyright marks for styled images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) a model from a config file.
    Train(TrainArgs),
    /// Embed a badge into a host image; writes a PNG.
    Encode(EncodeArgs),
    /// Recover the badge from an encoded image; writes a PNG.
    Decode(DecodeArgs),
    /// Image-quality report for encoded and decoded images of a corpus.
    Eval(EvalArgs),
    /// Decoding quality under real JPEG and Gaussian blur.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub badge: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of host images (searched recursively).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, required = true)]
    pub badge: Vec<PathBuf>,
    /// Report path; `.json` and `.csv` versions are written.
    #[arg(long)]
    pub report: PathBuf,
    /// Config supplying perceptual backend weights and control settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Also run the clean-decode and text-overlay controls.
    #[arg(long)]
    pub controls: bool,
    /// Seed of the text-overlay positions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Codec(_) => EXIT_RUNTIME,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Encode(a) => cmd_encode(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config, &a.overrides)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    let corpus = cfg.corpus()?;
    let badges = cfg.badges()?;
    let backend = cfg.backend()?;
    let out = TrainOutput {
        dir: cfg.output_dir.clone(),
        run_meta: serde_json::to_value(&cfg).expect("config serializes"),
    };
    let outcome = match &a.checkpoint {
        Some(ck) => resume(ck, &cfg.train, corpus, &badges, &backend, &out)?,
        None => train(&cfg.model, &cfg.train, corpus, &badges, &backend, &out)?,
    };
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn require_png(path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if ext.as_deref() != Some("png") {
        return Err(Error::Config(format!(
            "output {} must be a .png file; encoded images are stored losslessly",
            path.display()
        )));
    }
    Ok(())
}

pub fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    require_png(&a.out)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let side = ck.state.config.image_side;
    let host = load_image(&a.input, side)?;
    let badge = load_image(&a.badge, side)?;
    if !ck.badge_digests.is_empty() && !ck.badge_digests.contains(&badge_digest(&badge)) {
        log::warn!("{} is not one of the badges this model was trained on", a.badge.display());
    }
    let encoded = embed(&host, &badge, &ck.state)?;
    save_image(&encoded, &a.out, SaveFormat::Png)?;
    println!("psnr {:.4}", psnr(&host, &encoded)?);
    Ok(())
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    require_png(&a.out)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let img = load_image(&a.input, ck.state.config.image_side)?;
    save_image(&decode(&img, &ck.state)?, &a.out, SaveFormat::Png)
}

struct Loaded {
    ck: Checkpoint,
    hosts: Vec<ImageTensor>,
    badges: Vec<ImageTensor>,
    backend: PerceptualBackend,
    eval: EvalConfig,
}

fn load_corpus_args(a: &CorpusArgs) -> Result<Loaded> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let side = ck.state.config.image_side;
    let hosts = scan_dir(&a.input)?.load_all(side)?;
    let badges = a.badge.iter().map(|p| load_image(p, side)).collect::<Result<Vec<_>>>()?;
    let (backend, eval) = match &a.config {
        Some(path) => {
            let cfg = RunConfig::load(path, &a.overrides)?;
            (cfg.backend()?, cfg.eval)
        }
        None => (PerceptualBackend::deterministic(), EvalConfig::default()),
    };
    Ok(Loaded {
        ck,
        hosts,
        badges,
        backend,
        eval,
    })
}

fn report_paths(report: &Path) -> (PathBuf, PathBuf) {
    (report.with_extension("json"), report.with_extension("csv"))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let l = load_corpus_args(&a.corpus)?;
    let mut rows: Vec<(usize, MetricsReport)> = Vec::new();
    for (i, badge) in l.badges.iter().enumerate() {
        rows.extend(evaluate_model(&l.ck.state, &l.hosts, badge, &l.backend)?.map(|r| (i, r)));
        if a.controls {
            rows.push((i, control_clean_decode(&l.ck.state, &l.hosts, badge, &l.backend)?));
            let encoded = encode_all(&l.hosts, badge, &l.ck.state)?;
            rows.push((
                i,
                control_text_watermark(
                    &l.ck.state,
                    &encoded,
                    badge,
                    &l.eval.text,
                    l.eval.font_size,
                    a.seed,
                    &l.backend,
                )?,
            ));
        }
    }
    let (json_path, csv_path) = report_paths(&a.corpus.report);
    let entries: Vec<_> = rows
        .iter()
        .map(|(i, r)| {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v["badge"] = json!(*i);
            v["badge_digest"] = json!(badge_digest(&l.badges[*i]));
            v
        })
        .collect();
    let doc = json!({
        "checkpoint": a.corpus.checkpoint,
        "corpus": a.corpus.input,
        "backend": l.backend.name,
        "reports": entries,
    });
    write(&json_path, &serde_json::to_string_pretty(&doc).expect("json"))?;
    write(&csv_path, &reports_to_csv(&rows))?;
    for (i, r) in &rows {
        println!(
            "badge {i} {}: ssim {:.4} psnr {:.2} lpips {:.4} fid {}",
            r.pair_category,
            r.ssim,
            r.psnr,
            r.lpips,
            r.fid.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let l = load_corpus_args(&a.corpus)?;
    let rows = robustness_sweep(&l.ck.state, &l.hosts, &l.badges, &l.backend)?;
    let (json_path, csv_path) = report_paths(&a.corpus.report);
    write(&json_path, &serde_json::to_string_pretty(&rows).expect("json"))?;
    let csv = sweep_to_csv(&rows);
    write(&csv_path, &csv)?;
    print!("{csv}");
    Ok(())
}

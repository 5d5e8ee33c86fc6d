//! `segpool` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, data sources a
//! training mode needs but were not given), 2 for data or contract errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use segpool::evalmod::{evaluate_model, viz_features, EvalReport};
use segpool::model::forward;
use segpool::numerics::AdamConfig;
use segpool::scenegen::{frame_path, gen_dataset, load_id_map, load_image, DatasetManifest, Domain};
use segpool::segmask::{mask_stats, simulate_dataset, MaskSet, OracleParams, MASKS_EXTENSION};
use segpool::trainer::{train_with_progress, Checkpoint, Mode, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "segpool", version, about = "Segment-pooling Sim2Real adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a procedural dataset.
    Gen(GenArgs),
    /// Simulate an oversegmenting mask generator over a dataset's instances.
    SamSim(SamSimArgs),
    /// Train a model in one of the three experiment modes.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset; prints an EvalReport as JSON.
    Eval(EvalArgs),
    /// Write a checkpoint's dense features for one image as a PPM.
    VizFeatures(VizArgs),
    /// Summarize a directory of mask files.
    PoolStats(PoolStatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DomainArg {
    Syn,
    Real,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Syn => Domain::Syn,
            DomainArg::Real => Domain::Real,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long, value_enum)]
    domain: DomainArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

#[derive(Debug, Args, Serialize)]
struct SamSimArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = OracleParams::default().split_prob)]
    split_prob: f64,
    #[arg(long, default_value_t = OracleParams::default().max_parts)]
    max_parts: usize,
    #[arg(long, default_value_t = OracleParams::default().keep_whole_prob)]
    keep_whole_prob: f64,
    /// Boundary jitter radius in pixels.
    #[arg(long, default_value_t = OracleParams::default().jitter_radius)]
    jitter: usize,
    /// Number of random background blobs per frame.
    #[arg(long, default_value_t = OracleParams::default().spurious_masks)]
    spurious: usize,
    #[arg(long, default_value_t = OracleParams::default().min_mask_pixels)]
    min_pixels: usize,
}

impl SamSimArgs {
    fn oracle(&self) -> OracleParams {
        OracleParams {
            split_prob: self.split_prob,
            max_parts: self.max_parts,
            keep_whole_prob: self.keep_whole_prob,
            jitter_radius: self.jitter,
            spurious_masks: self.spurious,
            min_mask_pixels: self.min_pixels,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long)]
    syn: Option<PathBuf>,
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Labelled real frames scored with the EMA model after every epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    frames_per_epoch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_last_k: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dense_dim: Option<usize>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let mut c = TrainConfig::new(self.mode, &self.out);
        c.seed = self.seed;
        c.syn_dir = self.syn.clone();
        c.real_dir = self.real.clone();
        c.masks_dir = self.masks.clone();
        c.test_dir = self.test.clone();
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.frames_per_epoch {
            c.frames_per_epoch = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.ema_decay {
            c.ema_decay = v;
        }
        if let Some(v) = self.lr {
            c.adam = AdamConfig { lr: v, ..c.adam };
        }
        if let Some(v) = self.eval_last_k {
            c.eval_last_k = v;
        }
        if let Some(v) = self.classes {
            c.model.classes = v;
        }
        if let Some(v) = self.dense_dim {
            c.model.dense_dim = v;
        }
        c
    }
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score the EMA weights rather than the raw ones.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    use_ema: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    use_ema: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct PoolStatsArgs {
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<segpool::Error> for Failure {
    fn from(e: segpool::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn echo_config(command: &str, config: &impl Serialize) {
    let json = serde_json::to_string(config).expect("config serializes");
    eprintln!("segpool {command}: resolved config {json}");
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn run_gen(args: &GenArgs) -> Outcome {
    echo_config("gen", args);
    let domain = Domain::from(args.domain);
    let manifest = gen_dataset(
        args.num,
        domain.name(),
        &domain.params(),
        &args.out,
        args.seed,
        args.classes,
        args.height,
        args.width,
    )?;
    eprintln!("wrote {} frames to {}", manifest.frame_count, args.out.display());
    Ok(())
}

fn run_sam_sim(args: &SamSimArgs) -> Outcome {
    echo_config("sam-sim", args);
    let written = simulate_dataset(&args.data, &args.out, &args.oracle(), args.seed)?;
    eprintln!("wrote {} mask files to {}", written.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    mode: Mode,
    epochs: usize,
    checkpoint: PathBuf,
    metrics: PathBuf,
    last_k: usize,
    last_k_miou: Option<f64>,
    final_epoch: Option<&'a segpool::trainer::EpochMetrics>,
}

fn run_train(args: &TrainArgs) -> Outcome {
    let config = args.config();
    echo_config("train", &config);
    let missing = config.missing_paths();
    if !missing.is_empty() {
        let flags: Vec<String> = missing.iter().map(|m| format!("--{m}")).collect();
        return Err(Failure::Usage(format!(
            "--mode {} requires {}",
            config.mode,
            flags.join(", ")
        )));
    }
    let outcome = train_with_progress(&config, &mut |m| {
        eprintln!("epoch {}: {}", m.epoch, serde_json::to_string(m).expect("metrics serialize"));
    })?;
    print_json(&TrainSummary {
        mode: config.mode,
        epochs: config.epochs,
        checkpoint: config.out_dir.join(CHECKPOINT_FILE),
        metrics: config.out_dir.join(METRICS_FILE),
        last_k: config.eval_last_k,
        last_k_miou: outcome.last_k_miou,
        final_epoch: outcome.metrics.last(),
    });
    Ok(())
}

fn load_labelled(dir: &Path) -> anyhow::Result<(Vec<segpool::numerics::Tensor>, Vec<segpool::IdMap>)> {
    let manifest = DatasetManifest::load(dir)?;
    let mut images = Vec::with_capacity(manifest.frames.len());
    let mut labels = Vec::with_capacity(manifest.frames.len());
    for files in &manifest.frames {
        images.push(load_image(&frame_path(dir, &files.image))?);
        labels.push(load_id_map(&frame_path(dir, &files.labels))?);
    }
    Ok((images, labels))
}

fn run_eval(args: &EvalArgs) -> Outcome {
    echo_config("eval", args);
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let params = if args.use_ema { &ckpt.ema } else { &ckpt.params };
    let (images, labels) = load_labelled(&args.data).context("loading evaluation data")?;
    let report: EvalReport = evaluate_model(params, &images, &labels)?;
    print_json(&report);
    Ok(())
}

fn run_viz(args: &VizArgs) -> Outcome {
    echo_config("viz-features", args);
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let params = if args.use_ema { &ckpt.ema } else { &ckpt.params };
    let image = load_image(&args.image)?;
    let out = forward(params, &image)?;
    let img = viz_features(&out.dense, &args.out)?;
    eprintln!("wrote {}×{} feature image to {}", img.width, img.height, args.out.display());
    if !img.constant_channels.is_empty() {
        eprintln!("constant channels rendered as 0: {:?}", img.constant_channels);
    }
    Ok(())
}

#[derive(Serialize)]
struct FileStats {
    file: String,
    #[serde(flatten)]
    stats: segpool::segmask::MaskStats,
}

#[derive(Serialize)]
struct PoolStatsReport {
    files: usize,
    total_masks: usize,
    total_overlap_pixels: usize,
    mean_masks_per_frame: Option<f64>,
    mean_coverage: Option<f64>,
    frames: Vec<FileStats>,
}

fn run_pool_stats(args: &PoolStatsArgs) -> Outcome {
    echo_config("pool-stats", args);
    let suffix = format!(".{MASKS_EXTENSION}");
    let entries = std::fs::read_dir(&args.masks).with_context(|| format!("reading {}", args.masks.display()))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("reading {}", args.masks.display()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(&suffix) {
            names.push(name);
        }
    }
    names.sort();
    let mut frames = Vec::with_capacity(names.len());
    for name in names {
        let set = MaskSet::load(&args.masks.join(&name))?;
        frames.push(FileStats {
            file: name,
            stats: mask_stats(&set),
        });
    }
    let n = frames.len();
    let mean = |f: &dyn Fn(&FileStats) -> f64| (n > 0).then(|| frames.iter().map(f).sum::<f64>() / n as f64);
    let report = PoolStatsReport {
        files: n,
        total_masks: frames.iter().map(|f| f.stats.count).sum(),
        total_overlap_pixels: frames.iter().map(|f| f.stats.overlap_pixels).sum(),
        mean_masks_per_frame: mean(&|f| f.stats.count as f64),
        mean_coverage: mean(&|f| f.stats.coverage),
        frames,
    };
    print_json(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::SamSim(a) => run_sam_sim(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::VizFeatures(a) => run_viz(a),
        Command::PoolStats(a) => run_pool_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

//! Command-line entry points.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ampn_core::checkpoint::Checkpoint;
use ampn_core::config::ModelConfig;
use ampn_core::io::{load_image, load_mask, save_mask};
use ampn_core::objectives::FeatureExtractor;
use ampn_core::render::{render_png, RenderRequest, DEFAULT_FOCUS_THRESHOLD};
use ampn_core::synthdata::{make_dataset, read_dataset, read_ebb, write_dataset, Dataset, SyntheticSpec, DEFAULT_SIGMA_RANGE};
use ampn_core::trainer::{evaluate, TrainOptions, Trainer, EXTRACTOR_SEED};
use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ampn", version, about = "Mask-guided bokeh rendering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one image.
    Render(RenderArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on the eval split of a dataset.
    Eval(EvalArgs),
    /// Write a synthetic paired dataset.
    Synth(SynthArgs),
    /// Serve the HTTP API and the static UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Grayscale focus mask at input or low-frequency resolution; bypasses G1.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub background_level: Option<f32>,
    #[arg(long, default_value_t = DEFAULT_FOCUS_THRESHOLD)]
    pub focus_threshold: f32,
    /// Writes the low-resolution mask fed to the generator.
    #[arg(long)]
    pub dump_mask: Option<PathBuf>,
    /// Expected architecture; the checkpoint must match it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset root written by `synth`, or an EBB! root with `--ebb`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ebb: bool,
    /// Fraction of an EBB! root used for training.
    #[arg(long, default_value_t = 4400.0 / 4694.0)]
    pub train_frac: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Perceptual feature extractor container; a seeded random one otherwise.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// TSV report path; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score 8-bit quantized outputs.
    #[arg(long)]
    pub quantized: bool,
    #[arg(long)]
    pub extractor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 0.875)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 192)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Without a checkpoint the service answers renders with 503.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory of static UI assets served at `/`.
    #[arg(long, default_value = "ui/dist")]
    pub ui: PathBuf,
    #[arg(long, default_value_t = crate::service::DEFAULT_MAX_PIXELS)]
    pub max_pixels: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Render(a) => render(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Synth(a) => synth(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn load_checkpoint(path: &Path, expected: Option<&Path>) -> Result<Checkpoint, CliError> {
    Ok(match expected {
        Some(cfg) => Checkpoint::load_expecting(path, &ModelConfig::load(cfg)?)?,
        None => Checkpoint::load(path)?,
    })
}

fn extractor(path: Option<&Path>) -> Result<FeatureExtractor, CliError> {
    Ok(match path {
        Some(p) => FeatureExtractor::load(p)?,
        None => FeatureExtractor::random(EXTRACTOR_SEED),
    })
}

fn load_dataset(args: &DatasetArgs, size: (usize, usize)) -> Result<Dataset, CliError> {
    Ok(if args.ebb { read_ebb(&args.input, args.train_frac, Some(size))? } else { read_dataset(&args.input)? })
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let image = load_image(&a.input)?;
    let mask = a.mask.as_ref().map(load_mask).transpose()?;
    let model = load_checkpoint(&a.ckpt, a.config.as_deref())?.to_model()?;
    let req = RenderRequest {
        image,
        mask,
        background_level: a.background_level,
        focus_threshold: a.focus_threshold,
    };
    let (png, resp) = render_png(&model, &req)?;
    if let Some((h, w)) = resp.resized_from {
        eprintln!(
            "resized input from {h}x{w} to {}x{}",
            resp.image.height(),
            resp.image.width()
        );
    }
    std::fs::write(&a.out, png)?;
    if let Some(p) = &a.dump_mask {
        save_mask(&resp.mask, p)?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let ext = extractor(a.extractor.as_deref())?;
    let mut trainer = match &a.ckpt {
        Some(p) => Trainer::resume(&load_checkpoint(p, a.config.as_deref())?, ext)?,
        None => {
            let mut config = match &a.config {
                Some(p) => ModelConfig::load(p)?,
                None => ModelConfig::default(),
            };
            if let Some(seed) = a.seed {
                config.train.seed = seed;
            }
            Trainer::new(&config, ext)?
        }
    };
    let t = &trainer.model.config().train;
    let data = load_dataset(&a.data, (t.image_height, t.image_width))?;
    log::info!(
        "training {} parameters on {} pairs from step {}",
        trainer.model.num_params(),
        data.train.len(),
        trainer.step
    );
    let opts = TrainOptions { max_steps: a.steps, checkpoint_dir: Some(a.out.clone()) };
    let summary = trainer.train(&data, &opts)?;
    if let (Some(first), Some(last)) = (summary.first_loss, summary.last_loss) {
        println!("steps {} loss {first:.5} -> {last:.5}", summary.steps);
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&a.ckpt, None)?.to_model()?;
    let t = &model.config().train;
    let data = load_dataset(&a.data, (t.image_height, t.image_width))?;
    let report = evaluate(&model, &data.eval, &extractor(a.extractor.as_deref())?, a.quantized)?;
    let tsv = report.to_tsv();
    match &a.out {
        Some(p) => std::fs::write(p, tsv)?,
        None => print!("{tsv}"),
    }
    eprintln!("{}", report.table_row("Ours"));
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec { seed: a.seed, height: a.height, width: a.width, sigma_range: DEFAULT_SIGMA_RANGE };
    let data = make_dataset(a.count, a.train_frac, &spec)?;
    write_dataset(&a.out, &data)?;
    println!("wrote {} train and {} eval pairs", data.train.len(), data.eval.len());
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let state = match &a.ckpt {
        Some(p) => crate::service::AppState::from_checkpoint_file(p, a.max_pixels)?,
        None => crate::service::AppState::unloaded(a.max_pixels),
    };
    let app = crate::service::router(state, Some(a.ui.clone()));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        log::info!("listening on {}", a.addr);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}

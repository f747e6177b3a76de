use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use defectloop_cli::commands::{self, DataRoot, GridArgs};
use defectloop_cli::service::{serve, AppState, ServiceConfig};
use defectloop_core::backend::TrainingHyperparams;
use defectloop_core::ingest::PreprocessConfig;
use defectloop_core::metrics::EvalConfig;
use defectloop_core::Rect;

#[derive(Parser)]
#[command(name = "defectloop", version, about = "Human-in-the-loop defect annotation for diamond growth images")]
struct Cli {
    /// Directory holding images, labels, models and reports.
    #[arg(long, global = true, env = "DEFECTLOOP_DATA_ROOT", default_value = "data")]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a directory of growth-run frames: window, then reject blackout and noisy frames.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        run_id: String,
        /// Seconds between captures, used when file names carry frame numbers.
        #[arg(long, default_value_t = 60)]
        interval: u32,
        #[arg(long, default_value_t = 900)]
        window: u32,
        #[arg(long, default_value_t = 0.02)]
        blackout_max: f64,
        #[arg(long, default_value_t = 0.01)]
        noise_max: f64,
    },
    /// Crop, denoise, resize and normalize the kept frames of an ingested run.
    Preprocess {
        #[arg(long)]
        run_id: String,
        #[arg(long, default_value_t = 256)]
        resolution: u32,
        /// Crop as x,y,w,h; defaults to the centered square.
        #[arg(long, value_parser = parse_rect)]
        crop: Option<Rect>,
        #[arg(long)]
        denoise: bool,
    },
    /// Choose the next unlabeled images to annotate.
    Select {
        #[arg(long)]
        model: Option<String>,
        #[arg(short, long, default_value_t = 100)]
        k: usize,
    },
    /// Write augmented copies of every labeled original.
    Augment {
        #[arg(long, default_value_t = 5)]
        rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Train the built-in model on all labeled images and register it.
    Train {
        #[arg(long, default_value = "cli")]
        name: String,
    },
    /// Evaluate a registered model on the labeled originals.
    Evaluate {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
    },
    /// Train and evaluate one model per (resolution, augmentation rate) cell.
    Grid {
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',', default_value = "2,5,10")]
        rates: Vec<u32>,
        #[arg(long, default_value_t = 0.9)]
        split_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this many generated scenes instead of the data root.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Print pipeline state, relabel queue, grid report and registered models.
    Report,
    /// Write a synthetic labeled corpus into the data root.
    Synth {
        #[arg(long, default_value_t = 60)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        resolution: u32,
    },
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok(Rect::new(x, y, w, h)),
        _ => Err("expected x,y,w,h with positive w and h".into()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = DataRoot::new(&cli.data_root);
    match cli.command {
        Command::Ingest {
            input,
            run_id,
            interval,
            window,
            blackout_max,
            noise_max,
        } => {
            let config = PreprocessConfig {
                window_seconds: window,
                blackout_luminance_max: blackout_max,
                noise_variance_max: noise_max,
                ..PreprocessConfig::default()
            };
            commands::ingest(&root, &input, &run_id, interval, &config)
        }
        Command::Preprocess {
            run_id,
            resolution,
            crop,
            denoise,
        } => commands::preprocess(&root, &run_id, resolution, crop, denoise),
        Command::Select { model, k } => commands::select(&root, model.as_deref(), k),
        Command::Augment { rate, seed } => commands::augment(&root, rate, seed),
        Command::Serve { port, bind } => {
            std::fs::create_dir_all(&cli.data_root).context("creating data root")?;
            let state = Arc::new(AppState::new(ServiceConfig::new(&cli.data_root)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((bind.as_str(), port)).await?;
                log::info!("listening on http://{}", listener.local_addr()?);
                serve(listener, state).await
            })?;
            Ok(())
        }
        Command::Train { name } => commands::train(&root, &name, &TrainingHyperparams::default()),
        Command::Evaluate { model, iou_threshold } => commands::evaluate(
            &root,
            &model,
            &EvalConfig {
                iou_threshold,
                ..EvalConfig::default()
            },
        ),
        Command::Grid {
            resolutions,
            rates,
            split_ratio,
            seed,
            synthetic,
        } => commands::grid(
            &root,
            &GridArgs {
                resolutions,
                rates,
                split_ratio,
                split_seed: seed,
                augment_seed: seed,
                synthetic,
            },
        ),
        Command::Report => commands::report(&root),
        Command::Synth {
            images,
            seed,
            resolution,
        } => commands::synth(&root, images, seed, resolution),
    }
}

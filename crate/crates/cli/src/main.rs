use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use strl::config::{Config, ConfigError};
use strl::pipeline::{self, Model, PipelineError, TrainOutputs};
use strl::regions::RegionConfig;
use strl::scoring::{self, ScoreColumn};
use strl::video::synth::{self, Scenario, SynthConfig};
use strl::video::{self, VideoDataset};

#[derive(Parser)]
#[command(name = "strl", version, about = "Spatio-temporal relation learning for video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, PipelineError> {
        let mut c = Config::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
            c.apply_text(&text)?;
        }
        for item in &self.set {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| PipelineError::Invalid(format!("--set expects KEY=VALUE, got `{item}`")))?;
            c.set(key.trim(), value)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with `train/` and labelled `test/` splits.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// speed, region or shape
        #[arg(long, default_value = "region")]
        scenario: Scenario,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 4)]
        train_videos: usize,
        #[arg(long, default_value_t = 4)]
        test_videos: usize,
        #[arg(long, default_value_t = 24)]
        train_frames: usize,
        #[arg(long, default_value_t = 48)]
        test_frames: usize,
        #[arg(long, default_value_t = 2)]
        max_objects: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train on normal videos and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV (`epoch,l_ae,l_rl`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Keep region masks in memory across epochs.
        #[arg(long)]
        cache_masks: bool,
        /// Resize frames to the configured resolution instead of rejecting them.
        #[arg(long)]
        resize: bool,
    },
    /// Score every predictable frame and write the scores CSV.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resize: bool,
    },
    /// Frame-level ROC AUC of a scores CSV against the dataset labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Dataset whose videos carry `labels.csv`.
        #[arg(long)]
        data: PathBuf,
        /// s, s_app, s_mot or s_rl
        #[arg(long, default_value = "s")]
        column: ScoreColumn,
    },
    /// Write moving-region masks as PGM images plus `regions.csv`.
    Regions {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the learned relation map.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report parameter count and single-thread throughput.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use a trained model instead of a fresh one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only print the parameter count.
        #[arg(long)]
        params: bool,
        /// Length of the synthetic video that is timed.
        #[arg(long, default_value_t = 64)]
        frames: usize,
    },
}

fn load_data(dir: &Path, resize: Option<usize>) -> Result<VideoDataset, PipelineError> {
    let data = video::load_frames(dir, resize)?;
    info!("loaded {} videos from {}", data.videos.len(), dir.display());
    Ok(data)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            scenario,
            resolution,
            train_videos,
            test_videos,
            train_frames,
            test_frames,
            max_objects,
            seed,
        } => {
            let cfg = SynthConfig {
                scenario,
                train_videos,
                test_videos,
                train_frames,
                test_frames,
                resolution,
                seed,
                max_objects,
            };
            let output = synth::generate(&cfg).map_err(PipelineError::from)?;
            synth::write(&out, &output).map_err(PipelineError::from)?;
            println!("wrote {} train and {} test videos to {}", output.train.len(), output.test.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            log,
            cache_masks,
            resize,
        } => {
            let mut config = config.load()?;
            config.cache_masks |= cache_masks;
            let data = load_data(&data, resize.then_some(config.resolution))?;
            let mut model = Model::new(config)?;
            info!("{} parameters", model.num_params());
            let mut adam = model.optimizer();
            let outputs = TrainOutputs {
                checkpoint: Some(out.clone()),
                loss_log: log,
            };
            let losses = model.train(&mut adam, &data, &outputs)?;
            if let Some(last) = losses.last() {
                println!("epoch {} l_ae={:.6} l_rl={:.6}", last.epoch, last.l_ae, last.l_rl);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Detect {
            checkpoint,
            data,
            out,
            resize,
        } => {
            let (model, _) = Model::load(&checkpoint)?;
            let data = load_data(&data, resize.then_some(model.config.resolution))?;
            let series = model.detect(&data)?;
            scoring::write_csv(&out, &series).map_err(PipelineError::from)?;
            let n: usize = series.iter().map(|s| s.len()).sum();
            println!("scored {n} frames in {} videos", series.len());
        }
        Command::Eval { scores, data, column } => {
            let rows = scoring::read_csv(&scores).map_err(PipelineError::from)?;
            let data = load_data(&data, None)?;
            let auc = pipeline::evaluate(&rows, &data, column)?;
            println!("AUC={auc:.4}");
        }
        Command::Regions { config, data, out } => {
            let config = config.load()?;
            let data = load_data(&data, None)?;
            let (h, w) = data.videos[0].size();
            let n = pipeline::write_regions(&out, &data, config.k, &RegionConfig::for_resolution(h.min(w)))?;
            println!("wrote {n} region masks to {}", out.display());
        }
        Command::Cluster { checkpoint, clusters, out } => {
            let (model, _) = Model::load(&checkpoint)?;
            let c = pipeline::write_clusters(&out, &model, clusters)?;
            println!("objective={:.6}", c.objective.last().copied().unwrap_or(0.0));
        }
        Command::Bench {
            config,
            checkpoint,
            params,
            frames,
        } => {
            let model = match checkpoint {
                Some(path) => Model::load(&path)?.0,
                None => Model::new(config.load()?)?,
            };
            if params {
                println!("params={}", model.num_params());
                return Ok(());
            }
            let synth = synth::generate(&SynthConfig {
                train_videos: 0,
                test_videos: 1,
                test_frames: frames,
                resolution: model.config.resolution,
                seed: model.config.seed,
                ..SynthConfig::default()
            })
            .map_err(PipelineError::from)?;
            let r = pipeline::bench(&model, &synth.test[0].video).context("benchmark failed")?;
            println!("params={}", r.params);
            println!("region_ms_per_clip={:.3}", r.region_ms_per_clip);
            println!("detect_fps={:.1}", r.detect_fps);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

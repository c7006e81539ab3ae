//! Training, detection and evaluation workflows over whole datasets.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{Config, ConfigError};
use crate::nn::NormCtx;
use crate::regions::{self, RegionConfig, RegionError, RegionMaskSet};
use crate::relation::{self, Clustering, RegionTerms, Relation, RelationError};
use crate::scoring::{self, ClipScore, FusionWeights, ScoreColumn, ScoreRow, ScoreSeries, ScoringError};
use crate::stae::{self, Stae};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError, Var};
use crate::video::{self, pnm, Video, VideoDataset, VideoError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("non-finite loss {value} in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },
    #[error("video `{video}` is {got}x{got_w}, the model expects {expected}x{expected}")]
    Resolution {
        video: String,
        got: usize,
        got_w: usize,
        expected: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// Whether the error comes from malformed input rather than the
    /// environment or a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Config(ConfigError::Io { .. }) => false,
            PipelineError::Config(_) | PipelineError::Resolution { .. } | PipelineError::Invalid(_) => true,
            PipelineError::Video(e) => !matches!(e, VideoError::Io { .. }),
            PipelineError::Checkpoint(e) => !matches!(e, CheckpointError::Io { .. }),
            PipelineError::Scoring(e) => !matches!(e, ScoringError::Io { .. }),
            PipelineError::Csv { .. } => true,
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

const MASK_FACTOR: usize = 8;
const DETECT_BATCH: usize = 8;

/// Auto-encoder, relation module and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub stae: Stae,
    pub relation: Relation,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(config: Config) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let stae = Stae::new(&mut store, config.stae(), &mut rng);
        let f = config.feature_size();
        let relation = Relation::new(&mut store, config.depth(), f, f, &mut rng);
        Ok(Model {
            config,
            stae,
            relation,
            store,
        })
    }

    pub fn optimizer(&self) -> Adam<f32> {
        Adam::new(
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            &self.store,
        )
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn region_config(&self) -> RegionConfig {
        RegionConfig::for_resolution(self.config.resolution)
    }

    pub fn save(&self, path: &Path, adam: &Adam<f32>) -> Result<(), PipelineError> {
        checkpoint::write(path, &checkpoint::snapshot(&self.config, &self.store, adam))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Adam<f32>), PipelineError> {
        let table = checkpoint::read(path)?;
        let mut model = Model::new(checkpoint::stored_config(&table)?)?;
        let mut adam = model.optimizer();
        checkpoint::restore(&table, &mut model.store, &mut adam)?;
        Ok((model, adam))
    }

    fn check_video(&self, v: &Video) -> Result<(), PipelineError> {
        let (h, w) = v.size();
        let r = self.config.resolution;
        if h != r || w != r {
            return Err(PipelineError::Resolution {
                video: v.name.clone(),
                got: h,
                got_w: w,
                expected: r,
            });
        }
        Ok(())
    }

    /// Region masks of a `[k, 3, H, W]` clip at bottleneck resolution.
    pub fn clip_masks(&self, frames: &Tensor<f32>) -> Result<Vec<Vec<u8>>, PipelineError> {
        let set = regions::extract_from_clip(frames, &self.region_config())?;
        low_res_masks(&set)
    }
}

fn low_res_masks(set: &RegionMaskSet) -> Result<Vec<Vec<u8>>, PipelineError> {
    (0..set.len())
        .map(|i| relation::downsample_mask(&set.raster(i), set.height, set.width, MASK_FACTOR).map_err(Into::into))
        .collect()
}

/// Stack equally shaped tensors along a new leading axis.
fn batched(items: &[Tensor<f32>]) -> Result<Tensor<f32>, TensorError> {
    let with_axis = items
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshape(&shape)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::stack_batch(&with_axis)
}

fn mask_tensor(mask: &[u8], side: usize) -> Tensor<f32> {
    Tensor::new(&[1, 1, side, side], mask.iter().map(|&v| v as f32).collect()).expect("mask matches feature map")
}

/// `(video, t)` for every clip whose last input frame is `t` and that has a
/// following target frame.
pub fn clip_index(data: &VideoDataset, k: usize) -> Vec<(usize, usize)> {
    data.videos
        .iter()
        .enumerate()
        .flat_map(|(v, video)| (k.saturating_sub(1)..video.len().saturating_sub(1)).map(move |t| (v, t)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_ae: f64,
    pub l_rl: f64,
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

struct StepLoss {
    ae: f64,
    rl: f64,
    total: f64,
}

impl Model {
    /// Train on every clip of `data` for the configured number of epochs.
    pub fn train(&mut self, adam: &mut Adam<f32>, data: &VideoDataset, out: &TrainOutputs) -> Result<Vec<EpochLoss>, PipelineError> {
        for v in &data.videos {
            self.check_video(v)?;
        }
        let clips = clip_index(data, self.config.k);
        if clips.is_empty() {
            return Err(PipelineError::Invalid(format!("no video is longer than k = {} frames", self.config.k)));
        }
        // separate streams keep the clip order independent of negative sampling
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1);
        let mut neg_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        neg_rng.set_stream(3);
        let mut cache: Vec<Option<Vec<Vec<u8>>>> = vec![None; clips.len()];
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut log = Vec::new();
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut rng);
            let (mut ae, mut rl, mut batches) = (0.0, 0.0, 0);
            for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let mut masks = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let m = match &cache[i] {
                        Some(m) => m.clone(),
                        None => {
                            let (v, t) = clips[i];
                            let clip = video::sample_clip(data, v, t, self.config.k)?;
                            let m = self.clip_masks(&clip.frames)?;
                            if self.config.cache_masks {
                                cache[i] = Some(m.clone());
                            }
                            m
                        }
                    };
                    masks.push(m);
                }
                let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| clips[i]).collect();
                let step = self.train_step(adam, data, &batch, &masks, &mut neg_rng)?;
                if !step.total.is_finite() {
                    return Err(PipelineError::NonFinite {
                        epoch,
                        batch: b,
                        value: step.total,
                    });
                }
                ae += step.ae;
                rl += step.rl;
                batches += 1;
            }
            let entry = EpochLoss {
                epoch,
                l_ae: ae / batches as f64,
                l_rl: rl / batches as f64,
            };
            info!("epoch {epoch}: l_ae {:.6} l_rl {:.6}", entry.l_ae, entry.l_rl);
            log.push(entry);
            if let Some(path) = &out.loss_log {
                write_loss_log(path, &log)?;
            }
            let every = self.config.checkpoint_every;
            if let Some(path) = &out.checkpoint {
                if every > 0 && epoch % every == 0 && epoch != self.config.epochs {
                    self.save(path, adam)?;
                }
            }
        }
        if let Some(path) = &out.checkpoint {
            self.save(path, adam)?;
        }
        Ok(log)
    }

    fn train_step(
        &mut self,
        adam: &mut Adam<f32>,
        data: &VideoDataset,
        batch: &[(usize, usize)],
        masks: &[Vec<Vec<u8>>],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepLoss, PipelineError> {
        let cfg = &self.config;
        let k = cfg.k;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut lasts = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for &(v, t) in batch {
            let clip = video::sample_clip(data, v, t, k)?;
            inputs.push(clip.stacked());
            lasts.push(data.videos[v].frames[t].clone());
            targets.push(clip.target);
        }
        let mut g = Graph::new();
        let mut norms = NormCtx::train();
        let x = g.input(batched(&inputs)?);
        let last = g.input(batched(&lasts)?);
        let target = g.input(batched(&targets)?);
        let pred = self.stae.forward(&mut g, &self.store, &mut norms, x, last)?;
        let ae = stae::loss_ae(&mut g, target, &pred, cfg.lambda_grd, cfg.lambda_mot)?;

        let with_masks: Vec<usize> = (0..batch.len()).filter(|&b| !masks[b].is_empty()).collect();
        let mut total = ae.total;
        let mut rl_value = 0.0;
        if cfg.lambda_rl > 0.0 && !with_masks.is_empty() {
            let mut speed = Vec::with_capacity(with_masks.len());
            let mut order = Vec::with_capacity(with_masks.len());
            for &b in &with_masks {
                let (v, t) = batch[b];
                let video = &data.videos[v];
                let start = t + 1 - k;
                let idx = relation::gen_negative_speed_bounded(video.len(), start, k, rng)
                    .ok_or_else(|| PipelineError::Invalid(format!("no speed negative fits clip {t} of `{}`", video.name)))?;
                speed.push(video.stack(&idx));
                let perm = relation::gen_negative_order(k, rng)?;
                order.push(video.stack(&perm.iter().map(|p| start + p).collect::<Vec<_>>()));
            }
            let mut replay = NormCtx::replay(&norms);
            let sx = g.input(batched(&speed)?);
            let speed_scene = self.stae.encode(&mut g, &self.store, &mut replay, sx)?.scene;
            let ox = g.input(batched(&order)?);
            let order_scene = self.stae.encode(&mut g, &self.store, &mut replay, ox)?.scene;
            let mixed = self.relation.mix(&mut g, &self.store, &mut norms, pred.scene)?;

            let side = cfg.feature_size();
            let mut sum: Option<Var> = None;
            for (n, &b) in with_masks.iter().enumerate() {
                let mixed_b = g.select_batch(mixed, b)?;
                let scene_b = g.select_batch(pred.scene, b)?;
                let speed_b = g.select_batch(speed_scene, n)?;
                let order_b = g.select_batch(order_scene, n)?;
                let mut terms = Vec::with_capacity(masks[b].len());
                for m in &masks[b] {
                    let mask = mask_tensor(m, side);
                    let pool = |g: &mut Graph<f32>, s: Var| -> Result<Var, TensorError> {
                        if cfg.negative_global_pool {
                            g.global_average_pool(s, None, false)
                        } else {
                            relation::object_embedding(g, s, &mask, cfg.literal_gap)
                        }
                    };
                    let positive = relation::object_embedding(&mut g, scene_b, &mask, cfg.literal_gap)?;
                    let speed = pool(&mut g, speed_b)?;
                    let order = pool(&mut g, order_b)?;
                    terms.push(RegionTerms {
                        mask,
                        positive,
                        speed,
                        order,
                    });
                }
                let l = relation::loss_rl_clip(&mut g, mixed_b, &terms, cfg.rl_loss_form)?;
                sum = Some(match sum {
                    None => l,
                    Some(s) => g.add(s, l)?,
                });
            }
            // clips without masks contribute zero to the batch mean
            let l_rl = g.scale(sum.expect("at least one clip with masks"), 1.0 / batch.len() as f32)?;
            rl_value = g.value(l_rl).item() as f64;
            total = relation::loss_total(&mut g, ae.total, l_rl, cfg.lambda_rl)?;
        }
        let step = StepLoss {
            ae: g.value(ae.total).item() as f64,
            rl: rl_value,
            total: g.value(total).item() as f64,
        };
        if !step.total.is_finite() {
            return Ok(step);
        }
        self.store.zero_grad();
        g.backward_into(total, &mut self.store)?;
        adam.step(&mut self.store)?;
        norms.update_running(&mut self.store)?;
        Ok(step)
    }
}

pub fn write_loss_log(path: &Path, log: &[EpochLoss]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["epoch", "l_ae", "l_rl"]).map_err(csv_err(path))?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.l_ae.to_string(), e.l_rl.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

impl Model {
    /// Raw scores of the clips ending at `ends` (last input frame indices).
    pub fn score_clips(&self, video: &Video, ends: &[usize]) -> Result<Vec<ClipScore>, PipelineError> {
        let cfg = &self.config;
        let k = cfg.k;
        let mut inputs = Vec::with_capacity(ends.len());
        let mut lasts = Vec::with_capacity(ends.len());
        let mut targets = Vec::with_capacity(ends.len());
        let mut masks = Vec::with_capacity(ends.len());
        for &t in ends {
            if t + 1 < k || t + 1 >= video.len() {
                return Err(VideoError::OutOfRange { t, k, len: video.len() }.into());
            }
            let idx: Vec<usize> = (t + 1 - k..=t).collect();
            let stacked = video.stack(&idx);
            if cfg.lambda_rl > 0.0 {
                let (h, w) = video.size();
                masks.push(self.clip_masks(&stacked.clone().reshape(&[k, 3, h, w])?)?);
            }
            inputs.push(stacked);
            lasts.push(video.frames[t].clone());
            targets.push(video.frames[t + 1].clone());
        }
        let mut g = Graph::inference();
        let mut norms = NormCtx::infer();
        let x = g.input(batched(&inputs)?);
        let last = g.input(batched(&lasts)?);
        let target = g.input(batched(&targets)?);
        let pred = self.stae.forward(&mut g, &self.store, &mut norms, x, last)?;
        let mixed = if cfg.lambda_rl > 0.0 {
            Some(self.relation.mix(&mut g, &self.store, &mut norms, pred.scene)?)
        } else {
            None
        };
        let side = cfg.feature_size();
        let mut out = Vec::with_capacity(ends.len());
        for b in 0..ends.len() {
            let target_b = g.select_batch(target, b)?;
            let frame_b = g.select_batch(pred.frame, b)?;
            let warped_b = g.select_batch(pred.warped, b)?;
            let app = stae::loss_prediction(&mut g, target_b, frame_b, cfg.lambda_grd)?;
            let mot = stae::loss_prediction(&mut g, target_b, warped_b, cfg.lambda_grd)?;
            let plaus = match mixed {
                Some(mixed) => {
                    let mixed_b = g.select_batch(mixed, b)?;
                    let scene_b = g.select_batch(pred.scene, b)?;
                    let mut maps = Vec::with_capacity(masks[b].len());
                    for m in &masks[b] {
                        let e = relation::object_embedding(&mut g, scene_b, &mask_tensor(m, side), cfg.literal_gap)?;
                        let psi = relation::relation_score(&mut g, mixed_b, e)?;
                        maps.push(g.value(psi).data().iter().map(|&v| v as f64).collect());
                    }
                    scoring::plausibility(&maps, &masks[b], cfg.plausibility_sum)?
                }
                None => 1.0,
            };
            out.push(ClipScore {
                app: g.value(app).item() as f64,
                mot: g.value(mot).item() as f64,
                plaus,
            });
        }
        Ok(out)
    }

    /// Normalized, fused and smoothed scores for every predictable frame.
    pub fn score_video(&self, video: &Video) -> Result<ScoreSeries, PipelineError> {
        self.check_video(video)?;
        let k = self.config.k;
        if video.len() <= k {
            return Err(PipelineError::Invalid(format!("video `{}` has {} frames, needs more than k = {k}", video.name, video.len())));
        }
        let ends: Vec<usize> = (k - 1..video.len() - 1).collect();
        let mut clips = Vec::with_capacity(ends.len());
        for chunk in ends.chunks(DETECT_BATCH) {
            clips.extend(self.score_clips(video, chunk)?);
        }
        let frames = ends.iter().map(|t| t + 1).collect();
        let weights = FusionWeights::new(self.config.lambda_mot, self.config.lambda_rl);
        Ok(ScoreSeries::from_clips(&video.name, frames, &clips, weights, self.config.smoothing)?)
    }

    pub fn detect(&self, data: &VideoDataset) -> Result<Vec<ScoreSeries>, PipelineError> {
        data.videos.iter().map(|v| self.score_video(v)).collect()
    }
}

/// Pooled frame-level AUC of one score column against the dataset labels.
pub fn evaluate(rows: &[ScoreRow], data: &VideoDataset, column: ScoreColumn) -> Result<f64, PipelineError> {
    let labels: HashMap<&str, &[u8]> = data
        .videos
        .iter()
        .filter_map(|v| v.labels.as_deref().map(|l| (v.name.as_str(), l)))
        .collect();
    let mut scores = Vec::with_capacity(rows.len());
    let mut truth = Vec::with_capacity(rows.len());
    for r in rows {
        let l = labels
            .get(r.video.as_str())
            .ok_or_else(|| PipelineError::Invalid(format!("no labels for video `{}`", r.video)))?;
        let label = l
            .get(r.frame)
            .ok_or_else(|| PipelineError::Invalid(format!("video `{}` has no frame {}", r.video, r.frame)))?;
        scores.push(r.get(column));
        truth.push(*label);
    }
    Ok(scoring::auc(&scores, &truth)?)
}

/// Regions of every clip, keyed by the clip's last frame index.
pub fn video_regions(video: &Video, k: usize, cfg: &RegionConfig) -> Result<Vec<(usize, RegionMaskSet)>, PipelineError> {
    let (h, w) = video.size();
    (k.saturating_sub(1)..video.len())
        .map(|t| {
            let idx: Vec<usize> = (t + 1 - k..=t).collect();
            let frames = video.stack(&idx).reshape(&[k, 3, h, w])?;
            Ok((t, regions::extract_from_clip(&frames, cfg)?))
        })
        .collect()
}

/// One PGM per region plus `regions.csv` with `video,frame,x0,y0,x1,y1`.
pub fn write_regions(dir: &Path, data: &VideoDataset, k: usize, cfg: &RegionConfig) -> Result<usize, PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("regions.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err(&csv_path))?;
    w.write_record(["video", "frame", "x0", "y0", "x1", "y1"]).map_err(csv_err(&csv_path))?;
    let mut count = 0;
    for video in &data.videos {
        for (t, set) in video_regions(video, k, cfg)? {
            for (i, m) in set.masks.iter().enumerate() {
                let r = m.rect;
                w.write_record([video.name.clone(), t.to_string(), r.x0.to_string(), r.y0.to_string(), r.x1.to_string(), r.y1.to_string()])
                    .map_err(csv_err(&csv_path))?;
                let gray: Vec<u8> = set.raster(i).iter().map(|&v| v * 255).collect();
                let path = dir.join(format!("{}_{t:06}_{i}.pgm", video.name));
                pnm::write_pgm(&path, set.width, set.height, &gray)?;
                count += 1;
            }
        }
    }
    w.flush().map_err(io_err(&csv_path))?;
    Ok(count)
}

/// Cluster the relation map and write `labels.pgm` and `clusters.csv`
/// (`cell,label,distance`).
pub fn write_clusters(dir: &Path, model: &Model, c: usize) -> Result<Clustering, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(2);
    let clusters = relation::cluster_relation_map(model.store.value(model.relation.map), c, &mut rng)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let gray: Vec<u8> = clusters.labels.iter().map(|&l| (l * 255 / (c - 1)) as u8).collect();
    pnm::write_pgm(&dir.join("labels.pgm"), clusters.width, clusters.height, &gray)?;
    let path = dir.join("clusters.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["cell", "label", "distance"]).map_err(csv_err(&path))?;
    for (cell, (l, d)) in clusters.labels.iter().zip(&clusters.distances).enumerate() {
        w.write_record([cell.to_string(), l.to_string(), d.to_string()]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(clusters)
}

#[derive(Clone, Copy, Debug)]
pub struct BenchReport {
    pub params: usize,
    pub region_ms_per_clip: f64,
    pub detect_fps: f64,
}

/// Time region extraction and full scoring on `video`.
pub fn bench(model: &Model, video: &Video) -> Result<BenchReport, PipelineError> {
    let k = model.config.k;
    let cfg = model.region_config();
    let start = Instant::now();
    let clips = video_regions(video, k, &cfg)?.len();
    let region_ms = start.elapsed().as_secs_f64() * 1e3 / clips.max(1) as f64;
    let start = Instant::now();
    let scored = model.score_video(video)?.len();
    let fps = scored as f64 / start.elapsed().as_secs_f64();
    Ok(BenchReport {
        params: model.num_params(),
        region_ms_per_clip: region_ms,
        detect_fps: fps,
    })
}

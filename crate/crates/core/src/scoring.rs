//! Frame-level anomaly scores: per-video normalization, fusion, temporal
//! smoothing and ROC AUC.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("empty score series")]
    Empty,
    #[error("smoothing window {0} is not odd")]
    EvenWindow(usize),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
}

/// Plausibility of a clip: the smallest masked aggregate of `psi` over the
/// masks, or 1 without masks. Masks and `psi` maps are row-major on the same
/// grid, one map per mask.
pub fn plausibility(psi: &[Vec<f64>], masks: &[Vec<u8>], masked_sum: bool) -> Result<f64, ScoringError> {
    if psi.len() != masks.len() {
        return Err(ScoringError::LengthMismatch {
            what: "relation maps vs masks",
            left: psi.len(),
            right: masks.len(),
        });
    }
    let mut best = f64::INFINITY;
    for (p, m) in psi.iter().zip(masks) {
        if p.len() != m.len() {
            return Err(ScoringError::LengthMismatch {
                what: "relation map vs mask cells",
                left: p.len(),
                right: m.len(),
            });
        }
        let (sum, n) = p.iter().zip(m).filter(|(_, &c)| c != 0).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            continue;
        }
        let agg = if masked_sum { sum } else { sum / n as f64 };
        best = best.min(agg);
    }
    Ok(if best.is_finite() { best } else { 1.0 })
}

/// Min-max rescaling to `[0, 1]`; a constant series maps to zeros.
pub fn normalize(series: &[f64]) -> Result<Vec<f64>, ScoringError> {
    if series.is_empty() {
        return Err(ScoringError::Empty);
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(series.iter().map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 }).collect())
}

/// Weights of the appearance, motion and relation terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub app: f64,
    pub mot: f64,
    pub rl: f64,
}

impl FusionWeights {
    pub fn new(lambda_mot: f64, lambda_rl: f64) -> Self {
        FusionWeights {
            app: 1.0,
            mot: lambda_mot,
            rl: lambda_rl,
        }
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights::new(1.0, 0.5)
    }
}

/// Fused score of normalized components; plausibility enters inverted.
pub fn fuse(app: f64, mot: f64, plaus: f64, w: FusionWeights) -> f64 {
    w.app * app + w.mot * mot + w.rl * (1.0 - plaus)
}

/// Centered moving average with replicated end values.
pub fn smooth(series: &[f64], window: usize) -> Result<Vec<f64>, ScoringError> {
    if window % 2 == 0 {
        return Err(ScoringError::EvenWindow(window));
    }
    if series.is_empty() {
        return Err(ScoringError::Empty);
    }
    let half = (window / 2) as isize;
    let n = series.len() as isize;
    let at = |i: isize| series[i.clamp(0, n - 1) as usize];
    Ok((0..n).map(|i| (-half..=half).map(|o| at(i + o)).sum::<f64>() / window as f64).collect())
}

/// Area under the ROC curve via the rank statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, ScoringError> {
    if scores.len() != labels.len() {
        return Err(ScoringError::LengthMismatch {
            what: "scores vs labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ScoringError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Raw per-clip scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipScore {
    pub app: f64,
    pub mot: f64,
    pub plaus: f64,
}

/// Scores of one video, indexed by the predicted frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub video: String,
    pub frames: Vec<usize>,
    /// Normalized appearance residual.
    pub app: Vec<f64>,
    /// Normalized motion residual.
    pub mot: Vec<f64>,
    /// Normalized plausibility.
    pub plaus: Vec<f64>,
    /// Fused and smoothed score.
    pub fused: Vec<f64>,
}

impl ScoreSeries {
    /// Normalize each component, fuse and smooth.
    pub fn from_clips(video: &str, frames: Vec<usize>, clips: &[ClipScore], weights: FusionWeights, window: usize) -> Result<Self, ScoringError> {
        if frames.len() != clips.len() {
            return Err(ScoringError::LengthMismatch {
                what: "frames vs clip scores",
                left: frames.len(),
                right: clips.len(),
            });
        }
        let app = normalize(&clips.iter().map(|c| c.app).collect::<Vec<_>>())?;
        let mot = normalize(&clips.iter().map(|c| c.mot).collect::<Vec<_>>())?;
        let plaus = normalize(&clips.iter().map(|c| c.plaus).collect::<Vec<_>>())?;
        let raw: Vec<f64> = (0..clips.len()).map(|i| fuse(app[i], mot[i], plaus[i], weights)).collect();
        let fused = smooth(&raw, window)?;
        Ok(ScoreSeries {
            video: video.to_string(),
            frames,
            app,
            mot,
            plaus,
            fused,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Column of the scores CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreColumn {
    App,
    Mot,
    Rl,
    Fused,
}

impl std::str::FromStr for ScoreColumn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s_app" => Ok(ScoreColumn::App),
            "s_mot" => Ok(ScoreColumn::Mot),
            "s_rl" => Ok(ScoreColumn::Rl),
            "s" => Ok(ScoreColumn::Fused),
            other => Err(format!("unknown score column `{other}` (s, s_app, s_mot, s_rl)")),
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["video", "frame", "s_app", "s_mot", "s_rl", "s"];

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub video: String,
    pub frame: usize,
    pub s_app: f64,
    pub s_mot: f64,
    pub s_rl: f64,
    pub s: f64,
}

impl ScoreRow {
    pub fn get(&self, column: ScoreColumn) -> f64 {
        match column {
            ScoreColumn::App => self.s_app,
            ScoreColumn::Mot => self.s_mot,
            ScoreColumn::Rl => self.s_rl,
            ScoreColumn::Fused => self.s,
        }
    }
}

pub fn rows(series: &[ScoreSeries]) -> Vec<ScoreRow> {
    series
        .iter()
        .flat_map(|s| {
            (0..s.len()).map(move |i| ScoreRow {
                video: s.video.clone(),
                frame: s.frames[i],
                s_app: s.app[i],
                s_mot: s.mot[i],
                s_rl: 1.0 - s.plaus[i],
                s: s.fused[i],
            })
        })
        .collect()
}

pub fn write_csv(path: &Path, series: &[ScoreSeries]) -> Result<(), ScoringError> {
    let csv_err = |source| ScoringError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|source| ScoringError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows(series) {
        w.write_record([
            r.video,
            r.frame.to_string(),
            r.s_app.to_string(),
            r.s_mot.to_string(),
            r.s_rl.to_string(),
            r.s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| ScoringError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_csv(path: &Path) -> Result<Vec<ScoreRow>, ScoringError> {
    let malformed = |detail: String| ScoringError::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(|source| ScoringError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader
        .headers()
        .map_err(|source| ScoringError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(malformed(format!("header {:?}, expected {}", header.iter().collect::<Vec<_>>(), CSV_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|source| ScoringError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let num = |i: usize| -> Result<f64, ScoringError> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(format!("row {}: bad {} `{}`", line + 1, CSV_HEADER[i], &record[i])))
        };
        let frame = record[1]
            .parse()
            .map_err(|_| malformed(format!("row {}: bad frame `{}`", line + 1, &record[1])))?;
        out.push(ScoreRow {
            video: record[0].to_string(),
            frame,
            s_app: num(2)?,
            s_mot: num(3)?,
            s_rl: num(4)?,
            s: num(5)?,
        });
    }
    if out.is_empty() {
        return Err(malformed("no rows".into()));
    }
    Ok(out)
}

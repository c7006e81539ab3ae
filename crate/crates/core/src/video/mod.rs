//! Frame ingestion, clip sampling and the synthetic scenario generator.
//!
//! Frames are stored as `[3, H, W]` tensors with values in `[-1, 1]`.

pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum VideoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed pixmap: {detail}")]
    Pixmap { path: PathBuf, detail: String },
    #[error("{dir}: frame numbers are not contiguous, expected {expected} but found {found}")]
    MissingFrame { dir: PathBuf, expected: usize, found: usize },
    #[error("{path}: {detail}")]
    Labels { path: PathBuf, detail: String },
    #[error("{0}: no frames found")]
    Empty(PathBuf),
    #[error("{dir}: frame size {found:?} differs from the first frame {expected:?}")]
    MixedSizes { dir: PathBuf, expected: (usize, usize), found: (usize, usize) },
    #[error("clip ending at frame {t} with length {k} does not fit a video of {len} frames")]
    OutOfRange { t: usize, k: usize, len: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl VideoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        VideoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One video: an ordered frame sequence with optional per-frame labels.
#[derive(Clone, Debug)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
    /// 0 normal, 1 anomalous; one entry per frame when present.
    pub labels: Option<Vec<u8>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the frames.
    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    /// Stack the given frames along channels into `[3 * indices.len(), H, W]`.
    pub fn stack(&self, indices: &[usize]) -> Tensor<f32> {
        let (h, w) = self.size();
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            data.extend_from_slice(self.frames[i].data());
        }
        Tensor::new(&[indices.len() * 3, h, w], data).expect("frames share one size")
    }
}

#[derive(Clone, Debug, Default)]
pub struct VideoDataset {
    pub videos: Vec<Video>,
}

/// `k` consecutive frames ending at `end` plus the frame that follows.
#[derive(Clone, Debug)]
pub struct VideoClip {
    /// `[k, 3, H, W]`
    pub frames: Tensor<f32>,
    pub k: usize,
    pub video: usize,
    pub start: usize,
    /// `[3, H, W]`
    pub target: Tensor<f32>,
}

impl VideoClip {
    /// Frames concatenated along channels, `[3k, H, W]`.
    pub fn stacked(&self) -> Tensor<f32> {
        let s = self.frames.shape();
        self.frames.clone().reshape(&[s[0] * s[1], s[2], s[3]]).expect("same element count")
    }

    pub fn frame_indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.k
    }
}

pub fn sample_clip(dataset: &VideoDataset, video: usize, t: usize, k: usize) -> Result<VideoClip, VideoError> {
    let v = dataset
        .videos
        .get(video)
        .ok_or_else(|| VideoError::Invalid(format!("video index {video} out of range")))?;
    if k < 2 {
        return Err(VideoError::Invalid(format!("clip length {k} is below 2")));
    }
    if t + 1 < k || t + 1 >= v.len() {
        return Err(VideoError::OutOfRange { t, k, len: v.len() });
    }
    let start = t + 1 - k;
    let indices: Vec<usize> = (start..=t).collect();
    let (h, w) = v.size();
    let frames = v.stack(&indices).reshape(&[k, 3, h, w]).expect("same element count");
    Ok(VideoClip {
        frames,
        k,
        video,
        start,
        target: v.frames[t + 1].clone(),
    })
}

/// Map 8-bit samples to `[-1, 1]`.
pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

// exact when `a == b`, so constant images survive resizing unchanged
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resize of a `[C, H, W]` tensor; corner pixels map onto corner pixels.
pub fn resize_bilinear(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = src.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f32 / (n_out - 1) as f32
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(h, out_h), scale(w, out_w));
    let data = src.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = oy as f32 * sy;
            let y0 = (fy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ox as f32 * sx;
                let x0 = (fx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f32;
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sizes agree")
}

pub fn pixmap_to_tensor(p: &pnm::Pixmap) -> Tensor<f32> {
    let plane = p.width * p.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in p.rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = byte_to_unit(px[c]);
        }
    }
    Tensor::new(&[3, p.height, p.width], data).expect("sizes agree")
}

pub fn tensor_to_rgb(frame: &Tensor<f32>) -> Vec<u8> {
    let s = frame.shape();
    let plane = s[1] * s[2];
    let d = frame.data();
    (0..plane).flat_map(|i| (0..3).map(move |c| unit_to_byte(d[c * plane + i]))).collect()
}

fn frame_number(name: &str) -> Option<usize> {
    let stem = name.strip_prefix("frame_")?;
    let digits = stem.strip_suffix(".ppm").or_else(|| stem.strip_suffix(".pgm"))?;
    if digits.len() != 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn list_frames(dir: &Path) -> Result<Vec<(usize, PathBuf)>, VideoError> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| VideoError::io(dir, e))? {
        let entry = entry.map_err(|e| VideoError::io(dir, e))?;
        if let Some(n) = entry.file_name().to_str().and_then(frame_number) {
            frames.push((n, entry.path()));
        }
    }
    frames.sort();
    Ok(frames)
}

fn read_labels(path: &Path, numbers: &[usize]) -> Result<Vec<u8>, VideoError> {
    let bad = |detail: String| VideoError::Labels {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["frame", "label"] {
        return Err(bad(format!("expected header `frame,label`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut labels = Vec::with_capacity(numbers.len());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let frame: usize = record[0].trim().parse().map_err(|_| bad(format!("row {}: bad frame number", row + 1)))?;
        let label: u8 = match record[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("row {}: label `{other}` is not 0 or 1", row + 1))),
        };
        if numbers.get(row) != Some(&frame) {
            return Err(bad(format!("row {} names frame {frame}, which is out of sequence", row + 1)));
        }
        labels.push(label);
    }
    if labels.len() != numbers.len() {
        return Err(bad(format!("{} labels for {} frames", labels.len(), numbers.len())));
    }
    Ok(labels)
}

/// Load one video directory, resizing to `resolution` when given.
pub fn load_video(dir: &Path, resolution: Option<usize>) -> Result<Video, VideoError> {
    let files = list_frames(dir)?;
    if files.is_empty() {
        return Err(VideoError::Empty(dir.to_path_buf()));
    }
    let first = files[0].0;
    for (i, (n, _)) in files.iter().enumerate() {
        if *n != first + i {
            return Err(VideoError::MissingFrame {
                dir: dir.to_path_buf(),
                expected: first + i,
                found: *n,
            });
        }
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut size = None;
    for (_, path) in &files {
        let p = pnm::read(path)?;
        match size {
            None => size = Some((p.height, p.width)),
            Some(s) if s != (p.height, p.width) => {
                return Err(VideoError::MixedSizes {
                    dir: dir.to_path_buf(),
                    expected: s,
                    found: (p.height, p.width),
                })
            }
            _ => {}
        }
        let t = pixmap_to_tensor(&p);
        frames.push(match resolution {
            Some(r) => resize_bilinear(&t, r, r),
            None => t,
        });
    }
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let numbers: Vec<usize> = files.iter().map(|(n, _)| *n).collect();
        Some(read_labels(&labels_path, &numbers)?)
    } else {
        None
    };
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Video { name, frames, labels })
}

/// Load a dataset. A directory holding frame files is one video; otherwise
/// every subdirectory (in name order) is a video.
pub fn load_frames(dir: &Path, resolution: Option<usize>) -> Result<VideoDataset, VideoError> {
    if !list_frames(dir)?.is_empty() {
        return Ok(VideoDataset {
            videos: vec![load_video(dir, resolution)?],
        });
    }
    let mut subdirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| VideoError::io(dir, e))? {
        let entry = entry.map_err(|e| VideoError::io(dir, e))?;
        if entry.path().is_dir() {
            subdirs.push(entry.path());
        }
    }
    subdirs.sort();
    let videos = subdirs
        .iter()
        .map(|d| load_video(d, resolution))
        .collect::<Result<Vec<_>, _>>()?;
    if videos.is_empty() {
        return Err(VideoError::Empty(dir.to_path_buf()));
    }
    Ok(VideoDataset { videos })
}

/// Write a video as `frame_%06d.ppm` files (numbered from 0) plus `labels.csv`
/// when labels are present.
pub fn write_video(dir: &Path, video: &Video) -> Result<(), VideoError> {
    fs::create_dir_all(dir).map_err(|e| VideoError::io(dir, e))?;
    for (i, frame) in video.frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:06}.ppm"));
        let s = frame.shape();
        fs::write(&path, pnm::encode_ppm(s[2], s[1], &tensor_to_rgb(frame))).map_err(|e| VideoError::io(&path, e))?;
    }
    if let Some(labels) = &video.labels {
        let path = dir.join("labels.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| VideoError::Labels {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let io = |e: csv::Error| VideoError::Labels {
            path: path.clone(),
            detail: e.to_string(),
        };
        w.write_record(["frame", "label"]).map_err(io)?;
        for (i, l) in labels.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| VideoError::io(&path, e))?;
    }
    Ok(())
}

pub fn write_dataset(dir: &Path, dataset: &VideoDataset) -> Result<(), VideoError> {
    for video in &dataset.videos {
        write_video(&dir.join(&video.name), video)?;
    }
    Ok(())
}

//! Synthetic surveillance-style scenes.
//!
//! A fixed textured background is split into an allowed left half and a
//! forbidden right half. Normal videos show one or two checker-textured
//! squares wandering at 1 px/frame inside the allowed half. Test videos add
//! one anomaly per video: a speed burst, a walk into the forbidden half, or
//! an unfamiliar triangle.
//!
//! The training split depends only on the seed, so every scenario shares
//! the same normal training videos.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_video, Video, VideoError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Speed,
    Region,
    Shape,
}

impl Scenario {
    fn stream(self) -> u64 {
        match self {
            Scenario::Speed => 1,
            Scenario::Region => 2,
            Scenario::Shape => 3,
        }
    }
}

impl FromStr for Scenario {
    type Err = VideoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "speed" => Ok(Scenario::Speed),
            "region" => Ok(Scenario::Region),
            "shape" => Ok(Scenario::Shape),
            other => Err(VideoError::Invalid(format!("unknown scenario `{other}` (speed, region, shape)"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Speed => "speed",
            Scenario::Region => "region",
            Scenario::Shape => "shape",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub scenario: Scenario,
    pub train_videos: usize,
    pub test_videos: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Upper bound on simultaneously visible normal objects (1 or 2).
    pub max_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenario: Scenario::Region,
            train_videos: 4,
            test_videos: 4,
            train_frames: 24,
            test_frames: 48,
            resolution: 64,
            seed: 7,
            max_objects: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Square,
    Triangle,
}

/// Where an object was drawn in one frame; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub kind: ObjectKind,
    pub x: i32,
    pub y: i32,
    pub size: i32,
}

impl Placement {
    /// Centroid of the bounding box, in pixels.
    pub fn centroid(&self) -> (f32, f32) {
        let half = self.size as f32 / 2.0;
        (self.x as f32 + half, self.y as f32 + half)
    }

    /// `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub fn bounds(&self) -> (i32, i32, i32, i32) {
        (self.x, self.y, self.x + self.size, self.y + self.size)
    }
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub video: Video,
    /// Objects drawn in each frame.
    pub objects: Vec<Vec<Placement>>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train: Vec<SynthVideo>,
    pub test: Vec<SynthVideo>,
}

pub fn object_size(resolution: usize) -> i32 {
    (resolution as i32 / 5).max(6)
}

const DIRECTIONS: [(i32, i32); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

#[derive(Clone, Copy, Debug)]
struct Mover {
    kind: ObjectKind,
    x: i32,
    y: i32,
    dx: i32,
    dy: i32,
    size: i32,
    /// Horizontal extent the object may occupy, `[0, x_limit)`.
    x_limit: i32,
}

impl Mover {
    fn random(rng: &mut ChaCha8Rng, kind: ObjectKind, res: i32) -> Self {
        let size = object_size(res as usize);
        let x_limit = res / 2;
        let (dx, dy) = DIRECTIONS[rng.random_range(0..8)];
        Mover {
            kind,
            x: rng.random_range(0..=x_limit - size),
            y: rng.random_range(0..=res - size),
            dx,
            dy,
            size,
            x_limit,
        }
    }

    fn placement(&self) -> Placement {
        Placement {
            kind: self.kind,
            x: self.x,
            y: self.y,
            size: self.size,
        }
    }

    /// Advance by `speed` pixels along the current direction, reflecting off
    /// the allowed bounds.
    fn advance(&mut self, speed: i32, res: i32) {
        for _ in 0..speed {
            if !(0..=self.x_limit - self.size).contains(&(self.x + self.dx)) {
                self.dx = -self.dx;
            }
            if !(0..=res - self.size).contains(&(self.y + self.dy)) {
                self.dy = -self.dy;
            }
            self.x += self.dx;
            self.y += self.dy;
        }
    }
}

fn background(res: usize) -> Tensor<f32> {
    let plane = res * res;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..res {
        for x in 0..res {
            let i = y * res + x;
            let rgb = if x < res / 2 {
                // diagonal stripes, cool grey
                let v = if ((x + y) / 4) % 2 == 0 { -0.55 } else { -0.45 };
                [v, v + 0.05, v + 0.15]
            } else {
                // horizontal stripes, olive
                let v = if (y / 3) % 2 == 0 { -0.5 } else { -0.35 };
                [v + 0.1, v + 0.15, v - 0.1]
            };
            for c in 0..3 {
                data[c * plane + i] = rgb[c];
            }
        }
    }
    Tensor::new(&[3, res, res], data).expect("sizes agree")
}

fn covers(p: &Placement, lx: i32, ly: i32) -> bool {
    match p.kind {
        ObjectKind::Square => true,
        // apex at the top centre, base along the bottom row
        ObjectKind::Triangle => 2 * (2 * lx - (p.size - 1)).abs() <= 2 * ly + 1,
    }
}

fn draw(frame: &mut Tensor<f32>, p: &Placement) {
    let res = frame.shape()[1] as i32;
    let plane = (res * res) as usize;
    let data = frame.data_mut();
    for ly in 0..p.size {
        for lx in 0..p.size {
            let (x, y) = (p.x + lx, p.y + ly);
            if !(0..res).contains(&x) || !(0..res).contains(&y) || !covers(p, lx, ly) {
                continue;
            }
            let bright = ((lx / 2) + (ly / 2)) % 2 == 0;
            let rgb = match (p.kind, bright) {
                (ObjectKind::Square, true) => [0.95, 0.9, 0.6],
                (ObjectKind::Square, false) => [0.55, 0.5, 0.25],
                (ObjectKind::Triangle, true) => [0.5, 0.95, 0.95],
                (ObjectKind::Triangle, false) => [0.2, 0.6, 0.65],
            };
            let i = (y * res + x) as usize;
            for c in 0..3 {
                data[c * plane + i] = rgb[c];
            }
        }
    }
}

fn render(bg: &Tensor<f32>, objects: &[Placement]) -> Tensor<f32> {
    let mut frame = bg.clone();
    for p in objects {
        draw(&mut frame, p);
    }
    frame
}

fn normal_movers(rng: &mut ChaCha8Rng, res: i32, max_objects: usize) -> Vec<Mover> {
    let count = if max_objects >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
    (0..count).map(|_| Mover::random(rng, ObjectKind::Square, res)).collect()
}

fn normal_video(rng: &mut ChaCha8Rng, name: String, frames: usize, res: usize, max_objects: usize, bg: &Tensor<f32>) -> SynthVideo {
    let res_i = res as i32;
    let mut movers = normal_movers(rng, res_i, max_objects);
    let mut out = Vec::with_capacity(frames);
    let mut objects = Vec::with_capacity(frames);
    for _ in 0..frames {
        let placed: Vec<Placement> = movers.iter().map(Mover::placement).collect();
        out.push(render(bg, &placed));
        objects.push(placed);
        for m in &mut movers {
            m.advance(1, res_i);
        }
    }
    SynthVideo {
        video: Video {
            name,
            frames: out,
            labels: None,
        },
        objects,
    }
}

fn anomalous_video(rng: &mut ChaCha8Rng, scenario: Scenario, name: String, frames: usize, res: usize, max_objects: usize, bg: &Tensor<f32>) -> SynthVideo {
    let res_i = res as i32;
    let mut movers = normal_movers(rng, res_i, max_objects);
    let onset = rng.random_range(frames / 3..=frames / 2);
    let window = (frames / 3).max(1);
    let size = movers[0].size;
    match scenario {
        Scenario::Region => {
            // head right so the centroid crosses the midline exactly at `onset`
            let crossing = res_i / 2 - size / 2;
            let onset = (onset as i32).min(crossing);
            let lead = &mut movers[0];
            lead.x = crossing - onset;
            lead.dx = 1;
            lead.x_limit = res_i;
        }
        Scenario::Speed | Scenario::Shape => {}
    }
    let mut intruder = None;
    let mut out = Vec::with_capacity(frames);
    let mut objects = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    for f in 0..frames {
        let in_window = f >= onset && f < onset + window;
        if scenario == Scenario::Shape && f == onset {
            intruder = Some(Mover::random(rng, ObjectKind::Triangle, res_i));
        }
        if scenario == Scenario::Shape && f == onset + window {
            intruder = None;
        }
        let placed: Vec<Placement> = movers.iter().chain(intruder.iter()).map(Mover::placement).collect();
        let anomalous = match scenario {
            Scenario::Speed => f > onset && f <= onset + window,
            Scenario::Region => placed[0].centroid().0 >= (res / 2) as f32,
            Scenario::Shape => intruder.is_some(),
        };
        labels.push(anomalous as u8);
        out.push(render(bg, &placed));
        objects.push(placed);
        for (i, m) in movers.iter_mut().enumerate() {
            let speed = if i == 0 && scenario == Scenario::Speed && in_window { 4 } else { 1 };
            m.advance(speed, res_i);
        }
        if let Some(t) = &mut intruder {
            t.advance(1, res_i);
        }
    }
    SynthVideo {
        video: Video {
            name,
            frames: out,
            labels: Some(labels),
        },
        objects,
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput, VideoError> {
    let res = config.resolution;
    if res == 0 || res % 8 != 0 {
        return Err(VideoError::Invalid(format!("resolution {res} is not a positive multiple of 8")));
    }
    if res < 32 {
        return Err(VideoError::Invalid(format!("resolution {res} is too small for the scene layout")));
    }
    if config.train_frames < 2 || config.test_frames < 6 {
        return Err(VideoError::Invalid("too few frames per video".into()));
    }
    let bg = background(res);
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_rng.set_stream(0);
    let train = (0..config.train_videos)
        .map(|i| normal_video(&mut train_rng, format!("video_{i:03}"), config.train_frames, res, config.max_objects, &bg))
        .collect();
    let mut test_rng = ChaCha8Rng::seed_from_u64(config.seed);
    test_rng.set_stream(config.scenario.stream());
    let test = (0..config.test_videos)
        .map(|i| {
            anomalous_video(
                &mut test_rng,
                config.scenario,
                format!("video_{i:03}"),
                config.test_frames,
                res,
                config.max_objects,
                &bg,
            )
        })
        .collect();
    Ok(SynthOutput { train, test })
}

/// Write `train/video_XXX/` and `test/video_XXX/` (with `labels.csv`) under `dir`.
pub fn write(dir: &Path, output: &SynthOutput) -> Result<(), VideoError> {
    for (split, videos) in [("train", &output.train), ("test", &output.test)] {
        for v in videos {
            write_video(&dir.join(split).join(&v.video.name), &v.video)?;
        }
    }
    Ok(())
}

//! Moving-region extraction from a short clip.
//!
//! Second-order temporal differences suppress smooth (camera-like) motion,
//! their blurred Sobel edges are gated by a first-order motion mask, and the
//! surviving pixels are cleaned by a morphological opening and grouped into
//! 8-connected components. Each large enough component yields a filled
//! rectangle mask 1.5 times its bounding box.

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum RegionError {
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("frame {index} is {found:?}, expected {expected:?}")]
    SizeMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("expected a [k, 3, H, W] clip, got {0:?}")]
    ClipShape(Vec<usize>),
}

/// Single-channel `f32` image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        GrayMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayMap { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Binary image stored as bytes (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMap {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Luma of a `[3, H, W]` frame in `[-1, 1]`, rescaled to `[0, 1]`.
pub fn to_gray(frame: &Tensor<f32>) -> GrayMap {
    let s = frame.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = frame.data();
    let data = (0..plane)
        .map(|i| {
            let luma = 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
            (luma + 1.0) * 0.5
        })
        .collect();
    GrayMap { width: w, height: h, data }
}

/// Gray frames of a `[k, 3, H, W]` clip.
pub fn clip_to_gray(frames: &Tensor<f32>) -> Result<Vec<GrayMap>, RegionError> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(RegionError::ClipShape(s.to_vec()));
    }
    Ok((0..s[0]).map(|i| to_gray(&frames.batch_item(i).reshape(&s[1..]).expect("same size"))).collect())
}

fn check_frames(frames: &[GrayMap], needed: usize) -> Result<(usize, usize), RegionError> {
    if frames.len() < needed {
        return Err(RegionError::TooFewFrames {
            needed,
            got: frames.len(),
        });
    }
    let size = frames[0].size();
    for (index, f) in frames.iter().enumerate() {
        if f.size() != size {
            return Err(RegionError::SizeMismatch {
                index,
                expected: size,
                found: f.size(),
            });
        }
    }
    Ok(size)
}

/// `A = sum_i |I[i+2] - 2 I[i+1] + I[i]|`.
pub fn accumulate_second_order(frames: &[GrayMap]) -> Result<GrayMap, RegionError> {
    let (w, h) = check_frames(frames, 3)?;
    let mut acc = GrayMap::zeros(w, h);
    for win in frames.windows(3) {
        for (((a, &f0), &f1), &f2) in acc.data.iter_mut().zip(&win[0].data).zip(&win[1].data).zip(&win[2].data) {
            *a += ((f2 - f1) - (f1 - f0)).abs();
        }
    }
    Ok(acc)
}

/// `B = [sum_i |I[i+1] - I[i]| > threshold]`.
pub fn accumulate_first_order_threshold(frames: &[GrayMap], threshold: f32) -> Result<BinaryMap, RegionError> {
    let (w, h) = check_frames(frames, 2)?;
    let mut acc = vec![0.0f32; w * h];
    for pair in frames.windows(2) {
        for ((a, &f0), &f1) in acc.iter_mut().zip(&pair[0].data).zip(&pair[1].data) {
            *a += (f1 - f0).abs();
        }
    }
    Ok(BinaryMap {
        width: w,
        height: h,
        data: acc.iter().map(|&v| (v > threshold) as u8).collect(),
    })
}

pub const GAUSSIAN_SIGMA: f64 = 1.1;

/// Normalized 5-tap Gaussian.
pub fn gaussian_kernel5() -> [f32; 5] {
    let raw: Vec<f64> = (-2..=2).map(|i: i32| (-(i * i) as f64 / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let mut k = [0.0f32; 5];
    for (dst, v) in k.iter_mut().zip(&raw) {
        *dst = (v / total) as f32;
    }
    k
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Correlate rows with `kx` and columns with `ky` (both length 5), replicate padding.
fn separable5(src: &GrayMap, kx: &[f32; 5], ky: &[f32; 5]) -> GrayMap {
    let (w, h) = src.size();
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &src.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kx.iter().enumerate() {
                acc += kv * row[clamp_index(x as isize + t as isize - 2, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for (t, &kv) in ky.iter().enumerate() {
            let sy = clamp_index(y as isize + t as isize - 2, h);
            let src_row = &tmp[sy * w..(sy + 1) * w];
            for (o, &v) in out[y * w..(y + 1) * w].iter_mut().zip(src_row) {
                *o += kv * v;
            }
        }
    }
    GrayMap { width: w, height: h, data: out }
}

pub fn gaussian_blur5(src: &GrayMap) -> GrayMap {
    let k = gaussian_kernel5();
    separable5(src, &k, &k)
}

const SOBEL_SMOOTH: [f32; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
const SOBEL_DERIV: [f32; 5] = [-1.0, -2.0, 0.0, 2.0, 1.0];

/// Horizontal and vertical 5x5 Sobel responses.
pub fn sobel_gradients5(src: &GrayMap) -> (GrayMap, GrayMap) {
    (separable5(src, &SOBEL_DERIV, &SOBEL_SMOOTH), separable5(src, &SOBEL_SMOOTH, &SOBEL_DERIV))
}

pub fn sobel_edges5(src: &GrayMap) -> GrayMap {
    let (gx, gy) = sobel_gradients5(src);
    GrayMap {
        width: src.width,
        height: src.height,
        data: gx.data.iter().zip(&gy.data).map(|(a, b)| (a * a + b * b).sqrt()).collect(),
    }
}

/// Running min or max over a window of `size` starting at each index
/// (`forward`) or ending at it, with `fill` standing in past the ends.
fn window_extreme(line: &[u8], size: usize, forward: bool, take_min: bool, fill: u8, out: &mut [u8]) {
    let n = line.len() as isize;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = if take_min { 1 } else { 0 };
        for q in 0..size as isize {
            let j = if forward { i as isize + q } else { i as isize - q };
            let v = if (0..n).contains(&j) { line[j as usize] } else { fill };
            acc = if take_min { acc.min(v) } else { acc.max(v) };
        }
        *o = acc;
    }
}

fn morph(src: &BinaryMap, size: usize, erode: bool) -> BinaryMap {
    let (w, h) = (src.width, src.height);
    // erosion looks forward over the element and treats the outside as set,
    // dilation looks backward and treats it as clear
    let (forward, fill) = if erode { (true, 1) } else { (false, 0) };
    let mut rows = vec![0u8; w * h];
    for y in 0..h {
        window_extreme(&src.data[y * w..(y + 1) * w], size, forward, erode, fill, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = vec![0u8; w * h];
    let mut column = vec![0u8; h];
    let mut result = vec![0u8; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = rows[y * w + x];
        }
        window_extreme(&column, size, forward, erode, fill, &mut result);
        for y in 0..h {
            out[y * w + x] = result[y];
        }
    }
    BinaryMap { width: w, height: h, data: out }
}

pub fn erode(src: &BinaryMap, size: usize) -> BinaryMap {
    morph(src, size, true)
}

pub fn dilate(src: &BinaryMap, size: usize) -> BinaryMap {
    morph(src, size, false)
}

/// Erosion then dilation with a `size x size` square of ones.
pub fn open(src: &BinaryMap, size: usize) -> BinaryMap {
    dilate(&erode(src, size), size)
}

/// Axis-aligned box, upper bounds exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Scale about the centre by `factor`, rounding outwards, clipped to `w x h`.
    pub fn scaled(&self, factor: f64, w: usize, h: usize) -> Rect {
        let grow = |lo: usize, hi: usize, limit: usize| {
            let centre = (lo + hi) as f64 / 2.0;
            let half = (hi - lo) as f64 * factor / 2.0;
            let a = (centre - half).floor().max(0.0) as usize;
            let b = ((centre + half).ceil() as usize).min(limit);
            (a, b)
        };
        let (x0, x1) = grow(self.x0, self.x1, w);
        let (y0, y1) = grow(self.y0, self.y1, h);
        Rect { x0, y0, x1, y1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub bounds: Rect,
    pub area: usize,
}

/// 8-connected components in raster order of their first pixel.
pub fn connected_components(map: &BinaryMap) -> Vec<Component> {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || map.data[start] == 0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut bounds = Rect {
            x0: start % w,
            y0: start / w,
            x1: start % w + 1,
            y1: start / w + 1,
        };
        let mut area = 0;
        while let Some(p) = stack.pop() {
            area += 1;
            let (x, y) = (p % w, p / w);
            bounds.x0 = bounds.x0.min(x);
            bounds.x1 = bounds.x1.max(x + 1);
            bounds.y0 = bounds.y0.min(y);
            bounds.y1 = bounds.y1.max(y + 1);
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let q = ny * w + nx;
                    if !seen[q] && map.data[q] != 0 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(Component { bounds, area });
    }
    out
}

/// One extracted region: the component box and its enlarged mask rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub source: Rect,
    pub rect: Rect,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionMaskSet {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<RegionMask>,
}

impl RegionMaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Filled rectangle of mask `i` as a 0/1 byte image.
    pub fn raster(&self, i: usize) -> Vec<u8> {
        let r = self.masks[i].rect;
        let mut out = vec![0u8; self.width * self.height];
        for y in r.y0..r.y1 {
            out[y * self.width + r.x0..y * self.width + r.x1].fill(1);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionConfig {
    /// Side of the square structuring element.
    pub open_size: usize,
    /// Components must be strictly wider and taller than this.
    pub min_extent: usize,
    pub motion_threshold: f32,
    pub mask_scale: f64,
}

impl RegionConfig {
    /// Reference constants are for 256x256 input and scale with resolution.
    pub fn for_resolution(resolution: usize) -> Self {
        let scaled = ((8 * resolution) as f64 / 256.0).round() as usize;
        RegionConfig {
            open_size: scaled.max(1),
            min_extent: scaled,
            motion_threshold: 0.1,
            mask_scale: 1.5,
        }
    }
}

/// Intermediate maps, kept for inspection.
#[derive(Clone, Debug)]
pub struct RegionTrace {
    pub second_order: GrayMap,
    pub edges: GrayMap,
    pub motion: BinaryMap,
    pub gated: BinaryMap,
    pub opened: BinaryMap,
    pub components: Vec<Component>,
}

pub fn extract_regions_traced(frames: &[GrayMap], cfg: &RegionConfig) -> Result<(RegionMaskSet, RegionTrace), RegionError> {
    let (w, h) = check_frames(frames, 3)?;
    let second_order = accumulate_second_order(frames)?;
    let edges = sobel_edges5(&gaussian_blur5(&second_order));
    let motion = accumulate_first_order_threshold(frames, cfg.motion_threshold)?;
    let gated = BinaryMap {
        width: w,
        height: h,
        data: edges.data.iter().zip(&motion.data).map(|(&e, &b)| (e * b as f32 > 0.0) as u8).collect(),
    };
    let opened = open(&gated, cfg.open_size);
    let components = connected_components(&opened);
    let masks = components
        .iter()
        .filter(|c| c.bounds.width() > cfg.min_extent && c.bounds.height() > cfg.min_extent)
        .map(|c| RegionMask {
            source: c.bounds,
            rect: c.bounds.scaled(cfg.mask_scale, w, h),
        })
        .collect();
    let set = RegionMaskSet { width: w, height: h, masks };
    Ok((
        set,
        RegionTrace {
            second_order,
            edges,
            motion,
            gated,
            opened,
            components,
        },
    ))
}

pub fn extract_regions(frames: &[GrayMap], cfg: &RegionConfig) -> Result<RegionMaskSet, RegionError> {
    extract_regions_traced(frames, cfg).map(|(set, _)| set)
}

/// Regions of a `[k, 3, H, W]` clip in `[-1, 1]`.
pub fn extract_from_clip(frames: &Tensor<f32>, cfg: &RegionConfig) -> Result<RegionMaskSet, RegionError> {
    extract_regions(&clip_to_gray(frames)?, cfg)
}

//! Object-scene relation learning.
//!
//! The bottleneck map is the scene, pooled bottleneck features under a
//! region mask are the object, and a learnable per-location relation map
//! mixed with the scene scores how plausible the object is at each location.
//! Training contrasts real clips against frame-skipped and shuffled ones.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn::{BatchNorm, Conv, NormCtx};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum RelationError {
    #[error("mask extent {height}x{width} is not divisible by {factor}")]
    Indivisible { height: usize, width: usize, factor: usize },
    #[error("mask has {got} cells, expected {expected}")]
    MaskSize { got: usize, expected: usize },
    #[error("video of {len} frames cannot hold a speed negative starting at {start} with k = {k}")]
    TooShort { len: usize, start: usize, k: usize },
    #[error("clip length {0} is below 2")]
    ClipTooShort(usize),
    #[error("cluster count {c} outside 2..={cells}")]
    ClusterCount { c: usize, cells: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RlLossForm {
    /// Log of the masked ratio sum.
    #[default]
    Literal,
    /// Masked sum of per-location log ratios.
    PerLocation,
}

impl FromStr for RlLossForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(RlLossForm::Literal),
            "per_location" => Ok(RlLossForm::PerLocation),
            other => Err(format!("unknown loss form `{other}` (literal, per_location)")),
        }
    }
}

impl fmt::Display for RlLossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RlLossForm::Literal => "literal",
            RlLossForm::PerLocation => "per_location",
        })
    }
}

/// Relation map and the two-layer 1x1 mixer.
#[derive(Clone, Debug)]
pub struct Relation {
    pub map: ParamId,
    mix1: Conv,
    bn1: BatchNorm,
    mix2: Conv,
    bn2: BatchNorm,
    pub depth: usize,
}

impl Relation {
    /// `height x width` is the bottleneck extent.
    pub fn new<T: Real>(store: &mut ParamStore<T>, depth: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let map = store.add_uniform("relation.map", &[depth, height, width], depth, rng);
        Relation {
            map,
            mix1: Conv::new(store, "relation.mix1", 2 * depth, depth, 1, 1, 0, rng),
            bn1: BatchNorm::new(store, "relation.bn1", depth),
            mix2: Conv::new(store, "relation.mix2", depth, depth, 1, 1, 0, rng),
            bn2: BatchNorm::new(store, "relation.bn2", depth),
            depth,
        }
    }

    pub fn mixers(&self) -> (&Conv, &Conv) {
        (&self.mix1, &self.mix2)
    }

    /// Relation-mixed scene map for a `[B, d, h, w]` scene batch.
    pub fn mix<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, norms: &mut NormCtx<T>, scene: Var) -> Result<Var, TensorError> {
        let batch = g.shape(scene)[0];
        let r = g.param(store, self.map);
        if g.shape(r) != &g.shape(scene)[1..] {
            return Err(TensorError::Shape {
                op: "relation",
                detail: format!("relation map {:?} vs scene {:?}", g.shape(r), g.shape(scene)),
            });
        }
        let r = g.expand_batch(r, batch)?;
        let x = g.concat_channels(scene, r)?;
        let x = self.mix1.forward(g, store, x)?;
        let x = g.relu(x)?;
        let x = self.bn1.forward(g, store, norms, x)?;
        let x = self.mix2.forward(g, store, x)?;
        let x = g.relu(x)?;
        self.bn2.forward(g, store, norms, x)
    }
}

/// Plausibility map `sigmoid(<mixed(i, j), object>)`, `[B, 1, h, w]`.
pub fn relation_score<T: Real>(g: &mut Graph<T>, mixed: Var, object: Var) -> Result<Var, TensorError> {
    let dot = g.channel_dot(mixed, object)?;
    g.sigmoid(dot)
}

/// Max-pool a binary `height x width` mask by `factor`.
pub fn downsample_mask(mask: &[u8], height: usize, width: usize, factor: usize) -> Result<Vec<u8>, RelationError> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(RelationError::Indivisible { height, width, factor });
    }
    if mask.len() != height * width {
        return Err(RelationError::MaskSize {
            got: mask.len(),
            expected: height * width,
        });
    }
    let (h, w) = (height / factor, width / factor);
    let mut out = vec![0u8; h * w];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                out[(y / factor) * w + x / factor] = 1;
            }
        }
    }
    Ok(out)
}

/// Masked pooling of one scene map `[1, d, h, w]` into `[1, d]`.
///
/// With `divide_by_area` the masked sum is divided by `h*w` instead of the
/// number of active cells.
pub fn object_embedding<T: Real>(g: &mut Graph<T>, scene: Var, mask: &Tensor<T>, divide_by_area: bool) -> Result<Var, TensorError> {
    g.global_average_pool(scene, Some(mask), divide_by_area)
}

/// Frame indices for a speed negative: start at `start`, then `k - 1` steps
/// of 1 to 4 frames, at least one of them longer than 1.
pub fn gen_negative_speed(len: usize, start: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>, RelationError> {
    if k < 2 {
        return Err(RelationError::ClipTooShort(k));
    }
    if start + 4 * (k - 1) >= len {
        return Err(RelationError::TooShort { len, start, k });
    }
    loop {
        let steps: Vec<usize> = (0..k - 1).map(|_| rng.random_range(1..=4)).collect();
        if steps.iter().any(|&s| s > 1) {
            return Ok(cumulative(start, &steps));
        }
    }
}

/// Like [`gen_negative_speed`] but for starts near the end of a video:
/// draws are rejected until the last index fits. `None` if not even a
/// single 2-frame step fits.
pub fn gen_negative_speed_bounded(len: usize, start: usize, k: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    if k < 2 || start + k >= len {
        return None;
    }
    if start + 4 * (k - 1) < len {
        return gen_negative_speed(len, start, k, rng).ok();
    }
    loop {
        let steps: Vec<usize> = (0..k - 1).map(|_| rng.random_range(1..=4)).collect();
        if steps.iter().any(|&s| s > 1) && start + steps.iter().sum::<usize>() < len {
            return Some(cumulative(start, &steps));
        }
    }
}

fn cumulative(start: usize, steps: &[usize]) -> Vec<usize> {
    let mut out = vec![start];
    let mut at = start;
    for s in steps {
        at += s;
        out.push(at);
    }
    out
}

/// A uniformly drawn permutation of `0..k` other than the identity.
pub fn gen_negative_order(k: usize, rng: &mut impl Rng) -> Result<Vec<usize>, RelationError> {
    if k < 2 {
        return Err(RelationError::ClipTooShort(k));
    }
    let identity: Vec<usize> = (0..k).collect();
    loop {
        let mut p = identity.clone();
        p.shuffle(rng);
        if p != identity {
            return Ok(p);
        }
    }
}

/// Embeddings of one region under the positive and the two negative clips.
#[derive(Clone, Debug)]
pub struct RegionTerms<T> {
    /// `[1, 1, h, w]` binary mask at bottleneck resolution
    pub mask: Tensor<T>,
    pub positive: Var,
    pub speed: Var,
    pub order: Var,
}

/// Contrastive relation loss for one clip. `mixed` is `[1, d, h, w]`.
pub fn loss_rl_clip<T: Real>(g: &mut Graph<T>, mixed: Var, regions: &[RegionTerms<T>], form: RlLossForm) -> Result<Var, TensorError> {
    if regions.is_empty() {
        return Ok(g.input(Tensor::scalar(T::zero())));
    }
    let plane: usize = g.shape(mixed)[2..].iter().product();
    let norm = T::one() / T::from_usize(plane * regions.len()).unwrap();
    let mut total = None;
    for r in regions {
        let pos = relation_score(g, mixed, r.positive)?;
        let speed = relation_score(g, mixed, r.speed)?;
        let order = relation_score(g, mixed, r.order)?;
        let denom = g.add(pos, speed)?;
        let denom = g.add(denom, order)?;
        let ratio = g.div(pos, denom)?;
        let term = match form {
            RlLossForm::Literal => ratio,
            RlLossForm::PerLocation => g.log(ratio)?,
        };
        let mask = g.input(r.mask.clone());
        let masked = g.mul(term, mask)?;
        let s = g.sum(masked)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("at least one region");
    let inner = match form {
        RlLossForm::Literal => g.log(total)?,
        RlLossForm::PerLocation => total,
    };
    g.scale(inner, -norm)
}

/// `l_ae + lambda_rl * l_rl`.
pub fn loss_total<T: Real>(g: &mut Graph<T>, l_ae: Var, l_rl: Var, lambda_rl: f64) -> Result<Var, TensorError> {
    let w = g.scale(l_rl, T::lit(lambda_rl))?;
    g.add(l_ae, w)
}

#[derive(Clone, Debug)]
pub struct Clustering {
    pub height: usize,
    pub width: usize,
    /// Cluster index per cell, row-major.
    pub labels: Vec<usize>,
    /// Euclidean distance of each cell to its centroid.
    pub distances: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means over the `h*w` depth vectors of a `[d, h, w]` relation map,
/// seeded with k-means++.
pub fn cluster_relation_map(map: &Tensor<f32>, c: usize, rng: &mut impl Rng) -> Result<Clustering, RelationError> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(TensorError::Shape {
            op: "cluster_relation_map",
            detail: format!("expected [d, h, w], got {s:?}"),
        }
        .into());
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    let n = h * w;
    if c < 2 || c > n {
        return Err(RelationError::ClusterCount { c, cells: n });
    }
    let points: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|ch| map.data()[ch * n + i] as f64).collect()).collect();

    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &dist) in nearest.iter().enumerate() {
                if target < dist {
                    pick = i;
                    break;
                }
                target -= dist;
            }
            pick
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (nd, p) in nearest.iter_mut().zip(&points) {
            *nd = nd.min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    let mut objective = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut cost = 0.0;
        for (l, p) in labels.iter_mut().zip(&points) {
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(j, cen)| (j, sq_dist(p, cen)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            *l = best;
            cost += dist;
        }
        objective.push(cost);
        let mut moved: f64 = 0.0;
        for (j, cen) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..d).map(|ch| members.iter().map(|p| p[ch]).sum::<f64>() / members.len() as f64).collect();
            moved = moved.max(sq_dist(&mean, cen).sqrt());
            *cen = mean;
        }
        if moved <= KMEANS_TOL {
            break;
        }
    }
    let distances = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l]).sqrt()).collect();
    Ok(Clustering {
        height: h,
        width: w,
        labels,
        distances,
        centroids,
        objective,
    })
}

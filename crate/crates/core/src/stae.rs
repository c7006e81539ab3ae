//! Spatio-temporal auto-encoder: one encoder, an appearance decoder that
//! predicts the next frame and a motion decoder that predicts the flow
//! towards it.

use rand::Rng;

use crate::nn::{BatchNorm, Conv, ConvT, NormCtx};
use crate::tensor::{Graph, ParamStore, Real, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StaeConfig {
    /// Frames per input clip.
    pub k: usize,
    /// Encoder stage widths; the last one is the bottleneck depth `d`.
    pub channels: [usize; 3],
}

impl Default for StaeConfig {
    fn default() -> Self {
        StaeConfig {
            k: 4,
            channels: [16, 32, 64],
        }
    }
}

impl StaeConfig {
    pub fn depth(&self) -> usize {
        self.channels[2]
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv: Conv,
    bn: BatchNorm,
    down: Conv,
    down_bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct UpStage {
    up: ConvT,
    up_bn: BatchNorm,
    conv: Conv,
    conv_bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Stae {
    pub config: StaeConfig,
    encoder: Vec<EncoderStage>,
    appearance: Vec<UpStage>,
    appearance_head: Conv,
    motion: Vec<UpStage>,
    motion_head: Conv,
}

/// Bottleneck map and the pre-downsampling activation of every stage.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub scene: Var,
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct StaePrediction {
    /// `[B, 3, H, W]` in `[-1, 1]`
    pub frame: Var,
    /// `[B, 2, H, W]`, horizontal then vertical displacement in pixels
    pub flow: Var,
    /// Last input frame warped by `flow`, `[B, 3, H, W]`
    pub warped: Var,
    /// Bottleneck `[B, d, H/8, W/8]`
    pub scene: Var,
}

fn conv_bn_relu<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, norms: &mut NormCtx<T>, conv: &Conv, bn: &BatchNorm, x: Var) -> Result<Var, TensorError> {
    let y = conv.forward(g, store, x)?;
    let y = bn.forward(g, store, norms, y)?;
    g.relu(y)
}

impl Stae {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: StaeConfig, rng: &mut impl Rng) -> Self {
        let [c0, c1, c2] = config.channels;
        let inputs = [3 * config.k, c0, c1];
        let encoder = (0..3)
            .map(|i| {
                let (cin, c) = (inputs[i], config.channels[i]);
                let name = format!("encoder.{i}");
                EncoderStage {
                    conv: Conv::new(store, &format!("{name}.conv"), cin, c, 3, 1, 1, rng),
                    bn: BatchNorm::new(store, &format!("{name}.bn"), c),
                    down: Conv::new(store, &format!("{name}.down"), c, c, 3, 2, 1, rng),
                    down_bn: BatchNorm::new(store, &format!("{name}.down_bn"), c),
                }
            })
            .collect();
        // decoder stages run from the bottleneck outwards
        let up_in = [c2, c1, c0];
        let up_out = [c1, c0, c0];
        let skip = [c2, c1, c0];
        let stage = |store: &mut ParamStore<T>, rng: &mut _, prefix: &str, i: usize, with_skip: bool| {
            let name = format!("{prefix}.{i}");
            let conv_in = up_out[i] + if with_skip { skip[i] } else { 0 };
            UpStage {
                up: ConvT::upsample2(store, &format!("{name}.up"), up_in[i], up_out[i], rng),
                up_bn: BatchNorm::new(store, &format!("{name}.up_bn"), up_out[i]),
                conv: Conv::new(store, &format!("{name}.conv"), conv_in, up_out[i], 3, 1, 1, rng),
                conv_bn: BatchNorm::new(store, &format!("{name}.conv_bn"), up_out[i]),
            }
        };
        let appearance = (0..3).map(|i| stage(store, rng, "appearance", i, true)).collect();
        let appearance_head = Conv::new(store, "appearance.head", c0, 3, 3, 1, 1, rng);
        let motion = (0..3).map(|i| stage(store, rng, "motion", i, false)).collect();
        let motion_head = Conv::new(store, "motion.head", c0, 2, 3, 1, 1, rng);
        Stae {
            config,
            encoder,
            appearance,
            appearance_head,
            motion,
            motion_head,
        }
    }

    pub fn motion_head(&self) -> &Conv {
        &self.motion_head
    }

    /// `clip` is `[B, 3k, H, W]` with `H` and `W` divisible by 8.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, norms: &mut NormCtx<T>, clip: Var) -> Result<Encoded, TensorError> {
        let (_, c, h, w) = g.value(clip).dims4()?;
        if c != 3 * self.config.k {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!("expected {} input channels for k = {}, got {c}", 3 * self.config.k, self.config.k),
            });
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!("spatial extent {h}x{w} is not divisible by 8"),
            });
        }
        let mut x = clip;
        let mut skips = Vec::with_capacity(3);
        for s in &self.encoder {
            let y = conv_bn_relu(g, store, norms, &s.conv, &s.bn, x)?;
            skips.push(y);
            x = conv_bn_relu(g, store, norms, &s.down, &s.down_bn, y)?;
        }
        Ok(Encoded { scene: x, skips })
    }

    fn up<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, norms: &mut NormCtx<T>, s: &UpStage, x: Var, skip: Option<Var>) -> Result<Var, TensorError> {
        let y = s.up.forward(g, store, x)?;
        let y = s.up_bn.forward(g, store, norms, y)?;
        let mut y = g.relu(y)?;
        if let Some(skip) = skip {
            if g.shape(skip)[2..] != g.shape(y)[2..] {
                return Err(TensorError::Shape {
                    op: "decode_appearance",
                    detail: format!("skip {:?} does not match upsampled {:?}", g.shape(skip), g.shape(y)),
                });
            }
            y = g.concat_channels(y, skip)?;
        }
        conv_bn_relu(g, store, norms, &s.conv, &s.conv_bn, y)
    }

    /// Next-frame prediction in `[-1, 1]`.
    pub fn decode_appearance<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, norms: &mut NormCtx<T>, enc: &Encoded) -> Result<Var, TensorError> {
        if enc.skips.len() != 3 {
            return Err(TensorError::Shape {
                op: "decode_appearance",
                detail: format!("expected 3 skip maps, got {}", enc.skips.len()),
            });
        }
        let mut x = enc.scene;
        for (i, s) in self.appearance.iter().enumerate() {
            x = Self::up(g, store, norms, s, x, Some(enc.skips[2 - i]))?;
        }
        let y = self.appearance_head.forward(g, store, x)?;
        g.tanh(y)
    }

    /// Flow prediction, unbounded.
    pub fn decode_motion<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, norms: &mut NormCtx<T>, scene: Var) -> Result<Var, TensorError> {
        let mut x = scene;
        for s in &self.motion {
            x = Self::up(g, store, norms, s, x, None)?;
        }
        self.motion_head.forward(g, store, x)
    }

    /// Full forward pass. `last` is the final input frame `[B, 3, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, norms: &mut NormCtx<T>, clip: Var, last: Var) -> Result<StaePrediction, TensorError> {
        let enc = self.encode(g, store, norms, clip)?;
        let frame = self.decode_appearance(g, store, norms, &enc)?;
        let flow = self.decode_motion(g, store, norms, enc.scene)?;
        let warped = g.warp(last, flow)?;
        Ok(StaePrediction {
            frame,
            flow,
            warped,
            scene: enc.scene,
        })
    }
}

/// Mean squared difference.
pub fn loss_intensity<T: Real>(g: &mut Graph<T>, target: Var, pred: Var) -> Result<Var, TensorError> {
    let d = g.sub(target, pred)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Mean absolute difference of gradient magnitudes, horizontal plus vertical.
pub fn loss_gradient<T: Real>(g: &mut Graph<T>, target: Var, pred: Var) -> Result<Var, TensorError> {
    if g.shape(target) != g.shape(pred) {
        return Err(TensorError::Shape {
            op: "loss_gradient",
            detail: format!("{:?} vs {:?}", g.shape(target), g.shape(pred)),
        });
    }
    let mut total = None;
    for horizontal in [true, false] {
        let a = g.diff(target, horizontal)?;
        let a = g.abs(a)?;
        let b = g.diff(pred, horizontal)?;
        let b = g.abs(b)?;
        let d = g.sub(a, b)?;
        let d = g.abs(d)?;
        let m = g.mean(d)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// Intensity plus weighted gradient loss.
pub fn loss_prediction<T: Real>(g: &mut Graph<T>, target: Var, pred: Var, lambda_grd: f64) -> Result<Var, TensorError> {
    let int = loss_intensity(g, target, pred)?;
    let grd = loss_gradient(g, target, pred)?;
    let grd = g.scale(grd, T::lit(lambda_grd))?;
    g.add(int, grd)
}

#[derive(Clone, Copy, Debug)]
pub struct AeLoss {
    pub total: Var,
    pub appearance: Var,
    pub motion: Var,
}

/// Appearance loss on the predicted frame plus weighted motion loss on the
/// warped frame.
pub fn loss_ae<T: Real>(g: &mut Graph<T>, target: Var, pred: &StaePrediction, lambda_grd: f64, lambda_mot: f64) -> Result<AeLoss, TensorError> {
    let appearance = loss_prediction(g, target, pred.frame, lambda_grd)?;
    let motion = loss_prediction(g, target, pred.warped, lambda_grd)?;
    let weighted = g.scale(motion, T::lit(lambda_mot))?;
    let total = g.add(appearance, weighted)?;
    Ok(AeLoss {
        total,
        appearance,
        motion,
    })
}

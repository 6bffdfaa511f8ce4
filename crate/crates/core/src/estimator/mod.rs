//! Inception-style light regressor: a convolutional encoder, global average
//! pooling, and three small decoders for the pan pair, the tilt pair and the
//! RGB triple.

mod checkpoint;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, TrainState, CHECKPOINT_MAGIC,
};
pub use train::{evaluate_samples, fit, EpochLog, Metrics, PlateauScheduler, Sample, TrainConfig, TrainLog};

use lumen_autodiff::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use lumen_autodiff::{he_normal, AutodiffError, Bound, Conv2dOptions, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LumenError, Result};
use crate::lightmath::{decode_angle, encode_angle, LightColor};
use crate::scenegen::LightGT;

/// Output widths of the four parallel branches of an inception block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionWidths {
    /// 1×1.
    pub single: usize,
    /// 1×1 → 1×3 → 3×1.
    pub factored: usize,
    /// 1×1 → (1×3 → 3×1) twice.
    pub double: usize,
    /// 3×3 max pool → 1×1.
    pub pooled: usize,
}

impl InceptionWidths {
    pub fn uniform(w: usize) -> Self {
        Self { single: w, factored: w, double: w, pooled: w }
    }

    pub fn total(&self) -> usize {
        self.single + self.factored + self.double + self.pooled
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Stage {
    Inception(InceptionWidths),
    /// 2×2 max pool, stride 2.
    Pool,
    /// Square convolution padded by `(kernel − stride) / 2`.
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<Stage>,
    pub decoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stem_channels: 16,
            stem_kernel: 4,
            stem_stride: 2,
            stages: vec![
                Stage::Inception(InceptionWidths::uniform(8)),
                Stage::Pool,
                Stage::Inception(InceptionWidths::uniform(16)),
                Stage::Conv { channels: 96, kernel: 4, stride: 2 },
                Stage::Inception(InceptionWidths::uniform(32)),
            ],
            decoder_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Stem plus one inception stage; used for end-to-end gradient checks.
    pub fn tiny(input_size: usize) -> Self {
        Self {
            input_size,
            stem_channels: 4,
            stem_kernel: 4,
            stem_stride: 2,
            stages: vec![Stage::Inception(InceptionWidths::uniform(2))],
            decoder_hidden: 4,
        }
    }

    /// Channel count and spatial side after the encoder.
    pub fn encoder_output(&self) -> Result<(usize, usize)> {
        let bad = |what: String| Err(LumenError::InvalidArgument(format!("model config: {what}")));
        if self.input_size == 0 || self.stem_channels == 0 || self.stem_stride == 0 || self.decoder_hidden == 0 {
            return bad("zero width".into());
        }
        let mut side = conv_out(self.input_size, self.stem_kernel, self.stem_stride)
            .ok_or_else(|| LumenError::InvalidArgument("model config: stem does not tile the input".into()))?;
        let mut ch = self.stem_channels;
        for (i, s) in self.stages.iter().enumerate() {
            match *s {
                Stage::Inception(w) => {
                    if [w.single, w.factored, w.double, w.pooled].contains(&0) {
                        return bad(format!("stage {i} has a zero-width branch"));
                    }
                    ch = w.total();
                }
                Stage::Pool => {
                    if side < 2 {
                        return bad(format!("stage {i} pools a {side}x{side} map"));
                    }
                    side /= 2;
                }
                Stage::Conv { channels, kernel, stride } => {
                    if channels == 0 {
                        return bad(format!("stage {i} conv has zero width"));
                    }
                    side = match conv_out(side, kernel, stride) {
                        Some(s) => s,
                        None => {
                            return bad(format!(
                                "stage {i} conv {kernel}x{kernel}/{stride} does not tile {side}x{side}"
                            ))
                        }
                    };
                    ch = channels;
                }
            }
        }
        if side == 0 {
            return bad("feature map vanishes".into());
        }
        Ok((ch, side))
    }
}

fn conv_pad(kernel: usize, stride: usize) -> usize {
    kernel.saturating_sub(stride) / 2
}

/// Output side of a square convolution, or `None` when it does not tile.
fn conv_out(side: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = side + 2 * conv_pad(kernel, stride);
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    ((padded - kernel) % stride == 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    opts: Conv2dOptions,
}

#[derive(Clone, Copy, Debug)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum StageLayers {
    Inception { single: ConvLayer, factored: [ConvLayer; 3], double: [ConvLayer; 5], pooled: ConvLayer },
    Pool,
    Conv(ConvLayer),
}

/// Two dense layers; ReLU between, the head activation after.
#[derive(Clone, Copy, Debug)]
struct Decoder {
    hidden: DenseLayer,
    out: DenseLayer,
}

/// The network: configuration, parameters and their layout.
#[derive(Clone, Debug)]
pub struct LightNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    stem: ConvLayer,
    stages: Vec<StageLayers>,
    pan: Decoder,
    tilt: Decoder,
    rgb: Decoder,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let value = match self.rng.as_deref_mut() {
            Some(rng) => he_normal(rng, shape, fan_in)?,
            None => Tensor::zeros(shape),
        };
        Ok(self.params.add(name, value)?)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kh: usize, kw: usize, stride: usize) -> Result<ConvLayer> {
        let w = self.tensor(format!("{name}.w"), &[cout, cin, kh, kw], cin * kh * kw)?;
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(ConvLayer { w, b, opts: Conv2dOptions { stride, ..Conv2dOptions::same(kh, kw) } })
    }

    fn square_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<ConvLayer> {
        let mut l = self.conv(name, cin, cout, k, k, stride)?;
        let pad = conv_pad(k, stride);
        l.opts = Conv2dOptions::new(stride, pad, pad);
        Ok(l)
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) -> Result<DenseLayer> {
        let w = self.tensor(format!("{name}.w"), &[cout, cin], cin)?;
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(DenseLayer { w, b })
    }

    fn decoder(&mut self, name: &str, cin: usize, hidden: usize, out: usize) -> Result<Decoder> {
        Ok(Decoder {
            hidden: self.dense(&format!("{name}.0"), cin, hidden)?,
            out: self.dense(&format!("{name}.1"), hidden, out)?,
        })
    }
}

impl LightNet {
    /// He-normal weights and zero biases, seeded.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    /// All-zero parameters with the right names and shapes.
    pub(crate) fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        let (embed, _) = config.encoder_output()?;
        let mut params = ParamStore::new();
        let mut b = Builder { params: &mut params, rng };
        let stem = b.square_conv("stem", 3, config.stem_channels, config.stem_kernel, config.stem_stride)?;
        let mut ch = config.stem_channels;
        let mut stages = Vec::new();
        for (i, s) in config.stages.iter().enumerate() {
            let n = format!("s{i}");
            stages.push(match *s {
                Stage::Inception(w) => {
                    let (f, d) = (w.factored, w.double);
                    let layers = StageLayers::Inception {
                        single: b.conv(&format!("{n}.single"), ch, w.single, 1, 1, 1)?,
                        factored: [
                            b.conv(&format!("{n}.factored.0"), ch, f, 1, 1, 1)?,
                            b.conv(&format!("{n}.factored.1"), f, f, 1, 3, 1)?,
                            b.conv(&format!("{n}.factored.2"), f, f, 3, 1, 1)?,
                        ],
                        double: [
                            b.conv(&format!("{n}.double.0"), ch, d, 1, 1, 1)?,
                            b.conv(&format!("{n}.double.1"), d, d, 1, 3, 1)?,
                            b.conv(&format!("{n}.double.2"), d, d, 3, 1, 1)?,
                            b.conv(&format!("{n}.double.3"), d, d, 1, 3, 1)?,
                            b.conv(&format!("{n}.double.4"), d, d, 3, 1, 1)?,
                        ],
                        pooled: b.conv(&format!("{n}.pooled"), ch, w.pooled, 1, 1, 1)?,
                    };
                    ch = w.total();
                    layers
                }
                Stage::Pool => StageLayers::Pool,
                Stage::Conv { channels, kernel, stride } => {
                    let l = b.square_conv(&format!("{n}.conv"), ch, channels, kernel, stride)?;
                    ch = channels;
                    StageLayers::Conv(l)
                }
            });
        }
        let h = config.decoder_hidden;
        let pan = b.decoder("pan", embed, h, 2)?;
        let tilt = b.decoder("tilt", embed, h, 2)?;
        let rgb = b.decoder("rgb", embed, h, 3)?;
        Ok(Self { config, params, stem, stages, pan, tilt, rgb })
    }

    /// Records the forward pass for a `[B, 3, S, S]` input.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Heads> {
        let shape = g.value(x).shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(LumenError::InvalidArgument(format!("input shape {shape:?}, model expects [B, 3, {s}, {s}]")));
        }
        let conv = |g: &mut Graph, l: &ConvLayer, x: Var| -> Result<Var> {
            let y = g.conv2d(x, bound.var(l.w), bound.var(l.b), l.opts)?;
            Ok(g.relu(y)?)
        };
        let mut h = conv(g, &self.stem, x)?;
        for st in &self.stages {
            h = match st {
                StageLayers::Inception { single, factored, double, pooled } => {
                    let a = conv(g, single, h)?;
                    let mut b = h;
                    for l in factored {
                        b = conv(g, l, b)?;
                    }
                    let mut c = h;
                    for l in double {
                        c = conv(g, l, c)?;
                    }
                    let p = g.max_pool(h, 3, 1, 1)?;
                    let d = conv(g, pooled, p)?;
                    g.concat_channels(&[a, b, c, d])?
                }
                StageLayers::Pool => g.maxpool2(h)?,
                StageLayers::Conv(l) => conv(g, l, h)?,
            };
        }
        let pooled = g.global_avg_pool(h)?;
        let embed = g.flatten(pooled)?;
        let decode = |g: &mut Graph, d: &Decoder| -> Result<Var> {
            let hid = g.dense(embed, bound.var(d.hidden.w), bound.var(d.hidden.b))?;
            let hid = g.relu(hid)?;
            Ok(g.dense(hid, bound.var(d.out.w), bound.var(d.out.b))?)
        };
        let pan = decode(g, &self.pan)?;
        let pan = g.tanh(pan)?;
        let tilt = decode(g, &self.tilt)?;
        let tilt = g.tanh(tilt)?;
        let rgb = decode(g, &self.rgb)?;
        let rgb = g.sigmoid(rgb)?;
        Ok(Heads { pan, tilt, rgb })
    }

    /// Head outputs for a batch, without recording gradients.
    pub fn predict_batch(&self, input: &Tensor) -> Result<Vec<LightEstimate>> {
        let mut g = Graph::new();
        let bound = self.params.bind_constants(&mut g);
        let x = g.constant(input.clone());
        let heads = self.forward(&mut g, &bound, x)?;
        Ok(heads.estimates(&g))
    }

    /// Decoded prediction for one 8-bit image.
    pub fn predict(&self, img: &image::RgbImage) -> Result<Prediction> {
        let s = self.config.input_size as u32;
        if img.width() != s || img.height() != s {
            return Err(LumenError::InvalidArgument(format!(
                "image is {}x{}, model expects {s}x{s}",
                img.width(),
                img.height()
            )));
        }
        self.predict_batch(&images_to_tensor(&[img])?)?[0].decode()
    }
}

/// Head variables: `pan` and `tilt` are `[B, 2]` (sin, cos); `rgb` is `[B, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub pan: Var,
    pub tilt: Var,
    pub rgb: Var,
}

impl Heads {
    pub fn estimates(&self, g: &Graph) -> Vec<LightEstimate> {
        let (p, t, c) = (g.value(self.pan).data(), g.value(self.tilt).data(), g.value(self.rgb).data());
        (0..p.len() / 2)
            .map(|i| LightEstimate {
                sin_pan: p[2 * i],
                cos_pan: p[2 * i + 1],
                sin_tilt: t[2 * i],
                cos_tilt: t[2 * i + 1],
                rgb: [c[3 * i], c[3 * i + 1], c[3 * i + 2]],
            })
            .collect()
    }
}

/// The seven head outputs for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightEstimate {
    pub sin_pan: f64,
    pub cos_pan: f64,
    pub sin_tilt: f64,
    pub cos_tilt: f64,
    pub rgb: [f64; 3],
}

/// Decoded camera-relative angles and light color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub delta_pan: f64,
    pub delta_tilt: f64,
    pub color: LightColor,
}

impl LightEstimate {
    /// Exact encoding of a target, as a perfect network would emit it.
    pub fn from_gt(gt: &LightGT) -> Self {
        let (sin_pan, cos_pan) = encode_angle(gt.delta_pan);
        let (sin_tilt, cos_tilt) = encode_angle(gt.delta_tilt);
        Self { sin_pan, cos_pan, sin_tilt, cos_tilt, rgb: gt.color.to_array() }
    }

    pub fn decode(&self) -> Result<Prediction> {
        Ok(Prediction {
            delta_pan: decode_angle(self.sin_pan, self.cos_pan)?,
            delta_tilt: decode_angle(self.sin_tilt, self.cos_tilt)?,
            color: LightColor::from_array(self.rgb),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pan: f64,
    pub tilt: f64,
    pub color: f64,
    /// Square the sum of the sin and cos residuals instead of summing squares.
    #[serde(default)]
    pub summed_residuals: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pan: 1.0, tilt: 1.0, color: 1.0, summed_residuals: false }
    }
}

impl LossWeights {
    fn check(&self) -> Result<()> {
        let w = [self.pan, self.tilt, self.color];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(LumenError::InvalidArgument(format!("loss weights {w:?} must be non-negative, not all zero")));
        }
        Ok(())
    }
}

/// Graph targets for a batch: `(sin, cos)` pairs and colors.
pub struct Targets {
    pub pan: Tensor,
    pub tilt: Tensor,
    pub rgb: Tensor,
}

impl Targets {
    pub fn new(gts: &[LightGT]) -> Self {
        let n = gts.len();
        let mut pan = Vec::with_capacity(2 * n);
        let mut tilt = Vec::with_capacity(2 * n);
        let mut rgb = Vec::with_capacity(3 * n);
        for gt in gts {
            let (s, c) = encode_angle(gt.delta_pan);
            pan.extend([s, c]);
            let (s, c) = encode_angle(gt.delta_tilt);
            tilt.extend([s, c]);
            rgb.extend(gt.color.to_array());
        }
        Self {
            pan: Tensor::new(&[n, 2], pan).expect("sized"),
            tilt: Tensor::new(&[n, 2], tilt).expect("sized"),
            rgb: Tensor::new(&[n, 3], rgb).expect("sized"),
        }
    }
}

fn pair_loss(g: &mut Graph, pred: Var, target: Var, summed: bool) -> Result<Var> {
    if !summed {
        return Ok(g.mse(pred, target)?);
    }
    let neg = g.scale(target, -1.0)?;
    let resid = g.add(pred, neg)?;
    let sum = g.row_sum(resid)?;
    let zero = g.constant(Tensor::zeros(g.value(sum).shape()));
    Ok(g.mse(sum, zero)?)
}

/// Weighted sum of the pan, tilt and color terms, recorded on `g`.
pub fn loss_on_graph(g: &mut Graph, heads: &Heads, targets: &Targets, w: &LossWeights) -> Result<Var> {
    w.check()?;
    let tp = g.constant(targets.pan.clone());
    let tt = g.constant(targets.tilt.clone());
    let tc = g.constant(targets.rgb.clone());
    let lp = pair_loss(g, heads.pan, tp, w.summed_residuals)?;
    let lt = pair_loss(g, heads.tilt, tt, w.summed_residuals)?;
    let lc = g.cosine_angle_loss(heads.rgb, tc)?;
    let lp = g.scale(lp, w.pan)?;
    let lt = g.scale(lt, w.tilt)?;
    let lc = g.scale(lc, w.color)?;
    let s = g.add(lp, lt)?;
    Ok(g.add(s, lc)?)
}

/// Loss of a single estimate against its target.
pub fn total_loss(est: &LightEstimate, gt: &LightGT, w: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let heads = Heads {
        pan: g.constant(Tensor::new(&[1, 2], vec![est.sin_pan, est.cos_pan]).expect("sized")),
        tilt: g.constant(Tensor::new(&[1, 2], vec![est.sin_tilt, est.cos_tilt]).expect("sized")),
        rgb: g.constant(Tensor::new(&[1, 3], est.rgb.to_vec()).expect("sized")),
    };
    let l = loss_on_graph(&mut g, &heads, &Targets::new(std::slice::from_ref(gt)), w)?;
    Ok(g.value(l).data()[0])
}

/// `[B, 3, H, W]` tensor of 8-bit images scaled to [0, 1].
pub fn images_to_tensor(imgs: &[&image::RgbImage]) -> Result<Tensor> {
    let first = imgs.first().ok_or_else(|| LumenError::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = vec![0.0; imgs.len() * 3 * h * w];
    for (b, img) in imgs.iter().enumerate() {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(LumenError::InvalidArgument("images in a batch differ in size".into()));
        }
        let base = b * 3 * h * w;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * h * w + i] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(&[imgs.len(), 3, h, w], data)?)
}

/// Finite-difference check of the batch loss with respect to every model
/// parameter. `input` is `[B, 3, S, S]` with one target per image.
pub fn loss_gradcheck(
    model: &LightNet,
    input: &Tensor,
    gts: &[LightGT],
    weights: &LossWeights,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if input.shape().first() != Some(&gts.len()) {
        return Err(LumenError::InvalidArgument(format!("{} targets for input {:?}", gts.len(), input.shape())));
    }
    let targets = Targets::new(gts);
    let values: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let f = |g: &mut Graph, vars: &[Var]| -> lumen_autodiff::Result<Var> {
        let bound = Bound::from_vars(vars.to_vec());
        let x = g.constant(input.clone());
        let heads = model.forward(g, &bound, x).map_err(into_autodiff)?;
        loss_on_graph(g, &heads, &targets, weights).map_err(into_autodiff)
    };
    Ok(check_gradients("total_loss", f, &values, cfg)?)
}

/// Tolerance of the end-to-end loss check.
pub const LOSS_GRADCHECK_TOLERANCE: f64 = 1e-4;

/// [`loss_gradcheck`] on a one-stage model with 16×16 input and two random
/// images and targets drawn from `seed`.
pub fn small_loss_gradcheck(seed: u64) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = LightNet::new(ModelConfig::tiny(16), rng.random())?;
    // zero biases put every dead channel's pre-activation exactly on a ReLU kink
    for p in model.params.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let input = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let gts: Vec<LightGT> = (0..2)
        .map(|_| LightGT {
            delta_pan: rng.random_range(-180.0..180.0),
            delta_tilt: rng.random_range(-80.0..80.0),
            color: LightColor::new(rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)),
        })
        .collect();
    // the loss is O(1), so a 1e-6 step leaves ~1e-9 of rounding noise on gradients as small as 1e-6
    let cfg =
        GradCheckConfig { rel_step: 1e-5, tolerance: LOSS_GRADCHECK_TOLERANCE, seed, ..GradCheckConfig::default() };
    loss_gradcheck(&model, &input, &gts, &LossWeights::default(), cfg)
}

fn into_autodiff(e: LumenError) -> AutodiffError {
    match e {
        LumenError::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument { op: "model", detail: other.to_string() },
    }
}

/// Anything that maps an 8-bit image to a prediction.
pub trait LightPredictor: Sync {
    fn predict_image(&self, img: &image::RgbImage) -> Result<Prediction>;
}

impl LightPredictor for LightNet {
    fn predict_image(&self, img: &image::RgbImage) -> Result<Prediction> {
        self.predict(img)
    }
}

//! Depth error detection network.
//!
//! Each view is an (RGB image, predicted depth) pair. Two residual encoder
//! branches, one per modality, run side by side; their per-stage outputs are
//! merged by a 3×3 convolution and kept as skip connections. The deepest
//! merged map is the view embedding. With two views the embeddings are fused
//! by channel concatenation and a 3×3 convolution. The decoder upsamples back
//! to full resolution, consuming the first view's skips, and a 3-channel head
//! produces per-pixel probabilities for {under, correct, over}.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{DepthRaster, RgbImage};
use crate::error::{Error, Result};
use crate::labeling::ErrorProbabilityMap;
use crate::tensor::{
    load_layers, read_checkpoint, snapshot_layers, write_checkpoint, CheckpointLayer, Fragment,
    Layer, LayerSpec, Mode, Scalar, Sgd, Tensor, TensorError, DEFAULT_LEAKY_SLOPE,
};

/// Depth in meters is divided by this before entering the network.
pub const DEFAULT_DEPTH_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Softmax,
    /// Independent per-channel sigmoids; probabilities need not sum to 1.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DednConfig {
    pub width: usize,
    pub height: usize,
    /// Output channels of each encoder stage; every stage halves the resolution.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub n_views: usize,
    pub head: HeadMode,
    pub depth_scale: f64,
    pub leaky_slope: f64,
}

impl Default for DednConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            n_views: 1,
            head: HeadMode::Softmax,
            depth_scale: DEFAULT_DEPTH_SCALE,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl DednConfig {
    /// Three narrow stages at 8×8; small enough for finite differences.
    pub fn toy(n_views: usize) -> Self {
        Self {
            width: 8,
            height: 8,
            channels: vec![2, 3, 4],
            blocks_per_stage: 1,
            n_views,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels.is_empty() {
            return bad("model has no encoder stages".into());
        }
        if self.channels.contains(&0) {
            return bad(format!(
                "stage channels must be positive, got {:?}",
                self.channels
            ));
        }
        if self.stages() > 16 {
            return bad(format!("{} encoder stages is too many", self.stages()));
        }
        let unit = 1usize << self.stages();
        if self.width == 0
            || self.height == 0
            || !self.width.is_multiple_of(unit)
            || !self.height.is_multiple_of(unit)
        {
            return bad(format!(
                "resolution {}x{} must be a positive multiple of {unit} for {} stages",
                self.width,
                self.height,
                self.stages()
            ));
        }
        if !(1..=2).contains(&self.n_views) {
            return bad(format!("n_views must be 1 or 2, got {}", self.n_views));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return bad(format!(
                "depth_scale must be positive, got {}",
                self.depth_scale
            ));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!(
                "leaky_slope must be in [0, 1), got {}",
                self.leaky_slope
            ));
        }
        Ok(())
    }
}

/// Network inputs for one view: RGB `[N, 3, H, W]` and scaled depth `[N, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTensors<S = f32> {
    pub rgb: Tensor<S>,
    pub depth: Tensor<S>,
}

impl<S: Scalar> ViewTensors<S> {
    /// Invalid depth pixels enter the network as 0.
    pub fn from_images(rgb: &RgbImage, depth: &DepthRaster, depth_scale: f64) -> Result<Self> {
        crate::error::check_dims("rgb vs depth", rgb.dims(), depth.dims())?;
        let (w, h) = rgb.dims();
        Ok(Self {
            rgb: Tensor::new(
                vec![1, 3, h, w],
                rgb.planes()
                    .iter()
                    .map(|&v| S::from_f64_lossy(v as f64))
                    .collect(),
            )?,
            depth: Tensor::new(
                vec![1, 1, h, w],
                depth
                    .normalized(depth_scale)
                    .into_iter()
                    .map(S::from_f64_lossy)
                    .collect(),
            )?,
        })
    }

    pub fn stack(parts: &[&ViewTensors<S>]) -> Result<Self> {
        let rgb: Vec<&Tensor<S>> = parts.iter().map(|p| &p.rgb).collect();
        let depth: Vec<&Tensor<S>> = parts.iter().map(|p| &p.depth).collect();
        Ok(Self {
            rgb: Tensor::stack_batch(&rgb)?,
            depth: Tensor::stack_batch(&depth)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.rgb.shape()[0]
    }
}

fn first<S>(mut v: Vec<Tensor<S>>) -> Tensor<S> {
    v.swap_remove(0)
}

fn two<S>(v: Vec<Tensor<S>>) -> (Tensor<S>, Tensor<S>) {
    let mut it = v.into_iter();
    let a = it.next().expect("two gradients");
    let b = it.next().expect("two gradients");
    (a, b)
}

fn add_into<S: Scalar>(acc: &mut Tensor<S>, g: &Tensor<S>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn sum_opt<S: Scalar>(a: Option<Tensor<S>>, b: Option<Tensor<S>>) -> Option<Tensor<S>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            add_into(&mut a, &b);
            Some(a)
        }
        (a, None) => a,
        (None, b) => b,
    }
}

/// Layers applied in sequence.
#[derive(Clone, Debug)]
struct Chain<S> {
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> Chain<S> {
    fn build(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::new(s, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut it = self.layers.iter_mut();
        let mut cur = it.next().expect("non-empty chain").forward(&[x], mode)?;
        for l in it {
            cur = l.forward(&[&cur], mode)?;
        }
        Ok(cur)
    }

    fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut it = self.layers.iter();
        let mut cur = it.next().expect("non-empty chain").eval(&[x])?;
        for l in it {
            cur = l.eval(&[&cur])?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let mut it = self.layers.iter_mut().rev();
        let mut g = first(it.next().expect("non-empty chain").backward(grad)?);
        for l in it {
            g = first(l.backward(&g)?);
        }
        Ok(g)
    }
}

fn conv_act(input: usize, output: usize, slope: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv3x3(input, output),
        LayerSpec::leaky_relu(output).with_slope(slope),
    ]
}

fn conv_bn_act(input: usize, output: usize, slope: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv3x3(input, output),
        LayerSpec::batchnorm(output),
        LayerSpec::leaky_relu(output).with_slope(slope),
    ]
}

/// Residual encoder: each stage is a stride-2 convolution, batchnorm, leaky
/// ReLU, then `blocks` residual blocks.
#[derive(Clone, Debug)]
pub struct EncoderBranch<S = f32> {
    in_channels: usize,
    channels: Vec<usize>,
    stages: Vec<Chain<S>>,
}

impl<S: Scalar> EncoderBranch<S> {
    pub fn stage_specs(
        in_channels: usize,
        channels: &[usize],
        blocks: usize,
        slope: f64,
    ) -> Vec<Vec<LayerSpec>> {
        let mut prev = in_channels;
        channels
            .iter()
            .map(|&c| {
                let mut s = vec![
                    LayerSpec::downsample(prev, c),
                    LayerSpec::batchnorm(c),
                    LayerSpec::leaky_relu(c).with_slope(slope),
                ];
                s.extend((0..blocks).map(|_| LayerSpec::residual(c).with_slope(slope)));
                prev = c;
                s
            })
            .collect()
    }

    pub fn new(
        in_channels: usize,
        channels: &[usize],
        blocks: usize,
        slope: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::with_rng(
            in_channels,
            channels,
            blocks,
            slope,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn with_rng(
        in_channels: usize,
        channels: &[usize],
        blocks: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidConfig("encoder branch has no stages".into()));
        }
        let stages = Self::stage_specs(in_channels, channels, blocks, slope)
            .iter()
            .map(|specs| Chain::build(specs, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            in_channels,
            channels: channels.to_vec(),
            stages,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Training-mode pass returning every stage's output.
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Vec<Tensor<S>>> {
        let mut outs: Vec<Tensor<S>> = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let out = stage.forward(outs.last().unwrap_or(x), mode)?;
            outs.push(out);
        }
        Ok(outs)
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mut outs: Vec<Tensor<S>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = stage.eval(outs.last().unwrap_or(x))?;
            outs.push(out);
        }
        Ok(outs)
    }

    /// `stage_grads[s]` is the gradient arriving at stage `s`'s output from
    /// outside the branch; the last entry must be present. Returns the input gradient.
    pub fn backward(&mut self, stage_grads: Vec<Option<Tensor<S>>>) -> Result<Tensor<S>> {
        if stage_grads.len() != self.stages.len() || stage_grads.last().is_none_or(|g| g.is_none())
        {
            return Err(TensorError::InvalidSpec(
                "encoder backward needs a gradient for the final stage".into(),
            )
            .into());
        }
        let mut carry: Option<Tensor<S>> = None;
        for (stage, g) in self.stages.iter_mut().zip(stage_grads).rev() {
            let g = sum_opt(g, carry.take()).expect("gradient flows from the final stage");
            carry = Some(stage.backward(&g)?);
        }
        Ok(carry.expect("at least one stage"))
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<S>> {
        self.stages.iter().flat_map(|c| c.layers.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<S>> {
        self.stages.iter_mut().flat_map(|c| c.layers.iter_mut())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn clear_records(&mut self) {
        self.layers_mut().for_each(Layer::clear_records);
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.spec().param_count()).sum()
    }
}

#[derive(Clone, Debug)]
struct Merge<S> {
    cat: Layer<S>,
    tail: Chain<S>,
}

impl<S: Scalar> Merge<S> {
    fn build(a: usize, b: usize, out: usize, slope: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            cat: Layer::new(&LayerSpec::concat(&[a, b]), rng)?,
            tail: Chain::build(&conv_act(a + b, out, slope), rng)?,
        })
    }

    fn forward(&mut self, a: &Tensor<S>, b: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let x = self.cat.forward(&[a, b], mode)?;
        self.tail.forward(&x, mode)
    }

    fn eval(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.tail.eval(&self.cat.eval(&[a, b])?)
    }

    fn backward(&mut self, g: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let g = self.tail.backward(g)?;
        Ok(two(self.cat.backward(&g)?))
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<S>> {
        std::iter::once(&self.cat).chain(self.tail.layers.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<S>> {
        std::iter::once(&mut self.cat).chain(self.tail.layers.iter_mut())
    }
}

/// RGB and depth branches plus per-stage merge convolutions.
#[derive(Clone, Debug)]
pub struct ViewFeatureEncoder<S = f32> {
    pub rgb: EncoderBranch<S>,
    pub depth: EncoderBranch<S>,
    merges: Vec<Merge<S>>,
}

impl<S: Scalar> ViewFeatureEncoder<S> {
    fn build(cfg: &DednConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (ch, b, slope) = (&cfg.channels, cfg.blocks_per_stage, cfg.leaky_slope);
        let rgb = EncoderBranch::with_rng(3, ch, b, slope, rng)?;
        let depth = EncoderBranch::with_rng(1, ch, b, slope, rng)?;
        let merges = ch
            .iter()
            .map(|&c| Merge::build(c, c, c, slope, rng))
            .collect::<Result<_>>()?;
        Ok(Self { rgb, depth, merges })
    }

    /// Merged stage maps; only the last is computed unless `skips` is set.
    fn forward(
        &mut self,
        v: &ViewTensors<S>,
        skips: bool,
        mode: Mode,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let r = self.rgb.forward(&v.rgb, mode)?;
        let d = self.depth.forward(&v.depth, mode)?;
        let last = self.merges.len() - 1;
        let mut out = Vec::with_capacity(self.merges.len());
        for (s, m) in self.merges.iter_mut().enumerate() {
            out.push(if skips || s == last {
                Some(m.forward(&r[s], &d[s], mode)?)
            } else {
                None
            });
        }
        Ok(out)
    }

    fn eval(&self, v: &ViewTensors<S>, skips: bool) -> Result<Vec<Option<Tensor<S>>>> {
        let r = self.rgb.eval(&v.rgb)?;
        let d = self.depth.eval(&v.depth)?;
        let last = self.merges.len() - 1;
        self.merges
            .iter()
            .enumerate()
            .map(|(s, m)| {
                if skips || s == last {
                    m.eval(&r[s], &d[s]).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    /// Mirrors [`Self::forward`]: merges whose gradient is absent were not run.
    fn backward(&mut self, grads: Vec<Option<Tensor<S>>>) -> Result<ViewTensors<S>> {
        let n = self.merges.len();
        let mut gr = vec![None; n];
        let mut gd = vec![None; n];
        for (s, g) in grads.into_iter().enumerate().rev() {
            if let Some(g) = g {
                let (a, b) = self.merges[s].backward(&g)?;
                gr[s] = Some(a);
                gd[s] = Some(b);
            }
        }
        Ok(ViewTensors {
            rgb: self.rgb.backward(gr)?,
            depth: self.depth.backward(gd)?,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<S>> {
        self.rgb
            .layers()
            .chain(self.depth.layers())
            .chain(self.merges.iter().flat_map(|m| m.layers()))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<S>> {
        self.rgb
            .layers_mut()
            .chain(self.depth.layers_mut())
            .chain(self.merges.iter_mut().flat_map(|m| m.layers_mut()))
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel<S> {
    up: Layer<S>,
    cat: Layer<S>,
    tail: Chain<S>,
}

#[derive(Clone, Debug)]
struct Decoder<S> {
    /// `levels[s]` brings the map to the resolution of encoder stage `s`;
    /// the final level returns to full resolution and sees the raw inputs.
    levels: Vec<DecoderLevel<S>>,
    head: Chain<S>,
}

impl<S: Scalar> Decoder<S> {
    fn build(cfg: &DednConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ch = &cfg.channels;
        let slope = cfg.leaky_slope;
        let mut levels = Vec::with_capacity(ch.len());
        for s in 0..ch.len() {
            // level s < S-1 joins stage s+1 features with stage s skips; the last joins stage 0 with the input
            let (deep, skip, extra): (usize, usize, &[usize]) = if s + 1 < ch.len() {
                (ch[s + 1], ch[s], &[])
            } else {
                (ch[0], 3, &[1])
            };
            let out = if s + 1 < ch.len() { ch[s] } else { ch[0] };
            let mut ins = vec![deep, skip];
            ins.extend_from_slice(extra);
            levels.push(DecoderLevel {
                up: Layer::new(&LayerSpec::upsample(deep), rng)?,
                cat: Layer::new(&LayerSpec::concat(&ins), rng)?,
                tail: Chain::build(&conv_bn_act(ins.iter().sum(), out, slope), rng)?,
            });
        }
        let norm = match cfg.head {
            HeadMode::Softmax => LayerSpec::softmax(3),
            HeadMode::Sigmoid => LayerSpec::sigmoid(3),
        };
        let head = Chain::build(&[LayerSpec::conv3x3(ch[0], 3), norm], rng)?;
        Ok(Self { levels, head })
    }

    /// Level application order: deepest skip first, full resolution last.
    fn order(&self) -> impl DoubleEndedIterator<Item = usize> {
        let n = self.levels.len();
        (0..n.saturating_sub(1)).rev().chain(std::iter::once(n - 1))
    }

    fn forward(
        &mut self,
        bottleneck: &Tensor<S>,
        skips: &[&Tensor<S>],
        input: &ViewTensors<S>,
        mode: Mode,
    ) -> Result<Tensor<S>> {
        let mut x = bottleneck.clone();
        for s in self.order().collect::<Vec<_>>() {
            let lvl = &mut self.levels[s];
            let up = lvl.up.forward(&[&x], mode)?;
            let cat = if s < skips.len() {
                lvl.cat.forward(&[&up, skips[s]], mode)?
            } else {
                lvl.cat.forward(&[&up, &input.rgb, &input.depth], mode)?
            };
            x = lvl.tail.forward(&cat, mode)?;
        }
        self.head.forward(&x, mode)
    }

    fn eval(
        &self,
        bottleneck: &Tensor<S>,
        skips: &[&Tensor<S>],
        input: &ViewTensors<S>,
    ) -> Result<Tensor<S>> {
        let mut x = bottleneck.clone();
        for s in self.order() {
            let lvl = &self.levels[s];
            let up = lvl.up.eval(&[&x])?;
            let cat = if s < skips.len() {
                lvl.cat.eval(&[&up, skips[s]])?
            } else {
                lvl.cat.eval(&[&up, &input.rgb, &input.depth])?
            };
            x = lvl.tail.eval(&cat)?;
        }
        self.head.eval(&x)
    }

    /// Returns (bottleneck grad, skip grads, full-resolution input grads).
    #[allow(clippy::type_complexity)]
    fn backward(
        &mut self,
        grad: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>, ViewTensors<S>)> {
        let n = self.levels.len();
        let mut g = self.head.backward(grad)?;
        let mut skip_grads: Vec<Option<Tensor<S>>> = vec![None; n - 1];
        let mut input_grads = None;
        for s in self.order().rev().collect::<Vec<_>>() {
            let lvl = &mut self.levels[s];
            let gc = lvl.tail.backward(&g)?;
            let mut parts = lvl.cat.backward(&gc)?.into_iter();
            let g_up = parts.next().expect("upsampled part");
            if s + 1 < n {
                skip_grads[s] = parts.next();
            } else {
                let rgb = parts.next().expect("rgb part");
                let depth = parts.next().expect("depth part");
                input_grads = Some(ViewTensors { rgb, depth });
            }
            g = first(lvl.up.backward(&g_up)?);
        }
        Ok((
            g,
            skip_grads
                .into_iter()
                .map(|g| g.expect("every skip level ran"))
                .collect(),
            input_grads.expect("full-resolution level ran"),
        ))
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<S>> {
        self.levels
            .iter()
            .flat_map(|l| [&l.up, &l.cat].into_iter().chain(l.tail.layers.iter()))
            .chain(self.head.layers.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<S>> {
        self.levels
            .iter_mut()
            .flat_map(|l| {
                [&mut l.up, &mut l.cat]
                    .into_iter()
                    .chain(l.tail.layers.iter_mut())
            })
            .chain(self.head.layers.iter_mut())
    }
}

/// Test hooks for checking that every connection carries signal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ablation {
    /// Replace this encoder skip (0 = shallowest) with zeros.
    pub zero_skip: Option<usize>,
    /// Replace the second view's embedding with zeros before fusion.
    pub zero_second_embedding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub n_views: usize,
    pub head: HeadMode,
    pub encoder_params: usize,
    pub fusion_params: usize,
    pub decoder_params: usize,
    pub total_params: usize,
}

impl fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stages={}", self.stages)?;
        writeln!(f, "channels={:?}", self.channels)?;
        writeln!(f, "n_views={}", self.n_views)?;
        writeln!(f, "head={:?}", self.head)?;
        writeln!(f, "encoder_params={}", self.encoder_params)?;
        writeln!(f, "fusion_params={}", self.fusion_params)?;
        writeln!(f, "decoder_params={}", self.decoder_params)?;
        write!(f, "total_params={}", self.total_params)
    }
}

#[derive(Clone, Debug)]
pub struct DednModel<S = f32> {
    config: DednConfig,
    pub encoder: ViewFeatureEncoder<S>,
    fusion: Option<Merge<S>>,
    decoder: Decoder<S>,
}

impl<S: Scalar> DednModel<S> {
    pub fn new(config: DednConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ViewFeatureEncoder::build(&config, &mut rng)?;
        let c = *config.channels.last().expect("validated");
        let fusion = if config.n_views > 1 {
            Some(Merge::build(c, c, c, config.leaky_slope, &mut rng)?)
        } else {
            None
        };
        let decoder = Decoder::build(&config, &mut rng)?;
        Ok(Self {
            config,
            encoder,
            fusion,
            decoder,
        })
    }

    pub fn config(&self) -> &DednConfig {
        &self.config
    }

    fn check_views(&self, views: &[ViewTensors<S>]) -> Result<usize> {
        if views.len() != self.config.n_views {
            return Err(Error::ViewCount {
                expected: self.config.n_views,
                actual: views.len(),
            });
        }
        let want = (self.config.width, self.config.height);
        let n = views[0].batch_size();
        for v in views {
            let (vn, c, h, w) = v.rgb.dims4()?;
            let (dn, dc, dh, dw) = v.depth.dims4()?;
            crate::error::check_dims("input resolution", want, (w, h))?;
            crate::error::check_dims("depth resolution", want, (dw, dh))?;
            if c != 3 || dc != 1 || vn != n || dn != n {
                return Err(Error::InvalidInput(format!(
                    "view tensors must be [{n}, 3, H, W] and [{n}, 1, H, W], got {:?} and {:?}",
                    v.rgb.shape(),
                    v.depth.shape()
                )));
            }
        }
        Ok(n)
    }

    /// Recording pass; returns probabilities `[N, 3, H, W]`.
    pub fn forward(&mut self, views: &[ViewTensors<S>], mode: Mode) -> Result<Tensor<S>> {
        self.check_views(views)?;
        let enc1 = self.encoder.forward(&views[0], true, mode)?;
        let skips: Vec<&Tensor<S>> = enc1[..enc1.len() - 1]
            .iter()
            .map(|t| t.as_ref().expect("skips"))
            .collect();
        let e1 = enc1.last().and_then(Option::as_ref).expect("bottleneck");
        let fused;
        let bottleneck = match &mut self.fusion {
            Some(fusion) => {
                let enc2 = self.encoder.forward(&views[1], false, mode)?;
                let e2 = enc2.last().and_then(Option::as_ref).expect("bottleneck");
                fused = fusion.forward(e1, e2, mode)?;
                &fused
            }
            None => e1,
        };
        self.decoder.forward(bottleneck, &skips, &views[0], mode)
    }

    /// Consumes the most recent [`Self::forward`]; returns per-view input gradients.
    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Vec<ViewTensors<S>>> {
        let (g_bottleneck, skip_grads, g_input) = self.decoder.backward(grad)?;
        let stages = self.config.stages();
        let mut per_view = Vec::with_capacity(self.config.n_views);
        let g1 = match &mut self.fusion {
            Some(fusion) => {
                let (g1, g2) = fusion.backward(&g_bottleneck)?;
                let mut grads2 = vec![None; stages];
                grads2[stages - 1] = Some(g2);
                per_view.push(self.encoder.backward(grads2)?);
                g1
            }
            None => g_bottleneck,
        };
        let mut grads1: Vec<Option<Tensor<S>>> = skip_grads.into_iter().map(Some).collect();
        grads1.push(Some(g1));
        let mut v1 = self.encoder.backward(grads1)?;
        add_into(&mut v1.rgb, &g_input.rgb);
        add_into(&mut v1.depth, &g_input.depth);
        per_view.push(v1);
        per_view.reverse();
        Ok(per_view)
    }

    /// Inference pass with running batchnorm statistics; records nothing.
    pub fn eval(&self, views: &[ViewTensors<S>]) -> Result<Tensor<S>> {
        self.eval_ablated(views, &Ablation::default())
    }

    pub fn eval_ablated(&self, views: &[ViewTensors<S>], ablation: &Ablation) -> Result<Tensor<S>> {
        self.check_views(views)?;
        let mut enc1 = self.encoder.eval(&views[0], true)?;
        let mut e1 = enc1.pop().flatten().expect("bottleneck");
        let mut skips: Vec<Tensor<S>> = enc1.into_iter().map(|t| t.expect("skips")).collect();
        if let Some(s) = ablation.zero_skip {
            let t = skips
                .get_mut(s)
                .ok_or_else(|| Error::InvalidInput(format!("no skip connection {s}")))?;
            *t = Tensor::zeros(t.shape());
        }
        if let Some(fusion) = &self.fusion {
            let mut e2 = self
                .encoder
                .eval(&views[1], false)?
                .pop()
                .flatten()
                .expect("bottleneck");
            if ablation.zero_second_embedding {
                e2 = Tensor::zeros(e2.shape());
            }
            e1 = fusion.eval(&e1, &e2)?;
        }
        let refs: Vec<&Tensor<S>> = skips.iter().collect();
        self.decoder.eval(&e1, &refs, &views[0])
    }

    /// Bottleneck embedding of each view before fusion.
    pub fn embeddings(&self, views: &[ViewTensors<S>]) -> Result<Vec<Tensor<S>>> {
        self.check_views(views)?;
        views
            .iter()
            .map(|v| {
                Ok(self
                    .encoder
                    .eval(v, false)?
                    .pop()
                    .flatten()
                    .expect("bottleneck"))
            })
            .collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<S>> {
        self.encoder
            .layers()
            .chain(self.fusion.iter().flat_map(|f| f.layers()))
            .chain(self.decoder.layers())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<S>> {
        self.encoder
            .layers_mut()
            .chain(self.fusion.iter_mut().flat_map(|f| f.layers_mut()))
            .chain(self.decoder.layers_mut())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_records(&mut self) {
        self.layers_mut().for_each(Layer::clear_records);
    }

    pub fn describe(&self) -> ModelSummary {
        let count = |it: &mut dyn Iterator<Item = &Layer<S>>| {
            it.map(|l| l.spec().param_count()).sum::<usize>()
        };
        let encoder_params = count(&mut self.encoder.layers());
        let fusion_params = count(&mut self.fusion.iter().flat_map(|f| f.layers()));
        let decoder_params = count(&mut self.decoder.layers());
        ModelSummary {
            stages: self.config.stages(),
            channels: self.config.channels.clone(),
            n_views: self.config.n_views,
            head: self.config.head,
            encoder_params,
            fusion_params,
            decoder_params,
            total_params: encoder_params + fusion_params + decoder_params,
        }
    }

    pub fn to_checkpoint(&self) -> Vec<CheckpointLayer> {
        snapshot_layers(self.layers())
    }

    pub fn load_checkpoint(&mut self, layers: &[CheckpointLayer]) -> Result<()> {
        load_layers(self.layers_mut(), layers)?;
        Ok(())
    }
}

impl DednModel<f32> {
    fn view_tensors(&self, views: &[(&RgbImage, &DepthRaster)]) -> Result<Vec<ViewTensors<f32>>> {
        views
            .iter()
            .map(|(rgb, depth)| ViewTensors::from_images(rgb, depth, self.config.depth_scale))
            .collect()
    }

    /// Error probabilities for the first view's depth map.
    pub fn infer(&self, views: &[(&RgbImage, &DepthRaster)]) -> Result<ErrorProbabilityMap> {
        Ok(self.infer_batch(&[views.to_vec()])?.remove(0))
    }

    /// Batched [`Self::infer`]; each entry lists one sample's views.
    pub fn infer_batch(
        &self,
        samples: &[Vec<(&RgbImage, &DepthRaster)>],
    ) -> Result<Vec<ErrorProbabilityMap>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let per_sample: Vec<Vec<ViewTensors<f32>>> = samples
            .iter()
            .map(|s| self.view_tensors(s))
            .collect::<Result<_>>()?;
        let n_views = per_sample[0].len();
        if let Some(bad) = per_sample.iter().find(|s| s.len() != n_views) {
            return Err(Error::ViewCount {
                expected: n_views,
                actual: bad.len(),
            });
        }
        let views: Vec<ViewTensors<f32>> = (0..n_views)
            .map(|v| ViewTensors::stack(&per_sample.iter().map(|s| &s[v]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let out = self.eval(&views)?;
        let (n, _, h, w) = out.dims4()?;
        let stride = 3 * h * w;
        (0..n)
            .map(|i| {
                let planes = out.data()[i * stride..(i + 1) * stride]
                    .iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .collect();
                ErrorProbabilityMap::new(w, h, planes)
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_checkpoint(&mut w, &self.to_checkpoint())?;
        Ok(())
    }

    /// Builds a model for `config` and fills it from a checkpoint file.
    pub fn load(config: DednConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut r = BufReader::new(fs::File::open(path)?);
        model.load_checkpoint(&read_checkpoint(&mut r)?)?;
        Ok(model)
    }
}

/// Inputs are the view tensors flattened as [rgb₁, depth₁, rgb₂, depth₂, …].
impl<S: Scalar> Fragment<S> for DednModel<S> {
    fn forward(&mut self, inputs: &[Tensor<S>]) -> crate::tensor::Result<Tensor<S>> {
        let views: Vec<ViewTensors<S>> = inputs
            .chunks(2)
            .map(|c| ViewTensors {
                rgb: c[0].clone(),
                depth: c[1].clone(),
            })
            .collect();
        DednModel::forward(self, &views, Mode::Train).map_err(to_tensor_error)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> crate::tensor::Result<Vec<Tensor<S>>> {
        let views = DednModel::backward(self, grad).map_err(to_tensor_error)?;
        Ok(views.into_iter().flat_map(|v| [v.rgb, v.depth]).collect())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        DednModel::params_mut(self)
    }

    fn clear_records(&mut self) {
        DednModel::clear_records(self)
    }
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidSpec(other.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 8,
            epochs: 3,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "distillation needs batch_size ≥ 1 and learning_rate ≥ 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "distillation momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Mean squared distance between final-stage features, averaged over pairs.
fn distill_loss(
    student: &EncoderBranch<f32>,
    teacher: &EncoderBranch<f32>,
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    for chunk in pairs.chunks(batch) {
        let t_in = Tensor::stack_batch(&chunk.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        let s_in = Tensor::stack_batch(&chunk.iter().map(|p| &p.1).collect::<Vec<_>>())?;
        let t = teacher.eval(&t_in)?.pop().expect("stages");
        let s = student.eval(&s_in)?.pop().expect("stages");
        let per = t.len() / chunk.len();
        for i in 0..chunk.len() {
            let sq: f64 = t.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&s.data()[i * per..(i + 1) * per])
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            total += sq / per as f64;
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Trains `student` so its final-stage features match the frozen `teacher`'s
/// on each (teacher input, student input) pair. Returns the held-in loss
/// before training followed by the loss after each epoch.
pub fn pretrain_distill(
    student: &mut EncoderBranch<f32>,
    teacher: &EncoderBranch<f32>,
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    if student.channels() != teacher.channels() {
        return Err(Error::InvalidConfig(format!(
            "student stages {:?} differ from teacher stages {:?}",
            student.channels(),
            teacher.channels()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("no distillation pairs".into()));
    }
    cfg.validate()?;
    let spatial = |t: &Tensor<f32>| t.shape().get(2..).map(<[usize]>::to_vec);
    let reference = spatial(&pairs[0].0);
    for (i, (t, s)) in pairs.iter().enumerate() {
        let ok = t.shape().len() == 4
            && s.shape().len() == 4
            && t.shape()[..2] == [1, teacher.in_channels()]
            && s.shape()[..2] == [1, student.in_channels()]
            && spatial(t) == spatial(s)
            && spatial(t) == reference;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "distillation pair {i} is unpaired: teacher input {:?}, student input {:?}",
                t.shape(),
                s.shape()
            )));
        }
    }

    let mut curve = vec![distill_loss(student, teacher, pairs, cfg.batch_size)?];
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Layer::<f32>::new(
        &LayerSpec::mse_head(*student.channels().last().expect("stages")),
        &mut rng,
    )?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let t_in =
                Tensor::stack_batch(&chunk.iter().map(|&i| &pairs[i].0).collect::<Vec<_>>())?;
            let s_in =
                Tensor::stack_batch(&chunk.iter().map(|&i| &pairs[i].1).collect::<Vec<_>>())?;
            let target = teacher.eval(&t_in)?.pop().expect("stages");
            let out = student.forward(&s_in, Mode::Train)?.pop().expect("stages");
            let loss = head.forward(&[&out, &target], Mode::Train)?;
            if !loss.all_finite() {
                student.clear_records();
                return Err(Error::NonFinite {
                    what: "distillation loss".into(),
                    epoch,
                    batch: b,
                });
            }
            let g = first(head.backward(&Tensor::full(&[1], 1.0))?);
            let mut grads = vec![None; student.channels().len()];
            *grads.last_mut().expect("stages") = Some(g);
            student.backward(grads)?;
            opt.step(student.params_mut())?;
        }
        curve.push(distill_loss(student, teacher, pairs, cfg.batch_size)?);
    }
    Ok(curve)
}

impl DednModel<f32> {
    /// Distills the depth branch against a frozen copy of the RGB branch.
    pub fn distill_depth_branch(
        &mut self,
        samples: &[(&RgbImage, &DepthRaster)],
        cfg: &DistillConfig,
    ) -> Result<Vec<f64>> {
        let pairs = samples
            .iter()
            .map(|(rgb, depth)| {
                let v = ViewTensors::<f32>::from_images(rgb, depth, self.config.depth_scale)?;
                Ok((v.rgb, v.depth))
            })
            .collect::<Result<Vec<_>>>()?;
        let teacher = self.encoder.rgb.clone();
        pretrain_distill(&mut self.encoder.depth, &teacher, &pairs, cfg)
    }
}

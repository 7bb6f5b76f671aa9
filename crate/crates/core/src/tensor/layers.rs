use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{col2im, im2col, ConvGeom, TAPS};
use super::{ensure_finite, mismatch, Result, Scalar, Tensor, TensorError};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    ResidualBlock,
    DownsampleStride2,
    UpsampleNearest2x,
    BatchNorm,
    LeakyRelu,
    Sigmoid,
    SoftmaxChannels,
    ConcatChannels,
    MseHead,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv3x3,
        LayerKind::ResidualBlock,
        LayerKind::DownsampleStride2,
        LayerKind::UpsampleNearest2x,
        LayerKind::BatchNorm,
        LayerKind::LeakyRelu,
        LayerKind::Sigmoid,
        LayerKind::SoftmaxChannels,
        LayerKind::ConcatChannels,
        LayerKind::MseHead,
    ];

    /// Stable one-byte tag used in checkpoints.
    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get((tag as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::ResidualBlock => "residual_block",
            LayerKind::DownsampleStride2 => "downsample_stride2",
            LayerKind::UpsampleNearest2x => "upsample_nearest2x",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::LeakyRelu => "leaky_relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::SoftmaxChannels => "softmax_channels",
            LayerKind::ConcatChannels => "concat_channels",
            LayerKind::MseHead => "mse_head",
        }
    }
}

/// Declarative description of one layer: kind, channel contract and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Channel count of each input (several only for concatenation and the MSE head).
    pub in_channels: Vec<usize>,
    pub out_channels: usize,
    pub leaky_slope: f64,
    pub epsilon: f64,
}

impl LayerSpec {
    fn simple(kind: LayerKind, input: usize, output: usize) -> Self {
        Self {
            kind,
            in_channels: vec![input],
            out_channels: output,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn conv3x3(input: usize, output: usize) -> Self {
        Self::simple(LayerKind::Conv3x3, input, output)
    }

    pub fn downsample(input: usize, output: usize) -> Self {
        Self::simple(LayerKind::DownsampleStride2, input, output)
    }

    pub fn residual(channels: usize) -> Self {
        Self::simple(LayerKind::ResidualBlock, channels, channels)
    }

    pub fn upsample(channels: usize) -> Self {
        Self::simple(LayerKind::UpsampleNearest2x, channels, channels)
    }

    pub fn batchnorm(channels: usize) -> Self {
        Self::simple(LayerKind::BatchNorm, channels, channels)
    }

    pub fn leaky_relu(channels: usize) -> Self {
        Self::simple(LayerKind::LeakyRelu, channels, channels)
    }

    pub fn sigmoid(channels: usize) -> Self {
        Self::simple(LayerKind::Sigmoid, channels, channels)
    }

    pub fn softmax(channels: usize) -> Self {
        Self::simple(LayerKind::SoftmaxChannels, channels, channels)
    }

    pub fn concat(inputs: &[usize]) -> Self {
        Self {
            kind: LayerKind::ConcatChannels,
            in_channels: inputs.to_vec(),
            out_channels: inputs.iter().sum(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn mse_head(channels: usize) -> Self {
        Self {
            kind: LayerKind::MseHead,
            in_channels: vec![channels, channels],
            out_channels: 1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn with_slope(mut self, slope: f64) -> Self {
        self.leaky_slope = slope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.kind.name();
        let bad = |msg: String| Err(TensorError::InvalidSpec(format!("{name}: {msg}")));
        if self.in_channels.contains(&0) || self.out_channels == 0 {
            return bad("zero channels".into());
        }
        match self.kind {
            LayerKind::ConcatChannels => {
                if self.in_channels.len() < 2 {
                    return bad("needs at least two inputs".into());
                }
                let sum: usize = self.in_channels.iter().sum();
                if sum != self.out_channels {
                    return bad(format!("out {} != sum of inputs {sum}", self.out_channels));
                }
            }
            LayerKind::MseHead => {
                if self.in_channels.len() != 2 || self.in_channels[0] != self.in_channels[1] {
                    return bad("needs two inputs of equal channel count".into());
                }
                if self.out_channels != 1 {
                    return bad("output is a scalar".into());
                }
            }
            LayerKind::Conv3x3 | LayerKind::DownsampleStride2 => {
                if self.in_channels.len() != 1 {
                    return bad("single input expected".into());
                }
            }
            _ => {
                if self.in_channels.len() != 1 || self.in_channels[0] != self.out_channels {
                    return bad("channel-preserving layer with one input".into());
                }
            }
        }
        if matches!(self.kind, LayerKind::LeakyRelu | LayerKind::ResidualBlock)
            && !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0)
        {
            return bad("leaky slope must be finite and nonnegative".into());
        }
        if matches!(self.kind, LayerKind::BatchNorm | LayerKind::ResidualBlock)
            && !(self.epsilon.is_finite() && self.epsilon > 0.0)
        {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }

    /// Number of trainable scalars this layer owns.
    pub fn param_count(&self) -> usize {
        let i = self.in_channels[0];
        let o = self.out_channels;
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::DownsampleStride2 => o * i * TAPS + o,
            LayerKind::BatchNorm => 2 * o,
            LayerKind::ResidualBlock => 2 * (o * o * TAPS + o) + 2 * (2 * o),
            _ => 0,
        }
    }
}

/// Whether batch statistics (training) or running statistics (inference) are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn one<'a, S>(inputs: &[&'a Tensor<S>], layer: &str) -> Result<&'a Tensor<S>> {
    match inputs {
        [x] => Ok(x),
        _ => Err(mismatch(layer, "input count", 1, inputs.len())),
    }
}

fn check_channels<S: Scalar>(
    x: &Tensor<S>,
    expected: usize,
    layer: &str,
) -> Result<(usize, usize, usize, usize)> {
    let dims = x
        .dims4()
        .map_err(|_| mismatch(layer, "rank", 4, x.shape().len()))?;
    if dims.1 != expected {
        return Err(mismatch(layer, "channels", expected, dims.1));
    }
    Ok(dims)
}

fn check_grad<S: Scalar>(grad: &Tensor<S>, shape: &[usize], layer: &str) -> Result<()> {
    if grad.shape() != shape {
        return Err(mismatch(
            layer,
            "output gradient",
            format!("{shape:?}"),
            format!("{:?}", grad.shape()),
        ));
    }
    Ok(())
}

fn pop<T>(stack: &mut Vec<T>, layer: &str) -> Result<T> {
    stack
        .pop()
        .ok_or_else(|| TensorError::BackwardBeforeForward {
            layer: layer.to_string(),
        })
}

fn kaiming<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        S::from_f64_lossy(rng.random_range(-bound..bound))
    })
}

// ---------------------------------------------------------------------------

/// 3×3 convolution, zero padding 1, stride 1 (`conv3x3`) or 2 (`downsample_stride2`).
#[derive(Clone, Debug)]
pub struct Conv<S> {
    spec: LayerSpec,
    stride: usize,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    saved: Vec<Tensor<S>>,
}

impl<S: Scalar> Conv<S> {
    pub fn new(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let stride = match spec.kind {
            LayerKind::Conv3x3 => 1,
            LayerKind::DownsampleStride2 => 2,
            other => {
                return Err(TensorError::InvalidSpec(format!(
                    "{} is not a convolution",
                    other.name()
                )))
            }
        };
        let (i, o) = (spec.in_channels[0], spec.out_channels);
        Ok(Self {
            weight: kaiming(&[o, i, 3, 3], i * TAPS, rng),
            bias: Tensor::zeros(&[o]),
            stride,
            spec,
            saved: Vec::new(),
        })
    }

    fn name(&self) -> &'static str {
        self.spec.kind.name()
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = check_channels(x, self.spec.in_channels[0], self.name())?;
        let g = ConvGeom::new(c, h, w, self.stride);
        let o = self.spec.out_channels;
        let (k, p) = (g.rows(), g.cols());
        let mut out = Tensor::zeros(&[n, o, g.out_h, g.out_w]);
        let mut col = vec![S::zero(); k * p];
        let in_len = c * h * w;
        for s in 0..n {
            im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut col);
            let dst = &mut out.data_mut()[s * o * p..(s + 1) * o * p];
            S::gemm(
                o,
                k,
                p,
                S::one(),
                self.weight.data(),
                k as isize,
                1,
                &col,
                p as isize,
                1,
                S::zero(),
                dst,
                p as isize,
                1,
            );
            for (oc, b) in self.bias.data().iter().enumerate() {
                dst[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += *b);
            }
        }
        ensure_finite(&out, self.name())?;
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.eval(x)?;
        self.saved.push(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let name = self.name();
        let x = pop(&mut self.saved, name)?;
        let (n, c, h, w) = x.dims4()?;
        let g = ConvGeom::new(c, h, w, self.stride);
        let o = self.spec.out_channels;
        check_grad(grad, &[n, o, g.out_h, g.out_w], name)?;
        let (k, p) = (g.rows(), g.cols());
        let in_len = c * h * w;
        let mut col = vec![S::zero(); k * p];
        let mut dcol = vec![S::zero(); k * p];
        let mut dx = Tensor::zeros(x.shape());
        let weight = self.weight.data().to_vec();
        let dw = self.weight.grad_mut();
        for s in 0..n {
            let gs = &grad.data()[s * o * p..(s + 1) * o * p];
            im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut col);
            // dW += g · colᵀ
            S::gemm(
                o,
                p,
                k,
                S::one(),
                gs,
                p as isize,
                1,
                &col,
                1,
                p as isize,
                S::one(),
                dw,
                k as isize,
                1,
            );
            // dcol = Wᵀ · g
            S::gemm(
                k,
                o,
                p,
                S::one(),
                &weight,
                1,
                k as isize,
                gs,
                p as isize,
                1,
                S::zero(),
                &mut dcol,
                p as isize,
                1,
            );
            col2im(&dcol, &g, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
        }
        let db = self.bias.grad_mut();
        for s in 0..n {
            for (oc, b) in db.iter_mut().enumerate() {
                let start = (s * o + oc) * p;
                *b += grad.data()[start..start + p]
                    .iter()
                    .fold(S::zero(), |a, &v| a + v);
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct BnSaved<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    shape: Vec<usize>,
    train: bool,
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<S> {
    spec: LayerSpec,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    saved: Vec<BnSaved<S>>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.out_channels;
        Ok(Self {
            gamma: Tensor::full(&[c], S::one()),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], S::one()),
            spec,
            saved: Vec::new(),
        })
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, BnSaved<S>, Vec<S>, Vec<S>)> {
        let name = "batchnorm";
        let (n, c, h, w) = check_channels(x, self.spec.out_channels, name)?;
        let plane = h * w;
        let m = S::from_usize(n * plane).unwrap();
        let eps = S::from_f64_lossy(self.spec.epsilon);
        let mut means = vec![S::zero(); c];
        let mut vars = vec![S::zero(); c];
        let mut inv_std = vec![S::zero(); c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = S::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        sum += x.data()[base..base + plane]
                            .iter()
                            .fold(S::zero(), |a, &v| a + v);
                    }
                    let mean = sum / m;
                    let mut sq = S::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        sq += x.data()[base..base + plane]
                            .iter()
                            .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean));
                    }
                    (mean, sq / m)
                }
                Mode::Eval => (self.running_mean.data()[ch], self.running_var.data()[ch]),
            };
            means[ch] = mean;
            vars[ch] = var;
            inv_std[ch] = S::one() / (var + eps).sqrt();
        }
        let mut xhat = vec![S::zero(); x.len()];
        let mut out = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                for (i, xh) in xhat.iter_mut().enumerate().skip(base).take(plane) {
                    *xh = (x.data()[i] - means[ch]) * inv_std[ch];
                    out.data_mut()[i] = g * *xh + b;
                }
            }
        }
        ensure_finite(&out, name)?;
        let saved = BnSaved {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
            train: mode == Mode::Train,
        };
        Ok((out, saved, means, vars))
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.run(x, Mode::Eval)?.0)
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let (out, saved, means, vars) = self.run(x, mode)?;
        if mode == Mode::Train {
            let (n, _, h, w) = x.dims4()?;
            let m = n * h * w;
            let mom = S::from_f64_lossy(BN_MOMENTUM);
            let unbias = if m > 1 {
                S::from_usize(m).unwrap() / S::from_usize(m - 1).unwrap()
            } else {
                S::one()
            };
            for ch in 0..means.len() {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (S::one() - mom) * *rm + mom * means[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (S::one() - mom) * *rv + mom * vars[ch] * unbias;
            }
        }
        self.saved.push(saved);
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let saved = pop(&mut self.saved, "batchnorm")?;
        check_grad(grad, &saved.shape, "batchnorm")?;
        let (n, c, h, w) = (
            saved.shape[0],
            saved.shape[1],
            saved.shape[2],
            saved.shape[3],
        );
        let plane = h * w;
        let m = S::from_usize(n * plane).unwrap();
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    dgamma[ch] += grad.data()[i] * saved.xhat[i];
                    dbeta[ch] += grad.data()[i];
                }
            }
        }
        let mut dx = Tensor::zeros(&saved.shape);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let g = self.gamma.data()[ch];
                let k = g * saved.inv_std[ch];
                for i in base..base + plane {
                    dx.data_mut()[i] = if saved.train {
                        k / m * (m * grad.data()[i] - dbeta[ch] - saved.xhat[i] * dgamma[ch])
                    } else {
                        k * grad.data()[i]
                    };
                }
            }
        }
        for (a, b) in self.gamma.grad_mut().iter_mut().zip(&dgamma) {
            *a += *b;
        }
        for (a, b) in self.beta.grad_mut().iter_mut().zip(&dbeta) {
            *a += *b;
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LeakyRelu<S> {
    slope: S,
    channels: usize,
    saved: Vec<Tensor<S>>,
}

impl<S: Scalar> LeakyRelu<S> {
    pub fn new(slope: f64, channels: usize) -> Self {
        Self {
            slope: S::from_f64_lossy(slope),
            channels,
            saved: Vec::new(),
        }
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_channels(x, self.channels, "leaky_relu")?;
        let s = self.slope;
        Ok(x.map(|v| if v > S::zero() { v } else { v * s }))
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.eval(x)?;
        self.saved.push(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let x = pop(&mut self.saved, "leaky_relu")?;
        check_grad(grad, x.shape(), "leaky_relu")?;
        let mut dx = grad.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v <= S::zero() {
                *d *= self.slope;
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Sigmoid<S> {
    channels: usize,
    saved: Vec<Tensor<S>>,
}

impl<S: Scalar> Sigmoid<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            saved: Vec::new(),
        }
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_channels(x, self.channels, "sigmoid")?;
        Ok(x.map(|v| S::one() / (S::one() + (-v).exp())))
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.eval(x)?;
        self.saved.push(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let y = pop(&mut self.saved, "sigmoid")?;
        check_grad(grad, y.shape(), "sigmoid")?;
        let mut dx = grad.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= v * (S::one() - v);
        }
        Ok(dx)
    }
}

/// Softmax across the channel axis, independently at every pixel.
#[derive(Clone, Debug)]
pub struct SoftmaxChannels<S> {
    channels: usize,
    saved: Vec<Tensor<S>>,
}

impl<S: Scalar> SoftmaxChannels<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            saved: Vec::new(),
        }
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = check_channels(x, self.channels, "softmax_channels")?;
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        let src = x.data();
        let dst = out.data_mut();
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let mut mx = S::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(src[base + ch * plane + p]);
                }
                let mut sum = S::zero();
                for ch in 0..c {
                    let e = (src[base + ch * plane + p] - mx).exp();
                    dst[base + ch * plane + p] = e;
                    sum += e;
                }
                for ch in 0..c {
                    dst[base + ch * plane + p] /= sum;
                }
            }
        }
        ensure_finite(&out, "softmax_channels")?;
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.eval(x)?;
        self.saved.push(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let y = pop(&mut self.saved, "softmax_channels")?;
        check_grad(grad, y.shape(), "softmax_channels")?;
        let (n, c, h, w) = y.dims4()?;
        let plane = h * w;
        let mut dx = Tensor::zeros(y.shape());
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let mut dot = S::zero();
                for ch in 0..c {
                    let i = base + ch * plane + p;
                    dot += grad.data()[i] * y.data()[i];
                }
                for ch in 0..c {
                    let i = base + ch * plane + p;
                    dx.data_mut()[i] = y.data()[i] * (grad.data()[i] - dot);
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct UpsampleNearest2x<S> {
    channels: usize,
    saved: Vec<Vec<usize>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> UpsampleNearest2x<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            saved: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = check_channels(x, self.channels, "upsample_nearest2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let dst = out.data_mut();
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    d[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.eval(x)?;
        self.saved.push(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = pop(&mut self.saved, "upsample_nearest2x")?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        check_grad(grad, &[n, c, 2 * h, 2 * w], "upsample_nearest2x")?;
        let ow = 2 * w;
        let mut dx = Tensor::zeros(&shape);
        let dst = dx.data_mut();
        for plane in 0..n * c {
            let g = &grad.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..ow {
                    dst[plane * h * w + (y / 2) * w + xx / 2] += g[y * ow + xx];
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Concat {
    channels: Vec<usize>,
    saved: Vec<(usize, usize, usize)>,
}

impl Concat {
    pub fn new(channels: Vec<usize>) -> Self {
        Self {
            channels,
            saved: Vec::new(),
        }
    }

    pub fn eval<S: Scalar>(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if inputs.len() != self.channels.len() {
            return Err(mismatch(
                "concat_channels",
                "input count",
                self.channels.len(),
                inputs.len(),
            ));
        }
        let (n, _, h, w) = inputs[0].dims4()?;
        for (i, (x, &c)) in inputs.iter().zip(&self.channels).enumerate() {
            let (xn, xc, xh, xw) = x.dims4()?;
            if xc != c {
                return Err(mismatch(
                    "concat_channels",
                    format!("channels of input {i}"),
                    c,
                    xc,
                ));
            }
            if (xn, xh, xw) != (n, h, w) {
                return Err(mismatch(
                    "concat_channels",
                    format!("batch/spatial size of input {i}"),
                    format!("{n}x{h}x{w}"),
                    format!("{xn}x{xh}x{xw}"),
                ));
            }
        }
        let total: usize = self.channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (x, &c) in inputs.iter().zip(&self.channels) {
                data.extend_from_slice(&x.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        Tensor::new(vec![n, total, h, w], data)
    }

    pub fn forward<S: Scalar>(&mut self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let out = self.eval(inputs)?;
        let (n, _, h, w) = out.dims4()?;
        self.saved.push((n, h, w));
        Ok(out)
    }

    pub fn backward<S: Scalar>(&mut self, grad: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let (n, h, w) = pop(&mut self.saved, "concat_channels")?;
        let total: usize = self.channels.iter().sum();
        check_grad(grad, &[n, total, h, w], "concat_channels")?;
        let plane = h * w;
        let mut outs: Vec<Vec<S>> = self
            .channels
            .iter()
            .map(|c| Vec::with_capacity(n * c * plane))
            .collect();
        for s in 0..n {
            let mut offset = s * total * plane;
            for (o, &c) in outs.iter_mut().zip(&self.channels) {
                o.extend_from_slice(&grad.data()[offset..offset + c * plane]);
                offset += c * plane;
            }
        }
        outs.into_iter()
            .zip(&self.channels)
            .map(|(d, &c)| Tensor::new(vec![n, c, h, w], d))
            .collect()
    }
}

/// Mean squared error between two equally shaped feature maps; scalar output of shape `[1]`.
#[derive(Clone, Debug)]
pub struct MseHead<S> {
    channels: usize,
    saved: Vec<Tensor<S>>,
}

impl<S: Scalar> MseHead<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            saved: Vec::new(),
        }
    }

    fn diff(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let [a, b] = inputs else {
            return Err(mismatch("mse_head", "input count", 2, inputs.len()));
        };
        check_channels(a, self.channels, "mse_head")?;
        if a.shape() != b.shape() {
            return Err(mismatch(
                "mse_head",
                "target shape",
                format!("{:?}", a.shape()),
                format!("{:?}", b.shape()),
            ));
        }
        let mut d = (*a).clone();
        for (v, &t) in d.data_mut().iter_mut().zip(b.data()) {
            *v -= t;
        }
        d.grad = None;
        Ok(d)
    }

    pub fn eval(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let d = self.diff(inputs)?;
        let m = S::from_usize(d.len().max(1)).unwrap();
        let loss = d.data().iter().fold(S::zero(), |a, &v| a + v * v) / m;
        Tensor::new(vec![1], vec![loss])
    }

    pub fn forward(&mut self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let d = self.diff(inputs)?;
        let m = S::from_usize(d.len().max(1)).unwrap();
        let loss = d.data().iter().fold(S::zero(), |a, &v| a + v * v) / m;
        self.saved.push(d);
        Tensor::new(vec![1], vec![loss])
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let d = pop(&mut self.saved, "mse_head")?;
        check_grad(grad, &[1], "mse_head")?;
        let scale =
            S::from_f64_lossy(2.0) * grad.data()[0] / S::from_usize(d.len().max(1)).unwrap();
        let da = d.map(|v| v * scale);
        let db = da.map(|v| -v);
        Ok(vec![da, db])
    }
}

// ---------------------------------------------------------------------------

/// conv → bn → leaky → conv → bn, plus identity, then leaky.
#[derive(Clone, Debug)]
pub struct ResidualBlock<S> {
    spec: LayerSpec,
    pub conv1: Conv<S>,
    pub bn1: BatchNorm<S>,
    act1: LeakyRelu<S>,
    pub conv2: Conv<S>,
    pub bn2: BatchNorm<S>,
    act_out: LeakyRelu<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn new(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let c = spec.out_channels;
        let bn = |_: ()| {
            let mut s = LayerSpec::batchnorm(c);
            s.epsilon = spec.epsilon;
            BatchNorm::new(s)
        };
        Ok(Self {
            conv1: Conv::new(LayerSpec::conv3x3(c, c), rng)?,
            bn1: bn(())?,
            act1: LeakyRelu::new(spec.leaky_slope, c),
            conv2: Conv::new(LayerSpec::conv3x3(c, c), rng)?,
            bn2: bn(())?,
            act_out: LeakyRelu::new(spec.leaky_slope, c),
            spec,
        })
    }

    fn add(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let mut out = a.clone();
        for (v, &w) in out.data_mut().iter_mut().zip(b.data()) {
            *v += w;
        }
        out
    }

    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_channels(x, self.spec.out_channels, "residual_block")?;
        let h = self.act1.eval(&self.bn1.eval(&self.conv1.eval(x)?)?)?;
        let h = self.bn2.eval(&self.conv2.eval(&h)?)?;
        self.act_out.eval(&Self::add(&h, x))
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        check_channels(x, self.spec.out_channels, "residual_block")?;
        let h = self.conv1.forward(x)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.act1.forward(&h)?;
        let h = self.conv2.forward(&h)?;
        let h = self.bn2.forward(&h, mode)?;
        self.act_out.forward(&Self::add(&h, x))
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let g_sum = self.act_out.backward(grad)?;
        let g = self.bn2.backward(&g_sum)?;
        let g = self.conv2.backward(&g)?;
        let g = self.act1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let g = self.conv1.backward(&g)?;
        Ok(Self::add(&g, &g_sum))
    }

    fn clear(&mut self) {
        self.conv1.saved.clear();
        self.bn1.saved.clear();
        self.act1.saved.clear();
        self.conv2.saved.clear();
        self.bn2.saved.clear();
        self.act_out.saved.clear();
    }
}

// ---------------------------------------------------------------------------

/// A layer built from a [`LayerSpec`].
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<S> {
    Conv(Conv<S>),
    Residual(ResidualBlock<S>),
    Upsample(UpsampleNearest2x<S>, LayerSpec),
    BatchNorm(BatchNorm<S>),
    LeakyRelu(LeakyRelu<S>, LayerSpec),
    Sigmoid(Sigmoid<S>, LayerSpec),
    Softmax(SoftmaxChannels<S>, LayerSpec),
    Concat(Concat, LayerSpec),
    Mse(MseHead<S>, LayerSpec),
}

impl<S: Scalar> Layer<S> {
    pub fn new(spec: &LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let c = spec.out_channels;
        let s = spec.clone();
        Ok(match spec.kind {
            LayerKind::Conv3x3 | LayerKind::DownsampleStride2 => Layer::Conv(Conv::new(s, rng)?),
            LayerKind::ResidualBlock => Layer::Residual(ResidualBlock::new(s, rng)?),
            LayerKind::UpsampleNearest2x => Layer::Upsample(UpsampleNearest2x::new(c), s),
            LayerKind::BatchNorm => Layer::BatchNorm(BatchNorm::new(s)?),
            LayerKind::LeakyRelu => Layer::LeakyRelu(LeakyRelu::new(spec.leaky_slope, c), s),
            LayerKind::Sigmoid => Layer::Sigmoid(Sigmoid::new(c), s),
            LayerKind::SoftmaxChannels => Layer::Softmax(SoftmaxChannels::new(c), s),
            LayerKind::ConcatChannels => Layer::Concat(Concat::new(spec.in_channels.clone()), s),
            LayerKind::MseHead => Layer::Mse(MseHead::new(spec.in_channels[0]), s),
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        match self {
            Layer::Conv(l) => &l.spec,
            Layer::Residual(l) => &l.spec,
            Layer::BatchNorm(l) => &l.spec,
            Layer::Upsample(_, s)
            | Layer::LeakyRelu(_, s)
            | Layer::Sigmoid(_, s)
            | Layer::Softmax(_, s)
            | Layer::Concat(_, s)
            | Layer::Mse(_, s) => s,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.spec().kind
    }

    /// Runs the layer and records what `backward` needs.
    pub fn forward(&mut self, inputs: &[&Tensor<S>], mode: Mode) -> Result<Tensor<S>> {
        let name = self.kind().name();
        match self {
            Layer::Conv(l) => l.forward(one(inputs, name)?),
            Layer::Residual(l) => l.forward(one(inputs, name)?, mode),
            Layer::Upsample(l, _) => l.forward(one(inputs, name)?),
            Layer::BatchNorm(l) => l.forward(one(inputs, name)?, mode),
            Layer::LeakyRelu(l, _) => l.forward(one(inputs, name)?),
            Layer::Sigmoid(l, _) => l.forward(one(inputs, name)?),
            Layer::Softmax(l, _) => l.forward(one(inputs, name)?),
            Layer::Concat(l, _) => l.forward(inputs),
            Layer::Mse(l, _) => l.forward(inputs),
        }
    }

    /// Inference-mode evaluation: running statistics, nothing recorded.
    pub fn eval(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let name = self.kind().name();
        match self {
            Layer::Conv(l) => l.eval(one(inputs, name)?),
            Layer::Residual(l) => l.eval(one(inputs, name)?),
            Layer::Upsample(l, _) => l.eval(one(inputs, name)?),
            Layer::BatchNorm(l) => l.eval(one(inputs, name)?),
            Layer::LeakyRelu(l, _) => l.eval(one(inputs, name)?),
            Layer::Sigmoid(l, _) => l.eval(one(inputs, name)?),
            Layer::Softmax(l, _) => l.eval(one(inputs, name)?),
            Layer::Concat(l, _) => l.eval(inputs),
            Layer::Mse(l, _) => l.eval(inputs),
        }
    }

    /// Consumes the most recent forward record; returns one gradient per input
    /// and accumulates parameter gradients.
    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        Ok(match self {
            Layer::Conv(l) => vec![l.backward(grad)?],
            Layer::Residual(l) => vec![l.backward(grad)?],
            Layer::Upsample(l, _) => vec![l.backward(grad)?],
            Layer::BatchNorm(l) => vec![l.backward(grad)?],
            Layer::LeakyRelu(l, _) => vec![l.backward(grad)?],
            Layer::Sigmoid(l, _) => vec![l.backward(grad)?],
            Layer::Softmax(l, _) => vec![l.backward(grad)?],
            Layer::Concat(l, _) => l.backward(grad)?,
            Layer::Mse(l, _) => l.backward(grad)?,
        })
    }

    /// Drops every pending forward record.
    pub fn clear_records(&mut self) {
        match self {
            Layer::Conv(l) => l.saved.clear(),
            Layer::Residual(l) => l.clear(),
            Layer::Upsample(l, _) => l.saved.clear(),
            Layer::BatchNorm(l) => l.saved.clear(),
            Layer::LeakyRelu(l, _) => l.saved.clear(),
            Layer::Sigmoid(l, _) => l.saved.clear(),
            Layer::Softmax(l, _) => l.saved.clear(),
            Layer::Concat(l, _) => l.saved.clear(),
            Layer::Mse(l, _) => l.saved.clear(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Residual(l) => vec![
                &l.conv1.weight,
                &l.conv1.bias,
                &l.bn1.gamma,
                &l.bn1.beta,
                &l.conv2.weight,
                &l.conv2.bias,
                &l.bn2.gamma,
                &l.bn2.beta,
            ],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Residual(l) => vec![
                &mut l.conv1.weight,
                &mut l.conv1.bias,
                &mut l.bn1.gamma,
                &mut l.bn1.beta,
                &mut l.conv2.weight,
                &mut l.conv2.bias,
                &mut l.bn2.gamma,
                &mut l.bn2.beta,
            ],
            _ => Vec::new(),
        }
    }

    /// Parameters plus running statistics, in checkpoint order.
    pub fn state(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
            Layer::Residual(l) => vec![
                &l.conv1.weight,
                &l.conv1.bias,
                &l.bn1.gamma,
                &l.bn1.beta,
                &l.bn1.running_mean,
                &l.bn1.running_var,
                &l.conv2.weight,
                &l.conv2.bias,
                &l.bn2.gamma,
                &l.bn2.beta,
                &l.bn2.running_mean,
                &l.bn2.running_var,
            ],
            _ => self.params(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            Layer::Residual(l) => vec![
                &mut l.conv1.weight,
                &mut l.conv1.bias,
                &mut l.bn1.gamma,
                &mut l.bn1.beta,
                &mut l.bn1.running_mean,
                &mut l.bn1.running_var,
                &mut l.conv2.weight,
                &mut l.conv2.bias,
                &mut l.bn2.gamma,
                &mut l.bn2.beta,
                &mut l.bn2.running_mean,
                &mut l.bn2.running_var,
            ],
            _ => self.params_mut(),
        }
    }
}

//! Decoder building blocks: convolution, batch normalization, the asymmetric
//! convolution block, squeeze-and-excitation, and bilinear resampling.
//!
//! Stride-1 convolutions are lowered to an explicit patch matrix followed by a
//! single matrix product. Both directions of the pass then run through GEMM,
//! which on CPU is considerably faster than the direct convolution kernels.

use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};

/// Carries the normalization mode through a forward pass and collects the
/// batch statistics observed in training mode.
///
/// Forward passes never mutate the model. Running statistics are only updated
/// when the caller hands the collected [`BatchStats`] back via
/// [`BatchStats::apply`].
#[derive(Debug)]
pub struct ForwardCtx {
    training: bool,
    updates: Vec<StatUpdate>,
}

#[derive(Debug, Clone)]
struct StatUpdate {
    running_mean: Var,
    running_var: Var,
    batch_mean: Tensor,
    batch_var: Tensor,
    momentum: f64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            updates: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self {
            training: true,
            updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn into_stats(self) -> BatchStats {
        BatchStats(self.updates)
    }
}

/// Batch statistics recorded by a training-mode forward pass.
#[derive(Debug, Clone, Default)]
pub struct BatchStats(Vec<StatUpdate>);

impl BatchStats {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fold the recorded statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply(&self) -> Result<()> {
        for u in &self.0 {
            let m = u.momentum;
            let mean = ((u.running_mean.as_tensor() * (1.0 - m))? + (&u.batch_mean * m)?)?;
            let var = ((u.running_var.as_tensor() * (1.0 - m))? + (&u.batch_var * m)?)?;
            u.running_mean.set(&mean)?;
            u.running_var.set(&var)?;
        }
        Ok(())
    }
}

pub(crate) fn expect_channels(x: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize, usize)> {
    let dims = x
        .dims4()
        .map_err(|_| Error::Shape(format!("{what}: expected a 4-d tensor, got {:?}", x.dims())))?;
    if dims.1 != channels {
        return Err(Error::Shape(format!(
            "{what}: expected {channels} input channels, got {}",
            dims.1
        )));
    }
    Ok(dims)
}

/// Patch matrix of a zero-padded input for a list of kernel offsets.
///
/// Returns `(batch, taps * channels, h_out * w_out)`, tap-major: row
/// `t * channels + c` holds channel `c` shifted by offset `t`.
fn patches(x: &Tensor, offsets: &[(usize, usize)], pad: (usize, usize), out_hw: (usize, usize)) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let padded = x.pad_with_zeros(2, pad.0, pad.0)?.pad_with_zeros(3, pad.1, pad.1)?;
    let taps = offsets
        .iter()
        .map(|&(i, j)| padded.narrow(2, i, out_hw.0)?.narrow(3, j, out_hw.1))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&taps, 1)?.reshape((b, offsets.len() * c, out_hw.0 * out_hw.1))?)
}

/// Rearrange an `(out, in, kh, kw)` kernel into the `(out, taps * in)` layout
/// matching [`patches`] with offsets listed in `tap_order` (indices into the
/// row-major `kh × kw` grid).
fn kernel_matrix(w: &Tensor, tap_order: &[u32]) -> Result<Tensor> {
    let (o, c, kh, kw) = w.dims4()?;
    let w = w.permute((0, 2, 3, 1))?.reshape((o, kh * kw, c))?;
    let w = if tap_order.iter().enumerate().all(|(i, &t)| i as u32 == t) {
        w
    } else {
        let idx = Tensor::new(tap_order, w.device())?;
        w.index_select(&idx, 1)?
    };
    Ok(w.reshape((o, tap_order.len() * c))?)
}

/// 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    kernel: (usize, usize),
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = pb.param(
            "weight",
            (out_channels, in_channels, kernel.0, kernel.1),
            Init::he_uniform(fan_in),
        )?;
        let bias = if bias {
            Some(pb.param("bias", out_channels, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            in_channels,
            out_channels,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.elem_count() + self.bias.as_ref().map_or(0, |b| b.elem_count())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = expect_channels(x, self.in_channels, "conv2d")?;
        let (kh, kw) = self.kernel;
        let y = if self.stride == 1 {
            let y = if kh == 1 && kw == 1 {
                let xm = x.reshape((b, self.in_channels, h * w))?;
                let wm = self.weight.reshape((self.out_channels, self.in_channels))?;
                wm.broadcast_matmul(&xm)?
            } else {
                let offsets: Vec<_> = (0..kh).flat_map(|i| (0..kw).map(move |j| (i, j))).collect();
                let order: Vec<u32> = (0..(kh * kw) as u32).collect();
                let cols = patches(x, &offsets, (kh / 2, kw / 2), (h, w))?;
                kernel_matrix(&self.weight, &order)?.broadcast_matmul(&cols)?
            };
            y.reshape((b, self.out_channels, h, w))?
        } else {
            if kh != kw {
                return Err(Error::Shape("strided convolution requires a square kernel".into()));
            }
            x.conv2d(&self.weight, (kh - 1) / 2, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Depthwise convolution (one filter per channel), used by the EfficientNet encoder.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    weight: Var,
    kernel: usize,
    stride: usize,
    channels: usize,
}

impl DepthwiseConv2d {
    pub fn new(pb: &ParamBuilder, channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        let weight = pb.param(
            "weight",
            (channels, 1, kernel, kernel),
            Init::he_uniform(kernel * kernel),
        )?;
        Ok(Self {
            weight,
            kernel,
            stride,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, self.channels, "depthwise conv2d")?;
        Ok(x.conv2d(&self.weight, self.kernel / 2, self.stride, 1, self.channels)?)
    }
}

/// Batch normalization over the channel axis of a 4-d tensor.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(pb: &ParamBuilder, channels: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", channels, Init::Ones)?,
            beta: pb.param("beta", channels, Init::Zeros)?,
            running_mean: pb.buffer("running_mean", channels, Init::Zeros)?,
            running_var: pb.buffer("running_var", channels, Init::Ones)?,
            channels,
            eps,
            momentum: Self::DEFAULT_MOMENTUM,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    pub fn beta(&self) -> &Var {
        &self.beta
    }

    pub fn running_mean(&self) -> &Var {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Var {
        &self.running_var
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (b, _, h, w) = expect_channels(x, self.channels, "batch norm")?;
        let shape = (1, self.channels, 1, 1);
        let gamma = self.gamma.reshape(shape)?;
        let beta = self.beta.reshape(shape)?;
        if ctx.training {
            let n = b * h * w;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let normed = centered.broadcast_div(&(var.clone() + self.eps)?.sqrt()?)?;
            let unbiased = if n > 1 {
                (var.detach() * (n as f64 / (n - 1) as f64))?
            } else {
                var.detach()
            };
            ctx.updates.push(StatUpdate {
                running_mean: self.running_mean.clone(),
                running_var: self.running_var.clone(),
                batch_mean: mean.detach().flatten_all()?,
                batch_var: unbiased.flatten_all()?,
                momentum: self.momentum,
            });
            Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
        } else {
            let mean = self.running_mean.as_tensor().detach().reshape(shape)?;
            let var = self.running_var.as_tensor().detach().reshape(shape)?;
            let scale = gamma.broadcast_div(&(var + self.eps)?.sqrt()?)?;
            let shift = beta.sub(&mean.broadcast_mul(&scale)?)?;
            Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
        }
    }
}

// Offsets into the 1-padded input. The 3×1 branch reads taps [0, 3), the
// 1×3 branch reads taps [2, 5), the 3×3 branch reads all nine, so a single
// patch matrix serves all three branches.
const ACB_OFFSETS: [(usize, usize); 9] = [
    (0, 1),
    (2, 1),
    (1, 1),
    (1, 0),
    (1, 2),
    (0, 0),
    (0, 2),
    (2, 0),
    (2, 2),
];
const ACB_ORDER_3X3: [u32; 9] = [1, 7, 4, 3, 5, 0, 2, 6, 8];
const ACB_ORDER_3X1: [u32; 3] = [0, 2, 1];
const ACB_ORDER_1X3: [u32; 3] = [1, 0, 2];

/// `relu(bn(conv3x1(x)) + bn(conv1x3(x)) + bn(conv3x3(x)))` with "same" padding.
///
/// The three branches share input and output widths and each owns an
/// independent normalization. Convolutions carry no bias since the
/// normalization shift subsumes it.
#[derive(Debug, Clone)]
pub struct AsymmetricConvBlock {
    w3x1: Var,
    w1x3: Var,
    w3x3: Var,
    bn3x1: BatchNorm2d,
    bn1x3: BatchNorm2d,
    bn3x3: BatchNorm2d,
    in_channels: usize,
    out_channels: usize,
}

impl AsymmetricConvBlock {
    pub fn new(pb: &ParamBuilder, in_channels: usize, out_channels: usize) -> Result<Self> {
        let (ci, co) = (in_channels, out_channels);
        Ok(Self {
            w3x1: pb.param("w3x1", (co, ci, 3, 1), Init::he_uniform(ci * 3))?,
            w1x3: pb.param("w1x3", (co, ci, 1, 3), Init::he_uniform(ci * 3))?,
            w3x3: pb.param("w3x3", (co, ci, 3, 3), Init::he_uniform(ci * 9))?,
            bn3x1: BatchNorm2d::new(&pb.pp("bn3x1"), co, 1e-5)?,
            bn1x3: BatchNorm2d::new(&pb.pp("bn1x3"), co, 1e-5)?,
            bn3x3: BatchNorm2d::new(&pb.pp("bn3x3"), co, 1e-5)?,
            in_channels,
            out_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernels(&self) -> [&Var; 3] {
        [&self.w3x1, &self.w1x3, &self.w3x3]
    }

    pub fn norms(&self) -> [&BatchNorm2d; 3] {
        [&self.bn3x1, &self.bn1x3, &self.bn3x3]
    }

    pub fn parameter_count(&self) -> usize {
        let convs = self.w3x1.elem_count() + self.w1x3.elem_count() + self.w3x3.elem_count();
        convs + 3 * 2 * self.out_channels
    }

    /// The three normalized branch outputs before summation, in the order
    /// 3×1, 1×3, 3×3.
    pub fn branches(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<[Tensor; 3]> {
        let (b, _, h, w) = expect_channels(x, self.in_channels, "asymmetric conv block")?;
        let c = self.in_channels;
        let cols = patches(x, &ACB_OFFSETS, (1, 1), (h, w))?;
        let shape = (b, self.out_channels, h, w);
        let y3x1 = kernel_matrix(&self.w3x1, &ACB_ORDER_3X1)?
            .broadcast_matmul(&cols.narrow(1, 0, 3 * c)?)?
            .reshape(shape)?;
        let y1x3 = kernel_matrix(&self.w1x3, &ACB_ORDER_1X3)?
            .broadcast_matmul(&cols.narrow(1, 2 * c, 3 * c)?)?
            .reshape(shape)?;
        let y3x3 = kernel_matrix(&self.w3x3, &ACB_ORDER_3X3)?
            .broadcast_matmul(&cols)?
            .reshape(shape)?;
        Ok([
            self.bn3x1.forward(&y3x1, ctx)?,
            self.bn1x3.forward(&y1x3, ctx)?,
            self.bn3x3.forward(&y3x3, ctx)?,
        ])
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let [a, b, c] = self.branches(x, ctx)?;
        Ok(((a + b)? + c)?.relu()?)
    }
}

/// Channel recalibration: global average pool, bottleneck MLP with ReLU,
/// sigmoid gate, per-channel rescale.
#[derive(Debug, Clone)]
pub struct SqueezeExcitation {
    reduce_w: Var,
    reduce_b: Var,
    expand_w: Var,
    expand_b: Var,
    channels: usize,
    hidden: usize,
}

impl SqueezeExcitation {
    pub fn new(pb: &ParamBuilder, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "squeeze-excitation reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            reduce_w: pb.param("reduce.weight", (hidden, channels), Init::he_uniform(channels))?,
            reduce_b: pb.param("reduce.bias", hidden, Init::Zeros)?,
            expand_w: pb.param("expand.weight", (channels, hidden), Init::lecun_uniform(hidden))?,
            expand_b: pb.param("expand.bias", channels, Init::Zeros)?,
            channels,
            hidden,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn vars(&self) -> [&Var; 4] {
        [&self.reduce_w, &self.reduce_b, &self.expand_w, &self.expand_b]
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.channels * self.hidden + self.channels + self.hidden
    }

    /// Per-sample, per-channel gate in (0, 1), shape `(batch, channels)`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = expect_channels(x, self.channels, "squeeze-excitation")?;
        let pooled = x.mean_keepdim((2, 3))?.reshape((b, c))?;
        let hidden = pooled
            .matmul(&self.reduce_w.t()?)?
            .broadcast_add(&self.reduce_b)?
            .relu()?;
        let logits = hidden
            .matmul(&self.expand_w.t()?)?
            .broadcast_add(&self.expand_b)?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let g = self.gate(x)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&g)?)
    }
}

/// Bilinear interpolation weights from `n_in` to `n_out` samples, half-pixel
/// centers, clamped at the borders. Row `o` holds the weights of output `o`.
pub fn interpolation_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

fn interpolation_tensor(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interpolation_matrix(n_in, n_out), (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Bilinear resampling of a `(batch, channels, h, w)` tensor to `target`.
///
/// Implemented as two matrix products with fixed interpolation matrices, so
/// it has no parameters and is differentiable. Same-size resizing returns the
/// input unchanged.
pub fn resize_to(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (b, c, h, w) = x
        .dims4()
        .map_err(|_| Error::Shape(format!("resize_to: expected a 4-d tensor, got {:?}", x.dims())))?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape(format!("resize_to: invalid target {target:?}")));
    }
    let mut y = x.clone();
    if tw != w {
        let mw = interpolation_tensor(w, tw, x.dtype(), x.device())?;
        y = y.reshape((b * c * h, w))?.matmul(&mw.t()?)?.reshape((b, c, h, tw))?;
    }
    if th != h {
        let mh = interpolation_tensor(h, th, x.dtype(), x.device())?;
        y = mh
            .broadcast_matmul(&y.reshape((b * c, h, tw))?)?
            .reshape((b, c, th, tw))?;
    }
    Ok(y)
}

/// Concatenate along channels after resizing every input to `target`.
pub fn concat_at(inputs: &[&Tensor], target: (usize, usize)) -> Result<Tensor> {
    let resized = inputs
        .iter()
        .map(|t| resize_to(t, target))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&resized, 1)?)
}

/// Mean over the channel axis, keeping it as a singleton.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus(3))?)
}

//! Shared encoder: produces the stride-8/16/32 feature pyramid and reduces
//! each level to a uniform 64-channel representation.
//!
//! Two encoders are available. `standard` is an EfficientNet-B0 truncated
//! after its stride-32 stage. `tiny` is a small four-stage convolutional
//! stand-in that lets the whole pipeline run on a laptop CPU without external
//! weights.
//!
//! # Weights files
//!
//! Backbone weights are a single safetensors file mapping full parameter
//! names (as printed by `plutonet params --names`) to tensors, e.g.
//! `backbone.stem.conv.weight` or `backbone.stage3.0.expand.bn.running_mean`.
//! Every backbone entry, including normalization running statistics, must be
//! present with the expected shape.

use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::blocks::{expect_channels, BatchNorm2d, Conv2d, DepthwiseConv2d, ForwardCtx};
use crate::error::{Error, Result};
use crate::params::ParamBuilder;

/// Side length every image is resized to.
pub const INPUT_SIZE: usize = 224;
/// Width of every reduced pyramid level and decoder layer.
pub const REDUCED_CHANNELS: usize = 64;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// A batch of RGB images, `batch × 3 × 224 × 224`, values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != INPUT_SIZE || dims[3] != INPUT_SIZE {
            return Err(Error::Shape(format!(
                "images must be batch×3×{INPUT_SIZE}×{INPUT_SIZE}, got {dims:?}"
            )));
        }
        if dims[0] == 0 {
            return Err(Error::Shape("image batch is empty".into()));
        }
        let flat = data.flatten_all()?;
        let lo = flat.min(0)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let hi = flat.max(0)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::Data(format!(
                "image values must lie in [0, 1], found range [{lo}, {hi}]"
            )));
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dims()[0]
    }
}

/// Encoder outputs at strides 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub e3: Tensor,
    pub e4: Tensor,
    pub e5: Tensor,
}

impl FeaturePyramid {
    pub fn new(e3: Tensor, e4: Tensor, e5: Tensor) -> Result<Self> {
        let d3 = e3.dims4()?;
        let d4 = e4.dims4()?;
        let d5 = e5.dims4()?;
        if d3.0 != d4.0 || d4.0 != d5.0 {
            return Err(Error::Shape("pyramid levels disagree on batch size".into()));
        }
        let halves = |a: (usize, usize), b: (usize, usize)| a.0 == 2 * b.0 && a.1 == 2 * b.1;
        if !halves((d3.2, d3.3), (d4.2, d4.3)) || !halves((d4.2, d4.3), (d5.2, d5.3)) {
            return Err(Error::Shape(format!(
                "pyramid spatial sizes must halve per level, got {:?}, {:?}, {:?}",
                (d3.2, d3.3),
                (d4.2, d4.3),
                (d5.2, d5.3)
            )));
        }
        if !(d3.1 <= d4.1 && d4.1 <= d5.1) {
            return Err(Error::Shape(format!(
                "pyramid channels must be non-decreasing, got {}, {}, {}",
                d3.1, d4.1, d5.1
            )));
        }
        Ok(Self { e3, e4, e5 })
    }

    pub fn channels(&self) -> [usize; 3] {
        [self.e3.dims()[1], self.e4.dims()[1], self.e5.dims()[1]]
    }
}

/// The pyramid after 64-filter channel reduction.
#[derive(Debug, Clone)]
pub struct ReducedPyramid {
    pub r3: Tensor,
    pub r4: Tensor,
    pub r5: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    Standard,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Optional safetensors file with backbone weights.
    pub weights_path: Option<PathBuf>,
    /// Exclude backbone parameters from optimization.
    pub freeze: bool,
    /// Standardize inputs with ImageNet channel statistics before encoding.
    pub standardize: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            weights_path: None,
            freeze: false,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Activation,
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    Relu,
    Silu,
    Identity,
}

impl ConvBnAct {
    fn new(
        pb: &ParamBuilder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), cin, cout, (kernel, kernel), stride, false)?,
            bn: BatchNorm2d::new(&pb.pp("bn"), cout, eps)?,
            act,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, ctx)?;
        Ok(match self.act {
            Activation::Relu => y.relu()?,
            Activation::Silu => y.silu()?,
            Activation::Identity => y,
        })
    }
}

/// Four strided stages: a stride-4 patchify stem, then three stride-2 stages
/// whose outputs are e3 (24 ch), e4 (40 ch) and e5 (64 ch).
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    stem: ConvBnAct,
    stages: Vec<[ConvBnAct; 2]>,
}

impl TinyBackbone {
    pub const STAGE_CHANNELS: [usize; 3] = [24, 40, 64];
    const STEM_CHANNELS: usize = 16;

    pub fn new(pb: &ParamBuilder) -> Result<Self> {
        let stem = ConvBnAct::new(&pb.pp("stem"), 3, Self::STEM_CHANNELS, 4, 4, Activation::Relu, 1e-5)?;
        let mut cin = Self::STEM_CHANNELS;
        let mut stages = Vec::new();
        for (i, &cout) in Self::STAGE_CHANNELS.iter().enumerate() {
            let sp = pb.pp(format!("stage{}", i + 3));
            stages.push([
                ConvBnAct::new(&sp.pp("down"), cin, cout, 3, 2, Activation::Relu, 1e-5)?,
                ConvBnAct::new(&sp.pp("refine"), cout, cout, 3, 1, Activation::Relu, 1e-5)?,
            ]);
            cin = cout;
        }
        Ok(Self { stem, stages })
    }

    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<[Tensor; 3]> {
        let mut h = self.stem.forward(x, ctx)?;
        let mut outs = Vec::with_capacity(3);
        for [down, refine] in &self.stages {
            h = refine.forward(&down.forward(&h, ctx)?, ctx)?;
            outs.push(h.clone());
        }
        let [e3, e4, e5]: [Tensor; 3] = outs.try_into().expect("three stages");
        Ok([e3, e4, e5])
    }
}

#[derive(Debug, Clone, Copy)]
struct MbStage {
    expand_ratio: usize,
    kernel: usize,
    stride: usize,
    cin: usize,
    cout: usize,
    layers: usize,
}

const B0_STAGES: [MbStage; 7] = [
    MbStage { expand_ratio: 1, kernel: 3, stride: 1, cin: 32, cout: 16, layers: 1 },
    MbStage { expand_ratio: 6, kernel: 3, stride: 2, cin: 16, cout: 24, layers: 2 },
    MbStage { expand_ratio: 6, kernel: 5, stride: 2, cin: 24, cout: 40, layers: 2 },
    MbStage { expand_ratio: 6, kernel: 3, stride: 2, cin: 40, cout: 80, layers: 3 },
    MbStage { expand_ratio: 6, kernel: 5, stride: 1, cin: 80, cout: 112, layers: 3 },
    MbStage { expand_ratio: 6, kernel: 5, stride: 2, cin: 112, cout: 192, layers: 4 },
    MbStage { expand_ratio: 6, kernel: 3, stride: 1, cin: 192, cout: 320, layers: 1 },
];

#[derive(Debug, Clone)]
struct MbSqueeze {
    reduce: Conv2d,
    expand: Conv2d,
}

#[derive(Debug, Clone)]
struct MbConv {
    expand: Option<ConvBnAct>,
    depthwise: DepthwiseConv2d,
    depthwise_bn: BatchNorm2d,
    squeeze: MbSqueeze,
    project: ConvBnAct,
    residual: bool,
}

impl MbConv {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, stage: &MbStage, stride: usize) -> Result<Self> {
        let hidden = cin * stage.expand_ratio;
        let expand = if stage.expand_ratio != 1 {
            Some(ConvBnAct::new(&pb.pp("expand"), cin, hidden, 1, 1, Activation::Silu, 1e-3)?)
        } else {
            None
        };
        let squeezed = (cin / 4).max(1);
        Ok(Self {
            expand,
            depthwise: DepthwiseConv2d::new(&pb.pp("depthwise"), hidden, stage.kernel, stride)?,
            depthwise_bn: BatchNorm2d::new(&pb.pp("depthwise_bn"), hidden, 1e-3)?,
            squeeze: MbSqueeze {
                reduce: Conv2d::new(&pb.pp("se.reduce"), hidden, squeezed, (1, 1), 1, true)?,
                expand: Conv2d::new(&pb.pp("se.expand"), squeezed, hidden, (1, 1), 1, true)?,
            },
            project: ConvBnAct::new(&pb.pp("project"), hidden, cout, 1, 1, Activation::Identity, 1e-3)?,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut h = match &self.expand {
            Some(e) => e.forward(x, ctx)?,
            None => x.clone(),
        };
        h = self.depthwise_bn.forward(&self.depthwise.forward(&h)?, ctx)?.silu()?;
        let pooled = h.mean_keepdim((2, 3))?;
        let gate = self.squeeze.reduce.forward(&pooled)?.silu()?;
        let gate = candle_nn::ops::sigmoid(&self.squeeze.expand.forward(&gate)?)?;
        h = h.broadcast_mul(&gate)?;
        let out = self.project.forward(&h, ctx)?;
        if self.residual {
            Ok((out + x)?)
        } else {
            Ok(out)
        }
    }
}

/// EfficientNet-B0 up to its stride-32 stage (no 1280-channel head).
/// e3 = stage 3 (40 ch), e4 = stage 5 (112 ch), e5 = stage 7 (320 ch).
#[derive(Debug, Clone)]
pub struct EfficientNetB0 {
    stem: ConvBnAct,
    stages: Vec<Vec<MbConv>>,
}

impl EfficientNetB0 {
    pub const STAGE_CHANNELS: [usize; 3] = [40, 112, 320];

    pub fn new(pb: &ParamBuilder) -> Result<Self> {
        let stem = ConvBnAct::new(&pb.pp("stem"), 3, 32, 3, 2, Activation::Silu, 1e-3)?;
        let mut stages = Vec::new();
        for (si, stage) in B0_STAGES.iter().enumerate() {
            let sp = pb.pp(format!("stage{}", si + 1));
            let mut blocks = Vec::new();
            for li in 0..stage.layers {
                let (cin, stride) = if li == 0 {
                    (stage.cin, stage.stride)
                } else {
                    (stage.cout, 1)
                };
                blocks.push(MbConv::new(&sp.pp(li), cin, stage.cout, stage, stride)?);
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<[Tensor; 3]> {
        let mut h = self.stem.forward(x, ctx)?;
        let mut taps = Vec::with_capacity(3);
        for (si, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h, ctx)?;
            }
            // stages are 1-based: keep the outputs of stages 3, 5 and 7
            if matches!(si + 1, 3 | 5 | 7) {
                taps.push(h.clone());
            }
        }
        let [e3, e4, e5]: [Tensor; 3] = taps.try_into().expect("three taps");
        Ok([e3, e4, e5])
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Standard(Box<EfficientNetB0>),
    Tiny(TinyBackbone),
}

impl Backbone {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        Ok(match cfg.variant {
            BackboneVariant::Standard => Backbone::Standard(Box::new(EfficientNetB0::new(pb)?)),
            BackboneVariant::Tiny => Backbone::Tiny(TinyBackbone::new(pb)?),
        })
    }

    pub fn stage_channels(&self) -> [usize; 3] {
        match self {
            Backbone::Standard(_) => EfficientNetB0::STAGE_CHANNELS,
            Backbone::Tiny(_) => TinyBackbone::STAGE_CHANNELS,
        }
    }

    /// Encode a batch into its feature pyramid.
    pub fn extract_features(
        &self,
        images: &ImageBatch,
        standardize: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<FeaturePyramid> {
        let mut x = images.tensor().clone();
        if standardize {
            let dev = x.device();
            let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
            let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
            x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        }
        let [e3, e4, e5] = match self {
            Backbone::Standard(net) => net.forward(&x, ctx)?,
            Backbone::Tiny(net) => net.forward(&x, ctx)?,
        };
        FeaturePyramid::new(e3, e4, e5)
    }
}

/// One 1×1 convolution (with bias) per pyramid level, each to 64 channels.
#[derive(Debug, Clone)]
pub struct ChannelReducer {
    convs: [Conv2d; 3],
}

impl ChannelReducer {
    pub fn new(pb: &ParamBuilder, channels: [usize; 3]) -> Result<Self> {
        let mk = |name: &str, c: usize| Conv2d::new(&pb.pp(name), c, REDUCED_CHANNELS, (1, 1), 1, true);
        Ok(Self {
            convs: [mk("r3", channels[0])?, mk("r4", channels[1])?, mk("r5", channels[2])?],
        })
    }

    pub fn convs(&self) -> &[Conv2d; 3] {
        &self.convs
    }

    pub fn reduce_channels(&self, pyr: &FeaturePyramid) -> Result<ReducedPyramid> {
        let [c3, c4, c5] = &self.convs;
        let r3 = c3.forward(&pyr.e3)?;
        let r4 = c4.forward(&pyr.e4)?;
        let r5 = c5.forward(&pyr.e5)?;
        for (r, e) in [(&r3, &pyr.e3), (&r4, &pyr.e4), (&r5, &pyr.e5)] {
            let (_, c, h, w) = r.dims4()?;
            expect_channels(r, REDUCED_CHANNELS, "reduced pyramid")?;
            if (h, w) != (e.dims()[2], e.dims()[3]) || c != REDUCED_CHANNELS {
                return Err(Error::Shape("channel reduction changed spatial size".into()));
            }
        }
        Ok(ReducedPyramid { r3, r4, r5 })
    }
}

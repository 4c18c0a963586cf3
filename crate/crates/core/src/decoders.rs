//! The modified partial decoder with its prediction head, the auxiliary
//! shallow-attention decoder, and the assembled network.
//!
//! Decoder wiring (every operand is bilinearly resized to the target scale
//! and concatenated along channels in the order listed):
//!
//! ```text
//! d1 (7×7)   = se(acb([r3, r4, r5]))
//! d2 (14×14) = se(acb([d1, r3, r5]))
//! d3 (28×28) = se(acb([d1, d2, r5]))
//! main       = sigmoid(upsample×8(conv1×1(d3)))
//! aux        = sigmoid(upsample×8(conv([m3·m4·m5, m4·m5, m5])))
//! ```
//!
//! where `m_i` is the channel mean of encoder level `e_i` resized to e3's
//! scale. The auxiliary branch only runs in training mode.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    Backbone, BackboneConfig, ChannelReducer, FeaturePyramid, ImageBatch, ReducedPyramid,
    INPUT_SIZE, REDUCED_CHANNELS,
};
use crate::blocks::{
    channel_mean, concat_at, resize_to, AsymmetricConvBlock, BatchStats, Conv2d, ForwardCtx,
    SqueezeExcitation,
};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};

/// Per-pixel foreground probabilities, `batch × 1 × 224 × 224`, values in [0, 1].
#[derive(Debug, Clone)]
pub struct MaskTensor(Tensor);

impl MaskTensor {
    pub fn new(probs: Tensor) -> Result<Self> {
        let dims = probs.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != INPUT_SIZE || dims[3] != INPUT_SIZE {
            return Err(Error::Shape(format!(
                "masks must be batch×1×{INPUT_SIZE}×{INPUT_SIZE}, got {dims:?}"
            )));
        }
        let flat = probs.flatten_all()?.to_dtype(DType::F64)?;
        let lo = flat.min(0)?.to_scalar::<f64>()?;
        let hi = flat.max(0)?.to_scalar::<f64>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::Data(format!(
                "mask values must lie in [0, 1], found range [{lo}, {hi}]"
            )));
        }
        Ok(Self(probs))
    }

    fn from_sigmoid(probs: Tensor) -> Self {
        Self(probs)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Outputs of the three decoder layers, coarse to fine.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub d1: Tensor,
    pub d2: Tensor,
    pub d3: Tensor,
    /// Channel width of the concatenation feeding each layer.
    pub concat_channels: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    acb: AsymmetricConvBlock,
    se: SqueezeExcitation,
}

impl DecoderLayer {
    fn new(pb: &ParamBuilder, in_channels: usize, se_reduction: usize) -> Result<Self> {
        Ok(Self {
            acb: AsymmetricConvBlock::new(&pb.pp("acb"), in_channels, REDUCED_CHANNELS)?,
            se: SqueezeExcitation::new(&pb.pp("se"), REDUCED_CHANNELS, se_reduction)?,
        })
    }

    pub fn acb(&self) -> &AsymmetricConvBlock {
        &self.acb
    }

    pub fn se(&self) -> &SqueezeExcitation {
        &self.se
    }

    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.se.forward(&self.acb.forward(x, ctx)?)
    }
}

/// Full-scale decoder restricted to the three deepest encoder levels.
#[derive(Debug, Clone)]
pub struct PartialDecoder {
    layers: [DecoderLayer; 3],
}

impl PartialDecoder {
    pub fn new(pb: &ParamBuilder, se_reduction: usize) -> Result<Self> {
        let width = 3 * REDUCED_CHANNELS;
        Ok(Self {
            layers: [
                DecoderLayer::new(&pb.pp("d1"), width, se_reduction)?,
                DecoderLayer::new(&pb.pp("d2"), width, se_reduction)?,
                DecoderLayer::new(&pb.pp("d3"), width, se_reduction)?,
            ],
        })
    }

    pub fn layers(&self) -> &[DecoderLayer; 3] {
        &self.layers
    }

    pub fn forward(&self, r: &ReducedPyramid, ctx: &mut ForwardCtx) -> Result<DecoderState> {
        let hw = |t: &Tensor| (t.dims()[2], t.dims()[3]);
        let [l1, l2, l3] = &self.layers;

        let x1 = concat_at(&[&r.r3, &r.r4, &r.r5], hw(&r.r5))?;
        let d1 = l1.forward(&x1, ctx)?;
        let x2 = concat_at(&[&d1, &r.r3, &r.r5], hw(&r.r4))?;
        let d2 = l2.forward(&x2, ctx)?;
        let x3 = concat_at(&[&d1, &d2, &r.r5], hw(&r.r3))?;
        let d3 = l3.forward(&x3, ctx)?;

        for (d, target) in [(&d1, &r.r5), (&d2, &r.r4), (&d3, &r.r3)] {
            if d.dims() != target.dims() {
                return Err(Error::Shape(format!(
                    "decoder wiring produced {:?} where {:?} was expected",
                    d.dims(),
                    target.dims()
                )));
            }
        }
        Ok(DecoderState {
            concat_channels: [x1.dims()[1], x2.dims()[1], x3.dims()[1]],
            d1,
            d2,
            d3,
        })
    }
}

/// 1×1 convolution to one channel, ×8 bilinear upsampling, sigmoid.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    conv: Conv2d,
}

impl PredictionHead {
    pub fn new(pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), REDUCED_CHANNELS, 1, (1, 1), 1, true)?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, d3: &Tensor) -> Result<MaskTensor> {
        let logits = resize_to(&self.conv.forward(d3)?, (INPUT_SIZE, INPUT_SIZE))?;
        Ok(MaskTensor::from_sigmoid(candle_nn::ops::sigmoid(&logits)?))
    }
}

/// Shallow-attention decoder over the raw encoder levels.
#[derive(Debug, Clone)]
pub struct AuxiliaryDecoder {
    convs: Vec<Conv2d>,
}

impl AuxiliaryDecoder {
    /// `hidden = 0` uses a single 3×3 convolution from the 3 attention maps
    /// to the output; otherwise two 3×3 convolutions with a ReLU between.
    pub fn new(pb: &ParamBuilder, hidden: usize) -> Result<Self> {
        let convs = if hidden == 0 {
            vec![Conv2d::new(&pb.pp("conv1"), 3, 1, (3, 3), 1, true)?]
        } else {
            vec![
                Conv2d::new(&pb.pp("conv1"), 3, hidden, (3, 3), 1, true)?,
                Conv2d::new(&pb.pp("conv2"), hidden, 1, (3, 3), 1, true)?,
            ]
        };
        Ok(Self { convs })
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// The three-channel input of the convolution stage:
    /// `[m3·m4·m5, m4·m5, m5]` at e3's scale.
    pub fn attention_maps(&self, pyr: &FeaturePyramid) -> Result<Tensor> {
        let target = (pyr.e3.dims()[2], pyr.e3.dims()[3]);
        let m3 = channel_mean(&pyr.e3)?;
        let m4 = resize_to(&channel_mean(&pyr.e4)?, target)?;
        let m5 = resize_to(&channel_mean(&pyr.e5)?, target)?;
        let p45 = (&m4 * &m5)?;
        let p345 = (&m3 * &p45)?;
        Ok(Tensor::cat(&[&p345, &p45, &m5], 1)?)
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<MaskTensor> {
        let mut h = self.attention_maps(pyr)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        let logits = resize_to(&h, (INPUT_SIZE, INPUT_SIZE))?;
        Ok(MaskTensor::from_sigmoid(candle_nn::ops::sigmoid(&logits)?))
    }
}

/// Architecture knobs beyond the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Squeeze-and-excitation bottleneck ratio.
    pub se_reduction: usize,
    /// Hidden width of the auxiliary decoder's convolution stage (0 = single conv).
    pub aux_hidden_channels: usize,
    /// Build the auxiliary decoder. Inference-only models may drop it.
    pub auxiliary: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            se_reduction: 4,
            aux_hidden_channels: 4,
            auxiliary: true,
        }
    }
}

/// Everything needed to rebuild a network's parameter layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
}

impl NetworkConfig {
    /// Hash of the architecture-defining fields. Weights location and the
    /// freeze flag do not change the parameter layout and are excluded.
    pub fn architecture_hash(&self) -> String {
        let key = serde_json::json!({
            "variant": self.backbone.variant,
            "standardize": self.backbone.standardize,
            "se_reduction": self.model.se_reduction,
            "aux_hidden_channels": self.model.aux_hidden_channels,
            "auxiliary": self.model.auxiliary,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

/// Trainable parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    pub backbone: usize,
    pub reducers: usize,
    pub partial_decoder: usize,
    pub head: usize,
    pub auxiliary: usize,
    pub total: usize,
}

impl ParameterBreakdown {
    pub fn rows(&self) -> [(&'static str, usize); 5] {
        [
            ("backbone", self.backbone),
            ("reducers", self.reducers),
            ("partial_decoder", self.partial_decoder),
            ("head", self.head),
            ("auxiliary", self.auxiliary),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Running normalization statistics, main branch only.
    Eval,
    /// Batch normalization statistics; the auxiliary branch runs when requested.
    Train { auxiliary: bool },
}

#[derive(Debug)]
pub struct ModelOutput {
    pub main: MaskTensor,
    pub aux: Option<MaskTensor>,
    /// Batch statistics to fold into the running estimates after a training step.
    pub stats: BatchStats,
}

pub const COMPONENTS: [&str; 5] = ["backbone", "reducers", "decoder", "head", "aux"];

/// Shared encoder, modified partial decoder and auxiliary decoder.
#[derive(Debug, Clone)]
pub struct PlutoNet {
    config: NetworkConfig,
    store: ParamStore,
    backbone: Backbone,
    reducer: ChannelReducer,
    decoder: PartialDecoder,
    head: PredictionHead,
    aux: Option<AuxiliaryDecoder>,
}

impl PlutoNet {
    /// Build with deterministic initialization from `seed`, then load backbone
    /// weights when the configuration names a file.
    pub fn new(config: &NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let backbone = Backbone::new(&root.pp("backbone"), &config.backbone)?;
        let reducer = ChannelReducer::new(&root.pp("reducers"), backbone.stage_channels())?;
        let decoder = PartialDecoder::new(&root.pp("decoder"), config.model.se_reduction)?;
        let head = PredictionHead::new(&root.pp("head"))?;
        let aux = if config.model.auxiliary {
            Some(AuxiliaryDecoder::new(&root.pp("aux"), config.model.aux_hidden_channels)?)
        } else {
            None
        };
        if let Some(path) = &config.backbone.weights_path {
            store.load(path, Some("backbone"))?;
        }
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            reducer,
            decoder,
            head,
            aux,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn reducer(&self) -> &ChannelReducer {
        &self.reducer
    }

    pub fn decoder(&self) -> &PartialDecoder {
        &self.decoder
    }

    pub fn head(&self) -> &PredictionHead {
        &self.head
    }

    pub fn auxiliary(&self) -> Option<&AuxiliaryDecoder> {
        self.aux.as_ref()
    }

    pub fn extract_features(&self, images: &ImageBatch, ctx: &mut ForwardCtx) -> Result<FeaturePyramid> {
        self.backbone
            .extract_features(images, self.config.backbone.standardize, ctx)
    }

    pub fn forward(&self, images: &ImageBatch, mode: ForwardMode) -> Result<ModelOutput> {
        let (mut ctx, want_aux) = match mode {
            ForwardMode::Eval => (ForwardCtx::eval(), false),
            ForwardMode::Train { auxiliary } => (ForwardCtx::train(), auxiliary),
        };
        if ctx.is_training() && images.batch_size() == 1 {
            log::warn!("training-mode forward with batch size 1: normalization statistics are degenerate");
        }
        let pyr = self.extract_features(images, &mut ctx)?;
        let reduced = self.reducer.reduce_channels(&pyr)?;
        let state = self.decoder.forward(&reduced, &mut ctx)?;
        let main = self.head.forward(&state.d3)?;
        let aux = if want_aux {
            let aux = self.aux.as_ref().ok_or_else(|| {
                Error::Config("auxiliary output requested from a model built without it".into())
            })?;
            Some(aux.forward(&pyr)?)
        } else {
            None
        };
        Ok(ModelOutput {
            main,
            aux,
            stats: ctx.into_stats(),
        })
    }

    /// Main mask always; auxiliary mask only when `training`.
    pub fn model_forward(&self, images: &ImageBatch, training: bool) -> Result<(MaskTensor, Option<MaskTensor>)> {
        let mode = if training {
            ForwardMode::Train {
                auxiliary: self.aux.is_some(),
            }
        } else {
            ForwardMode::Eval
        };
        let out = self.forward(images, mode)?;
        Ok((out.main, out.aux))
    }

    pub fn count_parameters(&self) -> ParameterBreakdown {
        let s = &self.store;
        let b = ParameterBreakdown {
            backbone: s.count(Some("backbone")),
            reducers: s.count(Some("reducers")),
            partial_decoder: s.count(Some("decoder")),
            head: s.count(Some("head")),
            auxiliary: s.count(Some("aux")),
            total: s.count(None),
        };
        debug_assert_eq!(b.total, b.rows().iter().map(|r| r.1).sum::<usize>());
        b
    }

    /// Variables the optimizer should update.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for c in COMPONENTS {
            if c == "backbone" && self.config.backbone.freeze {
                continue;
            }
            vars.extend(self.store.trainable_vars(Some(c)));
        }
        vars
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }
}

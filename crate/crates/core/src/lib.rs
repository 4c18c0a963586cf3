//! PlutoNet: a compact polyp-segmentation network.
//!
//! A shared encoder feeds two decoders. The modified partial decoder
//! combines partial decoding with full-scale skip connections over the three
//! deepest encoder levels, built from asymmetric convolution blocks and
//! squeeze-and-excitation recalibration. A tiny shallow-attention auxiliary
//! decoder is used only during training, where a dice-style consistency loss
//! between the two predictions is added to the supervised loss.
//!
//! The crate also contains the data pipeline (corpus loading, split,
//! preprocessing, augmentation, a synthetic-polyp generator), segmentation
//! metrics, and the training loop with early stopping, checkpointing and the
//! with/without-consistency ablation.

pub mod backbone;
pub mod blocks;
pub mod config;
pub mod data;
pub mod decoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod trainer;

pub use backbone::{BackboneConfig, BackboneVariant, FeaturePyramid, ImageBatch, ReducedPyramid};
pub use config::RunConfig;
pub use decoders::{
    DecoderState, ForwardMode, MaskTensor, ModelConfig, NetworkConfig, ParameterBreakdown,
    PlutoNet,
};
pub use error::{Error, Result};
pub use losses::{LossBundle, LossConfig};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use trainer::{TrainConfig, TrainHistory};

/// The total parameter count reported for the reference configuration.
pub const REFERENCE_TOTAL_PARAMETERS: usize = 2_626_537;
/// The auxiliary decoder size reported for the reference configuration.
pub const REFERENCE_AUXILIARY_PARAMETERS: usize = 200;
/// Upper bound enforced on the auxiliary decoder.
pub const AUXILIARY_PARAMETER_BUDGET: usize = 300;

//! Corpus ingestion, the 80/10/10 split, 224×224 preprocessing, paired
//! geometric augmentation, and a synthetic-polyp generator.
//!
//! A corpus is a directory with `images/` (png or jpg) and `masks/` (png)
//! whose files are matched by filename stem.

mod augment;
mod corpus;
mod preprocess;
mod split;
mod synth;

pub use augment::{apply_hflip, apply_rotation, augment, sample_rng, AugmentationConfig};
pub use corpus::{load_corpus, Sample};
pub use preprocess::{image_to_input, load_pairs, preprocess, preprocess_images, Pair};
pub use split::{split_corpus, Split, SplitSpec};
pub use synth::{generate_synthetic, SynthManifest, GENERATOR_VERSION};

use candle_core::{DType, Device, Tensor};

use crate::backbone::{ImageBatch, INPUT_SIZE};
use crate::decoders::MaskTensor;
use crate::error::{Error, Result};

/// Stack preprocessed pairs into an image batch and a ground-truth mask batch.
pub fn to_batch(pairs: &[&Pair], dtype: DType, device: &Device) -> Result<(ImageBatch, MaskTensor)> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot build an empty batch".into()));
    }
    let n = pairs.len();
    let plane = INPUT_SIZE * INPUT_SIZE;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut masks = Vec::with_capacity(n * plane);
    for p in pairs {
        images.extend_from_slice(&p.image);
        masks.extend_from_slice(&p.mask);
    }
    let images = Tensor::from_vec(images, (n, 3, INPUT_SIZE, INPUT_SIZE), device)?.to_dtype(dtype)?;
    let masks = Tensor::from_vec(masks, (n, 1, INPUT_SIZE, INPUT_SIZE), device)?.to_dtype(dtype)?;
    Ok((ImageBatch::new(images)?, MaskTensor::new(masks)?))
}

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use super::corpus::Sample;
use crate::backbone::INPUT_SIZE;
use crate::error::{Error, Result};

/// A preprocessed sample: a channel-major RGB image in [0, 1] and a binary
/// mask, both at 224×224.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    /// `3 · 224 · 224` values, channel-major.
    pub image: Vec<f32>,
    /// `224 · 224` values in {0, 1}.
    pub mask: Vec<f32>,
}

fn image_to_chw(img: &RgbImage) -> Vec<f32> {
    let plane = (img.width() * img.height()) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

fn mask_to_binary(mask: &GrayImage) -> Vec<f32> {
    mask.pixels()
        .map(|p| if p[0] as f32 / 255.0 >= 0.5 { 1.0 } else { 0.0 })
        .collect()
}

/// Resize an RGB image and its mask to 224×224 (bilinear for the image,
/// nearest-neighbour for the mask) and binarize the mask at 0.5.
///
/// Inputs already at 224×224 are not resampled, so applying this to its own
/// output changes nothing.
pub fn preprocess_images(id: &str, image: RgbImage, mask: GrayImage) -> Result<Pair> {
    if image.dimensions() != mask.dimensions() {
        return Err(Error::Data(format!(
            "sample {id}: image is {:?} but mask is {:?}",
            image.dimensions(),
            mask.dimensions()
        )));
    }
    let s = INPUT_SIZE as u32;
    let (image, mask) = if image.dimensions() == (s, s) {
        (image, mask)
    } else {
        (
            image::imageops::resize(&image, s, s, FilterType::Triangle),
            image::imageops::resize(&mask, s, s, FilterType::Nearest),
        )
    };
    Ok(Pair {
        id: id.to_string(),
        image: image_to_chw(&image),
        mask: mask_to_binary(&mask),
    })
}

/// Resize an image on its own to the network input (no mask).
pub fn image_to_input(image: RgbImage) -> Vec<f32> {
    let s = INPUT_SIZE as u32;
    if image.dimensions() == (s, s) {
        image_to_chw(&image)
    } else {
        image_to_chw(&image::imageops::resize(&image, s, s, FilterType::Triangle))
    }
}

/// Decode and preprocess one corpus sample.
pub fn preprocess(sample: &Sample) -> Result<Pair> {
    let image = image::open(&sample.image_path)
        .map_err(|e| Error::image(&sample.image_path, e))?
        .to_rgb8();
    let mask = image::open(&sample.mask_path)
        .map_err(|e| Error::image(&sample.mask_path, e))?
        .to_luma8();
    preprocess_images(&sample.id, image, mask)
}

pub fn load_pairs(samples: &[Sample]) -> Result<Vec<Pair>> {
    samples.iter().map(preprocess).collect()
}

impl Pair {
    /// Rebuild 8-bit images from the stored planes.
    pub fn to_images(&self) -> (RgbImage, GrayImage) {
        let s = INPUT_SIZE as u32;
        let plane = INPUT_SIZE * INPUT_SIZE;
        let image = RgbImage::from_fn(s, s, |x, y| {
            let i = (y * s + x) as usize;
            image::Rgb(std::array::from_fn(|c| {
                (self.image[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8
            }))
        });
        let mask = GrayImage::from_fn(s, s, |x, y| {
            image::Luma([if self.mask[(y * s + x) as usize] >= 0.5 { 255 } else { 0 }])
        });
        (image, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> (RgbImage, GrayImage) {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 77]));
        let mask = GrayImage::from_fn(w, h, |x, y| image::Luma([if x + y < w { 255 } else { 3 }]));
        (img, mask)
    }

    #[test]
    fn output_geometry_and_ranges() {
        let (img, mask) = gradient(300, 250);
        let p = preprocess_images("a", img, mask).unwrap();
        assert_eq!(p.image.len(), 3 * 224 * 224);
        assert_eq!(p.mask.len(), 224 * 224);
        assert!(p.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(p.mask.contains(&1.0) && p.mask.contains(&0.0));
    }

    #[test]
    fn idempotent() {
        let (img, mask) = gradient(97, 131);
        let once = preprocess_images("a", img, mask).unwrap();
        let (img2, mask2) = once.to_images();
        let twice = preprocess_images("a", img2, mask2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let (img, _) = gradient(50, 50);
        let (_, mask) = gradient(40, 50);
        assert!(matches!(preprocess_images("a", img, mask), Err(Error::Data(_))));
    }

    #[test]
    fn soft_mask_threshold() {
        let img = RgbImage::new(224, 224);
        let mask = GrayImage::from_fn(224, 224, |x, _| image::Luma([if x < 112 { 127 } else { 128 }]));
        let p = preprocess_images("a", img, mask).unwrap();
        assert_eq!(p.mask[0], 0.0);
        assert_eq!(p.mask[223], 1.0);
    }
}

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GENERATOR_VERSION: u32 = 1;
const MIN_FOREGROUND: f64 = 0.01;
const MAX_FOREGROUND: f64 = 0.5;
const NOISE_GRID: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub generator_version: u32,
    pub seed: u64,
    pub n: usize,
    pub image_size: u32,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (self.cos * dx + self.sin * dy) / self.a;
        let v = (-self.sin * dx + self.cos * dy) / self.b;
        (u * u + v * v).sqrt()
    }
}

/// Smooth field: a coarse grid of random values, bilinearly upsampled.
fn low_frequency_field(rng: &mut ChaCha8Rng, size: u32) -> Vec<f64> {
    let g = NOISE_GRID;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scale = (g - 1) as f64 / (size.max(2) - 1) as f64;
    let mut out = Vec::with_capacity((size * size) as usize);
    for y in 0..size {
        for x in 0..size {
            let (gx, gy) = (x as f64 * scale, y as f64 * scale);
            let (x0, y0) = ((gx.floor() as usize).min(g - 2), (gy.floor() as usize).min(g - 2));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let v = |i: usize, j: usize| grid[j * g + i];
            out.push(
                (1.0 - fy) * ((1.0 - fx) * v(x0, y0) + fx * v(x0 + 1, y0))
                    + fy * ((1.0 - fx) * v(x0, y0 + 1) + fx * v(x0 + 1, y0 + 1)),
            );
        }
    }
    out
}

fn draw_ellipses(rng: &mut ChaCha8Rng, size: u32) -> Vec<Ellipse> {
    let s = size as f64;
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            let a = rng.random_range(0.07..0.2) * s;
            let b = rng.random_range(0.07..0.2) * s;
            let margin = 0.1 * s;
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.random_range(margin..s - margin),
                cy: rng.random_range(margin..s - margin),
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect()
}

fn render(rng: &mut ChaCha8Rng, size: u32) -> (RgbImage, GrayImage) {
    let area = (size * size) as f64;
    let ellipses = loop {
        let e = draw_ellipses(rng, size);
        let covered = (0..size * size)
            .filter(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                e.iter().any(|el| el.radius(x, y) < 1.0)
            })
            .count() as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&(covered / area)) {
            break e;
        }
    };
    let tissue = [
        0.62 + rng.random_range(-0.05..0.05),
        0.33 + rng.random_range(-0.05..0.05),
        0.30 + rng.random_range(-0.05..0.05),
    ];
    let polyp = [
        0.88 + rng.random_range(-0.05..0.05),
        0.62 + rng.random_range(-0.05..0.05),
        0.48 + rng.random_range(-0.05..0.05),
    ];
    let field = low_frequency_field(rng, size);
    let mut image = RgbImage::new(size, size);
    let mut mask = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let i = (y * size + x) as usize;
            let r = ellipses
                .iter()
                .map(|e| e.radius(x as f64, y as f64))
                .fold(f64::INFINITY, f64::min);
            let inside = r < 1.0;
            let shade = 0.1 * field[i];
            let px: [u8; 3] = std::array::from_fn(|c| {
                let base = if inside {
                    // brighter towards the dome centre
                    polyp[c] + 0.08 * (1.0 - r * r)
                } else {
                    tissue[c]
                };
                let grain: f64 = rng.random_range(-0.03..0.03);
                ((base + shade + grain).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            image.put_pixel(x, y, image::Rgb(px));
            mask.put_pixel(x, y, image::Luma([if inside { 255 } else { 0 }]));
        }
    }
    (image, mask)
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    key[16..].copy_from_slice(b"plutonet-synth\0\0");
    ChaCha8Rng::from_seed(key)
}

/// Write `n` image/mask pairs of 1 to 3 ellipses over smooth noise into
/// `out_dir/images` and `out_dir/masks`, plus `manifest.json`.
///
/// Output is byte-identical for a given `(n, seed, image_size)`, and the
/// foreground of every mask covers between 1% and 50% of the image.
pub fn generate_synthetic(n: usize, seed: u64, out_dir: &Path, image_size: u32) -> Result<SynthManifest> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus size must be at least 1".into()));
    }
    if image_size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {image_size}")));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let width = n.to_string().len().max(4);
    for i in 0..n {
        let (img, mask) = render(&mut item_rng(seed, i), image_size);
        let name = format!("synth_{i:0width$}.png");
        let ip = images.join(&name);
        img.save(&ip).map_err(|e| Error::image(&ip, e))?;
        let mp = masks.join(&name);
        mask.save(&mp).map_err(|e| Error::image(&mp, e))?;
    }
    let manifest = SynthManifest {
        generator: "plutonet-synth".into(),
        generator_version: GENERATOR_VERSION,
        seed,
        n,
        image_size,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreground_fraction_bounds() {
        for i in 0..12 {
            let (_, mask) = render(&mut item_rng(9, i), 64);
            let fg = mask.pixels().filter(|p| p[0] == 255).count() as f64 / (64.0 * 64.0);
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg), "{fg}");
            assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
        }
    }

    #[test]
    fn deterministic_per_index() {
        let a = render(&mut item_rng(1, 3), 48);
        let b = render(&mut item_rng(1, 3), 48);
        assert_eq!(a, b);
        assert_ne!(a.1, render(&mut item_rng(2, 3), 48).1);
    }

    #[test]
    fn smooth_field_bounded() {
        let f = low_frequency_field(&mut item_rng(0, 0), 40);
        assert_eq!(f.len(), 1600);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rejects_empty_request() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(generate_synthetic(0, 0, d.path(), 224), Err(Error::Config(_))));
    }
}

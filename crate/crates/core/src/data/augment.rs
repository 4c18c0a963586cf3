use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess::Pair;
use crate::backbone::INPUT_SIZE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub rotation: bool,
    /// Angles are drawn uniformly from `[-max_rotation_degrees, max_rotation_degrees]`.
    pub max_rotation_degrees: f64,
    pub hflip: bool,
    pub hflip_probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation: true,
            max_rotation_degrees: 30.0,
            hflip: true,
            hflip_probability: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_degrees >= 0.0 && self.max_rotation_degrees <= 180.0) {
            return Err(Error::Config(format!(
                "max_rotation_degrees must lie in [0, 180], got {}",
                self.max_rotation_degrees
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::Config(format!(
                "hflip_probability must lie in [0, 1], got {}",
                self.hflip_probability
            )));
        }
        Ok(())
    }
}

/// A generator seeded from `(seed, epoch, sample id)`, independent of the
/// order in which samples are visited.
pub fn sample_rng(seed: u64, epoch: usize, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Apply the same random flip and rotation to an image and its mask.
///
/// Two draws are always consumed (flip, then angle), whatever is enabled.
pub fn augment(pair: &Pair, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Pair {
    let flip_draw: f64 = rng.random();
    let angle_draw: f64 = rng.random();
    if !cfg.enabled {
        return pair.clone();
    }
    let mut out = if cfg.hflip && flip_draw < cfg.hflip_probability {
        apply_hflip(pair)
    } else {
        pair.clone()
    };
    if cfg.rotation && cfg.max_rotation_degrees > 0.0 {
        let degrees = (2.0 * angle_draw - 1.0) * cfg.max_rotation_degrees;
        out = apply_rotation(&out, degrees);
    }
    out
}

fn flip_plane(plane: &mut [f32], n: usize) {
    for row in plane.chunks_mut(n) {
        row.reverse();
    }
}

/// Mirror image and mask left to right.
pub fn apply_hflip(pair: &Pair) -> Pair {
    let n = INPUT_SIZE;
    let mut out = pair.clone();
    for plane in out.image.chunks_mut(n * n) {
        flip_plane(plane, n);
    }
    flip_plane(&mut out.mask, n);
    out
}

/// Reflect a continuous coordinate into `[0, n − 1]` (mirror about the edge
/// pixel centres).
fn reflect(mut x: f64, n: usize) -> f64 {
    let hi = (n - 1) as f64;
    if hi == 0.0 {
        return 0.0;
    }
    let period = 2.0 * hi;
    x = x.rem_euclid(period);
    if x > hi {
        period - x
    } else {
        x
    }
}

fn bilinear(plane: &[f32], n: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi > (n - 1) as f64 || yi > (n - 1) as f64 {
            0.0
        } else {
            plane[yi as usize * n + xi as usize] as f64
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1.0, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1.0) + fx * at(x0 + 1.0, y0 + 1.0))
}

/// Rotate image and mask by `degrees` (counter-clockwise on screen) about the
/// image centre with bilinear sampling. The image border is filled by
/// reflection, the mask border by zeros, and the mask is re-binarized at 0.5.
pub fn apply_rotation(pair: &Pair, degrees: f64) -> Pair {
    if degrees == 0.0 {
        return pair.clone();
    }
    let n = INPUT_SIZE;
    let c = (n - 1) as f64 / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = pair.clone();
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            // inverse map; y points down, so a screen-CCW rotation is clockwise in (x, y)
            let sx = cos * dx - sin * dy + c;
            let sy = sin * dx + cos * dy + c;
            let i = y * n + x;
            let (rx, ry) = (reflect(sx, n), reflect(sy, n));
            for ch in 0..3 {
                let plane = &pair.image[ch * n * n..(ch + 1) * n * n];
                out.image[ch * n * n + i] = bilinear(plane, n, rx, ry) as f32;
            }
            let m = bilinear(&pair.mask, n, sx, sy);
            out.mask[i] = if m >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> Pair {
        let n = INPUT_SIZE;
        let image = (0..3 * n * n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
        let mask = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 - 80.0, (i / n) as f64 - 120.0);
                if x * x + y * y < 900.0 { 1.0 } else { 0.0 }
            })
            .collect();
        Pair { id: "p".into(), image, mask }
    }

    #[test]
    fn forced_flip_matches_direct_mirror() {
        let p = pattern();
        let f = apply_hflip(&p);
        let n = INPUT_SIZE;
        for y in [0, 17, 223] {
            for x in [0, 5, 111, 223] {
                assert_eq!(f.mask[y * n + x], p.mask[y * n + (n - 1 - x)]);
                assert_eq!(f.image[2 * n * n + y * n + x], p.image[2 * n * n + y * n + (n - 1 - x)]);
            }
        }
        assert_eq!(apply_hflip(&f), p);
    }

    #[test]
    fn right_angle_rotation_is_a_permutation() {
        let p = pattern();
        let r = apply_rotation(&p, 90.0);
        let n = INPUT_SIZE;
        for (x, y) in [(0usize, 0usize), (10, 200), (223, 5), (100, 100)] {
            // at 90° the output pixel (x, y) reads the source pixel (n − 1 − y, x)
            let (sx, sy) = (n - 1 - y, x);
            assert!((r.image[y * n + x] - p.image[sy * n + sx]).abs() < 1e-5);
            assert_eq!(r.mask[y * n + x], p.mask[sy * n + sx]);
        }
    }

    #[test]
    fn rotation_keeps_mask_binary_and_image_in_range() {
        let r = apply_rotation(&pattern(), 23.0);
        assert!(r.mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(r.image.iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
    }

    #[test]
    fn disc_area_roughly_preserved_under_rotation() {
        let p = pattern();
        let before: f32 = p.mask.iter().sum();
        let after: f32 = apply_rotation(&p, 17.0).mask.iter().sum();
        assert!((before - after).abs() / before < 0.05, "{before} vs {after}");
    }

    #[test]
    fn deterministic_per_seed_epoch_and_id() {
        let p = pattern();
        let cfg = AugmentationConfig::default();
        let a = augment(&p, &cfg, &mut sample_rng(3, 1, "p"));
        let b = augment(&p, &cfg, &mut sample_rng(3, 1, "p"));
        assert_eq!(a, b);
        let differs = (0..8).any(|e| augment(&p, &cfg, &mut sample_rng(3, e, "p")) != a);
        assert!(differs);
    }

    #[test]
    fn disabled_is_identity() {
        let p = pattern();
        let cfg = AugmentationConfig { enabled: false, ..Default::default() };
        assert_eq!(augment(&p, &cfg, &mut sample_rng(0, 0, "p")), p);
    }

    #[test]
    fn reflect_folds_into_range() {
        assert_eq!(reflect(-1.0, 5), 1.0);
        assert_eq!(reflect(5.0, 5), 3.0);
        assert_eq!(reflect(2.5, 5), 2.5);
        assert_eq!(reflect(9.0, 5), 1.0);
    }
}

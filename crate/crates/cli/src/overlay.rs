use image::{GrayImage, Rgb, RgbImage};

const TINT: [f32; 3] = [0.0, 255.0, 0.0];
const TINT_WEIGHT: f32 = 0.45;
const CONTOUR: Rgb<u8> = Rgb([255, 0, 0]);

/// Pixels of `mask` (nonzero) that touch a background pixel or the border.
pub fn contour(mask: &GrayImage) -> Vec<(u32, u32)> {
    let (w, h) = mask.dimensions();
    let on = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && mask.get_pixel(x as u32, y as u32)[0] > 0
    };
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if on(x, y) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| !on(x + dx, y + dy)) {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

/// Tint predicted foreground over the image and draw the ground-truth
/// outline when one is given.
pub fn render(image: &RgbImage, predicted: &GrayImage, truth: Option<&GrayImage>) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if predicted.get_pixel(x, y)[0] > 0 {
            for c in 0..3 {
                let v = (1.0 - TINT_WEIGHT) * px[c] as f32 + TINT_WEIGHT * TINT[c];
                px[c] = v.round() as u8;
            }
        }
    }
    if let Some(t) = truth {
        for (x, y) in contour(t) {
            out.put_pixel(x, y, CONTOUR);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    #[test]
    fn contour_of_square_is_its_rim() {
        let m = GrayImage::from_fn(6, 6, |x, y| Luma([if (1..5).contains(&x) && (1..5).contains(&y) { 255 } else { 0 }]));
        let c = contour(&m);
        assert_eq!(c.len(), 12);
        assert!(!c.contains(&(2, 2)));
    }

    #[test]
    fn render_tints_only_foreground() {
        let img = RgbImage::from_pixel(4, 4, Rgb([100, 100, 100]));
        let pred = GrayImage::from_fn(4, 4, |x, _| Luma([if x == 0 { 255 } else { 0 }]));
        let out = render(&img, &pred, None);
        assert_eq!(out.get_pixel(1, 1), &Rgb([100, 100, 100]));
        assert_eq!(out.get_pixel(0, 1)[1], 170);
        let truth = GrayImage::from_pixel(4, 4, Luma([255]));
        assert_eq!(render(&img, &pred, Some(&truth)).get_pixel(3, 0), &CONTOUR);
    }
}

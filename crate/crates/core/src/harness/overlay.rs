//! Side-by-side qualitative panels: image, tinted truth, tinted prediction.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, Palette};

/// Blend `label`'s palette colours over `image` at 50% on foreground pixels.
pub fn tint(image: &RgbImage, label: &LabelMap, palette: &Palette) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let idx = label.view()[[y as usize, x as usize]];
        if idx != 0 {
            let c = palette.color(idx);
            *px = Rgb(std::array::from_fn(|k| (px[k] as u16 + c[k] as u16).div_ceil(2) as u8));
        }
    }
    out
}

/// Three panels left to right: the original, the truth overlay and the
/// prediction overlay.
pub fn render_overlay(image: &RgbImage, truth: &LabelMap, pred: &LabelMap) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    for (name, l) in [("truth", truth), ("prediction", pred)] {
        if (l.height(), l.width()) != (h as usize, w as usize) {
            return Err(Error::Shape {
                layer: "overlay".into(),
                msg: format!("{name} is {}x{} but the image is {h}x{w}", l.height(), l.width()),
            });
        }
    }
    let palette = Palette::voc();
    let panels = [image.clone(), tint(image, truth, &palette), tint(image, pred, &palette)];
    let mut out = RgbImage::new(3 * w, h);
    for (i, p) in panels.iter().enumerate() {
        image::imageops::replace(&mut out, p, (i as u32 * w) as i64, 0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sample() -> (RgbImage, LabelMap) {
        let img = RgbImage::from_fn(6, 4, |x, y| Rgb([(x * 40) as u8, (y * 60) as u8, 200]));
        let label = LabelMap::new(Array2::from_shape_fn((4, 6), |(y, x)| ((x + y) % 4) as u8)).unwrap();
        (img, label)
    }

    #[test]
    fn identical_labels_give_identical_panels() {
        let (img, label) = sample();
        let out = render_overlay(&img, &label, &label).unwrap();
        assert_eq!(out.dimensions(), (18, 4));
        let mid = image::imageops::crop_imm(&out, 6, 0, 6, 4).to_image();
        let right = image::imageops::crop_imm(&out, 12, 0, 6, 4).to_image();
        assert_eq!(mid, right);
    }

    #[test]
    fn background_prediction_leaves_image_untouched() {
        let (img, label) = sample();
        let out = render_overlay(&img, &label, &LabelMap::zeros(4, 6)).unwrap();
        assert_eq!(image::imageops::crop_imm(&out, 12, 0, 6, 4).to_image(), img);
        assert_eq!(image::imageops::crop_imm(&out, 0, 0, 6, 4).to_image(), img);
    }

    #[test]
    fn tint_rounds_half_up() {
        let img = RgbImage::from_pixel(1, 1, Rgb([1, 0, 255]));
        let label = LabelMap::filled(1, 1, 1).unwrap();
        let out = tint(&img, &label, &Palette::voc());
        assert_eq!(out.get_pixel(0, 0), &Rgb([65, 0, 128]));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let (img, label) = sample();
        assert!(render_overlay(&img, &label, &LabelMap::zeros(3, 6)).is_err());
    }
}

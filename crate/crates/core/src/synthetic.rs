//! Procedural stand-ins for the dermoscopy data and the two pretraining sources.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::catalog::{BinaryMask, DiagnosisClass};
use crate::error::{Error, Result};

const SKIN: [f64; 3] = [222.0, 180.0, 150.0];

/// Mean lesion colour per diagnosis.
pub fn lesion_color(class: DiagnosisClass) -> [f64; 3] {
    match class {
        DiagnosisClass::Benign => [150.0, 95.0, 60.0],
        DiagnosisClass::Melanoma => [60.0, 35.0, 40.0],
        DiagnosisClass::SeborrhoeicKeratosis => [185.0, 150.0, 80.0],
    }
}

fn to_rgb(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// Star-shaped region around `(cy, cx)` with a radius that wobbles with angle.
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, h: usize, w: usize, radius: f64, wobble: f64) -> Self {
        let margin = radius * 1.2;
        let cy = rng.random_range(margin.min(h as f64 / 2.0)..=(h as f64 - margin).max(h as f64 / 2.0));
        let cx = rng.random_range(margin.min(w as f64 / 2.0)..=(w as f64 - margin).max(w as f64 / 2.0));
        Blob {
            cy,
            cx,
            radius,
            aspect: rng.random_range(0.75..1.25),
            harmonics: std::array::from_fn(|_| {
                (rng.random_range(0.0..wobble), rng.random_range(0.0..std::f64::consts::TAU))
            }),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) * self.aspect;
        let dx = x - self.cx;
        let theta = dy.atan2(dx);
        let r = self
            .harmonics
            .iter()
            .enumerate()
            .fold(self.radius, |r, (k, &(amp, phase))| {
                r * (1.0 + amp * ((k + 2) as f64 * theta + phase).sin())
            });
        dy * dy + dx * dx <= r * r
    }
}

fn paint<R: Rng>(
    rng: &mut R,
    h: usize,
    w: usize,
    background: [f64; 3],
    regions: &[(&Blob, [f64; 3])],
    noise: f64,
) -> (RgbImage, Array2<u8>) {
    let normal = Normal::new(0.0, noise).expect("valid noise level");
    let mut img = RgbImage::new(w as u32, h as u32);
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut color = background;
            for (k, (blob, c)) in regions.iter().enumerate() {
                if blob.contains(py, px) {
                    color = *c;
                    labels[[y, x]] = k as u8 + 1;
                }
            }
            let n = normal.sample(rng);
            img.put_pixel(x as u32, y as u32, to_rgb(color.map(|v| v + n)));
        }
    }
    (img, labels)
}

/// Fixed set of eight 64×64 images, each a centred disc coloured by class.
pub fn overfit_set() -> Vec<(String, RgbImage, Array2<u8>)> {
    let classes = [1u8, 2, 3, 1, 2, 3, 2, 3];
    let radii = [14.0, 18.0, 22.0, 20.0, 12.0, 16.0, 24.0, 19.0];
    (0..8)
        .map(|i| {
            let class = DiagnosisClass::from_code(classes[i]).expect("valid code");
            let c = lesion_color(class);
            let r2: f64 = radii[i] * radii[i];
            let img = RgbImage::from_fn(64, 64, |x, y| {
                let d2 = (x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2);
                to_rgb(if d2 <= r2 { c } else { SKIN })
            });
            let labels = Array2::from_shape_fn((64, 64), |(y, x)| {
                let d2 = (x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2);
                if d2 <= r2 {
                    classes[i]
                } else {
                    0
                }
            });
            (format!("disc{i}"), img, labels)
        })
        .collect()
}

/// Class counts for `n` images in the proportions of the ISBI training set,
/// with at least five per class so stratified folds exist.
pub fn class_counts(n: usize) -> Result<[usize; 3]> {
    if n < 15 {
        return Err(Error::Config(format!("a synthetic dataset needs at least 15 images, got {n}")));
    }
    let total = 1843.0 + 521.0 + 386.0;
    let mel = ((n as f64 * 521.0 / total).round() as usize).max(5);
    let sk = ((n as f64 * 386.0 / total).round() as usize).max(5);
    Ok([n - mel - sk, mel, sk])
}

/// Options for [`write_lesion_dataset`].
#[derive(Debug, Clone, Copy)]
pub struct LesionDatasetSpec {
    pub num_images: usize,
    pub seed: u64,
    /// Images are drawn with heights and widths in this range.
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for LesionDatasetSpec {
    fn default() -> Self {
        LesionDatasetSpec {
            num_images: 60,
            seed: 0,
            min_side: 48,
            max_side: 80,
        }
    }
}

/// One synthetic lesion image and its binary mask.
pub fn lesion_image<R: Rng>(rng: &mut R, class: DiagnosisClass, h: usize, w: usize) -> (RgbImage, BinaryMask) {
    let radius = rng.random_range(0.18..0.32) * h.min(w) as f64;
    let blob = Blob::random(rng, h, w, radius, 0.12);
    let tint: f64 = rng.random_range(-12.0..12.0);
    let color = lesion_color(class).map(|v| v + tint);
    let bg = SKIN.map(|v| v + rng.random_range(-10.0..10.0));
    let (img, labels) = paint(rng, h, w, bg, &[(&blob, color)], 6.0);
    let mask = BinaryMask::from_fn(h, w, |y, x| labels[[y, x]] == 1);
    (img, mask)
}

/// Write a dataset in the challenge layout: `images/<id>.png`,
/// `masks/<id>_segmentation.png` and `diagnosis.csv`. Returns the table path.
pub fn write_lesion_dataset(root: &Path, spec: &LesionDatasetSpec) -> Result<std::path::PathBuf> {
    let counts = class_counts(spec.num_images)?;
    if spec.min_side == 0 || spec.min_side > spec.max_side {
        return Err(Error::Config(format!(
            "invalid side range {}..={}",
            spec.min_side, spec.max_side
        )));
    }
    let images = root.join("images");
    let masks = root.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes: Vec<DiagnosisClass> = DiagnosisClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    rand::seq::SliceRandom::shuffle(&mut classes[..], &mut rng);
    let mut table = String::from("image_id,melanoma,seborrheic_keratosis\n");
    for (i, class) in classes.into_iter().enumerate() {
        let id = format!("ISIC_{:07}", i);
        let h = rng.random_range(spec.min_side..=spec.max_side);
        let w = rng.random_range(spec.min_side..=spec.max_side);
        let (img, mask) = lesion_image(&mut rng, class, h, w);
        let ip = images.join(format!("{id}.png"));
        img.save(&ip).map_err(|e| Error::Image { path: ip.clone(), source: e })?;
        let mp = masks.join(format!("{id}_segmentation.png"));
        mask.to_gray()
            .save(&mp)
            .map_err(|e| Error::Image { path: mp.clone(), source: e })?;
        let (m, s) = match class {
            DiagnosisClass::Benign => (0, 0),
            DiagnosisClass::Melanoma => (1, 0),
            DiagnosisClass::SeborrhoeicKeratosis => (0, 1),
        };
        table.push_str(&format!("{id},{m}.0,{s}.0\n"));
    }
    let tp = root.join("diagnosis.csv");
    std::fs::write(&tp, table).map_err(|e| Error::io(&tp, e))?;
    Ok(tp)
}

/// Shape kinds of the tier-1 classification set.
pub const SHAPE_CLASSES: usize = 4;

fn shape_image<R: Rng>(rng: &mut R, kind: usize, size: usize) -> RgbImage {
    let s = size as f64;
    let r = rng.random_range(0.2..0.35) * s;
    let cy = rng.random_range(r..s - r);
    let cx = rng.random_range(r..s - r);
    let fg = [0, 1, 2].map(|_| rng.random_range(20.0..235.0));
    let bg = [0, 1, 2].map(|_| rng.random_range(20.0..235.0));
    let normal = Normal::new(0.0, 8.0).expect("valid noise");
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let inside = match kind {
            0 => dy * dy + dx * dx <= r * r,
            1 => dy.abs() <= r && dx.abs() <= r,
            2 => dy.abs() + dx.abs() <= r,
            _ => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
        };
        let n = normal.sample(rng);
        to_rgb((if inside { fg } else { bg }).map(|v| v + n))
    })
}

/// Square images of discs, squares, diamonds and crosses, labelled by shape.
pub fn shape_classification_set(n: usize, size: usize, seed: u64) -> Vec<(RgbImage, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let kind = i % SHAPE_CLASSES;
            (shape_image(&mut rng, kind, size), kind as u8)
        })
        .collect()
}

/// Images with one to three blobs, each coloured and labelled by one of
/// `num_classes - 1` foreground classes.
pub fn blob_segmentation_set(n: usize, size: usize, num_classes: usize, seed: u64) -> Vec<(RgbImage, Array2<u8>)> {
    assert!(num_classes >= 2, "need at least one foreground class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = num_classes - 1;
    let palette: Vec<[f64; 3]> = (0..fg)
        .map(|k| {
            let hue = k as f64 / fg as f64 * std::f64::consts::TAU;
            [0.0, 2.094, 4.189].map(|off| 128.0 + 100.0 * (hue + off).cos())
        })
        .collect();
    (0..n)
        .map(|_| {
            let count = rng.random_range(1..=3usize);
            let blobs: Vec<(Blob, usize)> = (0..count)
                .map(|_| {
                    let r = rng.random_range(0.12..0.25) * size as f64;
                    (Blob::random(&mut rng, size, size, r, 0.15), rng.random_range(0..fg))
                })
                .collect();
            let regions: Vec<(&Blob, [f64; 3])> = blobs.iter().map(|(b, k)| (b, palette[*k])).collect();
            let (img, raw) = paint(&mut rng, size, size, [90.0, 90.0, 90.0], &regions, 6.0);
            let labels = raw.mapv(|v| if v == 0 { 0 } else { blobs[v as usize - 1].1 as u8 + 1 });
            (img, labels)
        })
        .collect()
}

//! Four-class label maps and their 8-bit paletted PNG encoding.

use std::io::Cursor;

use ndarray::{Array2, ArrayView2};

use crate::catalog::{BinaryMask, DiagnosisClass};
use crate::error::{Error, Result};

/// Background plus the three lesion classes.
pub const NUM_LABELS: usize = 4;
/// Boundary index used by VOC-style datasets; never valid here.
pub const VOID_INDEX: u8 = 255;

/// Grid of class indices in `{0, 1, 2, 3}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    indices: Array2<u8>,
}

impl LabelMap {
    pub fn new(indices: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&v| v as usize >= NUM_LABELS) {
            return Err(invalid_index(bad));
        }
        Ok(LabelMap { indices })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap {
            indices: Array2::zeros((height, width)),
        }
    }

    pub fn filled(height: usize, width: usize, index: u8) -> Result<Self> {
        LabelMap::new(Array2::from_elem((height, width), index))
    }

    pub fn height(&self) -> usize {
        self.indices.nrows()
    }

    pub fn width(&self) -> usize {
        self.indices.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.indices.view()
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.indices
    }

    pub fn histogram(&self) -> [usize; NUM_LABELS] {
        let mut h = [0; NUM_LABELS];
        for &v in &self.indices {
            h[v as usize] += 1;
        }
        h
    }

    /// Does any pixel carry `class`?
    pub fn contains(&self, class: DiagnosisClass) -> bool {
        self.indices.iter().any(|&v| v == class.code())
    }
}

fn invalid_index(v: u8) -> Error {
    if v == VOID_INDEX {
        Error::Label(
            "index 255 present: boundary/void pixels are not part of this label scheme".into(),
        )
    } else {
        Error::Label(format!("index {v} outside the label range 0..=3"))
    }
}

/// 256-entry colour table following the VOC bit-interleaved colormap;
/// entries 0..=3 are (0,0,0), (128,0,0), (0,128,0), (128,128,0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    entries: [[u8; 3]; 256],
}

impl Default for Palette {
    fn default() -> Self {
        Palette::voc()
    }
}

impl Palette {
    pub fn voc() -> Self {
        let mut entries = [[0u8; 3]; 256];
        for (i, entry) in entries.iter_mut().enumerate() {
            let mut c = i;
            let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
            for j in 0..8 {
                r |= ((c & 1) as u8) << (7 - j);
                g |= (((c >> 1) & 1) as u8) << (7 - j);
                b |= (((c >> 2) & 1) as u8) << (7 - j);
                c >>= 3;
            }
            *entry = [r, g, b];
        }
        Palette { entries }
    }

    pub fn color(&self, index: u8) -> [u8; 3] {
        self.entries[index as usize]
    }

    /// Flat `rgbrgb...` bytes as stored in a PLTE chunk.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.entries.iter().flatten().copied().collect()
    }
}

/// Foreground pixels take the diagnosis index, everything else is background.
pub fn fuse_mask(mask: &BinaryMask, diagnosis: DiagnosisClass) -> LabelMap {
    LabelMap {
        indices: mask
            .pixels()
            .mapv(|fg| if fg { diagnosis.code() } else { 0 }),
    }
}

/// One-vs-rest view: `true` exactly where the label equals `class`.
pub fn binarize(label: &LabelMap, class: DiagnosisClass) -> BinaryMask {
    BinaryMask::new(label.indices.mapv(|v| v == class.code()))
}

/// Encode as an 8-bit indexed PNG with the VOC palette embedded.
pub fn encode_paletted(label: &LabelMap) -> Result<Vec<u8>> {
    if let Some(&bad) = label.indices.iter().find(|&&v| v as usize >= NUM_LABELS) {
        return Err(invalid_index(bad));
    }
    let (h, w) = label.indices.dim();
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(Cursor::new(&mut out), w as u32, h as u32);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(Palette::voc().to_bytes());
        encoder.set_compression(png::Compression::Balanced);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        let data: Vec<u8> = label.indices.iter().copied().collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decode an 8-bit indexed PNG, rejecting truecolour input and any index
/// outside `0..=3`.
pub fn decode_paletted(bytes: &[u8]) -> Result<LabelMap> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Indexed || depth != png::BitDepth::Eight {
        return Err(Error::Label(format!(
            "expected an 8-bit paletted raster, found {color:?} at {depth:?}"
        )));
    }
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let stride = frame.line_size;
    let mut indices = Array2::zeros((h, w));
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w];
        for (x, &v) in row.iter().enumerate() {
            indices[[y, x]] = v;
        }
    }
    LabelMap::new(indices)
}

pub fn write_label_png(path: &std::path::Path, label: &LabelMap) -> Result<()> {
    let bytes = encode_paletted(label)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_label_png(path: &std::path::Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_paletted(&bytes).map_err(|e| Error::Label(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_head_is_voc() {
        let p = Palette::voc();
        assert_eq!(p.color(0), [0, 0, 0]);
        assert_eq!(p.color(1), [128, 0, 0]);
        assert_eq!(p.color(2), [0, 128, 0]);
        assert_eq!(p.color(3), [128, 128, 0]);
        assert_eq!(p.color(255), [224, 224, 192]);
    }

    #[test]
    fn fuse_counts_foreground_pixels() {
        let fg = [(0, 0), (1, 2), (2, 2), (3, 1), (3, 3)];
        let mask = BinaryMask::from_fn(4, 4, |y, x| fg.contains(&(y, x)));
        let label = fuse_mask(&mask, DiagnosisClass::Melanoma);
        let (mut twos, mut zeros) = (0, 0);
        for y in 0..4 {
            for x in 0..4 {
                match label.view()[[y, x]] {
                    2 => twos += 1,
                    0 => zeros += 1,
                    v => panic!("unexpected {v}"),
                }
            }
        }
        assert_eq!((twos, zeros), (5, 11));
    }

    #[test]
    fn keratosis_foreground_is_three() {
        let mask = BinaryMask::from_fn(1, 1, |_, _| true);
        let label = fuse_mask(&mask, DiagnosisClass::SeborrhoeicKeratosis);
        assert_eq!(label.view()[[0, 0]], 3);
    }

    #[test]
    fn empty_mask_fuses_to_background() {
        let mask = BinaryMask::from_fn(5, 7, |_, _| false);
        for c in DiagnosisClass::ALL {
            assert_eq!(fuse_mask(&mask, c), LabelMap::zeros(5, 7));
        }
    }

    #[test]
    fn binarize_selects_one_class() {
        let label = LabelMap::new(Array2::from_shape_fn((3, 3), |(y, x)| ((y + x) % 3) as u8)).unwrap();
        let b = binarize(&label, DiagnosisClass::Benign);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(b.pixels()[[y, x]], (y + x) % 3 == 1);
            }
        }
        let zeros = LabelMap::zeros(2, 2);
        assert_eq!(binarize(&zeros, DiagnosisClass::Melanoma).foreground_count(), 0);
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        assert!(LabelMap::new(Array2::from_elem((1, 1), 4)).is_err());
        let err = LabelMap::new(Array2::from_elem((1, 1), 255)).unwrap_err();
        assert!(err.to_string().contains("255"));
    }

    #[test]
    fn truecolor_png_is_rejected() {
        let img = image::RgbImage::new(2, 2);
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let err = decode_paletted(&bytes).unwrap_err();
        assert!(err.to_string().contains("paletted"), "{err}");
    }
}

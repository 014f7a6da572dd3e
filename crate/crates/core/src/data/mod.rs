//! Image containers, dataset ingestion, synthetic data and the JPEG
//! round-trip used by the compression defense.

mod folder;
mod jpeg;
mod synth;

pub use folder::{export_folder, load_folder, LoadReport, ANNOTATION_FILE};
pub use jpeg::{encode_jpeg, jpeg_roundtrip, ChromaSubsampling};
pub use synth::{synth_backgrounds, synth_faces, MIN_CANVAS};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::FeatureMap;
use serde::{Deserialize, Serialize};

/// Smallest accepted image side, in pixels.
pub const MIN_SIDE: usize = 16;

/// Ground-truth face box. Every box in this crate is labelled "face".
pub type GroundTruthBox = BBox;

/// An 8-bit RGB image, stored row-major as `height × width × 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub source_path: Option<String>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes", height * width * 3),
                actual: format!("{} bytes", pixels.len()),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
            source_path: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer matches dimensions")
    }
}

/// Normalized image with every element in `[-1, 1]`, layout `height × width × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    /// Build a tensor, rejecting out-of-range or non-finite values.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x3"),
                actual: format!("{} values", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "image value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Build a tensor by clamping every element into `[-1, 1]`.
    pub fn clamped(height: usize, width: usize, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width * 3, "image tensor size");
        for v in &mut values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Channel-major copy for the networks.
    pub fn to_feature_map(&self) -> FeatureMap {
        hwc_to_chw(&self.values, self.height, self.width)
    }

    /// Map back to 8-bit pixels, rounding to nearest.
    pub fn to_raw(&self) -> RawImage {
        let pixels = self
            .values
            .iter()
            .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        RawImage {
            height: self.height,
            width: self.width,
            pixels,
            source_path: None,
        }
    }

    pub fn from_raw(img: &RawImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            values: img.pixels.iter().map(|&p| normalize(p as f64)).collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.values.len() as f64
    }
}

#[inline]
fn normalize(v: f64) -> f64 {
    v / 127.5 - 1.0
}

pub(crate) fn hwc_to_chw(values: &[f64], height: usize, width: usize) -> FeatureMap {
    let plane = height * width;
    let mut data = vec![0.0; plane * 3];
    for (i, px) in values.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c];
        }
    }
    FeatureMap::from_vec(3, height, width, data)
}

pub(crate) fn chw_to_hwc(map: &FeatureMap) -> Vec<f64> {
    let plane = map.plane();
    let mut out = vec![0.0; plane * map.channels];
    for c in 0..map.channels {
        for i in 0..plane {
            out[i * map.channels + c] = map.data[c * plane + i];
        }
    }
    out
}

/// One image with its face boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: RawImage,
    pub boxes: Vec<GroundTruthBox>,
}

/// Ordered collection of labeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub items: Vec<LabeledImage>,
    pub split_name: String,
    pub seed: u64,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_boxes(&self) -> usize {
        self.items.iter().map(|i| i.boxes.len()).sum()
    }

    /// Split off the first `n` items as one set and the rest as another.
    pub fn split_at(&self, n: usize, first: &str, second: &str) -> (ImageSet, ImageSet) {
        let n = n.min(self.items.len());
        (
            ImageSet {
                items: self.items[..n].to_vec(),
                split_name: first.to_string(),
                seed: self.seed,
            },
            ImageSet {
                items: self.items[n..].to_vec(),
                split_name: second.to_string(),
                seed: self.seed,
            },
        )
    }

    /// Preprocess every item to `target` and rescale its boxes accordingly.
    pub fn preprocessed(&self, target: (usize, usize)) -> Result<Vec<Sample>> {
        self.items
            .iter()
            .map(|item| {
                let sx = target.1 as f64 / item.image.width as f64;
                let sy = target.0 as f64 / item.image.height as f64;
                Ok(Sample {
                    image: preprocess(&item.image, target)?,
                    boxes: item.boxes.iter().map(|b| b.scaled(sx, sy)).collect(),
                })
            })
            .collect()
    }
}

/// A preprocessed image with boxes in its own pixel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub boxes: Vec<GroundTruthBox>,
}

/// Bilinear resize (half-pixel centres, edge clamp) followed by `v / 127.5 - 1`.
pub fn preprocess(img: &RawImage, target: (usize, usize)) -> Result<ImageTensor> {
    let (th, tw) = target;
    if th < MIN_SIDE || tw < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "target {th}x{tw} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    if (th, tw) == (img.height, img.width) {
        return Ok(ImageTensor::from_raw(img));
    }
    let sy = img.height as f64 / th as f64;
    let sx = img.width as f64 / tw as f64;
    let px = |y: usize, x: usize, c: usize| img.pixels[(y * img.width + x) * 3 + c] as f64;
    let mut values = Vec::with_capacity(th * tw * 3);
    for oy in 0..th {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..tw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - wx) + px(y0, x1, c) * wx;
                let bottom = px(y1, x0, c) * (1.0 - wx) + px(y1, x1, c) * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                values.push(normalize(v).clamp(-1.0, 1.0));
            }
        }
    }
    Ok(ImageTensor {
        height: th,
        width: tw,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preprocess_endpoints() {
        let white = RawImage::filled(20, 24, 255).unwrap();
        let t = preprocess(&white, (16, 16)).unwrap();
        assert!(t.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let black = RawImage::filled(20, 24, 0).unwrap();
        let t = preprocess(&black, (32, 40)).unwrap();
        assert!(t.values().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn preprocess_mid_value() {
        let grey = RawImage::filled(16, 16, 128).unwrap();
        let expected: f64 = 128.0 / 127.5 - 1.0;
        assert!((expected - 0.003_921_568_627_450_98).abs() < 1e-15);
        for target in [(16, 16), (23, 17)] {
            let t = preprocess(&grey, target).unwrap();
            assert_eq!(t.shape(), target);
            assert!(t.values().iter().all(|&v| (v - expected).abs() < 1e-12));
        }
    }

    #[test]
    fn preprocess_rejects_tiny_target() {
        let img = RawImage::filled(16, 16, 1).unwrap();
        assert!(preprocess(&img, (8, 16)).is_err());
    }

    #[test]
    fn raw_image_rejects_small_or_mismatched() {
        assert!(RawImage::filled(15, 20, 0).is_err());
        assert!(RawImage::new(16, 16, vec![0; 10]).is_err());
    }

    #[test]
    fn layout_conversions_invert() {
        let values: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 200) as f64 / 200.0).collect();
        let t = ImageTensor::new(16, 16, values.clone()).unwrap();
        assert_eq!(chw_to_hwc(&t.to_feature_map()), values);
    }

    proptest! {
        #[test]
        fn preprocess_stays_in_range(seed in any::<u64>(), h in 16usize..40, w in 16usize..40, th in 16usize..48, tw in 16usize..48) {
            let pixels: Vec<u8> = (0..h * w * 3).map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 56) as u8).collect();
            let img = RawImage::new(h, w, pixels).unwrap();
            let a = preprocess(&img, (th, tw)).unwrap();
            prop_assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert_eq!(a, preprocess(&img, (th, tw)).unwrap());
        }
    }
}

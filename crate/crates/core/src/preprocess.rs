//! Input conditioning for the two stages.
//!
//! The separator sees a thresholded silhouette (`binarize` at T = 35) resized
//! to 32x32 in [0, 1]. The classifier sees the raw slice resized to 224x224,
//! replicated to three channels and standardized with the backbone's
//! ImageNet statistics. Thresholding is never applied on the classifier path.

use image::{GrayImage, Luma};

use crate::data::SliceImage;

/// Intensity threshold of the separator path.
pub const SEPARATOR_THRESHOLD: u8 = 35;
pub const SEPARATOR_INPUT: usize = 32;
pub const CLASSIFIER_INPUT: usize = 224;

/// Per-channel (mean, std) of the ImageNet-pretrained backbone, RGB order.
pub const IMAGENET_STATS: [(f32, f32); 3] = [(0.485, 0.229), (0.456, 0.224), (0.406, 0.225)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    /// Values are 0 or 255.
    pub pixels: GrayImage,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationScheme {
    UnitRange,
    Standardized,
}

/// Channel-major (C, H, W) real-valued image.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub scheme: NormalizationScheme,
    /// (mean, std) applied per channel; (0, 1) for the unit-range scheme.
    pub channel_stats: Vec<(f32, f32)>,
}

impl NormalizedImage {
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// `255` where the intensity is strictly above `threshold`, else `0`.
pub fn binarize(img: &SliceImage, threshold: u8) -> BinaryImage {
    BinaryImage {
        pixels: binarize_gray(&img.pixels, threshold),
        source_id: img.id.clone(),
    }
}

pub fn binarize_gray(img: &GrayImage, threshold: u8) -> GrayImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = Luma([if p[0] > threshold { 255 } else { 0 }]);
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping. Equal sizes are
/// an exact copy.
pub fn resize_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    new_width: usize,
    new_height: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), width * height);
    if width == new_width && height == new_height {
        return src.to_vec();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(width, new_width);
    let ys = taps(height, new_height);
    let mut out = Vec::with_capacity(new_width * new_height);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (
            &src[y0 * width..(y0 + 1) * width],
            &src[y1 * width..(y1 + 1) * width],
        );
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

fn gray_to_f32(img: &GrayImage) -> Vec<f32> {
    img.as_raw().iter().map(|&v| v as f32).collect()
}

/// Threshold at [`SEPARATOR_THRESHOLD`], resize to 32x32, scale to [0, 1].
pub fn prepare_for_separator(img: &SliceImage) -> NormalizedImage {
    let binary = binarize_gray(&img.pixels, SEPARATOR_THRESHOLD);
    let (w, h) = (binary.width() as usize, binary.height() as usize);
    let resized = resize_bilinear(
        &gray_to_f32(&binary),
        w,
        h,
        SEPARATOR_INPUT,
        SEPARATOR_INPUT,
    );
    NormalizedImage {
        channels: 1,
        height: SEPARATOR_INPUT,
        width: SEPARATOR_INPUT,
        data: resized
            .into_iter()
            .map(|v| (v / 255.0).clamp(0.0, 1.0))
            .collect(),
        scheme: NormalizationScheme::UnitRange,
        channel_stats: vec![(0.0, 1.0)],
    }
}

/// Resize to 224x224, replicate to RGB and standardize with [`IMAGENET_STATS`].
pub fn prepare_for_classifier(img: &SliceImage) -> NormalizedImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    standardize_intensities(&gray_to_f32(&img.pixels), w, h)
}

/// Classifier conditioning on raw intensities in the 0..=255 scale.
pub fn standardize_intensities(values: &[f32], width: usize, height: usize) -> NormalizedImage {
    let resized = resize_bilinear(values, width, height, CLASSIFIER_INPUT, CLASSIFIER_INPUT);
    let mut data = Vec::with_capacity(3 * resized.len());
    for &(mean, std) in &IMAGENET_STATS {
        data.extend(resized.iter().map(|&v| (v / 255.0 - mean) / std));
    }
    NormalizedImage {
        channels: 3,
        height: CLASSIFIER_INPUT,
        width: CLASSIFIER_INPUT,
        data,
        scheme: NormalizationScheme::Standardized,
        channel_stats: IMAGENET_STATS.to_vec(),
    }
}

//! ROI max-pooling and the motion-variance LV localizer producing the fixed
//! 64x64 crop.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::imaging::{gaussian_smooth, GaussianParams, Image, ImageSequence};
use crate::math;
use crate::{Error, Result};

pub const ROI_SIZE: usize = 64;

const VARIANCE_SMOOTHING: f64 = 2.0;
const MIN_VARIANCE: f64 = 1e-8;
const OTSU_BINS: usize = 256;

/// Channel-major activations, `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != channels * width * height {
            return Err(Error::invalid("feature map data length does not match its dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map activations must be finite"));
        }
        Ok(Self { channels, width, height, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Max over each of `bins_h x bins_w` sub-windows of `roi`; bin `i` spans
/// `[floor(i h / H), ceil((i + 1) h / H))`.
pub fn roi_pool(map: &FeatureMap, roi: Rect, bins_h: usize, bins_w: usize) -> Result<FeatureMap> {
    if bins_h == 0 || bins_w == 0 {
        return Err(Error::invalid("bin counts must be positive"));
    }
    if roi.width == 0 || roi.height == 0 || roi.x + roi.width > map.width || roi.y + roi.height > map.height {
        return Err(Error::invalid("ROI lies outside the feature map"));
    }
    if roi.height < bins_h || roi.width < bins_w {
        return Err(Error::invalid("ROI is smaller than the bin grid"));
    }
    let edges = |n: usize, bins: usize| -> Vec<(usize, usize)> {
        (0..bins).map(|i| (i * n / bins, ((i + 1) * n).div_ceil(bins))).collect()
    };
    let rows = edges(roi.height, bins_h);
    let cols = edges(roi.width, bins_w);
    let mut out = Vec::with_capacity(map.channels * bins_h * bins_w);
    for c in 0..map.channels {
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut m = f64::NEG_INFINITY;
                for y in roi.y + y0..roi.y + y1 {
                    for x in roi.x + x0..roi.x + x1 {
                        m = m.max(map.get(c, x, y));
                    }
                }
                out.push(m);
            }
        }
    }
    FeatureMap::new(map.channels, bins_w, bins_h, out)
}

/// The 64x64 crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl RoiBox {
    pub fn new(x: usize, y: usize, dims: (usize, usize)) -> Result<Self> {
        if x + ROI_SIZE > dims.0 || y + ROI_SIZE > dims.1 {
            return Err(Error::invalid("ROI box lies outside the image"));
        }
        Ok(Self { x, y, w: ROI_SIZE, h: ROI_SIZE })
    }

    /// Box centred on `(cx, cy)`, clamped into the image.
    pub fn centered(cx: f64, cy: f64, dims: (usize, usize)) -> Result<Self> {
        if dims.0 < ROI_SIZE || dims.1 < ROI_SIZE {
            return Err(Error::invalid("image is smaller than the 64x64 ROI"));
        }
        let half = (ROI_SIZE / 2) as f64;
        let place = |c: f64, n: usize| math::round(c - half).clamp(0.0, (n - ROI_SIZE) as f64) as usize;
        Self::new(place(cx, dims.0), place(cy, dims.1), dims)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && y >= self.y as f64 && x < (self.x + self.w) as f64 && y < (self.y + self.h) as f64
    }
}

/// Otsu threshold of `values` over a fixed-bin histogram.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return lo;
    }
    let scale = OTSU_BINS as f64 / (hi - lo);
    let mut hist = [0usize; OTSU_BINS];
    for &v in values {
        hist[(((v - lo) * scale) as usize).min(OTSU_BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &n) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += n as f64;
        sum0 += k as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_k = k;
        }
    }
    lo + (best_k + 1) as f64 / scale
}

/// Per-pixel temporal intensity variance.
pub fn temporal_variance(seq: &ImageSequence) -> Image {
    let (w, h) = seq.dims();
    let n = seq.len() as f64;
    let mut mean = vec![0.0; w * h];
    for f in seq.frames() {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; w * h];
    for f in seq.frames() {
        for ((s, v), m) in var.iter_mut().zip(f.data()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Image::new(w, h, var).expect("dimensions match")
}

/// Largest 4-connected component of `mask` as its pixel list.
fn largest_component(mask: &[bool], w: usize, h: usize) -> Vec<usize> {
    let mut seen = vec![false; w * h];
    let mut best = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Locates the moving LV: Otsu-thresholded smoothed temporal variance,
/// largest 4-connected component, 64x64 box about its centroid.
pub fn localize_lv(seq: &ImageSequence) -> Result<RoiBox> {
    let (w, h) = seq.dims();
    if w < ROI_SIZE || h < ROI_SIZE {
        return Err(Error::invalid("frames must be at least 64x64"));
    }
    let var = temporal_variance(seq);
    if var.data().iter().copied().fold(0.0, f64::max) < MIN_VARIANCE {
        return Err(Error::NoMotionDetected);
    }
    let smooth = gaussian_smooth(&var, GaussianParams::new(VARIANCE_SMOOTHING))?;
    let t = otsu_threshold(smooth.data());
    let mask: Vec<bool> = smooth.data().iter().map(|&v| v > t).collect();
    let comp = largest_component(&mask, w, h);
    if comp.is_empty() {
        return Err(Error::NoMotionDetected);
    }
    let n = comp.len() as f64;
    let cx = comp.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
    let cy = comp.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
    RoiBox::centered(cx, cy, (w, h))
}

pub fn crop_sequence(seq: &ImageSequence, roi: RoiBox) -> Result<ImageSequence> {
    seq.crop(roi.x, roi.y, roi.w, roi.h)
}

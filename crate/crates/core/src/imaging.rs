//! Image, flow and mask containers plus the smoothing and resampling
//! primitives shared by every other module.
//!
//! All rasters are row-major `f64` with `(x, y)` addressing, `x` along the
//! width. Border handling is replicate (clamp-to-edge) throughout.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Flow components with magnitude above this are treated as "unknown",
/// following the Middlebury convention.
pub const UNKNOWN_FLOW_THRESHOLD: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::invalid("image data length does not match dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && value.is_finite());
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Replicate-border access.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[cy * self.width + cx]
    }

    /// Bilinear interpolation with replicate border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        self.sample_bilinear_grad(x, y).0
    }

    /// Bilinear interpolation returning the value and the partial derivatives
    /// of the interpolant in `x` and `y` (zero along a clamped axis).
    pub fn sample_bilinear_grad(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (x0, x1, fx, clamped_x) = bilinear_axis(x, self.width);
        let (y0, y1, fy, clamped_y) = bilinear_axis(y, self.height);
        let w = self.width;
        let a = self.data[y0 * w + x0];
        let b = self.data[y0 * w + x1];
        let c = self.data[y1 * w + x0];
        let d = self.data[y1 * w + x1];
        let top = a + fx * (b - a);
        let bottom = c + fx * (d - c);
        let value = top + fy * (bottom - top);
        let dx = if clamped_x { 0.0 } else { (b - a) + fy * ((d - c) - (b - a)) };
        let dy = if clamped_y { 0.0 } else { bottom - top };
        (value, dx, dy)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Copies the `w`x`h` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::invalid("crop window outside image"));
        }
        Ok(Image::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy)))
    }

    /// Rotates the raster 90 degrees counter-clockwise on screen:
    /// `out(y, W-1-x) = in(x, y)`.
    pub fn rotate90(&self) -> Image {
        let (w, h) = self.dims();
        Image::from_fn(h, w, |ox, oy| self.get(w - 1 - oy, ox))
    }
}

/// Returns `(i0, i1, frac, clamped)` for one interpolation axis.
#[inline]
fn bilinear_axis(t: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    if n == 1 {
        return (0, 0, 0.0, true);
    }
    if t <= 0.0 {
        return (0, 0, 0.0, t < 0.0);
    }
    if t >= max {
        return (n - 1, n - 1, 0.0, t > max);
    }
    let f = math::floor(t);
    let i0 = f as usize;
    // t < max guarantees i0 + 1 <= n - 1
    (i0, i0 + 1, t - f, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    frames: Vec<Image>,
    frame_period_ms: f64,
}

impl ImageSequence {
    pub const DEFAULT_FRAMES: usize = 25;

    pub fn new(frames: Vec<Image>, frame_period_ms: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid("a sequence needs at least two frames"));
        }
        if !(frame_period_ms.is_finite() && frame_period_ms > 0.0) {
            return Err(Error::invalid("frame period must be positive"));
        }
        let dims = frames[0].dims();
        if frames.iter().any(|f| f.dims() != dims) {
            return Err(Error::invalid("all frames must share dimensions"));
        }
        Ok(Self { frames, frame_period_ms })
    }

    #[inline]
    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    #[inline]
    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    /// Per-sequence min-max scaling to `[0, 1]`. A constant sequence is
    /// returned unchanged.
    pub fn normalized(&self) -> ImageSequence {
        let (lo, hi) = self
            .frames
            .iter()
            .map(Image::min_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| (a.min(c), b.max(d)));
        let range = hi - lo;
        if !(range > 1e-12) {
            return self.clone();
        }
        let frames = self.frames.iter().map(|f| f.map(|v| (v - lo) / range)).collect();
        ImageSequence { frames, frame_period_ms: self.frame_period_ms }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageSequence> {
        let frames = self.frames.iter().map(|f| f.crop(x, y, w, h)).collect::<Result<Vec<_>>>()?;
        Ok(ImageSequence { frames, frame_period_ms: self.frame_period_ms })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("flow dimensions must be positive"));
        }
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::invalid("flow component length does not match dimensions"));
        }
        if u.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(Error::invalid("flow contains non-finite values"));
        }
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, u: vec![u; width * height], v: vec![v; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self { width, height, u, v }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, w: (f64, f64)) {
        let i = y * self.width + x;
        self.u[i] = w.0;
        self.v[i] = w.1;
    }

    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> (f64, f64) {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    /// True when the pixel carries a known (finite, in-range) estimate.
    #[inline]
    pub fn is_known(&self, index: usize) -> bool {
        let (u, v) = (self.u[index], self.v[index]);
        u.abs() < UNKNOWN_FLOW_THRESHOLD && v.abs() < UNKNOWN_FLOW_THRESHOLD
    }

    /// Marks a pixel as carrying no estimate.
    pub fn mark_unknown(&mut self, x: usize, y: usize) {
        self.set(x, y, (1e10, 1e10));
    }

    /// Bilinear interpolation of both components with replicate border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, x1, fx, _) = bilinear_axis(x, self.width);
        let (y0, y1, fy, _) = bilinear_axis(y, self.height);
        let w = self.width;
        let lerp = |c: &[f64]| {
            let top = c[y0 * w + x0] + fx * (c[y0 * w + x1] - c[y0 * w + x0]);
            let bottom = c[y1 * w + x0] + fx * (c[y1 * w + x1] - c[y1 * w + x0]);
            top + fy * (bottom - top)
        };
        (lerp(&self.u), lerp(&self.v))
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<FlowField> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::invalid("crop window outside flow field"));
        }
        Ok(FlowField::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy)))
    }

    /// Rotates the field consistently with [`Image::rotate90`]: positions move
    /// as the image does and vectors `(u, v)` become `(v, -u)`.
    pub fn rotate90(&self) -> FlowField {
        let (w, h) = self.dims();
        FlowField::from_fn(h, w, |ox, oy| {
            let (u, v) = self.get(w - 1 - oy, ox);
            (v, -u)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::invalid("mask length does not match dimensions"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("mask labels must be 0 or 1"));
        }
        Ok(Self { width, height, labels })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y) as u8);
            }
        }
        Self { width, height, labels }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.labels[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.labels[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<PixelMask> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::invalid("crop window outside mask"));
        }
        Ok(PixelMask::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub sigma: f64,
}

impl GaussianParams {
    pub fn new(sigma: f64) -> Self {
        Self { sigma }
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid("sigma must be finite and non-negative"));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = math::ceil(3.0 * sigma) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let t = i as f64 / sigma;
            math::exp(-0.5 * t * t)
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(taps)
}

/// Separable Gaussian blur with replicate border. `sigma = 0` is the identity.
pub fn gaussian_smooth(img: &Image, params: GaussianParams) -> Result<Image> {
    let taps = gaussian_kernel(params.sigma)?;
    if taps.len() == 1 {
        return Ok(img.clone());
    }
    let r = (taps.len() / 2) as isize;
    let (w, h) = img.dims();
    let horizontal = Image::from_fn(w, h, |x, y| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * img.get_clamped(x as isize + k as isize - r, y as isize))
            .sum()
    });
    Ok(Image::from_fn(w, h, |x, y| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * horizontal.get_clamped(x as isize, y as isize + k as isize - r))
            .sum()
    }))
}

/// Pre-smoothing applied before 2x2 area averaging.
pub const DOWNSAMPLE_SIGMA: f64 = 0.8;

/// Halves resolution: output dims are `ceil(dim / 2)`, each output pixel is
/// the mean of its (possibly clipped) 2x2 block after Gaussian pre-smoothing.
pub fn downsample_half(img: &Image) -> Result<Image> {
    let (w, h) = img.dims();
    if w < 2 || h < 2 {
        return Err(Error::invalid("downsampling needs width and height of at least 2"));
    }
    let smooth = gaussian_smooth(img, GaussianParams::new(DOWNSAMPLE_SIGMA))?;
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    Ok(Image::from_fn(ow, oh, |ox, oy| {
        let (x0, y0) = (2 * ox, 2 * oy);
        let (x1, y1) = ((x0 + 2).min(w), (y0 + 2).min(h));
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += smooth.get(x, y);
            }
        }
        sum / ((x1 - x0) * (y1 - y0)) as f64
    }))
}

/// Horizontal derivative: central differences inside, one-sided at the border.
pub fn derivative_x(img: &Image) -> Image {
    let (w, h) = img.dims();
    Image::from_fn(w, h, |x, y| {
        if w == 1 {
            0.0
        } else if x == 0 {
            img.get(1, y) - img.get(0, y)
        } else if x == w - 1 {
            img.get(w - 1, y) - img.get(w - 2, y)
        } else {
            0.5 * (img.get(x + 1, y) - img.get(x - 1, y))
        }
    })
}

/// Vertical derivative: central differences inside, one-sided at the border.
pub fn derivative_y(img: &Image) -> Image {
    let (w, h) = img.dims();
    Image::from_fn(w, h, |x, y| {
        if h == 1 {
            0.0
        } else if y == 0 {
            img.get(x, 1) - img.get(x, 0)
        } else if y == h - 1 {
            img.get(x, h - 1) - img.get(x, h - 2)
        } else {
            0.5 * (img.get(x, y + 1) - img.get(x, y - 1))
        }
    })
}

//! Variational optical flow with brightness and gradient constancy, a robust
//! smoothness prior and a matching term pulling the flow toward
//! precomputed correspondences.
//!
//! The solver runs coarse to fine. At each pyramid level the target image is
//! warped once by the upsampled flow and the data term is linearized around
//! it (motion tensors). The robust penalizer is then handled by lazy
//! linearization: every outer iteration freezes the penalizer derivatives and
//! relaxes the resulting quadratic with SOR sweeps.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::imaging::{
    derivative_x, derivative_y, downsample_half, gaussian_smooth, FlowField, GaussianParams, Image, ImageSequence,
    PixelMask,
};
use crate::matching::{match_images, MatchSet, MatcherConfig};
use crate::math;
use crate::{Error, Result};

/// Smallest image side accepted at the coarsest pyramid level.
pub const MIN_LEVEL_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Smoothness weight.
    pub alpha: f64,
    /// Matching-term weight.
    pub beta: f64,
    /// Brightness-constancy weight.
    pub delta: f64,
    /// Gradient-constancy weight.
    pub gamma: f64,
    /// Gaussian pre-smoothing of both frames, in pixels.
    pub sigma: f64,
    /// Penalizer constant.
    pub epsilon: f64,
    /// Pyramid depth; `None` descends while the coarse level keeps a
    /// minimum side of 16.
    pub levels: Option<usize>,
    pub outer_iters: usize,
    pub solver_iters: usize,
    /// SOR relaxation factor.
    pub omega: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
            delta: 1.0,
            gamma: 0.7,
            sigma: 0.8,
            epsilon: 1e-3,
            levels: None,
            outer_iters: 5,
            solver_iters: 30,
            omega: 1.6,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.delta, self.gamma, self.sigma];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("flow weights must be finite and non-negative"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.outer_iters == 0 || self.solver_iters == 0 || self.levels == Some(0) {
            return Err(Error::invalid("iteration counts and levels must be at least 1"));
        }
        if !(self.omega > 1.0 && self.omega < 2.0) {
            return Err(Error::invalid("omega must lie in (1, 2)"));
        }
        Ok(())
    }

    /// Number of pyramid levels used for a `w x h` image.
    pub fn level_count(&self, w: usize, h: usize) -> Result<usize> {
        if w.min(h) < MIN_LEVEL_DIM {
            return Err(Error::invalid("images must be at least 16 pixels on each side"));
        }
        let mut dims = (w, h);
        match self.levels {
            Some(n) => {
                for _ in 1..n {
                    dims = (dims.0.div_ceil(2), dims.1.div_ceil(2));
                }
                if dims.0.min(dims.1) < MIN_LEVEL_DIM {
                    return Err(Error::invalid("too many pyramid levels for the image size"));
                }
                Ok(n)
            }
            None => {
                let mut n = 1;
                while dims.0.div_ceil(2).min(dims.1.div_ceil(2)) >= MIN_LEVEL_DIM {
                    dims = (dims.0.div_ceil(2), dims.1.div_ceil(2));
                    n += 1;
                }
                Ok(n)
            }
        }
    }
}

/// Robust penalizer `sqrt(s2 + eps^2)`.
pub fn penalize(s2: f64, epsilon: f64) -> Result<f64> {
    if !(s2 >= 0.0) {
        return Err(Error::invalid("penalizer argument must be non-negative"));
    }
    Ok(psi(s2, epsilon))
}

/// Derivative of [`penalize`] with respect to `s2`.
pub fn penalize_derivative(s2: f64, epsilon: f64) -> Result<f64> {
    if !(s2 >= 0.0) {
        return Err(Error::invalid("penalizer argument must be non-negative"));
    }
    Ok(psi_prime(s2, epsilon))
}

#[inline]
fn psi(s2: f64, eps: f64) -> f64 {
    math::sqrt(s2 + eps * eps)
}

#[inline]
fn psi_prime(s2: f64, eps: f64) -> f64 {
    0.5 / math::sqrt(s2 + eps * eps)
}

/// Upper triangle of a symmetric 3x3 matrix: `[a11, a12, a13, a22, a23, a33]`.
type Sym3 = [f64; 6];

#[inline]
fn outer(a: [f64; 3]) -> Sym3 {
    [a[0] * a[0], a[0] * a[1], a[0] * a[2], a[1] * a[1], a[1] * a[2], a[2] * a[2]]
}

#[inline]
fn add(a: Sym3, b: Sym3) -> Sym3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3], a[4] + b[4], a[5] + b[5]]
}

/// `(du, dv, 1)^T J (du, dv, 1)`
#[inline]
fn quad(j: &Sym3, du: f64, dv: f64) -> f64 {
    j[0] * du * du + 2.0 * j[1] * du * dv + 2.0 * j[2] * du + j[3] * dv * dv + 2.0 * j[4] * dv + j[5]
}

fn expand(j: &Sym3) -> [[f64; 3]; 3] {
    [[j[0], j[1], j[2]], [j[1], j[3], j[4]], [j[2], j[4], j[5]]]
}

/// Per-pixel brightness (`j0`) and gradient-constancy (`jxy`) tensors of a
/// frame pair linearized around a flow, plus whether the warped sample stayed
/// inside the target image.
#[derive(Debug, Clone)]
pub struct MotionTensor {
    width: usize,
    height: usize,
    j0: Vec<Sym3>,
    jxy: Vec<Sym3>,
    valid: Vec<bool>,
}

impl MotionTensor {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn brightness(&self, x: usize, y: usize) -> [[f64; 3]; 3] {
        expand(&self.j0[y * self.width + x])
    }

    pub fn gradient(&self, x: usize, y: usize) -> [[f64; 3]; 3] {
        expand(&self.jxy[y * self.width + x])
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Penalizer arguments `(w^T J0 w, w^T Jxy w)` for the increment
    /// `w = (du, dv, 1)`.
    pub fn data_arguments(&self, x: usize, y: usize, du: f64, dv: f64) -> (f64, f64) {
        let i = y * self.width + x;
        (quad(&self.j0[i], du, dv), quad(&self.jxy[i], du, dv))
    }
}

/// Derivative images of one frame.
struct Derivatives {
    img: Image,
    dx: Image,
    dy: Image,
    dxx: Image,
    dxy: Image,
    dyy: Image,
}

impl Derivatives {
    fn new(img: &Image) -> Self {
        let dx = derivative_x(img);
        let dy = derivative_y(img);
        let dxx = derivative_x(&dx);
        let dxy = derivative_y(&dx);
        let dyy = derivative_y(&dy);
        Self { img: img.clone(), dx, dy, dxx, dxy, dyy }
    }
}

#[inline]
fn inside(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

fn tensor_from(src: &Derivatives, dst: &Derivatives, w: &FlowField) -> MotionTensor {
    let (width, height) = src.img.dims();
    let n = width * height;
    let mut j0 = Vec::with_capacity(n);
    let mut jxy = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = w.get(x, y);
            let (tx, ty) = (x as f64 + u, y as f64 + v);
            valid.push(inside(tx, ty, width, height));
            let s = |img: &Image| img.get(x, y);
            let d = |img: &Image| img.sample_bilinear(tx, ty);
            let ix = 0.5 * (s(&src.dx) + d(&dst.dx));
            let iy = 0.5 * (s(&src.dy) + d(&dst.dy));
            let it = d(&dst.img) - s(&src.img);
            let ixx = 0.5 * (s(&src.dxx) + d(&dst.dxx));
            let ixy = 0.5 * (s(&src.dxy) + d(&dst.dxy));
            let iyy = 0.5 * (s(&src.dyy) + d(&dst.dyy));
            let ixt = d(&dst.dx) - s(&src.dx);
            let iyt = d(&dst.dy) - s(&src.dy);
            j0.push(outer([ix, iy, it]));
            jxy.push(add(outer([ixx, ixy, ixt]), outer([ixy, iyy, iyt])));
        }
    }
    MotionTensor { width, height, j0, jxy, valid }
}

/// Motion tensors of `(src, dst)` with `dst` warped by `w_current`.
/// Derivatives are central inside and one-sided at the border; no smoothing
/// is applied here.
pub fn build_motion_tensor(src: &Image, dst: &Image, w_current: &FlowField) -> Result<MotionTensor> {
    if src.dims() != dst.dims() || src.dims() != w_current.dims() {
        return Err(Error::invalid("image and flow dimensions differ"));
    }
    Ok(tensor_from(&Derivatives::new(src), &Derivatives::new(dst), w_current))
}

/// A match constraint on the pixel grid of one pyramid level.
#[derive(Debug, Clone, Copy)]
struct Anchor {
    index: usize,
    u: f64,
    v: f64,
    confidence: f64,
}

/// Projects matches to a level with scale `1 / 2^level`, keeping the most
/// confident match per coarse pixel.
fn project_matches(matches: &MatchSet, level: usize, w: usize, h: usize) -> Vec<Anchor> {
    let scale = (1u64 << level) as f64;
    let offset = (scale - 1.0) / 2.0;
    let mut best: Vec<Option<Anchor>> = vec![None; w * h];
    for m in &matches.entries {
        let cx = math::round((m.x as f64 - offset) / scale).clamp(0.0, (w - 1) as f64) as usize;
        let cy = math::round((m.y as f64 - offset) / scale).clamp(0.0, (h - 1) as f64) as usize;
        let (du, dv) = m.displacement();
        let index = cy * w + cx;
        let candidate = Anchor { index, u: du / scale, v: dv / scale, confidence: m.confidence };
        match &best[index] {
            Some(a) if a.confidence >= candidate.confidence => {}
            _ => best[index] = Some(candidate),
        }
    }
    best.into_iter().flatten().collect()
}

fn anchors_at_full_resolution(matches: &MatchSet, w: usize, h: usize) -> Vec<Anchor> {
    matches
        .entries
        .iter()
        .filter(|m| m.x < w && m.y < h)
        .map(|m| {
            let (u, v) = m.displacement();
            Anchor { index: m.y * w + m.x, u, v, confidence: m.confidence }
        })
        .collect()
}

/// Squared forward-difference gradient norm of the flow at every pixel,
/// zero difference past the last row/column.
fn smoothness_args(w: usize, h: usize, u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (mut s, mut t) = (0.0, 0.0);
            if x + 1 < w {
                s += math::sq(u[i + 1] - u[i]);
                t += math::sq(v[i + 1] - v[i]);
            }
            if y + 1 < h {
                s += math::sq(u[i + w] - u[i]);
                t += math::sq(v[i + w] - v[i]);
            }
            out[i] = s + t;
        }
    }
    out
}

/// Energy of the level problem: data terms linearized by `tensor` around the
/// warp `w0`, evaluated at `w0 + dw`.
struct LevelProblem<'a> {
    tensor: MotionTensor,
    w0: &'a FlowField,
    anchors: Vec<Anchor>,
    params: &'a FlowParams,
}

impl LevelProblem<'_> {
    fn energy(&self, du: &[f64], dv: &[f64]) -> f64 {
        let p = self.params;
        let eps = p.epsilon;
        let (w, h) = self.tensor.dims();
        let mut data = 0.0;
        for i in 0..w * h {
            if self.tensor.valid[i] {
                data += p.delta * psi(quad(&self.tensor.j0[i], du[i], dv[i]), eps);
                data += p.gamma * psi(quad(&self.tensor.jxy[i], du[i], dv[i]), eps);
            }
        }
        let (u, v) = self.full(du, dv);
        let smooth: f64 = smoothness_args(w, h, &u, &v).iter().map(|&s| psi(s, eps)).sum();
        let matching: f64 = self
            .anchors
            .iter()
            .map(|a| a.confidence * psi(math::sq(u[a.index] - a.u) + math::sq(v[a.index] - a.v), eps))
            .sum();
        data + p.alpha * smooth + p.beta * matching
    }

    fn full(&self, du: &[f64], dv: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u = self.w0.u().iter().zip(du).map(|(a, b)| a + b).collect();
        let v = self.w0.v().iter().zip(dv).map(|(a, b)| a + b).collect();
        (u, v)
    }

    /// One lazy-linearization step: freeze penalizer derivatives at the
    /// current increment, then relax the quadratic with SOR.
    fn outer_step(&self, du: &mut [f64], dv: &mut [f64]) {
        let p = self.params;
        let eps = p.epsilon;
        let (w, h) = self.tensor.dims();
        let n = w * h;

        // Data coefficients d11, d12, d22, d13, d23 per pixel.
        let mut coeff = vec![[0.0f64; 5]; n];
        for i in 0..n {
            if !self.tensor.valid[i] {
                continue;
            }
            let j0 = &self.tensor.j0[i];
            let jg = &self.tensor.jxy[i];
            let a = p.delta * psi_prime(quad(j0, du[i], dv[i]), eps);
            let b = p.gamma * psi_prime(quad(jg, du[i], dv[i]), eps);
            coeff[i] = [
                a * j0[0] + b * jg[0],
                a * j0[1] + b * jg[1],
                a * j0[3] + b * jg[3],
                a * j0[2] + b * jg[2],
                a * j0[4] + b * jg[4],
            ];
        }
        let (u, v) = self.full(du, dv);
        let smooth: Vec<f64> =
            smoothness_args(w, h, &u, &v).iter().map(|&s| p.alpha * psi_prime(s, eps)).collect();
        // Match weight and target increment per pixel.
        let mut mweight = vec![0.0; n];
        let mut mtarget = vec![(0.0, 0.0); n];
        for a in &self.anchors {
            let i = a.index;
            let r2 = math::sq(u[i] - a.u) + math::sq(v[i] - a.v);
            mweight[i] = p.beta * a.confidence * psi_prime(r2, eps);
            mtarget[i] = (a.u - self.w0.u()[i], a.v - self.w0.v()[i]);
        }

        let frozen = Frozen { w, h, u0: self.w0.u(), v0: self.w0.v(), coeff, smooth, mweight, mtarget };
        let mut sizes = vec![w.max(h)];
        let mut b = 1;
        while b * 2 < w.max(h) {
            b *= 2;
        }
        while b >= 2 {
            if b < w.max(h) {
                sizes.push(b);
            }
            b /= 2;
        }
        for _ in 0..p.solver_iters {
            frozen.sor_sweep(du, dv, p.omega);
            for &b in &sizes {
                frozen.block_pass(du, dv, b, 0);
                frozen.block_pass(du, dv, b, 1);
            }
        }
    }
}

/// The quadratic obtained by freezing the penalizer derivatives:
/// per-pixel data coefficients `[d11, d12, d22, d13, d23]`, forward-edge
/// smoothness weights and match weights/targets, all on the increment.
struct Frozen<'a> {
    w: usize,
    h: usize,
    u0: &'a [f64],
    v0: &'a [f64],
    coeff: Vec<[f64; 5]>,
    smooth: Vec<f64>,
    mweight: Vec<f64>,
    mtarget: Vec<(f64, f64)>,
}

impl Frozen<'_> {
    fn sor_sweep(&self, du: &mut [f64], dv: &mut [f64], omega: f64) {
        let (w, h) = (self.w, self.h);
        let (u0, v0) = (self.u0, self.v0);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut wsum = 0.0;
                let mut su = 0.0;
                let mut sv = 0.0;
                let mut edge = |j: usize, we: f64| {
                    wsum += we;
                    su += we * (u0[j] + du[j] - u0[i]);
                    sv += we * (v0[j] + dv[j] - v0[i]);
                };
                if x + 1 < w {
                    edge(i + 1, self.smooth[i]);
                }
                if y + 1 < h {
                    edge(i + w, self.smooth[i]);
                }
                if x > 0 {
                    edge(i - 1, self.smooth[i - 1]);
                }
                if y > 0 {
                    edge(i - w, self.smooth[i - w]);
                }
                let [d11, d12, d22, d13, d23] = self.coeff[i];
                let m = self.mweight[i];
                let (tu, tv) = self.mtarget[i];
                let auu = d11 + m + wsum;
                let avv = d22 + m + wsum;
                if auu > 0.0 {
                    let target = (-d13 + m * tu + su - d12 * dv[i]) / auu;
                    du[i] = (1.0 - omega) * du[i] + omega * target;
                }
                if avv > 0.0 {
                    let target = (-d23 + m * tv + sv - d12 * du[i]) / avv;
                    dv[i] = (1.0 - omega) * dv[i] + omega * target;
                }
            }
        }
    }

    /// Exact minimization over a constant shift of every `b x b` block of one
    /// checkerboard color. Blocks of one color share no smoothness edge, so
    /// they are solved independently.
    fn block_pass(&self, du: &mut [f64], dv: &mut [f64], b: usize, color: usize) {
        let (w, h) = (self.w, self.h);
        let nbx = w.div_ceil(b);
        let nby = h.div_ceil(b);
        let mut acc = vec![[0.0f64; 5]; nbx * nby];
        let mut any = false;
        for y in 0..h {
            let by = y / b;
            for x in 0..w {
                let bx = x / b;
                if (bx + by) % 2 != color {
                    continue;
                }
                any = true;
                let i = y * w + x;
                let a = &mut acc[by * nbx + bx];
                let [d11, d12, d22, d13, d23] = self.coeff[i];
                let m = self.mweight[i];
                let (tu, tv) = self.mtarget[i];
                a[0] += d11 + m;
                a[1] += d12;
                a[2] += d22 + m;
                a[3] += d11 * du[i] + d12 * dv[i] + d13 + m * (du[i] - tu);
                a[4] += d12 * du[i] + d22 * dv[i] + d23 + m * (dv[i] - tv);
                let ui = self.u0[i] + du[i];
                let vi = self.v0[i] + dv[i];
                let mut edge = |j: usize, we: f64| {
                    a[0] += we;
                    a[2] += we;
                    a[3] += we * (ui - self.u0[j] - du[j]);
                    a[4] += we * (vi - self.v0[j] - dv[j]);
                };
                if x + 1 < w && (x + 1) / b != bx {
                    edge(i + 1, self.smooth[i]);
                }
                if x > 0 && (x - 1) / b != bx {
                    edge(i - 1, self.smooth[i - 1]);
                }
                if y + 1 < h && (y + 1) / b != by {
                    edge(i + w, self.smooth[i]);
                }
                if y > 0 && (y - 1) / b != by {
                    edge(i - w, self.smooth[i - w]);
                }
            }
        }
        if !any {
            return;
        }
        let shifts: Vec<(f64, f64)> = acc
            .iter()
            .map(|a| {
                let det = a[0] * a[2] - a[1] * a[1];
                if a[0] > 0.0 && det > 1e-12 * a[0] * a[2] {
                    (-(a[2] * a[3] - a[1] * a[4]) / det, -(a[0] * a[4] - a[1] * a[3]) / det)
                } else {
                    (0.0, 0.0)
                }
            })
            .collect();
        for y in 0..h {
            let by = y / b;
            for x in 0..w {
                let bx = x / b;
                if (bx + by) % 2 == color {
                    let (cu, cv) = shifts[by * nbx + bx];
                    du[y * w + x] += cu;
                    dv[y * w + x] += cv;
                }
            }
        }
    }
}

/// Result of [`compute_flow_traced`]: the flow plus the level energy recorded
/// before the first and after every outer iteration, coarsest level first.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub flow: FlowField,
    pub level_energies: Vec<Vec<f64>>,
}

impl FlowSolution {
    /// Energy trace of the finest level.
    pub fn finest_energies(&self) -> &[f64] {
        self.level_energies.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Upsamples a coarse flow onto a `w x h` grid (factor-2 geometry) and
/// doubles the vectors.
fn upsample_flow(flow: &FlowField, w: usize, h: usize) -> FlowField {
    FlowField::from_fn(w, h, |x, y| {
        let cx = (x as f64 - 0.5) / 2.0;
        let cy = (y as f64 - 0.5) / 2.0;
        let (u, v) = flow.sample_bilinear(cx, cy);
        (2.0 * u, 2.0 * v)
    })
}

/// Coarse-to-fine minimization of the flow energy.
pub fn compute_flow(src: &Image, dst: &Image, matches: &MatchSet, params: &FlowParams) -> Result<FlowField> {
    compute_flow_traced(src, dst, matches, params).map(|s| s.flow)
}

pub fn compute_flow_traced(
    src: &Image,
    dst: &Image,
    matches: &MatchSet,
    params: &FlowParams,
) -> Result<FlowSolution> {
    params.validate()?;
    if src.dims() != dst.dims() {
        return Err(Error::invalid("source and target dimensions differ"));
    }
    let (w, h) = src.dims();
    let levels = params.level_count(w, h)?;

    let mut pyramid = vec![(src.clone(), dst.clone())];
    for _ in 1..levels {
        let (a, b) = pyramid.last().expect("non-empty");
        let next = (downsample_half(a)?, downsample_half(b)?);
        pyramid.push(next);
    }

    let smoothing = GaussianParams::new(params.sigma);
    let mut flow: Option<FlowField> = None;
    let mut level_energies = Vec::with_capacity(levels);
    for level in (0..levels).rev() {
        let (a, b) = &pyramid[level];
        let (lw, lh) = a.dims();
        let w0 = match flow.take() {
            Some(coarse) => upsample_flow(&coarse, lw, lh),
            None => FlowField::zeros(lw, lh),
        };
        let sa = Derivatives::new(&gaussian_smooth(a, smoothing)?);
        let sb = Derivatives::new(&gaussian_smooth(b, smoothing)?);
        let anchors = if params.beta > 0.0 { project_matches(matches, level, lw, lh) } else { Vec::new() };
        let problem = LevelProblem { tensor: tensor_from(&sa, &sb, &w0), w0: &w0, anchors, params };

        let mut du = vec![0.0; lw * lh];
        let mut dv = vec![0.0; lw * lh];
        let mut trace = Vec::with_capacity(params.outer_iters + 1);
        trace.push(problem.energy(&du, &dv));
        for _ in 0..params.outer_iters {
            problem.outer_step(&mut du, &mut dv);
            let e = problem.energy(&du, &dv);
            if !e.is_finite() || du.iter().chain(&dv).any(|c| !c.is_finite()) {
                return Err(Error::diverged("non-finite flow or energy"));
            }
            trace.push(e);
        }
        let (u, v) = problem.full(&du, &dv);
        level_energies.push(trace);
        flow = Some(FlowField::new(lw, lh, u, v).map_err(|_| Error::diverged("non-finite flow"))?);
    }
    Ok(FlowSolution { flow: flow.expect("at least one level"), level_energies })
}

/// Per-pixel terms of the (non-linearized) energy on pre-smoothed images.
struct EnergyTerms {
    src: Derivatives,
    dst: Derivatives,
}

impl EnergyTerms {
    fn new(src: &Image, dst: &Image, params: &FlowParams) -> Result<Self> {
        let g = GaussianParams::new(params.sigma);
        Ok(Self {
            src: Derivatives::new(&gaussian_smooth(src, g)?),
            dst: Derivatives::new(&gaussian_smooth(dst, g)?),
        })
    }
}

fn check_energy_inputs(src: &Image, dst: &Image, w: &FlowField, params: &FlowParams) -> Result<()> {
    params.validate()?;
    if src.dims() != dst.dims() || src.dims() != w.dims() {
        return Err(Error::invalid("image and flow dimensions differ"));
    }
    Ok(())
}

/// Total energy of `w`: brightness and gradient constancy of the warped
/// pre-smoothed target, robust smoothness with forward differences and the
/// confidence-weighted matching term. Pixels warped outside the target
/// contribute no data term.
pub fn energy(src: &Image, dst: &Image, w: &FlowField, matches: &MatchSet, params: &FlowParams) -> Result<f64> {
    check_energy_inputs(src, dst, w, params)?;
    let t = EnergyTerms::new(src, dst, params)?;
    let (width, height) = src.dims();
    let eps = params.epsilon;
    let mut data = 0.0;
    for y in 0..height {
        for x in 0..width {
            let (u, v) = w.get(x, y);
            let (tx, ty) = (x as f64 + u, y as f64 + v);
            if !inside(tx, ty, width, height) {
                continue;
            }
            let r0 = t.dst.img.sample_bilinear(tx, ty) - t.src.img.get(x, y);
            let rx = t.dst.dx.sample_bilinear(tx, ty) - t.src.dx.get(x, y);
            let ry = t.dst.dy.sample_bilinear(tx, ty) - t.src.dy.get(x, y);
            data += params.delta * psi(r0 * r0, eps) + params.gamma * psi(rx * rx + ry * ry, eps);
        }
    }
    let smooth: f64 = smoothness_args(width, height, w.u(), w.v()).iter().map(|&s| psi(s, eps)).sum();
    let matching: f64 = anchors_at_full_resolution(matches, width, height)
        .iter()
        .map(|a| a.confidence * psi(math::sq(w.u()[a.index] - a.u) + math::sq(w.v()[a.index] - a.v), eps))
        .sum();
    Ok(data + params.alpha * smooth + params.beta * matching)
}

/// Analytic gradient of [`energy`] with respect to `(u, v)` at every pixel.
pub fn energy_gradient(
    src: &Image,
    dst: &Image,
    w: &FlowField,
    matches: &MatchSet,
    params: &FlowParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_energy_inputs(src, dst, w, params)?;
    let t = EnergyTerms::new(src, dst, params)?;
    let (width, height) = src.dims();
    let n = width * height;
    let eps = params.epsilon;
    let mut gu = vec![0.0; n];
    let mut gv = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let (u, v) = w.get(x, y);
            let (tx, ty) = (x as f64 + u, y as f64 + v);
            if !inside(tx, ty, width, height) {
                continue;
            }
            let (i2, i2x, i2y) = t.dst.img.sample_bilinear_grad(tx, ty);
            let (gx, gxx, gxy) = t.dst.dx.sample_bilinear_grad(tx, ty);
            let (gy, gyx, gyy) = t.dst.dy.sample_bilinear_grad(tx, ty);
            let r0 = i2 - t.src.img.get(x, y);
            let rx = gx - t.src.dx.get(x, y);
            let ry = gy - t.src.dy.get(x, y);
            let a = params.delta * psi_prime(r0 * r0, eps) * 2.0;
            let b = params.gamma * psi_prime(rx * rx + ry * ry, eps) * 2.0;
            gu[i] += a * r0 * i2x + b * (rx * gxx + ry * gyx);
            gv[i] += a * r0 * i2y + b * (rx * gxy + ry * gyy);
        }
    }
    let (u, v) = (w.u(), w.v());
    let s = smoothness_args(width, height, u, v);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let k = 2.0 * params.alpha * psi_prime(s[i], eps);
            if x + 1 < width {
                let (du, dv) = (u[i + 1] - u[i], v[i + 1] - v[i]);
                gu[i] -= k * du;
                gu[i + 1] += k * du;
                gv[i] -= k * dv;
                gv[i + 1] += k * dv;
            }
            if y + 1 < height {
                let (du, dv) = (u[i + width] - u[i], v[i + width] - v[i]);
                gu[i] -= k * du;
                gu[i + width] += k * du;
                gv[i] -= k * dv;
                gv[i + width] += k * dv;
            }
        }
    }
    for a in anchors_at_full_resolution(matches, width, height) {
        let i = a.index;
        let (ru, rv) = (u[i] - a.u, v[i] - a.v);
        let k = 2.0 * params.beta * a.confidence * psi_prime(ru * ru + rv * rv, eps);
        gu[i] += k * ru;
        gv[i] += k * rv;
    }
    Ok((gu, gv))
}

/// Flows between consecutive frames; `flows[j]` maps frame `j` to `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    flows: Vec<FlowField>,
}

impl FlowSequence {
    pub fn new(flows: Vec<FlowField>) -> Result<Self> {
        if flows.is_empty() {
            return Err(Error::invalid("flow sequence must not be empty"));
        }
        let dims = flows[0].dims();
        if flows.iter().any(|f| f.dims() != dims) {
            return Err(Error::invalid("all flows must share dimensions"));
        }
        Ok(Self { flows })
    }

    pub fn flows(&self) -> &[FlowField] {
        &self.flows
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.flows[0].dims()
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<FlowSequence> {
        let flows = self.flows.iter().map(|f| f.crop(x, y, w, h)).collect::<Result<Vec<_>>>()?;
        Ok(FlowSequence { flows })
    }
}

/// Matches and flow for every consecutive frame pair.
pub fn flow_sequence(seq: &ImageSequence, params: &FlowParams, matcher: &MatcherConfig) -> Result<FlowSequence> {
    let frames = seq.frames();
    let mut flows = Vec::with_capacity(frames.len() - 1);
    for (j, pair) in frames.windows(2).enumerate() {
        let at = |e: Error| Error::AtFrame { frame: j, source: Box::new(e) };
        let matches = if params.beta > 0.0 { match_images(&pair[0], &pair[1], matcher).map_err(at)? } else { MatchSet::empty() };
        flows.push(compute_flow(&pair[0], &pair[1], &matches, params).map_err(at)?);
    }
    FlowSequence::new(flows)
}

/// Mean and standard deviation of the angular error, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularError {
    pub mean: f64,
    pub std: f64,
    pub pixels: usize,
}

impl fmt::Display for AngularError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}°±{:.1}°", self.mean, self.std)
    }
}

/// Angle between `(u, v, 1)` vectors, in radians, via `atan2(|a x b|, a . b)`
/// so identical vectors give exactly zero.
pub fn angular_error(est: (f64, f64), gt: (f64, f64)) -> f64 {
    let a = [est.0, est.1, 1.0];
    let b = [gt.0, gt.1, 1.0];
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let norm = math::sqrt(cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]);
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    math::atan2(norm, dot)
}

/// Average angular error over known pixels (optionally restricted to `mask`).
/// With no pixels to evaluate the mean and std are NaN.
pub fn average_angular_error(est: &FlowField, gt: &FlowField, mask: Option<&PixelMask>) -> Result<AngularError> {
    if est.dims() != gt.dims() || mask.is_some_and(|m| m.dims() != est.dims()) {
        return Err(Error::invalid("flow and mask dimensions differ"));
    }
    let mut angles = Vec::new();
    for i in 0..est.u().len() {
        if mask.is_some_and(|m| m.labels()[i] == 0) || !est.is_known(i) || !gt.is_known(i) {
            continue;
        }
        angles.push(angular_error((est.u()[i], est.v()[i]), (gt.u()[i], gt.v()[i])).to_degrees());
    }
    Ok(angle_stats(&angles))
}

/// Mean and population standard deviation of angles already in degrees.
pub fn angle_stats(angles: &[f64]) -> AngularError {
    if angles.is_empty() {
        return AngularError { mean: f64::NAN, std: f64::NAN, pixels: 0 };
    }
    let n = angles.len() as f64;
    let mean = angles.iter().sum::<f64>() / n;
    let var = angles.iter().map(|a| math::sq(a - mean)).sum::<f64>() / n;
    AngularError { mean, std: math::sqrt(var), pixels: angles.len() }
}

/// Fraction of pixels carrying a known flow estimate.
pub fn flow_density(est: &FlowField) -> f64 {
    let n = est.u().len();
    (0..n).filter(|&i| est.is_known(i)).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use alloc::format;

    fn texture(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Image::from_fn(w, h, |_, _| rng.random::<f64>());
        gaussian_smooth(&raw, GaussianParams::new(1.0)).unwrap()
    }

    fn shifted(img: &Image, sx: isize, sy: isize) -> Image {
        Image::from_fn(img.width(), img.height(), |x, y| img.get_clamped(x as isize - sx, y as isize - sy))
    }

    #[test]
    fn penalizer_closed_forms() {
        assert!((penalize(0.0, 1e-3).unwrap() - 1e-3).abs() < 1e-18);
        assert!((penalize(1.0, 1e-3).unwrap() - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!(matches!(penalize(-1.0, 1e-3), Err(Error::InvalidParameter(_))));
        for s2 in [0.01, 1.0, 100.0] {
            let h = 1e-6 * s2;
            let fd = (penalize(s2 + h, 1e-3).unwrap() - penalize(s2 - h, 1e-3).unwrap()) / (2.0 * h);
            let an = penalize_derivative(s2, 1e-3).unwrap();
            assert!(((fd - an) / an).abs() < 1e-6);
        }
    }

    #[test]
    fn tensor_identical_frames_and_symmetry() {
        let img = texture(12, 10, 1);
        let t = build_motion_tensor(&img, &img, &FlowField::zeros(12, 10)).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                let (q0, qg) = t.data_arguments(x, y, 0.0, 0.0);
                assert_eq!(q0, 0.0);
                assert_eq!(qg, 0.0);
                let j = t.brightness(x, y);
                let g = t.gradient(x, y);
                for a in 0..3 {
                    for b in 0..3 {
                        assert_eq!(j[a][b], j[b][a]);
                        assert_eq!(g[a][b], g[b][a]);
                    }
                }
            }
        }
        assert!(build_motion_tensor(&img, &texture(10, 10, 1), &FlowField::zeros(12, 10)).is_err());
    }

    #[test]
    fn ramp_shift_is_explained_by_unit_flow() {
        let src = Image::from_fn(8, 8, |x, y| 0.05 * x as f64 + 0.02 * y as f64);
        let dst = Image::from_fn(8, 8, |x, y| 0.05 * (x as f64 - 1.0) + 0.02 * y as f64);
        let t = build_motion_tensor(&src, &dst, &FlowField::zeros(8, 8)).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                let (q0, qg) = t.data_arguments(x, y, 1.0, 0.0);
                assert!(q0 <= 1e-6 && qg <= 1e-6, "({x},{y}) {q0} {qg}");
            }
        }
    }

    #[test]
    fn energy_of_identical_frames() {
        let img = texture(16, 16, 3);
        let p = FlowParams::default();
        let e0 = energy(&img, &img, &FlowField::zeros(16, 16), &MatchSet::empty(), &p).unwrap();
        let expected = 256.0 * (p.delta + p.gamma + p.alpha) * p.epsilon;
        assert!((e0 - expected).abs() < 1e-12);
        let e1 = energy(&img, &img, &FlowField::constant(16, 16, 1.0, 0.0), &MatchSet::empty(), &p).unwrap();
        assert!(e1 > e0);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = texture(16, 16, 5);
        let dst = texture(16, 16, 6);
        let flow = FlowField::from_fn(16, 16, |_, _| (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)));
        let matches = MatchSet {
            entries: vec![crate::matching::Match { x: 5, y: 6, x2: 6, y2: 6, confidence: 0.8 }],
        };
        let p = FlowParams::default();
        let (gu, gv) = energy_gradient(&src, &dst, &flow, &matches, &p).unwrap();
        for _ in 0..20 {
            let x = rng.random_range(2..14);
            let y = rng.random_range(2..14);
            for comp in 0..2 {
                let h = 1e-6;
                let bump = |d: f64| {
                    let mut f = flow.clone();
                    let (u, v) = f.get(x, y);
                    f.set(x, y, if comp == 0 { (u + d, v) } else { (u, v + d) });
                    energy(&src, &dst, &f, &matches, &p).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = if comp == 0 { gu[y * 16 + x] } else { gv[y * 16 + x] };
                let rel = (fd - an).abs() / an.abs().max(1e-3);
                assert!(rel < 1e-4, "pixel ({x},{y}) comp {comp}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = texture(32, 32, 8);
        let flow = compute_flow(&img, &img, &MatchSet::empty(), &FlowParams::default()).unwrap();
        assert!(flow.u().iter().chain(flow.v()).all(|c| c.abs() < 1e-3));
    }

    #[test]
    fn unit_shift_is_recovered() {
        let src = texture(48, 48, 9);
        let dst = shifted(&src, 1, 0);
        let cfg = MatcherConfig::default();
        let matches = match_images(&src, &dst, &cfg).unwrap();
        let flow = compute_flow(&src, &dst, &matches, &FlowParams::default()).unwrap();
        let mut epe = 0.0;
        let mut n = 0.0;
        for y in 4..44 {
            for x in 4..44 {
                let (u, v) = flow.get(x, y);
                epe += ((u - 1.0).powi(2) + v * v).sqrt();
                n += 1.0;
            }
        }
        assert!(epe / n < 0.2, "mean EPE {}", epe / n);
    }

    #[test]
    fn energy_descends_on_finest_level() {
        let src = texture(32, 32, 12);
        let dst = shifted(&texture(32, 32, 12), 1, 1);
        let sol = compute_flow_traced(&src, &dst, &MatchSet::empty(), &FlowParams::default()).unwrap();
        for trace in &sol.level_energies {
            for pair in trace.windows(2) {
                assert!(pair[1] <= pair[0] * (1.0 + 1e-8));
            }
        }
    }

    #[test]
    fn beta_zero_ignores_matches() {
        let src = texture(32, 32, 13);
        let dst = shifted(&src, 1, 0);
        let p = FlowParams { beta: 0.0, ..Default::default() };
        let m = match_images(&src, &dst, &MatcherConfig::default()).unwrap();
        let a = compute_flow(&src, &dst, &m, &p).unwrap();
        let b = compute_flow(&src, &dst, &MatchSet::empty(), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_images_rejected() {
        let img = texture(12, 20, 1);
        assert!(matches!(
            compute_flow(&img, &img, &MatchSet::empty(), &FlowParams::default()),
            Err(Error::InvalidParameter(_))
        ));
        assert_eq!(FlowParams::default().level_count(64, 64).unwrap(), 3);
        assert_eq!(FlowParams::default().level_count(16, 40).unwrap(), 1);
    }

    #[test]
    fn angular_error_cases() {
        let gt = FlowField::from_fn(4, 4, |x, y| (x as f64 * 0.3, -(y as f64)));
        let same = average_angular_error(&gt, &gt, None).unwrap();
        assert_eq!(same.mean, 0.0);
        assert_eq!(same.std, 0.0);
        let a = FlowField::constant(3, 3, 1.0, 0.0);
        let b = FlowField::constant(3, 3, 0.0, 1.0);
        let e = average_angular_error(&a, &b, None).unwrap();
        assert!((e.mean - 60.0).abs() < 1e-9);
        assert_eq!(format!("{}", AngularError { mean: 5.72, std: 2.31, pixels: 1 }), "5.7°±2.3°");
        let r = average_angular_error(&b, &a, None).unwrap();
        assert!((r.mean - e.mean).abs() < 1e-12);
    }

    #[test]
    fn density_counts_known_pixels() {
        let mut f = FlowField::zeros(4, 4);
        assert_eq!(flow_density(&f), 1.0);
        for x in 0..4 {
            f.mark_unknown(x, 0);
        }
        assert_eq!(flow_density(&f), 0.75);
    }
}

//! Per-pixel motion features: window patch sequences (the LSTM input),
//! flow trajectories and the 3x3 displacement/orientation global feature.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::imaging::{Image, ImageSequence};
use crate::math;
use crate::neural::LstmStack;
use crate::varflow::FlowSequence;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 11;

/// Pixels per inference batch through the LSTM.
const LSTM_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum FeatureMode {
    #[serde(rename = "local")]
    LocalOnly,
    #[serde(rename = "global")]
    GlobalOnly,
    #[default]
    #[serde(rename = "combined")]
    Combined,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::LocalOnly, FeatureMode::GlobalOnly, FeatureMode::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::LocalOnly => "local",
            FeatureMode::GlobalOnly => "global",
            FeatureMode::Combined => "combined",
        }
    }

    pub fn uses_local(self) -> bool {
        self != FeatureMode::GlobalOnly
    }

    pub fn uses_global(self) -> bool {
        self != FeatureMode::LocalOnly
    }

    /// Length of the assembled feature.
    pub fn feature_dim(self, hidden: usize, frames: usize) -> usize {
        let mut n = 0;
        if self.uses_local() {
            n += hidden;
        }
        if self.uses_global() {
            n += global_dim(frames);
        }
        n
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" | "local_only" => Ok(FeatureMode::LocalOnly),
            "global" | "global_only" => Ok(FeatureMode::GlobalOnly),
            "combined" => Ok(FeatureMode::Combined),
            _ => Err(Error::invalid("feature mode must be local, global or combined")),
        }
    }
}

pub fn global_dim(frames: usize) -> usize {
    18 * frames.saturating_sub(1)
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid("window must be odd and at least 3"));
    }
    Ok(())
}

fn check_pixel(p: (usize, usize), dims: (usize, usize)) -> Result<()> {
    if p.0 >= dims.0 || p.1 >= dims.1 {
        return Err(Error::invalid("pixel outside the image"));
    }
    Ok(())
}

fn patch_into(frame: &Image, p: (usize, usize), window: usize, out: &mut [f64]) {
    let r = (window / 2) as isize;
    let (px, py) = (p.0 as isize, p.1 as isize);
    let mut k = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            out[k] = frame.get_clamped(px + dx, py + dy);
            k += 1;
        }
    }
}

/// Window patches of every frame around `p`, row-major, concatenated in
/// temporal order (replicate padding at the borders).
pub fn local_feature(seq: &ImageSequence, p: (usize, usize), window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    check_pixel(p, seq.dims())?;
    let n = window * window;
    let mut out = vec![0.0; n * seq.len()];
    for (frame, chunk) in seq.frames().iter().zip(out.chunks_exact_mut(n)) {
        patch_into(frame, p, window, chunk);
    }
    Ok(out)
}

/// Time-major batch of patch sequences (`frames * pixels` rows of `window^2`).
pub fn patch_batch(seq: &ImageSequence, pixels: &[(usize, usize)], window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    for &p in pixels {
        check_pixel(p, seq.dims())?;
    }
    let n = window * window;
    let b = pixels.len();
    let mut out = vec![0.0; seq.len() * b * n];
    for (t, frame) in seq.frames().iter().enumerate() {
        for (r, &p) in pixels.iter().enumerate() {
            patch_into(frame, p, window, &mut out[(t * b + r) * n..(t * b + r + 1) * n]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<(f64, f64)>,
}

/// Follows `p` through the flow fields with bilinear interpolation; one
/// position per frame, clamped to the image.
pub fn trace(p: (usize, usize), flows: &FlowSequence) -> Result<Trajectory> {
    let (w, h) = flows.dims();
    check_pixel(p, (w, h))?;
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let mut q = (p.0 as f64, p.1 as f64);
    let mut positions = Vec::with_capacity(flows.len() + 1);
    positions.push(q);
    for f in flows.flows() {
        let (u, v) = f.sample_bilinear(q.0, q.1);
        q = ((q.0 + u).clamp(0.0, xmax), (q.1 + v).clamp(0.0, ymax));
        positions.push(q);
    }
    Ok(Trajectory { positions })
}

/// `atan2(v, u)` mapped to `(-pi, pi]`, zero for the zero vector.
pub fn orientation(u: f64, v: f64) -> f64 {
    if u == 0.0 && v == 0.0 {
        return 0.0;
    }
    let a = math::atan2(v, u);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Per frame pair: 9 magnitudes then 9 orientations of the flow in the 3x3
/// neighbourhood of the rounded trajectory position.
pub fn global_feature(flows: &FlowSequence, p: (usize, usize)) -> Result<Vec<f64>> {
    let traj = trace(p, flows)?;
    let mut out = Vec::with_capacity(18 * flows.len());
    for (f, q) in flows.flows().iter().zip(&traj.positions) {
        let (cx, cy) = (math::round(q.0) as isize, math::round(q.1) as isize);
        let mut orient = [0.0; 9];
        let mut k = 0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (u, v) = f.get_clamped(cx + dx, cy + dy);
                out.push(math::sqrt(u * u + v * v));
                orient[k] = orientation(u, v);
                k += 1;
            }
        }
        out.extend_from_slice(&orient);
    }
    Ok(out)
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fits on a row-major matrix; near-constant dimensions keep unit scale.
    pub fn fit(data: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid("feature matrix does not match its dimension"));
        }
        let rows = (data.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows;
        }
        let mut var = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| math::sqrt(s / rows)).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply_rows(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(self.dim()) {
            self.apply(row);
        }
    }
}

/// Assembled features `[lstm h_T || global]` (or one part, per `mode`) for a
/// list of pixels, row-major.
pub fn assemble_batch(
    seq: &ImageSequence,
    flows: &FlowSequence,
    pixels: &[(usize, usize)],
    lstm: &LstmStack,
    window: usize,
    mode: FeatureMode,
    stats: Option<&NormStats>,
) -> Result<Vec<f64>> {
    check_window(window)?;
    if mode.uses_local() && lstm.input_dim() != window * window {
        return Err(Error::invalid("LSTM input dimension does not match the window size"));
    }
    if flows.len() + 1 != seq.len() || flows.dims() != seq.dims() {
        return Err(Error::invalid("flow sequence does not match the image sequence"));
    }
    let dim = mode.feature_dim(lstm.hidden_dim(), seq.len());
    if stats.is_some_and(|s| s.dim() != dim) {
        return Err(Error::invalid("normalization statistics do not match the feature size"));
    }
    let hidden = lstm.hidden_dim();
    let mut out = vec![0.0; pixels.len() * dim];
    for (chunk_idx, chunk) in pixels.chunks(LSTM_BATCH).enumerate() {
        let base = chunk_idx * LSTM_BATCH;
        if mode.uses_local() {
            let x = patch_batch(seq, chunk, window)?;
            let h = lstm.final_hidden(&x, seq.len(), chunk.len())?;
            for (r, hr) in h.chunks_exact(hidden).enumerate() {
                out[(base + r) * dim..(base + r) * dim + hidden].copy_from_slice(hr);
            }
        }
        if mode.uses_global() {
            let offset = if mode.uses_local() { hidden } else { 0 };
            for (r, &p) in chunk.iter().enumerate() {
                let g = global_feature(flows, p)?;
                out[(base + r) * dim + offset..(base + r + 1) * dim].copy_from_slice(&g);
            }
        }
    }
    if let Some(s) = stats {
        s.apply_rows(&mut out);
    }
    Ok(out)
}

/// Single-pixel form of [`assemble_batch`].
pub fn assemble(
    seq: &ImageSequence,
    flows: &FlowSequence,
    p: (usize, usize),
    lstm: &LstmStack,
    window: usize,
    mode: FeatureMode,
    stats: Option<&NormStats>,
) -> Result<Vec<f64>> {
    assemble_batch(seq, flows, &[p], lstm, window, mode, stats)
}

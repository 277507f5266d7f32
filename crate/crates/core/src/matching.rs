//! Quasi-dense matching from a pyramid of patch-correlation maps.
//!
//! The bottom level scores small `N x N` patches of the source image, placed
//! on a stride-`N/2` anchor grid, against every displacement in a search
//! window of the target image. Each higher level doubles the patch size: the
//! four quadrant children of a parent patch are max-pooled over a 3x3
//! displacement neighbourhood, subsampled by two, averaged and rectified.
//! Matches are recovered by descending from the coarsest level, refining
//! each anchor's displacement inside the pooling window of its parent.
//!
//! Displacement grids are stored relative to the anchor: index `c` on an axis
//! means an offset of `(c - radius) * step` pixels.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::imaging::Image;
use crate::math;
use crate::{Error, Result};

/// Patch variance below which a patch is treated as constant.
const MIN_PATCH_ENERGY: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Bottom-level patch size `N`; must be even and at least 2.
    pub patch_size: usize,
    /// Search radius in pixels; `None` uses half the smaller image dimension.
    pub search_radius: Option<usize>,
    /// Rectification exponent applied after each aggregation.
    pub nu: f64,
    /// Minimum score a match must reach to be kept.
    pub threshold: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { patch_size: 4, search_radius: None, nu: 1.4, threshold: 0.5 }
    }
}

impl MatcherConfig {
    fn validate(&self) -> Result<()> {
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            return Err(Error::invalid("patch size must be even and at least 2"));
        }
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::invalid("rectification exponent must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("match threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Normalized cross-correlation of two equally sized patches remapped from
/// `[-1, 1]` to `[0, 1]`. Zero-variance patches score 0.
pub fn patch_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("patches must be non-empty and equally sized"));
    }
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        ab += dx * dy;
        aa += dx * dx;
        bb += dy * dy;
    }
    if aa <= MIN_PATCH_ENERGY || bb <= MIN_PATCH_ENERGY {
        return Ok(0.0);
    }
    let ncc = (ab / (math::sqrt(aa) * math::sqrt(bb))).clamp(-1.0, 1.0);
    Ok(0.5 * (ncc + 1.0))
}

/// Mean-removed, unit-norm patch descriptors for every pixel; `None` where
/// the patch has no variance. Patches are replicate-padded at the border.
fn patch_descriptors(img: &Image, n: usize) -> Vec<Option<Vec<f64>>> {
    let (w, h) = img.dims();
    let half = (n / 2) as isize;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut patch = Vec::with_capacity(n * n);
            for dy in -half..n as isize - half {
                for dx in -half..n as isize - half {
                    patch.push(img.get_clamped(x + dx, y + dy));
                }
            }
            let mean = patch.iter().sum::<f64>() / patch.len() as f64;
            patch.iter_mut().for_each(|v| *v -= mean);
            let energy: f64 = patch.iter().map(|v| v * v).sum();
            if energy <= MIN_PATCH_ENERGY {
                out.push(None);
            } else {
                let inv = 1.0 / math::sqrt(energy);
                patch.iter_mut().for_each(|v| *v *= inv);
                out.push(Some(patch));
            }
        }
    }
    out
}

/// Similarity maps of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMapStack {
    level: usize,
    patch_size: usize,
    /// Anchor spacing in pixels.
    anchor_stride: usize,
    anchors_x: usize,
    anchors_y: usize,
    /// Pixel offset between neighbouring displacement candidates.
    disp_step: usize,
    /// Half-width of the displacement grid, in candidates.
    disp_radius: usize,
    image_dims: (usize, usize),
    maps: Vec<f64>,
}

impl CorrelationMapStack {
    #[inline]
    pub fn level(&self) -> usize {
        self.level
    }

    #[inline]
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    #[inline]
    pub fn anchor_stride(&self) -> usize {
        self.anchor_stride
    }

    /// Anchor counts along x and y.
    #[inline]
    pub fn anchor_grid(&self) -> (usize, usize) {
        (self.anchors_x, self.anchors_y)
    }

    /// Side length of each (square) displacement grid.
    #[inline]
    pub fn grid_side(&self) -> usize {
        2 * self.disp_radius + 1
    }

    #[inline]
    pub fn disp_step(&self) -> usize {
        self.disp_step
    }

    #[inline]
    fn grid_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Pixel position of anchor `(ax, ay)`.
    #[inline]
    pub fn anchor_position(&self, ax: usize, ay: usize) -> (usize, usize) {
        (
            (ax * self.anchor_stride).min(self.image_dims.0 - 1),
            (ay * self.anchor_stride).min(self.image_dims.1 - 1),
        )
    }

    /// Displacement in pixels of candidate `(cx, cy)`.
    #[inline]
    pub fn displacement(&self, cx: usize, cy: usize) -> (isize, isize) {
        let r = self.disp_radius as isize;
        let s = self.disp_step as isize;
        ((cx as isize - r) * s, (cy as isize - r) * s)
    }

    /// Score map of one anchor, row-major over `(cx, cy)`.
    pub fn map(&self, ax: usize, ay: usize) -> &[f64] {
        let start = (ay * self.anchors_x + ax) * self.grid_len();
        &self.maps[start..start + self.grid_len()]
    }

    /// Best candidate `(cx, cy, score)` of an anchor; ties resolve to the
    /// first in raster order.
    pub fn argmax(&self, ax: usize, ay: usize) -> (usize, usize, f64) {
        let side = self.grid_side();
        self.best_in_window(ax, ay, 0, side, 0, side)
    }

    fn best_in_window(
        &self,
        ax: usize,
        ay: usize,
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
    ) -> (usize, usize, f64) {
        let map = self.map(ax, ay);
        let side = self.grid_side();
        let mut best = (x0, y0, f64::NEG_INFINITY);
        for cy in y0..y1 {
            for cx in x0..x1 {
                let s = map[cy * side + cx];
                if s > best.2 {
                    best = (cx, cy, s);
                }
            }
        }
        best
    }

    /// All scores of the level, for invariant checks.
    pub fn scores(&self) -> &[f64] {
        &self.maps
    }
}

/// Bottom level: `patch_size` patches on a stride `patch_size / 2` grid,
/// scored against every displacement within the search radius. Candidates
/// whose target lies outside the image score 0.
pub fn bottom_correlation(src: &Image, dst: &Image, config: &MatcherConfig) -> Result<CorrelationMapStack> {
    config.validate()?;
    if src.dims() != dst.dims() {
        return Err(Error::invalid("source and target dimensions differ"));
    }
    let (w, h) = src.dims();
    let n = config.patch_size;
    if w.min(h) < n {
        return Err(Error::invalid("image smaller than the bottom patch size"));
    }
    let radius = config.search_radius.unwrap_or(w.min(h) / 2);
    let stride = n / 2;
    let (anchors_x, anchors_y) = (w.div_ceil(stride), h.div_ceil(stride));
    let side = 2 * radius + 1;

    let src_desc = patch_descriptors(src, n);
    let dst_desc = patch_descriptors(dst, n);
    let mut maps = vec![0.0; anchors_x * anchors_y * side * side];
    for ay in 0..anchors_y {
        for ax in 0..anchors_x {
            let (px, py) = ((ax * stride).min(w - 1), (ay * stride).min(h - 1));
            let Some(a) = &src_desc[py * w + px] else { continue };
            let base = (ay * anchors_x + ax) * side * side;
            for cy in 0..side {
                let ty = py as isize + cy as isize - radius as isize;
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                for cx in 0..side {
                    let tx = px as isize + cx as isize - radius as isize;
                    if tx < 0 || tx >= w as isize {
                        continue;
                    }
                    if let Some(b) = &dst_desc[ty as usize * w + tx as usize] {
                        let ncc = math::dot(a, b).clamp(-1.0, 1.0);
                        maps[base + cy * side + cx] = 0.5 * (ncc + 1.0);
                    }
                }
            }
        }
    }
    Ok(CorrelationMapStack {
        level: 0,
        patch_size: n,
        anchor_stride: stride,
        anchors_x,
        anchors_y,
        disp_step: 1,
        disp_radius: radius,
        image_dims: (w, h),
        maps,
    })
}

/// True when the level's patches already span half the smaller image side.
pub fn covers_image(level: &CorrelationMapStack) -> bool {
    let (w, h) = level.image_dims;
    2 * level.patch_size >= w.min(h) || level.disp_radius < 2
}

/// Children of parent index `i` along one axis (quadrant centres at
/// `2i - 1` and `2i + 1`), clamped into the child grid.
#[inline]
fn child_indices(i: usize, n_child: usize) -> [usize; 2] {
    let lo = (2 * i).saturating_sub(1).min(n_child - 1);
    let hi = (2 * i + 1).min(n_child - 1);
    [lo, hi]
}

/// One aggregation step: 3x3 max-pool over displacements, subsample by two,
/// average the four quadrant children, rectify with `score^nu`.
pub fn aggregate_level(lower: &CorrelationMapStack, nu: f64) -> Result<CorrelationMapStack> {
    if covers_image(lower) {
        return Err(Error::CannotAggregate(lower.patch_size));
    }
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::invalid("rectification exponent must be positive"));
    }
    let (ax_n, ay_n) = (lower.anchors_x.div_ceil(2), lower.anchors_y.div_ceil(2));
    let r_child = lower.disp_radius;
    let r = r_child / 2;
    let side = 2 * r + 1;
    let child_side = lower.grid_side();

    // Max-pooled and subsampled child maps, computed once per child anchor.
    let pooled: Vec<Vec<f64>> = (0..lower.anchors_y)
        .flat_map(|ay| (0..lower.anchors_x).map(move |ax| (ax, ay)))
        .map(|(ax, ay)| {
            let map = lower.map(ax, ay);
            let mut out = vec![0.0; side * side];
            for cy in 0..side {
                let ccy = r_child + 2 * cy - 2 * r;
                let (y0, y1) = (ccy.saturating_sub(1), (ccy + 2).min(child_side));
                for cx in 0..side {
                    let ccx = r_child + 2 * cx - 2 * r;
                    let (x0, x1) = (ccx.saturating_sub(1), (ccx + 2).min(child_side));
                    let mut m = 0.0f64;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            m = m.max(map[yy * child_side + xx]);
                        }
                    }
                    out[cy * side + cx] = m;
                }
            }
            out
        })
        .collect();

    let mut maps = vec![0.0; ax_n * ay_n * side * side];
    for ay in 0..ay_n {
        for ax in 0..ax_n {
            let base = (ay * ax_n + ax) * side * side;
            let out = &mut maps[base..base + side * side];
            let cys = child_indices(ay, lower.anchors_y);
            let cxs = child_indices(ax, lower.anchors_x);
            for &cy in &cys {
                for &cx in &cxs {
                    let child = &pooled[cy * lower.anchors_x + cx];
                    for (o, c) in out.iter_mut().zip(child) {
                        *o += 0.25 * c;
                    }
                }
            }
            for o in out.iter_mut() {
                *o = math::powf(o.clamp(0.0, 1.0), nu);
            }
        }
    }
    Ok(CorrelationMapStack {
        level: lower.level + 1,
        patch_size: 2 * lower.patch_size,
        anchor_stride: 2 * lower.anchor_stride,
        anchors_x: ax_n,
        anchors_y: ay_n,
        disp_step: 2 * lower.disp_step,
        disp_radius: r,
        image_dims: lower.image_dims,
        maps,
    })
}

/// Every level from the bottom (index 0) to the coarsest.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPyramid {
    levels: Vec<CorrelationMapStack>,
}

impl CorrelationPyramid {
    pub fn build(src: &Image, dst: &Image, config: &MatcherConfig) -> Result<Self> {
        let mut levels = vec![bottom_correlation(src, dst, config)?];
        while let Some(top) = levels.last() {
            if covers_image(top) {
                break;
            }
            let next = aggregate_level(top, config.nu)?;
            levels.push(next);
        }
        Ok(Self { levels })
    }

    pub fn from_levels(levels: Vec<CorrelationMapStack>) -> Self {
        Self { levels }
    }

    pub fn levels(&self) -> &[CorrelationMapStack] {
        &self.levels
    }

    pub fn top(&self) -> Option<&CorrelationMapStack> {
        self.levels.last()
    }

    /// Displacement and score for every bottom anchor, obtained by taking the
    /// maximum of each top-level map and refining it down the pyramid inside
    /// the parent's pooling window.
    pub fn backtrack(&self) -> Result<Vec<AnchorMatch>> {
        let top = self.levels.last().ok_or_else(|| Error::invalid("empty correlation pyramid"))?;
        // (cx, cy, score) chosen for each anchor of the current level
        let mut choice: Vec<(usize, usize, f64)> = (0..top.anchors_y)
            .flat_map(|ay| (0..top.anchors_x).map(move |ax| (ax, ay)))
            .map(|(ax, ay)| top.argmax(ax, ay))
            .collect();
        for k in (0..self.levels.len() - 1).rev() {
            let parent = &self.levels[k + 1];
            let child = &self.levels[k];
            let side = child.grid_side();
            let mut next = Vec::with_capacity(child.anchors_x * child.anchors_y);
            for ay in 0..child.anchors_y {
                for ax in 0..child.anchors_x {
                    let (px, py) = nearest_parent(ax, ay, parent, &choice);
                    let (pcx, pcy, _) = choice[py * parent.anchors_x + px];
                    let ccx = child.disp_radius + 2 * pcx - 2 * parent.disp_radius;
                    let ccy = child.disp_radius + 2 * pcy - 2 * parent.disp_radius;
                    next.push(child.best_in_window(
                        ax,
                        ay,
                        ccx.saturating_sub(1),
                        (ccx + 2).min(side),
                        ccy.saturating_sub(1),
                        (ccy + 2).min(side),
                    ));
                }
            }
            choice = next;
        }
        let bottom = &self.levels[0];
        let mut out = Vec::with_capacity(choice.len());
        for ay in 0..bottom.anchors_y {
            for ax in 0..bottom.anchors_x {
                let (cx, cy, score) = choice[ay * bottom.anchors_x + ax];
                let (x, y) = bottom.anchor_position(ax, ay);
                let (dx, dy) = bottom.displacement(cx, cy);
                out.push(AnchorMatch { x, y, dx, dy, score });
            }
        }
        Ok(out)
    }
}

/// Parent anchor whose patch contains the child: the parent at `c / 2` for
/// even children; for odd children the better scoring of the two parents.
fn nearest_parent(
    ax: usize,
    ay: usize,
    parent: &CorrelationMapStack,
    choice: &[(usize, usize, f64)],
) -> (usize, usize) {
    let cands = |c: usize, n: usize| -> ([usize; 2], usize) {
        if c % 2 == 0 {
            ([(c / 2).min(n - 1), 0], 1)
        } else {
            ([(c / 2).min(n - 1), (c / 2 + 1).min(n - 1)], 2)
        }
    };
    let (xs, nx) = cands(ax, parent.anchors_x);
    let (ys, ny) = cands(ay, parent.anchors_y);
    let mut best = (xs[0], ys[0]);
    let mut best_score = f64::NEG_INFINITY;
    for &py in &ys[..ny] {
        for &px in &xs[..nx] {
            let s = choice[py * parent.anchors_x + px].2;
            if s > best_score {
                best_score = s;
                best = (px, py);
            }
        }
    }
    best
}

/// Backtracked displacement of one bottom anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorMatch {
    pub x: usize,
    pub y: usize,
    pub dx: isize,
    pub dy: isize,
    pub score: f64,
}

/// A correspondence `p -> p'` with its confidence `c(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub x: usize,
    pub y: usize,
    pub x2: usize,
    pub y2: usize,
    pub confidence: f64,
}

impl Match {
    #[inline]
    pub fn displacement(&self) -> (f64, f64) {
        (self.x2 as f64 - self.x as f64, self.y2 as f64 - self.y as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub entries: Vec<Match>,
}

impl MatchSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `x,y,x',y',confidence` rows with a header line.
    pub fn to_csv(&self) -> alloc::string::String {
        use core::fmt::Write;
        let mut s = alloc::string::String::from("x,y,x',y',confidence\n");
        for m in &self.entries {
            let _ = writeln!(s, "{},{},{},{},{}", m.x, m.y, m.x2, m.y2, m.confidence);
        }
        s
    }
}

/// Keeps forward matches scoring at least `threshold` whose target maps back
/// to within half an anchor stride of the source under the backward pyramid.
pub fn extract_matches(
    forward: &CorrelationPyramid,
    backward: &CorrelationPyramid,
    threshold: f64,
) -> Result<MatchSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("match threshold must lie in (0, 1)"));
    }
    let fwd = forward.backtrack()?;
    let bwd = backward.backtrack()?;
    let bottom = &backward.levels()[0];
    let (w, h) = bottom.image_dims;
    let stride = bottom.anchor_stride;
    let tol = (stride / 2).max(1) as isize;
    let mut entries = Vec::new();
    for m in fwd {
        if m.score < threshold {
            continue;
        }
        let tx = m.x as isize + m.dx;
        let ty = m.y as isize + m.dy;
        if tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
            continue;
        }
        let bax = ((tx as usize + stride / 2) / stride).min(bottom.anchors_x - 1);
        let bay = ((ty as usize + stride / 2) / stride).min(bottom.anchors_y - 1);
        let back = bwd[bay * bottom.anchors_x + bax];
        let rx = back.x as isize + back.dx;
        let ry = back.y as isize + back.dy;
        if (rx - m.x as isize).abs() <= tol && (ry - m.y as isize).abs() <= tol {
            entries.push(Match { x: m.x, y: m.y, x2: tx as usize, y2: ty as usize, confidence: m.score });
        }
    }
    Ok(MatchSet { entries })
}

/// Forward and backward pyramids plus reciprocal extraction.
pub fn match_images(src: &Image, dst: &Image, config: &MatcherConfig) -> Result<MatchSet> {
    let forward = CorrelationPyramid::build(src, dst, config)?;
    let backward = CorrelationPyramid::build(dst, src, config)?;
    extract_matches(&forward, &backward, config.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::imaging::{gaussian_smooth, GaussianParams};

    fn texture(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Image::from_fn(w, h, |_, _| rng.random::<f64>());
        gaussian_smooth(&raw, GaussianParams::new(0.7)).unwrap()
    }

    fn shifted(img: &Image, sx: isize, sy: isize) -> Image {
        Image::from_fn(img.width(), img.height(), |x, y| img.get_clamped(x as isize - sx, y as isize - sy))
    }

    fn patch(img: &Image, cx: isize, cy: isize, n: usize) -> Vec<f64> {
        let half = (n / 2) as isize;
        let mut v = vec![];
        for dy in -half..n as isize - half {
            for dx in -half..n as isize - half {
                v.push(img.get_clamped(cx + dx, cy + dy));
            }
        }
        v
    }

    #[test]
    fn similarity_basic_cases() {
        let a: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.1).collect();
        assert!((patch_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(patch_similarity(&[0.3; 16], &a).unwrap(), 0.0);
        let mean = a.iter().sum::<f64>() / 16.0;
        let neg: Vec<f64> = a.iter().map(|v| 2.0 * mean - v).collect();
        // direct evaluation: NCC of a against its reflection is -1
        assert!(patch_similarity(&a, &neg).unwrap().abs() < 1e-12);
        assert!(matches!(patch_similarity(&a[..9], &a), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn bottom_level_self_and_shift() {
        let src = texture(24, 24, 1);
        let cfg = MatcherConfig { search_radius: Some(5), ..Default::default() };
        let stack = bottom_correlation(&src, &src, &cfg).unwrap();
        let (nx, ny) = stack.anchor_grid();
        assert_eq!((nx, ny), (12, 12));
        for ay in 0..ny {
            for ax in 0..nx {
                let (cx, cy, _) = stack.argmax(ax, ay);
                assert_eq!(stack.displacement(cx, cy), (0, 0));
            }
        }
        let dst = shifted(&src, 2, 0);
        let stack = bottom_correlation(&src, &dst, &cfg).unwrap();
        for ay in 2..ny - 2 {
            for ax in 2..nx - 3 {
                let (px, py) = stack.anchor_position(ax, ay);
                // brute-force NCC search over the same window
                let a = patch(&src, px as isize, py as isize, 4);
                let mut best = ((0, 0), f64::NEG_INFINITY);
                for dy in -5isize..=5 {
                    for dx in -5isize..=5 {
                        let (tx, ty) = (px as isize + dx, py as isize + dy);
                        if tx < 0 || ty < 0 || tx >= 24 || ty >= 24 {
                            continue;
                        }
                        let s = patch_similarity(&a, &patch(&dst, tx, ty, 4)).unwrap();
                        if s > best.1 {
                            best = ((dx, dy), s);
                        }
                    }
                }
                let (cx, cy, s) = stack.argmax(ax, ay);
                assert_eq!(stack.displacement(cx, cy), (2, 0));
                assert_eq!(best.0, (2, 0));
                assert!((s - best.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_images_score_zero_and_match_nothing() {
        let img = Image::filled(16, 16, 0.4);
        let cfg = MatcherConfig::default();
        let stack = bottom_correlation(&img, &img, &cfg).unwrap();
        assert!(stack.scores().iter().all(|&s| s == 0.0));
        assert!(match_images(&img, &img, &cfg).unwrap().is_empty());
    }

    #[test]
    fn too_small_image_rejected() {
        let img = Image::filled(3, 3, 0.4);
        assert!(matches!(
            bottom_correlation(&img, &img, &MatcherConfig::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn aggregation_geometry_and_self_match() {
        let src = texture(16, 16, 2);
        let cfg = MatcherConfig::default();
        let bottom = bottom_correlation(&src, &src, &cfg).unwrap();
        let up = aggregate_level(&bottom, cfg.nu).unwrap();
        assert_eq!(up.patch_size(), 8);
        assert_eq!(up.anchor_grid(), (4, 4));
        assert!(up.grid_side() <= bottom.grid_side());
        assert!(up.scores().iter().all(|&s| (0.0..=1.0).contains(&s)));
        for ay in 0..4 {
            for ax in 0..4 {
                let (cx, cy, _) = up.argmax(ax, ay);
                assert_eq!(up.displacement(cx, cy), (0, 0));
            }
        }
        // 16x16 stops at patch 8
        assert!(matches!(aggregate_level(&up, cfg.nu), Err(Error::CannotAggregate(8))));
        let odd = bottom_correlation(&texture(22, 18, 3), &texture(22, 18, 3), &cfg).unwrap();
        let up = aggregate_level(&odd, cfg.nu).unwrap();
        assert_eq!(up.anchor_grid(), (11usize.div_ceil(2), 9usize.div_ceil(2)));
    }

    #[test]
    fn aggregated_shift_agrees_with_brute_force() {
        let src = texture(32, 32, 5);
        let dst = shifted(&src, 2, 0);
        let cfg = MatcherConfig::default();
        let bottom = bottom_correlation(&src, &dst, &cfg).unwrap();
        let up = aggregate_level(&bottom, cfg.nu).unwrap();
        let (nx, ny) = up.anchor_grid();
        for ay in 1..ny - 1 {
            for ax in 1..nx - 1 {
                let (cx, cy, _) = up.argmax(ax, ay);
                assert_eq!(up.displacement(cx, cy), (2, 0));
                // 8x8 brute force around the parent anchor
                let (px, py) = (ax as isize * 4, ay as isize * 4);
                let a = patch(&src, px, py, 8);
                let mut best = ((0, 0), f64::NEG_INFINITY);
                for dy in -4isize..=4 {
                    for dx in -4isize..=4 {
                        let s = patch_similarity(&a, &patch(&dst, px + dx, py + dy, 8)).unwrap();
                        if s > best.1 {
                            best = ((dx, dy), s);
                        }
                    }
                }
                assert_eq!(best.0, (2, 0));
            }
        }
    }

    #[test]
    fn extracted_matches_recover_shift() {
        let src = texture(32, 32, 7);
        let cfg = MatcherConfig::default();
        let same = match_images(&src, &src, &cfg).unwrap();
        assert!(!same.is_empty());
        assert!(same.entries.iter().all(|m| m.displacement() == (0.0, 0.0)));

        let dst = shifted(&src, 2, 0);
        let set = match_images(&src, &dst, &cfg).unwrap();
        assert!(set.len() > 50);
        for m in &set.entries {
            assert_eq!(m.displacement(), (2.0, 0.0));
            assert!(m.confidence >= cfg.threshold && m.confidence <= 1.0);
        }
    }

    #[test]
    fn empty_pyramid_rejected() {
        let p = CorrelationPyramid::from_levels(vec![]);
        assert!(matches!(extract_matches(&p, &p, 0.5), Err(Error::InvalidParameter(_))));
    }
}

//! Synthetic beating-heart phantom: a textured myocardial annulus that
//! contracts and twists over one cycle, with a hypokinetic infarct sector,
//! analytic ground-truth flow and pixel masks.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{gaussian_smooth, FlowField, GaussianParams, Image, ImageSequence, PixelMask};
use crate::math;
use crate::pipeline::SliceLevel;
use crate::varflow::FlowSequence;
use crate::{Error, Result};

/// Frame period attached to generated sequences, in milliseconds.
pub const FRAME_PERIOD_MS: f64 = 45.1;

const BLOOD: f64 = 0.9;
const TISSUE: f64 = 0.5;
const TISSUE_CONTRAST: f64 = 0.15;
const BACKGROUND: f64 = 0.15;
const BACKGROUND_CONTRAST: f64 = 0.08;
/// Angular width of the motion transition at the infarct border, radians.
const SECTOR_BLEND: f64 = 0.15;
/// Decay length of the motion outside the epicardium, pixels.
const OUTER_DECAY: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub image_size: usize,
    pub center: (f64, f64),
    /// Endocardial and epicardial radii.
    pub radii: (f64, f64),
    /// Peak inward displacement of the endocardium as a fraction of its radius.
    pub contraction_amplitude: f64,
    /// Peak twist in radians per unit of contraction amplitude.
    pub twist_per_amplitude: f64,
    pub frames: usize,
    /// Infarct sector as (start, extent) in radians, counter-clockwise in
    /// image coordinates.
    pub infarct_angle_range: (f64, f64),
    pub infarct_motion_scale: f64,
    /// Correlation length of the tissue texture, pixels.
    pub texture_grain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub slice_level: SliceLevel,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            image_size: 128,
            center: (64.0, 64.0),
            radii: (14.0, 24.0),
            contraction_amplitude: 0.4,
            twist_per_amplitude: 0.4,
            frames: ImageSequence::DEFAULT_FRAMES,
            infarct_angle_range: (0.0, PI / 2.0),
            infarct_motion_scale: 0.2,
            texture_grain: 1.5,
            noise_sigma: 0.01,
            seed: 0,
            slice_level: SliceLevel::Mid,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let (endo, epi) = self.radii;
        let size = self.image_size as f64;
        let (cx, cy) = self.center;
        if !(endo > 0.0 && endo < epi && epi < size / 2.0) {
            return Err(Error::invalid("radii must satisfy 0 < endo < epi < image_size / 2"));
        }
        if !(cx - epi >= 0.0 && cy - epi >= 0.0 && cx + epi <= size - 1.0 && cy + epi <= size - 1.0) {
            return Err(Error::invalid("annulus must lie inside the image"));
        }
        if !(0.0..0.5).contains(&self.contraction_amplitude) {
            return Err(Error::invalid("contraction amplitude must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.infarct_motion_scale) {
            return Err(Error::invalid("infarct motion scale must lie in [0, 1]"));
        }
        let (start, extent) = self.infarct_angle_range;
        if !start.is_finite() || !(0.0..=2.0 * PI).contains(&extent) {
            return Err(Error::invalid("infarct extent must lie in [0, 2pi]"));
        }
        if self.frames < 2 {
            return Err(Error::invalid("phantom needs at least two frames"));
        }
        if !(self.texture_grain >= 0.0 && self.noise_sigma >= 0.0 && self.twist_per_amplitude.is_finite()) {
            return Err(Error::invalid("texture grain and noise must be non-negative"));
        }
        Ok(())
    }

    /// Contraction phase in [0, 1] at frame `t`: zero at end-diastole, one at
    /// peak systole.
    pub fn phase(&self, t: f64) -> f64 {
        0.5 * (1.0 - math::cos(2.0 * PI * t / self.frames as f64))
    }

    /// Whether the reference angle `theta` lies in the infarct sector.
    pub fn in_sector(&self, theta: f64) -> bool {
        let (start, extent) = self.infarct_angle_range;
        extent > 0.0 && (extent >= 2.0 * PI || wrap_positive(theta - start) < extent)
    }

    /// Motion multiplier at reference angle `theta`, blending from 1 in
    /// healthy tissue to `infarct_motion_scale` inside the sector.
    pub fn motion_factor(&self, theta: f64) -> f64 {
        let (start, extent) = self.infarct_angle_range;
        let inside = if extent <= 0.0 {
            0.0
        } else if extent >= 2.0 * PI {
            1.0
        } else {
            let a = wrap_positive(theta - start);
            let dist = if a < extent { a.min(extent - a) } else { -(a - extent).min(2.0 * PI - a) };
            smoothstep(0.5 + dist / SECTOR_BLEND)
        };
        1.0 - (1.0 - self.infarct_motion_scale) * inside
    }

    /// Radial profile of the motion: linear through the blood pool, falling
    /// to one half across the wall, decaying outside.
    fn profile(&self, r: f64) -> (f64, f64) {
        let (endo, epi) = self.radii;
        if r <= endo {
            (r / endo, 1.0 / endo)
        } else if r <= epi {
            let slope = -0.5 / (epi - endo);
            (1.0 + slope * (r - endo), slope)
        } else {
            let e = math::exp(-(r - epi) / OUTER_DECAY);
            (0.5 * e, -0.5 * e / OUTER_DECAY)
        }
    }

    /// Inward radial displacement (pixels) at frame `t` for the material point
    /// at reference polar coordinates `(r, theta)`.
    pub fn radial_displacement(&self, r: f64, theta: f64, t: f64) -> f64 {
        self.contraction_amplitude * self.radii.0 * self.phase(t) * self.motion_factor(theta) * self.profile(r).0
    }

    /// Rotation (radians) at frame `t` for the material point at `(r, theta)`.
    pub fn twist(&self, r: f64, theta: f64, t: f64) -> f64 {
        self.contraction_amplitude
            * self.twist_per_amplitude
            * self.phase(t)
            * self.motion_factor(theta)
            * self.profile(r).0
    }

    /// Position at frame `t` of the material point at reference position `p`.
    pub fn forward(&self, p: (f64, f64), t: f64) -> (f64, f64) {
        let (dx, dy) = (p.0 - self.center.0, p.1 - self.center.1);
        let r = math::sqrt(dx * dx + dy * dy);
        let theta = math::atan2(dy, dx);
        let rt = r - self.radial_displacement(r, theta, t);
        let th = theta + self.twist(r, theta, t);
        (self.center.0 + rt * math::cos(th), self.center.1 + rt * math::sin(th))
    }

    /// Reference polar coordinates `(r, theta)` of the material point found at
    /// position `q` in frame `t`.
    pub fn inverse_polar(&self, q: (f64, f64), t: f64) -> (f64, f64) {
        let (dx, dy) = (q.0 - self.center.0, q.1 - self.center.1);
        let rt = math::sqrt(dx * dx + dy * dy);
        let th = math::atan2(dy, dx);
        let s = self.phase(t);
        if s == 0.0 || rt == 0.0 {
            return (rt, th);
        }
        let a = self.contraction_amplitude * self.radii.0 * s;
        let b = self.contraction_amplitude * self.twist_per_amplitude * s;
        let (mut r, mut theta) = (rt, th);
        for _ in 0..30 {
            let m = self.motion_factor(theta);
            for _ in 0..4 {
                let (g, dg) = self.profile(r);
                let f = r - a * m * g - rt;
                let df = 1.0 - a * m * dg;
                r -= f / df;
                r = r.max(0.0);
            }
            let next = th - b * m * self.profile(r).0;
            let done = (next - theta).abs() < 1e-13;
            theta = next;
            if done {
                break;
            }
        }
        (r, theta)
    }

    /// Reference position of the material point found at `q` in frame `t`.
    pub fn inverse(&self, q: (f64, f64), t: f64) -> (f64, f64) {
        let (r, theta) = self.inverse_polar(q, t);
        (self.center.0 + r * math::cos(theta), self.center.1 + r * math::sin(theta))
    }

    /// Analytic displacement from frame `j` to frame `j + 1` at pixel `q` of frame `j`.
    pub fn flow_at(&self, q: (f64, f64), j: usize) -> (f64, f64) {
        let p = self.inverse(q, j as f64);
        let now = self.forward(p, j as f64);
        let next = self.forward(p, (j + 1) as f64);
        (next.0 - now.0, next.1 - now.1)
    }
}

fn wrap_positive(a: f64) -> f64 {
    a - 2.0 * PI * math::floor(a / (2.0 * PI))
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub params: PhantomParams,
    pub sequence: ImageSequence,
    pub gt_flows: FlowSequence,
    /// Infarct pixels of the reference frame.
    pub mask: PixelMask,
    /// Myocardial pixels of the reference frame.
    pub myocardium: PixelMask,
    pub slice_level: SliceLevel,
}

impl PhantomDataset {
    /// Crops every frame, flow and mask to the `w x h` window at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<PhantomDataset> {
        let mut params = self.params.clone();
        params.center = (params.center.0 - x as f64, params.center.1 - y as f64);
        params.image_size = w.max(h);
        Ok(PhantomDataset {
            params,
            sequence: self.sequence.crop(x, y, w, h)?,
            gt_flows: self.gt_flows.crop(x, y, w, h)?,
            mask: self.mask.crop(x, y, w, h)?,
            myocardium: self.myocardium.crop(x, y, w, h)?,
            slice_level: self.slice_level,
        })
    }

    /// Center of the annulus in the dataset's pixel grid.
    pub fn center(&self) -> (f64, f64) {
        self.params.center
    }
}

fn texture(size: usize, grain: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    let raw = Image::from_fn(size, size, |_, _| rng.random::<f64>());
    let smooth = gaussian_smooth(&raw, GaussianParams::new(grain))?;
    let mean = smooth.mean();
    let n = smooth.data().len() as f64;
    let var = smooth.data().iter().map(|v| math::sq(v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / math::sqrt(var) } else { 0.0 };
    Ok(smooth.map(|v| (v - mean) * scale))
}

/// Renders the phantom described by `params`.
pub fn generate(params: &PhantomParams) -> Result<PhantomDataset> {
    params.validate()?;
    let size = params.image_size;
    let (endo, epi) = params.radii;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let tex = texture(size, params.texture_grain, &mut rng)?;
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|_| Error::invalid("invalid noise sigma"))?;

    let mut frames = Vec::with_capacity(params.frames);
    for j in 0..params.frames {
        let t = j as f64;
        let mut img = Image::from_fn(size, size, |x, y| {
            let (r, theta) = params.inverse_polar((x as f64, y as f64), t);
            let p = (params.center.0 + r * math::cos(theta), params.center.1 + r * math::sin(theta));
            let grain = tex.sample_bilinear(p.0, p.1);
            let wall = (r - endo + 0.5).clamp(0.0, 1.0);
            let outside = (r - epi - 0.5).clamp(0.0, 1.0);
            let tissue = wall - outside;
            (1.0 - wall) * BLOOD
                + tissue * (TISSUE + TISSUE_CONTRAST * grain)
                + outside * (BACKGROUND + BACKGROUND_CONTRAST * grain)
        });
        if params.noise_sigma > 0.0 {
            img = img.map(|v| v + noise.sample(&mut rng));
        }
        frames.push(img.map(|v| v.clamp(0.0, 1.0)));
    }
    let sequence = ImageSequence::new(frames, FRAME_PERIOD_MS)?;

    let flows = (0..params.frames - 1)
        .map(|j| FlowField::from_fn(size, size, |x, y| params.flow_at((x as f64, y as f64), j)))
        .collect();
    let gt_flows = FlowSequence::new(flows)?;

    let polar = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 - params.center.0, y as f64 - params.center.1);
        (math::sqrt(dx * dx + dy * dy), math::atan2(dy, dx))
    };
    let myocardium = PixelMask::from_fn(size, size, |x, y| {
        let (r, _) = polar(x, y);
        r >= endo && r <= epi
    });
    let mask = PixelMask::from_fn(size, size, |x, y| {
        let (r, theta) = polar(x, y);
        r >= endo && r <= epi && params.in_sector(theta)
    });
    Ok(PhantomDataset { params: params.clone(), sequence, gt_flows, mask, myocardium, slice_level: params.slice_level })
}

/// Infarct pixels over myocardial pixels.
pub fn mask_fraction(ds: &PhantomDataset) -> f64 {
    let total = ds.myocardium.count();
    if total == 0 {
        0.0
    } else {
        ds.mask.count() as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomParams {
        PhantomParams { image_size: 64, center: (32.0, 32.0), radii: (8.0, 14.0), frames: 6, ..Default::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&PhantomParams { seed: 1, ..small() }).unwrap();
        assert_ne!(a.sequence, c.sequence);
    }

    #[test]
    fn no_motion_gives_zero_flow_and_static_frames() {
        let p = PhantomParams { contraction_amplitude: 0.0, infarct_motion_scale: 1.0, noise_sigma: 0.0, ..small() };
        let ds = generate(&p).unwrap();
        for f in ds.gt_flows.flows() {
            assert!(f.u().iter().chain(f.v()).all(|&c| c == 0.0));
        }
        let frames = ds.sequence.frames();
        assert!(frames.iter().all(|f| f == &frames[0]));
    }

    #[test]
    fn infarct_moves_less() {
        let ds = generate(&PhantomParams { noise_sigma: 0.0, ..small() }).unwrap();
        let (mut inf, mut ni, mut healthy, mut nh) = (0.0, 0.0, 0.0, 0.0);
        for f in ds.gt_flows.flows() {
            for y in 0..64 {
                for x in 0..64 {
                    if !ds.myocardium.get(x, y) {
                        continue;
                    }
                    let (u, v) = f.get(x, y);
                    let m = math::sqrt(u * u + v * v);
                    if ds.mask.get(x, y) {
                        inf += m;
                        ni += 1.0;
                    } else {
                        healthy += m;
                        nh += 1.0;
                    }
                }
            }
        }
        assert!(inf / ni < 0.5 * healthy / nh);
    }

    #[test]
    fn forward_and_inverse_agree() {
        let p = PhantomParams::default();
        for t in [0.0, 3.0, 12.0, 20.0] {
            for q in [(64.0, 64.0), (70.0, 50.0), (80.0, 64.0), (64.0, 90.0), (30.0, 100.0), (88.0, 66.0)] {
                let back = p.forward(p.inverse(q, t), t);
                assert!((back.0 - q.0).abs() < 1e-9 && (back.1 - q.1).abs() < 1e-9, "{q:?} t={t} -> {back:?}");
            }
        }
    }

    #[test]
    fn flow_matches_radial_model() {
        let p = PhantomParams { twist_per_amplitude: 0.0, infarct_angle_range: (0.0, 0.0), ..Default::default() };
        let ds = generate(&PhantomParams { image_size: 128, frames: 25, ..p.clone() }).unwrap();
        let j = 4;
        for theta in [0.3, 1.7, 4.0] {
            let q = (64.0 + 20.0 * math::cos(theta), 64.0 + 20.0 * math::sin(theta));
            let (r0, _) = p.inverse_polar(q, j as f64);
            let expected = p.radial_displacement(r0, theta, (j + 1) as f64) - p.radial_displacement(r0, theta, j as f64);
            let f = &ds.gt_flows.flows()[j];
            let (u, v) = f.sample_bilinear(q.0, q.1);
            let inward = -(u * math::cos(theta) + v * math::sin(theta));
            assert!((inward - expected).abs() < 0.05, "{inward} vs {expected}");
        }
    }

    #[test]
    fn mask_fraction_cases() {
        let none = generate(&PhantomParams { infarct_angle_range: (0.0, 0.0), ..small() }).unwrap();
        assert_eq!(mask_fraction(&none), 0.0);
        let all = generate(&PhantomParams { infarct_angle_range: (1.0, 2.0 * PI), ..small() }).unwrap();
        assert_eq!(mask_fraction(&all), 1.0);
        let quarter = generate(&PhantomParams { infarct_angle_range: (0.2, PI / 2.0), ..small() }).unwrap();
        let mut count = 0;
        let mut total = 0;
        for y in 0..64 {
            for x in 0..64 {
                let (dx, dy) = (x as f64 - 32.0, y as f64 - 32.0);
                let r = math::sqrt(dx * dx + dy * dy);
                if (8.0..=14.0).contains(&r) {
                    total += 1;
                    let a = wrap_positive(math::atan2(dy, dx) - 0.2);
                    count += usize::from(a < PI / 2.0);
                }
            }
        }
        assert_eq!(quarter.myocardium.count(), total);
        assert_eq!(quarter.mask.count(), count);
        assert!((mask_fraction(&quarter) - 0.25).abs() < 0.03);
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(generate(&PhantomParams { radii: (20.0, 10.0), ..small() }).is_err());
        assert!(generate(&PhantomParams { contraction_amplitude: 0.6, ..small() }).is_err());
        assert!(generate(&PhantomParams { center: (5.0, 32.0), ..small() }).is_err());
    }
}

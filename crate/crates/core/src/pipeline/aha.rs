//! AHA 16-segment scoring.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::imaging::PixelMask;
use crate::math;
use crate::{Error, Result};

/// Default fraction of infarct pixels that flags a segment.
pub const DEFAULT_SEGMENT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceLevel {
    Basal,
    Mid,
    Apical,
}

impl SliceLevel {
    pub const ALL: [SliceLevel; 3] = [SliceLevel::Basal, SliceLevel::Mid, SliceLevel::Apical];

    pub fn segment_count(self) -> usize {
        match self {
            SliceLevel::Basal | SliceLevel::Mid => 6,
            SliceLevel::Apical => 4,
        }
    }

    /// Index of the first segment of this level in the 1..=16 numbering, zero based.
    pub fn first_segment(self) -> usize {
        match self {
            SliceLevel::Basal => 0,
            SliceLevel::Mid => 6,
            SliceLevel::Apical => 12,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SliceLevel::Basal => "basal",
            SliceLevel::Mid => "mid",
            SliceLevel::Apical => "apical",
        }
    }
}

impl fmt::Display for SliceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SliceLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basal" => Ok(SliceLevel::Basal),
            "mid" => Ok(SliceLevel::Mid),
            "apical" => Ok(SliceLevel::Apical),
            other => Err(Error::InvalidParameter(alloc::format!("unknown slice level {other:?}"))),
        }
    }
}

/// Per-segment infarct statistics for one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub slice_level: SliceLevel,
    /// Myocardial pixels per segment.
    pub pixels: Vec<usize>,
    /// Infarct pixels per segment.
    pub infarct: Vec<usize>,
    pub abnormal: Vec<bool>,
}

impl SegmentScores {
    pub fn fraction(&self, segment: usize) -> f64 {
        if self.pixels[segment] == 0 {
            0.0
        } else {
            self.infarct[segment] as f64 / self.pixels[segment] as f64
        }
    }
}

/// Segment index of pixel `(x, y)` around `center`, angles measured
/// counter-clockwise from `reference_angle` in image coordinates.
pub fn segment_of(x: f64, y: f64, center: (f64, f64), reference_angle: f64, segments: usize) -> usize {
    let angle = math::atan2(y - center.1, x - center.0) - reference_angle;
    let wrapped = angle - 2.0 * PI * math::floor(angle / (2.0 * PI));
    let width = 2.0 * PI / segments as f64;
    ((wrapped / width) as usize).min(segments - 1)
}

/// Splits `region` (myocardium) into the angular segments of `slice_level` and
/// flags each segment whose infarct fraction reaches `threshold`.
pub fn aha_segments(
    mask: &PixelMask,
    region: &PixelMask,
    center: (f64, f64),
    reference_angle: f64,
    slice_level: SliceLevel,
    threshold: f64,
) -> Result<SegmentScores> {
    let (w, h) = mask.dims();
    if region.dims() != (w, h) {
        return Err(Error::invalid("mask and myocardium dimensions differ"));
    }
    if !(center.0 >= 0.0 && center.1 >= 0.0 && center.0 <= (w - 1) as f64 && center.1 <= (h - 1) as f64) {
        return Err(Error::invalid("segment center outside the mask"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) || !reference_angle.is_finite() {
        return Err(Error::invalid("segment threshold must lie in (0, 1]"));
    }
    let n = slice_level.segment_count();
    let mut pixels = vec![0usize; n];
    let mut infarct = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            if !region.get(x, y) {
                continue;
            }
            let s = segment_of(x as f64, y as f64, center, reference_angle, n);
            pixels[s] += 1;
            infarct[s] += usize::from(mask.get(x, y));
        }
    }
    let abnormal = pixels
        .iter()
        .zip(&infarct)
        .map(|(&p, &i)| p > 0 && i as f64 >= threshold * p as f64)
        .collect();
    Ok(SegmentScores { slice_level, pixels, infarct, abnormal })
}

/// Fraction of segments whose abnormality flag agrees between prediction and truth.
pub fn segment_agreement(pred: &SegmentScores, truth: &SegmentScores) -> Result<f64> {
    if pred.abnormal.len() != truth.abnormal.len() {
        return Err(Error::invalid("segment counts differ"));
    }
    let hits = pred.abnormal.iter().zip(&truth.abnormal).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.abnormal.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annulus(size: usize, c: f64, r0: f64, r1: f64) -> PixelMask {
        PixelMask::from_fn(size, size, |x, y| {
            let r = math::sqrt((x as f64 - c) * (x as f64 - c) + (y as f64 - c) * (y as f64 - c));
            r >= r0 && r <= r1
        })
    }

    #[test]
    fn segment_counts_sum_to_sixteen() {
        assert_eq!(SliceLevel::Basal.segment_count(), 6);
        assert_eq!(SliceLevel::Mid.segment_count(), 6);
        assert_eq!(SliceLevel::Apical.segment_count(), 4);
        let total: usize = SliceLevel::ALL.iter().map(|s| s.segment_count()).sum();
        assert_eq!(total, 16);
        assert!("septal".parse::<SliceLevel>().is_err());
    }

    #[test]
    fn full_infarct_flags_every_segment() {
        let region = annulus(64, 32.0, 10.0, 20.0);
        for level in SliceLevel::ALL {
            let s = aha_segments(&region, &region, (32.0, 32.0), 0.3, level, 0.05).unwrap();
            assert_eq!(s.abnormal.len(), level.segment_count());
            assert!(s.abnormal.iter().all(|&a| a));
        }
    }

    #[test]
    fn single_sector_flags_its_segment() {
        let region = annulus(64, 32.0, 10.0, 20.0);
        let mask = PixelMask::from_fn(64, 64, |x, y| {
            let a = math::atan2(y as f64 - 32.0, x as f64 - 32.0);
            let a = if a < 0.0 { a + 2.0 * PI } else { a };
            region.get(x, y) && a >= 2.0 * PI / 6.0 && a < 2.0 * 2.0 * PI / 6.0
        });
        let s = aha_segments(&mask, &region, (32.0, 32.0), 0.0, SliceLevel::Mid, 0.05).unwrap();
        assert_eq!(s.abnormal, vec![false, true, false, false, false, false]);
        assert_eq!(s.infarct[1], mask.count());
    }
}

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{ImageSequence, PixelMask};
use crate::localization::{localize_lv, ROI_SIZE};
use crate::synth::{generate, PhantomParams};
use crate::varflow::FlowSequence;
use crate::{Error, Result};

use super::aha::SliceLevel;

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub sequence: ImageSequence,
    /// Infarct labels.
    pub mask: PixelMask,
    /// Evaluation region; all pixels when absent.
    pub myocardium: Option<PixelMask>,
    pub slice_level: SliceLevel,
    pub center: (f64, f64),
    pub reference_angle: f64,
    pub pixel_spacing_mm: f64,
    pub gt_flows: Option<FlowSequence>,
}

impl Subject {
    pub fn validate(&self) -> Result<()> {
        let dims = self.sequence.dims();
        if self.mask.dims() != dims || self.myocardium.as_ref().is_some_and(|m| m.dims() != dims) {
            return Err(Error::invalid(format!("subject {}: mask dimensions differ from the frames", self.id)));
        }
        if let Some(f) = &self.gt_flows {
            if f.dims() != dims || f.len() + 1 != self.sequence.len() {
                return Err(Error::invalid(format!("subject {}: ground-truth flows do not match the frames", self.id)));
            }
        }
        Ok(())
    }

    /// Evaluation region as a mask.
    pub fn region(&self) -> PixelMask {
        match &self.myocardium {
            Some(m) => m.clone(),
            None => {
                let (w, h) = self.sequence.dims();
                PixelMask::from_fn(w, h, |_, _| true)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        for (i, s) in subjects.iter().enumerate() {
            s.validate()?;
            if subjects[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::invalid(format!("duplicate subject id {}", s.id)));
            }
        }
        Ok(Self { subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&Subject> {
        idx.iter().map(|&i| &self.subjects[i]).collect()
    }
}

/// Phantom parameters of cohort member `index`: varied seed, infarct
/// sector, slice level and LV position.
pub fn cohort_params(base: &PhantomParams, index: usize, seed: u64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)));
    let half = base.image_size as f64 / 2.0;
    let jitter = (half - ROI_SIZE as f64 / 2.0 - base.radii.1).clamp(0.0, 8.0);
    let mut p = base.clone();
    p.seed = rng.random();
    p.center = (half + rng.random_range(-jitter..=jitter), half + rng.random_range(-jitter..=jitter));
    p.infarct_angle_range = (rng.random_range(0.0..2.0 * PI), base.infarct_angle_range.1);
    p.slice_level = SliceLevel::ALL[index % 3];
    p
}

/// Renders, localizes and crops one phantom subject to the 64x64 ROI.
pub fn phantom_subject(id: &str, params: &PhantomParams) -> Result<Subject> {
    let ds = generate(params)?;
    let roi = localize_lv(&ds.sequence)?;
    let crop = ds.crop(roi.x, roi.y, roi.w, roi.h)?;
    let center = crop.center();
    Ok(Subject {
        id: String::from(id),
        sequence: crop.sequence,
        mask: crop.mask,
        myocardium: Some(crop.myocardium),
        slice_level: crop.slice_level,
        center,
        reference_angle: 0.0,
        pixel_spacing_mm: 1.0,
        gt_flows: Some(crop.gt_flows),
    })
}

/// `n` phantom subjects named `phantom_00`, `phantom_01`, ...
pub fn phantom_cohort(n: usize, base: &PhantomParams, seed: u64) -> Result<Dataset> {
    let subjects = (0..n)
        .map(|i| phantom_subject(&format!("phantom_{i:02}"), &cohort_params(base, i, seed)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(subjects)
}

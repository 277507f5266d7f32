//! On-disk subject layout:
//!
//! ```text
//! <subject>/frames/frame_00.pgm ... frame_24.pgm
//! <subject>/mask.pgm
//! <subject>/myocardium.pgm      (optional)
//! <subject>/meta.json
//! <subject>/flows/flow_00.flo   (optional ground truth)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ofrnn_core::imaging::{ImageSequence, PixelMask};
use ofrnn_core::localization::{localize_lv, ROI_SIZE};
use ofrnn_core::pipeline::{Dataset, SliceLevel, Subject};
use ofrnn_core::varflow::FlowSequence;
use serde::{Deserialize, Serialize};

use crate::{flo, pgm, Error, Result};

pub const FRAME_PERIOD_MS: f64 = 45.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub slice_level: SliceLevel,
    pub center: (f64, f64),
    pub reference_angle: f64,
    pub pixel_spacing_mm: f64,
}

pub fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("frames").join(format!("frame_{i:02}.pgm"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// Frames `frame_00.pgm`, `frame_01.pgm`, ... up to the first gap, min-max
/// scaled over the whole sequence.
pub fn read_frames(dir: &Path) -> Result<ImageSequence> {
    let mut frames = Vec::new();
    while frame_path(dir, frames.len()).is_file() {
        frames.push(pgm::read_image(&frame_path(dir, frames.len()))?);
    }
    if frames.len() < 2 {
        return Err(Error::Format(format!("{}: need at least two frames under frames/", dir.display())));
    }
    Ok(ImageSequence::new(frames, FRAME_PERIOD_MS)?.normalized())
}

pub fn write_frames(seq: &ImageSequence, dir: &Path) -> Result<()> {
    create_dir(&dir.join("frames"))?;
    for (i, f) in seq.frames().iter().enumerate() {
        pgm::write_image(f, &frame_path(dir, i))?;
    }
    Ok(())
}

/// `flow_00.flo`, `flow_01.flo`, ... directly inside `dir`, up to the first gap.
pub fn read_flow_files(dir: &Path) -> Result<Option<FlowSequence>> {
    let mut flows = Vec::new();
    loop {
        let p = dir.join(format!("flow_{:02}.flo", flows.len()));
        if !p.is_file() {
            break;
        }
        flows.push(flo::read_flo(&p)?);
    }
    if flows.is_empty() {
        return Ok(None);
    }
    Ok(Some(FlowSequence::new(flows)?))
}

pub fn write_flow_files(flows: &FlowSequence, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for (i, f) in flows.flows().iter().enumerate() {
        flo::write_flo(f, &dir.join(format!("flow_{i:02}.flo")))?;
    }
    Ok(())
}

pub fn read_flows(subject_dir: &Path) -> Result<Option<FlowSequence>> {
    read_flow_files(&subject_dir.join("flows"))
}

pub fn write_flows(flows: &FlowSequence, subject_dir: &Path) -> Result<()> {
    write_flow_files(flows, &subject_dir.join("flows"))
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

fn crop_mask(m: &PixelMask, x: usize, y: usize) -> Result<PixelMask> {
    Ok(m.crop(x, y, ROI_SIZE, ROI_SIZE)?)
}

/// Reads one subject directory. Sequences larger than the 64x64 ROI are
/// localized and cropped, along with their masks, flows and center.
pub fn read_subject(dir: &Path) -> Result<Subject> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("{}: not a subject directory", dir.display())))?
        .to_string();
    let mut sequence = read_frames(dir)?;
    let mut mask = pgm::read_mask(&dir.join("mask.pgm"))?;
    let myo_path = dir.join("myocardium.pgm");
    let mut myocardium = if myo_path.is_file() { Some(pgm::read_mask(&myo_path)?) } else { None };
    let meta = read_meta(&dir.join("meta.json"))?;
    let mut gt_flows = read_flows(dir)?;
    let mut center = meta.center;
    if sequence.dims() != (ROI_SIZE, ROI_SIZE) {
        let roi = localize_lv(&sequence)?;
        sequence = sequence.crop(roi.x, roi.y, roi.w, roi.h)?;
        mask = crop_mask(&mask, roi.x, roi.y)?;
        myocardium = myocardium.map(|m| crop_mask(&m, roi.x, roi.y)).transpose()?;
        gt_flows = gt_flows.map(|f| f.crop(roi.x, roi.y, roi.w, roi.h)).transpose()?;
        center = (center.0 - roi.x as f64, center.1 - roi.y as f64);
    }
    let subject = Subject {
        id,
        sequence,
        mask,
        myocardium,
        slice_level: meta.slice_level,
        center,
        reference_angle: meta.reference_angle,
        pixel_spacing_mm: meta.pixel_spacing_mm,
        gt_flows,
    };
    subject.validate()?;
    Ok(subject)
}

pub fn write_subject(subject: &Subject, dir: &Path) -> Result<()> {
    write_frames(&subject.sequence, dir)?;
    pgm::write_mask(&subject.mask, &dir.join("mask.pgm"))?;
    if let Some(m) = &subject.myocardium {
        pgm::write_mask(m, &dir.join("myocardium.pgm"))?;
    }
    if let Some(f) = &subject.gt_flows {
        write_flows(f, dir)?;
    }
    let meta = Meta {
        slice_level: subject.slice_level,
        center: subject.center,
        reference_angle: subject.reference_angle,
        pixel_spacing_mm: subject.pixel_spacing_mm,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(Error::io(&path))
}

/// Every subdirectory of `root` holding a `meta.json`, in name order.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no subject directories found", root.display())));
    }
    let subjects = dirs.iter().map(|d| read_subject(d)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(subjects)?)
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for s in &dataset.subjects {
        write_subject(s, &root.join(&s.id))?;
    }
    Ok(())
}

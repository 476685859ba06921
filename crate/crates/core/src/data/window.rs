use serde::{Deserialize, Serialize};

use super::Study;
use crate::error::{Error, Result};

/// Linear HU display window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrainWindow {
    pub level: f64,
    pub width: f64,
}

impl Default for BrainWindow {
    fn default() -> Self {
        BrainWindow {
            level: 40.0,
            width: 80.0,
        }
    }
}

/// `clamp((hu - (level - width/2)) / width, 0, 1)`.
#[inline]
pub fn window_value(hu: f64, level: f64, width: f64) -> f64 {
    ((hu - (level - width / 2.0)) / width).clamp(0.0, 1.0)
}

pub fn apply_brain_window(hu_slice: &[f64], level: f64, width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0) {
        return Err(Error::invalid(format!("window width must be positive, got {width}")));
    }
    Ok(hu_slice.iter().map(|&v| window_value(v, level, width)).collect())
}

/// A `k`-slice context stack centred on one slice of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceWindow {
    pub study_id: String,
    pub center_index: usize,
    /// Number of context slices (odd).
    pub k: usize,
    pub height: usize,
    pub width: usize,
    /// `k x height x width` windowed intensities in `[0, 1]`.
    pub context: Vec<f32>,
    pub center_mask: Vec<u8>,
    pub label: u8,
    pub voxel_volume: f64,
}

impl SliceWindow {
    /// Source slice index for each context position, replicating the first
    /// and last slice past the ends of the volume.
    pub fn context_indices(center: usize, k: usize, num_slices: usize) -> Vec<usize> {
        let half = (k / 2) as isize;
        (-half..=half)
            .map(|off| (center as isize + off).clamp(0, num_slices as isize - 1) as usize)
            .collect()
    }
}

/// One window per slice, in slice order.
pub fn make_slice_windows(study: &Study, k: usize, window: BrainWindow) -> Result<Vec<SliceWindow>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!("context size k must be odd and positive, got {k}")));
    }
    if !(window.width > 0.0) {
        return Err(Error::invalid(format!("window width must be positive, got {}", window.width)));
    }
    study.validate()?;
    let n = study.num_slices();
    let windowed: Vec<Vec<f32>> = study
        .slices
        .iter()
        .map(|s| {
            s.iter()
                .map(|&v| window_value(v as f64, window.level, window.width) as f32)
                .collect()
        })
        .collect();
    let voxel_volume = study.voxel_volume();
    Ok((0..n)
        .map(|center| {
            let mut context = Vec::with_capacity(k * study.height * study.width);
            for idx in SliceWindow::context_indices(center, k, n) {
                context.extend_from_slice(&windowed[idx]);
            }
            SliceWindow {
                study_id: study.study_id.clone(),
                center_index: center,
                k,
                height: study.height,
                width: study.width,
                context,
                center_mask: study.masks[center].clone(),
                label: study.slice_labels[center],
                voxel_volume,
            }
        })
        .collect())
}

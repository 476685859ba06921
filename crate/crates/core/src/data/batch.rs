use super::SliceWindow;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Stacked windows ready for a forward pass.
#[derive(Clone, Debug)]
pub struct WindowBatch<T> {
    /// `[m, k, h, w]`
    pub images: Tensor<T>,
    /// `[m, h, w]` centre-slice masks.
    pub masks: Tensor<T>,
    pub labels: Vec<T>,
    pub voxel_volumes: Vec<T>,
}

impl<T: Element> WindowBatch<T> {
    pub fn from_windows(windows: &[&SliceWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::invalid("cannot batch zero windows"))?;
        let (k, h, w) = (first.k, first.height, first.width);
        let m = windows.len();
        let mut images = Vec::with_capacity(m * k * h * w);
        let mut masks = Vec::with_capacity(m * h * w);
        for win in windows {
            if (win.k, win.height, win.width) != (k, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "batch windows",
                    lhs: vec![k, h, w],
                    rhs: vec![win.k, win.height, win.width],
                });
            }
            images.extend(win.context.iter().map(|&v| T::from_f64(v as f64)));
            masks.extend(win.center_mask.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(WindowBatch {
            images: Tensor::new(vec![m, k, h, w], images)?,
            masks: Tensor::new(vec![m, h, w], masks)?,
            labels: windows.iter().map(|w| T::from_f64(w.label as f64)).collect(),
            voxel_volumes: windows.iter().map(|w| T::from_f64(w.voxel_volume)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

//! Density maps: the model's output representation and the ground truth
//! built by placing one unit of Gaussian mass per annotated point.

use loca_tensor::{Scalar, Tensor};

use crate::error::LocaError;
use crate::ope::ExemplarBox;

/// A 2-D density map whose spatial sum is the count estimate. The count is
/// always recomputed from the values, never cached.
#[derive(Debug, Clone)]
pub struct DensityMap<T: Scalar> {
    pub values: Tensor<T>,
}

impl<T: Scalar> DensityMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self, LocaError> {
        if values.shape().len() != 2 {
            return Err(LocaError::config(format!(
                "density map must be 2-D, got shape {:?}",
                values.shape()
            )));
        }
        Ok(DensityMap { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// The count estimate: the sum of all map values.
    pub fn count(&self) -> f64 {
        self.values.data().iter().map(|v| v.as_f64()).sum()
    }
}

/// Scalar sum of all map values.
pub fn estimate_count<T: Scalar>(map: &DensityMap<T>) -> f64 {
    map.count()
}

/// Gaussian kernel size in pixels: 1/8 of the average exemplar box side,
/// averaged over both sides of every exemplar.
pub fn kernel_size_px(boxes: &[ExemplarBox], height: usize, width: usize) -> Option<f64> {
    if boxes.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for b in boxes {
        total += b.width() * width as f64;
        total += b.height() * height as f64;
    }
    Some(total / (2.0 * boxes.len() as f64) / 8.0)
}

/// Ground-truth density: one Gaussian per point, kernel size derived from
/// the exemplars (or `fallback_kernel_px` when none exist, the zero-shot
/// case). Each Gaussian is renormalized after border truncation so every
/// point contributes exactly unit mass.
pub fn gt_density<T: Scalar>(
    points: &[(f64, f64)],
    boxes: &[ExemplarBox],
    height: usize,
    width: usize,
    fallback_kernel_px: Option<f64>,
) -> Result<DensityMap<T>, LocaError> {
    gt_density_floored(points, boxes, height, width, fallback_kernel_px, 0.5)
}

/// As [`gt_density`] with an explicit lower bound on the kernel size.
pub fn gt_density_floored<T: Scalar>(
    points: &[(f64, f64)],
    boxes: &[ExemplarBox],
    height: usize,
    width: usize,
    fallback_kernel_px: Option<f64>,
    min_kernel_px: f64,
) -> Result<DensityMap<T>, LocaError> {
    let size = match kernel_size_px(boxes, height, width).or(fallback_kernel_px) {
        Some(s) => s.max(min_kernel_px).max(0.5),
        None => {
            return Err(LocaError::config(
                "ground-truth density needs exemplar boxes or a fallback kernel size",
            ))
        }
    };
    // Kernel size maps to sigma = size/4; the window truncates at 2 sigma.
    let sigma = size / 4.0;
    let radius = (2.0 * sigma).ceil() as isize;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    let mut map = vec![0.0f64; height * width];
    for &(x, y) in points {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(LocaError::config(format!("point ({x}, {y}) outside the image")));
        }
        let cx = x * width as f64;
        let cy = y * height as f64;
        let px = (cx - 0.5).round() as isize;
        let py = (cy - 0.5).round() as isize;

        let y_lo = (py - radius).max(0);
        let y_hi = (py + radius).min(height as isize - 1);
        let x_lo = (px - radius).max(0);
        let x_hi = (px + radius).min(width as isize - 1);
        if y_lo > y_hi || x_lo > x_hi {
            continue;
        }
        let mut mass = 0.0;
        let mut stamp = Vec::with_capacity(((y_hi - y_lo + 1) * (x_hi - x_lo + 1)) as usize);
        for gy in y_lo..=y_hi {
            for gx in x_lo..=x_hi {
                let dx = gx as f64 + 0.5 - cx;
                let dy = gy as f64 + 0.5 - cy;
                let g = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
                stamp.push((gy as usize * width + gx as usize, g));
                mass += g;
            }
        }
        // Truncation renormalization: this point contributes exactly 1.
        for (idx, g) in stamp {
            map[idx] += g / mass;
        }
    }
    let values = Tensor::from_fn(&[height, width], |i| T::from_f64(map[i]));
    DensityMap::new(values)
}

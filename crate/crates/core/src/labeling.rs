//! Overlap- and center-aware patch labels.
//!
//! Each patch gets `IoU(patch, gt) * N(patch_center; gt_center, diag(sx^2, sy^2))`
//! with `sx = alpha * width`, `sy = alpha * height`, and the vector is then
//! normalized to sum to one. The Gaussian is evaluated at the patch center and
//! left unnormalized since the constant cancels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, PatchGrid, Point};

pub const DEFAULT_ALPHA: f64 = 0.8;

/// Lower bound on the Gaussian standard deviations, in pixels.
pub const SIGMA_FLOOR_PX: f64 = 0.5;

/// How patch targets are weighted before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// IoU times the center Gaussian.
    #[default]
    Weighted,
    /// Every overlapping patch weighted equally.
    Flat,
}

impl LabelMode {
    pub fn name(&self) -> &'static str {
        match self {
            LabelMode::Weighted => "weighted",
            LabelMode::Flat => "flat",
        }
    }
}

/// Normalized patch-wise target distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingLabel {
    values: Vec<f64>,
    grid: PatchGrid,
    alpha: f64,
}

impl GroundingLabel {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Expand point or line boxes to at least 1x1 px around their center.
fn non_degenerate(bbox: &BBox) -> BBox {
    let c = bbox.center();
    let w = bbox.width().max(1.0);
    let h = bbox.height().max(1.0);
    BBox::new(c.x - w / 2.0, c.y - h / 2.0, c.x + w / 2.0, c.y + h / 2.0)
}

/// Standard deviations `(sx, sy)` for a box.
pub fn gaussian_sigmas(bbox: &BBox, alpha: f64) -> (f64, f64) {
    let b = non_degenerate(bbox);
    ((alpha * b.width()).max(SIGMA_FLOOR_PX), (alpha * b.height()).max(SIGMA_FLOOR_PX))
}

/// Unnormalized axis-aligned Gaussian centered on the box.
pub fn gaussian_weight(point: Point, bbox: &BBox, alpha: f64) -> f64 {
    let (sx, sy) = gaussian_sigmas(bbox, alpha);
    let c = bbox.center();
    let dx = (point.x - c.x) / sx;
    let dy = (point.y - c.y) / sy;
    (-0.5 * (dx * dx + dy * dy)).exp()
}

pub fn patch_labels(grid: &PatchGrid, bbox: &BBox, alpha: f64) -> Result<GroundingLabel> {
    patch_labels_with(grid, bbox, alpha, LabelMode::Weighted)
}

pub fn patch_labels_with(grid: &PatchGrid, bbox: &BBox, alpha: f64, mode: LabelMode) -> Result<GroundingLabel> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    let b = non_degenerate(bbox);
    if b.intersection(&grid.bounds()).is_empty() {
        return Err(Error::domain(format!(
            "bbox [{}, {}, {}, {}] does not intersect the image",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )));
    }
    // Work in log space: for boxes much smaller than a patch the Gaussian at
    // every overlapping patch center can underflow even though the ratios are
    // representable.
    let (sx, sy) = gaussian_sigmas(&b, alpha);
    let c = b.center();
    let mut logs = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let iou = grid.iou(i, &b)?;
        let l = if iou <= 0.0 {
            f64::NEG_INFINITY
        } else {
            match mode {
                LabelMode::Weighted => {
                    let p = grid.patch_center(i)?;
                    let dx = (p.x - c.x) / sx;
                    let dy = (p.y - c.y) / sy;
                    iou.ln() - 0.5 * (dx * dx + dy * dy)
                }
                LabelMode::Flat => 0.0,
            }
        };
        logs.push(l);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::domain("label has no positive mass"));
    }
    let mut values: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    Ok(GroundingLabel { values, grid: *grid, alpha })
}

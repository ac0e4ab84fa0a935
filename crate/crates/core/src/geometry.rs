//! Pixel/patch coordinate algebra.
//!
//! Patches are square, indexed row-major, and boxes are half-open on their
//! right and bottom edges. When the image size is not a multiple of the patch
//! side the last row/column of patches is clipped to the image, and every area
//! computation uses the clipped rectangle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// A regular grid of square patches laid over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    image_w: u32,
    image_h: u32,
    patch_px: u32,
    cols: u32,
    rows: u32,
}

impl PatchGrid {
    pub fn new(image_w: u32, image_h: u32, patch_px: u32) -> Result<Self> {
        if image_w == 0 || image_h == 0 || patch_px == 0 {
            return Err(Error::domain(format!(
                "patch grid needs positive sizes, got {image_w}x{image_h} with patch {patch_px}"
            )));
        }
        Ok(Self { image_w, image_h, patch_px, cols: image_w.div_ceil(patch_px), rows: image_h.div_ceil(patch_px) })
    }

    pub fn image_w(&self) -> u32 {
        self.image_w
    }

    pub fn image_h(&self) -> u32 {
        self.image_h
    }

    pub fn patch_px(&self) -> u32 {
        self.patch_px
    }

    pub fn cols(&self) -> usize {
        self.cols as usize
    }

    pub fn rows(&self) -> usize {
        self.rows as usize
    }

    /// |V|, the number of patches.
    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The whole image as a box.
    pub fn bounds(&self) -> BBox {
        BBox { x1: 0.0, y1: 0.0, x2: self.image_w as f64, y2: self.image_h as f64 }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.image_w as f64 && p.y < self.image_h as f64
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::domain(format!("patch index {index} out of range for {} patches", self.len())));
        }
        Ok(())
    }

    /// (row, col) of a patch index.
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols(), index % self.cols())
    }

    /// Pixel rectangle of a patch, clipped to the image.
    pub fn patch_rect(&self, index: usize) -> Result<BBox> {
        self.check_index(index)?;
        let (r, c) = self.row_col(index);
        let p = self.patch_px as f64;
        Ok(BBox {
            x1: c as f64 * p,
            y1: r as f64 * p,
            x2: ((c + 1) as f64 * p).min(self.image_w as f64),
            y2: ((r + 1) as f64 * p).min(self.image_h as f64),
        })
    }

    pub fn patch_index_of(&self, p: Point) -> Result<usize> {
        if !self.contains(p) {
            return Err(Error::domain(format!(
                "point ({}, {}) outside {}x{} image",
                p.x, p.y, self.image_w, self.image_h
            )));
        }
        let c = (p.x / self.patch_px as f64).floor() as usize;
        let r = (p.y / self.patch_px as f64).floor() as usize;
        Ok(r * self.cols() + c)
    }

    /// Center of the (clipped) patch rectangle.
    pub fn patch_center(&self, index: usize) -> Result<Point> {
        Ok(self.patch_rect(index)?.center())
    }

    /// Intersection-over-union of a patch with a box; 0 when disjoint.
    pub fn iou(&self, index: usize, bbox: &BBox) -> Result<f64> {
        Ok(self.patch_rect(index)?.iou(bbox))
    }

    /// Grow `bbox` by `k` patch sides on every edge, clamped to the image.
    pub fn expand_bbox(&self, bbox: &BBox, k: u32) -> BBox {
        let grow = (k as f64) * self.patch_px as f64;
        BBox { x1: bbox.x1 - grow, y1: bbox.y1 - grow, x2: bbox.x2 + grow, y2: bbox.y2 + grow }.clamp_to(self)
    }

    /// Plan a square crop of side `crop_px` centered on `center`.
    ///
    /// Near a border the square is translated back inside the image rather
    /// than shrunk. A crop larger than the image's shorter side degenerates to
    /// that side (the whole image for square screens).
    pub fn plan_crop(&self, center: Point, crop_px: u32, zoom: f64) -> Result<CropRegion> {
        if crop_px == 0 {
            return Err(Error::domain("crop size must be positive"));
        }
        if !(zoom.is_finite() && zoom >= 1.0) {
            return Err(Error::domain(format!("zoom must be >= 1, got {zoom}")));
        }
        if !self.contains(center) {
            return Err(Error::domain(format!("crop center ({}, {}) outside image", center.x, center.y)));
        }
        let size = crop_px.min(self.image_w).min(self.image_h);
        let place = |c: f64, extent: u32| -> u32 {
            let start = (c - size as f64 / 2.0).floor();
            start.clamp(0.0, (extent - size) as f64) as u32
        };
        Ok(CropRegion {
            origin_x: place(center.x, self.image_w),
            origin_y: place(center.y, self.image_h),
            size_px: size,
            zoom,
        })
    }
}

/// Axis-aligned pixel box, half-open on `x2`/`y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Canonicalizing constructor: corners may be given in any order.
    pub fn new(xa: f64, ya: f64, xb: f64, yb: f64) -> Self {
        Self { x1: xa.min(xb), y1: ya.min(yb), x2: xa.max(xb), y2: ya.max(yb) }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.x1 >= self.x2 || self.y1 >= self.y2
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x < self.x2 && p.y >= self.y1 && p.y < self.y2
    }

    /// `other` lies entirely inside `self`.
    pub fn encloses(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersection(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
            x2: self.x2.min(other.x2),
            y2: self.y2.min(other.y2),
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter.is_empty() {
            return 0.0;
        }
        let i = inter.area();
        let union = self.area() + other.area() - i;
        if union <= 0.0 {
            0.0
        } else {
            i / union
        }
    }

    pub fn clamp_to(&self, grid: &PatchGrid) -> BBox {
        let w = grid.image_w() as f64;
        let h = grid.image_h() as f64;
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// A square region of the global image, re-rendered at `zoom` times its size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRegion {
    pub origin_x: u32,
    pub origin_y: u32,
    pub size_px: u32,
    pub zoom: f64,
}

impl CropRegion {
    pub fn whole(grid: &PatchGrid) -> Self {
        Self { origin_x: 0, origin_y: 0, size_px: grid.image_w().min(grid.image_h()), zoom: 1.0 }
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            x1: self.origin_x as f64,
            y1: self.origin_y as f64,
            x2: (self.origin_x + self.size_px) as f64,
            y2: (self.origin_y + self.size_px) as f64,
        }
    }

    /// Side of the zoomed local frame in local pixels.
    pub fn zoomed_side(&self) -> f64 {
        self.size_px as f64 * self.zoom
    }

    /// Local (zoomed) coordinates of a global point.
    pub fn to_local(&self, global: Point) -> Point {
        Point::new((global.x - self.origin_x as f64) * self.zoom, (global.y - self.origin_y as f64) * self.zoom)
    }

    /// Inverse of the zoom-in rendering: `origin + local / zoom`.
    pub fn map_to_global(&self, local: Point) -> Result<Point> {
        let side = self.zoomed_side();
        if !(0.0..=side).contains(&local.x) || !(0.0..=side).contains(&local.y) {
            return Err(Error::domain(format!(
                "local point ({}, {}) outside the {side}px zoomed frame",
                local.x, local.y
            )));
        }
        Ok(Point::new(self.origin_x as f64 + local.x / self.zoom, self.origin_y as f64 + local.y / self.zoom))
    }
}

use serde::{Deserialize, Serialize};

/// Axis-aligned box as center and size. Coordinates are normalized to
/// whatever region the box lives in (search crop or frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

pub const AREA_FLOOR: f64 = 1e-12;

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        let (x1, y1, x2, y2) = self.corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BBox { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }

    /// Side of the square with the same area.
    pub fn side(&self) -> f64 {
        (self.w * self.h).max(0.0).sqrt()
    }

    /// Normalized-box invariants: center in `[0, 1]`, size in `(0, 1]`.
    pub fn is_normalized(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = (self.area() + other.area() - inter).max(AREA_FLOOR);
        inter / union
    }

    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = (self.area().max(AREA_FLOOR) + other.area().max(AREA_FLOOR) - inter).max(AREA_FLOOR);
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let enclose = ((ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1))).max(AREA_FLOOR);
        inter / union - (enclose - union) / enclose
    }

    /// Scales a box normalized to a region of `width x height` pixels.
    pub fn to_pixels(&self, width: f64, height: f64) -> BBox {
        BBox { cx: self.cx * width, cy: self.cy * height, w: self.w * width, h: self.h * height }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = BBox::new(0.3, 0.7, 0.123, 0.456);
        assert_eq!(b.iou(&b), 1.0);
        assert_eq!(b.giou(&b), 1.0);
    }

    #[test]
    fn half_overlap() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.giou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }
}

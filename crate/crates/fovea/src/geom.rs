//! Axis-aligned boxes in continuous pixel coordinates.

/// Box in pixel coordinates, x0 < x1 and y0 < y1. Coordinates are
/// real-valued: curation candidates carry fractional sides so the equal-area
/// aspect variants are exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxF {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxF { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    /// Half-open containment: the point on the max edge is outside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Positive-area intersection; touching edges do not overlap.
    pub fn overlaps(&self, other: &BoxF) -> bool {
        let iw = self.x1.min(other.x1) - self.x0.max(other.x0);
        let ih = self.y1.min(other.y1) - self.y0.max(other.y0);
        iw > 0.0 && ih > 0.0
    }

    pub fn intersection_area(&self, other: &BoxF) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        iw * ih
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoxF {
        BoxF::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn clipped(&self, w: f64, h: f64) -> BoxF {
        BoxF::new(
            self.x0.max(0.0),
            self.y0.max(0.0),
            self.x1.min(w),
            self.y1.min(h),
        )
    }

    pub fn in_bounds(&self, w: f64, h: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= w && self.y1 <= h && self.x0 < self.x1 && self.y0 < self.y1
    }
}

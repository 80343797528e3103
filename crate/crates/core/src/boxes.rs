//! Normalized center-format boxes.

use serde::{Deserialize, Serialize};

pub type ClassId = u32;

/// `(cx, cy)` center and `(w, h)` extent, in image-relative units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two boxes with positive extents.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two boxes placed on a common center.
pub fn shape_iou(aw: f64, ah: f64, bw: f64, bh: f64) -> f64 {
    let inter = aw.min(bw) * ah.min(bh);
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: ClassId,
    pub bbox: BBox,
}

impl BoxLabel {
    pub fn new(class_id: ClassId, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            class_id,
            bbox: BBox::new(cx, cy, w, h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_hand_cases() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &b), 1.0 / 7.0);
        assert_eq!(iou(&a, &a), 1.0);
        let c = BBox::from_corners(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn shape_iou_is_concentric_iou() {
        assert_eq!(shape_iou(0.2, 0.2, 0.2, 0.2), 1.0);
        assert_eq!(shape_iou(0.2, 0.2, 0.4, 0.4), 0.25);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}

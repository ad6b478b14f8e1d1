//! Axis-aligned box arithmetic.

use crate::domain::BBox;

pub fn area(b: &BBox) -> f64 {
    (b.x2() - b.x1()) * (b.y2() - b.y1())
}

/// Overlap area. Boxes that only touch along an edge have zero intersection.
pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    // Both areas are strictly positive, so the denominator is too.
    inter / (area(a) + area(b) - inter)
}

/// Smallest box covering both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox::new(
        a.x1().min(b.x1()),
        a.y1().min(b.y1()),
        a.x2().max(b.x2()),
        a.y2().max(b.y2()),
    )
    .expect("hull of two valid boxes is valid")
}

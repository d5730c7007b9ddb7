//! Geometric primitives: boxes, IoU, greedy NMS, per-point box encoding and
//! centerness.
//!
//! Coordinates are continuous image-plane pixels. Boxes are stored in corner
//! form `(x0, y0, x1, y1)` with `x0 < x1` and `y0 < y1`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A point on the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Scalar> BBox<T> {
    /// Builds a box, rejecting empty or inverted extents.
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox {
                x0: x0.to_f64_lossy(),
                y0: y0.to_f64_lossy(),
                x1: x1.to_f64_lossy(),
                y1: y1.to_f64_lossy(),
            })
        }
    }

    /// Builds a box without validation. Degenerate boxes are allowed here and
    /// behave as zero-area in [`iou`].
    pub const fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center_size(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::lit(0.5);
        Self::from_corners(cx - w * half, cy - h * half, cx + w * half, cy + h * half)
    }

    /// Top-left corner plus size, the `x,y,w,h` annotation convention.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Self {
        Self::from_corners(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        self.x0.is_finite()
            && self.y0.is_finite()
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    pub fn height(&self) -> T {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Point<T> {
        let half = T::lit(0.5);
        Point::new((self.x0 + self.x1) * half, (self.y0 + self.y1) * half)
    }

    /// `(cx, cy, w, h)`.
    pub fn to_center_size(&self) -> (T, T, T, T) {
        let c = self.center();
        (c.x, c.y, self.width(), self.height())
    }

    pub fn area(&self) -> T {
        if self.is_valid() {
            self.width() * self.height()
        } else {
            T::zero()
        }
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self::from_corners(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    /// Intersection with the rectangle `[0, w] x [0, h]`. May be degenerate.
    pub fn clip(&self, w: T, h: T) -> Self {
        let z = T::zero();
        Self::from_corners(self.x0.max(z).min(w), self.y0.max(z).min(h), self.x1.max(z).min(w), self.y1.max(z).min(h))
    }

    /// Strict interior test (open interval on both axes).
    pub fn contains_strict(&self, p: Point<T>) -> bool {
        p.x > self.x0 && p.x < self.x1 && p.y > self.y0 && p.y < self.y1
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        BBox::from_corners(c(self.x0), c(self.y0), c(self.x1), c(self.y1))
    }
}

/// Distances from an anchor point to the four sides of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ltrb<T> {
    pub l: T,
    pub t: T,
    pub r: T,
    pub b: T,
}

impl<T: Scalar> Ltrb<T> {
    pub fn new(l: T, t: T, r: T, b: T) -> Self {
        Self { l, t, r, b }
    }

    pub fn min_component(&self) -> T {
        self.l.min(self.t).min(self.r).min(self.b)
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.l, self.t, self.r, self.b]
    }
}

/// Intersection over union with continuous areas.
///
/// A degenerate (zero-area or inverted) box has IoU 0 with anything.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    if !a.is_valid() || !b.is_valid() {
        return T::zero();
    }
    let iw = a.x1.min(b.x1) - a.x0.max(b.x0);
    let ih = a.y1.min(b.y1) - a.y0.max(b.y0);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one()).max(T::zero())
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order (ties broken by lower index);
/// a box is dropped when its IoU with an already kept box exceeds
/// `threshold`. Returns kept indices in visiting order.
pub fn nms<T: Scalar>(boxes: &[BBox<T>], scores: &[T], threshold: T) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Shape(format!(
            "nms: {} boxes vs {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let order = descending_order(scores);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending score, ties by ascending index. NaN scores
/// sort last.
pub fn descending_order<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (scores[i], scores[j]);
        match (a.is_nan(), b.is_nan()) {
            (true, true) => i.cmp(&j),
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => b.partial_cmp(&a).unwrap().then(i.cmp(&j)),
        }
    });
    order
}

/// Regression target of an interior point: distances to the four sides.
pub fn encode_targets<T: Scalar>(point: Point<T>, gt: &BBox<T>) -> Result<Ltrb<T>> {
    if !gt.contains_strict(point) {
        return Err(Error::NotPositiveSample {
            x: point.x.to_f64_lossy(),
            y: point.y.to_f64_lossy(),
        });
    }
    Ok(Ltrb::new(
        point.x - gt.x0,
        point.y - gt.y0,
        gt.x1 - point.x,
        gt.y1 - point.y,
    ))
}

/// Inverse of [`encode_targets`].
pub fn decode_box<T: Scalar>(point: Point<T>, v: &Ltrb<T>) -> Result<BBox<T>> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(v.min_component() > T::zero()) {
        return Err(Error::InvalidRegression);
    }
    Ok(BBox::from_corners(
        point.x - v.l,
        point.y - v.t,
        point.x + v.r,
        point.y + v.b,
    ))
}

/// Centerness quality in `[0, 1]`; zero unless every component is positive.
pub fn centerness<T: Scalar>(v: &Ltrb<T>) -> T {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(v.min_component() > T::zero()) {
        return T::zero();
    }
    let horiz = v.l.min(v.r) / v.l.max(v.r);
    let vert = v.t.min(v.b) / v.t.max(v.b);
    (horiz * vert).sqrt()
}

/// IoU of two boxes anchored at the same point, computed from their side
/// distances. Equal to `iou(decode(p, a), decode(p, b))` for positive inputs.
pub fn ltrb_iou<T: Scalar>(a: &Ltrb<T>, b: &Ltrb<T>) -> T {
    let area_a = (a.l + a.r) * (a.t + a.b);
    let area_b = (b.l + b.r) * (b.t + b.b);
    let iw = a.l.min(b.l) + a.r.min(b.r);
    let ih = a.t.min(b.t) + a.b.min(b.b);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    inter / (area_a + area_b - inter)
}

//! Pure box arithmetic: IoU, EIoU loss with analytic gradient,
//! center-ness, greedy NMS, coordinate-frame conversion and physical
//! center distance.
//!
//! Boxes are stored in center form `(cx, cy, w, h)` in continuous
//! pixel coordinates: an image of width `W` spans `[0, W]` and the
//! center of pixel column `j` sits at `j + 0.5`.

use crate::error::{Error, Result};

/// Identifies the coordinate frame a box lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    FullImage,
    SearchPatch,
    TemplatePatch,
}

/// Axis-aligned box in center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub frame: Frame,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, frame: Frame) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h, frame };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, frame: Frame) -> Result<Self> {
        Self::new(
            (x1 + x2) / 2.0,
            (y1 + y2) / 2.0,
            x2 - x1,
            y2 - y1,
            frame,
        )
    }

    /// Corner form `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
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

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::NonFiniteBox);
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::NonPositiveExtent {
                w: self.w,
                h: self.h,
            });
        }
        Ok(())
    }
}

/// Distances from a grid location to the four edges of a box, in
/// pixels. A location lies inside its box iff all four are positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTargets {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl RegressionTargets {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        RegressionTargets {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn is_inside(&self) -> bool {
        self.left > 0.0 && self.top > 0.0 && self.right > 0.0 && self.bottom > 0.0
    }
}

/// Dimensions of the smallest box enclosing two boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnclosureStats {
    pub wc: f64,
    pub hc: f64,
}

impl EnclosureStats {
    pub fn of(a: &BoundingBox, b: &BoundingBox) -> Result<Self> {
        a.validate()?;
        b.validate()?;
        let (ax1, ay1, ax2, ay2) = a.corners();
        let (bx1, by1, bx2, by2) = b.corners();
        let wc = ax2.max(bx2) - ax1.min(bx1);
        let hc = ay2.max(by2) - ay1.min(by1);
        if wc <= 0.0 || hc <= 0.0 {
            return Err(Error::DegenerateEnclosure);
        }
        Ok(EnclosureStats { wc, hc })
    }
}

/// Intersection-over-union of two boxes in the same frame.
///
/// A zero-area intersection along a shared edge counts as disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.frame != b.frame {
        return Err(Error::FrameMismatch(a.frame, b.frame));
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let ix = ax2.min(bx2) - ax1.max(bx1);
    let iy = ay2.min(by2) - ay1.max(by1);
    if ix <= 0.0 || iy <= 0.0 {
        return Ok(0.0);
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Center-ness of a grid location from its edge distances:
/// `sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b)))`.
pub fn centerness(t: &RegressionTargets) -> Result<f64> {
    if t.left < 0.0 || t.right < 0.0 || t.top < 0.0 || t.bottom < 0.0 {
        return Err(Error::NegativeTargetDistance);
    }
    let hmax = t.left.max(t.right);
    let vmax = t.top.max(t.bottom);
    if hmax == 0.0 || vmax == 0.0 {
        return Err(Error::DegenerateTargets);
    }
    let hmin = t.left.min(t.right);
    let vmin = t.top.min(t.bottom);
    Ok(((hmin / hmax) * (vmin / vmax)).sqrt())
}

/// EIoU regression loss between a predicted and a ground-truth box:
/// `(1 - IoU)` plus center-distance and width/height penalty terms
/// normalized by the smallest enclosing box.
pub fn eiou_loss(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    eiou_loss_grad(pred, gt).map(|(v, _)| v)
}

/// EIoU loss together with its analytic gradient with respect to the
/// predicted box's `(cx, cy, w, h)`.
///
/// At corner coincidences the min/max terms take the one-sided
/// derivative that treats the predicted corner as binding.
pub fn eiou_loss_grad(pred: &BoundingBox, gt: &BoundingBox) -> Result<(f64, [f64; 4])> {
    pred.validate()?;
    gt.validate()?;
    if pred.frame != gt.frame {
        return Err(Error::FrameMismatch(pred.frame, gt.frame));
    }
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let (w, h) = (pred.w, pred.h);

    // Intersection extents and their partials w.r.t. pred corners.
    let ix = px2.min(gx2) - px1.max(gx1);
    let iy = py2.min(gy2) - py1.max(gy1);
    let overlap = ix > 0.0 && iy > 0.0;
    let (ixp, iyp) = (ix.max(0.0), iy.max(0.0));
    // d(ix)/d(px1), d(ix)/d(px2) when the intersection is open.
    let dix_dpx1 = if overlap && px1 >= gx1 { -1.0 } else { 0.0 };
    let dix_dpx2 = if overlap && px2 <= gx2 { 1.0 } else { 0.0 };
    let diy_dpy1 = if overlap && py1 >= gy1 { -1.0 } else { 0.0 };
    let diy_dpy2 = if overlap && py2 <= gy2 { 1.0 } else { 0.0 };

    let inter = ixp * iyp;
    let union = w * h + gt.w * gt.h - inter;
    let iou_v = inter / union;

    // d(inter)/d(corner)
    let di = [
        iyp * dix_dpx1, // px1
        ixp * diy_dpy1, // py1
        iyp * dix_dpx2, // px2
        ixp * diy_dpy2, // py2
    ];
    // Corner partials of (cx, cy, w, h): corner = f(cx, cy, w, h).
    // For a quantity q with corner partials (q_x1, q_y1, q_x2, q_y2):
    //   dq/dcx = q_x1 + q_x2         dq/dw = (q_x2 - q_x1) / 2
    //   dq/dcy = q_y1 + q_y2         dq/dh = (q_y2 - q_y1) / 2
    let chain = |q: [f64; 4]| [q[0] + q[2], q[1] + q[3], (q[2] - q[0]) / 2.0, (q[3] - q[1]) / 2.0];

    let dinter = chain(di);
    // d(union) = d(w*h) - d(inter); w*h contributes only to w/h slots.
    let dunion = [
        -dinter[0],
        -dinter[1],
        h - dinter[2],
        w - dinter[3],
    ];
    let mut grad = [0.0f64; 4];
    for k in 0..4 {
        let diou = (dinter[k] * union - inter * dunion[k]) / (union * union);
        grad[k] -= diou; // d(1 - IoU)
    }

    // Enclosing box and its partials.
    let wc = px2.max(gx2) - px1.min(gx1);
    let hc = py2.max(gy2) - py1.min(gy1);
    if wc <= 0.0 || hc <= 0.0 {
        return Err(Error::DegenerateEnclosure);
    }
    let dwc_dpx1 = if px1 <= gx1 { -1.0 } else { 0.0 };
    let dwc_dpx2 = if px2 >= gx2 { 1.0 } else { 0.0 };
    let dhc_dpy1 = if py1 <= gy1 { -1.0 } else { 0.0 };
    let dhc_dpy2 = if py2 >= gy2 { 1.0 } else { 0.0 };
    let dwc = chain([dwc_dpx1, 0.0, dwc_dpx2, 0.0]);
    let dhc = chain([0.0, dhc_dpy1, 0.0, dhc_dpy2]);

    // Center-distance term: rho^2 / (wc^2 + hc^2).
    let dx = pred.cx - gt.cx;
    let dy = pred.cy - gt.cy;
    let rho2 = dx * dx + dy * dy;
    let denom = wc * wc + hc * hc;
    let drho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];
    for k in 0..4 {
        let ddenom = 2.0 * wc * dwc[k] + 2.0 * hc * dhc[k];
        grad[k] += drho2[k] / denom - rho2 * ddenom / (denom * denom);
    }

    // Width term: (w - gw)^2 / wc^2.
    let dw_ = w - gt.w;
    for k in 0..4 {
        let direct = if k == 2 { 2.0 * dw_ / (wc * wc) } else { 0.0 };
        grad[k] += direct - 2.0 * dw_ * dw_ * dwc[k] / (wc * wc * wc);
    }
    // Height term: (h - gh)^2 / hc^2.
    let dh_ = h - gt.h;
    for k in 0..4 {
        let direct = if k == 3 { 2.0 * dh_ / (hc * hc) } else { 0.0 };
        grad[k] += direct - 2.0 * dh_ * dh_ * dhc[k] / (hc * hc * hc);
    }

    let loss = (1.0 - iou_v)
        + rho2 / denom
        + dw_ * dw_ / (wc * wc)
        + dh_ * dh_ / (hc * hc);
    Ok((loss, grad))
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order (ties broken by lower
/// index); a box is suppressed iff its IoU with an already-kept box
/// exceeds `iou_threshold`. Returns kept indices in visit order.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "nms scores",
            got: scores.len(),
            expected: boxes.len(),
        });
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidThreshold(iou_threshold));
    }
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteScore(i));
        }
    }
    for b in boxes {
        b.validate()?;
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'outer: for &i in &order {
        for &k in &kept {
            if iou(&boxes[i], &boxes[k])? > iou_threshold {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

/// Euclidean distance between two box centers, in millimetres.
pub fn center_distance(a: &BoundingBox, b: &BoundingBox, pixel_spacing_mm: f64) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.frame != b.frame {
        return Err(Error::FrameMismatch(a.frame, b.frame));
    }
    if !(pixel_spacing_mm > 0.0) {
        return Err(Error::InvalidSpacing(pixel_spacing_mm));
    }
    Ok(pixel_spacing_mm * ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt())
}

/// Relates a patch frame to full-image coordinates: patch coordinates
/// are `(full - origin) * scale`, with `scale` in patch pixels per
/// full-image pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    pub frame: Frame,
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl FrameMeta {
    pub const FULL: FrameMeta = FrameMeta {
        frame: Frame::FullImage,
        origin_x: 0.0,
        origin_y: 0.0,
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0)
            || !self.origin_x.is_finite()
            || !self.origin_y.is_finite()
        {
            return Err(Error::InvalidFrameMeta);
        }
        Ok(())
    }

    /// Patch coordinates of a full-image point.
    pub fn from_full(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) * self.scale, (y - self.origin_y) * self.scale)
    }

    /// Full-image coordinates of a patch point.
    pub fn to_full(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale + self.origin_x, y / self.scale + self.origin_y)
    }
}

/// Remap a box between two frames related through full-image
/// coordinates by a crop offset and isotropic scale.
pub fn box_to_frame(b: &BoundingBox, src: &FrameMeta, dst: &FrameMeta) -> Result<BoundingBox> {
    b.validate()?;
    src.validate()?;
    dst.validate()?;
    if b.frame != src.frame {
        return Err(Error::UnrelatedFrames {
            box_frame: b.frame,
            src_frame: src.frame,
        });
    }
    let (fx, fy) = src.to_full(b.cx, b.cy);
    let (cx, cy) = dst.from_full(fx, fy);
    let s = dst.scale / src.scale;
    BoundingBox::new(cx, cy, b.w * s, b.h * s, dst.frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn full(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h, Frame::FullImage).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = full(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = full(100.0, 100.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_worked_overlap() {
        let a = BoundingBox::from_corners(0.0, 0.0, 2.0, 2.0, Frame::FullImage).unwrap();
        let b = BoundingBox::from_corners(1.0, 1.0, 3.0, 3.0, Frame::FullImage).unwrap();
        assert_relative_eq!(iou(&a, &b).unwrap(), 1.0 / 7.0, max_relative = 1e-12);
    }

    #[test]
    fn iou_shared_edge_is_zero() {
        let a = BoundingBox::from_corners(0.0, 0.0, 2.0, 2.0, Frame::FullImage).unwrap();
        let b = BoundingBox::from_corners(2.0, 0.0, 4.0, 2.0, Frame::FullImage).unwrap();
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_frame_mismatch_errors() {
        let a = full(1.0, 1.0, 1.0, 1.0);
        let b = BoundingBox::new(1.0, 1.0, 1.0, 1.0, Frame::SearchPatch).unwrap();
        assert!(matches!(iou(&a, &b), Err(Error::FrameMismatch(_, _))));
    }

    #[test]
    fn centerness_cases() {
        let c = centerness(&RegressionTargets::new(5.0, 5.0, 5.0, 5.0)).unwrap();
        assert_eq!(c, 1.0);
        let c = centerness(&RegressionTargets::new(1.0, 1.0, 4.0, 4.0)).unwrap();
        assert_relative_eq!(c, 0.25, max_relative = 1e-12);
        let c = centerness(&RegressionTargets::new(0.0, 2.0, 4.0, 2.0)).unwrap();
        assert_eq!(c, 0.0);
        assert!(matches!(
            centerness(&RegressionTargets::new(0.0, 1.0, 0.0, 1.0)),
            Err(Error::DegenerateTargets)
        ));
        assert!(matches!(
            centerness(&RegressionTargets::new(-1.0, 1.0, 1.0, 1.0)),
            Err(Error::NegativeTargetDistance)
        ));
    }

    #[test]
    fn eiou_identity_is_zero() {
        let a = full(3.0, 4.0, 5.0, 6.0);
        assert_eq!(eiou_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn eiou_worked_examples() {
        let pred = BoundingBox::from_corners(0.0, 0.0, 2.0, 2.0, Frame::FullImage).unwrap();
        let gt = BoundingBox::from_corners(1.0, 1.0, 3.0, 3.0, Frame::FullImage).unwrap();
        let expected = 6.0 / 7.0 + 1.0 / 9.0;
        assert_relative_eq!(eiou_loss(&pred, &gt).unwrap(), expected, epsilon = 1e-9);

        let gt2 = BoundingBox::from_corners(0.0, 0.0, 4.0, 4.0, Frame::FullImage).unwrap();
        assert_relative_eq!(eiou_loss(&pred, &gt2).unwrap(), 1.3125, epsilon = 1e-9);
    }

    #[test]
    fn eiou_gradient_matches_finite_differences() {
        let mut rng = 0x243f6a8885a308d3u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        let h = 1e-4;
        for _ in 0..20 {
            let pred = full(
                10.0 + 20.0 * next(),
                10.0 + 20.0 * next(),
                2.0 + 10.0 * next(),
                2.0 + 10.0 * next(),
            );
            let gt = full(
                10.0 + 20.0 * next(),
                10.0 + 20.0 * next(),
                2.0 + 10.0 * next(),
                2.0 + 10.0 * next(),
            );
            let (_, grad) = eiou_loss_grad(&pred, &gt).unwrap();
            for k in 0..4 {
                let mut lo = pred;
                let mut hi = pred;
                match k {
                    0 => {
                        lo.cx -= h;
                        hi.cx += h;
                    }
                    1 => {
                        lo.cy -= h;
                        hi.cy += h;
                    }
                    2 => {
                        lo.w -= h;
                        hi.w += h;
                    }
                    _ => {
                        lo.h -= h;
                        hi.h += h;
                    }
                }
                let fd =
                    (eiou_loss(&hi, &gt).unwrap() - eiou_loss(&lo, &gt).unwrap()) / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (grad[k] - fd).abs() / denom < 1e-3,
                    "param {k}: analytic {} vs fd {}",
                    grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn eiou_terms_are_bounded() {
        let pred = full(5.0, 5.0, 4.0, 3.0);
        let gt = full(9.0, 2.0, 2.0, 6.0);
        let enc = EnclosureStats::of(&pred, &gt).unwrap();
        let denom = enc.wc * enc.wc + enc.hc * enc.hc;
        let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
        assert!(rho2 / denom <= 1.0);
        assert!((pred.w - gt.w).powi(2) / (enc.wc * enc.wc) <= 1.0);
        assert!((pred.h - gt.h).powi(2) / (enc.hc * enc.hc) <= 1.0);
    }

    #[test]
    fn nms_basic_cases() {
        let a = full(5.0, 5.0, 4.0, 4.0);
        assert_eq!(nms(&[a], &[0.5], 0.7).unwrap(), vec![0]);

        // Two identical boxes: the higher score wins.
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.7).unwrap(), vec![1]);

        // A/B overlap above threshold, C far away.
        let b = full(5.5, 5.0, 4.0, 4.0);
        let c = full(50.0, 50.0, 4.0, 4.0);
        assert!(iou(&a, &b).unwrap() > 0.7);
        let kept = nms(&[a, b, c], &[0.9, 0.8, 0.5], 0.7).unwrap();
        assert_eq!(kept, vec![0, 2]);

        assert!(nms(&[], &[], 0.7).unwrap().is_empty());
        assert!(matches!(
            nms(&[a], &[f64::NAN], 0.7),
            Err(Error::NonFiniteScore(0))
        ));
        assert!(matches!(
            nms(&[a], &[0.5], 0.0),
            Err(Error::InvalidThreshold(_))
        ));
    }

    #[test]
    fn nms_equal_scores_prefer_lower_index() {
        let a = full(5.0, 5.0, 4.0, 4.0);
        let kept = nms(&[a, a], &[0.8, 0.8], 0.7).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn center_distance_cases() {
        let a = full(10.0, 10.0, 2.0, 2.0);
        assert_eq!(center_distance(&a, &a, 0.07).unwrap(), 0.0);
        let b = full(13.0, 14.0, 2.0, 2.0);
        assert_relative_eq!(center_distance(&a, &b, 0.07).unwrap(), 0.35, epsilon = 1e-12);
        let c = full(110.0, 10.0, 2.0, 2.0);
        assert_relative_eq!(center_distance(&a, &c, 0.07).unwrap(), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn box_to_frame_cases() {
        let b = full(150.0, 260.0, 20.0, 20.0);
        let ident = box_to_frame(&b, &FrameMeta::FULL, &FrameMeta::FULL).unwrap();
        assert_eq!(ident, b);

        let patch = FrameMeta {
            frame: Frame::SearchPatch,
            origin_x: 100.0,
            origin_y: 200.0,
            scale: 1.0,
        };
        let p = box_to_frame(&b, &FrameMeta::FULL, &patch).unwrap();
        assert_eq!((p.cx, p.cy, p.w, p.h), (50.0, 60.0, 20.0, 20.0));

        let resized = FrameMeta {
            frame: Frame::SearchPatch,
            origin_x: 0.0,
            origin_y: 0.0,
            scale: 1024.0 / 1571.0,
        };
        let wide = full(1571.0 / 2.0, 100.0, 1571.0, 10.0);
        let q = box_to_frame(&wide, &FrameMeta::FULL, &resized).unwrap();
        assert_relative_eq!(q.w, 1024.0, epsilon = 1e-9);
    }

    #[test]
    fn box_to_frame_rejects_unrelated() {
        let b = full(1.0, 1.0, 1.0, 1.0);
        let src = FrameMeta {
            frame: Frame::SearchPatch,
            origin_x: 0.0,
            origin_y: 0.0,
            scale: 1.0,
        };
        assert!(matches!(
            box_to_frame(&b, &src, &FrameMeta::FULL),
            Err(Error::UnrelatedFrames { .. })
        ));
    }
}

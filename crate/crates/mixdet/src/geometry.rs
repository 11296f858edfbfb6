//! Axis-aligned boxes in ltrb pixel coordinates, IoU, the xywh/ltrb
//! transforms and greedy non-maximum suppression.

use crate::real::Real;

/// Axis-aligned rectangle in ltrb pixel coordinates, with an optional class
/// label and score. `class_id` may be a foreground class in `[0, C)` or the
/// background index `C`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox<R = f64> {
    pub l: R,
    pub t: R,
    pub r: R,
    pub b: R,
    pub class_id: Option<usize>,
    pub score: Option<R>,
}

impl<R: Real> BBox<R> {
    pub fn new(l: R, t: R, r: R, b: R) -> Self {
        assert!(
            l.is_finite() && t.is_finite() && r.is_finite() && b.is_finite(),
            "box coordinates must be finite"
        );
        assert!(l <= r && t <= b, "box must satisfy l <= r and t <= b");
        Self { l, t, r, b, class_id: None, score: None }
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn with_score(mut self, score: R) -> Self {
        self.score = Some(score);
        self
    }

    pub fn coords(&self) -> [R; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn width(&self) -> R {
        self.r - self.l
    }

    pub fn height(&self) -> R {
        self.b - self.t
    }

    pub fn area(&self) -> R {
        self.width() * self.height()
    }
}

/// Intersection over union. Degenerate (zero-area) boxes contribute nothing
/// to the intersection; two degenerate boxes yield 0.
pub fn iou<R: Real>(a: &BBox<R>, b: &BBox<R>) -> R {
    let iw = (a.r.min(b.r) - a.l.max(b.l)).max(R::zero());
    let ih = (a.b.min(b.b) - a.t.max(b.t)).max(R::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= R::zero() {
        R::zero()
    } else {
        inter / union
    }
}

/// (cx, cy, w, h) -> (l, t, r, b). Linear, hence differentiable.
pub fn xywh_to_ltrb<R: Real>(cx: R, cy: R, w: R, h: R) -> (R, R, R, R) {
    assert!(w >= R::zero() && h >= R::zero(), "width and height must be non-negative");
    let hw = w * R::half();
    let hh = h * R::half();
    (cx - hw, cy - hh, cx + hw, cy + hh)
}

/// (l, t, r, b) -> (cx, cy, w, h). Exact inverse of [`xywh_to_ltrb`].
pub fn ltrb_to_xywh<R: Real>(l: R, t: R, r: R, b: R) -> (R, R, R, R) {
    ((l + r) * R::half(), (t + b) * R::half(), r - l, b - t)
}

/// Greedy per-class NMS. Boxes of different classes never suppress each
/// other. Ties in score are broken by the lower original index. The output
/// is sorted by descending score.
pub fn nms<R: Real>(dets: &[BBox<R>], iou_threshold: R) -> Vec<BBox<R>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let si = dets[i].score.expect("nms input must carry scores");
        let sj = dets[j].score.expect("nms input must carry scores");
        sj.partial_cmp(&si).unwrap().then(i.cmp(&j))
    });

    let mut keep: Vec<BBox<R>> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = keep.iter().any(|k| {
            k.class_id == candidate.class_id && iou(k, candidate) > iou_threshold
        });
        if !suppressed {
            keep.push(*candidate);
        }
    }
    keep
}

/// Exhaustive O(n^2) reference suppressor with the same tie-break rule;
/// shared oracle for the NMS-based pipelines.
#[cfg(test)]
pub(crate) fn nms_reference(dets: &[BBox], thr: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].score.unwrap().partial_cmp(&dets[i].score.unwrap()).unwrap().then(i.cmp(&j))
    });
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        out.push(dets[i]);
        for &j in &order[pos + 1..] {
            if alive[j] && dets[i].class_id == dets[j].class_id && iou(&dets[i], &dets[j]) > thr {
                alive[j] = false;
            }
        }
    }
    out
}

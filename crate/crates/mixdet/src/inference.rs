//! Turn a mixture model into final detections: pi normalization, component
//! filtering, background suppression and per-class NMS.

use crate::geometry::{nms, BBox};
use crate::mixture::MixtureModel;
use crate::real::Real;

/// A final detection. `class_id` is always a foreground class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection<R = f64> {
    pub bbox: BBox<R>,
    pub class_id: usize,
    pub score: R,
}

/// pi / max(pi); the largest entry becomes exactly 1. Invariant to positive
/// rescaling of pi.
pub fn normalized_pi<R: Real>(pi: &[R]) -> Vec<R> {
    let max = pi.iter().copied().fold(R::zero(), R::max);
    assert!(max > R::zero(), "pi must have a positive maximum");
    pi.iter().map(|&v| v / max).collect()
}

/// Components with normalized pi above `pi_filter` become detections at
/// their location mu, classed by the foreground argmax of p. A component is
/// dropped when its best foreground score falls below `score_filter` or
/// when background is the overall argmax; survivors go through per-class
/// greedy NMS.
pub fn extract_detections<R: Real>(
    model: &MixtureModel<R>,
    pi_filter: R,
    score_filter: R,
    nms_threshold: R,
) -> Vec<Detection<R>> {
    let pi_norm = normalized_pi(&model.pi);
    let background = model.background_class();
    let mut candidates: Vec<BBox<R>> = Vec::new();
    for k in 0..model.num_components() {
        if pi_norm[k] < pi_filter {
            continue;
        }
        let probs = &model.p[k];
        let overall_argmax = (0..probs.len())
            .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap())
            .unwrap();
        if overall_argmax == background {
            continue;
        }
        let class_id = (0..background)
            .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap())
            .unwrap();
        let score = probs[class_id];
        if score < score_filter {
            continue;
        }
        candidates.push(model.component_box(k).with_class(class_id).with_score(score));
    }
    nms(&candidates, nms_threshold)
        .into_iter()
        .map(|b| Detection { class_id: b.class_id.unwrap(), score: b.score.unwrap(), bbox: b })
        .collect()
}

/// One CSV row per detection: `image_id, class_id, score, l, t, r, b`.
pub const DETECTIONS_HEADER: &str = "image_id,class_id,score,l,t,r,b";

pub fn detections_to_csv<R: Real>(rows: &[(String, Vec<Detection<R>>)]) -> String {
    let mut out = String::from(DETECTIONS_HEADER);
    out.push('\n');
    for (image_id, dets) in rows {
        for d in dets {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                image_id, d.class_id, d.score, d.bbox.l, d.bbox.t, d.bbox.r, d.bbox.b
            ));
        }
    }
    out
}

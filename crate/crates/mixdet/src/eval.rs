//! Detection metrics: greedy matching and 101-point interpolated average
//! precision (AP averaged over IoU 0.50:0.05:0.95, plus AP50).

use std::collections::HashMap;

use crate::geometry::{iou, BBox};
use crate::inference::Detection;
use crate::real::Real;

/// One detection paired with the image it came from, so multi-image
/// evaluation can rank all detections globally.
#[derive(Clone, Debug)]
pub struct EvalDetection<R = f64> {
    pub image_id: String,
    pub det: Detection<R>,
}

#[derive(Clone, Debug)]
pub struct EvalGroundTruth<R = f64> {
    pub image_id: String,
    pub bbox: BBox<R>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub per_class_ap50: Vec<(usize, f64)>,
}

impl EvalReport {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("ap,{}\n", self.ap));
        out.push_str(&format!("ap50,{}\n", self.ap50));
        for (class, ap) in &self.per_class_ap50 {
            out.push_str(&format!("ap50_class_{class},{ap}\n"));
        }
        out
    }
}

/// Greedy matching: detections in descending score order each claim the
/// highest-IoU unmatched same-class, same-image ground truth with IoU at or
/// above the threshold. Returns a true-positive flag per detection, in the
/// sorted order alongside the permutation used.
pub fn match_detections<R: Real>(
    dets: &[EvalDetection<R>],
    gts: &[EvalGroundTruth<R>],
    iou_threshold: R,
) -> (Vec<bool>, Vec<usize>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].det.score.partial_cmp(&dets[i].det.score).unwrap().then(i.cmp(&j))
    });

    let mut gt_used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(R, usize)> = None;
        for (g_idx, g) in gts.iter().enumerate() {
            if gt_used[g_idx]
                || g.image_id != d.image_id
                || g.bbox.class_id != Some(d.det.class_id)
            {
                continue;
            }
            let overlap = iou(&d.det.bbox, &g.bbox);
            if overlap >= iou_threshold && best.map(|(b, _)| overlap > b).unwrap_or(true) {
                best = Some((overlap, g_idx));
            }
        }
        match best {
            Some((_, g_idx)) => {
                gt_used[g_idx] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    (flags, order)
}

/// Area under the 101-point interpolated precision-recall curve for one
/// class at one IoU threshold.
fn class_ap<R: Real>(
    dets: &[EvalDetection<R>],
    gts: &[EvalGroundTruth<R>],
    class: usize,
    iou_threshold: R,
) -> f64 {
    let class_gts: Vec<EvalGroundTruth<R>> =
        gts.iter().filter(|g| g.bbox.class_id == Some(class)).cloned().collect();
    if class_gts.is_empty() {
        return 0.0;
    }
    let class_dets: Vec<EvalDetection<R>> =
        dets.iter().filter(|d| d.det.class_id == class).cloned().collect();
    let (flags, _) = match_detections(&class_dets, &class_gts, iou_threshold);

    // Cumulative precision/recall along the ranked list.
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (rank, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        curve.push((
            tp as f64 / class_gts.len() as f64,  // recall
            tp as f64 / (rank + 1) as f64,       // precision
        ));
    }

    // 101-point interpolation: at each recall grid point take the maximum
    // precision achieved at that recall or beyond.
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 101.0
}

/// Mean AP over the classes present in the ground truth at one threshold.
pub fn average_precision<R: Real>(
    dets: &[EvalDetection<R>],
    gts: &[EvalGroundTruth<R>],
    iou_threshold: R,
) -> f64 {
    let classes = present_classes(gts);
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&c| class_ap(dets, gts, c, iou_threshold)).sum::<f64>()
        / classes.len() as f64
}

fn present_classes<R: Real>(gts: &[EvalGroundTruth<R>]) -> Vec<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for g in gts {
        *counts.entry(g.bbox.class_id.expect("ground truth must be labeled")).or_default() += 1;
    }
    let mut classes: Vec<usize> = counts.into_keys().collect();
    classes.sort_unstable();
    classes
}

/// Full report: AP (mean over IoU 0.50:0.05:0.95), AP50, and per-class AP50.
pub fn evaluate<R: Real>(dets: &[EvalDetection<R>], gts: &[EvalGroundTruth<R>]) -> EvalReport {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let ap = thresholds
        .iter()
        .map(|&t| average_precision(dets, gts, R::from_f64_lossy(t)))
        .sum::<f64>()
        / thresholds.len() as f64;
    let half = R::from_f64_lossy(0.5);
    let ap50 = average_precision(dets, gts, half);
    let per_class_ap50 =
        present_classes(gts).into_iter().map(|c| (c, class_ap(dets, gts, c, half))).collect();
    EvalReport { ap, ap50, per_class_ap50 }
}

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::decode::Detection;
use super::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class id {class} out of range for {num_classes} classes")]
    ClassRange { class: usize, num_classes: usize },
    #[error("{preds} prediction lists for {gts} ground-truth lists")]
    ImageCount { preds: usize, gts: usize },
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// `TP/(TP+FP)`, absent without predictions.
    pub precision: Option<f64>,
    /// `TP/(TP+FN)`, absent without ground truth.
    pub recall: Option<f64>,
    /// Area under the interpolated precision-recall curve, absent without
    /// ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub classes: Vec<ClassEval>,
    /// Mean AP over classes that have ground truth; 0 when none do.
    pub map: f64,
}

/// All-points interpolated AP of a ranked list of hit flags against
/// `num_gt` ground-truth boxes.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Precision envelope: best precision at any recall at or beyond this one.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Scores detections against ground truth, image by image.
///
/// Within each class, predictions from all images are ranked by score
/// (ties broken by image, then list position) and each is matched to the
/// unmatched ground-truth box of its image with the highest IoU, provided
/// that IoU reaches `iou_thresh`.
pub fn evaluate(
    preds: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<EvalReport, EvalError> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(EvalError::Threshold(iou_thresh));
    }
    if preds.len() != gts.len() {
        return Err(EvalError::ImageCount {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let check = |class: usize| {
        if class < num_classes {
            Ok(())
        } else {
            Err(EvalError::ClassRange { class, num_classes })
        }
    };
    for d in preds.iter().flatten() {
        check(d.class_id)?;
    }
    for g in gts.iter().flatten() {
        check(g.class_id)?;
    }

    let mut classes = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
        for (img, list) in preds.iter().enumerate() {
            for (k, d) in list.iter().enumerate() {
                if d.class_id == class {
                    ranked.push((img, k, d.score));
                }
            }
        }
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(img, k, _) in &ranked {
            let pred = &preds[img][k].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if g.class_id != class || matched[img][j] {
                    continue;
                }
                let o = iou(pred, &g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                matched[img][j] = true;
            }
            hits.push(best.is_some());
        }

        let tp = hits.iter().filter(|&&h| h).count();
        let fp = hits.len() - tp;
        let fn_count = num_gt - tp;
        classes.push(ClassEval {
            class_id: class,
            num_gt,
            tp,
            fp,
            fn_count,
            precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
            recall: (num_gt > 0).then(|| tp as f64 / num_gt as f64),
            ap: (num_gt > 0).then(|| average_precision(&hits, num_gt)),
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalReport {
        iou_thresh,
        classes,
        map,
    })
}

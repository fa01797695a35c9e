use thiserror::Error;

use super::decode::Detection;
use super::geometry::iou;

/// Gaussian Soft-NMS parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftNmsConfig {
    /// Gaussian decay width; smaller values suppress harder.
    pub sigma: f64,
    /// Only boxes overlapping the selected box by at least this IoU are
    /// rescored. Zero rescales every same-class box.
    pub t_nms: f64,
    /// Boxes whose score falls below this value are discarded.
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        SoftNmsConfig {
            sigma: 0.5,
            t_nms: 0.45,
            score_floor: 0.001,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NmsConfigError {
    #[error("sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("t_nms must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("score_floor must lie in [0, 1], got {0}")]
    Floor(f64),
}

impl SoftNmsConfig {
    pub fn validate(&self) -> Result<(), NmsConfigError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(NmsConfigError::Sigma(self.sigma));
        }
        if !(0.0..=1.0).contains(&self.t_nms) {
            return Err(NmsConfigError::Threshold(self.t_nms));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(NmsConfigError::Floor(self.score_floor));
        }
        Ok(())
    }
}

// Highest score wins; among equal scores the earliest input wins.
fn take_best(cands: &mut Vec<(usize, Detection)>) -> Option<(usize, Detection)> {
    let mut best: Option<usize> = None;
    for (k, (i, d)) in cands.iter().enumerate() {
        match best {
            None => best = Some(k),
            Some(b) => {
                let (bi, bd) = &cands[b];
                if d.score > bd.score || (d.score == bd.score && i < bi) {
                    best = Some(k);
                }
            }
        }
    }
    best.map(|k| cands.swap_remove(k))
}

/// Gaussian Soft-NMS.
///
/// Repeatedly moves the highest-scoring candidate to the output and
/// multiplies the score of every remaining same-class candidate whose IoU
/// with it is at least `t_nms` by `exp(−IoU/σ)`. Candidates below
/// `score_floor` are dropped. The result is sorted by score, descending.
pub fn soft_nms(dets: &[Detection], cfg: &SoftNmsConfig) -> Vec<Detection> {
    let mut cands: Vec<(usize, Detection)> = dets
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, d)| d.score >= cfg.score_floor)
        .collect();
    let mut kept: Vec<(usize, Detection)> = Vec::with_capacity(cands.len());
    while let Some((mi, m)) = take_best(&mut cands) {
        cands.retain_mut(|(_, d)| {
            if d.class_id != m.class_id {
                return true;
            }
            let o = iou(&m.bbox, &d.bbox);
            if o >= cfg.t_nms {
                d.score *= (-o / cfg.sigma).exp();
            }
            d.score >= cfg.score_floor
        });
        kept.push((mi, m));
    }
    kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    kept.into_iter().map(|(_, d)| d).collect()
}

/// Classic per-class NMS: a box is removed when it overlaps an already kept
/// box of its class by at least `threshold`.
pub fn hard_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) < threshold)
        {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::super::geometry::BBox;
    use super::*;

    fn det(cx: f64, w: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(cx, 0.0, w, 1.0),
            class_id: 0,
            score,
        }
    }

    #[test]
    fn single_box_unchanged() {
        let d = [det(0.0, 1.0, 0.7)];
        assert_eq!(soft_nms(&d, &SoftNmsConfig::default()), d.to_vec());
    }

    #[test]
    fn disjoint_boxes_keep_scores() {
        let d = [det(0.0, 1.0, 0.7), det(5.0, 1.0, 0.9)];
        let out = soft_nms(&d, &SoftNmsConfig::default());
        assert_eq!(out, vec![d[1], d[0]]);
    }

    #[test]
    fn half_overlap_rescored() {
        // [0,3] and [1,4]: intersection 2, union 4.
        let a = Detection {
            bbox: BBox::from_corners(0.0, 0.0, 3.0, 1.0),
            class_id: 0,
            score: 0.9,
        };
        let b = Detection {
            bbox: BBox::from_corners(1.0, 0.0, 4.0, 1.0),
            class_id: 0,
            score: 0.8,
        };
        assert!((iou(&a.bbox, &b.bbox) - 0.5).abs() < 1e-15);
        let cfg = SoftNmsConfig {
            t_nms: 0.0,
            ..Default::default()
        };
        let out = soft_nms(&[a, b], &cfg);
        assert_eq!(out.len(), 2);
        assert!((out[1].score - 0.8 * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn other_classes_never_suppress() {
        let mut b = det(0.0, 1.0, 0.8);
        b.class_id = 1;
        let out = soft_nms(&[det(0.0, 1.0, 0.9), b], &SoftNmsConfig::default());
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn config_validation() {
        assert!(SoftNmsConfig::default().validate().is_ok());
        let bad = SoftNmsConfig {
            sigma: 0.0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(NmsConfigError::Sigma(0.0)));
    }
}

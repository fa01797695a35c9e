use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geometry::BBox;
use crate::netdef::HeadOutput;
use crate::tensor::Scalar;

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("head has {channels} channels, expected {anchors} anchors × (5 + {classes})")]
    Channels {
        channels: usize,
        anchors: usize,
        classes: usize,
    },
    #[error("batch index {index} out of range for batch of {n}")]
    Batch { index: usize, n: usize },
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Offset of field `field` of anchor `anchor` within a head's channels.
/// Fields 0–3 are the box terms, 4 the objectness, 5.. the class logits.
#[inline]
pub const fn channel(anchor: usize, field: usize, num_classes: usize) -> usize {
    anchor * (5 + num_classes) + field
}

/// Decodes one batch item of a head into pre-NMS detections.
///
/// `anchors` are the priors of this head in pixels at the network input
/// resolution `(img_w, img_h)`. For every cell and anchor the best class is
/// emitted when `σ(objectness)·σ(class logit)` reaches `score_floor`.
pub fn decode<T: Scalar>(
    head: &HeadOutput<T>,
    batch: usize,
    anchors: &[(f64, f64)],
    num_classes: usize,
    img_w: f64,
    img_h: f64,
    score_floor: f64,
) -> Result<Vec<Detection>, DecodeError> {
    let shape = head.raw.shape();
    if shape.c != anchors.len() * (5 + num_classes) {
        return Err(DecodeError::Channels {
            channels: shape.c,
            anchors: anchors.len(),
            classes: num_classes,
        });
    }
    if batch >= shape.n {
        return Err(DecodeError::Batch { index: batch, n: shape.n });
    }
    let (gh, gw) = (shape.h, shape.w);
    let stride_x = img_w / gw as f64;
    let stride_y = img_h / gh as f64;
    let plane = shape.plane();
    let item = head.raw.item(batch);
    let at = |ch: usize, y: usize, x: usize| item[ch * plane + y * gw + x].as_f64();

    let mut out = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            for (a, &(pw, ph)) in anchors.iter().enumerate() {
                let obj = sigmoid(at(channel(a, 4, num_classes), y, x));
                if obj < score_floor {
                    continue;
                }
                let (mut best, mut best_logit) = (0, f64::NEG_INFINITY);
                for c in 0..num_classes {
                    let l = at(channel(a, 5 + c, num_classes), y, x);
                    if l > best_logit {
                        best = c;
                        best_logit = l;
                    }
                }
                let score = if num_classes == 0 { obj } else { obj * sigmoid(best_logit) };
                if score < score_floor {
                    continue;
                }
                let tx = at(channel(a, 0, num_classes), y, x);
                let ty = at(channel(a, 1, num_classes), y, x);
                let tw = at(channel(a, 2, num_classes), y, x);
                let th = at(channel(a, 3, num_classes), y, x);
                out.push(Detection {
                    bbox: BBox {
                        cx: (sigmoid(tx) + x as f64) * stride_x,
                        cy: (sigmoid(ty) + y as f64) * stride_y,
                        w: pw * tw.exp(),
                        h: ph * th.exp(),
                    },
                    class_id: best,
                    score: score.clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn head(grid: usize, classes: usize, anchors: usize, set: &[(usize, usize, usize, f32)]) -> HeadOutput {
        let mut raw = Tensor::full(Shape::new(1, anchors * (5 + classes), grid, grid), -20.0f32);
        for a in 0..anchors {
            for k in 0..4 {
                for y in 0..grid {
                    for x in 0..grid {
                        raw.set(0, channel(a, k, classes), y, x, 0.0);
                    }
                }
            }
        }
        for &(ch, y, x, v) in set {
            raw.set(0, ch, y, x, v);
        }
        HeadOutput { scale_index: 0, raw }
    }

    #[test]
    fn zero_offsets_land_mid_cell() {
        let h = head(13, 1, 1, &[(4, 7, 5, 10.0), (5, 7, 5, 10.0)]);
        let d = decode(&h, 0, &[(2.0, 3.0)], 1, 416.0, 416.0, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, BBox::new(176.0, 240.0, 2.0, 3.0));
    }

    #[test]
    fn log_width_doubles_prior() {
        let ln2 = std::f32::consts::LN_2;
        let h = head(13, 1, 1, &[(2, 0, 0, ln2), (4, 0, 0, 10.0), (5, 0, 0, 10.0)]);
        let d = decode(&h, 0, &[(8.0, 8.0)], 1, 416.0, 416.0, 0.5).unwrap();
        assert!((d[0].bbox.w - 16.0).abs() < 1e-5);
    }

    #[test]
    fn large_offset_stays_in_cell() {
        let h = head(13, 1, 1, &[(0, 0, 3, 10.0), (4, 0, 3, 10.0), (5, 0, 3, 10.0)]);
        let d = decode(&h, 0, &[(8.0, 8.0)], 1, 416.0, 416.0, 0.5).unwrap();
        assert!(d[0].bbox.cx < 4.0 * 32.0 && d[0].bbox.cx > 3.99 * 32.0);
    }

    #[test]
    fn picks_argmax_class_and_product_score() {
        let h = head(2, 3, 1, &[(4, 1, 1, 0.0), (6, 1, 1, 2.0), (7, 1, 1, 1.0)]);
        let d = decode(&h, 0, &[(4.0, 4.0)], 3, 64.0, 64.0, 0.1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_id, 1);
        assert!((d[0].score - 0.5 * sigmoid(2.0)).abs() < 1e-7);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let h = head(2, 3, 2, &[]);
        assert!(matches!(
            decode(&h, 0, &[(1.0, 1.0)], 3, 64.0, 64.0, 0.1),
            Err(DecodeError::Channels { .. })
        ));
        assert!(matches!(
            decode(&h, 1, &[(1.0, 1.0), (2.0, 2.0)], 3, 64.0, 64.0, 0.1),
            Err(DecodeError::Batch { .. })
        ));
    }
}

use serde::Serialize;

use super::targets::TargetAssignment;
use super::TrainError;
use crate::netdef::HeadOutput;
use crate::postprocess::{box_loss, channel, sigmoid, BBox, BoxLoss};
use crate::tensor::{Scalar, Tensor};

/// Probabilities entering the cross-entropy are clamped to
/// `[PROB_EPS, 1 − PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Log-scale box offsets are clamped to `±MAX_LOG_SCALE` before
/// exponentiation so a diverging prediction cannot overflow.
pub const MAX_LOG_SCALE: f64 = 8.0;

/// Loss terms averaged over the images of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossReport {
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
}

impl LossReport {
    fn from_parts(loss_box: f64, loss_obj: f64, loss_cls: f64) -> Self {
        LossReport {
            loss_box,
            loss_obj,
            loss_cls,
            loss_total: loss_box + loss_obj + loss_cls,
        }
    }
}

/// Binary cross-entropy of `σ(logit)` against `target` and its derivative
/// with respect to the logit. The derivative is zero where the probability
/// was clamped.
#[inline]
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
    let grad = if pc == p { p - target } else { 0.0 };
    (loss, grad)
}

/// Box, objectness and class loss over a batch, with CIoU box regression.
pub fn total_loss<T: Scalar>(heads: &[HeadOutput<T>], targets: &[TargetAssignment]) -> Result<LossReport, TrainError> {
    loss_and_grad(heads, targets, BoxLoss::Ciou).map(|(r, _)| r)
}

/// Loss report plus its gradient with respect to every head's raw output,
/// in the order of `heads`.
///
/// The batch loss is the mean over images of the per-image sum over slots.
/// Every slot contributes an objectness cross-entropy, down-weighted on
/// negatives; positive slots add the box loss of the decoded prediction and
/// one cross-entropy per class against the one-hot label.
pub fn loss_and_grad<T: Scalar>(
    heads: &[HeadOutput<T>],
    targets: &[TargetAssignment],
    kind: BoxLoss,
) -> Result<(LossReport, Vec<Tensor<T>>), TrainError> {
    let n = targets.len();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let mut grads = Vec::with_capacity(heads.len());
    let (mut l_box, mut l_obj, mut l_cls) = (0.0, 0.0, 0.0);
    let inv_n = 1.0 / n as f64;

    for head in heads {
        let shape = head.raw.shape();
        if shape.n != n {
            return Err(TrainError::Mismatch(format!(
                "head {} has batch {}, targets cover {n} images",
                head.scale_index, shape.n
            )));
        }
        if head.raw.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite(format!("head {} logits", head.scale_index)));
        }
        let mut grad = Tensor::<T>::zeros(shape);
        let plane = shape.plane();

        for (b, t) in targets.iter().enumerate() {
            let st = t.scales.get(head.scale_index).ok_or_else(|| {
                TrainError::Mismatch(format!("no targets for head {}", head.scale_index))
            })?;
            let c = t.num_classes;
            let a_count = st.anchors.len();
            if (st.grid_h, st.grid_w) != (shape.h, shape.w) || shape.c != a_count * (5 + c) {
                return Err(TrainError::Mismatch(format!(
                    "head {} is {}, targets expect {}x{} grid with {} channels",
                    head.scale_index,
                    shape,
                    st.grid_h,
                    st.grid_w,
                    a_count * (5 + c)
                )));
            }
            let stride_x = t.img_w / shape.w as f64;
            let stride_y = t.img_h / shape.h as f64;
            let item = head.raw.item(b);
            let gitem = grad.item_mut(b);
            let at = |ch: usize, pos: usize| item[ch * plane + pos].as_f64();

            for a in 0..a_count {
                let (pw, ph) = st.anchors[a];
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        let pos = y * shape.w + x;
                        let slot = st.get(a, y, x);

                        let obj_ch = channel(a, 4, c);
                        let (target, weight) = match slot {
                            Some(_) => (1.0, 1.0),
                            None => (0.0, t.lambda_noobj),
                        };
                        let (lo, go) = bce_with_logit(at(obj_ch, pos), target);
                        l_obj += weight * lo;
                        gitem[obj_ch * plane + pos] = T::from_f64(weight * go * inv_n);

                        let Some(slot) = slot else { continue };

                        let tx = at(channel(a, 0, c), pos);
                        let ty = at(channel(a, 1, c), pos);
                        let tw = at(channel(a, 2, c), pos);
                        let th = at(channel(a, 3, c), pos);
                        let (sx, sy) = (sigmoid(tx), sigmoid(ty));
                        let tw_c = tw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
                        let th_c = th.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
                        let pred = BBox::new(
                            (sx + x as f64) * stride_x,
                            (sy + y as f64) * stride_y,
                            pw * tw_c.exp(),
                            ph * th_c.exp(),
                        );
                        let bl = box_loss(kind, &pred, &slot.bbox);
                        l_box += bl.loss;
                        let d = [
                            bl.grad[0] * sx * (1.0 - sx) * stride_x,
                            bl.grad[1] * sy * (1.0 - sy) * stride_y,
                            if tw_c == tw { bl.grad[2] * pred.w } else { 0.0 },
                            if th_c == th { bl.grad[3] * pred.h } else { 0.0 },
                        ];
                        for (k, dk) in d.into_iter().enumerate() {
                            gitem[channel(a, k, c) * plane + pos] = T::from_f64(dk * inv_n);
                        }

                        for cls in 0..c {
                            let ch = channel(a, 5 + cls, c);
                            let want = if cls == slot.class_id { 1.0 } else { 0.0 };
                            let (lc, gc) = bce_with_logit(at(ch, pos), want);
                            l_cls += lc;
                            gitem[ch * plane + pos] = T::from_f64(gc * inv_n);
                        }
                    }
                }
            }
        }
        grads.push(grad);
    }

    let report = LossReport::from_parts(l_box * inv_n, l_obj * inv_n, l_cls * inv_n);
    if !report.loss_total.is_finite() {
        return Err(TrainError::NonFinite("loss".into()));
    }
    Ok((report, grads))
}

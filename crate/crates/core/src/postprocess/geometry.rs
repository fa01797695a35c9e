//! Axis-aligned box geometry: IoU and the CIoU/DIoU regression losses with
//! their analytic gradients.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Center-size box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`
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

    pub fn is_valid(&self) -> bool {
        self.w >= 0.0 && self.h >= 0.0 && self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    overlap(ax1, ax2, bx1, bx2) * overlap(ay1, ay2, by1, by2)
}

// Area from the corner extents, so a box's overlap with itself equals its
// area exactly.
fn corner_area(b: &BBox) -> f64 {
    let (x1, y1, x2, y2) = b.corners();
    (x2 - x1) * (y2 - y1)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Which penalty terms the box loss carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoxLoss {
    /// `1 − IoU + ρ²/c²`
    Diou,
    /// DIoU plus the aspect-ratio consistency term `α·v`.
    #[default]
    Ciou,
}

/// `arctan(w/h)` with `arctan(x/0⁺) = π/2`.
fn aspect_angle(w: f64, h: f64) -> f64 {
    if h > 0.0 {
        (w / h).atan()
    } else {
        PI / 2.0
    }
}

/// Loss value and its gradient with respect to the predicted
/// `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLossGrad {
    pub loss: f64,
    pub iou: f64,
    pub grad: [f64; 4],
}

pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    box_loss(BoxLoss::Ciou, pred, gt).loss
}

pub fn diou_loss(pred: &BBox, gt: &BBox) -> f64 {
    box_loss(BoxLoss::Diou, pred, gt).loss
}

// Derivatives of one axis of the intersection and enclosing extents with
// respect to the predicted (center, size) along that axis.
struct Axis {
    /// Extents of the prediction and the target along this axis.
    span: f64,
    gspan: f64,
    inter: f64,
    d_inter: [f64; 2],
    enclose: f64,
    d_enclose: [f64; 2],
}

fn axis(c: f64, s: f64, gc: f64, gs: f64) -> Axis {
    let (lo, hi) = (c - s / 2.0, c + s / 2.0);
    let (glo, ghi) = (gc - gs / 2.0, gc + gs / 2.0);
    let hi_min = hi < ghi;
    let lo_max = lo > glo;
    let raw = hi.min(ghi) - lo.max(glo);
    let (inter, d_inter) = if raw > 0.0 {
        let dc = f64::from(u8::from(hi_min)) - f64::from(u8::from(lo_max));
        let ds = 0.5 * f64::from(u8::from(hi_min)) + 0.5 * f64::from(u8::from(lo_max));
        (raw, [dc, ds])
    } else {
        (0.0, [0.0, 0.0])
    };
    let hi_max = hi >= ghi;
    let lo_min = lo <= glo;
    let enclose = hi.max(ghi) - lo.min(glo);
    let dc = f64::from(u8::from(hi_max)) - f64::from(u8::from(lo_min));
    let ds = 0.5 * f64::from(u8::from(hi_max)) + 0.5 * f64::from(u8::from(lo_min));
    Axis {
        span: hi - lo,
        gspan: ghi - glo,
        inter,
        d_inter,
        enclose,
        d_enclose: [dc, ds],
    }
}

/// Box regression loss with its full analytic gradient, including the
/// dependence of the trade-off weight `α` on the prediction.
pub fn box_loss(kind: BoxLoss, pred: &BBox, gt: &BBox) -> BoxLossGrad {
    let ax = axis(pred.cx, pred.w, gt.cx, gt.w);
    let ay = axis(pred.cy, pred.h, gt.cy, gt.h);

    // Gradient vectors are ordered (cx, cy, w, h).
    let inter = ax.inter * ay.inter;
    let d_inter = [
        ax.d_inter[0] * ay.inter,
        ay.d_inter[0] * ax.inter,
        ax.d_inter[1] * ay.inter,
        ay.d_inter[1] * ax.inter,
    ];
    let union = ax.span * ay.span + ax.gspan * ay.gspan - inter;
    let (iou, d_iou) = if union > 0.0 {
        let d_union = [
            -d_inter[0],
            -d_inter[1],
            ay.span - d_inter[2],
            ax.span - d_inter[3],
        ];
        let u2 = union * union;
        let mut d = [0.0; 4];
        for k in 0..4 {
            d[k] = (d_inter[k] * union - inter * d_union[k]) / u2;
        }
        (inter / union, d)
    } else {
        (0.0, [0.0; 4])
    };

    let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let d_rho2 = [2.0 * (pred.cx - gt.cx), 2.0 * (pred.cy - gt.cy), 0.0, 0.0];
    let c2 = ax.enclose.powi(2) + ay.enclose.powi(2);
    let (dist, d_dist) = if c2 > 0.0 {
        let d_c2 = [
            2.0 * ax.enclose * ax.d_enclose[0],
            2.0 * ay.enclose * ay.d_enclose[0],
            2.0 * ax.enclose * ax.d_enclose[1],
            2.0 * ay.enclose * ay.d_enclose[1],
        ];
        let mut d = [0.0; 4];
        for k in 0..4 {
            d[k] = (d_rho2[k] * c2 - rho2 * d_c2[k]) / (c2 * c2);
        }
        (rho2 / c2, d)
    } else {
        (0.0, [0.0; 4])
    };

    let mut loss = 1.0 - iou + dist;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = -d_iou[k] + d_dist[k];
    }

    if kind == BoxLoss::Ciou {
        let scale = 4.0 / (PI * PI);
        let delta = aspect_angle(gt.w, gt.h) - aspect_angle(pred.w, pred.h);
        let v = scale * delta * delta;
        let norm2 = pred.w * pred.w + pred.h * pred.h;
        let d_v = if pred.h > 0.0 && norm2 > 0.0 {
            // d atan(w/h) = (h dw − w dh) / (w² + h²)
            let k = -2.0 * scale * delta / norm2;
            [0.0, 0.0, k * pred.h, -k * pred.w]
        } else {
            [0.0; 4]
        };
        let denom = 1.0 - iou + v;
        if denom > 0.0 {
            loss += v * v / denom;
            let a = 2.0 * v / denom - v * v / (denom * denom);
            let b = v * v / (denom * denom);
            for k in 0..4 {
                grad[k] += a * d_v[k] + b * d_iou[k];
            }
        }
    }

    BoxLossGrad { loss, iou, grad }
}

use super::TrainError;
use crate::anchors::AnchorSet;
use crate::postprocess::{iou, BBox, GroundTruth};

/// The ground truth a positive slot regresses towards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotTarget {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Positive slots of one head, indexed `(anchor, y, x)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub anchors: Vec<(f64, f64)>,
    pub slots: Vec<Option<SlotTarget>>,
}

impl ScaleTargets {
    #[inline]
    pub fn slot_index(&self, anchor: usize, y: usize, x: usize) -> usize {
        (anchor * self.grid_h + y) * self.grid_w + x
    }

    pub fn get(&self, anchor: usize, y: usize, x: usize) -> Option<&SlotTarget> {
        self.slots[self.slot_index(anchor, y, x)].as_ref()
    }

    pub fn positives(&self) -> usize {
        self.slots.iter().flatten().count()
    }
}

/// Per-image training targets for every head, coarsest grid first.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub scales: Vec<ScaleTargets>,
    pub num_classes: usize,
    pub img_w: f64,
    pub img_h: f64,
    /// Weight of the objectness term on negative slots.
    pub lambda_noobj: f64,
}

pub const DEFAULT_LAMBDA_NOOBJ: f64 = 0.5;

impl TargetAssignment {
    pub fn positives(&self) -> usize {
        self.scales.iter().map(ScaleTargets::positives).sum()
    }
}

fn canonical_order(a: &GroundTruth, b: &GroundTruth) -> std::cmp::Ordering {
    a.class_id
        .cmp(&b.class_id)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Assigns every ground-truth box to one `(scale, cell, anchor)` slot.
///
/// The cell is the one containing the box center on that scale's grid. Among
/// all anchors of all scales the one with the highest IoU against the box
/// (both centered at the origin) is preferred; if its slot is already taken
/// the next-best anchor is used. Boxes are processed in a canonical order so
/// the result does not depend on the order of `gts`.
///
/// `grids` lists `(S_h, S_w)` per head, coarsest first, matching the anchor
/// grouping of [`AnchorSet::for_scale`].
pub fn assign_targets(
    gts: &[GroundTruth],
    anchors: &AnchorSet,
    grids: &[(usize, usize)],
    img_w: f64,
    img_h: f64,
    num_classes: usize,
) -> Result<TargetAssignment, TrainError> {
    let mut scales = Vec::with_capacity(grids.len());
    for (s, &(gh, gw)) in grids.iter().enumerate() {
        let group = anchors.for_scale(s, grids.len())?.to_vec();
        scales.push(ScaleTargets {
            grid_h: gh,
            grid_w: gw,
            slots: vec![None; group.len() * gh * gw],
            anchors: group,
        });
    }

    for (index, g) in gts.iter().enumerate() {
        let b = g.bbox;
        if !(b.w > 0.0 && b.h > 0.0 && b.is_valid()) {
            return Err(TrainError::DegenerateBox { index, w: b.w, h: b.h });
        }
        if !(0.0..img_w).contains(&b.cx) || !(0.0..img_h).contains(&b.cy) {
            return Err(TrainError::OutsideCanvas { index, cx: b.cx, cy: b.cy });
        }
        if g.class_id >= num_classes {
            return Err(TrainError::ClassRange {
                class: g.class_id,
                num_classes,
            });
        }
    }

    let mut order: Vec<&GroundTruth> = gts.iter().collect();
    order.sort_by(|a, b| canonical_order(a, b));

    for g in order {
        let shape = BBox::new(0.0, 0.0, g.bbox.w, g.bbox.h);
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (s, st) in scales.iter().enumerate() {
            for (a, &(pw, ph)) in st.anchors.iter().enumerate() {
                ranked.push((iou(&shape, &BBox::new(0.0, 0.0, pw, ph)), s, a));
            }
        }
        ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

        let mut placed = false;
        for &(_, s, a) in &ranked {
            let st = &mut scales[s];
            let x = ((g.bbox.cx * st.grid_w as f64 / img_w).floor() as usize).min(st.grid_w - 1);
            let y = ((g.bbox.cy * st.grid_h as f64 / img_h).floor() as usize).min(st.grid_h - 1);
            let i = st.slot_index(a, y, x);
            if st.slots[i].is_none() {
                st.slots[i] = Some(SlotTarget {
                    bbox: g.bbox,
                    class_id: g.class_id,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(TrainError::SlotsExhausted {
                cx: g.bbox.cx,
                cy: g.bbox.cy,
            });
        }
    }

    Ok(TargetAssignment {
        scales,
        num_classes,
        img_w,
        img_h,
        lambda_noobj: DEFAULT_LAMBDA_NOOBJ,
    })
}

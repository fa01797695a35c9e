//! The Edge YOLO graph: pruned CSP backbone (layers 0–16, SPP at the
//! 52-grid), CSP neck (17–34), then top-down FPN wiring and three two-conv
//! heads at the 13, 26 and 52 grids.

use super::layer::{LayerKind, LayerSpec};
use super::{NetError, NetGraph};
use crate::anchors::AnchorSet;
use crate::tensor::Scalar;

/// Shipped config text of the full-width 416×416 preset with 80 classes and
/// six anchors per scale.
pub const EDGE_YOLO_416: &str = include_str!("../../configs/edge-yolo-416.net");

#[derive(Debug, Clone)]
pub struct PresetOptions {
    pub input_w: usize,
    pub input_h: usize,
    pub input_c: usize,
    /// Every filter count is divided by this factor.
    pub width_divisor: usize,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            input_w: 416,
            input_h: 416,
            input_c: 3,
            width_divisor: 1,
        }
    }
}

/// Full-size preset at 416×416.
pub fn build_edge_yolo<T: Scalar>(
    num_classes: usize,
    anchors: AnchorSet,
    anchors_per_scale: usize,
) -> Result<NetGraph<T>, NetError> {
    build_edge_yolo_with(num_classes, anchors, anchors_per_scale, &PresetOptions::default())
}

pub fn build_edge_yolo_with<T: Scalar>(
    num_classes: usize,
    anchors: AnchorSet,
    anchors_per_scale: usize,
    opts: &PresetOptions,
) -> Result<NetGraph<T>, NetError> {
    if !anchors.len().is_multiple_of(3) {
        return Err(NetError::Anchors(format!(
            "{} anchors cannot be grouped over three scales",
            anchors.len()
        )));
    }
    if anchors.len() != 3 * anchors_per_scale {
        return Err(NetError::Anchors(format!(
            "expected {} anchors for {anchors_per_scale} per scale, got {}",
            3 * anchors_per_scale,
            anchors.len()
        )));
    }
    if opts.width_divisor == 0 {
        return Err(NetError::Parse {
            line: 0,
            msg: "width divisor must be positive".into(),
        });
    }
    let d = opts.width_divisor;
    let f = |n: usize| (n / d).max(1);
    let out = anchors_per_scale * (5 + num_classes);
    use LayerKind as K;
    let kinds = vec![
        // backbone
        K::cbl(3, 2, f(32)),            // 0: 208×208×32
        K::cbl(3, 2, f(64)),            // 1: 104×104×64
        K::cbl(3, 1, f(64)),            // 2: 104×104×64
        K::split(2, 1),                 // 3: 104×104×32
        K::cbl(3, 1, f(32)),            // 4
        K::cbl(3, 1, f(32)),            // 5
        K::route(&[5, 4]),              // 6: 104×104×64
        K::cbl(1, 1, f(64)),            // 7
        K::route(&[2, 7]),              // 8: 104×104×128
        K::Max { kernel: 2, stride: 2 }, // 9: 52×52×128
        K::cbl(1, 1, f(128)),           // 10
        K::Max { kernel: 5, stride: 1 }, // 11
        K::route(&[10]),                // 12
        K::Max { kernel: 9, stride: 1 }, // 13
        K::route(&[10]),                // 14
        K::Max { kernel: 13, stride: 1 }, // 15
        K::route(&[15, 13, 11, 10]),    // 16: 52×52×512
        // neck
        K::cbl(1, 1, f(256)),           // 17
        K::cbl(3, 1, f(128)),           // 18
        K::split(18, 1),                // 19: 52×52×64
        K::cbl(3, 1, f(64)),            // 20
        K::cbl(3, 1, f(64)),            // 21
        K::route(&[21, 20]),            // 22: 52×52×128
        K::cbl(1, 1, f(128)),           // 23
        K::route(&[18, 23]),            // 24: 52×52×256
        K::Max { kernel: 2, stride: 2 }, // 25: 26×26×256
        K::cbl(1, 1, f(128)),           // 26
        K::cbl(3, 1, f(256)),           // 27
        K::split(27, 1),                // 28: 26×26×128
        K::cbl(3, 1, f(128)),           // 29
        K::cbl(3, 1, f(128)),           // 30
        K::route(&[30, 29]),            // 31: 26×26×256
        K::cbl(1, 1, f(256)),           // 32
        K::route(&[32, 27]),            // 33: 26×26×512
        K::Max { kernel: 2, stride: 2 }, // 34: 13×13×512
        // 13-grid head
        K::cbl(1, 1, f(256)),           // 35
        K::cbl(3, 1, f(512)),           // 36
        K::linear_conv(1, out),         // 37
        K::Head { scale_index: 0 },     // 38
        // top-down to 26
        K::route(&[35]),                // 39
        K::cbl(1, 1, f(128)),           // 40
        K::Upsample,                    // 41: 26×26×128
        K::route(&[41, 33]),            // 42: 26×26×640
        K::cbl(1, 1, f(128)),           // 43
        K::cbl(3, 1, f(256)),           // 44
        K::linear_conv(1, out),         // 45
        K::Head { scale_index: 1 },     // 46
        // top-down to 52
        K::route(&[43]),                // 47
        K::cbl(1, 1, f(64)),            // 48
        K::Upsample,                    // 49: 52×52×64
        K::route(&[49, 24]),            // 50: 52×52×320
        K::cbl(1, 1, f(64)),            // 51
        K::cbl(3, 1, f(128)),           // 52
        K::linear_conv(1, out),         // 53
        K::Head { scale_index: 2 },     // 54
    ];
    let layers = kinds
        .into_iter()
        .enumerate()
        .map(|(index, kind)| LayerSpec { index, kind, line: 0 })
        .collect();
    NetGraph::from_layers((opts.input_w, opts.input_h, opts.input_c), num_classes, layers)?.with_anchors(anchors)
}

//! From raw head tensors to final boxes, and detector evaluation.

mod decode;
mod eval;
mod geometry;
mod nms;

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

pub use decode::{channel, decode, sigmoid, DecodeError, Detection};
pub use eval::{average_precision, evaluate, ClassEval, EvalError, EvalReport, GroundTruth};
pub use geometry::{box_loss, ciou_loss, diou_loss, intersection, iou, BBox, BoxLoss, BoxLossGrad};
pub use nms::{hard_nms, soft_nms, NmsConfigError, SoftNmsConfig};

/// One line of a detection output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub class: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionRecord {
    pub fn new(image: impl Into<String>, d: &Detection) -> Self {
        DetectionRecord {
            image: image.into(),
            class: d.class_id,
            score: d.score,
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: BBox::new(self.cx, self.cy, self.w, self.h),
            class_id: self.class,
            score: self.score,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<'a>(mut sink: impl Write, records: impl IntoIterator<Item = &'a DetectionRecord>) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

pub fn read_jsonl(source: impl BufRead) -> io::Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let d = Detection {
            bbox: BBox::new(1.5, 2.0, 3.0, 4.25),
            class_id: 7,
            score: 0.625,
        };
        let recs = vec![DetectionRecord::new("a.png", &d), DetectionRecord::new("b.png", &d)];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"image\":\"a.png\",\"class\":7,"));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), recs);
        assert_eq!(recs[0].detection(), d);
    }
}

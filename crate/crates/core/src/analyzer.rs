//! Static cost analysis of a network graph and comparison against a
//! reference table.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netdef::{LayerKind, NetGraph, HEADER_LEN};
use crate::tensor::{Scalar, Shape};

/// Tolerance on BFLOPS cells, which are printed to three decimals.
pub const BFLOPS_TOLERANCE: f64 = 0.0005;

/// Reference table shipped with the preset.
pub const EDGE_YOLO_416_GOLDEN: &str = include_str!("../configs/edge-yolo-416.golden.csv");

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("golden table: {0}")]
    Csv(#[from] csv::Error),
    #[error("golden table: bad known-discrepancy directive `{0}`")]
    Directive(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    pub size: Option<usize>,
    pub stride: Option<usize>,
    pub filters: Option<usize>,
    pub output: Shape,
    pub params: usize,
    pub bflops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_bflops: f64,
    /// Size of the weights file for this graph.
    pub serialized_bytes: usize,
}

fn layer_cost(kind: &LayerKind, input: Shape, output: Shape) -> (usize, f64) {
    let out_plane = (output.h * output.w) as f64;
    match *kind {
        LayerKind::Conv {
            kernel,
            filters,
            batch_norm,
            ..
        } => {
            let k2 = kernel * kernel;
            let mut params = k2 * input.c * filters + filters;
            if batch_norm {
                params += 4 * filters;
            }
            let flops = 2.0 * (k2 * input.c * filters) as f64 * out_plane;
            (params, flops / 1e9)
        }
        LayerKind::Max { kernel, .. } => (0, (kernel * kernel * output.c) as f64 * out_plane / 1e9),
        LayerKind::Route { .. } | LayerKind::Upsample | LayerKind::Head { .. } => (0, 0.0),
    }
}

/// Per-layer parameter and operation counts for one forward pass.
pub fn analyze<T: Scalar>(g: &NetGraph<T>) -> CostReport {
    let mut layers = Vec::with_capacity(g.layers().len());
    for spec in g.layers() {
        let input = g.layer_input_shape(spec.index);
        let output = g.shapes()[spec.index];
        let (params, bflops) = layer_cost(&spec.kind, input, output);
        let (size, stride, filters) = match spec.kind {
            LayerKind::Conv {
                kernel,
                stride,
                filters,
                ..
            } => (Some(kernel), Some(stride), Some(filters)),
            LayerKind::Max { kernel, stride } => (Some(kernel), Some(stride), None),
            _ => (None, None, None),
        };
        layers.push(LayerCost {
            index: spec.index,
            kind: spec.kind.name(),
            size,
            stride,
            filters,
            output,
            params,
            bflops,
        });
    }
    let total_params: usize = layers.iter().map(|l| l.params).sum();
    let total_bflops = layers.iter().map(|l| l.bflops).sum();
    CostReport {
        layers,
        total_params,
        total_bflops,
        serialized_bytes: HEADER_LEN + 4 * total_params,
    }
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl CostReport {
    /// Aligned, human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:<8} {:>9} {:>7} {:>16} {:>10} {:>9}",
            "layer", "type", "size", "filters", "output", "params", "BFLOPS"
        );
        for l in &self.layers {
            let size = match (l.size, l.stride) {
                (Some(k), Some(st)) => format!("{k}x{k}/{st}"),
                _ => String::new(),
            };
            let out = format!("{}x{}x{}", l.output.h, l.output.w, l.output.c);
            let bflops = if l.bflops > 0.0 { format!("{:.3}", l.bflops) } else { String::new() };
            let _ = writeln!(
                s,
                "{:>5}  {:<8} {:>9} {:>7} {:>16} {:>10} {:>9}",
                l.index,
                l.kind,
                size,
                opt(l.filters),
                out,
                l.params,
                bflops
            );
        }
        let _ = writeln!(
            s,
            "total: {} params, {:.3} BFLOPS, {} bytes of weights ({:.2} MB)",
            self.total_params,
            self.total_bflops,
            self.serialized_bytes,
            self.serialized_bytes as f64 / 1e6
        );
        s
    }

    /// CSV with the golden-table columns plus `params`.
    pub fn write_csv(&self, sink: impl io::Write) -> Result<(), AnalyzerError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "index", "kind", "size", "stride", "filters", "out_c", "out_h", "out_w", "bflops", "params",
        ])?;
        for l in &self.layers {
            w.write_record([
                l.index.to_string(),
                l.kind.to_string(),
                opt(l.size),
                opt(l.stride),
                opt(l.filters),
                l.output.c.to_string(),
                l.output.h.to_string(),
                l.output.w.to_string(),
                format!("{:.6}", l.bflops),
                l.params.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GoldenRow {
    pub index: usize,
    pub kind: String,
    pub size: Option<usize>,
    pub stride: Option<usize>,
    pub filters: Option<usize>,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub bflops: Option<f64>,
}

/// Reference rows plus the indices whose printed values are known to be
/// wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenTable {
    pub rows: Vec<GoldenRow>,
    pub known_discrepancies: BTreeSet<usize>,
}

const DIRECTIVE: &str = "known-discrepancy:";

impl GoldenTable {
    /// Parses the CSV form. Lines starting with `#` are comments; a comment
    /// of the form `# known-discrepancy: 25, 32` marks rows whose mismatches
    /// are expected.
    pub fn parse(text: &str) -> Result<Self, AnalyzerError> {
        let mut known = BTreeSet::new();
        for line in text.lines() {
            if let Some(rest) = line.trim().strip_prefix('#').map(str::trim) {
                if let Some(list) = rest.strip_prefix(DIRECTIVE) {
                    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        known.insert(item.parse().map_err(|_| AnalyzerError::Directive(rest.to_string()))?);
                    }
                }
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let rows = reader.deserialize().collect::<Result<Vec<GoldenRow>, _>>()?;
        Ok(GoldenTable {
            rows,
            known_discrepancies: known,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnalyzerError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn edge_yolo_416() -> Self {
        Self::parse(EDGE_YOLO_416_GOLDEN).expect("shipped golden table parses")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// `None` for a table-level problem such as a missing row.
    pub index: Option<usize>,
    pub field: &'static str,
    pub expected: String,
    pub got: String,
    pub known_discrepancy: bool,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "layer {i}: ")?,
            None => write!(f, "table: ")?,
        }
        write!(f, "{} expected {}, got {}", self.field, self.expected, self.got)?;
        if self.known_discrepancy {
            write!(f, " (known-discrepancy)")?;
        }
        Ok(())
    }
}

/// Compares a report against reference rows. Blank golden cells are not
/// checked. An empty result means every row agrees.
pub fn diff_golden(report: &CostReport, golden: &GoldenTable) -> Vec<Mismatch> {
    let mut out = Vec::new();
    for row in &golden.rows {
        let known = golden.known_discrepancies.contains(&row.index);
        let mut push = |field: &'static str, expected: String, got: String| {
            out.push(Mismatch {
                index: Some(row.index),
                field,
                expected,
                got,
                known_discrepancy: known,
            })
        };
        let Some(l) = report.layers.get(row.index) else {
            push("row", "a layer".into(), "none".into());
            continue;
        };
        if l.kind != row.kind {
            push("kind", row.kind.clone(), l.kind.into());
        }
        for (field, want, have) in [
            ("size", row.size, l.size),
            ("stride", row.stride, l.stride),
            ("filters", row.filters, l.filters),
        ] {
            if want.is_some() && want != have {
                push(field, opt(want), opt(have));
            }
        }
        for (field, want, have) in [
            ("out_c", row.out_c, l.output.c),
            ("out_h", row.out_h, l.output.h),
            ("out_w", row.out_w, l.output.w),
        ] {
            if want != have {
                push(field, want.to_string(), have.to_string());
            }
        }
        if let Some(b) = row.bflops {
            if (b - l.bflops).abs() > BFLOPS_TOLERANCE {
                push("bflops", format!("{b:.3}"), format!("{:.4}", l.bflops));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for row in &golden.rows {
        if !seen.insert(row.index) {
            out.push(Mismatch {
                index: Some(row.index),
                field: "row",
                expected: "one row per layer".into(),
                got: "duplicate".into(),
                known_discrepancy: false,
            });
        }
    }
    out
}

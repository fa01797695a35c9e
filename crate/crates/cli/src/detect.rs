use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use edge_yolo::imaging::{draw_detections, letterbox, load_rgb, save_rgb};
use edge_yolo::postprocess::{write_jsonl, DetectionRecord};
use edge_yolo::training::detect_batch;
use edge_yolo::Detection;
use log::{info, warn};

use crate::{create, load_weighted, ModelArgs, NmsArgs};

#[derive(Args)]
pub struct DetectArgs {
    /// Image files (binary PPM or PNG) or directories of them
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Weights file
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    nms: NmsArgs,
    /// JSON-lines output, one detection per line in source-image pixels
    #[arg(long, default_value = "detections.jsonl")]
    out: PathBuf,
    /// Write copies of the inputs with boxes drawn into this directory
    #[arg(long)]
    annotate: Option<PathBuf>,
    /// Only boxes at or above this score are drawn
    #[arg(long, default_value_t = 0.25)]
    draw_threshold: f64,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| ["ppm", "png"].iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Files as given, directories expanded to their images in name order.
fn expand(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.is_file() && is_image(q))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn run(a: &DetectArgs) -> Result<()> {
    let nms = a.nms.config()?;
    let shape = a.model.graph()?;
    let g = load_weighted(&shape, &a.weights)?;
    let (w, h, c) = g.input_dims();
    if c != 3 {
        bail!("network expects {c} input channels, images are RGB");
    }
    if let Some(dir) = &a.annotate {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut records = Vec::new();
    let mut processed = 0usize;
    for path in expand(&a.inputs)? {
        let img = match load_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let (input, lb) = letterbox(&img, w as u32, h as u32);
        let found = detect_batch(&g, &input, &nms)?.pop().unwrap_or_default();
        let dets: Vec<Detection> = found
            .iter()
            .map(|d| Detection {
                bbox: lb.to_source(&d.bbox),
                ..*d
            })
            .collect();
        let name = path.display().to_string();
        records.extend(dets.iter().map(|d| DetectionRecord::new(name.clone(), d)));
        info!("{name}: {} detections", dets.len());

        if let Some(dir) = &a.annotate {
            let shown: Vec<Detection> = dets.iter().filter(|d| d.score >= a.draw_threshold).copied().collect();
            let mut canvas = img;
            draw_detections(&mut canvas, &shown, 2);
            let file = path.file_name().map(PathBuf::from).unwrap_or_else(|| "image.ppm".into());
            save_rgb(&canvas, dir.join(file))?;
        }
        processed += 1;
    }
    if processed == 0 {
        bail!("no readable images among the inputs");
    }
    write_jsonl(create(&a.out)?, &records).with_context(|| format!("writing {}", a.out.display()))?;
    info!("{} detections from {processed} images written to {}", records.len(), a.out.display());
    Ok(())
}

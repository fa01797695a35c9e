//! End-to-end training of a reduced-width detector on synthetic shapes.

use std::io;

use log::{debug, info};

use super::synth::{SynthConfig, SynthGenerator};
use super::targets::assign_targets;
use super::{backward_and_step, LossReport, OptimizerConfig, TrainError};
use crate::anchors::{kmeans_detailed, AnchorDataset, KMeansConfig};
use crate::netdef::{build_edge_yolo_with, NetGraph, PresetOptions};
use crate::postprocess::{channel, decode, evaluate, soft_nms, Detection, EvalReport, GroundTruth, SoftNmsConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub synth: SynthConfig,
    /// Filter counts of the preset are divided by this factor.
    pub width_divisor: usize,
    pub anchors_per_scale: usize,
    /// Evaluate every this many steps (0 disables periodic evaluation; a
    /// final evaluation always runs).
    pub eval_every: usize,
    pub eval_images: usize,
    /// Boxes drawn to fit the anchors.
    pub anchor_samples: usize,
    /// K-means starts when fitting the anchors.
    pub anchor_restarts: usize,
    /// Initial bias of every objectness logit.
    pub objectness_bias: f64,
    pub nms: SoftNmsConfig,
    pub iou_thresh: f64,
    /// Final loss is averaged over this many trailing steps.
    pub smoothing: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 7,
            optimizer: OptimizerConfig {
                eta: 0.1,
                batch_size: 16,
                steps: 4000,
                ..Default::default()
            },
            synth: SynthConfig::default(),
            width_divisor: 8,
            anchors_per_scale: 2,
            eval_every: 500,
            eval_images: 64,
            anchor_samples: 512,
            anchor_restarts: 1,
            objectness_bias: -4.0,
            nms: SoftNmsConfig {
                score_floor: 0.01,
                ..Default::default()
            },
            iou_thresh: 0.5,
            smoothing: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub map: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Pre-update loss of every step.
    pub losses: Vec<LossReport>,
    pub evals: Vec<EvalPoint>,
}

impl TrainHistory {
    /// CSV with one row per step; `map` is filled on evaluation steps.
    pub fn write_csv(&self, sink: impl io::Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["step", "loss_box", "loss_obj", "loss_cls", "loss_total", "map"])?;
        for (step, l) in self.losses.iter().enumerate() {
            let map = self
                .evals
                .iter()
                .find(|e| e.step == step)
                .map_or_else(String::new, |e| format!("{:.6}", e.map));
            w.write_record([
                step.to_string(),
                format!("{:.6}", l.loss_box),
                format!("{:.6}", l.loss_obj),
                format!("{:.6}", l.loss_cls),
                format!("{:.6}", l.loss_total),
                map,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub graph: NetGraph,
    pub history: TrainHistory,
    /// Loss of the first step, before any update.
    pub initial_loss: f64,
    /// Mean loss over the trailing steps.
    pub final_loss: f64,
    pub final_eval: EvalReport,
}

/// Runs inference on `images`, decodes every head, applies Soft-NMS and
/// scores the result against `gts`.
pub fn evaluate_graph<T: Scalar>(
    g: &NetGraph<T>,
    images: &Tensor<T>,
    gts: &[Vec<GroundTruth>],
    nms: &SoftNmsConfig,
    iou_thresh: f64,
) -> Result<EvalReport, TrainError> {
    let preds = detect_batch(g, images, nms)?;
    Ok(evaluate(&preds, gts, g.num_classes(), iou_thresh)?)
}

/// Post-NMS detections for every image of a batch, in network-input pixels.
pub fn detect_batch<T: Scalar>(
    g: &NetGraph<T>,
    images: &Tensor<T>,
    nms: &SoftNmsConfig,
) -> Result<Vec<Vec<Detection>>, TrainError> {
    let anchors = g.anchors().ok_or_else(|| TrainError::Mismatch("graph has no anchors".into()))?;
    let heads = g.forward(images)?;
    let (w, h, _) = g.input_dims();
    let mut out = Vec::with_capacity(images.shape().n);
    for b in 0..images.shape().n {
        let mut dets = Vec::new();
        for head in &heads {
            let group = anchors.for_scale(head.scale_index, heads.len())?;
            dets.extend(
                decode(head, b, group, g.num_classes(), w as f64, h as f64, nms.score_floor)
                    .map_err(|e| TrainError::Mismatch(e.to_string()))?,
            );
        }
        out.push(soft_nms(&dets, nms));
    }
    Ok(out)
}

/// `(S_h, S_w)` of every head, coarsest first.
pub fn head_grids<T: Scalar>(g: &NetGraph<T>) -> Vec<(usize, usize)> {
    let mut by_scale: Vec<(usize, (usize, usize))> = g
        .heads()
        .iter()
        .map(|&(l, s)| (s, (g.shapes()[l].h, g.shapes()[l].w)))
        .collect();
    by_scale.sort_by_key(|&(s, _)| s);
    by_scale.into_iter().map(|(_, hw)| hw).collect()
}

fn set_objectness_bias<T: Scalar>(g: &mut NetGraph<T>, bias: f64) {
    let heads = g.heads();
    let classes = g.num_classes();
    let per_scale = g.anchors_per_scale().unwrap_or(0);
    let convs: Vec<usize> = heads
        .iter()
        .filter_map(|&(l, _)| g.layers()[l].sources()[0])
        .collect();
    let params = g.params_mut().expect("weighted graph");
    for l in convs {
        if let Some(p) = params[l].as_mut() {
            for a in 0..per_scale {
                p.conv.bias[channel(a, 4, classes)] = T::from_f64(bias);
            }
        }
    }
}

/// The untrained reduced-width preset used by [`train_toy`]: anchors fitted
/// by K-means on synthetic boxes, seeded weights, and objectness biased low.
pub fn toy_graph(cfg: &ToyConfig) -> Result<NetGraph, TrainError> {
    let size = cfg.synth.size;
    let k = 3 * cfg.anchors_per_scale;
    let mut anchor_gen = SynthGenerator::new(cfg.synth.clone(), cfg.seed.wrapping_mul(3).wrapping_add(1));
    let mut boxes = Vec::new();
    while boxes.len() < cfg.anchor_samples.max(k) {
        let s = anchor_gen.sample::<f32>();
        boxes.extend(s.objects.iter().map(|(g, _)| (g.bbox.w, g.bbox.h)));
    }
    let data = AnchorDataset::new(boxes, size as f64, size as f64)?;
    let fit = KMeansConfig {
        restarts: cfg.anchor_restarts,
        ..KMeansConfig::new(k, cfg.seed)
    };
    let anchors = kmeans_detailed(&data, &fit)?.anchors;
    debug!("toy anchors: {anchors}");

    let opts = PresetOptions {
        input_w: size,
        input_h: size,
        input_c: 3,
        width_divisor: cfg.width_divisor,
    };
    let mut g: NetGraph = build_edge_yolo_with(cfg.synth.num_classes, anchors, cfg.anchors_per_scale, &opts)?;
    g.init_random(cfg.seed);
    set_objectness_bias(&mut g, cfg.objectness_bias);
    Ok(g)
}

/// Trains the reduced-width preset on freshly drawn synthetic batches.
///
/// Everything is derived from `cfg.seed`: anchors are fitted by K-means on
/// boxes from one stream, training batches come from a second and the
/// held-out evaluation set from a third.
pub fn train_toy(cfg: &ToyConfig) -> Result<ToyOutcome, TrainError> {
    cfg.optimizer.validate()?;
    let size = cfg.synth.size;
    let mut g = toy_graph(cfg)?;
    let grids = head_grids(&g);

    let mut eval_gen = SynthGenerator::new(cfg.synth.clone(), cfg.seed.wrapping_mul(3).wrapping_add(2));
    let (eval_images, eval_gts) = eval_gen.batch::<f32>(cfg.eval_images.max(1));
    let mut train_gen = SynthGenerator::new(cfg.synth.clone(), cfg.seed.wrapping_mul(3));

    let mut history = TrainHistory::default();
    for step in 0..cfg.optimizer.steps {
        let (batch, gts) = train_gen.batch::<f32>(cfg.optimizer.batch_size);
        let targets = gts
            .iter()
            .map(|gt| {
                assign_targets(
                    gt,
                    g.anchors().expect("anchors set"),
                    &grids,
                    size as f64,
                    size as f64,
                    cfg.synth.num_classes,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report = match backward_and_step(&mut g, &batch, &targets, &cfg.optimizer) {
            Ok(r) => r,
            Err(TrainError::NonFinite(_)) => {
                return Err(TrainError::Diverged {
                    step,
                    loss: f64::INFINITY,
                    history: Box::new(history),
                })
            }
            Err(e) => return Err(e),
        };
        history.losses.push(report);
        if report.loss_total > 1e4 {
            return Err(TrainError::Diverged {
                step,
                loss: report.loss_total,
                history: Box::new(history),
            });
        }
        if step % 25 == 0 {
            debug!(
                "step {step}: loss {:.4} (box {:.4}, obj {:.4}, cls {:.4})",
                report.loss_total, report.loss_box, report.loss_obj, report.loss_cls
            );
        }
        if cfg.eval_every > 0 && step > 0 && step % cfg.eval_every == 0 {
            let r = evaluate_graph(&g, &eval_images, &eval_gts, &cfg.nms, cfg.iou_thresh)?;
            info!("step {step}: loss {:.4}, mAP@{} {:.4}", report.loss_total, cfg.iou_thresh, r.map);
            history.evals.push(EvalPoint { step, map: r.map });
        }
    }

    let final_eval = evaluate_graph(&g, &eval_images, &eval_gts, &cfg.nms, cfg.iou_thresh)?;
    let steps = history.losses.len();
    history.evals.push(EvalPoint {
        step: steps,
        map: final_eval.map,
    });
    let initial_loss = history.losses.first().map_or(0.0, |l| l.loss_total);
    let tail = &history.losses[steps.saturating_sub(cfg.smoothing.max(1))..];
    let final_loss = if tail.is_empty() {
        initial_loss
    } else {
        tail.iter().map(|l| l.loss_total).sum::<f64>() / tail.len() as f64
    };
    info!("trained {steps} steps: loss {initial_loss:.4} -> {final_loss:.4}, mAP {:.4}", final_eval.map);
    Ok(ToyOutcome {
        graph: g,
        history,
        initial_loss,
        final_loss,
        final_eval,
    })
}

//! Independent reference implementations and the checks shared by the
//! acceptance target and the property tests.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use edge_yolo::analyzer::{analyze, GoldenTable, BFLOPS_TOLERANCE};
use edge_yolo::anchors::{kmeans_detailed, AnchorDataset, KMeansConfig};
use edge_yolo::edgecloud::{
    crossover, decode_message, delay_curve, encode_message, run_sim, EdgeParams, LatencyProfile, Message,
    MessageType, PathKind, Scenario,
};
use edge_yolo::netdef::{build_edge_yolo, load_weights, parse_config, weights_to_bytes};
use edge_yolo::nn::{
    activate, activate_backward, batch_norm, batch_norm_backward, batch_norm_train, batch_norm_train_backward,
    conv2d, conv2d_backward, max_pool_backward, max_pool_with_argmax, route, route_backward, upsample2x,
    upsample2x_backward, Activation, BatchNormParams, ConvParams,
};
use edge_yolo::postprocess::{ciou_loss, evaluate, hard_nms, soft_nms, GroundTruth, SoftNmsConfig};
use edge_yolo::training::{assign_targets, loss_and_grad, total_loss, train_toy, TargetAssignment, ToyConfig};
use edge_yolo::{AnchorSet, BBox, Detection, NetGraph, Shape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of one acceptance criterion.
#[derive(Debug)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

pub fn timed(f: impl FnOnce() -> Result<String, String>) -> Verdict {
    let start = Instant::now();
    let r = f();
    let elapsed = start.elapsed();
    match r {
        Ok(detail) => Verdict {
            pass: true,
            detail,
            elapsed,
        },
        Err(detail) => Verdict {
            pass: false,
            detail,
            elapsed,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- geometry

/// IoU computed from corners, written independently of the library.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64, min: f64, max: f64) -> BBox {
    BBox::new(
        r.random_range(0.0..extent),
        r.random_range(0.0..extent),
        r.random_range(min..max),
        r.random_range(min..max),
    )
}

// ---------------------------------------------------------------- soft-nms

/// Literal transcription of Gaussian Soft-NMS: pick the best remaining box,
/// rescale every same-class box whose overlap with it reaches the
/// threshold, drop what falls under the floor, repeat.
pub fn oracle_soft_nms(dets: &[Detection], sigma: f64, t_nms: f64, floor: f64) -> Vec<(usize, f64)> {
    let n = dets.len();
    let mut score: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut alive: Vec<bool> = score.iter().map(|&s| s >= floor).collect();
    let mut out = Vec::new();
    loop {
        let mut m: Option<usize> = None;
        for i in 0..n {
            if alive[i] && m.is_none_or(|j| score[i] > score[j]) {
                m = Some(i);
            }
        }
        let Some(m) = m else { break };
        alive[m] = false;
        out.push((m, score[m]));
        for i in 0..n {
            if !alive[i] || dets[i].class_id != dets[m].class_id {
                continue;
            }
            let o = oracle_iou(&dets[m].bbox, &dets[i].bbox);
            if o >= t_nms {
                score[i] *= (-o / sigma).exp();
            }
            if score[i] < floor {
                alive[i] = false;
            }
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

pub fn random_dets(r: &mut ChaCha8Rng, max: usize) -> Vec<Detection> {
    let n = r.random_range(0..=max);
    (0..n)
        .map(|_| Detection {
            // A tight canvas so overlaps are common.
            bbox: random_box(r, 30.0, 4.0, 25.0),
            class_id: r.random_range(0..3),
            score: r.random_range(0.01..1.0),
        })
        .collect()
}

fn same_box(a: &Detection, b: &Detection) -> bool {
    a.class_id == b.class_id && a.bbox == b.bbox
}

pub fn check_soft_nms_oracle(instances: u64) -> Result<String, String> {
    let mut compared = 0usize;
    for seed in 0..instances {
        let mut r = rng(seed);
        let dets = random_dets(&mut r, 10);
        let cfg = SoftNmsConfig {
            sigma: r.random_range(0.05..1.0),
            t_nms: r.random_range(0.0..0.7),
            score_floor: if r.random_bool(0.5) { 0.001 } else { 0.05 },
        };
        let got = soft_nms(&dets, &cfg);
        let want = oracle_soft_nms(&dets, cfg.sigma, cfg.t_nms, cfg.score_floor);
        ensure(got.len() == want.len(), || {
            format!("seed {seed}: {} survivors, oracle keeps {}", got.len(), want.len())
        })?;
        for (g, &(i, s)) in got.iter().zip(&want) {
            ensure(same_box(g, &dets[i]) && (g.score - s).abs() <= 1e-9, || {
                format!("seed {seed}: got {g:?}, oracle {:?} with score {s}", dets[i])
            })?;
        }
        compared += got.len();
    }
    Ok(format!("{instances} instances, {compared} survivors matched"))
}

pub fn check_hard_limit(instances: u64) -> Result<String, String> {
    for seed in 0..instances {
        let mut r = rng(10_000 + seed);
        let dets = random_dets(&mut r, 10);
        let t = r.random_range(0.05..0.7);
        let cfg = SoftNmsConfig {
            sigma: 1e-6,
            t_nms: t,
            score_floor: 0.001,
        };
        let soft = soft_nms(&dets, &cfg);
        let hard = hard_nms(&dets, t);
        let key = |v: &[Detection]| {
            let mut k: Vec<_> = v
                .iter()
                .map(|d| (d.class_id, d.bbox.cx.to_bits(), d.bbox.cy.to_bits(), d.bbox.w.to_bits(), d.bbox.h.to_bits()))
                .collect();
            k.sort();
            k
        };
        ensure(key(&soft) == key(&hard), || {
            format!("seed {seed}: soft keeps {}, hard keeps {}", soft.len(), hard.len())
        })?;
    }
    Ok(format!("{instances} instances equal to hard NMS at sigma 1e-6"))
}

// ---------------------------------------------------------------- ciou

pub fn check_ciou(cases: u64) -> Result<String, String> {
    let mut r = rng(77);
    for i in 0..cases {
        let a = random_box(&mut r, 500.0, 0.01, 300.0);
        let l = ciou_loss(&a, &a);
        ensure(l == 0.0, || format!("case {i}: loss(a, a) = {l:e} for {a:?}"))?;
    }
    let mut worst: f64 = 0.0;
    for i in 0..cases * 10 {
        // Mix near, overlapping and far-apart pairs, including thin boxes.
        let spread = [5.0, 50.0, 5000.0][i as usize % 3];
        let a = random_box(&mut r, spread, 0.001, 100.0);
        let b = random_box(&mut r, spread, 0.001, 100.0);
        let l = ciou_loss(&a, &b);
        ensure((0.0..3.0).contains(&l), || format!("loss {l} outside [0, 3) for {a:?} {b:?}"))?;
        worst = worst.max(l);
    }
    let hand = ciou_loss(&BBox::new(7.0, 7.0, 2.0, 2.0), &BBox::new(7.0, 7.0, 4.0, 4.0));
    ensure((hand - 0.75).abs() <= 1e-9, || format!("concentric 2x2 vs 4x4 gave {hand}"))?;
    Ok(format!("identity exact on {cases} boxes, max loss {worst:.4}, hand case {hand}"))
}

// ---------------------------------------------------------------- k-means

fn sse(points: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let mut sum = vec![[0.0; 2]; k];
    let mut count = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sum[l][0] += p[0];
        sum[l][1] += p[1];
        count[l] += 1;
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            let mu = [sum[l][0] / count[l] as f64, sum[l][1] / count[l] as f64];
            (p[0] - mu[0]).powi(2) + (p[1] - mu[1]).powi(2)
        })
        .sum()
}

/// Smallest within-cluster sum of squares over every partition of `points`
/// into exactly `k` non-empty groups.
pub fn oracle_best_partition(points: &[[f64; 2]], k: usize) -> f64 {
    fn rec(i: usize, used: usize, labels: &mut Vec<usize>, points: &[[f64; 2]], k: usize, best: &mut f64) {
        let m = points.len();
        if m - i < k - used {
            return;
        }
        if i == m {
            *best = best.min(sse(points, labels, k));
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels[i] = l;
            rec(i + 1, used.max(l + 1), labels, points, k, best);
        }
    }
    let mut best = f64::INFINITY;
    rec(0, 0, &mut vec![0; points.len()], points, k, &mut best);
    best
}

/// `m` extents around `k` centers at least 120 px apart, dealt round-robin
/// so every cluster gets a point.
pub fn separated_extents(r: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<(f64, f64)> {
    let mut centers: Vec<(f64, f64)> = Vec::new();
    while centers.len() < k {
        let c = (r.random_range(40.0..380.0), r.random_range(40.0..380.0));
        if centers.iter().all(|o| (o.0 - c.0).hypot(o.1 - c.1) >= 120.0) {
            centers.push(c);
        }
    }
    (0..m)
        .map(|i| {
            let c = centers[i % k];
            (c.0 + r.random_range(-25.0..25.0), c.1 + r.random_range(-25.0..25.0))
        })
        .collect()
}

fn random_extents(r: &mut ChaCha8Rng, m: usize) -> Vec<(f64, f64)> {
    (0..m)
        .map(|_| (r.random_range(1.0..416.0), r.random_range(1.0..416.0)))
        .collect()
}

pub fn check_kmeans() -> Result<String, String> {
    // Distortion never rises from one iteration to the next.
    let mut iterations = 0;
    for seed in 0..100u64 {
        let mut r = rng(500 + seed);
        let m = r.random_range(10..200);
        let k = r.random_range(1..=9.min(m));
        let data = AnchorDataset::new(random_extents(&mut r, m), 416.0, 416.0).unwrap();
        let out = kmeans_detailed(&data, &KMeansConfig::new(k, seed)).map_err(|e| e.to_string())?;
        for w in out.history.windows(2) {
            // One ulp of slack per term for re-summation in a different order.
            let slack = 4.0 * f64::EPSILON * w[0].abs().max(1e-300) * m as f64;
            ensure(w[1] <= w[0] + slack, || format!("dataset {seed}: distortion rose {} -> {}", w[0], w[1]))?;
        }
        iterations += out.history.len();
    }

    // One cluster sits at the mean.
    for seed in 0..20u64 {
        let mut r = rng(900 + seed);
        let m = r.random_range(1..50);
        let boxes = random_extents(&mut r, m);
        let n = boxes.len() as f64;
        let mean = (
            boxes.iter().map(|b| b.0).sum::<f64>() / n,
            boxes.iter().map(|b| b.1).sum::<f64>() / n,
        );
        let data = AnchorDataset::new(boxes, 416.0, 416.0).unwrap();
        let out = kmeans_detailed(&data, &KMeansConfig::new(1, seed)).map_err(|e| e.to_string())?;
        let a = out.anchors.as_slice()[0];
        ensure((a.0 - mean.0).abs() <= 1e-12 && (a.1 - mean.1).abs() <= 1e-12, || {
            format!("K=1 gave {a:?}, mean is {mean:?}")
        })?;
    }

    // Small clustered fixtures against exhaustive search.
    let seeds = 20u64;
    let mut worst_rate: f64 = 0.0;
    let mut local_total = 0;
    let mut fixtures = 0;
    for fixture in 0..12u64 {
        let mut r = rng(1300 + fixture);
        let m = 6 + (fixture as usize % 7);
        let k = 2 + (fixture as usize % 2);
        let boxes = separated_extents(&mut r, m, k);
        let data = AnchorDataset::new(boxes.clone(), 416.0, 416.0).unwrap();
        let points: Vec<[f64; 2]> = boxes.iter().map(|b| [b.0 / 416.0, b.1 / 416.0]).collect();
        let best = oracle_best_partition(&points, k);
        let mut local = 0;
        for seed in 0..seeds {
            let out = kmeans_detailed(&data, &KMeansConfig::new(k, seed)).map_err(|e| e.to_string())?;
            let got = sse(&points, &out.assignment, k);
            ensure(got >= best - 1e-9, || format!("fixture {fixture}: beat the exhaustive optimum"))?;
            if got > best + 1e-9 {
                local += 1;
                eprintln!("k-means fixture {fixture} seed {seed}: local optimum {got:.6} vs {best:.6}");
            }
        }
        let rate = local as f64 / seeds as f64;
        worst_rate = worst_rate.max(rate);
        local_total += local;
        fixtures += 1;
        ensure(rate < 0.2, || format!("fixture {fixture} (m={m}, k={k}): local optimum in {local}/{seeds} seeds"))?;
    }
    Ok(format!(
        "100 monotone runs ({iterations} iterations); K=1 mean exact; {fixtures} exhaustive fixtures, \
         {local_total} local optima, worst rate {:.0}%",
        worst_rate * 100.0
    ))
}

// ---------------------------------------------------------------- gradients

/// Relative error with a floor on the denominator so gradients that are
/// zero up to rounding compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub const FD_STEP: f64 = 1e-4;

/// Central differences of `f` at `x` for every coordinate.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let hi = f(&x);
            x[i] = orig - FD_STEP;
            let lo = f(&x);
            x[i] = orig;
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn rand_tensor(r: &mut ChaCha8Rng, s: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _, _| r.random_range(lo..hi))
}

/// Values bounded away from zero so piecewise-linear kinks are never within
/// one finite-difference step.
fn away_from_zero(r: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _, _| {
        let v: f64 = r.random_range(0.05..2.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values at least 0.01 apart, so pooling maxima are unique.
fn distinct(r: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    Tensor::from_vec(s, order.into_iter().map(|k| k as f64 * 0.01 - 1.0).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor<f64>, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), v.to_vec()).unwrap()
}

/// Worst relative error of every kernel's backward pass against central
/// differences of `Σ w·f(x)` for a fixed random projection `w`.
pub fn gradcheck_ops() -> Result<Vec<(String, f64)>, String> {
    let mut r = rng(4242);
    let mut report = Vec::new();

    for &(k, stride, cin, cout, h, w) in &[(3, 1, 3, 4, 6, 5), (3, 2, 2, 3, 7, 6), (1, 1, 4, 2, 5, 5)] {
        let x = rand_tensor(&mut r, Shape::new(2, cin, h, w), -1.0, 1.0);
        let weights = rand_tensor(&mut r, Shape::new(cout, cin, k, k), -0.5, 0.5);
        let bias: Vec<f64> = (0..cout).map(|_| r.random_range(-0.5..0.5)).collect();
        let p = ConvParams::new(k, stride, weights.clone(), bias.clone()).map_err(|e| e.to_string())?;
        let out_shape = conv2d(&x, &p).map_err(|e| e.to_string())?.shape();
        let proj = rand_tensor(&mut r, out_shape, -1.0, 1.0);
        let g = conv2d_backward(&x, &p, &proj).map_err(|e| e.to_string())?;

        let fx = numeric_grad(x.data(), |v| dot(&conv2d(&with(&x, v), &p).unwrap(), &proj));
        let fw = numeric_grad(weights.data(), |v| {
            let q = ConvParams::new(k, stride, with(&weights, v), bias.clone()).unwrap();
            dot(&conv2d(&x, &q).unwrap(), &proj)
        });
        let fb = numeric_grad(&bias, |v| {
            let q = ConvParams::new(k, stride, weights.clone(), v.to_vec()).unwrap();
            dot(&conv2d(&x, &q).unwrap(), &proj)
        });
        let e = max_rel(g.input.data(), &fx)
            .max(max_rel(g.weights.data(), &fw))
            .max(max_rel(&g.bias, &fb));
        report.push((format!("conv {k}x{k}/{stride}"), e));
    }

    {
        let s = Shape::new(2, 3, 4, 4);
        let x = rand_tensor(&mut r, s, -2.0, 2.0);
        let p = BatchNormParams {
            gamma: (0..3).map(|_| r.random_range(0.5..1.5)).collect(),
            beta: (0..3).map(|_| r.random_range(-0.5..0.5)).collect(),
            running_mean: (0..3).map(|_| r.random_range(-0.5..0.5)).collect(),
            running_var: (0..3).map(|_| r.random_range(0.5..2.0)).collect(),
            eps: 1e-5,
        };
        let proj = rand_tensor(&mut r, s, -1.0, 1.0);
        let g = batch_norm_backward(&x, &p, &proj).map_err(|e| e.to_string())?;
        let fx = numeric_grad(x.data(), |v| dot(&batch_norm(&with(&x, v), &p).unwrap(), &proj));
        let fgamma = numeric_grad(&p.gamma, |v| {
            let q = BatchNormParams { gamma: v.to_vec(), ..p.clone() };
            dot(&batch_norm(&x, &q).unwrap(), &proj)
        });
        let fbeta = numeric_grad(&p.beta, |v| {
            let q = BatchNormParams { beta: v.to_vec(), ..p.clone() };
            dot(&batch_norm(&x, &q).unwrap(), &proj)
        });
        report.push((
            "batch norm (inference)".into(),
            max_rel(g.input.data(), &fx)
                .max(max_rel(&g.gamma, &fgamma))
                .max(max_rel(&g.beta, &fbeta)),
        ));

        let (_, cache) = batch_norm_train(&x, &p).map_err(|e| e.to_string())?;
        let g = batch_norm_train_backward(&cache, &p, &proj).map_err(|e| e.to_string())?;
        let fx = numeric_grad(x.data(), |v| dot(&batch_norm_train(&with(&x, v), &p).unwrap().0, &proj));
        let fgamma = numeric_grad(&p.gamma, |v| {
            let q = BatchNormParams { gamma: v.to_vec(), ..p.clone() };
            dot(&batch_norm_train(&x, &q).unwrap().0, &proj)
        });
        let fbeta = numeric_grad(&p.beta, |v| {
            let q = BatchNormParams { beta: v.to_vec(), ..p.clone() };
            dot(&batch_norm_train(&x, &q).unwrap().0, &proj)
        });
        report.push((
            "batch norm (training)".into(),
            max_rel(g.input.data(), &fx)
                .max(max_rel(&g.gamma, &fgamma))
                .max(max_rel(&g.beta, &fbeta)),
        ));
    }

    for kind in [Activation::Linear, Activation::LeakyRelu(0.1), Activation::Relu, Activation::Mish] {
        let s = Shape::new(2, 2, 3, 3);
        let x = away_from_zero(&mut r, s);
        let proj = rand_tensor(&mut r, s, -1.0, 1.0);
        let g = activate_backward(&x, kind, &proj);
        let fx = numeric_grad(x.data(), |v| dot(&activate(&with(&x, v), kind), &proj));
        report.push((format!("activation {kind}"), max_rel(g.data(), &fx)));
    }

    for &(k, stride) in &[(2, 2), (5, 1), (9, 1), (13, 1), (2, 1)] {
        let s = Shape::new(2, 2, 6, 6);
        let x = distinct(&mut r, s);
        let (out, argmax) = max_pool_with_argmax(&x, k, stride).map_err(|e| e.to_string())?;
        let proj = rand_tensor(&mut r, out.shape(), -1.0, 1.0);
        let g = max_pool_backward(s, &argmax, &proj);
        let fx = numeric_grad(x.data(), |v| dot(&max_pool_with_argmax(&with(&x, v), k, stride).unwrap().0, &proj));
        report.push((format!("max pool {k}/{stride}"), max_rel(g.data(), &fx)));
    }

    {
        let s = Shape::new(2, 3, 3, 4);
        let x = rand_tensor(&mut r, s, -1.0, 1.0);
        let proj = rand_tensor(&mut r, Shape::new(2, 3, 6, 8), -1.0, 1.0);
        let g = upsample2x_backward(&proj);
        let fx = numeric_grad(x.data(), |v| dot(&upsample2x(&with(&x, v)), &proj));
        report.push(("upsample".into(), max_rel(g.data(), &fx)));
    }

    {
        let a = rand_tensor(&mut r, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let b = rand_tensor(&mut r, Shape::new(2, 3, 3, 3), -1.0, 1.0);
        let proj = rand_tensor(&mut r, Shape::new(2, 5, 3, 3), -1.0, 1.0);
        let g = route_backward(&proj, &[a.shape(), b.shape()], None);
        let fa = numeric_grad(a.data(), |v| dot(&route(&[&with(&a, v), &b], None).unwrap(), &proj));
        let fb = numeric_grad(b.data(), |v| dot(&route(&[&a, &with(&b, v)], None).unwrap(), &proj));
        report.push((
            "route concat".into(),
            max_rel(g[0].data(), &fa).max(max_rel(g[1].data(), &fb)),
        ));

        let c = rand_tensor(&mut r, Shape::new(2, 4, 3, 3), -1.0, 1.0);
        let proj = rand_tensor(&mut r, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let g = route_backward(&proj, &[c.shape()], Some(1));
        let fc = numeric_grad(c.data(), |v| dot(&route(&[&with(&c, v)], Some(1)).unwrap(), &proj));
        report.push(("route split".into(), max_rel(g[0].data(), &fc)));
    }

    Ok(report)
}

pub const MINI_GRAPH: &str = "net 16 16 3\nclasses 2\nconv 3x3/2 4\nconv 3x3/2 4\nconv 1x1/1 14 linear\nhead 0\n";

/// The three-layer graph with two images: one labeled box and one empty.
pub fn mini_setup() -> (NetGraph<f64>, Tensor<f64>, Vec<TargetAssignment>) {
    let mut g: NetGraph<f64> = parse_config(MINI_GRAPH).unwrap().cast();
    g.set_anchors(AnchorSet::new(vec![(4.0, 4.0), (8.0, 6.0)]).unwrap()).unwrap();
    g.init_random(5);
    let x = Tensor::from_fn(Shape::new(2, 3, 16, 16), |n, c, y, x| {
        (((n * 7 + c * 5 + y * 3 + x) * 37) % 101) as f64 / 101.0
    });
    let gts = [
        vec![GroundTruth {
            bbox: BBox::new(5.0, 6.0, 6.0, 5.0),
            class_id: 1,
        }],
        vec![],
    ];
    let t = gts
        .iter()
        .map(|gt| assign_targets(gt, g.anchors().unwrap(), &[(4, 4)], 16.0, 16.0, 2).unwrap())
        .collect();
    (g, x, t)
}

fn flat_params(g: &NetGraph<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    for p in g.params().unwrap().iter().flatten() {
        v.extend_from_slice(p.conv.weights.data());
        v.extend_from_slice(&p.conv.bias);
        if let Some(bn) = &p.bn {
            v.extend_from_slice(&bn.gamma);
            v.extend_from_slice(&bn.beta);
        }
    }
    v
}

fn set_flat_params(g: &mut NetGraph<f64>, v: &[f64]) {
    let mut k = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&v[k..k + dst.len()]);
        k += dst.len();
    };
    for p in g.params_mut().unwrap().iter_mut().flatten() {
        take(p.conv.weights.data_mut());
        take(&mut p.conv.bias);
        if let Some(bn) = p.bn.as_mut() {
            take(&mut bn.gamma);
            take(&mut bn.beta);
        }
    }
}

/// Worst relative error of the full loss gradient with respect to every
/// parameter of the miniature graph.
pub fn gradcheck_graph_loss() -> Result<(usize, f64), String> {
    let (g, x, t) = mini_setup();
    let pass = g.forward_train(&x).map_err(|e| e.to_string())?;
    let (_, head_grads) = loss_and_grad(&pass.heads(&g), &t, Default::default()).map_err(|e| e.to_string())?;
    let grads = g.backward(&pass, &head_grads).map_err(|e| e.to_string())?;
    let mut analytic = Vec::new();
    for lg in grads.layers.iter().flatten() {
        analytic.extend_from_slice(lg.weights.data());
        analytic.extend_from_slice(&lg.bias);
        if let (Some(gm), Some(bt)) = (&lg.gamma, &lg.beta) {
            analytic.extend_from_slice(gm);
            analytic.extend_from_slice(bt);
        }
    }
    let theta = flat_params(&g);
    let mut probe = g.clone();
    let numeric = numeric_grad(&theta, |v| {
        set_flat_params(&mut probe, v);
        let pass = probe.forward_train(&x).unwrap();
        total_loss(&pass.heads(&probe), &t).unwrap().loss_total
    });
    Ok((theta.len(), max_rel(&analytic, &numeric)))
}

pub fn check_gradients() -> Result<String, String> {
    let ops = gradcheck_ops()?;
    let (n, graph_err) = gradcheck_graph_loss()?;
    let worst = ops.iter().map(|(_, e)| *e).fold(graph_err, f64::max);
    for (name, e) in &ops {
        ensure(*e < 1e-3, || format!("{name}: relative error {e:e}"))?;
    }
    ensure(graph_err < 1e-3, || format!("graph loss: relative error {graph_err:e}"))?;
    Ok(format!("{} kernels plus {n} graph parameters, worst relative error {worst:.2e}", ops.len()))
}

// ---------------------------------------------------------------- evaluation

/// Counts true and false positives per class with the greedy rule, written
/// from scratch.
pub fn oracle_counts(
    preds: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class: usize,
    thresh: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (k, d) in p.iter().enumerate() {
            if d.class_id == class {
                order.push((d.score, i, k));
            }
        }
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for (_, i, k) in order {
        let mut best = -1.0;
        let mut at = None;
        for (j, g) in gts[i].iter().enumerate() {
            if g.class_id != class || used[i][j] {
                continue;
            }
            let o = oracle_iou(&preds[i][k].bbox, &g.bbox);
            if o >= thresh && o > best {
                best = o;
                at = Some(j);
            }
        }
        if let Some(j) = at {
            used[i][j] = true;
        }
        hits.push(at.is_some());
    }
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    (hits, num_gt)
}

/// AP by enumerating every score cut-off: each cut gives a (recall,
/// precision) point, and the area sums recall steps weighted by the best
/// precision at that recall or beyond.
pub fn oracle_ap(hits: &[bool], num_gt: usize) -> f64 {
    let points: Vec<(f64, f64)> = (1..=hits.len())
        .map(|cut| {
            let tp = hits[..cut].iter().filter(|&&h| h).count() as f64;
            (tp / num_gt as f64, tp / cut as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &points {
        if r > prev {
            let best = points.iter().filter(|(r2, _)| *r2 >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
    }
    ap
}

pub fn random_eval_fixture(r: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>, usize) {
    let classes = r.random_range(1..=3);
    let images = r.random_range(1..=4);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<GroundTruth> = (0..r.random_range(0..5))
            .map(|_| GroundTruth {
                bbox: random_box(r, 60.0, 5.0, 30.0),
                class_id: r.random_range(0..classes),
            })
            .collect();
        let mut p: Vec<Detection> = Vec::new();
        for gt in &g {
            if r.random_bool(0.7) {
                let j = |r: &mut ChaCha8Rng| r.random_range(-4.0..4.0);
                p.push(Detection {
                    bbox: BBox::new(gt.bbox.cx + j(r), gt.bbox.cy + j(r), gt.bbox.w + j(r), gt.bbox.h + j(r)),
                    class_id: if r.random_bool(0.9) { gt.class_id } else { r.random_range(0..classes) },
                    // Coarse scores so ties occur.
                    score: (r.random_range(1..=10) as f64) / 10.0,
                });
            }
        }
        for _ in 0..r.random_range(0..3) {
            p.push(Detection {
                bbox: random_box(r, 60.0, 5.0, 30.0),
                class_id: r.random_range(0..classes),
                score: (r.random_range(1..=10) as f64) / 10.0,
            });
        }
        preds.push(p);
        gts.push(g);
    }
    (preds, gts, classes)
}

pub fn check_metrics(fixtures: u64) -> Result<String, String> {
    let mut r = rng(31337);
    let mut scored = 0;
    for f in 0..fixtures {
        let (preds, gts, classes) = random_eval_fixture(&mut r);
        let rep = evaluate(&preds, &gts, classes, 0.5).map_err(|e| e.to_string())?;
        for c in &rep.classes {
            let (hits, num_gt) = oracle_counts(&preds, &gts, c.class_id, 0.5);
            let tp = hits.iter().filter(|&&h| h).count();
            let fp = hits.len() - tp;
            ensure(c.tp == tp && c.fp == fp && c.fn_count == num_gt - tp && c.num_gt == num_gt, || {
                format!("fixture {f} class {}: counts {c:?}, oracle tp {tp} fp {fp} gt {num_gt}", c.class_id)
            })?;
            let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
            let recall = (num_gt > 0).then(|| tp as f64 / num_gt as f64);
            ensure(c.precision == precision && c.recall == recall, || {
                format!("fixture {f} class {}: precision/recall {:?}/{:?}", c.class_id, c.precision, c.recall)
            })?;
            if num_gt > 0 {
                let ap = oracle_ap(&hits, num_gt);
                let got = c.ap.unwrap();
                ensure((got - ap).abs() <= 1e-12, || format!("fixture {f} class {}: AP {got} vs {ap}", c.class_id))?;
                scored += 1;
            }
        }

        // The ground truth itself, scored, is a perfect detector.
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .enumerate()
                    .map(|(k, gt)| Detection {
                        bbox: gt.bbox,
                        class_id: gt.class_id,
                        score: 1.0 - k as f64 * 0.01,
                    })
                    .collect()
            })
            .collect();
        let rep = evaluate(&perfect, &gts, classes, 0.5).map_err(|e| e.to_string())?;
        for c in rep.classes.iter().filter(|c| c.num_gt > 0) {
            ensure(c.ap == Some(1.0), || format!("fixture {f}: perfect predictions gave AP {:?}", c.ap))?;
        }
    }

    let (ap, oracle) = hand_case();
    ensure((ap - oracle).abs() <= 1e-12 && (ap - 5.0 / 6.0).abs() <= 1e-12, || {
        format!("3-pred/2-gt case: AP {ap}, oracle {oracle}")
    })?;
    Ok(format!("{fixtures} fixtures ({scored} class APs) match; hand case AP {ap:.6}"))
}

/// Two ground-truth boxes; predictions ranked hit, miss, hit.
pub fn hand_case() -> (f64, f64) {
    let g1 = BBox::new(20.0, 20.0, 10.0, 10.0);
    let g2 = BBox::new(60.0, 60.0, 10.0, 10.0);
    let gts = vec![vec![
        GroundTruth { bbox: g1, class_id: 0 },
        GroundTruth { bbox: g2, class_id: 0 },
    ]];
    let preds = vec![vec![
        Detection { bbox: BBox::new(21.0, 20.0, 10.0, 10.0), class_id: 0, score: 0.9 },
        Detection { bbox: BBox::new(100.0, 20.0, 10.0, 10.0), class_id: 0, score: 0.8 },
        Detection { bbox: BBox::new(60.0, 61.0, 10.0, 10.0), class_id: 0, score: 0.7 },
    ]];
    let rep = evaluate(&preds, &gts, 1, 0.5).unwrap();
    let (hits, n) = oracle_counts(&preds, &gts, 0, 0.5);
    (rep.classes[0].ap.unwrap(), oracle_ap(&hits, n))
}

// ---------------------------------------------------------------- analyzer

fn preset() -> NetGraph {
    build_edge_yolo(80, AnchorSet::default_416(), 6).unwrap()
}

/// Rows 0-15 and 17-32 carry printed BFLOPS; the known-discrepancy rows are
/// skipped.
pub fn check_bflops() -> Result<String, String> {
    let start = Instant::now();
    let report = analyze(&preset());
    let golden = GoldenTable::edge_yolo_416();
    let mut checked = 0;
    for row in &golden.rows {
        if row.index == 16 || row.index > 32 || golden.known_discrepancies.contains(&row.index) {
            continue;
        }
        let Some(want) = row.bflops else { continue };
        let got = report.layers[row.index].bflops;
        ensure((got - want).abs() <= BFLOPS_TOLERANCE, || {
            format!("layer {}: {got:.4} BFLOPS, table says {want}", row.index)
        })?;
        checked += 1;
    }
    for (layer, want) in [(0, 0.075), (1, 0.399), (2, 0.797), (7, 0.089), (15, 0.058)] {
        let got = report.layers[layer].bflops;
        ensure((got - want).abs() <= BFLOPS_TOLERANCE, || format!("layer {layer}: {got} vs {want}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("analysis took {elapsed:?}"))?;
    Ok(format!("{checked} rows within ±{BFLOPS_TOLERANCE}, excluded {:?}", golden.known_discrepancies))
}

pub fn check_shapes() -> Result<String, String> {
    let g = preset();
    let report = analyze(&g);
    let golden = GoldenTable::edge_yolo_416();
    let mut cells = 0;
    for row in &golden.rows {
        if golden.known_discrepancies.contains(&row.index) {
            // Only the channel count is misprinted on those rows.
            let s = report.layers[row.index].output;
            ensure((s.h, s.w) == (row.out_h, row.out_w), || format!("layer {}: grid {s}", row.index))?;
            cells += 2;
            continue;
        }
        let s = report.layers[row.index].output;
        ensure((s.c, s.h, s.w) == (row.out_c, row.out_h, row.out_w), || {
            format!("layer {}: {}x{}x{}, table says {}x{}x{}", row.index, s.h, s.w, s.c, row.out_h, row.out_w, row.out_c)
        })?;
        cells += 3;
    }
    let at = |i: usize| report.layers[i].output;
    ensure((at(0).h, at(0).w, at(0).c) == (208, 208, 32), || "layer 0 is not 208x208x32".into())?;
    let mut grids: Vec<(usize, usize)> = g
        .heads()
        .iter()
        .map(|&(l, s)| (s, g.shapes()[l].h))
        .collect();
    grids.sort();
    ensure(grids == vec![(0, 13), (1, 26), (2, 52)], || format!("head grids {grids:?}"))?;
    for &(l, _) in &g.heads() {
        ensure(g.shapes()[l].c == 6 * 85, || format!("head {l} has {} channels", g.shapes()[l].c))?;
    }
    Ok(format!("{cells} table cells exact; heads 13/26/52 with 510 channels"))
}

// ---------------------------------------------------------------- round trips

fn proptest_runner(cases: u32) -> TestRunner {
    TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    })
}

const SMALL_NETS: [&str; 3] = [
    MINI_GRAPH,
    "net 8 8 3\nclasses 1\nconv 3x3/1 4\nmax 2x2/2\nconv 1x1/1 6 linear\nhead 0\n",
    "net 16 16 1\nclasses 3\nconv 3x3/2 8\nconv 3x3/1 8\nroute 1 0\nconv 1x1/1 8 linear\nhead 0\n",
];

/// Weights of random values, including arbitrary bit patterns, survive a
/// save and load unchanged.
pub fn check_weights_round_trip(cases: u32) -> Result<String, String> {
    let mut runner = proptest_runner(cases);
    let strategy = (0..SMALL_NETS.len(), any::<u64>(), prop::collection::vec(any::<u32>(), 0..16));
    runner
        .run(&strategy, |(net, seed, raw_bits)| {
            let mut g = parse_config(SMALL_NETS[net]).unwrap();
            g.init_random(seed);
            let mut r = rng(seed);
            for (i, p) in g.params_mut().unwrap().iter_mut().flatten().enumerate() {
                if let Some(bn) = p.bn.as_mut() {
                    for v in bn.running_mean.iter_mut() {
                        *v = r.random_range(-3.0..3.0);
                    }
                    for v in bn.running_var.iter_mut() {
                        *v = r.random_range(0.0..3.0);
                    }
                }
                for (j, bits) in raw_bits.iter().enumerate() {
                    let data = p.conv.weights.data_mut();
                    let k = (j * 7919 + i) % data.len();
                    data[k] = f32::from_bits(*bits);
                }
            }
            let bytes = weights_to_bytes(&g).unwrap();
            let back = load_weights(&g, &bytes[..]).unwrap();
            prop_assert_eq!(weights_to_bytes(&back).unwrap(), bytes);
            for (a, b) in g.params().unwrap().iter().zip(back.params().unwrap()) {
                match (a, b) {
                    (Some(a), Some(b)) => {
                        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                        prop_assert_eq!(bits(a.conv.weights.data()), bits(b.conv.weights.data()));
                        prop_assert_eq!(bits(&a.conv.bias), bits(&b.conv.bias));
                        if let (Some(x), Some(y)) = (&a.bn, &b.bn) {
                            prop_assert_eq!(bits(&x.gamma), bits(&y.gamma));
                            prop_assert_eq!(bits(&x.beta), bits(&y.beta));
                            prop_assert_eq!(bits(&x.running_mean), bits(&y.running_mean));
                            prop_assert_eq!(bits(&x.running_var), bits(&y.running_var));
                        }
                    }
                    (None, None) => {}
                    _ => prop_assert!(false, "parameter presence differs"),
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} weight files bitwise identical"))
}

pub fn message_strategy() -> impl Strategy<Value = Message> {
    (
        prop::sample::select(MessageType::ALL.to_vec()),
        any::<u32>(),
        prop::collection::vec(any::<u8>(), 0..2048),
    )
        .prop_map(|(kind, version, payload)| Message::new(kind, version, payload))
}

pub fn check_protocol_round_trip(cases: u32) -> Result<String, String> {
    let mut runner = proptest_runner(cases);
    runner
        .run(&message_strategy(), |msg| {
            let bytes = encode_message(&msg).unwrap();
            prop_assert_eq!(bytes.len(), 18 + msg.payload.len());
            prop_assert_eq!(decode_message(&bytes).unwrap(), msg);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} messages decode to themselves"))
}

// ---------------------------------------------------------------- simulator

pub fn check_simulator() -> Result<String, String> {
    let counts = [1usize, 2, 3, 5, 8, 10, 15, 20, 30, 50, 100, 200, 500];
    let cloud = Scenario::default();
    let curve = delay_curve(&cloud, &counts).map_err(|e| e.to_string())?;
    for w in curve.windows(2) {
        ensure(w[1].1 > w[0].1, || format!("cloud mean delay not increasing: {:?} -> {:?}", w[0], w[1]))?;
    }

    let mut crossings = Vec::new();
    for profile in [LatencyProfile::Xavier, LatencyProfile::Nano] {
        let ecc = Scenario {
            path: PathKind::EdgeCloud,
            edge: EdgeParams::with_profile(profile),
            ..Scenario::default()
        };
        for &n in &counts {
            let t = run_sim(&Scenario { n_frames: n, ..ecc.clone() }).map_err(|e| e.to_string())?;
            ensure(t.delays.len() == n, || format!("{profile:?}: {} delays for {n} frames", t.delays.len()))?;
            for d in &t.delays {
                ensure((d.delay_s - profile.infer_s()).abs() <= 1e-9, || {
                    format!("{profile:?} n={n}: frame {} took {}", d.frame, d.delay_s)
                })?;
            }
        }
        crossings.push((profile, crossover(&curve, profile.infer_s())));
    }
    let nano = crossings[1].1;
    ensure(curve[0].1 < LatencyProfile::Nano.infer_s() && nano.is_some(), || {
        format!("no crossover with the slower edge profile: {crossings:?}, curve {curve:?}")
    })?;

    let big = Scenario {
        n_frames: 10_000,
        seed: 3,
        ..Scenario::default()
    };
    let big_ecc = Scenario {
        path: PathKind::EdgeCloud,
        ..big.clone()
    };
    let start = Instant::now();
    let a = run_sim(&big).map_err(|e| e.to_string())?;
    let e1 = run_sim(&big_ecc).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let b = run_sim(&big).map_err(|e| e.to_string())?;
    let e2 = run_sim(&big_ecc).map_err(|e| e.to_string())?;
    let csv = |t: &edge_yolo::edgecloud::SimTrace| {
        let mut v = Vec::new();
        t.write_csv(&mut v).unwrap();
        v
    };
    let bits = |t: &edge_yolo::edgecloud::SimTrace| t.delays.iter().map(|d| d.delay_s.to_bits()).collect::<Vec<_>>();
    ensure(csv(&a) == csv(&b) && bits(&a) == bits(&b), || "cloud traces differ between runs".into())?;
    ensure(csv(&e1) == csv(&e2) && bits(&e1) == bits(&e2), || "edge traces differ between runs".into())?;
    ensure(elapsed < Duration::from_secs(5), || format!("10^4 frames on both paths took {elapsed:?}"))?;
    Ok(format!(
        "cloud mean {:.4}s -> {:.4}s over {}..{} pictures; crossover with nano at {} pictures; \
         10^4 frames x2 paths in {:.2?}",
        curve[0].1,
        curve[curve.len() - 1].1,
        counts[0],
        counts[counts.len() - 1],
        nano.unwrap(),
        elapsed
    ))
}

// ---------------------------------------------------------------- training

pub fn check_toy_training() -> Result<String, String> {
    let cfg = ToyConfig::default();
    let start = Instant::now();
    let out = train_toy(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ratio = out.final_loss / out.initial_loss;
    let per_class: Vec<String> = out
        .final_eval
        .classes
        .iter()
        .map(|c| format!("{:.3}", c.ap.unwrap_or(f64::NAN)))
        .collect();
    let detail = format!(
        "loss {:.3} -> {:.3} (ratio {ratio:.3}), mAP@0.5 {:.3} [{}], {:.0?}",
        out.initial_loss,
        out.final_loss,
        out.final_eval.map,
        per_class.join(", "),
        elapsed
    );
    ensure(ratio < 0.2, || format!("loss ratio too high: {detail}"))?;
    ensure(out.final_eval.map > 0.9, || format!("mAP too low: {detail}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("over budget: {detail}"))?;
    Ok(detail)
}

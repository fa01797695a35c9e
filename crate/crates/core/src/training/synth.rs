//! Seeded synthetic detection data: colored rectangles and ellipses on a
//! noise background. The class of an object is its color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::postprocess::{iou, BBox, GroundTruth};
use crate::tensor::{Scalar, Shape, Tensor};

/// RGB color of each class, in `[0, 1]`.
pub const PALETTE: [[f64; 3]; 4] = [[0.95, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.3, 1.0], [0.95, 0.9, 0.1]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Between 1 and 4.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: f64,
    pub max_extent: f64,
    /// Background pixels are uniform in `[0, noise]`.
    pub noise: f64,
    /// Objects overlap each other by at most this IoU.
    pub max_overlap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_extent: 10.0,
            max_extent: 32.0,
            noise: 0.3,
            max_overlap: 0.05,
        }
    }
}

/// One rendered image, `1×3×size×size`, with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub image: Tensor<T>,
    pub objects: Vec<(GroundTruth, ShapeKind)>,
}

impl<T: Scalar> Sample<T> {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects.iter().map(|(g, _)| *g).collect()
    }
}

pub struct SynthGenerator {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig, seed: u64) -> Self {
        assert!((1..=PALETTE.len()).contains(&cfg.num_classes), "1 to 4 classes");
        assert!(cfg.min_objects <= cfg.max_objects && cfg.max_objects > 0);
        assert!(cfg.min_extent > 0.0 && cfg.min_extent <= cfg.max_extent && cfg.max_extent <= cfg.size as f64);
        SynthGenerator {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn sample<T: Scalar>(&mut self) -> Sample<T> {
        let cfg = &self.cfg;
        let size = cfg.size as f64;
        let rng = &mut self.rng;

        let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects: Vec<(GroundTruth, ShapeKind)> = Vec::with_capacity(count);
        let mut tries = 0;
        while objects.len() < count && tries < 50 {
            tries += 1;
            let w = rng.random_range(cfg.min_extent..=cfg.max_extent);
            let h = rng.random_range(cfg.min_extent..=cfg.max_extent);
            let cx = rng.random_range(w / 2.0..=size - w / 2.0);
            let cy = rng.random_range(h / 2.0..=size - h / 2.0);
            let bbox = BBox::new(cx, cy, w, h);
            if objects.iter().any(|(o, _)| iou(&o.bbox, &bbox) > cfg.max_overlap) {
                continue;
            }
            let class_id = rng.random_range(0..cfg.num_classes);
            let kind = if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse };
            objects.push((GroundTruth { bbox, class_id }, kind));
        }

        let n = cfg.size;
        let mut pixels = vec![0.0f64; 3 * n * n];
        for p in pixels.iter_mut() {
            *p = rng.random_range(0.0..=cfg.noise);
        }
        for (g, kind) in &objects {
            let color = PALETTE[g.class_id].map(|c| (c + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0));
            let (x1, y1, x2, y2) = g.bbox.corners();
            let (rx, ry) = (g.bbox.w / 2.0, g.bbox.h / 2.0);
            for y in (y1.floor().max(0.0) as usize)..(y2.ceil().min(size) as usize) {
                for x in (x1.floor().max(0.0) as usize)..(x2.ceil().min(size) as usize) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = match kind {
                        ShapeKind::Rect => px >= x1 && px <= x2 && py >= y1 && py <= y2,
                        ShapeKind::Ellipse => ((px - g.bbox.cx) / rx).powi(2) + ((py - g.bbox.cy) / ry).powi(2) <= 1.0,
                    };
                    if inside {
                        for (c, v) in color.iter().enumerate() {
                            pixels[(c * n + y) * n + x] = *v;
                        }
                    }
                }
            }
        }
        let image = Tensor::from_vec(Shape::new(1, 3, n, n), pixels.into_iter().map(T::from_f64).collect())
            .expect("canvas shape");
        Sample { image, objects }
    }

    /// `count` samples stacked into one batch tensor.
    pub fn batch<T: Scalar>(&mut self, count: usize) -> (Tensor<T>, Vec<Vec<GroundTruth>>) {
        let samples: Vec<Sample<T>> = (0..count).map(|_| self.sample()).collect();
        let gts = samples.iter().map(Sample::ground_truth).collect();
        let images: Vec<Tensor<T>> = samples.into_iter().map(|s| s.image).collect();
        (Tensor::stack(&images).expect("equal canvas sizes"), gts)
    }
}

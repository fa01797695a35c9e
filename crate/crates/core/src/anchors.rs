//! Anchor priors: the [`AnchorSet`] container and K-means clustering of
//! ground-truth box extents.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("need at least {k} boxes to fit {k} anchors, got {m}")]
    TooFewBoxes { k: usize, m: usize },
    #[error("anchor count must be positive")]
    ZeroK,
    #[error("max_iter must be at least 1")]
    ZeroIterations,
    #[error("restarts must be at least 1")]
    ZeroRestarts,
    #[error("box {index} has non-positive extent ({w}, {h})")]
    NonPositive { index: usize, w: f64, h: f64 },
    #[error("anchor count {count} cannot be split evenly over {groups} scales")]
    Grouping { count: usize, groups: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anchor `(w, h)` priors in pixels at network input resolution, sorted by
/// ascending area.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(mut anchors: Vec<(f64, f64)>) -> Result<Self, AnchorError> {
        for (index, &(w, h)) in anchors.iter().enumerate() {
            if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
                return Err(AnchorError::NonPositive { index, w, h });
            }
        }
        anchors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
        Ok(AnchorSet { anchors })
    }

    /// Eighteen priors, six per scale, for 416×416 inputs.
    pub fn default_416() -> Self {
        AnchorSet::new(vec![
            (10.0, 13.0),
            (16.0, 30.0),
            (33.0, 23.0),
            (23.0, 45.0),
            (45.0, 30.0),
            (30.0, 61.0),
            (62.0, 45.0),
            (45.0, 90.0),
            (90.0, 64.0),
            (59.0, 119.0),
            (116.0, 90.0),
            (80.0, 160.0),
            (156.0, 198.0),
            (230.0, 150.0),
            (150.0, 300.0),
            (373.0, 326.0),
            (300.0, 400.0),
            (400.0, 300.0),
        ])
        .expect("default anchors are positive")
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    /// Anchors for the head at `scale_index` out of `num_scales` heads.
    ///
    /// Scale 0 is the coarsest grid and receives the largest anchors; the
    /// finest grid receives the smallest.
    pub fn for_scale(&self, scale_index: usize, num_scales: usize) -> Result<&[(f64, f64)], AnchorError> {
        if num_scales == 0 || !self.anchors.len().is_multiple_of(num_scales) || scale_index >= num_scales {
            return Err(AnchorError::Grouping {
                count: self.anchors.len(),
                groups: num_scales,
            });
        }
        let per = self.anchors.len() / num_scales;
        let group = num_scales - 1 - scale_index;
        Ok(&self.anchors[group * per..(group + 1) * per])
    }

    /// Reads one `w,h` pair per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, AnchorError> {
        let mut anchors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| AnchorError::Parse {
                line: i + 1,
                msg: format!("{msg}: `{line}`"),
            };
            let (w, h) = line.split_once(',').ok_or_else(|| parse_err("expected `w,h`"))?;
            let w: f64 = w.trim().parse().map_err(|_| parse_err("bad width"))?;
            let h: f64 = h.trim().parse().map_err(|_| parse_err("bad height"))?;
            anchors.push((w, h));
        }
        AnchorSet::new(anchors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnchorError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnchorError> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for AnchorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (w, h) in &self.anchors {
            writeln!(f, "{w:.4},{h:.4}")?;
        }
        Ok(())
    }
}

/// Ground-truth box extents in pixels, with the input resolution used for
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDataset {
    pub boxes: Vec<(f64, f64)>,
    pub input_w: f64,
    pub input_h: f64,
}

impl AnchorDataset {
    pub fn new(boxes: Vec<(f64, f64)>, input_w: f64, input_h: f64) -> Result<Self, AnchorError> {
        for (index, &(w, h)) in boxes.iter().enumerate() {
            if !(w > 0.0 && h > 0.0) {
                return Err(AnchorError::NonPositive { index, w, h });
            }
        }
        Ok(AnchorDataset { boxes, input_w, input_h })
    }

    fn normalized(&self) -> Vec<[f64; 2]> {
        self.boxes.iter().map(|&(w, h)| [w / self.input_w, h / self.input_h]).collect()
    }
}

/// Point-to-centroid dissimilarity used during assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    /// `‖x − μ‖²` on normalized extents.
    #[default]
    Euclidean,
    /// `1 − IoU` of the two extents placed at a common origin.
    Iou,
}

impl Distance {
    fn eval(self, x: [f64; 2], mu: [f64; 2]) -> f64 {
        match self {
            Distance::Euclidean => sq_dist(x, mu),
            Distance::Iou => {
                let inter = x[0].min(mu[0]) * x[1].min(mu[1]);
                let union = x[0] * x[1] + mu[0] * mu[1] - inter;
                if union > 0.0 {
                    1.0 - inter / union
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub distance: Distance,
    /// Independent random starts; the run with the lowest final distortion
    /// wins. One start is plain Lloyd.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iter: 300,
            distance: Distance::Euclidean,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

/// Box extents from a label file with lines `image,class,cx,cy,w,h` in
/// pixels. A leading header row and `#` comments are skipped.
pub fn read_label_extents(source: impl std::io::Read) -> Result<Vec<(f64, f64)>, AnchorError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = |rec: &csv::StringRecord| rec.position().map_or(i + 1, |p| p.line() as usize);
        let rec = rec.map_err(|e| AnchorError::Parse {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        if rec.len() != 6 {
            return Err(AnchorError::Parse {
                line: line(&rec),
                msg: format!("expected 6 fields `image,class,cx,cy,w,h`, got {}", rec.len()),
            });
        }
        let (w, h) = (rec[4].parse::<f64>(), rec[5].parse::<f64>());
        match (w, h) {
            (Ok(w), Ok(h)) => out.push((w, h)),
            _ if i == 0 => continue,
            _ => {
                return Err(AnchorError::Parse {
                    line: line(&rec),
                    msg: format!("bad extent `{},{}`", &rec[4], &rec[5]),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub anchors: AnchorSet,
    /// Final cluster index of every input box (cluster order, not area order).
    pub assignment: Vec<usize>,
    /// Squared-Euclidean distortion (normalized units) after each iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl KMeansOutcome {
    pub fn distortion(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }
}

/// Clusters box extents into `k` anchors with Lloyd iterations.
pub fn kmeans_anchors(data: &AnchorDataset, k: usize, seed: u64, max_iter: usize) -> Result<AnchorSet, AnchorError> {
    let cfg = KMeansConfig {
        max_iter,
        ..KMeansConfig::new(k, seed)
    };
    Ok(kmeans_detailed(data, &cfg)?.anchors)
}

pub fn kmeans_detailed(data: &AnchorDataset, cfg: &KMeansConfig) -> Result<KMeansOutcome, AnchorError> {
    let k = cfg.k;
    let m = data.boxes.len();
    if k == 0 {
        return Err(AnchorError::ZeroK);
    }
    if cfg.max_iter == 0 {
        return Err(AnchorError::ZeroIterations);
    }
    if m < k {
        return Err(AnchorError::TooFewBoxes { k, m });
    }
    if cfg.restarts == 0 {
        return Err(AnchorError::ZeroRestarts);
    }
    let points = data.normalized();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Run> = None;
    for _ in 0..cfg.restarts {
        let start = rand::seq::index::sample(&mut rng, m, k)
            .into_iter()
            .map(|j| points[j])
            .collect();
        let run = lloyd(&points, start, cfg);
        // Strictly lower only, so the earliest start wins ties.
        if best.as_ref().is_none_or(|b| run.distortion() < b.distortion()) {
            best = Some(run);
        }
    }
    let Run {
        centroids,
        assignment,
        history,
        converged,
    } = best.expect("at least one start");

    let anchors = AnchorSet::new(
        centroids
            .iter()
            .map(|c| (c[0] * data.input_w, c[1] * data.input_h))
            .collect(),
    )?;
    Ok(KMeansOutcome {
        anchors,
        assignment,
        history,
        converged,
    })
}

struct Run {
    centroids: Vec<[f64; 2]>,
    assignment: Vec<usize>,
    history: Vec<f64>,
    converged: bool,
}

impl Run {
    fn distortion(&self) -> f64 {
        self.history.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn lloyd(points: &[[f64; 2]], mut centroids: Vec<[f64; 2]>, cfg: &KMeansConfig) -> Run {
    let k = centroids.len();
    let m = points.len();
    let mut assignment = vec![0usize; m];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        for (j, &x) in points.iter().enumerate() {
            assignment[j] = nearest(&centroids, x, cfg.distance);
        }
        reseed_empty(points, &mut centroids, &mut assignment, cfg.distance);

        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (j, &c) in assignment.iter().enumerate() {
            sums[c][0] += points[j][0];
            sums[c][1] += points[j][1];
            counts[c] += 1;
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            if updated != centroids[c] {
                centroids[c] = updated;
                moved = true;
            }
        }
        history.push(
            points
                .iter()
                .zip(&assignment)
                .map(|(&x, &c)| sq_dist(x, centroids[c]))
                .sum(),
        );
        if !moved {
            converged = true;
            break;
        }
    }
    Run {
        centroids,
        assignment,
        history,
        converged,
    }
}

fn nearest(centroids: &[[f64; 2]], x: [f64; 2], distance: Distance) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &mu) in centroids.iter().enumerate() {
        let d = distance.eval(x, mu);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Moves each empty centroid onto the point farthest from its current
/// centroid (lowest index on ties), and assigns that point to it.
fn reseed_empty(points: &[[f64; 2]], centroids: &mut [[f64; 2]], assignment: &mut [usize], distance: Distance) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &c in assignment.iter() {
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = 0.0;
        for (j, &x) in points.iter().enumerate() {
            if counts[assignment[j]] < 2 {
                continue;
            }
            let d = distance.eval(x, centroids[assignment[j]]);
            if d > far_d {
                far_d = d;
                far = Some(j);
            }
        }
        let Some(j) = far else {
            continue;
        };
        counts[assignment[j]] -= 1;
        assignment[j] = c;
        counts[c] = 1;
        centroids[c] = points[j];
    }
}

/// Sum over boxes of the squared distance to the nearest anchor, in
/// normalized units.
pub fn distortion(data: &AnchorDataset, anchors: &AnchorSet) -> f64 {
    let centroids: Vec<[f64; 2]> = anchors
        .as_slice()
        .iter()
        .map(|&(w, h)| [w / data.input_w, h / data.input_h])
        .collect();
    data.normalized()
        .into_iter()
        .map(|x| {
            centroids
                .iter()
                .map(|&mu| sq_dist(x, mu))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

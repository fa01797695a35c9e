use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use edge_yolo::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{load_weighted, ModelArgs};

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Weights file [default: seeded random weights]
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Timed forward passes
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    /// Untimed passes before measuring
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    warmup: u64,
    /// Seed for the input and any random weights
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Wall-clock summary of the timed passes. Spread fields are absent for a
/// single sample.
#[derive(Debug, Serialize, PartialEq)]
pub struct BenchReport {
    pub runs: usize,
    pub warmup: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub fps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p95_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_ms: Option<f64>,
}

impl BenchReport {
    pub fn from_samples(samples_ms: &[f64], warmup: u64) -> Self {
        assert!(!samples_ms.is_empty());
        let n = samples_ms.len();
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let spread = n > 1;
        let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // Nearest-rank percentile.
        let p95 = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        BenchReport {
            runs: n,
            warmup,
            mean_ms: mean,
            median_ms: median,
            fps: 1000.0 / mean,
            p95_ms: spread.then_some(p95),
            std_ms: spread.then(|| var.sqrt()),
            min_ms: spread.then_some(sorted[0]),
            max_ms: spread.then_some(sorted[n - 1]),
        }
    }
}

pub fn run(a: &BenchArgs) -> Result<()> {
    let mut g = a.model.graph()?;
    match &a.weights {
        Some(p) => g = load_weighted(&g, p)?,
        None => g.init_random(a.seed),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let input = Tensor::<f32>::from_fn(g.input_shape(), |_, _, _, _| rng.random());
    for _ in 0..a.warmup {
        g.forward(&input)?;
    }
    let mut samples = Vec::with_capacity(a.runs as usize);
    for _ in 0..a.runs {
        let start = Instant::now();
        let out = g.forward(&input)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    println!("{}", serde_json::to_string(&BenchReport::from_samples(&samples, a.warmup))?);
    Ok(())
}

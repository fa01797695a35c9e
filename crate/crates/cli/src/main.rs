mod bench;
mod detect;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use edge_yolo::analyzer::{analyze, diff_golden, GoldenTable};
use edge_yolo::anchors::{kmeans_detailed, read_label_extents, AnchorDataset, Distance, KMeansConfig};
use edge_yolo::edgecloud::{
    crossover, delay_curve, run_cloud, run_edge, run_sim, CloudConfig, EdgeConfig, EdgeParams, LatencyProfile,
    NetworkModel, PathKind, Scenario,
};
use edge_yolo::netdef::{load_weights, parse_config, save_weights, EDGE_YOLO_416};
use edge_yolo::postprocess::SoftNmsConfig;
use edge_yolo::training::{toy_graph, train_toy, OptimizerConfig, ToyConfig};
use edge_yolo::{AnchorSet, NetGraph};
use log::info;
use serde_json::json;

/// Edge YOLO detector toolkit: inference, cost analysis, anchor fitting,
/// toy training and edge-cloud cooperation.
#[derive(Parser)]
#[command(name = "edge-yolo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detector on images and write JSON-lines detections.
    Detect(detect::DetectArgs),
    /// Time forward passes.
    Bench(bench::BenchArgs),
    /// Per-layer output shapes, parameters and BFLOPS.
    Analyze(AnalyzeArgs),
    /// Fit anchor boxes to labeled box extents with k-means.
    Anchors(AnchorsArgs),
    /// Train the reduced-width detector on synthetic shapes.
    TrainToy(TrainToyArgs),
    /// Simulate per-frame delay on the edge-cloud or the cloud-only path.
    Sim(SimArgs),
    /// Run the edge role against a live cloud.
    Edge(EdgeArgs),
    /// Serve the cloud role.
    Cloud(CloudArgs),
}

/// Network description and weights shared by several subcommands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Network description file [default: the built-in 416x416 preset]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Anchor file with one `w,h` per line [default: the built-in 18
    /// anchors for 416x416]
    #[arg(long)]
    pub anchors: Option<PathBuf>,
}

impl ModelArgs {
    pub fn graph(&self) -> Result<NetGraph> {
        let mut g = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => parse_config(EDGE_YOLO_416)?,
        };
        let anchors = match &self.anchors {
            Some(p) => AnchorSet::load(p).with_context(|| format!("reading anchors {}", p.display()))?,
            None => AnchorSet::default_416(),
        };
        g.set_anchors(anchors).context("anchors do not fit the network heads")?;
        Ok(g)
    }
}

pub fn load_weighted(g: &NetGraph, path: &Path) -> Result<NetGraph> {
    let file = File::open(path).with_context(|| format!("opening weights {}", path.display()))?;
    load_weights(g, std::io::BufReader::new(file)).with_context(|| format!("loading weights {}", path.display()))
}

/// Soft-NMS settings.
#[derive(Args, Debug, Clone, Copy)]
pub struct NmsArgs {
    /// Gaussian decay width
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Overlap at which decay starts
    #[arg(long, default_value_t = 0.45)]
    pub t_nms: f64,
    /// Boxes scoring below this are dropped
    #[arg(long, default_value_t = 0.001)]
    pub score_floor: f64,
}

impl NmsArgs {
    pub fn config(&self) -> Result<SoftNmsConfig> {
        let cfg = SoftNmsConfig {
            sigma: self.sigma,
            t_nms: self.t_nms,
            score_floor: self.score_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Network description file [default: the built-in 416x416 preset]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference table (index,kind,size,stride,filters,out_c,out_h,out_w,bflops)
    /// to compare against, or `builtin` for the preset's table; exits nonzero
    /// on unexpected differences
    #[arg(long)]
    golden: Option<PathBuf>,
    /// Also write the per-layer report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Euclidean,
    Iou,
}

#[derive(Args)]
struct AnchorsArgs {
    /// Label CSV with lines `image,class,cx,cy,w,h` in pixels
    #[arg(long)]
    labels: PathBuf,
    /// Number of anchors
    #[arg(long, default_value_t = 18)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    /// Random starts; the lowest-distortion run is kept
    #[arg(long, default_value_t = edge_yolo::anchors::DEFAULT_RESTARTS)]
    restarts: usize,
    /// Network input side used to normalize extents
    #[arg(long, default_value_t = 416.0)]
    input_size: f64,
    #[arg(long, value_enum, default_value_t = DistanceArg::Euclidean)]
    distance: DistanceArg,
    /// Anchor file to write
    #[arg(long, default_value = "anchors.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Weights file to write
    #[arg(long, default_value = "weights.eywt")]
    out: PathBuf,
    /// Per-step loss history CSV
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum PathArg {
    Ecc,
    Cloud,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_enum, default_value_t = PathArg::Cloud)]
    path: PathArg,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON network model; missing fields keep their defaults (uplink
    /// 61.4 Mbps, downlink 20.35 Mbps, rtt 14 ms, no loss, no jitter)
    #[arg(long)]
    net_profile: Option<PathBuf>,
    /// Edge inference latency: xavier (26.6 FPS), nano (11.4 FPS) or seconds
    #[arg(long, default_value = "xavier")]
    edge_profile: LatencyProfile,
    /// Event trace CSV (time_s,node,event,frame_id,delay_s)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Mean delay against picture count for the cloud path and both edge
    /// profiles, as CSV
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Picture counts for --curve
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50,100,200")]
    counts: Vec<usize>,
}

/// Model shared by the live edge and cloud roles; both ends must agree.
#[derive(Args)]
struct LiveModelArgs {
    /// Seed of the reduced-width model both roles start from
    #[arg(long, default_value_t = 7)]
    model_seed: u64,
    /// Start from these weights instead of the seeded initialization
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl LiveModelArgs {
    fn graph(&self) -> Result<NetGraph> {
        let g = toy_graph(&ToyConfig {
            seed: self.model_seed,
            ..ToyConfig::default()
        })?;
        match &self.weights {
            Some(p) => load_weighted(&g, p),
            None => Ok(g),
        }
    }
}

#[derive(Args)]
struct EdgeArgs {
    /// Cloud address
    #[arg(long, default_value = "127.0.0.1:7878")]
    cloud: SocketAddr,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Capture rate while active; 0 captures as fast as inference allows
    #[arg(long, default_value_t = 30.0)]
    capture_fps: f64,
    /// Active plus idle cycle length in milliseconds
    #[arg(long, default_value_t = 1000)]
    duty_period_ms: u64,
    /// Share of each cycle spent capturing
    #[arg(long, default_value_t = 0.8)]
    active_fraction: f64,
    /// Wait for this model version after uploading
    #[arg(long, default_value_t = 1)]
    await_version: u32,
    #[arg(long, default_value_t = 60)]
    version_timeout_s: u64,
    #[command(flatten)]
    model: LiveModelArgs,
    #[command(flatten)]
    nms: NmsArgs,
}

#[derive(Args)]
struct CloudArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: SocketAddr,
    /// Fine-tune after this many new frames
    #[arg(long, default_value_t = 4)]
    retrain_every: usize,
    /// SGD steps per fine-tune
    #[arg(long, default_value_t = 10)]
    retrain_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit after this many seconds without a connected edge [default: serve forever]
    #[arg(long)]
    idle_timeout_s: Option<u64>,
    #[command(flatten)]
    model: LiveModelArgs,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    // Anchors do not affect cost; skip them so any head layout analyzes.
    let graph = match &a.config {
        Some(p) => parse_config(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => parse_config(EDGE_YOLO_416)?,
    };
    let report = analyze(&graph);
    print!("{}", report.to_text());
    if let Some(p) = &a.csv {
        report.write_csv(create(p)?)?;
    }
    if let Some(p) = &a.golden {
        let golden = if p.as_os_str() == "builtin" {
            GoldenTable::edge_yolo_416()
        } else {
            GoldenTable::load(p).with_context(|| format!("reading {}", p.display()))?
        };
        let diffs = diff_golden(&report, &golden);
        let unexpected: Vec<_> = diffs.iter().filter(|d| !d.known_discrepancy).collect();
        for d in &diffs {
            let tag = if d.known_discrepancy { "known" } else { "MISMATCH" };
            println!("{tag}: {d}");
        }
        if !unexpected.is_empty() {
            bail!("{} unexpected differences from {}", unexpected.len(), p.display());
        }
        println!("golden table: {} rows, no unexpected differences", golden.rows.len());
    }
    Ok(())
}

fn cmd_anchors(a: &AnchorsArgs) -> Result<()> {
    let file = File::open(&a.labels).with_context(|| format!("opening {}", a.labels.display()))?;
    let extents = read_label_extents(file).with_context(|| format!("reading {}", a.labels.display()))?;
    let data = AnchorDataset::new(extents, a.input_size, a.input_size)?;
    let cfg = KMeansConfig {
        max_iter: a.max_iter,
        restarts: a.restarts,
        distance: match a.distance {
            DistanceArg::Euclidean => Distance::Euclidean,
            DistanceArg::Iou => Distance::Iou,
        },
        ..KMeansConfig::new(a.k, a.seed)
    };
    let out = kmeans_detailed(&data, &cfg)?;
    out.anchors.save(&a.out)?;
    print!("{}", out.anchors);
    info!(
        "{} anchors from {} boxes, distortion {:.6}, {} iterations{}",
        a.k,
        data.boxes.len(),
        out.distortion(),
        out.history.len(),
        if out.converged { "" } else { " (not converged)" }
    );
    Ok(())
}

fn cmd_train_toy(a: &TrainToyArgs) -> Result<()> {
    let base = ToyConfig::default();
    let cfg = ToyConfig {
        seed: a.seed,
        optimizer: OptimizerConfig {
            eta: a.eta,
            batch_size: a.batch,
            steps: a.steps,
            ..base.optimizer
        },
        ..base
    };
    let out = train_toy(&cfg)?;
    save_weights(&out.graph, create(&a.out)?)?;
    // Detection on the trained model needs its layout and anchors too.
    let net = a.out.with_extension("net");
    std::fs::write(&net, out.graph.canonical_text())?;
    let anchors = a.out.with_extension("anchors");
    out.graph.anchors().expect("toy graph has anchors").save(&anchors)?;
    if let Some(p) = &a.history {
        out.history.write_csv(create(p)?)?;
    }
    println!(
        "{}",
        json!({
            "steps": a.steps,
            "initial_loss": out.initial_loss,
            "final_loss": out.final_loss,
            "loss_ratio": out.final_loss / out.initial_loss,
            "map50": out.final_eval.map,
            "weights": a.out,
            "config": net,
            "anchors": anchors,
        })
    );
    Ok(())
}

fn cmd_sim(a: &SimArgs) -> Result<()> {
    let net = match &a.net_profile {
        Some(p) => NetworkModel::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => NetworkModel::default(),
    };
    let base = Scenario {
        net,
        edge: EdgeParams::with_profile(a.edge_profile),
        n_frames: a.frames,
        seed: a.seed,
        ..Scenario::default()
    };
    let sc = Scenario {
        path: match a.path {
            PathArg::Ecc => PathKind::EdgeCloud,
            PathArg::Cloud => PathKind::Cloud,
        },
        ..base.clone()
    };
    let trace = run_sim(&sc)?;
    if let Some(p) = &a.trace {
        trace.write_csv(create(p)?)?;
    }
    let s = trace.summary();
    println!(
        "{}",
        json!({
            "path": match sc.path { PathKind::EdgeCloud => "ecc", PathKind::Cloud => "cloud" },
            "frames": a.frames,
            "mean_delay_s": s.map(|s| s.mean_delay_s),
            "p95_delay_s": s.map(|s| s.p95_delay_s),
            "max_delay_s": s.map(|s| s.max_delay_s),
            "final_version": trace.final_version,
        })
    );
    if let Some(p) = &a.curve {
        let cloud = delay_curve(&Scenario { path: PathKind::Cloud, ..base.clone() }, &a.counts)?;
        let mut edge = Vec::new();
        for profile in [LatencyProfile::Xavier, LatencyProfile::Nano] {
            let sc = Scenario {
                path: PathKind::EdgeCloud,
                edge: EdgeParams::with_profile(profile),
                ..base.clone()
            };
            edge.push(delay_curve(&sc, &a.counts)?);
            if let Some(n) = crossover(&cloud, profile.infer_s()) {
                info!("cloud path overtakes {profile:?} at {n} pictures");
            }
        }
        let mut w = csv_writer(p)?;
        w.write_record(["pictures", "cloud_s", "ecc_xavier_s", "ecc_nano_s"])?;
        for (i, &(n, c)) in cloud.iter().enumerate() {
            w.write_record([n.to_string(), format!("{c:.9}"), format!("{:.9}", edge[0][i].1), format!("{:.9}", edge[1][i].1)])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn csv_writer(p: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(p)?))
}

fn cmd_edge(a: &EdgeArgs) -> Result<()> {
    let cfg = EdgeConfig {
        frames: a.frames,
        seed: a.seed,
        capture_fps: a.capture_fps,
        duty_period: Duration::from_millis(a.duty_period_ms),
        active_fraction: a.active_fraction,
        nms: a.nms.config()?,
        await_version: a.await_version,
        version_timeout: Duration::from_secs(a.version_timeout_s),
        ..EdgeConfig::new(a.cloud)
    };
    let r = run_edge(a.model.graph()?, &cfg)?;
    println!(
        "{}",
        json!({
            "captured": r.captured,
            "uploaded": r.uploaded,
            "detections": r.detections,
            "version": r.version,
            "applied_pushes": r.applied_pushes,
            "rejected_pushes": r.rejected_pushes,
            "reconnects": r.reconnects,
        })
    );
    Ok(())
}

fn cmd_cloud(a: &CloudArgs) -> Result<()> {
    let base = CloudConfig::default();
    let cfg = CloudConfig {
        retrain_every: a.retrain_every,
        retrain_steps: a.retrain_steps,
        optimizer: OptimizerConfig {
            eta: a.eta,
            batch_size: a.batch,
            ..base.optimizer
        },
        seed: a.seed,
        idle_timeout: a.idle_timeout_s.map(Duration::from_secs),
        ..base
    };
    info!("listening on {}", a.listen);
    let r = run_cloud(a.listen, a.model.graph()?, &cfg)?;
    println!(
        "{}",
        json!({
            "sessions": r.sessions,
            "frames_received": r.frames_received,
            "duplicates": r.duplicates,
            "detect_requests": r.detect_requests,
            "retrains": r.retrains,
            "version": r.version,
        })
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Detect(a) => detect::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Anchors(a) => cmd_anchors(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Sim(a) => cmd_sim(a),
        Command::Edge(a) => cmd_edge(a),
        Command::Cloud(a) => cmd_cloud(a),
    }?;
    std::io::stdout().flush()?;
    Ok(())
}

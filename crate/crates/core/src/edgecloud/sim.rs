//! Deterministic discrete-event model of the two deployment paths.
//!
//! *Cloud* path: every captured frame crosses a shared, serialized uplink,
//! waits for the cloud server, and the detection result comes back over the
//! downlink. *Edge-cloud* path: the edge infers locally and stores frames; the
//! stored frames are uploaded only while the edge is idle, the cloud retrains
//! on them and pushes new weights back.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EdgeCloudError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkModel {
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    /// Round-trip time; each one-way hop adds half of it.
    pub rtt_s: f64,
    /// Probability that a transfer is lost and must be resent.
    pub loss_rate: f64,
    /// Each transfer takes an extra uniform `[0, jitter_s]` seconds.
    pub jitter_s: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            uplink_bps: 61.4e6,
            downlink_bps: 20.35e6,
            rtt_s: 0.014,
            loss_rate: 0.0,
            jitter_s: 0.0,
        }
    }
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), EdgeCloudError> {
        let bad = |what: &str, v: f64| Err(EdgeCloudError::Config(format!("{what} = {v}")));
        if !(self.uplink_bps > 0.0 && self.uplink_bps.is_finite()) {
            return bad("uplink_bps", self.uplink_bps);
        }
        if !(self.downlink_bps > 0.0 && self.downlink_bps.is_finite()) {
            return bad("downlink_bps", self.downlink_bps);
        }
        if !(self.rtt_s >= 0.0 && self.rtt_s.is_finite()) {
            return bad("rtt_s", self.rtt_s);
        }
        // A certain loss would never deliver anything.
        if !(0.0..1.0).contains(&self.loss_rate) {
            return bad("loss_rate", self.loss_rate);
        }
        if !(self.jitter_s >= 0.0 && self.jitter_s.is_finite()) {
            return bad("jitter_s", self.jitter_s);
        }
        Ok(())
    }

    /// Parses a JSON profile; omitted fields keep their defaults.
    pub fn from_json(text: &str) -> Result<Self, EdgeCloudError> {
        let net: NetworkModel = serde_json::from_str(text).map_err(|e| EdgeCloudError::Config(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }
}

/// Edge inference speed classes measured for the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencyProfile {
    /// 26.6 FPS.
    Xavier,
    /// 11.4 FPS.
    Nano,
    /// Arbitrary seconds per frame.
    Custom(f64),
}

impl LatencyProfile {
    pub const XAVIER_FPS: f64 = 26.6;
    pub const NANO_FPS: f64 = 11.4;

    pub fn infer_s(self) -> f64 {
        match self {
            LatencyProfile::Xavier => 1.0 / Self::XAVIER_FPS,
            LatencyProfile::Nano => 1.0 / Self::NANO_FPS,
            LatencyProfile::Custom(s) => s,
        }
    }
}

impl std::str::FromStr for LatencyProfile {
    type Err = EdgeCloudError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xavier" => Ok(LatencyProfile::Xavier),
            "nano" => Ok(LatencyProfile::Nano),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| *v > 0.0 && v.is_finite())
                .map(LatencyProfile::Custom)
                .ok_or_else(|| EdgeCloudError::Config(format!("unknown latency profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMode {
    Active,
    Idle,
}

/// Parameters of the edge node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeParams {
    pub capture_fps: f64,
    /// Local inference time per frame.
    pub infer_s: f64,
    /// Length of one active plus idle cycle.
    pub duty_period_s: f64,
    /// Share of each cycle spent active.
    pub active_fraction: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        EdgeParams {
            capture_fps: 30.0,
            infer_s: LatencyProfile::Xavier.infer_s(),
            duty_period_s: 1.0,
            active_fraction: 0.8,
        }
    }
}

impl EdgeParams {
    pub fn with_profile(profile: LatencyProfile) -> Self {
        EdgeParams {
            infer_s: profile.infer_s(),
            ..Default::default()
        }
    }

    /// Frames are captured no faster than they can be inferred.
    pub fn capture_interval(&self) -> f64 {
        (1.0 / self.capture_fps).max(self.infer_s)
    }

    fn idle_start(&self, cycle: f64) -> f64 {
        cycle * self.duty_period_s + self.active_fraction * self.duty_period_s
    }

    fn mode_at(&self, t: f64) -> EdgeMode {
        if t < self.idle_start((t / self.duty_period_s).floor()) {
            EdgeMode::Active
        } else {
            EdgeMode::Idle
        }
    }

    /// Earliest time `>= t` at which the edge is active.
    fn next_active(&self, t: f64) -> f64 {
        match self.mode_at(t) {
            EdgeMode::Active => t,
            EdgeMode::Idle => ((t / self.duty_period_s).floor() + 1.0) * self.duty_period_s,
        }
    }
}

/// Mutable state of the edge as the simulation advances.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeNodeState {
    pub mode: EdgeMode,
    /// Stored frames waiting for upload, oldest first.
    pub upload_queue: VecDeque<usize>,
    pub version: u32,
}

impl Default for EdgeNodeState {
    fn default() -> Self {
        EdgeNodeState {
            mode: EdgeMode::Active,
            upload_queue: VecDeque::new(),
            version: 0,
        }
    }
}

impl EdgeNodeState {
    /// Versions only move forward; stale pushes are ignored.
    pub fn apply_version(&mut self, version: u32) -> bool {
        if version > self.version {
            self.version = version;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    /// Edge inference, idle-time upload, cloud retraining.
    EdgeCloud,
    /// Frames offloaded to the cloud for inference.
    Cloud,
}

impl std::str::FromStr for PathKind {
    type Err = EdgeCloudError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ecc" | "edge-cloud" => Ok(PathKind::EdgeCloud),
            "cloud" => Ok(PathKind::Cloud),
            _ => Err(EdgeCloudError::Config(format!("unknown path {s:?}, expected ecc or cloud"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub path: PathKind,
    pub net: NetworkModel,
    pub edge: EdgeParams,
    pub frame_bytes: u64,
    /// Size of one detection result sent back on the cloud path.
    pub result_bytes: u64,
    /// Size of a pushed weights file.
    pub weight_bytes: u64,
    pub n_frames: usize,
    pub cloud_infer_s: f64,
    pub cloud_retrain_s: f64,
    /// The cloud retrains after receiving this many new frames.
    pub retrain_every: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            path: PathKind::Cloud,
            net: NetworkModel::default(),
            edge: EdgeParams::default(),
            frame_bytes: 300_000,
            result_bytes: 1024,
            weight_bytes: 25_270_000,
            n_frames: 100,
            cloud_infer_s: 0.008,
            cloud_retrain_s: 2.0,
            retrain_every: 50,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), EdgeCloudError> {
        self.net.validate()?;
        let e = &self.edge;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(e.capture_fps) && positive(e.infer_s) && positive(e.duty_period_s)) {
            return Err(EdgeCloudError::Config(
                "capture_fps, infer_s and duty_period_s must be positive".into(),
            ));
        }
        if !(e.active_fraction > 0.0 && e.active_fraction < 1.0) {
            return Err(EdgeCloudError::Config(format!(
                "active_fraction must lie in (0, 1), got {}",
                e.active_fraction
            )));
        }
        if !(positive(self.cloud_infer_s) && positive(self.cloud_retrain_s)) {
            return Err(EdgeCloudError::Config("cloud service times must be positive".into()));
        }
        if self.retrain_every == 0 {
            return Err(EdgeCloudError::Config("retrain_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    Edge,
    Cloud,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Node::Edge => "edge",
            Node::Cloud => "cloud",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Capture,
    InferStart,
    InferDone,
    UploadStart,
    UploadLost,
    UploadDone,
    Received,
    ResultStart,
    ResultDone,
    ResultLost,
    Delivered,
    EnterIdle,
    EnterActive,
    RetrainStart,
    RetrainDone,
    WeightPushStart,
    WeightPushLost,
    WeightsApplied,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Capture => "capture",
            EventKind::InferStart => "infer_start",
            EventKind::InferDone => "infer_done",
            EventKind::UploadStart => "upload_start",
            EventKind::UploadLost => "upload_lost",
            EventKind::UploadDone => "upload_done",
            EventKind::Received => "received",
            EventKind::ResultStart => "result_start",
            EventKind::ResultDone => "result_done",
            EventKind::ResultLost => "result_lost",
            EventKind::Delivered => "delivered",
            EventKind::EnterIdle => "enter_idle",
            EventKind::EnterActive => "enter_active",
            EventKind::RetrainStart => "retrain_start",
            EventKind::RetrainDone => "retrain_done",
            EventKind::WeightPushStart => "weight_push_start",
            EventKind::WeightPushLost => "weight_push_lost",
            EventKind::WeightsApplied => "weights_applied",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub time_s: f64,
    pub node: Node,
    pub kind: EventKind,
    pub frame: Option<usize>,
    /// Set on the event that completes a frame.
    pub delay_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDelay {
    pub frame: usize,
    pub delay_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSummary {
    pub frames: usize,
    pub mean_delay_s: f64,
    pub p95_delay_s: f64,
    pub max_delay_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
    /// One entry per captured frame, ordered by frame id.
    pub delays: Vec<FrameDelay>,
    /// Weights version held by the edge at the end.
    pub final_version: u32,
}

impl SimTrace {
    /// `None` for an empty delay series.
    pub fn summary(&self) -> Option<SimSummary> {
        if self.delays.is_empty() {
            return None;
        }
        let mut d: Vec<f64> = self.delays.iter().map(|f| f.delay_s).collect();
        d.sort_by(f64::total_cmp);
        let n = d.len();
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(SimSummary {
            frames: n,
            mean_delay_s: self.mean_delay().unwrap_or(0.0),
            p95_delay_s: d[rank - 1],
            max_delay_s: d[n - 1],
        })
    }

    pub fn mean_delay(&self) -> Option<f64> {
        (!self.delays.is_empty())
            .then(|| self.delays.iter().map(|f| f.delay_s).sum::<f64>() / self.delays.len() as f64)
    }

    /// Columns `time_s,node,event,frame_id,delay_s`; absent fields are empty.
    pub fn write_csv(&self, sink: impl io::Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["time_s", "node", "event", "frame_id", "delay_s"])?;
        for e in &self.events {
            w.write_record([
                format!("{:.9}", e.time_s),
                e.node.to_string(),
                e.kind.to_string(),
                e.frame.map_or_else(String::new, |f| f.to_string()),
                e.delay_s.map_or_else(String::new, |d| format!("{d:.9}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Payload {
    Frame(usize),
    Result(usize),
    Weights(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Transfer {
    payload: Payload,
    bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    Capture(usize),
    EdgeInferDone(usize),
    /// Mode change at the given duty cycle index.
    Duty(EdgeMode, u64),
    LinkDone(Dir, Transfer),
    Retry(Dir, Transfer),
    Arrive(Payload),
    CloudInferDone(usize),
    RetrainDone(u32),
}

struct Scheduled {
    t: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event; ties keep scheduling order.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Link {
    busy: bool,
    queue: VecDeque<Transfer>,
    retrying: usize,
}

impl Link {
    fn drained(&self) -> bool {
        !self.busy && self.queue.is_empty() && self.retrying == 0
    }
}

struct Sim<'a> {
    sc: &'a Scenario,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    events: Vec<TraceEvent>,
    capture_time: Vec<f64>,
    delays: Vec<Option<f64>>,
    edge: EdgeNodeState,
    uplink: Link,
    downlink: Link,
    captured: usize,
    inferring: usize,
    cloud_busy: bool,
    cloud_queue: VecDeque<usize>,
    unretrained: usize,
    retraining: bool,
    cloud_version: u32,
}

impl Sim<'_> {
    fn schedule(&mut self, t: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled { t, seq: self.seq, ev });
    }

    fn log(&mut self, node: Node, kind: EventKind, frame: Option<usize>) {
        self.events.push(TraceEvent {
            time_s: self.now,
            node,
            kind,
            frame,
            delay_s: None,
        });
    }

    fn complete(&mut self, node: Node, kind: EventKind, frame: usize) {
        let delay = self.now - self.capture_time[frame];
        assert!(self.delays[frame].is_none(), "frame {frame} completed twice");
        self.delays[frame] = Some(delay);
        self.events.push(TraceEvent {
            time_s: self.now,
            node,
            kind,
            frame: Some(frame),
            delay_s: Some(delay),
        });
    }

    fn link(&mut self, dir: Dir) -> &mut Link {
        match dir {
            Dir::Up => &mut self.uplink,
            Dir::Down => &mut self.downlink,
        }
    }

    fn send(&mut self, dir: Dir, payload: Payload, bytes: u64) {
        self.link(dir).queue.push_back(Transfer { payload, bytes });
        self.pump(dir);
    }

    fn pump(&mut self, dir: Dir) {
        let gated = dir == Dir::Up && self.sc.path == PathKind::EdgeCloud && self.edge.mode != EdgeMode::Idle;
        let link = self.link(dir);
        if link.busy || gated {
            return;
        }
        let Some(tr) = link.queue.pop_front() else {
            return;
        };
        link.busy = true;
        match tr.payload {
            Payload::Frame(f) => self.log(Node::Edge, EventKind::UploadStart, Some(f)),
            Payload::Result(f) => self.log(Node::Cloud, EventKind::ResultStart, Some(f)),
            Payload::Weights(_) => self.log(Node::Cloud, EventKind::WeightPushStart, None),
        }
        let bps = match dir {
            Dir::Up => self.sc.net.uplink_bps,
            Dir::Down => self.sc.net.downlink_bps,
        };
        let jitter = if self.sc.net.jitter_s > 0.0 {
            self.rng.random_range(0.0..=self.sc.net.jitter_s)
        } else {
            0.0
        };
        let dt = tr.bytes as f64 * 8.0 / bps + jitter;
        self.schedule(self.now + dt, Ev::LinkDone(dir, tr));
    }

    fn link_done(&mut self, dir: Dir, tr: Transfer) {
        self.link(dir).busy = false;
        let lost = self.sc.net.loss_rate > 0.0 && self.rng.random_bool(self.sc.net.loss_rate);
        if lost {
            match tr.payload {
                Payload::Frame(f) => self.log(Node::Edge, EventKind::UploadLost, Some(f)),
                Payload::Result(f) => self.log(Node::Cloud, EventKind::ResultLost, Some(f)),
                Payload::Weights(_) => self.log(Node::Cloud, EventKind::WeightPushLost, None),
            }
            // The sender notices the missing acknowledgement one round trip later.
            self.link(dir).retrying += 1;
            self.schedule(self.now + self.sc.net.rtt_s, Ev::Retry(dir, tr));
        } else {
            match tr.payload {
                Payload::Frame(f) => self.log(Node::Edge, EventKind::UploadDone, Some(f)),
                Payload::Result(f) => self.log(Node::Cloud, EventKind::ResultDone, Some(f)),
                Payload::Weights(_) => {}
            }
            self.schedule(self.now + self.sc.net.rtt_s / 2.0, Ev::Arrive(tr.payload));
        }
        self.pump(dir);
    }

    fn pump_cloud(&mut self) {
        if self.cloud_busy {
            return;
        }
        if let Some(f) = self.cloud_queue.pop_front() {
            self.cloud_busy = true;
            self.log(Node::Cloud, EventKind::InferStart, Some(f));
            self.schedule(self.now + self.sc.cloud_infer_s, Ev::CloudInferDone(f));
        }
    }

    fn maybe_retrain(&mut self) {
        if self.retraining || self.unretrained < self.sc.retrain_every {
            return;
        }
        self.retraining = true;
        self.unretrained = 0;
        self.log(Node::Cloud, EventKind::RetrainStart, None);
        let next = self.cloud_version + 1;
        self.schedule(self.now + self.sc.cloud_retrain_s, Ev::RetrainDone(next));
    }

    fn next_capture_time(&self, after: f64) -> f64 {
        match self.sc.path {
            PathKind::Cloud => after + 1.0 / self.sc.edge.capture_fps,
            PathKind::EdgeCloud => self.sc.edge.next_active(after + self.sc.edge.capture_interval()),
        }
    }

    fn edge_work_left(&self) -> bool {
        self.captured < self.sc.n_frames || self.inferring > 0 || !self.uplink.drained()
    }

    fn duty_time(&self, mode: EdgeMode, cycle: u64) -> f64 {
        match mode {
            EdgeMode::Idle => self.sc.edge.idle_start(cycle as f64),
            EdgeMode::Active => cycle as f64 * self.sc.edge.duty_period_s,
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Capture(f) => {
                self.captured += 1;
                self.capture_time[f] = self.now;
                self.log(Node::Edge, EventKind::Capture, Some(f));
                if f + 1 < self.sc.n_frames {
                    let t = self.next_capture_time(self.now);
                    self.schedule(t, Ev::Capture(f + 1));
                }
                match self.sc.path {
                    PathKind::Cloud => self.send(Dir::Up, Payload::Frame(f), self.sc.frame_bytes),
                    PathKind::EdgeCloud => {
                        self.inferring += 1;
                        self.log(Node::Edge, EventKind::InferStart, Some(f));
                        self.schedule(self.now + self.sc.edge.infer_s, Ev::EdgeInferDone(f));
                    }
                }
            }
            Ev::EdgeInferDone(f) => {
                self.inferring -= 1;
                self.complete(Node::Edge, EventKind::InferDone, f);
                self.edge.upload_queue.push_back(f);
                self.send(Dir::Up, Payload::Frame(f), self.sc.frame_bytes);
            }
            Ev::Duty(mode, cycle) => {
                self.edge.mode = mode;
                let (kind, next) = match mode {
                    EdgeMode::Idle => (EventKind::EnterIdle, (EdgeMode::Active, cycle + 1)),
                    EdgeMode::Active => (EventKind::EnterActive, (EdgeMode::Idle, cycle)),
                };
                self.log(Node::Edge, kind, None);
                self.pump(Dir::Up);
                if self.edge_work_left() {
                    let t = self.duty_time(next.0, next.1);
                    self.schedule(t, Ev::Duty(next.0, next.1));
                }
            }
            Ev::LinkDone(dir, tr) => self.link_done(dir, tr),
            Ev::Retry(dir, tr) => {
                let link = self.link(dir);
                link.retrying -= 1;
                link.queue.push_front(tr);
                self.pump(dir);
            }
            Ev::Arrive(Payload::Frame(f)) => {
                self.log(Node::Cloud, EventKind::Received, Some(f));
                match self.sc.path {
                    PathKind::Cloud => {
                        self.cloud_queue.push_back(f);
                        self.pump_cloud();
                    }
                    PathKind::EdgeCloud => {
                        if let Some(i) = self.edge.upload_queue.iter().position(|&x| x == f) {
                            self.edge.upload_queue.remove(i);
                        }
                        self.unretrained += 1;
                        self.maybe_retrain();
                    }
                }
            }
            Ev::Arrive(Payload::Result(f)) => self.complete(Node::Edge, EventKind::Delivered, f),
            Ev::Arrive(Payload::Weights(v)) => {
                if self.edge.apply_version(v) {
                    self.log(Node::Edge, EventKind::WeightsApplied, None);
                }
            }
            Ev::CloudInferDone(f) => {
                self.cloud_busy = false;
                self.log(Node::Cloud, EventKind::InferDone, Some(f));
                self.send(Dir::Down, Payload::Result(f), self.sc.result_bytes);
                self.pump_cloud();
            }
            Ev::RetrainDone(v) => {
                self.retraining = false;
                self.cloud_version = v;
                self.log(Node::Cloud, EventKind::RetrainDone, None);
                self.send(Dir::Down, Payload::Weights(v), self.sc.weight_bytes);
                self.maybe_retrain();
            }
        }
    }
}

/// Runs one scenario to completion.
///
/// The event loop is single-threaded and every random draw comes from one
/// stream seeded by `scenario.seed`, so equal scenarios give equal traces.
pub fn run_sim(scenario: &Scenario) -> Result<SimTrace, EdgeCloudError> {
    scenario.validate()?;
    let n = scenario.n_frames;
    let mut sim = Sim {
        sc: scenario,
        rng: ChaCha8Rng::seed_from_u64(scenario.seed),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        events: Vec::new(),
        capture_time: vec![0.0; n],
        delays: vec![None; n],
        edge: EdgeNodeState::default(),
        uplink: Link::default(),
        downlink: Link::default(),
        captured: 0,
        inferring: 0,
        cloud_busy: false,
        cloud_queue: VecDeque::new(),
        unretrained: 0,
        retraining: false,
        cloud_version: 0,
    };
    if n > 0 {
        sim.schedule(0.0, Ev::Capture(0));
        if scenario.path == PathKind::EdgeCloud {
            let t = sim.duty_time(EdgeMode::Idle, 0);
            sim.schedule(t, Ev::Duty(EdgeMode::Idle, 0));
        }
    }
    while let Some(Scheduled { t, ev, .. }) = sim.heap.pop() {
        sim.now = t;
        sim.handle(ev);
    }
    let delays = sim
        .delays
        .iter()
        .enumerate()
        .map(|(frame, d)| FrameDelay {
            frame,
            delay_s: d.expect("every captured frame completes"),
        })
        .collect();
    Ok(SimTrace {
        events: sim.events,
        delays,
        final_version: sim.edge.version,
    })
}

/// Mean per-frame delay for each picture count in `counts`.
pub fn delay_curve(base: &Scenario, counts: &[usize]) -> Result<Vec<(usize, f64)>, EdgeCloudError> {
    counts
        .iter()
        .map(|&n| {
            let sc = Scenario {
                n_frames: n,
                ..base.clone()
            };
            Ok((n, run_sim(&sc)?.mean_delay().unwrap_or(0.0)))
        })
        .collect()
}

/// First picture count at which the cloud curve's mean delay exceeds
/// `edge_delay_s`.
pub fn crossover(cloud_curve: &[(usize, f64)], edge_delay_s: f64) -> Option<usize> {
    cloud_curve.iter().find(|&&(_, d)| d > edge_delay_s).map(|&(n, _)| n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize) -> Scenario {
        Scenario {
            n_frames: n,
            ..Default::default()
        }
    }

    #[test]
    fn single_frame_closed_form() {
        let sc = Scenario {
            frame_bytes: 1_000_000,
            ..cloud(1)
        };
        let t = run_sim(&sc).unwrap();
        let want = 8e6 / 61.4e6 + 0.007 + sc.cloud_infer_s + 1024.0 * 8.0 / 20.35e6 + 0.007;
        assert!((t.delays[0].delay_s - want).abs() < 1e-9);
    }

    #[test]
    fn zero_frames_is_empty() {
        for path in [PathKind::Cloud, PathKind::EdgeCloud] {
            let t = run_sim(&Scenario { path, ..cloud(0) }).unwrap();
            assert!(t.delays.is_empty() && t.events.is_empty());
            assert!(t.summary().is_none());
        }
    }

    #[test]
    fn edge_path_delay_is_inference_latency() {
        let sc = Scenario {
            path: PathKind::EdgeCloud,
            edge: EdgeParams::with_profile(LatencyProfile::Nano),
            ..cloud(300)
        };
        let t = run_sim(&sc).unwrap();
        for d in &t.delays {
            assert!((d.delay_s - LatencyProfile::Nano.infer_s()).abs() < 1e-9);
        }
        assert!(t.final_version >= 1);
        assert!(t.events.windows(2).all(|w| w[0].time_s <= w[1].time_s));
    }

    #[test]
    fn uploads_only_while_idle() {
        let sc = Scenario {
            path: PathKind::EdgeCloud,
            ..cloud(200)
        };
        let t = run_sim(&sc).unwrap();
        for e in t.events.iter().filter(|e| e.kind == EventKind::UploadStart) {
            assert_eq!(sc.edge.mode_at(e.time_s), EdgeMode::Idle, "upload at {}", e.time_s);
        }
    }

    #[test]
    fn lossy_links_still_deliver_each_frame_once() {
        let sc = Scenario {
            net: NetworkModel {
                loss_rate: 0.3,
                jitter_s: 0.002,
                ..Default::default()
            },
            seed: 11,
            ..cloud(200)
        };
        let t = run_sim(&sc).unwrap();
        assert_eq!(t.delays.len(), 200);
        let delivered = t.events.iter().filter(|e| e.kind == EventKind::Delivered).count();
        assert_eq!(delivered, 200);
        assert!(t.events.iter().any(|e| e.kind == EventKind::UploadLost));
        assert_eq!(t, run_sim(&sc).unwrap());
    }

    #[test]
    fn profile_parsing() {
        let net = NetworkModel::from_json(r#"{"rtt_s": 0.02}"#).unwrap();
        assert_eq!(net.rtt_s, 0.02);
        assert_eq!(net.uplink_bps, 61.4e6);
        assert!(NetworkModel::from_json(r#"{"loss_rate": 1.5}"#).is_err());
        assert!(NetworkModel::from_json(r#"{"bogus": 1}"#).is_err());
        assert_eq!("nano".parse::<LatencyProfile>().unwrap(), LatencyProfile::Nano);
        assert_eq!("0.05".parse::<LatencyProfile>().unwrap(), LatencyProfile::Custom(0.05));
    }
}

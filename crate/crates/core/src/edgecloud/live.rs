//! Edge and cloud nodes talking over a real TCP connection.
//!
//! Each node runs one state-machine loop that owns all mutable state. A
//! reader thread per connection decodes frames and forwards them over a
//! channel; the state machine writes replies directly.

use std::collections::{HashSet, VecDeque};
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::protocol::{read_message, write_message, Message, MessageType, ProtocolError};
use super::sim::EdgeMode;
use super::EdgeCloudError;
use crate::netdef::{load_weights, weights_to_bytes, NetGraph};
use crate::postprocess::{BBox, Detection, GroundTruth, SoftNmsConfig};
use crate::tensor::{Shape, Tensor};
use crate::training::{
    assign_targets, backward_and_step, detect_batch, head_grids, OptimizerConfig, SynthConfig, SynthGenerator,
};

/// Largest payload either node accepts.
const RECEIVE_LIMIT: usize = 1 << 30;
const TICK: Duration = Duration::from_millis(2);

/// One captured frame as it travels to the cloud: 8-bit planar RGB plus the
/// labels used for fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePayload {
    pub frame_id: u64,
    pub width: u32,
    pub height: u32,
    pub labels: Vec<GroundTruth>,
    /// `3 × height × width` bytes, channel-major.
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    kind: MessageType,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EdgeCloudError> {
        if self.bytes.len() < n {
            return Err(EdgeCloudError::Payload {
                kind: self.kind,
                reason: format!("needs {n} more bytes, {} left", self.bytes.len()),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, EdgeCloudError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EdgeCloudError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, EdgeCloudError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bbox(&mut self) -> Result<BBox, EdgeCloudError> {
        Ok(BBox::new(self.f64()?, self.f64()?, self.f64()?, self.f64()?))
    }

    fn finish(self) -> Result<(), EdgeCloudError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(EdgeCloudError::Payload {
                kind: self.kind,
                reason: format!("{} trailing bytes", self.bytes.len()),
            })
        }
    }
}

fn put_bbox(out: &mut Vec<u8>, b: &BBox) {
    for v in [b.cx, b.cy, b.w, b.h] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl FramePayload {
    /// Quantizes a `1×3×H×W` image in `[0, 1]`.
    pub fn from_image(frame_id: u64, image: &Tensor<f32>, labels: Vec<GroundTruth>) -> Self {
        let s = image.shape();
        assert!(s.n == 1 && s.c == 3, "expects one RGB image");
        FramePayload {
            frame_id,
            width: s.w as u32,
            height: s.h as u32,
            labels,
            pixels: image.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
        }
    }

    pub fn image(&self) -> Tensor<f32> {
        Tensor::from_vec(
            Shape::new(1, 3, self.height as usize, self.width as usize),
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
        .expect("pixel count checked at decode")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 40 * self.labels.len() + self.pixels.len());
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&(l.class_id as u32).to_le_bytes());
            put_bbox(&mut out, &l.bbox);
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EdgeCloudError> {
        let mut c = Cursor {
            bytes,
            kind: MessageType::FrameUpload,
        };
        let frame_id = c.u64()?;
        let width = c.u32()?;
        let height = c.u32()?;
        let count = c.u32()? as usize;
        let mut labels = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let class_id = c.u32()? as usize;
            labels.push(GroundTruth {
                bbox: c.bbox()?,
                class_id,
            });
        }
        let n = 3 * width as usize * height as usize;
        let pixels = c.take(n)?.to_vec();
        c.finish()?;
        Ok(FramePayload {
            frame_id,
            width,
            height,
            labels,
            pixels,
        })
    }
}

fn encode_detections(frame_id: u64, dets: &[Detection]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 44 * dets.len());
    out.extend_from_slice(&frame_id.to_le_bytes());
    out.extend_from_slice(&(dets.len() as u32).to_le_bytes());
    for d in dets {
        out.extend_from_slice(&(d.class_id as u32).to_le_bytes());
        out.extend_from_slice(&d.score.to_le_bytes());
        put_bbox(&mut out, &d.bbox);
    }
    out
}

fn decode_detections(bytes: &[u8]) -> Result<(u64, Vec<Detection>), EdgeCloudError> {
    let mut c = Cursor {
        bytes,
        kind: MessageType::DetectResult,
    };
    let frame_id = c.u64()?;
    let count = c.u32()? as usize;
    let mut dets = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let class_id = c.u32()? as usize;
        let score = c.f64()?;
        dets.push(Detection {
            bbox: c.bbox()?,
            class_id,
            score,
        });
    }
    c.finish()?;
    Ok((frame_id, dets))
}

fn ack_payload(frame_id: u64) -> Vec<u8> {
    frame_id.to_le_bytes().to_vec()
}

/// What the edge did with a pushed weights file.
#[derive(Debug, Clone, PartialEq)]
pub enum PushOutcome {
    Applied { version: u32 },
    /// The offered version is not newer than the running one.
    Stale { current: u32, offered: u32 },
    /// The file did not load; the previous weights stay in place.
    Rejected(String),
}

/// Model-holding half of the edge: versioned weights that change only as a
/// whole.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    graph: NetGraph,
    version: u32,
}

impl EdgeNode {
    pub fn new(graph: NetGraph) -> Self {
        EdgeNode { graph, version: 0 }
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn graph(&self) -> &NetGraph {
        &self.graph
    }

    /// Applies a `WEIGHT_PUSH` whose checksum has already been verified.
    pub fn apply_push(&mut self, msg: &Message) -> PushOutcome {
        if msg.kind != MessageType::WeightPush {
            return PushOutcome::Rejected(format!("{} is not a weight push", msg.kind));
        }
        if msg.version <= self.version {
            return PushOutcome::Stale {
                current: self.version,
                offered: msg.version,
            };
        }
        match load_weights(&self.graph, &msg.payload[..]) {
            Ok(g) => {
                self.graph = g;
                self.version = msg.version;
                PushOutcome::Applied { version: msg.version }
            }
            Err(e) => PushOutcome::Rejected(e.to_string()),
        }
    }

    /// Decodes raw wire bytes and applies them. Framing and checksum errors
    /// leave the node untouched.
    pub fn receive_bytes(&mut self, bytes: &[u8]) -> Result<PushOutcome, EdgeCloudError> {
        let msg = super::protocol::decode_message(bytes)?;
        Ok(self.apply_push(&msg))
    }
}

type Inbox = Receiver<Result<Message, ProtocolError>>;

struct Connection {
    writer: TcpStream,
    inbox: Inbox,
    reader: JoinHandle<()>,
}

impl Connection {
    fn open(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let mut read_half = stream.try_clone()?;
        let (tx, inbox) = mpsc::channel();
        let reader = thread::spawn(move || loop {
            match read_message(&mut read_half, RECEIVE_LIMIT) {
                Ok(msg) => {
                    if tx.send(Ok(msg)).is_err() {
                        return;
                    }
                }
                // A bad checksum still consumed exactly one frame, so the
                // stream stays aligned.
                Err(e @ ProtocolError::Checksum { .. }) => {
                    if tx.send(Err(e)).is_err() {
                        return;
                    }
                }
                Err(ProtocolError::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => return,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            }
        });
        Ok(Connection {
            writer: stream,
            inbox,
            reader,
        })
    }

    fn send(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        write_message(&mut self.writer, msg)
    }

    fn close(self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
        let _ = self.reader.join();
    }
}

#[derive(Debug, Clone)]
pub struct EdgeConfig {
    pub cloud_addr: SocketAddr,
    /// Synthetic frames to capture.
    pub frames: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    /// Capture rate while active; 0 captures as fast as inference allows.
    pub capture_fps: f64,
    pub duty_period: Duration,
    pub active_fraction: f64,
    pub nms: SoftNmsConfig,
    /// After uploading everything, wait for the model to reach this version.
    pub await_version: u32,
    /// Upper bound on that wait.
    pub version_timeout: Duration,
    pub connect_attempts: usize,
    pub retry_delay: Duration,
}

impl EdgeConfig {
    pub fn new(cloud_addr: SocketAddr) -> Self {
        EdgeConfig {
            cloud_addr,
            frames: 10,
            seed: 1,
            synth: SynthConfig::default(),
            capture_fps: 30.0,
            duty_period: Duration::from_millis(1000),
            active_fraction: 0.8,
            nms: SoftNmsConfig::default(),
            await_version: 1,
            version_timeout: Duration::from_secs(60),
            connect_attempts: 50,
            retry_delay: Duration::from_millis(100),
        }
    }

    fn mode_at(&self, elapsed: Duration) -> EdgeMode {
        let period = self.duty_period.as_secs_f64();
        let phase = elapsed.as_secs_f64() % period;
        if phase < self.active_fraction * period {
            EdgeMode::Active
        } else {
            EdgeMode::Idle
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeReport {
    pub captured: usize,
    /// Frames acknowledged by the cloud.
    pub uploaded: usize,
    pub detections: usize,
    pub version: u32,
    pub applied_pushes: usize,
    pub rejected_pushes: usize,
    pub reconnects: usize,
}

fn connect(cfg: &EdgeConfig) -> Result<Connection, EdgeCloudError> {
    let mut last = None;
    for attempt in 0..cfg.connect_attempts.max(1) {
        if attempt > 0 {
            thread::sleep(cfg.retry_delay);
        }
        match TcpStream::connect(cfg.cloud_addr) {
            Ok(s) => return Ok(Connection::open(s)?),
            Err(e) => {
                debug!("connect to {} failed: {e}", cfg.cloud_addr);
                last = Some(e);
            }
        }
    }
    if let Some(e) = last {
        warn!("giving up on {}: {e}", cfg.cloud_addr);
    }
    Err(EdgeCloudError::Unreachable(cfg.connect_attempts.max(1)))
}

/// Runs the edge: captures and infers synthetic frames while active, uploads
/// stored frames while idle, and swaps in pushed weights.
///
/// A frame leaves the upload queue only once the cloud acknowledges it, so a
/// dropped connection resumes with the same queue after reconnecting.
pub fn run_edge(graph: NetGraph, cfg: &EdgeConfig) -> Result<EdgeReport, EdgeCloudError> {
    if !(cfg.active_fraction > 0.0 && cfg.active_fraction < 1.0) || cfg.duty_period.is_zero() {
        return Err(EdgeCloudError::Config("duty cycle needs a positive period and a fraction in (0, 1)".into()));
    }
    let mut node = EdgeNode::new(graph);
    let mut gen = SynthGenerator::new(cfg.synth.clone(), cfg.seed);
    let mut queue: VecDeque<FramePayload> = VecDeque::new();
    let mut in_flight: Option<u64> = None;
    let mut report = EdgeReport::default();
    let interval = if cfg.capture_fps > 0.0 {
        Duration::from_secs_f64(1.0 / cfg.capture_fps)
    } else {
        Duration::ZERO
    };

    let start = Instant::now();
    let mut next_capture = Duration::ZERO;
    let mut drained_at: Option<Instant> = None;
    let mut conn = Some(connect(cfg)?);

    loop {
        let Some(c) = conn.as_mut() else {
            report.reconnects += 1;
            in_flight = None;
            info!("reconnecting with {} frames queued", queue.len());
            conn = Some(connect(cfg)?);
            continue;
        };

        let mut broken = false;
        loop {
            match c.inbox.try_recv() {
                Ok(Ok(msg)) => match msg.kind {
                    MessageType::Ack => {
                        let id = msg.payload.get(..8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")));
                        if id.is_some() && id == in_flight {
                            queue.pop_front();
                            in_flight = None;
                            report.uploaded += 1;
                        }
                    }
                    MessageType::WeightPush => match node.apply_push(&msg) {
                        PushOutcome::Applied { version } => {
                            info!("edge now runs weights version {version}");
                            report.applied_pushes += 1;
                        }
                        other => {
                            warn!("weight push ignored: {other:?}");
                            report.rejected_pushes += 1;
                        }
                    },
                    MessageType::DetectResult => match decode_detections(&msg.payload) {
                        Ok((id, dets)) => debug!("cloud found {} objects in frame {id}", dets.len()),
                        Err(e) => warn!("{e}"),
                    },
                    other => warn!("edge ignores unexpected {other}"),
                },
                Ok(Err(e)) => {
                    warn!("edge receive error: {e}");
                    if !matches!(e, ProtocolError::Checksum { .. }) {
                        broken = true;
                        break;
                    }
                    report.rejected_pushes += 1;
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    broken = true;
                    break;
                }
            }
        }
        if broken {
            warn!("connection to cloud lost");
            if let Some(c) = conn.take() {
                c.close();
            }
            continue;
        }

        let elapsed = start.elapsed();
        let mode = cfg.mode_at(elapsed);
        let mut acted = false;
        if mode == EdgeMode::Active && report.captured < cfg.frames && elapsed >= next_capture {
            let sample = gen.sample::<f32>();
            let dets = detect_batch(node.graph(), &sample.image, &cfg.nms)?;
            report.detections += dets[0].len();
            queue.push_back(FramePayload::from_image(
                report.captured as u64,
                &sample.image,
                sample.ground_truth(),
            ));
            report.captured += 1;
            next_capture = elapsed + interval;
            acted = true;
        } else if mode == EdgeMode::Idle && in_flight.is_none() {
            if let Some(front) = queue.front() {
                let msg = Message::new(MessageType::FrameUpload, node.version(), front.encode());
                match c.send(&msg) {
                    Ok(()) => in_flight = Some(front.frame_id),
                    Err(e) => {
                        warn!("upload failed: {e}");
                        if let Some(c) = conn.take() {
                            c.close();
                        }
                        continue;
                    }
                }
                acted = true;
            }
        }

        if report.captured == cfg.frames && queue.is_empty() {
            let since = *drained_at.get_or_insert_with(Instant::now);
            if node.version() >= cfg.await_version || since.elapsed() >= cfg.version_timeout {
                break;
            }
        }
        if !acted {
            thread::sleep(TICK);
        }
    }

    if let Some(c) = conn.take() {
        c.close();
    }
    report.version = node.version();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct CloudConfig {
    /// Fine-tune after this many new frames.
    pub retrain_every: usize,
    pub retrain_steps: usize,
    pub optimizer: OptimizerConfig,
    pub nms: SoftNmsConfig,
    pub seed: u64,
    /// Stop once no edge has been connected for this long; `None` serves
    /// forever.
    pub idle_timeout: Option<Duration>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            retrain_every: 4,
            retrain_steps: 10,
            optimizer: OptimizerConfig {
                eta: 0.05,
                batch_size: 4,
                ..Default::default()
            },
            nms: SoftNmsConfig::default(),
            seed: 0,
            idle_timeout: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudReport {
    pub sessions: usize,
    pub frames_received: usize,
    /// Frames received again after a reconnect.
    pub duplicates: usize,
    pub detect_requests: usize,
    pub retrains: usize,
    pub version: u32,
}

struct CloudState {
    graph: NetGraph,
    version: u32,
    samples: Vec<FramePayload>,
    seen: HashSet<u64>,
    fresh: usize,
    rng: ChaCha8Rng,
    report: CloudReport,
}

impl CloudState {
    fn fine_tune(&mut self, cfg: &CloudConfig) -> Result<(), EdgeCloudError> {
        let (w, h, _) = self.graph.input_dims();
        let grids = head_grids(&self.graph);
        let batch_size = cfg.optimizer.batch_size.min(self.samples.len()).max(1);
        for _ in 0..cfg.retrain_steps {
            let picks: Vec<&FramePayload> = (0..batch_size)
                .map(|_| &self.samples[self.rng.random_range(0..self.samples.len())])
                .collect();
            let images: Vec<Tensor<f32>> = picks.iter().map(|p| p.image()).collect();
            let batch = Tensor::stack(&images).map_err(|e| EdgeCloudError::Config(e.to_string()))?;
            let anchors = self.graph.anchors().ok_or_else(|| EdgeCloudError::Config("model has no anchors".into()))?;
            let targets = picks
                .iter()
                .map(|p| assign_targets(&p.labels, anchors, &grids, w as f64, h as f64, self.graph.num_classes()))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = backward_and_step(&mut self.graph, &batch, &targets, &cfg.optimizer)?;
            debug!("fine-tune loss {:.4}", loss.loss_total);
        }
        self.version += 1;
        self.report.retrains += 1;
        Ok(())
    }

    fn handle(&mut self, msg: Message, conn: &mut Connection, cfg: &CloudConfig) -> Result<(), EdgeCloudError> {
        match msg.kind {
            MessageType::FrameUpload => {
                let frame = FramePayload::decode(&msg.payload)?;
                let (w, h, _) = self.graph.input_dims();
                if (frame.width as usize, frame.height as usize) != (w, h) {
                    return Err(EdgeCloudError::Payload {
                        kind: msg.kind,
                        reason: format!("frame is {}x{}, model expects {w}x{h}", frame.width, frame.height),
                    });
                }
                let id = frame.frame_id;
                if self.seen.insert(id) {
                    self.samples.push(frame);
                    self.fresh += 1;
                    self.report.frames_received += 1;
                } else {
                    self.report.duplicates += 1;
                }
                conn.send(&Message::ack(self.version, ack_payload(id)))?;
                if self.fresh >= cfg.retrain_every {
                    self.fresh = 0;
                    self.fine_tune(cfg)?;
                    info!("retrained on {} frames, pushing version {}", self.samples.len(), self.version);
                    let blob = weights_to_bytes(&self.graph)?;
                    conn.send(&Message::new(MessageType::WeightPush, self.version, blob))?;
                }
            }
            MessageType::DetectRequest => {
                let frame = FramePayload::decode(&msg.payload)?;
                let dets = detect_batch(&self.graph, &frame.image(), &cfg.nms)?;
                self.report.detect_requests += 1;
                let reply = encode_detections(frame.frame_id, &dets[0]);
                conn.send(&Message::new(MessageType::DetectResult, self.version, reply))?;
            }
            other => return Err(EdgeCloudError::Unexpected(other)),
        }
        Ok(())
    }
}

fn accept(listener: &TcpListener, timeout: Option<Duration>) -> io::Result<Option<TcpStream>> {
    let Some(timeout) = timeout else {
        listener.set_nonblocking(false)?;
        return listener.accept().map(|(s, _)| Some(s));
    };
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(Some(s));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Ok(None);
                }
                thread::sleep(TICK);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Serves edges one connection at a time: acknowledges uploads, fine-tunes
/// on the received frames with their labels, pushes new weights and answers
/// detection requests.
pub fn serve_cloud(listener: TcpListener, graph: NetGraph, cfg: &CloudConfig) -> Result<CloudReport, EdgeCloudError> {
    if cfg.retrain_every == 0 {
        return Err(EdgeCloudError::Config("retrain_every must be at least 1".into()));
    }
    cfg.optimizer.validate()?;
    let mut state = CloudState {
        graph,
        version: 0,
        samples: Vec::new(),
        seen: HashSet::new(),
        fresh: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        report: CloudReport::default(),
    };
    while let Some(stream) = accept(&listener, cfg.idle_timeout)? {
        state.report.sessions += 1;
        info!("edge connected from {:?}", stream.peer_addr().ok());
        let mut conn = Connection::open(stream)?;
        loop {
            match conn.inbox.recv_timeout(Duration::from_millis(200)) {
                Ok(Ok(msg)) => {
                    if let Err(e) = state.handle(msg, &mut conn, cfg) {
                        match e {
                            EdgeCloudError::Protocol(_) | EdgeCloudError::Io(_) => {
                                warn!("session ended: {e}");
                                break;
                            }
                            EdgeCloudError::Payload { .. } | EdgeCloudError::Unexpected(_) => warn!("{e}"),
                            fatal => return Err(fatal),
                        }
                    }
                }
                Ok(Err(e)) => warn!("cloud receive error: {e}"),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        conn.close();
        info!("edge disconnected");
    }
    state.report.version = state.version;
    Ok(state.report)
}

/// Binds `addr` and runs [`serve_cloud`].
pub fn run_cloud(addr: SocketAddr, graph: NetGraph, cfg: &CloudConfig) -> Result<CloudReport, EdgeCloudError> {
    serve_cloud(TcpListener::bind(addr)?, graph, cfg)
}

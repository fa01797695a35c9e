use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edge_yolo::netdef::{parse_config, save_weights, EDGE_YOLO_416};
use edge_yolo::AnchorSet;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edge-yolo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn edge-yolo")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "edge-yolo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json_line(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().expect("no output")).expect("json summary")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_subcommands_and_defaults() {
    let top = ok(&["--help"]);
    for cmd in ["detect", "bench", "analyze", "anchors", "train-toy", "sim", "edge", "cloud"] {
        assert!(top.contains(cmd), "missing {cmd} in\n{top}");
    }
    let detect = ok(&["detect", "--help"]);
    for default in ["[default: 0.5]", "[default: 0.45]", "[default: 0.001]", "[default: detections.jsonl]"] {
        assert!(detect.contains(default), "missing {default} in\n{detect}");
    }
    assert!(ok(&["anchors", "--help"]).contains("[default: 18]"));
}

#[test]
fn analyze_matches_builtin_reference() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("report.csv");
    let text = ok(&["analyze", "--golden", "builtin", "--csv", p(&csv)]);
    assert!(text.contains("no unexpected differences"), "{text}");
    assert!(text.contains("layer 25") && text.contains("layer 32"));
    let rows = fs::read_to_string(&csv).unwrap().lines().count();
    assert!(rows > 35, "report has {rows} lines");
}

#[test]
fn analyze_fails_on_unexpected_difference() {
    let dir = TempDir::new().unwrap();
    let golden = dir.path().join("golden.csv");
    fs::write(&golden, "index,kind,size,stride,filters,out_c,out_h,out_w,bflops\n0,conv,3,2,32,64,208,208,0.075\n").unwrap();
    let out = run(&["analyze", "--golden", p(&golden)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("MISMATCH"));
}

#[test]
fn anchors_recover_cluster_centres() {
    let dir = TempDir::new().unwrap();
    let labels = dir.path().join("labels.csv");
    let anchors = dir.path().join("anchors.txt");
    let mut text = String::from("image,class,cx,cy,w,h\n");
    for (i, (w, h)) in [(12.0, 30.0), (60.0, 45.0), (150.0, 220.0)].iter().enumerate() {
        for d in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            text += &format!("img{i},0,100,100,{},{}\n", w + d, h - d);
        }
    }
    fs::write(&labels, text).unwrap();
    ok(&["anchors", "--labels", p(&labels), "--k", "3", "--out", p(&anchors)]);
    let fitted = AnchorSet::load(&anchors).unwrap();
    let mut got = fitted.as_slice().to_vec();
    got.sort_by(|a, b| a.0.total_cmp(&b.0));
    for ((w, h), (ew, eh)) in got.iter().zip([(12.0, 30.0), (60.0, 45.0), (150.0, 220.0)]) {
        assert!((w - ew).abs() < 1e-6 && (h - eh).abs() < 1e-6, "{got:?}");
    }
}

#[test]
fn sim_trace_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let net = dir.path().join("net.json");
    fs::write(&net, r#"{"loss_rate": 0.05, "jitter_s": 0.002}"#).unwrap();
    let mut traces = Vec::new();
    for run_idx in 0..2 {
        let trace = dir.path().join(format!("trace{run_idx}.csv"));
        let summary = json_line(&ok(&[
            "sim", "--path", "ecc", "--frames", "50", "--seed", "3", "--net-profile", p(&net), "--trace", p(&trace),
        ]));
        assert_eq!(summary["frames"], 50);
        traces.push(fs::read(&trace).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    let text = String::from_utf8(traces.remove(0)).unwrap();
    assert_eq!(text.lines().next(), Some("time_s,node,event,frame_id,delay_s"));
}

#[test]
fn sim_curve_has_one_row_per_count() {
    let dir = TempDir::new().unwrap();
    let curve = dir.path().join("curve.csv");
    ok(&["sim", "--curve", p(&curve), "--counts", "1,10,100"]);
    let text = fs::read_to_string(&curve).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pictures,cloud_s,ecc_xavier_s,ecc_nano_s");
    assert_eq!(lines.len(), 4);
}

/// Writes the preset with all-zero weights; every head logit is then zero.
fn zero_weights(dir: &Path) -> std::path::PathBuf {
    let mut g = parse_config(EDGE_YOLO_416).unwrap();
    g.set_anchors(AnchorSet::default_416()).unwrap();
    g.init_zero();
    let path = dir.join("zero.eywt");
    save_weights(&g, fs::File::create(&path).unwrap()).unwrap();
    path
}

fn blank_ppm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.resize(bytes.len() + w * h * 3, 128);
    fs::write(path, bytes).unwrap();
}

#[test]
fn detect_with_zero_weights_and_high_floor_finds_nothing() {
    let dir = TempDir::new().unwrap();
    let weights = zero_weights(dir.path());
    let img = dir.path().join("blank.ppm");
    blank_ppm(&img, 320, 240);
    fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
    let out = dir.path().join("dets.jsonl");
    let annotated = dir.path().join("annotated");
    ok(&[
        "detect", p(dir.path()), "--weights", p(&weights), "--score-floor", "0.5", "--out", p(&out), "--annotate",
        p(&annotated),
    ]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
    assert!(annotated.join("blank.ppm").is_file());
}

#[test]
fn detect_rejects_missing_weights_and_bad_inputs() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("blank.ppm");
    blank_ppm(&img, 16, 16);
    let missing = dir.path().join("missing.eywt");
    let out = run(&["detect", p(&img), "--weights", p(&missing), "--out", p(&dir.path().join("d.jsonl"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.eywt"));

    let weights = zero_weights(dir.path());
    let junk = dir.path().join("junk.ppm");
    fs::write(&junk, "junk").unwrap();
    let out = run(&["detect", p(&junk), "--weights", p(&weights), "--out", p(&dir.path().join("d.jsonl"))]);
    assert!(!out.status.success());

    let out = run(&["detect", p(&img), "--weights", p(&weights), "--sigma", "0"]);
    assert!(!out.status.success());
}

fn small_config(dir: &Path, side: usize) -> std::path::PathBuf {
    let path = dir.join(format!("net{side}.net"));
    fs::write(&path, EDGE_YOLO_416.replacen("net 416 416 3", &format!("net {side} {side} 3"), 1)).unwrap();
    path
}

#[test]
fn bench_single_run_omits_spread() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 64);
    let r = json_line(&ok(&["bench", "--config", p(&cfg), "--runs", "1"]));
    assert_eq!(r["runs"], 1);
    assert!(r["mean_ms"].as_f64().unwrap() > 0.0);
    for absent in ["std_ms", "p95_ms", "min_ms", "max_ms"] {
        assert!(r.get(absent).is_none(), "{absent} present in {r}");
    }
    assert!(!run(&["bench", "--runs", "0"]).status.success());
    assert!(!run(&["bench", "--warmup", "0"]).status.success());
}

#[test]
fn bench_smaller_input_is_faster() {
    let dir = TempDir::new().unwrap();
    let small = small_config(dir.path(), 64);
    let s = json_line(&ok(&["bench", "--config", p(&small), "--runs", "3"]));
    let l = json_line(&ok(&["bench", "--runs", "3"]));
    let (s, l) = (s["median_ms"].as_f64().unwrap(), l["median_ms"].as_f64().unwrap());
    assert!(s < l, "64x64 {s} ms vs 416x416 {l} ms");
    assert!(l > 0.0);
}

#[test]
fn train_toy_writes_loadable_artifacts() {
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("toy.eywt");
    let summary = json_line(&ok(&["train-toy", "--steps", "5", "--out", p(&weights)]));
    assert_eq!(summary["steps"], 5);
    let img = dir.path().join("img.ppm");
    blank_ppm(&img, 64, 64);
    ok(&[
        "detect",
        p(&img),
        "--weights",
        p(&weights),
        "--config",
        p(&weights.with_extension("net")),
        "--anchors",
        p(&weights.with_extension("anchors")),
        "--out",
        p(&dir.path().join("d.jsonl")),
    ]);
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[world]
region_grid = [2, 2]

[world.shape]
hr_size = 32
ms_size = 8
t_ms = 4
t_sar = 2

[data]
num_samples = 12

[model]
width = 16
num_heads = 2
encoder_depth = 1
fusion_depth = 1
head_hidden = 16
head_bottleneck = 8
head_out = 32
align_dim = 8

[train]
batch_size = 2
steps = 4
warmup_steps = 1
checkpoint_every = 2

[loss]
n_clusters = 3

[augment]
local_size = 16
ms_view_len = 3
sar_view_len = 1

[geo]
n_prototypes = 3

[probe]
steps = 20
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skysense-mini"))
        .args(args)
        .env("SKYSENSE_MINI_THREADS", "1")
        .output()
        .expect("spawn")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        ok(&["generate-data", "--config", s(&config), "--out", s(&data)]);
        Fixture {
            _dir: dir,
            root,
            config,
            data,
        }
    }

    fn pretrain(&self, name: &str) -> PathBuf {
        let out = self.root.join(name);
        ok(&["pretrain", "--config", s(&self.config), "--data", s(&self.data), "--out", s(&out)]);
        out
    }
}

/// Every file under `dir` except the run manifest, which carries timestamps.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[world]\nnum_classes = \"many\"\n").unwrap();
    let out = dir.path().join("out");
    let r = bin(&["generate-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1, "stray staging output left behind");

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "[world]\nnot_a_key = 1\n").unwrap();
    let r = bin(&["generate-data", "--config", s(&unknown), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn seed_flag_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let gen = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["generate-data", "--config", s(&cfg), "--out", s(&out), "--seed", seed]);
        tree(&out)
    };
    let (a, b, c) = (gen("a", "7"), gen("b", "7"), gen("c", "8"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["finished_at"].is_number());
}

#[test]
fn pretrain_metrics_resume_and_probe() {
    let fx = Fixture::new();
    let run = fx.pretrain("run");
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let final_ck = run.join("checkpoints/step-000004");
    assert!(final_ck.exists());

    // Resuming from the final checkpoint has nothing to do and leaves the log intact.
    let before = tree(&run);
    ok(&[
        "pretrain",
        "--config",
        s(&fx.config),
        "--data",
        s(&fx.data),
        "--out",
        s(&run),
        "--resume",
        s(&final_ck),
    ]);
    assert_eq!(tree(&run), before);

    // Resuming from the middle rewrites the tail identically.
    let resumed = fx.root.join("resumed");
    ok(&[
        "pretrain",
        "--config",
        s(&fx.config),
        "--data",
        s(&fx.data),
        "--out",
        s(&resumed),
        "--resume",
        s(&run.join("checkpoints/step-000002")),
    ]);
    let strip = |text: String| -> Vec<serde_json::Value> {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("elapsed_ms");
                v
            })
            .collect()
    };
    let tail = strip(fs::read_to_string(resumed.join("metrics.jsonl")).unwrap());
    assert_eq!(tail.len(), 2);
    assert_eq!(tail, strip(metrics)[2..].to_vec());

    // Probe: OA recomputes from predictions.csv.
    let probe = fx.root.join("probe");
    ok(&[
        "probe",
        "--config",
        s(&fx.config),
        "--checkpoint",
        s(&final_ck),
        "--data",
        s(&fx.data),
        "--assembly",
        "hr+ms+sar,fusion,frozen,pixel",
        "--out",
        s(&probe),
    ]);
    let preds = fs::read_to_string(probe.join("predictions.csv")).unwrap();
    let mut header = preds.lines().next().unwrap().split(',');
    let truth_col = header.clone().position(|h| h == "truth").unwrap();
    let pred_col = header.position(|h| h == "pred").unwrap();
    let (mut hit, mut n) = (0usize, 0usize);
    for line in preds.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        hit += (f[truth_col] == f[pred_col]) as usize;
        n += 1;
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(probe.join("metrics.json")).unwrap()).unwrap();
    let oa = metrics["overall_accuracy"].as_f64().unwrap();
    assert!(n > 0);
    assert!((oa - hit as f64 / n as f64).abs() < 1e-12, "{oa} vs {hit}/{n}");

    // A checkpoint without the fusion module cannot serve a fused assembly.
    let stripped = fx.root.join("stripped");
    fs::create_dir_all(&stripped).unwrap();
    let ck = skysense_core::checkpoint::Checkpoint::read(&final_ck).unwrap();
    let mut partial = skysense_core::checkpoint::Checkpoint::new(ck.step, ck.config_hash.clone(), ck.config.clone());
    partial.meta = ck.meta.clone();
    for name in ck.names() {
        if !name.starts_with("fusion/") {
            let (shape, values) = ck.get(name).unwrap();
            partial.insert(name.clone(), shape.to_vec(), values.to_vec()).unwrap();
        }
    }
    partial.write(&stripped.join("ck")).unwrap();
    let out = fx.root.join("probe-missing");
    let r = bin(&[
        "probe",
        "--config",
        s(&fx.config),
        "--checkpoint",
        s(&stripped.join("ck")),
        "--data",
        s(&fx.data),
        "--assembly",
        "hr+ms,fusion,frozen",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());

    // Prototype maps: one pixel per feature-grid site, legend covers exactly the colours drawn.
    let viz = fx.root.join("viz");
    ok(&["viz-prototypes", "--checkpoint", s(&final_ck), "--data", s(&fx.data), "--out", s(&viz)]);
    let legend: serde_json::Value = serde_json::from_slice(&fs::read(viz.join("legend.json")).unwrap()).unwrap();
    let legend = legend.as_object().unwrap();
    assert_eq!(legend.len(), 12);
    for (id, entry) in legend {
        let img = image::open(viz.join(format!("{id}.png"))).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (4, 4));
        let drawn: BTreeSet<String> = img
            .pixels()
            .map(|p| format!("#{:02x}{:02x}{:02x}", p[0], p[1], p[2]))
            .collect();
        let listed: BTreeSet<String> =
            entry.as_object().unwrap().values().map(|v| v.as_str().unwrap().to_string()).collect();
        assert_eq!(drawn, listed);
    }
    assert!(viz.join("ari.json").exists());
}

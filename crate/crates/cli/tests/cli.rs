use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use dinoiser_core::synthetic::{
    scene, tiny_clip, tiny_dino, tiny_tokenizer_json, tiny_vocab_size, TinyVit, FIXTURE_WORDS, TINY_PROJ_DIM,
};
use dinoiser_core::training::Checkpoint;
use image::{GrayImage, Luma};
use tempfile::TempDir;

const IDS: [&str; 5] = ["s0", "s1", "s2", "s3", "s4"];
const CAT: u8 = 8;

/// Tiny CLIP + tokenizer + DINO weights, a five-image dataset with teacher
/// masks and VOC-style annotations, and a config pointing at all of it.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let vocab = tiny_vocab_size(FIXTURE_WORDS);
        let clip = tiny_clip(TinyVit::default(), TINY_PROJ_DIM, vocab, 16, 7).to_bytes().unwrap();
        std::fs::write(root.join("clip.safetensors"), clip).unwrap();
        std::fs::write(root.join("tokenizer.json"), tiny_tokenizer_json(FIXTURE_WORDS)).unwrap();
        let dino = tiny_dino(TinyVit::default(), 8).to_bytes().unwrap();
        std::fs::write(root.join("dino.safetensors"), dino).unwrap();

        let data = root.join("data");
        for sub in ["images", "masks", "annotations"] {
            std::fs::create_dir_all(data.join(sub)).unwrap();
        }
        for (i, id) in IDS.iter().enumerate() {
            let (img, mask) = scene(i as u64, 64, 64);
            img.save(data.join("images").join(format!("{id}.png"))).unwrap();
            mask.save(data.join("masks").join(format!("{id}.png"))).unwrap();
            let ann = GrayImage::from_fn(64, 64, |x, y| Luma([if mask.get_pixel(x, y)[0] > 0 { CAT } else { 0 }]));
            ann.save(data.join("annotations").join(format!("{id}.png"))).unwrap();
        }
        std::fs::write(data.join("train.txt"), IDS[..4].join("\n")).unwrap();
        std::fs::write(data.join("val.txt"), IDS.join("\n")).unwrap();

        let config = r#"
templates = "single"

[backbone]
weights = "clip.safetensors"
tokenizer = "tokenizer.json"
tap_layer = 2
short_side = 64

[teacher]
weights = "dino.safetensors"

[train]
data = "data"
masks = "data/masks"
epochs = 2
batch_size = 2
lr = 0.01
affinity_head_stop_epoch = 1
lr_decay_epoch = 2
d_g = 8

[train.augmentations]
crop_size = 48

[eval]
dataset = "voc"
root = "data"
"#;
        std::fs::write(root.join("config.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn out(&self, name: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::create_dir_all(&p).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_dinoiser"))
            .arg("--config")
            .arg(self.path("config.toml"))
            .args(args)
            .output()
            .unwrap();
        out
    }

    /// Train once and return the checkpoint path.
    fn checkpoint(&self) -> PathBuf {
        let out = self.out("train");
        let res = self.run(&["train", "--output-dir", out.to_str().unwrap()]);
        assert_ok(&res);
        out.join("heads.safetensors")
    }
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_dinoiser"))
        .args(["segment", "--frobnicate", "x.png"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_dinoiser")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_dinoiser")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let fx = Fixture::new();
    let out = fx.out("missing");
    let res = fx.run(&["segment", "--baseline-maskclip", "--prompts", "cat", "--output-dir", s(&out), "nope.png"]);
    assert_eq!(res.status.code(), Some(1));
    let res = fx.run(&["eval", "--data-root", "/nonexistent", "--baseline-maskclip"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn segment_writes_mask_legend_and_sidecar() {
    let fx = Fixture::new();
    let out = fx.out("seg");
    let img = fx.path("data/images/s0.png");
    let bad = fx.path("garbage.png");
    std::fs::write(&bad, b"not an image").unwrap();
    let res = fx.run(&[
        "segment",
        "--teacher",
        s(&fx.path("dino.safetensors")),
        "--prompts",
        "cat,background",
        "--output-dir",
        s(&out),
        s(&img),
        s(&bad),
    ]);
    // One good file is enough for success; the bad one is reported.
    assert_ok(&res);
    assert!(String::from_utf8_lossy(&res.stderr).contains("garbage.png"));
    for f in ["s0.png", "s0.legend.txt", "s0.json", "resolved_config.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let mask = image::open(out.join("s0.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (64, 64));
    let legend = std::fs::read_to_string(out.join("s0.legend.txt")).unwrap();
    assert!(legend.contains("cat") && legend.contains("background"));

    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("s0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["version"], 1);
    let prompts = sidecar["prompts"].as_array().unwrap();
    assert_eq!(prompts.len(), 2);
    let total: f64 = prompts.iter().map(|p| p["coverage_percent"].as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() < 1e-9);
    assert_eq!(sidecar["config"]["pooling"], "teacher");
    assert!(sidecar["backbone_id"].as_str().unwrap().starts_with("clip-"));

    // Every input unreadable: nonzero exit.
    let res = fx.run(&["segment", "--baseline-maskclip", "--prompts", "cat", "--output-dir", s(&out), s(&bad)]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn gamma_one_matches_baseline_and_train_export_round_trip() {
    let fx = Fixture::new();
    let t0 = Instant::now();
    let ck_path = fx.checkpoint();
    eprintln!("train: {:?}", t0.elapsed());
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.heads.input_tap(), 2);
    let metrics = std::fs::read_to_string(fx.path("train/metrics.ndjson")).unwrap();
    // Pre-training record plus one per epoch.
    assert_eq!(metrics.lines().count(), 3);

    let img = fx.path("data/images/s1.png");
    let a = fx.out("gamma1");
    let b = fx.out("baseline");
    let res = fx.run(&[
        "segment", "--checkpoint", s(&ck_path), "--gamma", "1.0", "--no-background", "--prompts", "cat,dog,sky",
        "--output-dir", s(&a), s(&img),
    ]);
    assert_ok(&res);
    let res = fx.run(&["segment", "--baseline-maskclip", "--prompts", "cat,dog,sky", "--output-dir", s(&b), s(&img)]);
    assert_ok(&res);
    assert_eq!(std::fs::read(a.join("s1.png")).unwrap(), std::fs::read(b.join("s1.png")).unwrap());
    assert_eq!(
        std::fs::read(a.join("s1.legend.txt")).unwrap(),
        std::fs::read(b.join("s1.legend.txt")).unwrap()
    );

    let exported = fx.path("heads_f32.safetensors");
    let res = fx.run(&["export", "--checkpoint", s(&ck_path), "--out", s(&exported)]);
    assert_ok(&res);
    let bytes = std::fs::read(&exported).unwrap();
    let st = safetensors::SafeTensors::deserialize(&bytes).unwrap();
    assert!(st.tensors().iter().all(|(_, t)| t.dtype() == safetensors::Dtype::F32));
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let fx = Fixture::new();
    let mut runs = Vec::new();
    for name in ["r1", "r2"] {
        let out = fx.out(name);
        let res = fx.run(&["--deterministic", "train", "--epochs", "1", "--output-dir", s(&out)]);
        assert_ok(&res);
        let ck = out.join("heads.safetensors");
        Checkpoint::load(&ck).unwrap();
        let res = fx.run(&[
            "--deterministic", "segment", "--checkpoint", s(&ck), "--prompts", "cat,background",
            "--output-dir", s(&out), s(&fx.path("data/images/s2.png")),
        ]);
        assert_ok(&res);
        runs.push(out);
    }
    for f in ["heads.safetensors", "metrics.ndjson", "s2.png", "s2.json", "s2.legend.txt"] {
        let x = std::fs::read(runs[0].join(f)).unwrap();
        let y = std::fs::read(runs[1].join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn eval_on_five_images_within_budget() {
    let fx = Fixture::new();
    let out = fx.out("eval");
    let t0 = Instant::now();
    let res = fx.run(&["eval", "--teacher", s(&fx.path("dino.safetensors")), "--output-dir", s(&out)]);
    let took = t0.elapsed();
    assert_ok(&res);
    assert!(took < Duration::from_secs(60), "eval took {took:?}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("eval_voc.json")).unwrap()).unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("command = \"eval\""));
    assert!(String::from_utf8_lossy(&res.stderr).contains("command = \"eval\""));
}

#[test]
fn serve_answers_health_over_tcp() {
    let fx = Fixture::new();
    let out = fx.out("serve");
    let mut child = Command::new(env!("CARGO_BIN_EXE_dinoiser"))
        .arg("--config")
        .arg(fx.path("config.toml"))
        .args(["serve", "--addr", "127.0.0.1:0", "--output-dir", s(&out)])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect(&line).to_string();

    let deadline = Instant::now() + Duration::from_secs(30);
    let body = loop {
        let (status, body) = get(&addr, "/v1/health");
        if status == 200 {
            break body;
        }
        assert_eq!(status, 503, "{body}");
        assert!(Instant::now() < deadline, "model never became ready");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    let health: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(health["status"], "ok");
}

fn get(addr: &str, path: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    let status = resp.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

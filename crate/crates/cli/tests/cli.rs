use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use earloc_cli::detection_lines;
use earloc_core::cascade::{Cascade, CascadeConfig, Detector};
use earloc_core::{BBox, Detection, LevelId, Result};
use image::GrayImage;

const TINY_U1: &str = "model = uesegnet1
input_size = 64
widths = 4,4,8,8,8
reduce_width = 4
context_width = 4
m1_scales = 12,20
m2_scales = 24,36
epochs = 2
batch_size = 4
";

const TINY_SSD: &str = "model = ssd_stage
input_size = 144
widths = 4,4,8,8,8
ssd_widths = 8,8,8,8,8
ssd_min_scale = 0.15
epochs = 1
batch_size = 4
lr_initial = 0.005
lr_final = 0.005
";

fn earloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earloc")).args(args).output().expect("spawn earloc")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, count: usize, size: u32, seed: u64) {
    let o = earloc(&[
        "gen",
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn rows(manifest: &Path) -> usize {
    fs::read_to_string(manifest).unwrap().lines().count() - 1
}

#[test]
fn gen_zero_writes_header_only_manifests() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 0, 64, 1);
    for name in ["manifest.csv", "train.csv", "test.csv"] {
        assert_eq!(
            fs::read_to_string(d.path().join(name)).unwrap(),
            "relative_path,x_min,y_min,x_max,y_max\n"
        );
    }
}

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), 10, 96, 7);
    gen(b.path(), 10, 96, 7);
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 3 + 2 * 10);
    assert!(ta == tb, "trees differ");
    assert_eq!(rows(&a.path().join("train.csv")) + rows(&a.path().join("test.csv")), 10);
}

#[test]
fn gen_full_size_dataset() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 2000, 320, 42);
    assert_eq!(rows(&d.path().join("manifest.csv")), 2000);
    assert_eq!(rows(&d.path().join("train.csv")), 1000);
    assert_eq!(rows(&d.path().join("test.csv")), 1000);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&earloc(&["gen", "--bogus"])), 1);
    assert_eq!(code(&earloc(&["train"])), 1);
    assert_eq!(code(&earloc(&["--help"])), 0);
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.txt");
    fs::write(&cfg, TINY_U1).unwrap();
    let missing = d.path().join("none.csv");
    let model = d.path().join("m.uesg");
    let o = earloc(&["train", "--config", s(&cfg), "--data", s(&missing), "--model-out", s(&model)]);
    assert_eq!(code(&o), 2);
    fs::write(&cfg, "epochs = 0\n").unwrap();
    let o = earloc(&["train", "--config", s(&cfg), "--data", s(&missing), "--model-out", s(&model)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn diverging_training_exits_numerical() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 4, 64, 3);
    let cfg = d.path().join("c.txt");
    fs::write(&cfg, format!("{TINY_U1}lr_initial = 1e8\nlr_final = 1e8\n")).unwrap();
    let o = earloc(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&d.path().join("manifest.csv")),
        "--model-out",
        s(&d.path().join("m.uesg")),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn train_detect_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 12, 64, 5);
    let cfg = d.path().join("c.txt");
    fs::write(&cfg, TINY_U1).unwrap();
    let model = d.path().join("out/m.uesg");
    let o = earloc(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&d.path().join("train.csv")),
        "--model-out",
        s(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(model.exists() && d.path().join("out/m.best.uesg").exists());
    let log = fs::read_to_string(d.path().join("out/m.loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,cls,reg,total");
    assert_eq!(lines.len(), 3);

    let img = d.path().join("images/00000.png");
    let o = earloc(&["detect", "--model", s(&model), "--image", s(&img), "--score-threshold", "0"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(!out.is_empty());
    let mut last = f64::INFINITY;
    for line in out.lines() {
        let v: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(v.len(), 5, "{line}");
        assert!(v[4] <= last);
        last = v[4];
    }

    let run_eval = |dir: &Path| {
        let o = earloc(&[
            "eval",
            "--model",
            s(&model),
            "--data",
            s(&d.path().join("test.csv")),
            "--out",
            s(dir),
            "--plot",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.join("metrics.csv")).unwrap()
    };
    let (e1, e2) = (d.path().join("e1"), d.path().join("e2"));
    let csv = run_eval(&e1);
    assert_eq!(csv, run_eval(&e2));
    let body: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(body.len(), 17);
    let acc: Vec<f64> = body.iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(acc.windows(2).all(|w| w[1] <= w[0]));
    assert!(e1.join("metrics.svg").exists());
    let obj = fs::read_to_string(e1.join("objectness.csv")).unwrap();
    assert!(obj.starts_with("threshold,accuracy_by_score,accuracy_by_iou\n"));

    let o = earloc(&["eval", "--model", s(&model), "--data", s(&d.path().join("test.csv")), "--out", s(&e1), "--iou-step", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn detect_prints_nothing_without_detections() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 2, 64, 9);
    let cfg = d.path().join("c.txt");
    fs::write(&cfg, TINY_U1.replace("epochs = 2", "epochs = 1")).unwrap();
    let model = d.path().join("m.uesg");
    let o = earloc(&["train", "--config", s(&cfg), "--data", s(&d.path().join("manifest.csv")), "--model-out", s(&model)]);
    assert_eq!(code(&o), 0);
    let img = d.path().join("images/00000.png");
    let o = earloc(&["detect", "--model", s(&model), "--image", s(&img), "--score-threshold", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "");
}

#[test]
fn train_cascade_smoke() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 200, 96, 11);
    let cfg = d.path().join("c.txt");
    fs::write(&cfg, TINY_SSD).unwrap();
    let out = d.path().join("cascade");
    let o = earloc(&[
        "train-cascade",
        "--config1",
        s(&cfg),
        "--config2",
        s(&cfg),
        "--data",
        s(&d.path().join("manifest.csv")),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (fs::read(out.join("stage1.uesg")).unwrap(), fs::read(out.join("stage2.uesg")).unwrap());
    assert_ne!(a, b);
    let summary = fs::read_to_string(out.join("cascade.txt")).unwrap();
    let n: usize = summary
        .lines()
        .find_map(|l| l.strip_prefix("stage2_samples = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(n <= 200 && n > 0);

    let img = d.path().join("images/00003.png");
    let o = earloc(&[
        "detect",
        "--cascade",
        s(&out.join("stage1.uesg")),
        s(&out.join("stage2.uesg")),
        "--image",
        s(&img),
        "--score-threshold",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().all(|l| l.split(' ').count() == 5));
}

#[test]
fn gradcheck_command() {
    let o = earloc(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for op in ["conv3x3", "maxpool2", "relu", "upsample2x", "softmax", "net_two_level", "net_single_stage"] {
        assert!(text.contains(op), "{op} missing from report");
    }
    let o = earloc(&["gradcheck", "--corrupt", "relu"]);
    assert_eq!(code(&o), 3);
}

/// Reports a fixed box and its half-scaled copy (at half the score) in its
/// own input frame.
struct Fixed(BBox, f64, u32);

impl Detector for Fixed {
    fn input_size(&self) -> u32 {
        self.2
    }

    fn detect(&self, _: &GrayImage) -> Result<Vec<Detection>> {
        Ok(vec![
            Detection {
                bbox: self.0,
                score: self.1,
                source_level: LevelId::M1,
            },
            Detection {
                bbox: self.0.scale(0.5, 0.5),
                score: self.1 / 2.0,
                source_level: LevelId::M1,
            },
        ])
    }
}

#[test]
fn cascade_detection_lines_route_through_both_stages() {
    let image = GrayImage::new(200, 200);
    let stage1 = Fixed(BBox::new(50.0, 50.0, 100.0, 100.0).unwrap(), 0.9, 200);
    // stage 2 sees a 100x100 crop of (25, 25)-(125, 125) resized to 50x50
    let stage2 = Fixed(BBox::new(10.0, 10.0, 40.0, 40.0).unwrap(), 0.8, 50);
    let c = Cascade::new(stage1, stage2, CascadeConfig::default()).unwrap();
    let lines = detection_lines(&c, &image).unwrap();
    assert_eq!(lines, vec!["45.00 45.00 105.00 105.00 0.8000", "35.00 35.00 65.00 65.00 0.4000"]);
}

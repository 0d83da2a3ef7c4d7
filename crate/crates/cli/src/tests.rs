use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use forge_core::scenegeom::ImageRgba;
use forge_core::synthgen::Dataset;
use forge_core::trainpipe::TrainingConfig;
use tempfile::TempDir;

use super::*;

const TINY: &str = r#"{
  "image_size": 32,
  "grid_res": 12,
  "mesh_res": 20,
  "num_shapes": 2,
  "n_uniform": 24,
  "n_surface": 48,
  "stage1_epochs": 2,
  "stage2_epochs": 2,
  "checkpoint_every": 1
}"#;

/// A scratch directory holding `tiny.json`; `p` resolves names inside it.
struct Work(TempDir);

impl Work {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self(dir)
    }

    fn p(&self, name: &str) -> String {
        self.0.path().join(name).display().to_string()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    /// Exit code of `implicit-forge args...`.
    fn code(&self, args: &[&str]) -> u8 {
        execute(std::iter::once("implicit-forge").chain(args.iter().copied()))
    }

    fn ok(&self, args: &[&str]) {
        assert_eq!(self.code(args), 0, "{args:?}");
    }

    /// The failure itself, for commands expected to fail after parsing.
    fn failure(&self, args: &[&str]) -> Failure {
        let cli = Cli::try_parse_from(std::iter::once("implicit-forge").chain(args.iter().copied())).unwrap();
        run(cli).expect_err("command should fail")
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            map.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap());
        }
    }
    map
}

fn pipeline(w: &Work, tag: &str) -> Vec<PathBuf> {
    let cfg = w.p("tiny.json");
    let d = |name: &str| w.p(&format!("{tag}/{name}"));
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--out".into(), d("data")],
        vec![
            "gen-data".into(),
            "--real".into(),
            "--set".into(),
            "shape_offset=3".into(),
            "--set".into(),
            "num_shapes=1".into(),
            "--out".into(),
            d("real"),
        ],
        vec!["train-stage1".into(), "--data".into(), d("data"), "--out".into(), d("s1")],
        vec![
            "train-stage2".into(),
            "--data".into(),
            d("real"),
            "--init".into(),
            d("s1/stage1.ckpt"),
            "--out".into(),
            d("s2"),
        ],
        vec![
            "reconstruct".into(),
            "--checkpoint".into(),
            d("s1/stage1.ckpt"),
            "--image".into(),
            d("data/000_input.png"),
            "--out".into(),
            d("rec"),
        ],
        vec![
            "render-views".into(),
            "--checkpoint".into(),
            d("s2/stage2.ckpt"),
            "--image".into(),
            d("real/003.png"),
            "--mask".into(),
            d("real/003_mask.png"),
            "--azimuth".into(),
            "45".into(),
            "--out".into(),
            d("rv"),
        ],
        vec![
            "eval".into(),
            "--data".into(),
            d("data"),
            "--checkpoint".into(),
            d("s1/stage1.ckpt"),
            "--out".into(),
            d("ev"),
        ],
    ];
    steps
        .iter()
        .map(|step| {
            let mut args: Vec<&str> = step.iter().map(String::as_str).collect();
            args.extend(["--config", &cfg, "--seed", "7"]);
            w.ok(&args);
            PathBuf::from(step.last().unwrap())
        })
        .collect()
}

#[test]
fn reruns_are_byte_identical() {
    let w = Work::new();
    let a = pipeline(&w, "a");
    let b = pipeline(&w, "b");
    for (x, y) in a.iter().zip(&b) {
        let (fx, fy) = (files(x), files(y));
        assert!(!fx.is_empty());
        assert_eq!(fx.keys().collect::<Vec<_>>(), fy.keys().collect::<Vec<_>>(), "{}", x.display());
        for (name, bytes) in &fx {
            assert!(bytes == &fy[name], "{name} differs between runs");
        }
    }
}

#[test]
fn gen_data_layout_and_config_echo() {
    let w = Work::new();
    w.ok(&["gen-data", "--set", "image_size=32", "--set", "n_uniform=8", "--set", "n_surface=8", "--out", &w.p("d")]);
    let names = files(&w.path("d"));
    assert_eq!(names.keys().filter(|n| n.ends_with("_input.png")).count(), 20);
    for suffix in ["view0.png", "view90.png", "view180.png", "queries.bin"] {
        assert!(names.contains_key(&format!("019_{suffix}")), "{suffix}");
    }
    assert!(names.contains_key("shapes.json"));
    let echo = TrainingConfig::load(w.path("d/run_config.json")).unwrap();
    assert_eq!(echo.image_size, 32);
    assert_eq!(echo.stage1_lr, 0.001);
}

#[test]
fn training_writes_checkpoint_and_row_per_epoch() {
    let w = Work::new();
    let cfg = w.p("tiny.json");
    w.ok(&["gen-data", "--config", &cfg, "--out", &w.p("d")]);
    w.ok(&[
        "train-stage1",
        "--config",
        &cfg,
        "--data",
        &w.p("d"),
        "--set",
        "stage1_lr=0.001",
        "--set",
        "stage1_epochs=3",
        "--out",
        &w.p("s1"),
    ]);
    let csv = fs::read_to_string(w.path("s1/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss_occ,loss_mv,total");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
    for f in ["stage1.ckpt", "stage1_epoch0001.ckpt", "stage1_epoch0003.ckpt", "run_config.json"] {
        assert!(w.path("s1").join(f).is_file(), "{f}");
    }
    let echo = TrainingConfig::load(w.path("s1/run_config.json")).unwrap();
    assert_eq!((echo.stage1_epochs, echo.stage1_lr), (3, 0.001));
    let header = stage1_header(&echo, &Dataset::load(w.path("d")).unwrap(), None);
    assert!(header.contains("lr=0.001 "), "{header}");
}

#[test]
fn stage2_requires_init() {
    let w = Work::new();
    let cfg = w.p("tiny.json");
    w.ok(&["gen-data", "--config", &cfg, "--real", "--out", &w.p("r")]);
    let args = ["train-stage2", "--config", &cfg, "--data", &w.p("r"), "--out", &w.p("s2")];
    assert_eq!(w.code(&args), 2);
    match w.failure(&args) {
        Failure::Input(e) => assert!(e.to_string().contains("--init"), "{e}"),
        Failure::Runtime(e) => panic!("runtime failure: {e}"),
    }
    assert!(!w.path("s2").exists());
}

#[test]
fn reconstruct_outputs_and_background_input() {
    let w = Work::new();
    let cfg = w.p("tiny.json");
    w.ok(&["gen-data", "--config", &cfg, "--out", &w.p("d")]);
    w.ok(&["train-stage1", "--config", &cfg, "--data", &w.p("d"), "--set", "stage1_epochs=1", "--out", &w.p("s1")]);
    let ckpt = w.p("s1/stage1.ckpt");
    w.ok(&[
        "reconstruct",
        "--config",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--image",
        &w.p("d/001_input.png"),
        "--out",
        &w.p("rec"),
    ]);
    let rec = files(&w.path("rec"));
    for f in ["mesh.obj", "view0.png", "view90.png", "view180.png", "run_config.json"] {
        assert!(rec.contains_key(f), "{f}");
    }
    let obj = String::from_utf8(rec["mesh.obj"].clone()).unwrap();
    assert!(obj.starts_with("# "));
    assert!(!obj.contains('\r'));

    // all-background input: an all-black mask
    ImageRgba::background(32, 32, [0.0; 3]).save_png(w.path("black_mask.png")).unwrap();
    w.ok(&[
        "reconstruct",
        "--config",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--image",
        &w.p("d/000_input.png"),
        "--mask",
        &w.p("black_mask.png"),
        "--out",
        &w.p("bg"),
    ]);
    let obj = fs::read_to_string(w.path("bg/mesh.obj")).unwrap();
    let vertices = obj.lines().filter(|l| l.starts_with("v ")).count();
    assert!(vertices < 100, "{vertices} vertices from a blank input");
}

#[test]
fn eval_self_comparison_and_csv_columns() {
    let w = Work::new();
    let cfg = w.p("tiny.json");
    w.ok(&["gen-data", "--config", &cfg, "--out", &w.p("d")]);
    for view in ["0", "180"] {
        w.ok(&["eval", "--config", &cfg, "--data", &w.p("d"), "--view", view, "--out", &w.p("ev")]);
        let csv = fs::read_to_string(w.path("ev/eval.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("method,mask_iou,texture_precision,texture_recall"));
        assert_eq!(lines.next(), Some("ground-truth,1.000000,1.000000,1.000000"));
    }
    w.ok(&["gen-data", "--config", &cfg, "--real", "--out", &w.p("r")]);
    w.ok(&["eval", "--config", &cfg, "--data", &w.p("r"), "--out", &w.p("ev_real")]);
    let csv = fs::read_to_string(w.path("ev_real/eval.csv")).unwrap();
    assert!(csv.contains("ground-truth,1.000000,1.000000,1.000000"));
    assert_eq!(w.code(&["eval", "--data", &w.p("r"), "--view", "90", "--out", &w.p("x")]), 2);
}

#[test]
fn input_errors_exit_2_runtime_errors_exit_1() {
    let w = Work::new();
    let out = w.p("x");
    assert_eq!(w.code(&["gen-data", "--config", &w.p("missing.json"), "--out", &out]), 2);
    fs::write(w.path("bad.json"), "{\"stage1_lr\": ").unwrap();
    assert_eq!(w.code(&["gen-data", "--config", &w.p("bad.json"), "--out", &out]), 2);
    assert_eq!(w.code(&["gen-data", "--set", "nonsense=1", "--out", &out]), 2);
    assert_eq!(w.code(&["gen-data", "--set", "image_size=30", "--out", &out]), 2);
    assert_eq!(w.code(&["gen-data", "--set", "novalue", "--out", &out]), 2);
    assert_eq!(w.code(&["frobnicate"]), 2);
    assert_eq!(w.code(&["gen-data"]), 2);
    assert_eq!(w.code(&["eval", "--data", &w.p("nowhere"), "--out", &out]), 2);
    assert_eq!(
        w.code(&["reconstruct", "--checkpoint", &w.p("none.ckpt"), "--image", &w.p("none.png"), "--out", &out]),
        2
    );
    fs::write(w.path("garbage.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        w.code(&["reconstruct", "--checkpoint", &w.p("garbage.ckpt"), "--image", &w.p("none.png"), "--out", &out]),
        2
    );
    assert!(!w.path("x").exists(), "no output before inputs validate");
    fs::write(w.path("blocker"), b"").unwrap();
    assert_eq!(w.code(&["gen-data", "--config", &w.p("tiny.json"), "--out", &w.p("blocker/sub")]), 1);
}

#[test]
fn thread_limit_parsing() {
    assert!(matches!(thread_limit(None), Ok(None)));
    assert!(matches!(thread_limit(Some(" 3 ")), Ok(Some(3))));
    for bad in ["0", "zero", "-1", ""] {
        assert!(matches!(thread_limit(Some(bad)), Err(Failure::Input(_))), "{bad:?}");
    }
}

#[test]
fn method_names() {
    assert_eq!(parse_method("tuned=runs/s2/stage2.ckpt"), ("tuned".into(), PathBuf::from("runs/s2/stage2.ckpt")));
    assert_eq!(parse_method("runs/s1/stage1.ckpt"), ("stage1".into(), PathBuf::from("runs/s1/stage1.ckpt")));
    assert_eq!(sanitize("a b/c"), "a_b_c");
}

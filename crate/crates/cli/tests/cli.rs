//! End-to-end runs of the `eunet` binary on tiny configs.

use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::OnceLock;

const TINY: &str = "\
image_size = 16
sample_count = 12
depth = 2
base_width = 4
mhex_hidden = 4
max_epochs = 2
folds = 3
batch_size = 4
";

fn eunet(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_eunet"))
        .args(args)
        .env("EUNET_THREADS", "1")
        .output()
        .expect("spawn eunet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Shared fixture: a config, two trained EU-Nets, a plain U-Net and the data.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn cfg(&self) -> PathBuf {
        self.root.join("tiny.cfg")
    }
    fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join(name).join("model.ckpt")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("tiny.cfg");
        std::fs::write(&cfg, TINY).unwrap();
        let run = |args: &[&str]| {
            let o = eunet(args);
            assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        };
        run(&["generate", "--config", s(&cfg), "--out", s(&root.join("data"))]);
        for (name, seed) in [("m0", "0"), ("m1", "1")] {
            run(&[
                "train",
                "--config",
                s(&cfg),
                "--out",
                s(&root.join(name)),
                "--seed",
                seed,
            ]);
        }
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&root.join("plain")),
            "--no-mhex",
        ]);
        Fixture { _dir: dir, root }
    })
}

#[test]
fn train_writes_checkpoint_history_and_metrics() {
    let f = fixture();
    let dir = f.root.join("m0");
    assert!(f.ckpt("m0").is_file());
    let history = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    // header plus one row per epoch
    assert_eq!(history.lines().count(), 3, "{history}");
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,samples,loss,dice"));
    assert!(metrics.contains("\ntest,"));
    let resolved = std::fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(resolved.contains("seed = 0\n") && resolved.contains("image_size = 16\n"));
}

#[test]
fn generate_writes_images_masks_and_bands() {
    let data = fixture().root.join("data");
    for stem in ["image", "mask", "band"] {
        let n = std::fs::read_dir(&data)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(stem))
            .count();
        assert_eq!(n, 12, "{stem}");
    }
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = eunet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_eunet"))
        .args(["generate", "--out", s(dir.path())])
        .env("EUNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn explain_all_stages_writes_per_stage_maps_and_composite() {
    let f = fixture();
    let out = f.root.join("explain_all");
    let image = f.root.join("data/image_0003.pgm");
    let o = eunet(&[
        "explain",
        "--config",
        s(&f.cfg()),
        "--out",
        s(&out),
        "--checkpoint",
        s(&f.ckpt("m0")),
        "--image",
        s(&image),
        "--class",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stage in 1..=2 {
        for kind in ["cam", "gradcam"] {
            for ext in ["csv", "pgm"] {
                let p = out.join(format!("{kind}_stage{stage}.{ext}"));
                assert!(p.is_file(), "{}", p.display());
            }
        }
    }
    let composite = std::fs::read_to_string(out.join("cam_composite.csv")).unwrap();
    // header plus one `y,x,value` row per pixel
    assert_eq!(composite.lines().count(), 1 + 16 * 16);
    assert!(composite.lines().skip(1).all(|l| l.split(',').count() == 3));
}

#[test]
fn explain_single_stage_and_bad_inputs() {
    let f = fixture();
    let image = f.root.join("data/image_0000.pgm");
    let base = |out: &Path, class: &str, stage: &str| {
        eunet(&[
            "explain",
            "--config",
            s(&f.cfg()),
            "--out",
            s(out),
            "--checkpoint",
            s(&f.ckpt("m0")),
            "--image",
            s(&image),
            "--class",
            class,
            "--stage",
            stage,
        ])
    };
    let out = f.root.join("explain_one");
    let o = base(&out, "0", "2");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("cam_stage2.csv").is_file());
    assert!(!out.join("cam_stage1.csv").exists());

    assert_eq!(base(&f.root.join("e_class"), "2", "all").status.code(), Some(4));
    assert_eq!(base(&f.root.join("e_stage"), "1", "3").status.code(), Some(2));

    let o = eunet(&[
        "explain",
        "--config",
        s(&f.cfg()),
        "--out",
        s(&f.root.join("e_plain")),
        "--checkpoint",
        s(&f.ckpt("plain")),
        "--image",
        s(&image),
        "--class",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn uncert_both_writes_one_row_per_sample_and_measure() {
    let f = fixture();
    let out = f.root.join("uncert");
    let ensemble = format!("{},{}", s(&f.ckpt("m0")), s(&f.ckpt("m1")));
    let o = eunet(&[
        "uncert",
        "--config",
        s(&f.cfg()),
        "--out",
        s(&out),
        "--checkpoint",
        s(&f.ckpt("m0")),
        "--ensemble",
        &ensemble,
        "--samples",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(out.join("agreement.csv")).unwrap();
    // entropy and variance for each of 3 samples, plus the header
    assert_eq!(rows.lines().count(), 1 + 2 * 3, "{rows}");
    assert!(out.join("summary.csv").is_file());
    let mu = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name();
            let n = n.to_string_lossy();
            n.starts_with("mu_") && n.ends_with(".csv")
        })
        .count();
    assert_eq!(mu, 3);
}

#[test]
fn uncert_rejects_bad_requests() {
    let f = fixture();
    let out = f.root.join("uncert_bad");
    let o = eunet(&[
        "uncert",
        "--config",
        s(&f.cfg()),
        "--out",
        s(&out),
        "--method",
        "ensemble",
        "--ensemble",
        s(&f.ckpt("m0")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = eunet(&[
        "uncert",
        "--config",
        s(&f.cfg()),
        "--out",
        s(&out),
        "--method",
        "mhex",
        "--checkpoint",
        s(&f.ckpt("plain")),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    let o = eunet(&["uncert", "--config", s(&f.cfg()), "--out", s(&out), "--method", "mhex"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn uncert_mhex_only_on_single_image() {
    let f = fixture();
    let out = f.root.join("uncert_img");
    let o = eunet(&[
        "uncert",
        "--config",
        s(&f.cfg()),
        "--out",
        s(&out),
        "--method",
        "mhex",
        "--checkpoint",
        s(&f.ckpt("m1")),
        "--image",
        s(&f.root.join("data/image_0005.pgm")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("mu_0000.csv").is_file());
    assert!(!out.join("agreement.csv").exists());
}

#[test]
fn bench_cam_writes_one_row_per_size() {
    let f = fixture();
    let out = f.root.join("bench");
    let o = eunet(&[
        "bench-cam",
        "--config",
        s(&f.cfg()),
        "--out",
        s(&out),
        "--checkpoint",
        s(&f.ckpt("m0")),
        "--sizes",
        "8,16,32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("bench_cam.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, size) in rows.iter().zip(["8,", "16,", "32,"]) {
        assert!(row.starts_with(size), "{row}");
    }

    for sizes in ["8,10,16", "8,16"] {
        let o = eunet(&["bench-cam", "--config", s(&f.cfg()), "--out", s(&out), "--sizes", sizes]);
        assert_eq!(o.status.code(), Some(2), "{sizes}");
    }
}

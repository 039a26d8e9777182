use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deep-glr"));
    c.env("GLR_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small but complete configuration that keeps every command fast.
fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(
        &p,
        r#"{
  "geometry": {"image_size": 16, "domain_half_width": 13.0, "num_angles": 12, "num_bins": 24},
  "network": {
    "prefilter_channels": [1, 4, 1],
    "feature_channels": [1, 4, 3],
    "feature_kernel": 3,
    "mu_channels": [1, 4, 4],
    "post_channels": [1, 4, 1]
  },
  "pfbs": {"num_layers": 2, "blocks_per_layer": 2, "cnn_refresh": "per_layer"},
  "train": {"max_epochs_per_stage": 1, "patience": 1}
}"#,
    )
    .unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", s(&self.config)];
        all.extend_from_slice(args);
        run(&all)
    }

    fn generate(&self, name: &str, count: &str, seed: &str) -> PathBuf {
        let out = self.path(name);
        let o = self.run(&["--seed", seed, "generate", "--out", s(&out), "--count", count]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }

    fn train(&self) -> PathBuf {
        let train = self.generate("train.glrd", "2", "1");
        let val = self.generate("val.glrd", "2", "2");
        let ckpt = self.path("model.glrc");
        let o = self.run(&["train", "--train", s(&train), "--val", s(&val), "--out", s(&ckpt)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        ckpt
    }
}

#[test]
fn generate_is_reproducible() {
    let f = Fixture::new();
    let a = f.generate("a.glrd", "5", "7");
    let b = f.generate("b.glrd", "5", "7");
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let c = f.generate("c.glrd", "5", "8");
    assert_ne!(bytes, fs::read(&c).unwrap());

    let o = f.run(&["info", "--dataset", s(&a)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("5 samples"));
}

#[test]
fn empty_dataset_is_a_validation_error() {
    let f = Fixture::new();
    let o = f.run(&["generate", "--out", s(&f.path("x.glrd")), "--count", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty dataset"));
}

#[test]
fn default_config_uses_desk_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.glrd");
    let o = run(&["generate", "--out", s(&out), "--count", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("geometry 128x128 px, 180 angles, 183 bins; n0 4096"), "{text}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"geometry": {"image_size": 16, "bogus": 1}}"#).unwrap();
    let o = run(&["--config", s(&p), "info"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let f = Fixture::new();
    let o = f.run(&["info", "--dataset", s(&f.path("nope.glrd"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn info_reports_full_parameter_budget() {
    let o = run(&["info"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("94184"), "{text}");
    assert!(text.contains("91848"));
}

#[test]
fn train_reconstruct_evaluate() {
    let f = Fixture::new();
    let ckpt = f.train();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("model.glrc.summary.json")).unwrap()).unwrap();
    assert!(summary["config_hash"].as_str().unwrap().len() == 64);
    assert!(summary["parameter_count"].as_u64().unwrap() > 0);
    let eps = summary["final_epsilon"].as_f64().unwrap();
    assert!(eps > 1.0 && eps < 1.5);
    let history = fs::read_to_string(f.path("model.glrc.history.csv")).unwrap();
    assert!(history.starts_with("epoch,stage,lr,train_loss,val_psnr"));

    let test = f.generate("test.glrd", "2", "3");
    let out = f.path("recon");
    let o = f.run(&["--jobs", "2", "reconstruct", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 0..2 {
        let d = out.join(format!("sample_{i:04}"));
        for name in ["fbp.pgm", "glr.pgm", "trace.csv"] {
            assert!(d.join(name).exists(), "{name}");
        }
        let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
        let rows: Vec<&str> = trace.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        for r in rows {
            let mu: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
            assert!(mu > 0.0 && mu < 0.1);
        }
    }

    let eval = f.path("eval");
    let o = f.run(&["evaluate", "--dataset", s(&test), "--recon-dir", s(&out), "--out", s(&eval)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("FBP"));
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["sample_count"], 2);
    assert_eq!(agg["config_hash"].as_str().unwrap().len(), 64);
    let csv = fs::read_to_string(eval.join("metrics_deep_glr.csv")).unwrap();
    assert!(csv.starts_with("sample_id,psnr,ssim,mse\n"));

    // Evaluating straight from the checkpoint gives the same numbers.
    let eval2 = f.path("eval2");
    let o = f.run(&["evaluate", "--dataset", s(&test), "--checkpoint", s(&ckpt), "--out", s(&eval2)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(eval2.join("metrics_deep_glr.csv")).unwrap(),
        csv
    );

    // Resuming continues the epoch numbering.
    let train = f.path("train.glrd");
    let val = f.path("val.glrd");
    let resumed = f.path("model.glrc");
    let o = f.run(&[
        "train", "--train", s(&train), "--val", s(&val), "--out", s(&resumed), "--resume", s(&ckpt),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(f.path("model.glrc.history.csv")).unwrap();
    let epochs: Vec<usize> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(epochs.len() > 2);
    assert!(epochs.windows(2).all(|w| w[1] == w[0] + 1), "{epochs:?}");
}

#[test]
fn zero_iterations_give_post_processed_fbp() {
    let f = Fixture::new();
    let ckpt = f.train();
    let test = f.generate("test.glrd", "1", "4");
    let out = f.path("recon0");
    let o = f.run(&[
        "--iterations", "0", "--residual-mode", "convex", "reconstruct", "--checkpoint", s(&ckpt),
        "--dataset", s(&test), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = out.join("sample_0000");
    assert_eq!(fs::read_to_string(d.join("trace.csv")).unwrap().lines().count(), 1);
    // With no iterations the output differs from FBP only by post-processing,
    // which is deterministic: rerunning gives identical bytes.
    let out2 = f.path("recon0b");
    let o = f.run(&[
        "--iterations", "0", "reconstruct", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out",
        s(&out2),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(d.join("glr.f64")).unwrap(),
        fs::read(out2.join("sample_0000/glr.f64")).unwrap()
    );
}

#[test]
fn corrupted_checkpoint_is_an_integrity_error() {
    let f = Fixture::new();
    let ckpt = f.train();
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let test = f.generate("t.glrd", "1", "5");
    let o = f.run(&["reconstruct", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out", s(&f.path("r"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("CRC"), "{}", stderr(&o));
}

#[test]
fn architecture_mismatch_is_a_validation_error() {
    let f = Fixture::new();
    let ckpt = f.train();
    let test = f.generate("t.glrd", "1", "5");
    let other = f.path("other.json");
    fs::write(
        &other,
        r#"{"geometry": {"image_size": 16, "domain_half_width": 13.0, "num_angles": 12, "num_bins": 24}}"#,
    )
    .unwrap();
    let o = run(&[
        "--config", s(&other), "reconstruct", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out",
        s(&f.path("r")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn geometry_mismatch_between_datasets() {
    let f = Fixture::new();
    let a = f.generate("a.glrd", "1", "1");
    let other = f.path("other.json");
    fs::write(
        &other,
        r#"{"geometry": {"image_size": 12, "domain_half_width": 13.0, "num_angles": 12, "num_bins": 24}}"#,
    )
    .unwrap();
    let b = f.path("b.glrd");
    let o = run(&["--config", s(&other), "generate", "--out", s(&b), "--count", "1"]);
    assert_eq!(code(&o), 0);
    let o = f.run(&["train", "--train", s(&a), "--val", s(&b), "--out", s(&f.path("m.glrc"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("geometry mismatch"));
}

#[test]
fn identical_reconstruction_scores_capped_psnr() {
    let f = Fixture::new();
    let test = f.generate("t.glrd", "2", "6");
    let ckpt = f.train();
    let out = f.path("recon");
    let o = f.run(&["reconstruct", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    for i in 0..2 {
        let d = out.join(format!("sample_{i:04}"));
        fs::copy(d.join("gt.f64"), d.join("glr.f64")).unwrap();
    }
    let eval = f.path("eval");
    let o = f.run(&["evaluate", "--dataset", s(&test), "--recon-dir", s(&out), "--out", s(&eval)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["deep_glr"]["psnr_db"]["mean"], 300.0);
    assert_eq!(agg["deep_glr"]["ssim"]["mean"], 1.0);

    // A reconstruction without a matching ground truth is rejected.
    fs::create_dir_all(out.join("sample_0009")).unwrap();
    let o = f.run(&["evaluate", "--dataset", s(&test), "--recon-dir", s(&out), "--out", s(&eval)]);
    assert_eq!(code(&o), 2);
}

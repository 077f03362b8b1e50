use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use milgrain::eval::MetricsReport;
use milgrain::io::read_csv;
use milgrain::synthgeo::read_dataset;
use sha2::{Digest, Sha256};

const CONFIG: &str = r#"{
  "seed": 3,
  "scene": {"n_counties": 30, "coarse_grid": 6, "fine_per_coarse": 3, "time_steps": 2},
  "bag_size": 8,
  "train": {"max_epochs": 3, "repetitions": 2},
  "experiment": {"sweep_coarse_grid": 6}
}
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], threads: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_milgrain"));
        cmd.args(args).current_dir(self.dir.path());
        match threads {
            Some(t) => cmd.env("MILGRAIN_THREADS", t),
            None => cmd.env_remove("MILGRAIN_THREADS"),
        };
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn metrics(dir: &Path) -> MetricsReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

fn file_hash(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn assert_hash_everywhere(dir: &Path) {
    let hash = file_hash(&dir.join("resolved_config.json"));
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "resolved_config.json" {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(&hash), "{} lacks the config hash", path.display());
    }
}

#[test]
fn generate_writes_a_readable_dataset() {
    let s = Sandbox::new();
    s.ok(&["generate", "--config", "c.json", "--out", "d"]);
    let (data, meta) = read_dataset(&s.path("d")).unwrap();
    assert_eq!(meta.dim, 2 * 5 + 5);
    assert_eq!(data.dim(), meta.dim);
    assert!(data.bags.iter().all(|b| b.len() == 8));
    let (header, rows) = read_csv(&s.path("d/truth.csv")).unwrap();
    assert_eq!(header, ["county_id", "productivity", "yield", "corn_fraction"]);
    assert_eq!(rows.len(), 30);
    assert_hash_everywhere(&s.path("d"));

    s.ok(&["generate", "--config", "c.json", "--out", "again"]);
    for f in ["meta.json", "bags.csv", "truth.csv", "resolved_config.json"] {
        assert_eq!(file_hash(&s.path("d").join(f)), file_hash(&s.path("again").join(f)));
    }
    s.ok(&["generate", "--config", "c.json", "--seed", "4", "--out", "other"]);
    assert_ne!(file_hash(&s.path("d/bags.csv")), file_hash(&s.path("other/bags.csv")));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let s = Sandbox::new();
    std::fs::write(s.path("bad.json"), r#"{"scene": {"n_countys": 3}}"#).unwrap();
    let out = s.run(&["generate", "--config", "bad.json", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_countys"));
    let out = s.run(&["generate", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_evaluate() {
    let s = Sandbox::new();
    s.ok(&["generate", "--config", "c.json", "--out", "d"]);
    s.ok(&["train", "--config", "c.json", "--data", "d", "--out", "t", "--reps", "3"]);
    let m = metrics(&s.path("t"));
    assert_eq!(m.methods.len(), 1);
    assert_eq!(m.methods[0].method, "attn");
    assert_eq!(m.methods[0].reps.len(), 3);
    for f in ["checkpoint.json", "trace.csv", "per_bag.csv", "scatter.svg"] {
        assert!(s.path("t").join(f).exists(), "{f}");
    }
    let (header, rows) = read_csv(&s.path("t/trace.csv")).unwrap();
    assert_eq!(header, ["rep", "epoch", "train_loss", "val_rmse", "lr"]);
    assert_eq!(rows.len(), 3 * 3);
    assert_hash_everywhere(&s.path("t"));

    s.ok(&[
        "evaluate",
        "--config",
        "c.json",
        "--data",
        "d",
        "--checkpoint",
        "t/checkpoint.json",
        "--out",
        "e",
    ]);
    let m = metrics(&s.path("e"));
    assert!(m.methods[0].median_rmse >= 0.0);
    let (_, rows) = read_csv(&s.path("e/attention.csv")).unwrap();
    assert_eq!(rows.len(), 30 * 8);
    assert!(std::fs::read_to_string(s.path("e/attention_map.svg")).unwrap().contains("corn ratio"));
    assert_hash_everywhere(&s.path("e"));
}

#[test]
fn method_flag_selects_the_model() {
    let s = Sandbox::new();
    s.ok(&["train", "--config", "c.json", "--method", "ridge", "--out", "r"]);
    assert!(s.path("r/linear.json").exists());
    assert_eq!(metrics(&s.path("r")).methods[0].method, "ridge");
    s.ok(&["train", "--config", "c.json", "--method", "instance", "--out", "i", "--reps", "1"]);
    assert_eq!(metrics(&s.path("i")).methods[0].method, "instance");
    let out = s.run(&["train", "--config", "c.json", "--method", "svm"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dataset_and_config_must_agree() {
    let s = Sandbox::new();
    s.ok(&["generate", "--config", "c.json", "--out", "d"]);
    let out = s.run(&["train", "--data", "d", "--out", "t"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("features"), "{}", stderr(&out));

    std::fs::write(s.path("fake.json"), r#"{"magic": "NOPE"}"#).unwrap();
    let out = s.run(&["evaluate", "--config", "c.json", "--data", "d", "--checkpoint", "fake.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn compare_reports_every_method_and_rep() {
    let s = Sandbox::new();
    s.ok(&["experiment", "compare", "--config", "c.json", "--out", "x"]);
    let m = metrics(&s.path("x"));
    let names: Vec<&str> = m.methods.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["attn", "mean", "instance", "manual", "lr", "ridge"]);
    assert!(m.methods.iter().all(|r| r.reps.len() == 2));
    assert!(std::fs::read_to_string(s.path("x/scatter.svg")).unwrap().contains("<line"));
    assert_hash_everywhere(&s.path("x"));
}

#[test]
fn attncorr_reports_a_correlation() {
    let s = Sandbox::new();
    s.ok(&["experiment", "attncorr", "--config", "c.json", "--out", "x"]);
    let m = metrics(&s.path("x"));
    let c = m.scalars["attention_ratio_correlation"];
    assert!((-1.0..=1.0).contains(&c));
    let (header, _) = read_csv(&s.path("x/attention.csv")).unwrap();
    assert!(header.contains(&"ratio_norm".to_string()));
    assert_hash_everywhere(&s.path("x"));
}

#[test]
fn sweep_covers_every_bag_size() {
    let s = Sandbox::new();
    s.ok(&[
        "experiment",
        "sweep",
        "--config",
        "c.json",
        "--method",
        "ridge",
        "--ks",
        "2,10,50,100,200",
        "--out",
        "x",
    ]);
    let (_, rows) = read_csv(&s.path("x/sweep.csv")).unwrap();
    let ks: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ks, ["2", "10", "50", "100", "200"]);
    let dropped: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(dropped.windows(2).all(|w| w[0] <= w[1]));
    assert_hash_everywhere(&s.path("x"));
}

#[test]
fn ablate_and_inseason_tables() {
    let s = Sandbox::new();
    s.ok(&["experiment", "ablate", "--config", "c.json", "--reps", "1", "--out", "a"]);
    let (_, rows) = read_csv(&s.path("a/ablation.csv")).unwrap();
    assert_eq!(rows.len(), 10);
    let imp: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(imp.contains(&0.0) && imp.contains(&100.0));

    s.ok(&["experiment", "inseason", "--config", "c.json", "--reps", "1", "--t", "1,2", "--out", "i"]);
    let (_, rows) = read_csv(&s.path("i/inseason.csv")).unwrap();
    let masked: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(masked, ["5", "0"]);
    let out = s.run(&["experiment", "inseason", "--config", "c.json", "--t", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_experiment_lists_the_choices() {
    let s = Sandbox::new();
    let out = s.run(&["experiment", "forecast"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["compare", "ablate", "inseason", "sweep", "attncorr"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn thread_cap_is_validated() {
    let s = Sandbox::new();
    let out = s.run_env(&["generate", "--config", "c.json", "--out", "d"], Some("0"));
    assert_eq!(out.status.code(), Some(2));
    let out = s.run_env(&["generate", "--config", "c.json", "--out", "d"], Some("1"));
    assert!(out.status.success());
}

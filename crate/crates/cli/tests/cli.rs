use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tkc::checkpoint::Checkpoint;
use tkc::data::Dataset;

const SMALL: &str = "\
# small run for the command-line tests
data.classes = 3
data.per_class = 20
data.dim = 6
batch_size = 10
negatives = 16
epochs = 3
warmup_epochs = 1
embed_dim = 8
encoder_hidden = 16
kt_hidden = 8
";

fn tkc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkc"))
        .args(args)
        .output()
        .expect("spawn tkc")
}

fn ok(args: &[&str]) -> String {
    let out = tkc(args);
    assert!(
        out.status.success(),
        "tkc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tkc(args).status.code().expect("exit code")
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.tkds");
    let b = dir.path().join("b.tkds");
    let msg = ok(&["gen-data", "--out", s(&a)]);
    assert!(msg.contains("4096 samples"), "{msg}");
    ok(&["gen-data", "--out", s(&b)]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let loaded = Dataset::load(&a).unwrap();
    assert_eq!(loaded.n_samples(), 4096);
    assert_eq!(loaded.to_bytes(), bytes);
    let c = dir.path().join("c.tkds");
    ok(&["gen-data", "--out", s(&c), "--seed", "1"]);
    assert_ne!(fs::read(&c).unwrap(), bytes);
}

#[test]
fn baseline_override_and_rerun_from_resolved_config() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let run1 = dir.path().join("run1");
    ok(&["train", "--config", s(&cfg), "--set", "h=0", "--out", s(&run1)]);
    let metrics = fs::read_to_string(run1.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,loss_total,loss_current,knn_top1,mean_stability,lr");
    assert_eq!(lines.len(), 4);
    let resolved = fs::read_to_string(run1.join("config.resolved")).unwrap();
    assert!(resolved.contains("h = 0\n"));
    assert!(resolved.contains("tau = 0.2\n"));

    let run2 = dir.path().join("run2");
    ok(&["train", "--config", s(&run1.join("config.resolved")), "--out", s(&run2)]);
    assert_eq!(fs::read(run2.join("metrics.csv")).unwrap(), metrics.as_bytes());
    assert_eq!(
        fs::read(run2.join("checkpoint.tkck")).unwrap(),
        fs::read(run1.join("checkpoint.tkck")).unwrap()
    );
}

#[test]
fn temporal_run_has_temporal_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--set", "h=2", "--out", s(&out)]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "epoch,loss_total,loss_current,loss_temporal_0,loss_temporal_1,knn_top1,mean_stability,lr\n"
    ));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let rest = dir.path().join("rest");
    ok(&["train", "--config", s(&cfg), "--out", s(&full)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&part), "--stop-after", "1"]);
    assert_eq!(fs::read_to_string(part.join("metrics.csv")).unwrap().lines().count(), 2);
    ok(&["train", "--resume", s(&part.join("checkpoint.tkck")), "--out", s(&rest)]);
    for f in ["metrics.csv", "checkpoint.tkck", "config.resolved"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(rest.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn checkpoint_file_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let bytes = fs::read(out.join("checkpoint.tkck")).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn stability_report_pairs_and_frozen_teacher() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&[
        "train", "--config", s(&cfg), "--set", "alpha=1", "--set", "aug.sigma=0",
        "--set", "aug.mask_fraction=0", "--out", s(&out), "--stability-dump",
    ]);
    let report = ok(&["stability-report", "--checkpoint", s(&out.join("checkpoint.tkck"))]);
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "sample_id,epoch,stability");
    // 60 samples, epochs − 1 = 2 comparable pairs each
    assert_eq!(rows.len() - 1, 60 * 2);
    assert!(rows[1..].iter().all(|r| r.ends_with(",1")));
    assert!(rows[1].starts_with("0,1,") && rows[2].starts_with("0,2,"));
    assert_eq!(fs::read_to_string(out.join("stability.csv")).unwrap(), report);

    let file = dir.path().join("report.csv");
    ok(&["stability-report", "--checkpoint", s(&out.join("checkpoint.tkck")), "--out", s(&file)]);
    assert_eq!(fs::read_to_string(&file).unwrap(), report);
}

#[test]
fn stability_values_lie_in_range() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--set", "alpha=0.9", "--out", s(&out)]);
    let report = ok(&["stability-report", "--checkpoint", s(&out.join("checkpoint.tkck"))]);
    for row in report.lines().skip(1) {
        let v: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((-1.0..=1.0).contains(&v), "{row}");
    }
}

#[test]
fn eval_reports_accuracy() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let ck = out.join("checkpoint.tkck");
    let report = ok(&["eval", "--checkpoint", s(&ck), "--probe"]);
    let knn: f64 = report.lines().next().unwrap().strip_prefix("knn_top1 ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&knn));
    assert!(report.contains("linear_top1 "));
    // the metrics row and the eval command agree on the final student
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let cols: Vec<&str> = last.split(',').collect();
    assert_eq!(cols[cols.len() - 3].parse::<f64>().unwrap(), knn);
}

#[test]
fn sweep_produces_one_row_per_h() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let table = ok(&["sweep-h", "--config", s(&cfg), "--h", "0", "--out", s(&out)]);
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("0,"));
    let table = ok(&["sweep-h", "--config", s(&cfg), "--h", "0,1,2,3", "--out", s(&out)]);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows[1..].iter().enumerate() {
        assert!(row.starts_with(&format!("{i},")));
        assert!(out.join(format!("h{i}")).join("metrics.csv").exists());
    }
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap(), table);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = tkc(&["train", "--config", s(&cfg), "--set", "bogus=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = tkc(&["train", "--config", s(&cfg), "--set", "tau=-1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));
    assert_eq!(code(&["train", "--set", "h", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--config", s(&cfg), "--set", "negatives=many", "--out", s(&out)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert!(!out.exists(), "failed runs leave no artifacts");
}

#[test]
fn io_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&["train", "--config", s(&missing), "--out", s(&out)]), 3);
    let bad = dir.path().join("bad.tkck");
    fs::write(&bad, b"TKCK junk").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&bad)]), 3);
    assert_eq!(code(&["stability-report", "--checkpoint", s(&bad)]), 3);
    assert_eq!(code(&["train", "--resume", s(&bad), "--out", s(&out)]), 3);
    let data = dir.path().join("trunc.tkds");
    fs::write(&data, b"TKDS\x01\x00\x00\x00\x05\x00\x00\x00").unwrap();
    let cfg = dir.path().join("file.cfg");
    fs::write(&cfg, format!("data.path = {}\n", data.display())).unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&out)]), 3);
}

#[test]
fn stability_report_needs_a_bank() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let ck = Checkpoint::load(&out.join("checkpoint.tkck")).unwrap();
    let mut stripped = Checkpoint::new();
    for name in ck.names().filter(|n| *n != "bank") {
        stripped.insert(name, ck.get(name).unwrap().to_vec());
    }
    let path = dir.path().join("nobank.tkck");
    stripped.save(&path).unwrap();
    let o = tkc(&["stability-report", "--checkpoint", s(&path)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bank"));
}

#[test]
fn divergence_exits_4_without_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = tkc(&["train", "--config", s(&cfg), "--set", "lr=1e200", "--set", "warmup_epochs=0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn training_on_a_dataset_file() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.tkds");
    ok(&["gen-data", "--out", s(&data), "--classes", "3", "--per-class", "20", "--dim", "6"]);
    let cfg = dir.path().join("file.cfg");
    let text = SMALL
        .lines()
        .filter(|l| !l.starts_with("data."))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&cfg, format!("{text}\ndata.path = {}\n", data.display())).unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("data.path = "));
    let report = ok(&["stability-report", "--checkpoint", s(&out.join("checkpoint.tkck")), "--data", s(&data)]);
    assert_eq!(report.lines().count(), 1 + 60 * 2);
}

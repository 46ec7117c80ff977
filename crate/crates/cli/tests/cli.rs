use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atrousformer")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

// Small enough to train a few steps in about a second.
const TINY: &str = "\
seed = 3
train.steps = 3
train.batch = 2
train.eval_samples = 4
scene.height = 32
scene.width = 64
model.stage_channels = 8,8,16,16
model.stage_heads = 2,2,4
model.slice = 2,4
model.compressed = 16
model.global_heads = 4
";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn count_reports_known_values() {
    let o = run(&["count", "--height", "36", "--width", "100", "--density", "4", "--heads", "16", "--mode", "global"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("19584"));
    let o = run(&["count", "--height", "36", "--width", "100", "--density", "4", "--heads", "1", "--mode", "dense"]);
    assert!(stdout(&o).contains("3600"));
    let o = run(&["count", "--height", "4", "--width", "4", "--density", "0", "--heads", "1", "--mode", "global"]);
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    assert_eq!(row.split_whitespace().nth(6), Some("8"));
}

#[test]
fn count_rejects_bad_slices() {
    assert_eq!(code(&run(&["count", "--height", "6", "--width", "6", "--density", "1", "--mode", "local"])), 2);
    let o = run(&["count", "--height", "6", "--width", "6", "--density", "1", "--slice", "4,3", "--mode", "local"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["count", "--height", "6"])), 2);
}

#[test]
fn oracle_diff_one_line_per_cell() {
    let o = run(&["oracle-diff", "--seeds", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 1 + 54);
    let bad = run(&["oracle-diff", "--seeds", "1", "--fault-band", "1"]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn gradcheck_contract() {
    for scope in ["stage", "decoder"] {
        let o = run(&["gradcheck", "--scope", scope]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
    }
    assert_eq!(code(&run(&["gradcheck", "--scope", "stage", "--corrupt"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--scope", "everything"])), 2);
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["metrics.csv", "eval.csv", "run.log"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert!(metrics.starts_with("step,focal,seg_bce,exist_bce,total,f1,precision,recall\n"));
    let log = fs::read_to_string(a.join("run.log")).unwrap();
    for line in ["train.lr = 0.005", "train.momentum = 0.9", "train.weight_decay = 0.0001", "model.slice = 2,4"] {
        assert!(log.contains(line), "missing {line:?}");
    }
    assert!(a.join("checkpoint/manifest.txt").exists());
    assert!(a.join("checkpoint/config.txt").exists());
}

#[test]
fn eval_of_exported_held_out_set_matches_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", run_dir.to_str().unwrap()])), 0);
    let data = dir.path().join("data");
    let o = run(&["generate", "--out", data.to_str().unwrap(), "--count", "4", "--seed", "3", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    assert!(data.join("sample_00003/meta").exists());
    let out = dir.path().join("eval");
    let o = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint").to_str().unwrap(),
        "--dataset-dir",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("eval.csv")).unwrap(), fs::read_to_string(run_dir.join("eval.csv")).unwrap());
    let predictions = fs::read_to_string(out.join("predictions.txt")).unwrap();
    assert_eq!(predictions.lines().count(), 4 * 2);
}

#[test]
fn unreadable_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train", "--config", "/does/not/exist.cfg"])), 2);
    let cfg = write_config(dir.path(), "train.lr = fast\n");
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()])), 2);
    let missing = dir.path().join("nothing");
    let o = run(&["eval", "--checkpoint", missing.to_str().unwrap(), "--dataset-dir", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn ablate_reports_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = run(&["ablate", "--config", &cfg, "--seeds", "1,2", "--steps", "2"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "seed,guided_exist_acc,uniform_exist_acc,guided_wins");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("2,"));
}

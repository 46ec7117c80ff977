//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line to the
//! real stderr (bypassing libtest's capture) and then asserts.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use atrousformer::attention::{
    atrous_schedule, dot_count, global_atrousformer, local_atrousformer, AtrousFormer, AttnConfig, AttnMode,
    StageOptions,
};
use atrousformer::init::Initializer;
use atrousformer::{Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atrousformer")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{name}: {detail}");
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn divisor(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let d: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
    d[rng.random_range(0..d.len())]
}

/// `kv_positions` column of a `count` table, keyed by mode.
fn kv_column(table: &str, mode: &str) -> Option<u64> {
    table
        .lines()
        .find(|l| l.split_whitespace().next() == Some(mode))
        .and_then(|l| l.split_whitespace().nth(6))
        .and_then(|v| v.parse().ok())
}

#[test]
fn position_counts() {
    let mut got = Vec::new();
    let mut ok = true;
    let mut slowest = Duration::ZERO;
    for (heads, global, dense) in [(1, 1224, 3600), (4, 4896, 14400), (8, 9792, 28800), (16, 19584, 57600)] {
        let h = heads.to_string();
        let start = Instant::now();
        let o = run(&["count", "--height", "36", "--width", "100", "--density", "4", "--heads", &h, "--mode", "all"]);
        slowest = slowest.max(start.elapsed());
        let table = stdout(&o);
        let (g, d) = (kv_column(&table, "global"), kv_column(&table, "dense"));
        ok &= o.status.success() && g == Some(global) && d == Some(dense);
        got.push(format!("{heads}:{}/{}", g.unwrap_or(0), d.unwrap_or(0)));
    }
    ok &= slowest < Duration::from_secs(1);
    verdict(
        "position counts",
        ok,
        &format!("heads:global/dense {}, slowest run {slowest:.2?}", got.join(" ")),
    );
}

#[test]
fn oracle_equivalence() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for (precision, tol) in [("single", 1e-5), ("double", 1e-10)] {
        let o = run(&["oracle-diff", "--seeds", "1", "--precision", precision]);
        let text = stdout(&o);
        let mut configs = 0;
        let mut worst = 0.0f64;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let global: f64 = cols[7].parse().unwrap();
            let local: f64 = cols[8].parse().unwrap();
            worst = worst.max(global).max(local);
            configs += 2;
        }
        ok &= o.status.success() && configs >= 50 && worst < tol;
        details.push(format!("{precision}: {configs} configs, max {worst:.2e} < {tol:.0e}"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    verdict("oracle equivalence", ok, &format!("{} in {elapsed:.2?}", details.join("; ")));
}

#[test]
fn degenerate_slice_identity() {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(2..=12), rng.random_range(2..=12));
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(1..=4);
        let cfg = AttnConfig::local(c, heads, rng.random_range(0..=2), (h, w));
        let mut init = Initializer::new(seed, Precision::Double);
        let block = AtrousFormer::init(&mut init, cfg).unwrap();
        let x = init.sample(&[h, w, c]).unwrap();
        let local = local_atrousformer(&x, &block.row, &block.col, &cfg).unwrap();
        let global = global_atrousformer(&x, &block.row, &block.col, &cfg).unwrap();
        worst = worst.max(max_abs_diff(&local, &global));
    }
    verdict("degenerate-slice identity", worst < 1e-6, &format!("10 seeds, max diff {worst:.2e} < 1e-6"));
}

#[test]
fn schedule_values() {
    let cases = [((36, 4), vec![2, 4, 9, 18]), ((16, 4), vec![1, 2, 4, 8]), ((8, 4), vec![1, 1, 2, 4])];
    let mut ok = true;
    let mut got = Vec::new();
    for ((h, j), want) in cases {
        let s = atrous_schedule(h, j).unwrap();
        ok &= s.dilations() == want.as_slice();
        got.push(format!("({h},{j})->{:?}", s.dilations()));
    }
    verdict("schedule values", ok, &got.join(" "));
}

#[test]
fn gradient_verification() {
    let start = Instant::now();
    let o = run(&["gradcheck", "--scope", "all"]);
    let elapsed = start.elapsed();
    let text = stdout(&o);
    let summary: Vec<String> = text
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            format!("{} {}", c[0], c[3])
        })
        .collect();
    let ok = o.status.success() && summary.len() == 4 && elapsed < Duration::from_secs(180);
    verdict(
        "gradient verification",
        ok,
        &format!("max rel err {} (< 1e-4, h = 1e-3) in {elapsed:.2?}", summary.join(", ")),
    );
}

#[test]
fn instrumented_complexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ok = true;
    let mut settings = Vec::new();
    for i in 0..10 {
        let (h, w) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let density = rng.random_range(0..=3);
        let slice = (divisor(&mut rng, h), divisor(&mut rng, w));
        let mut init = Initializer::new(i, Precision::Double);
        let x = init.sample(&[h, w, 4]).unwrap();
        for (cfg, mode) in [
            (AttnConfig::global(4, 2, density), AttnMode::Global),
            (
                AttnConfig::local(4, 2, density, slice),
                AttnMode::Local {
                    slice_rows: slice.0,
                    slice_cols: slice.1,
                },
            ),
        ] {
            let block = AtrousFormer::init(&mut init, cfg).unwrap();
            let (_, traces) = block.forward_traced(&x, &StageOptions::default()).unwrap();
            let tally: u64 = traces.iter().map(|t| t.dot_products).sum();
            ok &= tally == dot_count(h, w, density, mode);
        }
        settings.push(format!("{h}x{w}/J{density}/{}x{}", slice.0, slice.1));
    }
    verdict(
        "instrumented complexity",
        ok,
        &format!("tallies equal formulas (global and local) for {}", settings.join(" ")),
    );
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn toy_trainability() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let start = Instant::now();
    let o = run(&["train", "--out", out.to_str().unwrap()]);
    let elapsed = start.elapsed();
    if !o.status.success() {
        verdict("toy trainability", false, &String::from_utf8_lossy(&o.stderr));
    }
    let steps = csv_rows(&fs::read_to_string(out.join("metrics.csv")).unwrap());
    let total = |range: std::ops::Range<usize>| {
        let n = range.len() as f64;
        range.map(|i| steps[i][4]).sum::<f64>() / n
    };
    let early = total(10..31);
    let late = total(steps.len() - 20..steps.len());
    let eval = &csv_rows(&fs::read_to_string(out.join("eval.csv")).unwrap())[0];
    let (exist_acc, iou) = (eval[8], eval[9]);
    let ratio = late / early;
    let ok = steps.len() == 300 && ratio <= 0.5 && iou >= 0.5 && exist_acc >= 0.9 && elapsed <= Duration::from_secs(900);
    verdict(
        "toy trainability",
        ok,
        &format!(
            "loss final-20 {late:.4} / steps 10-30 {early:.4} = {ratio:.3} (<= 0.5), held-out IoU {iou:.3} (>= 0.5), \
             existence acc {exist_acc:.3} (>= 0.9), {elapsed:.0?}"
        ),
    );
}

/// Training steps per arm in the guidance ablation; both arms share it.
const ABLATION_STEPS: &str = "60";

#[test]
fn guidance_ablation_direction() {
    let start = Instant::now();
    let o = run(&["ablate", "--seeds", "1,2,3,4,5", "--steps", ABLATION_STEPS]);
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let wins = rows.iter().filter(|r| r[3] == "true").count();
    let arms: Vec<String> = rows.iter().map(|r| format!("{}:{}/{}", r[0], &r[1][..5], &r[2][..5])).collect();
    verdict(
        "guidance ablation direction",
        o.status.success() && rows.len() == 5 && wins >= 3,
        &format!(
            "guided >= uniform on {wins}/5 seeds (seed:guided/uniform {}), {ABLATION_STEPS} steps per arm, {:.0?}",
            arms.join(" "),
            start.elapsed()
        ),
    );
}

const TINY: &str = "\
seed = 5
train.steps = 4
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

fn twice(args: &[&str], files: &[&str], outdirs: (&Path, &Path)) -> Result<(), String> {
    let mut outputs = Vec::new();
    for dir in [outdirs.0, outdirs.1] {
        let args: Vec<String> = args.iter().map(|a| a.replace("{out}", dir.to_str().unwrap())).collect();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = run(&refs);
        if !o.status.success() {
            return Err(format!("{} failed", args[0]));
        }
        let mut blob = o.stdout.clone();
        for f in files {
            blob.extend(fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?);
        }
        outputs.push(blob);
    }
    if outputs[0] == outputs[1] {
        Ok(())
    } else {
        Err(format!("{} output differs", args[0]))
    }
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let data = dir.path().join("data");
    assert!(run(&["generate", "--out", data.to_str().unwrap(), "--count", "4", "--seed", "5", "--config", cfg])
        .status
        .success());
    let checks: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["count", "--height", "36", "--width", "100", "--density", "4", "--heads", "8", "--slice", "4,10"], vec![]),
        (vec!["oracle-diff", "--seeds", "2", "--precision", "single"], vec![]),
        (vec!["gradcheck", "--scope", "decoder"], vec![]),
        (vec!["train", "--config", cfg, "--out", "{out}"], vec!["metrics.csv", "eval.csv"]),
        (vec!["generate", "--out", "{out}/gen", "--count", "2", "--seed", "5", "--config", cfg], vec!["gen/sample_00001/meta"]),
        (
            vec!["eval", "--checkpoint", "{out}/checkpoint", "--dataset-dir", data.to_str().unwrap(), "--out", "{out}/eval"],
            vec!["eval/eval.csv", "eval/predictions.txt"],
        ),
        (vec!["ablate", "--config", cfg, "--seeds", "1,2", "--steps", "2", "--out", "{out}"], vec!["ablation.csv"]),
    ];
    let mut failures = Vec::new();
    for (args, files) in &checks {
        if let Err(e) = twice(args, files, (&a, &b)) {
            failures.push(e);
        }
    }
    verdict(
        "determinism",
        failures.is_empty(),
        &if failures.is_empty() {
            format!("{} commands byte-identical across two runs", checks.len())
        } else {
            failures.join("; ")
        },
    );
}

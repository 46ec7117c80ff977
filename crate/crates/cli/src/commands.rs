use std::fmt;
use std::fs;
use std::path::Path;

use atrousformer::attention::{dot_count, kv_positions, AttnMode, BandFault};
use atrousformer::config::{parse_pair, KvConfig};
use atrousformer::model::LaneModel;
use atrousformer::params::{load_checkpoint, save_checkpoint};
use atrousformer::synth::{generate_scene, load_dataset, sample_dir_name, save_sample};
use atrousformer::tensor::gradcheck::GradCheckOptions;
use atrousformer::train::{self, ablate_guidance, evaluate, metrics_csv, TrainConfig, ABLATION_HEADER};
use atrousformer::verify::{
    default_cells, grad_check_scope, oracle_case, oracle_tolerance, GradScope, GRADCHECK_TOLERANCE,
};
use atrousformer::{Error, Precision};

use crate::{CountMode, PrecisionArg};

/// Name of the run configuration stored next to the checkpoint tensors.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
    Lib(Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Lib(Error::Config(_) | Error::Io { .. } | Error::Format(_)) => 2,
            CliError::Lib(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult = Result<(), CliError>;

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: Option<&Path>) -> Result<String, Error> {
    let Some(path) = path else { return Ok(String::new()) };
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_kv(path: Option<&Path>) -> Result<KvConfig, Error> {
    KvConfig::parse(&read_text(path)?)
}

pub fn count(h: usize, w: usize, density: usize, heads: usize, slice: Option<&str>, mode: CountMode) -> CliResult {
    if h == 0 || w == 0 || heads == 0 {
        return Err(CliError::Usage("height, width and heads must be positive".into()));
    }
    let slice = slice.map(parse_pair).transpose()?;
    let mut rows = Vec::new();
    if matches!(mode, CountMode::Dense | CountMode::All) {
        rows.push(("dense", AttnMode::Dense, "-".to_string()));
    }
    if matches!(mode, CountMode::Global | CountMode::All) {
        rows.push(("global", AttnMode::Global, "-".to_string()));
    }
    if matches!(mode, CountMode::Local | CountMode::All) {
        match slice {
            Some((sr, sc)) => {
                if sr == 0 || sc == 0 || h % sr != 0 || w % sc != 0 {
                    return Err(CliError::Usage(format!("slice {sr},{sc} does not tile {h}x{w}")));
                }
                let m = AttnMode::Local {
                    slice_rows: sr,
                    slice_cols: sc,
                };
                rows.push(("local", m, format!("{sr},{sc}")));
            }
            None if mode == CountMode::Local => {
                return Err(CliError::Usage("--mode local needs --slice rows,cols".into()));
            }
            None => {}
        }
    }
    println!(
        "{:<8}{:>8}{:>8}{:>9}{:>7}{:>8}{:>14}{:>16}",
        "mode", "height", "width", "density", "heads", "slice", "kv_positions", "dot_count"
    );
    for (name, m, s) in rows {
        println!(
            "{:<8}{:>8}{:>8}{:>9}{:>7}{:>8}{:>14}{:>16}",
            name,
            h,
            w,
            density,
            heads,
            s,
            kv_positions(h, w, density, heads, m),
            dot_count(h, w, density, m)
        );
    }
    Ok(())
}

fn precision(p: PrecisionArg) -> Precision {
    match p {
        PrecisionArg::Single => Precision::Single,
        PrecisionArg::Double => Precision::Double,
    }
}

pub fn oracle_diff(seeds: u64, p: PrecisionArg, fault_band: Option<usize>) -> CliResult {
    let precision = precision(p);
    let tol = oracle_tolerance(precision);
    let fault = fault_band.map(|band| BandFault { band, shift: 1 });
    println!("h,w,density,heads,seed,channels,slice,global_diff,local_diff,status");
    let (mut worst, mut failures, mut lines) = (0.0f64, 0usize, 0usize);
    for seed in 0..seeds {
        for cell in default_cells() {
            let case = oracle_case(cell, seed, precision, fault)?;
            let ok = case.max_diff() < tol;
            worst = worst.max(case.max_diff());
            failures += usize::from(!ok);
            lines += 1;
            println!(
                "{},{},{},{},{},{},{}x{},{:.3e},{:.3e},{}",
                cell.h,
                cell.w,
                cell.density,
                cell.heads,
                seed,
                case.channels,
                case.slice.0,
                case.slice.1,
                case.global_diff,
                case.local_diff,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    eprintln!("{lines} configs, max abs diff {worst:.3e}, tolerance {tol:.0e} ({precision})");
    if failures > 0 {
        return Err(CliError::Failed(format!("{failures} of {lines} configs exceed {tol:.0e}")));
    }
    Ok(())
}

pub fn gradcheck(scope: &str, seed: u64, corrupt: bool) -> CliResult {
    let scopes: Vec<GradScope> = match scope {
        "all" => GradScope::ALL.to_vec(),
        s => vec![GradScope::parse(s).ok_or_else(|| CliError::Usage(format!("unknown scope {s:?}")))?],
    };
    let options = GradCheckOptions {
        corrupt_analytic: corrupt,
        ..Default::default()
    };
    let mut failed = Vec::new();
    println!("scope,checked,skipped,max_rel_err,max_abs_err,status");
    for s in scopes {
        let report = grad_check_scope(s, seed, options)?;
        let ok = report.max_rel_err < GRADCHECK_TOLERANCE;
        println!(
            "{},{},{},{:.3e},{:.3e},{}",
            s.name(),
            report.checked,
            report.skipped,
            report.max_rel_err,
            report.max_abs_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(s.name());
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Failed(format!(
            "relative error above {GRADCHECK_TOLERANCE:.0e} in: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

pub fn train(config: Option<&Path>, out: &Path) -> CliResult {
    let text = read_text(config)?;
    let cfg = TrainConfig::from_kv(&KvConfig::parse(&text)?)?;
    let echo = cfg.to_kv().to_string();
    create_dir(out)?;
    let mut log = String::new();
    log.push_str("# config file\n");
    log.push_str(&text);
    if !text.is_empty() && !text.ends_with('\n') {
        log.push('\n');
    }
    log.push_str("# resolved\n");
    log.push_str(&echo);
    log.push_str("# steps\n");
    eprint!("{echo}");
    let (model, logs) = train::train(&cfg, |l| {
        let row = l.csv_row();
        eprintln!("step {row}");
        log.push_str(&row);
        log.push('\n');
    })?;
    let report = evaluate(&model, &cfg.eval_set()?)?;
    log.push_str("# held-out\n");
    log.push_str(&report.csv());
    write(&out.join("metrics.csv"), &metrics_csv(&logs))?;
    write(&out.join("eval.csv"), &report.csv())?;
    write(&out.join("run.log"), &log)?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&ckpt, &model)?;
    write(&ckpt.join(CONFIG_FILE), &echo)?;
    print!("{}", report.csv());
    Ok(())
}

pub fn eval(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> CliResult {
    let cfg = TrainConfig::from_kv(&read_kv(Some(&checkpoint.join(CONFIG_FILE)))?)?;
    let mut model = LaneModel::init(cfg.seed, cfg.model.clone())?;
    load_checkpoint(checkpoint, &mut model)?;
    let samples = load_dataset(dataset)?;
    let report = evaluate(&model, &samples)?;
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("eval.csv"), &report.csv())?;
        write(&out.join("predictions.txt"), &report.predictions_text())?;
    }
    print!("{}", report.csv());
    Ok(())
}

pub fn generate(out: &Path, count: usize, seed: u64, config: Option<&Path>) -> CliResult {
    let mut kv = read_kv(config)?;
    kv.set("seed", seed);
    // same scenes as the held-out set of a training run with this seed
    let cfg = TrainConfig::from_kv(&kv)?;
    create_dir(out)?;
    for i in 0..count {
        let sample = generate_scene(cfg.eval_seed(i), &cfg.scene)?;
        save_sample(&out.join(sample_dir_name(i)), &sample)?;
    }
    eprintln!("wrote {count} samples to {}", out.display());
    Ok(())
}

pub fn ablate(config: Option<&Path>, seeds: &str, steps: Option<usize>, out: Option<&Path>) -> CliResult {
    let mut cfg = TrainConfig::from_kv(&read_kv(config)?)?;
    if let Some(steps) = steps {
        cfg.steps = steps;
    }
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("bad seed {s:?}"))))
        .collect::<Result<_, _>>()?;
    let rows = ablate_guidance(&cfg, &seeds)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("ablation.csv"), &csv)?;
    }
    print!("{csv}");
    let wins = rows.iter().filter(|r| r.guided_wins()).count();
    eprintln!("guided >= uniform on {wins} of {} seeds ({} steps each)", rows.len(), cfg.steps);
    Ok(())
}

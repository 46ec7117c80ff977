//! Momentum SGD on freshly generated scenes, plus held-out evaluation.
//!
//! Training sample `i` of step `s` uses scene seed `(seed << 32) | (s·batch + i)`;
//! held-out sample `i` uses `(seed << 32) | 2³¹ | i`, so the two never meet.

use std::fmt::Write as _;

use crate::config::KvConfig;
use crate::decoder::Guidance;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{existence_accuracy, mask_iou, match_lanes, F1Score, LaneMasks, MatchCounts, THRESHOLD};
use crate::model::{LaneModel, ModelConfig};
use crate::params::Parameterized;
use crate::synth::{generate_scene, LaneSample, SceneConfig};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,focal,seg_bce,exist_bce,total,f1,precision,recall";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_samples: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 300,
            batch: 4,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_samples: 32,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            seed: kv.get_or("seed", d.seed)?,
            steps: kv.get_or("train.steps", d.steps)?,
            batch: kv.get_or("train.batch", d.batch)?,
            lr: kv.get_or("train.lr", d.lr)?,
            momentum: kv.get_or("train.momentum", d.momentum)?,
            weight_decay: kv.get_or("train.weight_decay", d.weight_decay)?,
            eval_samples: kv.get_or("train.eval_samples", d.eval_samples)?,
            scene: SceneConfig::from_kv(kv)?,
            model: ModelConfig::from_kv(kv)?,
        };
        cfg.validate()?;
        let known = cfg.to_kv();
        if let Some(key) = kv.keys().find(|k| known.raw(k).is_none()) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seed", self.seed);
        kv.set("train.steps", self.steps);
        kv.set("train.batch", self.batch);
        kv.set("train.lr", self.lr);
        kv.set("train.momentum", self.momentum);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.eval_samples", self.eval_samples);
        self.scene.write_kv(&mut kv);
        self.model.write_kv(&mut kv);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        if self.seed >= 1 << 31 {
            return Err(Error::Config("seed must be below 2^31".into()));
        }
        if self.scene.lanes != self.model.lanes {
            return Err(Error::Config(format!(
                "scene.lanes = {} but model.lanes = {}",
                self.scene.lanes, self.model.lanes
            )));
        }
        self.model.backbone.feature_extent(self.scene.height, self.scene.width)?;
        self.scene.validate()?;
        self.model.validate()
    }

    pub fn train_seed(&self, step: usize, index: usize) -> u64 {
        (self.seed << 32) | ((step * self.batch + index) as u64 & 0x7fff_ffff)
    }

    pub fn eval_seed(&self, index: usize) -> u64 {
        (self.seed << 32) | (1 << 31) | index as u64
    }

    pub fn eval_set(&self) -> Result<Vec<LaneSample>> {
        (0..self.eval_samples)
            .map(|i| generate_scene(self.eval_seed(i), &self.scene))
            .collect()
    }
}

/// `v ← μv + g + λθ`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients accumulated on the model's
    /// leaves, leaving fresh leaves with no gradient in their place.
    pub fn step<M: Parameterized>(&mut self, model: &mut M) -> Result<()> {
        let params = model.params();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        let mut next = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(&mut self.velocity) {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut data = p.to_vec();
            for ((x, vel), g) in data.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = self.momentum * *vel + g + self.weight_decay * *x;
                *x -= self.lr * *vel;
            }
            next.push(Tensor::param(p.shape(), data, p.precision())?);
        }
        model.replace_params(&next);
        Ok(())
    }
}

/// What one optimizer step saw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub losses: LossBreakdown,
    /// Batch F1; `None` when the batch held no lane.
    pub score: Option<F1Score>,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let s = self.score.unwrap_or_default();
        let l = &self.losses;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, l.focal, l.seg_bce, l.exist_bce, l.total, s.f1, s.precision, s.recall
        )
    }
}

/// Predicted masks gated by predicted existence, both at [`THRESHOLD`].
pub fn predicted_masks(seg: &Tensor, exist: &Tensor) -> Result<LaneMasks> {
    let present: Vec<bool> = exist.data().iter().map(|&e| e > THRESHOLD).collect();
    LaneMasks::from_probs(seg, THRESHOLD)?.gated(&present)
}

/// Trains a fresh model; `on_step` sees every step as it finishes.
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<(LaneModel, Vec<StepLog>)> {
    cfg.validate()?;
    let mut model = LaneModel::init(cfg.seed, cfg.model.clone())?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut parts = Vec::with_capacity(cfg.batch);
        let mut counts = MatchCounts::default();
        for i in 0..cfg.batch {
            let sample = generate_scene(cfg.train_seed(step, i), &cfg.scene)?;
            let out = model.forward(&sample.image)?;
            let (loss, breakdown) = total_loss(&out, &model.targets(&sample)?)?;
            loss.scale(1.0 / cfg.batch as f64)?.backward()?;
            parts.push(breakdown);
            let gt = LaneMasks::from_probs(&sample.masks, THRESHOLD)?;
            counts.add(match_lanes(&predicted_masks(&out.seg, &out.exist)?, &gt, THRESHOLD)?);
        }
        opt.step(&mut model)?;
        let log = StepLog {
            step,
            losses: LossBreakdown::mean(&parts),
            score: counts.score(),
        };
        on_step(&log);
        logs.push(log);
    }
    Ok((model.detached(), logs))
}

pub fn metrics_csv(logs: &[StepLog]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

/// Per-sample predictions used by the evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct LanePrediction {
    pub sample: usize,
    pub lane: usize,
    pub exist_score: f64,
    /// Arg-max cell of the lane's start-point heatmap.
    pub start: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub score: F1Score,
    pub counts: MatchCounts,
    pub exist_accuracy: f64,
    /// Mean IoU between predicted and true masks over present lanes.
    pub mean_iou: f64,
    pub losses: LossBreakdown,
    pub predictions: Vec<LanePrediction>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let l = &self.losses;
        let s = &self.score;
        format!(
            "samples,focal,seg_bce,exist_bce,total,f1,precision,recall,exist_acc,mean_iou\n\
             {},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.samples, l.focal, l.seg_bce, l.exist_bce, l.total, s.f1, s.precision, s.recall,
            self.exist_accuracy, self.mean_iou
        )
    }

    /// `sample_id lane_id exist_score start_row start_col` lines.
    pub fn predictions_text(&self) -> String {
        let mut s = String::new();
        for p in &self.predictions {
            writeln!(s, "{} {} {:.6} {} {}", p.sample, p.lane, p.exist_score, p.start.0, p.start.1).unwrap();
        }
        s
    }
}

fn argmax_cell(gauss: &Tensor, lane: usize) -> (usize, usize) {
    let (h, w) = (gauss.shape()[1], gauss.shape()[2]);
    let plane = &gauss.data()[lane * h * w..(lane + 1) * h * w];
    let best = plane
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    (best.0 / w, best.0 % w)
}

pub fn evaluate(model: &LaneModel, samples: &[LaneSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let model = model.detached();
    let mut counts = MatchCounts::default();
    let (mut flags_pred, mut flags_true) = (Vec::new(), Vec::new());
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    let mut parts = Vec::with_capacity(samples.len());
    let mut predictions = Vec::new();
    for (index, sample) in samples.iter().enumerate() {
        let out = model.forward(&sample.image)?;
        parts.push(total_loss(&out, &model.targets(sample)?)?.1);
        let gt = LaneMasks::from_probs(&sample.masks, THRESHOLD)?;
        counts.add(match_lanes(&predicted_masks(&out.seg, &out.exist)?, &gt, THRESHOLD)?);
        let raw = LaneMasks::from_probs(&out.seg, THRESHOLD)?;
        for lane in 0..sample.lanes() {
            let score = out.exist.data()[lane];
            flags_pred.push(score > THRESHOLD);
            flags_true.push(sample.exist[lane]);
            if sample.exist[lane] {
                iou_sum += mask_iou(raw.lane(lane), gt.lane(lane));
                iou_n += 1;
            }
            predictions.push(LanePrediction {
                sample: index,
                lane,
                exist_score: score,
                start: argmax_cell(&out.gauss, lane),
            });
        }
    }
    Ok(EvalReport {
        samples: samples.len(),
        score: counts.score().unwrap_or_default(),
        counts,
        exist_accuracy: existence_accuracy(&flags_pred, &flags_true),
        mean_iou: if iou_n == 0 { 0.0 } else { iou_sum / iou_n as f64 },
        losses: LossBreakdown::mean(&parts),
        predictions,
    })
}

/// Held-out existence accuracy of both guidance arms for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub guided: f64,
    pub uniform: f64,
}

impl AblationRow {
    pub fn guided_wins(&self) -> bool {
        self.guided >= self.uniform
    }
}

pub const ABLATION_HEADER: &str = "seed,guided_exist_acc,uniform_exist_acc,guided_wins";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{}", self.seed, self.guided, self.uniform, self.guided_wins())
    }
}

/// Trains each seed twice, once per [`Guidance`] mode, with everything else
/// held fixed, and scores both on the seed's held-out set.
pub fn ablate_guidance(base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut acc = [0.0; 2];
            for (slot, guidance) in [Guidance::StartPoint, Guidance::Uniform].into_iter().enumerate() {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.model.guidance = guidance;
                let (model, _) = train(&cfg, |_| {})?;
                acc[slot] = evaluate(&model, &cfg.eval_set()?)?.exist_accuracy;
            }
            Ok(AblationRow {
                seed,
                guided: acc[0],
                uniform: acc[1],
            })
        })
        .collect()
}

//! Training objective.
//!
//! `total = 0.2 · focal(gauss) + bce(seg) + bce(exist)`.

use crate::decoder::ModelOutputs;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FOCAL_WEIGHT: f64 = 0.2;
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
/// Clamp applied to every probability before taking logs.
pub const EPS: f64 = 1e-7;

fn check_pair(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(op, format!("{:?} vs target {:?}", pred.shape(), target.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::dim(op, "empty prediction"));
    }
    Ok(())
}

/// Clamped probability and whether the clamp was active (zero gradient).
fn clamp(p: f64) -> (f64, bool) {
    if p < EPS {
        (EPS, true)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, true)
    } else {
        (p, false)
    }
}

/// Penalty-reduced focal loss on heatmaps, normalized by the number of
/// exact-one target cells (at least 1).
pub fn focal_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair("focal_loss", pred, target)?;
    let y = target.to_vec();
    let positives = y.iter().filter(|&&v| v == 1.0).count().max(1) as f64;
    let mut total = 0.0;
    for (&p, &t) in pred.data().iter().zip(&y) {
        let (p, _) = clamp(p);
        total += if t == 1.0 {
            (1.0 - p).powi(FOCAL_ALPHA) * p.ln()
        } else {
            (1.0 - t).powi(FOCAL_BETA) * p.powi(FOCAL_ALPHA) * (1.0 - p).ln()
        };
    }
    Tensor::from_op(
        "focal_loss",
        vec![],
        vec![-total / positives],
        pred.precision(),
        vec![pred.clone()],
        move |parents, _, g| {
            let scale = -g[0] / positives;
            let grad = parents[0]
                .data()
                .iter()
                .zip(&y)
                .map(|(&p, &t)| {
                    let (p, clamped) = clamp(p);
                    if clamped {
                        return 0.0;
                    }
                    let d = if t == 1.0 {
                        -2.0 * (1.0 - p) * p.ln() + (1.0 - p).powi(2) / p
                    } else {
                        (1.0 - t).powi(FOCAL_BETA) * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p))
                    };
                    scale * d
                })
                .collect();
            vec![Some(grad)]
        },
    )
}

/// Mean binary cross-entropy.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair("bce", pred, target)?;
    let y = target.to_vec();
    let n = y.len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(&y)
        .map(|(&p, &t)| {
            let (p, _) = clamp(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Tensor::from_op(
        "bce",
        vec![],
        vec![total / n],
        pred.precision(),
        vec![pred.clone()],
        move |parents, _, g| {
            let grad = parents[0]
                .data()
                .iter()
                .zip(&y)
                .map(|(&p, &t)| {
                    let (p, clamped) = clamp(p);
                    if clamped {
                        0.0
                    } else {
                        g[0] / n * ((1.0 - t) / (1.0 - p) - t / p)
                    }
                })
                .collect();
            vec![Some(grad)]
        },
    )
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// [`focal_loss`] evaluated on logits `z` with `p = sigmoid(z)`. Equal to it
/// wherever `p` lies inside the clamp, and its gradient never vanishes on
/// confidently wrong cells.
pub fn focal_loss_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair("focal_loss", logits, target)?;
    let y = target.to_vec();
    let positives = y.iter().filter(|&&v| v == 1.0).count().max(1) as f64;
    let mut total = 0.0;
    for (&z, &t) in logits.data().iter().zip(&y) {
        let p = crate::tensor::sigmoid(z);
        total += if t == 1.0 {
            -(1.0 - p).powi(FOCAL_ALPHA) * softplus(-z)
        } else {
            -(1.0 - t).powi(FOCAL_BETA) * p.powi(FOCAL_ALPHA) * softplus(z)
        };
    }
    Tensor::from_op(
        "focal_loss",
        vec![],
        vec![-total / positives],
        logits.precision(),
        vec![logits.clone()],
        move |parents, _, g| {
            let scale = g[0] / positives;
            let grad = parents[0]
                .data()
                .iter()
                .zip(&y)
                .map(|(&z, &t)| {
                    let p = crate::tensor::sigmoid(z);
                    let q = 1.0 - p;
                    let d = if t == 1.0 {
                        -2.0 * p * q * q * softplus(-z) - q * q * q
                    } else {
                        (1.0 - t).powi(FOCAL_BETA) * (2.0 * p * p * q * softplus(z) + p * p * p)
                    };
                    scale * d
                })
                .collect();
            vec![Some(grad)]
        },
    )
}

/// [`bce`] evaluated on logits.
pub fn bce_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair("bce", logits, target)?;
    let y = target.to_vec();
    let n = y.len() as f64;
    let total: f64 = logits.data().iter().zip(&y).map(|(&z, &t)| softplus(z) - t * z).sum();
    Tensor::from_op(
        "bce",
        vec![],
        vec![total / n],
        logits.precision(),
        vec![logits.clone()],
        move |parents, _, g| {
            let grad = parents[0]
                .data()
                .iter()
                .zip(&y)
                .map(|(&z, &t)| g[0] / n * (crate::tensor::sigmoid(z) - t))
                .collect();
            vec![Some(grad)]
        },
    )
}

/// Loss component values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub focal: f64,
    pub seg_bce: f64,
    pub exist_bce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(focal: f64, seg_bce: f64, exist_bce: f64) -> Self {
        LossBreakdown {
            focal,
            seg_bce,
            exist_bce,
            total: FOCAL_WEIGHT * focal + seg_bce + exist_bce,
        }
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown::from_components(sum(|b| b.focal), sum(|b| b.seg_bce), sum(|b| b.exist_bce))
    }
}

/// Supervision for one sample, shaped like [`ModelOutputs`].
#[derive(Debug, Clone)]
pub struct Targets {
    pub seg: Tensor,
    pub gauss: Tensor,
    pub exist: Tensor,
}

/// The weighted objective as a differentiable scalar plus its breakdown,
/// computed from the logits in `outputs`.
pub fn total_loss(outputs: &ModelOutputs, targets: &Targets) -> Result<(Tensor, LossBreakdown)> {
    let focal = focal_loss_logits(&outputs.gauss_logits, &targets.gauss)?;
    let seg = bce_logits(&outputs.seg_logits, &targets.seg)?;
    let exist = bce_logits(&outputs.exist_logits, &targets.exist)?;
    let total = focal.scale(FOCAL_WEIGHT)?.add(&seg)?.add(&exist)?;
    let breakdown = LossBreakdown::from_components(focal.item(), seg.item(), exist.item());
    Ok((total, breakdown))
}

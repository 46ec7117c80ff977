//! Dense reference for the sparse stages: full `HW × HW` attention with
//! every pair outside the atrous pattern masked out.

use super::schedule::{atrous_schedule, AtrousSchedule};
use super::stage::{embed, merge_heads, residual_block, split_heads, StageParams};
use super::{AttnConfig, StageAxis};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest `H·W` the oracle will materialize.
pub const ORACLE_MAX_POSITIONS: usize = 4096;

/// For every (query, key) position pair of an `H × W` map, flattened
/// row-major, the number of bands of `schedule` that put the key in front
/// of the query. Keys in a different column slice of width `slice_width`
/// get zero.
pub fn atrous_multiplicity(h: usize, w: usize, schedule: &AtrousSchedule, slice_width: usize) -> Vec<u32> {
    let n = h * w;
    let mut m = vec![0u32; n * n];
    for r in 0..h {
        for c in 0..w {
            let q = r * w + c;
            for r2 in 0..h {
                let k = schedule.multiplicity(r, r2) as u32;
                if k == 0 {
                    continue;
                }
                for c2 in 0..w {
                    if c2 / slice_width == c / slice_width {
                        m[q * n + r2 * w + c2] = k;
                    }
                }
            }
        }
    }
    m
}

fn oracle_rows(x: &Tensor, params: &StageParams, heads: usize, density: usize, slice_width: usize) -> Result<Tensor> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = h * w;
    let d = c / heads;
    let schedule = atrous_schedule(h, density)?;
    let emb = embed(x, params)?;
    let flat = |t: &Tensor| t.reshape(&[1, n, c]);
    let qh = split_heads(&flat(&emb.q)?, heads)?;
    let kh = split_heads(&flat(&emb.k)?, heads)?;
    let vh = split_heads(&flat(&emb.v)?, heads)?;

    let mult = atrous_multiplicity(h, w, &schedule, slice_width);
    let mut logits = qh.matmul_t(&kh)?.scale(1.0 / (d as f64).sqrt())?;
    // a key reached through k bands carries k copies of its probability mass
    if mult.iter().any(|&k| k > 1) {
        let bias: Vec<f64> = (0..heads)
            .flat_map(|_| mult.iter().map(|&k| if k > 1 { (k as f64).ln() } else { 0.0 }))
            .collect();
        logits = logits.add(&Tensor::new(logits.shape(), bias, x.precision())?)?;
    }
    let mask: Vec<bool> = (0..heads).flat_map(|_| mult.iter().map(|&k| k > 0)).collect();
    let affinity = logits.softmax_masked(Some(&mask))?;
    let attended = merge_heads(&affinity.matmul(&vh)?, heads, 1)?.reshape(&[h, w, c])?;
    residual_block(x, &attended, params)
}

/// Dense masked evaluation of one stage; must agree with
/// [`attention_stage`](super::attention_stage) for the same config.
pub fn dense_masked_oracle(f: &Tensor, params: &StageParams, cfg: &AttnConfig) -> Result<Tensor> {
    let (h, w) = cfg.validate(f, params)?;
    if h * w > ORACLE_MAX_POSITIONS {
        return Err(Error::OracleTooLarge(h * w));
    }
    match cfg.stage_axis {
        StageAxis::Row => oracle_rows(f, params, cfg.heads, cfg.density, cfg.slice.map_or(w, |s| s.1)),
        StageAxis::Column => {
            let t = f.transpose_spatial()?;
            let out = oracle_rows(&t, params, cfg.heads, cfg.density, cfg.slice.map_or(h, |s| s.0))?;
            out.transpose_spatial()
        }
    }
}

/// Dense reference for the full two-stage block (global when `cfg.slice` is
/// `None`).
pub fn dense_oracle_two_stage(
    f: &Tensor,
    params_row: &StageParams,
    params_col: &StageParams,
    cfg: &AttnConfig,
) -> Result<Tensor> {
    let rows = dense_masked_oracle(f, params_row, &cfg.with_axis(StageAxis::Row))?;
    dense_masked_oracle(&rows, params_col, &cfg.with_axis(StageAxis::Column))
}

//! One attention stage: embeddings, band-gathered multi-head affinity and
//! the residual/norm/MLP block.

use super::gather::{band_gather_with, BandFault};
use super::schedule::atrous_schedule;
use super::{AttnConfig, StageAxis};
use crate::error::Result;
use crate::init::Initializer;
use crate::params::{join, Parameterized};
use crate::tensor::{Precision, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Init gain of the value projection and the last MLP layer, so each
/// residual branch starts small next to its input.
pub(crate) const BRANCH_GAIN: f64 = 0.1;

/// Learned weights of one stage. Projection kernels are `C_out × C_in`
/// (1×1 convolutions over a channels-last map).
#[derive(Debug, Clone)]
pub struct StageParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `2C × C`
    pub fc1: Tensor,
    pub b1: Tensor,
    /// `C × 2C`
    pub fc2: Tensor,
    pub b2: Tensor,
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
}

impl StageParams {
    pub fn init(init: &mut Initializer, channels: usize) -> Result<Self> {
        let c = channels;
        let hidden = 2 * c;
        Ok(StageParams {
            wq: init.fan_in(&[c, c], c, 1.0)?,
            wk: init.fan_in(&[c, c], c, 1.0)?,
            wv: init.fan_in(&[c, c], c, BRANCH_GAIN)?,
            fc1: init.fan_in(&[hidden, c], c, 2f64.sqrt())?,
            b1: init.zeros(&[hidden])?,
            fc2: init.fan_in(&[c, hidden], hidden, BRANCH_GAIN)?,
            b2: init.zeros(&[c])?,
            norm1_gamma: init.ones(&[c])?,
            norm1_beta: init.zeros(&[c])?,
            norm2_gamma: init.ones(&[c])?,
            norm2_beta: init.zeros(&[c])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }
}

impl Parameterized for StageParams {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        f(join(prefix, "fc1"), &mut self.fc1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "fc2"), &mut self.fc2);
        f(join(prefix, "b2"), &mut self.b2);
        f(join(prefix, "norm1_gamma"), &mut self.norm1_gamma);
        f(join(prefix, "norm1_beta"), &mut self.norm1_beta);
        f(join(prefix, "norm2_gamma"), &mut self.norm2_gamma);
        f(join(prefix, "norm2_beta"), &mut self.norm2_beta);
    }
}

/// Knobs that never change the math of a correct run.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageOptions {
    /// Value written into the placeholder rows around the key/value
    /// embeddings. Masked out, so any finite value gives the same output.
    pub pad_value: f64,
    #[doc(hidden)]
    pub fault: Option<BandFault>,
}

/// What an instrumented stage run observed.
#[derive(Debug, Clone, Default)]
pub struct StageTrace {
    /// Query·key dot products evaluated (one per query/key position pair;
    /// the per-head partial products of a pair count once).
    pub dot_products: u64,
    /// Per-slice affinities, each `N × H × w × (2J+1)·w` in the stage's own
    /// (possibly transposed) frame.
    pub affinity: Vec<Tensor>,
    /// Validity mask matching each affinity entry's key position.
    pub valid: Vec<Vec<bool>>,
}

impl StageTrace {
    /// Affinity stacked over slices: `N × H × S × w × (2J+1)·w`.
    pub fn affinity_tensor(&self) -> Result<Tensor> {
        let parts = self
            .affinity
            .iter()
            .map(|a| {
                let s = a.shape();
                a.reshape(&[s[0], s[1], 1, s[2], s[3]])
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts, 2)
    }
}

/// Fixed sinusoidal encoding over the flattened spatial index
/// `pos = row * W + col`: channel `2k` holds `sin(pos / 10000^(2k/C))`,
/// channel `2k + 1` the matching cosine.
pub fn positional_encoding(h: usize, w: usize, c: usize, precision: Precision) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * c);
    for pos in 0..h * w {
        for ch in 0..c {
            let k = (ch / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(k as f64 / c as f64);
            data.push(if ch % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[h, w, c], data, precision)
}

/// Queries, keys and values of one stage, all `H × W × C`.
pub(crate) struct Embeddings {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

pub(crate) fn embed(x: &Tensor, params: &StageParams) -> Result<Embeddings> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pos = positional_encoding(h, w, c, x.precision())?;
    let with_pos = x.add(&pos)?.reshape(&[h * w, c])?;
    let flat = x.reshape(&[h * w, c])?;
    Ok(Embeddings {
        q: with_pos.matmul_t(&params.wq)?.reshape(&[h, w, c])?,
        k: with_pos.matmul_t(&params.wk)?.reshape(&[h, w, c])?,
        v: flat.matmul_t(&params.wv)?.reshape(&[h, w, c])?,
    })
}

/// `Norm(I + MLP(I))` with `I = Norm(x + attended)`.
pub(crate) fn residual_block(x: &Tensor, attended: &Tensor, params: &StageParams) -> Result<Tensor> {
    let inter = x
        .add(attended)?
        .layer_norm(&params.norm1_gamma, &params.norm1_beta, NORM_EPS)?;
    let hidden = inter.matmul_t(&params.fc1)?.add_bias(&params.b1)?.relu()?;
    let mlp = hidden.matmul_t(&params.fc2)?.add_bias(&params.b2)?;
    inter
        .add(&mlp)?
        .layer_norm(&params.norm2_gamma, &params.norm2_beta, NORM_EPS)
}

/// Splits `H × w × C` into heads: `(N·H) × w × d`.
pub(crate) fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c / heads;
    x.reshape(&[h, w, heads, d])?
        .permute(&[2, 0, 1, 3])?
        .reshape(&[heads * h, w, d])
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads(x: &Tensor, heads: usize, h: usize) -> Result<Tensor> {
    let (w, d) = (x.shape()[1], x.shape()[2]);
    x.reshape(&[heads, h, w, d])?
        .permute(&[1, 2, 0, 3])?
        .reshape(&[h, w, heads * d])
}

/// Runs the stage with rows as the sampled axis on an `H × W × C` map,
/// attending within column slices of width `slice_width`.
fn run_rows(
    x: &Tensor,
    params: &StageParams,
    heads: usize,
    density: usize,
    slice_width: usize,
    options: &StageOptions,
) -> Result<(Tensor, StageTrace)> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c / heads;
    let schedule = atrous_schedule(h, density)?;
    let emb = embed(x, params)?;
    let k_pad = emb.k.pad_axis(0, h, h, options.pad_value)?;
    let v_pad = emb.v.pad_axis(0, h, h, options.pad_value)?;
    let scale = 1.0 / (d as f64).sqrt();

    let mut trace = StageTrace::default();
    let mut outs = Vec::with_capacity(w / slice_width);
    for s in 0..w / slice_width {
        let start = s * slice_width;
        let q = emb.q.narrow(1, start, slice_width)?;
        let keys = band_gather_with(&k_pad.narrow(1, start, slice_width)?, &schedule, options.fault)?;
        let values = band_gather_with(&v_pad.narrow(1, start, slice_width)?, &schedule, options.fault)?;
        let l = keys.bands.shape()[1];

        let qh = split_heads(&q, heads)?;
        let kh = split_heads(&keys.bands, heads)?;
        let vh = split_heads(&values.bands, heads)?;
        let logits = qh.matmul_t(&kh)?.scale(scale)?;
        trace.dot_products += (logits.numel() / heads) as u64;

        // the band mask depends only on (row, key); repeat it per head and query
        let mut mask = Vec::with_capacity(logits.numel());
        for _ in 0..heads {
            for r in 0..h {
                let row = &keys.valid[r * l..(r + 1) * l];
                for _ in 0..slice_width {
                    mask.extend_from_slice(row);
                }
            }
        }
        let affinity = logits.softmax_masked(Some(&mask))?;
        let attended = affinity.matmul(&vh)?;
        outs.push(merge_heads(&attended, heads, h)?);
        trace.affinity.push(affinity.reshape(&[heads, h, slice_width, l])?);
        trace.valid.push(mask);
    }
    let attended = if outs.len() == 1 {
        outs.pop().unwrap()
    } else {
        Tensor::concat(&outs, 1)?
    };
    Ok((residual_block(x, &attended, params)?, trace))
}

/// One stage on an `H × W × C` map. A column stage transposes the spatial
/// axes, runs the row stage, and transposes back.
pub fn attention_stage(f: &Tensor, params: &StageParams, cfg: &AttnConfig) -> Result<Tensor> {
    Ok(attention_stage_traced(f, params, cfg, &StageOptions::default())?.0)
}

pub fn attention_stage_traced(
    f: &Tensor,
    params: &StageParams,
    cfg: &AttnConfig,
    options: &StageOptions,
) -> Result<(Tensor, StageTrace)> {
    let (h, w) = cfg.validate(f, params)?;
    match cfg.stage_axis {
        StageAxis::Row => {
            let width = cfg.slice.map_or(w, |(_, sc)| sc);
            run_rows(f, params, cfg.heads, cfg.density, width, options)
        }
        StageAxis::Column => {
            let width = cfg.slice.map_or(h, |(sr, _)| sr);
            let (out, trace) = run_rows(&f.transpose_spatial()?, params, cfg.heads, cfg.density, width, options)?;
            Ok((out.transpose_spatial()?, trace))
        }
    }
}

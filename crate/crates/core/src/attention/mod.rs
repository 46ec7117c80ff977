//! Atrous row/column sparse attention.
//!
//! Every query row attends to its own row plus the rows at a geometric ladder
//! of distances above and below it ([`atrous_schedule`]). Keys and values are
//! built by gathering those rows out of a zero-padded embedding and laying
//! them side by side ([`band_gather`]), so a stage costs
//! `H·W·(2J+1)·W` query·key products instead of `(H·W)²`. A second stage
//! repeats the process on the transposed map so information also travels
//! along columns. The local variant restricts every stage to rectangular
//! slices of the map.

mod complexity;
mod gather;
mod oracle;
mod schedule;
mod stage;

pub use complexity::{dot_count, kv_positions, AttnMode};
pub use gather::{band_gather, BandGather};
#[doc(hidden)]
pub use gather::{band_gather_with, BandFault};
pub use oracle::{atrous_multiplicity, dense_masked_oracle, dense_oracle_two_stage, ORACLE_MAX_POSITIONS};
pub use schedule::{atrous_schedule, AtrousSchedule};
pub use stage::{
    attention_stage, attention_stage_traced, positional_encoding, StageOptions, StageParams, StageTrace,
};

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::params::{join, Parameterized};
use crate::tensor::Tensor;

/// Which spatial axis a stage samples along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageAxis {
    /// Query rows look at rows `r ± d_j` (the map as given).
    #[default]
    Row,
    /// The transposed equivalent: query columns look at columns `c ± d_j`.
    Column,
}

/// Hyperparameters of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub channels: usize,
    pub heads: usize,
    /// Number of ladder rungs `J`.
    pub density: usize,
    /// Slice extent `(rows, cols)` for the local variant.
    pub slice: Option<(usize, usize)>,
    pub stage_axis: StageAxis,
}

impl AttnConfig {
    pub fn global(channels: usize, heads: usize, density: usize) -> Self {
        AttnConfig {
            channels,
            heads,
            density,
            slice: None,
            stage_axis: StageAxis::Row,
        }
    }

    pub fn local(channels: usize, heads: usize, density: usize, slice: (usize, usize)) -> Self {
        AttnConfig {
            slice: Some(slice),
            ..Self::global(channels, heads, density)
        }
    }

    pub fn with_axis(self, stage_axis: StageAxis) -> Self {
        AttnConfig { stage_axis, ..self }
    }

    /// Checks the config against a map, independent of any parameters.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if let Some((sr, sc)) = self.slice {
            if sr == 0 || sc == 0 || h % sr != 0 || w % sc != 0 {
                return Err(Error::dim(
                    "atrous attention",
                    format!("slice {sr}×{sc} does not tile a {h}×{w} map"),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn validate(&self, f: &Tensor, params: &StageParams) -> Result<(usize, usize)> {
        let (h, w, c) = match *f.shape() {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::dim("atrous attention", format!("expected H×W×C, got {:?}", f.shape()))),
        };
        if c != self.channels || params.channels() != c {
            return Err(Error::Config(format!(
                "map has {c} channels, config {} and parameters {}",
                self.channels,
                params.channels()
            )));
        }
        self.check_extent(h, w)?;
        Ok((h, w))
    }
}

fn two_stage(
    f: &Tensor,
    params_row: &StageParams,
    params_col: &StageParams,
    cfg: &AttnConfig,
    options: &StageOptions,
) -> Result<(Tensor, [StageTrace; 2])> {
    let (rows, t1) = attention_stage_traced(f, params_row, &cfg.with_axis(StageAxis::Row), options)?;
    let (out, t2) = attention_stage_traced(&rows, params_col, &cfg.with_axis(StageAxis::Column), options)?;
    Ok((out, [t1, t2]))
}

/// Row stage on the whole map, then an independently parameterized column
/// stage. Any slice in `cfg` is ignored.
pub fn global_atrousformer(
    f: &Tensor,
    params_row: &StageParams,
    params_col: &StageParams,
    cfg: &AttnConfig,
) -> Result<Tensor> {
    let cfg = AttnConfig { slice: None, ..*cfg };
    Ok(two_stage(f, params_row, params_col, &cfg, &StageOptions::default())?.0)
}

/// The two-stage block restricted to `cfg.slice`: the row stage attends
/// within column slices of width `s_c`, the column stage within row slices
/// of height `s_r`.
pub fn local_atrousformer(
    f: &Tensor,
    params_row: &StageParams,
    params_col: &StageParams,
    cfg: &AttnConfig,
) -> Result<Tensor> {
    if cfg.slice.is_none() {
        return Err(Error::Config("local attention needs a slice size".into()));
    }
    Ok(two_stage(f, params_row, params_col, cfg, &StageOptions::default())?.0)
}

/// A two-stage block with its own parameters; global when `cfg.slice` is
/// `None`, local otherwise.
#[derive(Debug, Clone)]
pub struct AtrousFormer {
    pub cfg: AttnConfig,
    pub row: StageParams,
    pub col: StageParams,
}

impl AtrousFormer {
    pub fn init(init: &mut Initializer, cfg: AttnConfig) -> Result<Self> {
        cfg.check_extent(cfg.slice.map_or(1, |s| s.0), cfg.slice.map_or(1, |s| s.1))?;
        Ok(AtrousFormer {
            cfg,
            row: StageParams::init(init, cfg.channels)?,
            col: StageParams::init(init, cfg.channels)?,
        })
    }

    /// `H × W × C -> H × W × C`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(f, &StageOptions::default())?.0)
    }

    pub fn forward_traced(&self, f: &Tensor, options: &StageOptions) -> Result<(Tensor, [StageTrace; 2])> {
        two_stage(f, &self.row, &self.col, &self.cfg, options)
    }

    /// The dense masked reference for the same block.
    pub fn oracle(&self, f: &Tensor) -> Result<Tensor> {
        dense_oracle_two_stage(f, &self.row, &self.col, &self.cfg)
    }
}

impl Parameterized for AtrousFormer {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.row.visit_mut(&join(prefix, "row"), f);
        self.col.visit_mut(&join(prefix, "col"), f);
    }
}

//! The assembled lane model: backbone, global attention, decoder.

use crate::attention::{AtrousFormer, AttnConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{parse_pair, KvConfig};
use crate::decoder::{decode, make_gaussian_targets, DecoderParams, Guidance, ModelOutputs, TARGET_SIGMA};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::losses::Targets;
use crate::params::{join, Parameterized};
use crate::synth::LaneSample;
use crate::tensor::{Precision, Tensor};

const INPUT_MEAN: f64 = 0.45;
const INPUT_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub global_heads: usize,
    pub global_density: usize,
    /// `false` skips the global block (identity).
    pub global_attention: bool,
    pub lanes: usize,
    pub guidance: Guidance,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            global_heads: 8,
            global_density: 2,
            global_attention: true,
            lanes: 2,
            guidance: Guidance::StartPoint,
            precision: Precision::Double,
        }
    }
}

fn parse_flag(kv: &KvConfig, key: &str, default: bool) -> Result<bool> {
    match kv.raw(key) {
        None => Ok(default),
        Some("true" | "on" | "1") => Ok(true),
        Some("false" | "off" | "0") => Ok(false),
        Some(v) => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<const N: usize>(kv: &KvConfig, key: &str, default: [usize; N]) -> Result<[usize; N]> {
    let Some(raw) = kv.raw(key) else { return Ok(default) };
    let values: Vec<usize> = raw
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("{key}: bad entry {v:?}"))))
        .collect::<Result<_>>()?;
    values
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

fn list_string(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Reads the `model.*` keys of a config, defaulting the rest.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let b = &d.backbone;
        let backbone = BackboneConfig {
            in_channels: 3,
            stage_channels: parse_list(kv, "model.stage_channels", b.stage_channels)?,
            stage_heads: parse_list(kv, "model.stage_heads", b.stage_heads)?,
            blocks_per_stage: kv.get_or("model.blocks_per_stage", b.blocks_per_stage)?,
            slice: match kv.raw("model.slice") {
                Some(s) => parse_pair(s)?,
                None => b.slice,
            },
            density: kv.get_or("model.density", b.density)?,
            compressed: kv.get_or("model.compressed", b.compressed)?,
            local_attention: parse_flag(kv, "model.local_attention", b.local_attention)?,
        };
        let guidance = match kv.raw("model.guidance") {
            Some(g) => Guidance::parse(g).ok_or_else(|| Error::Config(format!("model.guidance: unknown value {g:?}")))?,
            None => d.guidance,
        };
        let precision = match kv.raw("model.precision") {
            Some(p) => Precision::parse(p).ok_or_else(|| Error::Config(format!("model.precision: unknown value {p:?}")))?,
            None => d.precision,
        };
        let cfg = ModelConfig {
            backbone,
            global_heads: kv.get_or("model.global_heads", d.global_heads)?,
            global_density: kv.get_or("model.global_density", d.global_density)?,
            global_attention: parse_flag(kv, "model.global_attention", d.global_attention)?,
            lanes: kv.get_or("model.lanes", d.lanes)?,
            guidance,
            precision,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        let b = &self.backbone;
        kv.set("model.stage_channels", list_string(&b.stage_channels));
        kv.set("model.stage_heads", list_string(&b.stage_heads));
        kv.set("model.blocks_per_stage", b.blocks_per_stage);
        kv.set("model.slice", format!("{},{}", b.slice.0, b.slice.1));
        kv.set("model.density", b.density);
        kv.set("model.compressed", b.compressed);
        kv.set("model.local_attention", b.local_attention);
        kv.set("model.global_heads", self.global_heads);
        kv.set("model.global_density", self.global_density);
        kv.set("model.global_attention", self.global_attention);
        kv.set("model.lanes", self.lanes);
        kv.set("model.guidance", self.guidance.name());
        kv.set("model.precision", self.precision);
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.lanes == 0 {
            return Err(Error::Config("model.lanes must be positive".into()));
        }
        if self.global_attention {
            AttnConfig::global(self.backbone.compressed, self.global_heads, self.global_density).check_extent(1, 1)?;
        }
        Ok(())
    }

    fn global_cfg(&self) -> AttnConfig {
        AttnConfig::global(self.backbone.compressed, self.global_heads, self.global_density)
    }
}

#[derive(Debug, Clone)]
pub struct LaneModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub global: Option<AtrousFormer>,
    pub decoder: DecoderParams,
}

impl LaneModel {
    pub fn init(seed: u64, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(seed, cfg.precision);
        let backbone = Backbone::init(&mut init, cfg.backbone.clone())?;
        let global = if cfg.global_attention {
            Some(AtrousFormer::init(&mut init, cfg.global_cfg())?)
        } else {
            None
        };
        let decoder = DecoderParams::init(&mut init, cfg.backbone.compressed, cfg.lanes)?;
        Ok(LaneModel {
            cfg,
            backbone,
            global,
            decoder,
        })
    }

    /// Global feature map `C × H/8 × W/8` of a `3 × H × W` image.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let image = if image.precision() == self.cfg.precision {
            image.clone()
        } else {
            image.with_precision(self.cfg.precision)?
        };
        // centre the [0, 1] pixels
        let offset = Tensor::full(image.shape(), -INPUT_MEAN / INPUT_SCALE, image.precision())?;
        let f = self.backbone.forward(&image.scale(1.0 / INPUT_SCALE)?.add(&offset)?)?;
        match &self.global {
            Some(block) => block.forward(&f.permute(&[1, 2, 0])?)?.permute(&[2, 0, 1]),
            None => Ok(f),
        }
    }

    pub fn forward(&self, image: &Tensor) -> Result<ModelOutputs> {
        decode(&self.features(image)?, &self.decoder, self.cfg.guidance)
    }

    /// Supervision for a generated sample, in the model's precision.
    pub fn targets(&self, sample: &LaneSample) -> Result<Targets> {
        let (lanes, h, w) = match *sample.masks.shape() {
            [n, h, w] => (n, h, w),
            _ => return Err(Error::dim("targets", format!("masks {:?}", sample.masks.shape()))),
        };
        if lanes != self.cfg.lanes {
            return Err(Error::Config(format!("sample has {lanes} lane slots, model {}", self.cfg.lanes)));
        }
        let p = self.cfg.precision;
        let exist = sample.exist.iter().map(|&e| e as u8 as f64).collect();
        Ok(Targets {
            seg: sample.masks.with_precision(p)?,
            gauss: make_gaussian_targets(&sample.starts, lanes, h / 16, w / 16, TARGET_SIGMA, p)?,
            exist: Tensor::new(&[lanes], exist, p)?,
        })
    }
}

impl Parameterized for LaneModel {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        if let Some(g) = &mut self.global {
            g.visit_mut(&join(prefix, "global"), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

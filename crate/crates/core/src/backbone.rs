//! A four-stage residual CNN reducing the image to 1/8 resolution.
//!
//! The stem and stages 1 and 2 each halve the resolution; stages 3 and 4
//! keep it and dilate their kernels by 2 and 4 instead. After stages 2 to 4
//! the stage output is enhanced by a local [`AtrousFormer`], concatenated
//! with the enhanced map and projected back to the stage width by a 1×1
//! convolution. A final 1×1 convolution compresses to `compressed` channels.
//!
//! Feature maps are `C × H × W`; the attention blocks see the channels-last
//! view.

use crate::attention::{AtrousFormer, AttnConfig};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::layers::Conv;
use crate::params::{join, Parameterized};
use crate::tensor::Tensor;

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    /// Heads of the local attention after stages 2, 3 and 4.
    pub stage_heads: [usize; 3],
    pub blocks_per_stage: usize,
    /// Local attention slice `(rows, cols)` at the 1/8 grid.
    pub slice: (usize, usize),
    pub density: usize,
    pub compressed: usize,
    /// `false` replaces every local attention block by the identity.
    pub local_attention: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: [16, 32, 64, 128],
            stage_heads: [2, 8, 16],
            blocks_per_stage: 1,
            slice: (4, 10),
            density: 2,
            compressed: 128,
            local_attention: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.compressed == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        for (i, &heads) in self.stage_heads.iter().enumerate() {
            let c = self.stage_channels[i + 1];
            if heads == 0 || c % heads != 0 {
                return Err(Error::Config(format!("stage {} has {heads} heads for {c} channels", i + 2)));
            }
        }
        Ok(())
    }

    /// Feature grid for an image, checking divisibility by 8 and the slice.
    pub fn feature_extent(&self, image_h: usize, image_w: usize) -> Result<(usize, usize)> {
        if image_h == 0 || image_w == 0 || image_h % 8 != 0 || image_w % 8 != 0 {
            return Err(Error::dim(
                "backbone",
                format!("image {image_h}×{image_w} is not a multiple of 8"),
            ));
        }
        let (h, w) = (image_h / 8, image_w / 8);
        let (sr, sc) = self.slice;
        if self.local_attention && (sr == 0 || sc == 0 || h % sr != 0 || w % sc != 0) {
            return Err(Error::dim(
                "backbone",
                format!("slice {sr}×{sc} does not tile the {h}×{w} feature grid"),
            ));
        }
        Ok((h, w))
    }
}

/// `relu(main(x) + shortcut(x))` with a two-convolution main path.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    /// `None` is the identity shortcut.
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    /// Halves the resolution: 4×4/2 entry conv, 2×2/2 projection shortcut.
    fn downsample(init: &mut Initializer, cin: usize, cout: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv::init(init, cin, cout, 4, 2, 1, 1, RELU_GAIN)?,
            conv2: Conv::same(init, cout, cout, 3, 1, 1.0)?,
            shortcut: Some(Conv::init(init, cin, cout, 2, 2, 0, 1, 1.0)?),
        })
    }

    fn dilated(init: &mut Initializer, cin: usize, cout: usize, dilation: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv::same(init, cin, cout, 3, dilation, RELU_GAIN)?,
            conv2: Conv::same(init, cout, cout, 3, dilation, 1.0)?,
            shortcut: if cin == cout {
                None
            } else {
                Some(Conv::init(init, cin, cout, 1, 1, 0, 1, 1.0)?)
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let main = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        main.add(&skip)?.relu()
    }
}

impl Parameterized for ResBlock {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// Local attention plus the concat/1×1 fusion that follows stages 2 to 4.
#[derive(Debug, Clone)]
pub struct Enhancer {
    pub attention: AtrousFormer,
    pub fuse: Conv,
}

impl Enhancer {
    /// `C × H × W -> C × H × W`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hwc = x.permute(&[1, 2, 0])?;
        let enhanced = self.attention.forward(&hwc)?.permute(&[2, 0, 1])?;
        self.fuse.forward(&Tensor::concat(&[x.clone(), enhanced], 0)?)
    }
}

impl Parameterized for Enhancer {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: Conv,
    pub stages: [Vec<ResBlock>; 4],
    /// One per stage 2..=4; empty when local attention is bypassed.
    pub enhancers: Vec<Enhancer>,
    pub compress: Conv,
}

impl Backbone {
    pub fn init(init: &mut Initializer, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels;
        let stem = Conv::init(init, cfg.in_channels, ch[0], 4, 2, 1, 1, RELU_GAIN)?;
        let mut stages: [Vec<ResBlock>; 4] = Default::default();
        for (i, stage) in stages.iter_mut().enumerate() {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            let dilation = [1, 1, 2, 4][i];
            stage.push(if i < 2 {
                ResBlock::downsample(init, cin, ch[i])?
            } else {
                ResBlock::dilated(init, cin, ch[i], dilation)?
            });
            for _ in 1..cfg.blocks_per_stage {
                stage.push(ResBlock::dilated(init, ch[i], ch[i], dilation)?);
            }
        }
        let mut enhancers = Vec::new();
        if cfg.local_attention {
            for (i, &heads) in cfg.stage_heads.iter().enumerate() {
                let c = ch[i + 1];
                enhancers.push(Enhancer {
                    attention: AtrousFormer::init(init, AttnConfig::local(c, heads, cfg.density, cfg.slice))?,
                    fuse: Conv::init(init, 2 * c, c, 1, 1, 0, 1, 1.0)?,
                });
            }
        }
        let compress = Conv::init(init, ch[3], cfg.compressed, 1, 1, 0, 1, 1.0)?;
        Ok(Backbone {
            cfg,
            stem,
            stages,
            enhancers,
            compress,
        })
    }

    /// Residual blocks of stage `index` (1-based). Stage 1 starts with the stem.
    pub fn stage_forward(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        if !(1..=4).contains(&index) {
            return Err(Error::Config(format!("stage index {index} is not in 1..=4")));
        }
        let mut y = if index == 1 {
            self.stem.forward(x)?.relu()?
        } else {
            x.clone()
        };
        for block in &self.stages[index - 1] {
            y = block.forward(&y)?;
        }
        Ok(y)
    }

    /// `in_channels × H_img × W_img -> compressed × H_img/8 × W_img/8`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = match *image.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim("backbone", format!("expected C×H×W, got {:?}", image.shape()))),
        };
        if c != self.cfg.in_channels {
            return Err(Error::dim("backbone", format!("expected {} channels, got {c}", self.cfg.in_channels)));
        }
        self.cfg.feature_extent(h, w)?;
        let mut x = image.clone();
        for index in 1..=4 {
            x = self.stage_forward(&x, index)?;
            if index >= 2 {
                if let Some(e) = self.enhancers.get(index - 2) {
                    x = e.forward(&x)?;
                }
            }
        }
        self.compress.forward(&x)
    }
}

/// Functional form of [`Backbone::forward`].
pub fn backbone_forward(image: &Tensor, backbone: &Backbone) -> Result<Tensor> {
    backbone.forward(image)
}

impl Parameterized for Backbone {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.{b}", i + 1)), f);
            }
        }
        for (i, e) in self.enhancers.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("enhance{}", i + 2)), f);
        }
        self.compress.visit_mut(&join(prefix, "compress"), f);
    }
}

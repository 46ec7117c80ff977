//! Start-point guided decoder.
//!
//! Three heads read the global feature map `F` (`C × H × W`):
//!
//! * a Gaussian head predicting, per lane identity, a heatmap of the lane's
//!   start point on the `H/2 × W/2` grid;
//! * an existence classifier that uses each lane's upsampled heatmap as a
//!   spatial attention mask over `F` before pooling;
//! * a segmentation branch producing one binary map per lane at image
//!   resolution.

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::layers::{Conv, Linear};
use crate::params::{join, Parameterized};
use crate::tensor::{PoolKind, Precision, Tensor};

/// Standard deviation, in grid cells, of the start-point target blobs.
pub const TARGET_SIGMA: f64 = 2.0;

/// Upsampling factor from the feature grid to the image.
pub const SEG_UPSAMPLE: usize = 8;

const CLS_HIDDEN: [usize; 2] = [64, 16];

/// How the existence classifier weights the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Guidance {
    /// Each lane's predicted start-point heatmap.
    #[default]
    StartPoint,
    /// A constant map of ones (no guidance).
    Uniform,
}

impl Guidance {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "start-point" | "on" | "true" => Some(Guidance::StartPoint),
            "uniform" | "off" | "false" => Some(Guidance::Uniform),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Guidance::StartPoint => "start-point",
            Guidance::Uniform => "uniform",
        }
    }
}

/// A lane's start point on some grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StartPoint {
    pub lane: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub gauss_conv: Conv,
    pub gauss_out: Conv,
    /// Shared across lanes: `2C -> 64 -> 16 -> 1`.
    pub cls: [Linear; 3],
    pub seg_conv: Conv,
}

impl DecoderParams {
    pub fn init(init: &mut Initializer, channels: usize, lanes: usize) -> Result<Self> {
        if channels == 0 || lanes == 0 {
            return Err(Error::Config("decoder needs positive channels and lanes".into()));
        }
        let mut gauss_out = Conv::init(init, channels, lanes, 1, 1, 0, 1, 1.0)?;
        let mut seg_conv = Conv::same(init, channels, lanes, 3, 1, 1.0)?;
        // start from the rare-positive prior rather than 0.5 everywhere
        gauss_out.bias = init.constant(&[lanes], (0.1f64 / 0.9).ln())?;
        seg_conv.bias = init.constant(&[lanes], -2.0)?;
        Ok(DecoderParams {
            gauss_conv: Conv::same(init, channels, channels, 3, 1, 1.0)?,
            gauss_out,
            cls: [
                Linear::init(init, 2 * channels, CLS_HIDDEN[0], std::f64::consts::SQRT_2)?,
                Linear::init(init, CLS_HIDDEN[0], CLS_HIDDEN[1], std::f64::consts::SQRT_2)?,
                Linear::init(init, CLS_HIDDEN[1], 1, 1.0)?,
            ],
            seg_conv,
        })
    }

    pub fn lanes(&self) -> usize {
        self.gauss_out.out_channels()
    }

    pub fn channels(&self) -> usize {
        self.gauss_conv.out_channels()
    }
}

impl Parameterized for DecoderParams {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gauss_conv.visit_mut(&join(prefix, "gauss_conv"), f);
        self.gauss_out.visit_mut(&join(prefix, "gauss_out"), f);
        for (i, l) in self.cls.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("cls{i}")), f);
        }
        self.seg_conv.visit_mut(&join(prefix, "seg_conv"), f);
    }
}

/// Post-sigmoid outputs of the decoder, with the logits they came from.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    /// `N × H_img × W_img`
    pub seg: Tensor,
    /// `N × H/2 × W/2`
    pub gauss: Tensor,
    /// `[N]`
    pub exist: Tensor,
    pub seg_logits: Tensor,
    pub gauss_logits: Tensor,
    pub exist_logits: Tensor,
}

fn check_features(f: &Tensor, params: &DecoderParams, op: &'static str) -> Result<(usize, usize)> {
    match *f.shape() {
        [c, h, w] if c == params.channels() => Ok((h, w)),
        _ => Err(Error::dim(
            op,
            format!("expected {}×H×W features, got {:?}", params.channels(), f.shape()),
        )),
    }
}

/// `sigmoid(conv1x1(conv3x3(maxpool2(F))))`: `N × H/2 × W/2`.
pub fn gaussian_head(f: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    gaussian_logits(f, params)?.sigmoid()
}

fn gaussian_logits(f: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    let (h, w) = check_features(f, params, "gaussian_head")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("gaussian_head", format!("odd feature extent {h}×{w}")));
    }
    let pooled = f.pool2d(PoolKind::Max, 2)?;
    params.gauss_out.forward(&params.gauss_conv.forward(&pooled)?)
}

/// Per-lane existence probability, `[N]`. Lane `i` pools `F` weighted by the
/// 2× upsampled `gauss[i]` (max and mean over space), and the shared MLP
/// scores the concatenated pair.
pub fn lane_existence(f: &Tensor, gauss: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    existence_logits(f, gauss, params)?.sigmoid()
}

fn existence_logits(f: &Tensor, gauss: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    let (h, w) = check_features(f, params, "lane_existence")?;
    let lanes = params.lanes();
    if gauss.shape() != [lanes, h / 2, w / 2] || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "lane_existence",
            format!("heatmap {:?} does not match features {:?}", gauss.shape(), f.shape()),
        ));
    }
    let upsampled = gauss.bilinear_upsample(2)?;
    let mut rows = Vec::with_capacity(lanes);
    for i in 0..lanes {
        let attended = f.mul_spatial(&upsampled.select(0, i)?)?;
        let pooled = Tensor::concat(
            &[attended.global_pool(PoolKind::Max)?, attended.global_pool(PoolKind::Avg)?],
            0,
        )?;
        rows.push(pooled.reshape(&[1, 2 * params.channels()])?);
    }
    let x = Tensor::concat(&rows, 0)?;
    let hidden = params.cls[1].forward(&params.cls[0].forward(&x)?.relu()?)?.relu()?;
    params.cls[2].forward(&hidden)?.reshape(&[lanes])
}

/// `sigmoid(conv3x3(upsample8(F)))`: `N × 8H × 8W`.
pub fn segmentation_branch(f: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    segmentation_logits(f, params)?.sigmoid()
}

fn segmentation_logits(f: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    check_features(f, params, "segmentation_branch")?;
    params.seg_conv.forward(&f.bilinear_upsample(SEG_UPSAMPLE)?)
}

/// All three heads. With [`Guidance::Uniform`] the existence classifier
/// sees a heatmap of ones; the Gaussian head is still evaluated.
pub fn decode(f: &Tensor, params: &DecoderParams, guidance: Guidance) -> Result<ModelOutputs> {
    let gauss_logits = gaussian_logits(f, params)?;
    let gauss = gauss_logits.sigmoid()?;
    let exist_logits = match guidance {
        Guidance::StartPoint => existence_logits(f, &gauss, params)?,
        Guidance::Uniform => {
            let ones = Tensor::full(gauss.shape(), 1.0, gauss.precision())?;
            existence_logits(f, &ones, params)?
        }
    };
    let seg_logits = segmentation_logits(f, params)?;
    Ok(ModelOutputs {
        seg: seg_logits.sigmoid()?,
        gauss,
        exist: exist_logits.sigmoid()?,
        seg_logits,
        gauss_logits,
        exist_logits,
    })
}

/// Unnormalized Gaussian blobs (peak 1) around each start point on an
/// `h × w` grid; lanes without a start point get an all-zero channel.
pub fn make_gaussian_targets(
    starts: &[StartPoint],
    lanes: usize,
    h: usize,
    w: usize,
    sigma: f64,
    precision: Precision,
) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let mut data = vec![0.0f64; lanes * h * w];
    for s in starts {
        if s.lane >= lanes || s.row >= h || s.col >= w {
            return Err(Error::dim(
                "make_gaussian_targets",
                format!("start {s:?} is off the {lanes}×{h}×{w} grid"),
            ));
        }
        let plane = &mut data[s.lane * h * w..(s.lane + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let dr = r as f64 - s.row as f64;
                let dc = c as f64 - s.col as f64;
                let v = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
                let cell = &mut plane[r * w + c];
                *cell = cell.max(v);
            }
        }
    }
    Tensor::new(&[lanes, h, w], data, precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(mut p: DecoderParams) -> DecoderParams {
        p.visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape(), t.precision()).unwrap());
        p
    }

    #[test]
    fn gaussian_head_shape_and_range() {
        let mut init = Initializer::new(0, Precision::Double);
        let p = DecoderParams::init(&mut init, 4, 3).unwrap();
        let f = init.sample(&[4, 6, 8]).unwrap();
        let g = gaussian_head(&f, &p).unwrap();
        assert_eq!(g.shape(), &[3, 3, 4]);
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(gaussian_head(&init.sample(&[4, 5, 8]).unwrap(), &p).is_err());
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut init = Initializer::new(1, Precision::Double);
        let p = zeroed(DecoderParams::init(&mut init, 4, 2).unwrap());
        let f = init.sample(&[4, 4, 4]).unwrap();
        assert!(gaussian_head(&f, &p).unwrap().data().iter().all(|&v| v == 0.5));
        let out = decode(&f, &p, Guidance::StartPoint).unwrap();
        assert_eq!(out.seg.shape(), &[2, 32, 32]);
        assert!(out.exist.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_evaluated_existence_score() {
        let mut init = Initializer::new(2, Precision::Double);
        let mut p = zeroed(DecoderParams::init(&mut init, 1, 1).unwrap());
        // route max + mean through one hidden unit of each layer
        let mut w0 = vec![0.0; 64 * 2];
        w0[0] = 1.0;
        w0[1] = 1.0;
        p.cls[0].weight = Tensor::from_vec(&[64, 2], w0).unwrap();
        let mut w1 = vec![0.0; 16 * 64];
        w1[0] = 1.0;
        p.cls[1].weight = Tensor::from_vec(&[16, 64], w1).unwrap();
        let mut w2 = vec![0.0; 16];
        w2[0] = 1.0;
        p.cls[2].weight = Tensor::from_vec(&[1, 16], w2).unwrap();
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gauss = Tensor::full(&[1, 1, 1], 1.0, Precision::Double).unwrap();
        let score = lane_existence(&f, &gauss, &p).unwrap().item();
        assert!((score - 1.0 / (1.0 + (-6.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn zero_heatmaps_score_identically() {
        let mut init = Initializer::new(3, Precision::Double);
        let p = DecoderParams::init(&mut init, 4, 3).unwrap();
        let f = init.sample(&[4, 4, 6]).unwrap();
        let gauss = Tensor::zeros(&[3, 2, 3], Precision::Double).unwrap();
        let s = lane_existence(&f, &gauss, &p).unwrap();
        assert_eq!(s.data()[0], s.data()[1]);
        assert_eq!(s.data()[1], s.data()[2]);
    }

    #[test]
    fn gaussian_targets() {
        let starts = [StartPoint { lane: 1, row: 2, col: 3 }];
        let t = make_gaussian_targets(&starts, 2, 5, 6, 2.0, Precision::Double).unwrap();
        let at = |l: usize, r: usize, c: usize| t.data()[(l * 5 + r) * 6 + c];
        assert_eq!(at(1, 2, 3), 1.0);
        assert!((at(1, 2, 5) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((at(1, 2, 5) - 0.60653).abs() < 1e-5);
        assert!((0..30).all(|i| t.data()[i] == 0.0));
        let off = [StartPoint { lane: 0, row: 5, col: 0 }];
        assert!(make_gaussian_targets(&off, 2, 5, 6, 2.0, Precision::Double).is_err());
    }
}

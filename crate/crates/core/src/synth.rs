//! Deterministic synthetic road scenes.
//!
//! Each lane identity owns a fixed slot at the bottom edge, ordered left to
//! right, and is present with probability `presence`. Lanes are quadratic
//! curves in the row coordinate that converge towards a shared vanishing
//! point and taper with distance. Occluders darken the image only; the
//! ground-truth masks keep the full lane.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::decoder::StartPoint;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Pixels per start-point grid cell: the 1/8 feature map pooled once more.
pub const START_GRID: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Number of lane identities (slots).
    pub lanes: usize,
    /// Most lanes drawn in one scene; 0 gives empty scenes.
    pub max_present: usize,
    /// Probability that a slot holds a lane.
    pub presence: f64,
    /// Lane width at the bottom edge, in pixels.
    pub lane_width: f64,
    /// Largest horizontal bend at the horizon, as a fraction of the width.
    pub curvature: f64,
    pub occlusion: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 160,
            lanes: 2,
            max_present: 2,
            presence: 0.7,
            lane_width: 8.0,
            curvature: 0.15,
            occlusion: 0.3,
            noise: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "scene {}×{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        if self.lanes == 0 {
            return Err(Error::Config("scene needs at least one lane slot".into()));
        }
        if !(self.lane_width >= 1.0) {
            return Err(Error::Config(format!("lane width {} is below 1 px", self.lane_width)));
        }
        for (name, p) in [("presence", self.presence), ("occlusion", self.occlusion)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} is not a probability")));
            }
        }
        if !(self.noise >= 0.0) || !(self.curvature >= 0.0) {
            return Err(Error::Config("noise and curvature must be non-negative".into()));
        }
        Ok(())
    }

    /// Reads the `scene.*` keys of a config, defaulting the rest.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = SceneConfig::default();
        let cfg = SceneConfig {
            height: kv.get_or("scene.height", d.height)?,
            width: kv.get_or("scene.width", d.width)?,
            lanes: kv.get_or("scene.lanes", d.lanes)?,
            max_present: kv.get_or("scene.max_present", d.max_present)?,
            presence: kv.get_or("scene.presence", d.presence)?,
            lane_width: kv.get_or("scene.lane_width", d.lane_width)?,
            curvature: kv.get_or("scene.curvature", d.curvature)?,
            occlusion: kv.get_or("scene.occlusion", d.occlusion)?,
            noise: kv.get_or("scene.noise", d.noise)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("scene.height", self.height);
        kv.set("scene.width", self.width);
        kv.set("scene.lanes", self.lanes);
        kv.set("scene.max_present", self.max_present);
        kv.set("scene.presence", self.presence);
        kv.set("scene.lane_width", self.lane_width);
        kv.set("scene.curvature", self.curvature);
        kv.set("scene.occlusion", self.occlusion);
        kv.set("scene.noise", self.noise);
    }
}

#[derive(Debug, Clone)]
pub struct LaneSample {
    /// `3 × H × W` in `[0, 1]`.
    pub image: Tensor,
    /// `lanes × H × W`, entries 0 or 1.
    pub masks: Tensor,
    pub exist: Vec<bool>,
    /// One per present lane, on the `H/16 × W/16` grid.
    pub starts: Vec<StartPoint>,
    /// The same start points in pixels.
    pub start_pixels: Vec<StartPoint>,
    pub seed: u64,
}

impl LaneSample {
    pub fn lanes(&self) -> usize {
        self.exist.len()
    }
}

/// Bottom-most occupied row of a `h × w` mask and the middle occupied pixel
/// of that row.
pub fn lowest_point(mask: &[f64], h: usize, w: usize) -> Option<(usize, usize)> {
    (0..h).rev().find_map(|r| {
        let cols: Vec<usize> = (0..w).filter(|&c| mask[r * w + c] > 0.5).collect();
        (!cols.is_empty()).then(|| (r, cols[(cols.len() - 1) / 2]))
    })
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<LaneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, n) = (cfg.height, cfg.width, cfg.lanes);
    let (hf, wf) = (h as f64, w as f64);

    // which slots hold a lane: at least one unless the config forbids it
    let mut present: Vec<bool> = (0..n).map(|_| rng.random_bool(cfg.presence)).collect();
    if cfg.max_present > 0 && !present.iter().any(|&p| p) {
        present[rng.random_range(0..n)] = true;
    }
    while present.iter().filter(|&&p| p).count() > cfg.max_present {
        let on: Vec<usize> = (0..n).filter(|&i| present[i]).collect();
        present[on[rng.random_range(0..on.len())]] = false;
    }

    let horizon = (hf * rng.random_range(0.2..0.35)).floor() as usize;
    let vanish_x = wf * (0.5 + rng.random_range(-0.1..0.1));
    let bend = wf * cfg.curvature * rng.random_range(-1.0..=1.0);
    let slot = wf / n as f64;

    let mut masks = vec![0.0; n * h * w];
    for (i, _) in present.iter().enumerate().filter(|(_, &p)| p) {
        let x0 = slot * (i as f64 + 0.5) + slot * rng.random_range(-0.12..0.12);
        let wobble = bend * rng.random_range(0.8..1.2);
        let plane = &mut masks[i * h * w..(i + 1) * h * w];
        for y in horizon..h {
            // s runs from 0 at the bottom edge to 1 at the horizon
            let s = (h - 1 - y) as f64 / (h - 1 - horizon).max(1) as f64;
            let x = x0 + 0.85 * (vanish_x - x0) * s + wobble * s * s;
            let half = 0.5 * cfg.lane_width * (1.0 - 0.6 * s);
            let nearest = x.floor();
            for c in 0..w {
                let centre = c as f64 + 0.5;
                if (centre - x).abs() <= half || c as f64 == nearest {
                    plane[y * w + c] = 1.0;
                }
            }
        }
    }

    let mut exist = vec![false; n];
    let mut starts = Vec::new();
    let mut start_pixels = Vec::new();
    for (i, e) in exist.iter_mut().enumerate() {
        if let Some((row, col)) = lowest_point(&masks[i * h * w..(i + 1) * h * w], h, w) {
            *e = true;
            start_pixels.push(StartPoint { lane: i, row, col });
            starts.push(StartPoint {
                lane: i,
                row: row / START_GRID,
                col: col / START_GRID,
            });
        }
    }

    // sky above the horizon, darkening asphalt below
    let mut image = vec![0.0; 3 * h * w];
    let sky = [0.55, 0.65, 0.85];
    for y in 0..h {
        for x in 0..w {
            let road = 0.3 + 0.15 * y as f64 / hf;
            for (ch, s) in sky.iter().enumerate() {
                image[(ch * h + y) * w + x] = if y < horizon { *s } else { road };
            }
        }
    }
    let paint = [0.95, 0.95, 0.85];
    for i in 0..n {
        for p in 0..h * w {
            if masks[i * h * w + p] > 0.5 {
                for (ch, v) in paint.iter().enumerate() {
                    image[ch * h * w + p] = *v;
                }
            }
        }
    }
    if rng.random_bool(cfg.occlusion) {
        let oh = rng.random_range(h / 8..=h / 4).max(1);
        let ow = rng.random_range(w / 10..=w / 4).max(1);
        let top = rng.random_range(horizon..h - oh + 1);
        let left = rng.random_range(0..w - ow + 1);
        let tint = [0.1, 0.1, 0.12];
        for y in top..top + oh {
            for x in left..left + ow {
                for (ch, v) in tint.iter().enumerate() {
                    image[(ch * h + y) * w + x] = *v;
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut image {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    Ok(LaneSample {
        image: Tensor::new(&[3, h, w], image, Precision::Double)?,
        masks: Tensor::new(&[n, h, w], masks, Precision::Double)?,
        exist,
        starts,
        start_pixels,
        seed,
    })
}

const META: &str = "meta";

/// Writes `image.tensor`, `masks.tensor` and `meta` into `dir`.
pub fn save_sample(dir: &Path, sample: &LaneSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sample.image.save_text(dir.join("image.tensor"))?;
    sample.masks.save_text(dir.join("masks.tensor"))?;
    let mut meta = format!("seed {}\nexist", sample.seed);
    for &e in &sample.exist {
        write!(meta, " {}", e as u8).unwrap();
    }
    meta.push_str("\nstarts");
    for s in &sample.starts {
        write!(meta, " {},{},{}", s.lane, s.row, s.col).unwrap();
    }
    meta.push('\n');
    let path = dir.join(META);
    std::fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

pub fn load_sample(dir: &Path) -> Result<LaneSample> {
    let image = Tensor::load_text(dir.join("image.tensor"))?;
    let masks = Tensor::load_text(dir.join("masks.tensor"))?;
    let path = dir.join(META);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |what: &str| Error::Format(format!("{}: bad {what} line", path.display()));
    let (mut seed, mut exist, mut starts) = (None, None, Vec::new());
    for line in text.lines() {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("seed") => seed = Some(tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("seed"))?),
            Some("exist") => {
                exist = Some(
                    tokens
                        .map(|t| match t {
                            "1" => Ok(true),
                            "0" => Ok(false),
                            _ => Err(bad("exist")),
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            Some("starts") => {
                for t in tokens {
                    let v: Vec<usize> = t.split(',').map(|x| x.parse().map_err(|_| bad("starts"))).collect::<Result<_>>()?;
                    match v[..] {
                        [lane, row, col] => starts.push(StartPoint { lane, row, col }),
                        _ => return Err(bad("starts")),
                    }
                }
            }
            _ => {}
        }
    }
    let exist = exist.ok_or_else(|| bad("exist"))?;
    if masks.rank() != 3 || masks.shape()[0] != exist.len() || image.rank() != 3 {
        return Err(Error::Format(format!("{}: tensors do not match meta", dir.display())));
    }
    let (h, w) = (masks.shape()[1], masks.shape()[2]);
    let start_pixels = (0..exist.len())
        .filter_map(|i| {
            lowest_point(&masks.data()[i * h * w..(i + 1) * h * w], h, w).map(|(row, col)| StartPoint { lane: i, row, col })
        })
        .collect();
    Ok(LaneSample {
        image,
        masks,
        exist,
        starts,
        start_pixels,
        seed: seed.ok_or_else(|| bad("seed"))?,
    })
}

/// Directory name of sample `index` inside a dataset.
pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Samples of a dataset directory, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<LaneSample>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no samples found", dir.display())));
    }
    dirs.iter().map(|d| load_sample(d)).collect()
}

//! Inpainting-mask policies for the two intents plus the naive baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_scene, SceneConfig, SceneSample};
use crate::error::{param_err, Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub stroke_width: (usize, usize),
    pub waypoints: (usize, usize),
    pub strokes: (usize, usize),
    pub rectangles: (usize, usize),
    pub coverage: (f64, f64),
    /// Dilation applied to selected instances by the creation policy.
    pub creation_margin: (usize, usize),
    pub blob_probability: f64,
    pub max_attempts: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            stroke_width: (3, 8),
            waypoints: (2, 6),
            strokes: (1, 2),
            rectangles: (0, 2),
            coverage: (0.05, 0.40),
            creation_margin: (2, 6),
            blob_probability: 0.5,
            max_attempts: 200,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (usize, usize)| a <= b;
        if !ordered(self.stroke_width) || self.stroke_width.0 == 0 {
            return Err(param_err("stroke_width range must be nonempty and positive"));
        }
        if !ordered(self.waypoints) || self.waypoints.0 < 2 {
            return Err(param_err("a stroke needs at least 2 waypoints"));
        }
        if !ordered(self.strokes) || !ordered(self.rectangles) || !ordered(self.creation_margin) {
            return Err(param_err("mask count ranges must satisfy min <= max"));
        }
        if self.strokes.1 == 0 && self.rectangles.1 == 0 {
            return Err(param_err("masks need at least one stroke or rectangle"));
        }
        let (lo, hi) = self.coverage;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(param_err("coverage range must satisfy 0 < min <= max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.blob_probability) {
            return Err(param_err("blob_probability must lie in [0, 1]"));
        }
        if self.max_attempts == 0 {
            return Err(param_err("max_attempts must be positive"));
        }
        Ok(())
    }
}

fn paint_segment(mask: &mut BinaryMask, a: (f32, f32), b: (f32, f32), radius: f32) {
    let (h, w) = (mask.height(), mask.width());
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f32 - a.0, x as f32 - a.1);
            let t = if len2 > 0.0 {
                ((py * dy + px * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ey, ex) = (py - t * dy, px - t * dx);
            if ey * ey + ex * ex <= r2 {
                mask.set(y, x, true);
            }
        }
    }
}

/// Thick random-walk strokes plus axis-aligned rectangles.
fn random_strokes<R: Rng + ?Sized>(rng: &mut R, size: usize, cfg: &MaskConfig) -> BinaryMask {
    let mut mask = BinaryMask::empty(size, size);
    let edge = (size - 1) as f32;
    let n_strokes = rng.gen_range(cfg.strokes.0..=cfg.strokes.1);
    for _ in 0..n_strokes {
        let width = rng.gen_range(cfg.stroke_width.0..=cfg.stroke_width.1) as f32;
        let n_points = rng.gen_range(cfg.waypoints.0..=cfg.waypoints.1);
        let mut p = (rng.gen_range(0.0..=edge), rng.gen_range(0.0..=edge));
        for _ in 1..n_points {
            let angle = rng.gen_range(0.0..std::f32::consts::TAU);
            let len = rng.gen_range(size as f32 / 8.0..=size as f32 / 3.0);
            let q = (
                (p.0 + len * angle.sin()).clamp(0.0, edge),
                (p.1 + len * angle.cos()).clamp(0.0, edge),
            );
            paint_segment(&mut mask, p, q, width / 2.0);
            p = q;
        }
    }
    let n_rects = rng.gen_range(cfg.rectangles.0..=cfg.rectangles.1);
    let max_side = (size * 3 / 8).max(4);
    for _ in 0..n_rects {
        let rh = rng.gen_range(4.min(size)..=max_side.min(size));
        let rw = rng.gen_range(4.min(size)..=max_side.min(size));
        let y0 = rng.gen_range(0..=size - rh);
        let x0 = rng.gen_range(0..=size - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

fn in_range(mask: &BinaryMask, cfg: &MaskConfig) -> bool {
    let c = mask.coverage();
    !mask.is_empty() && c >= cfg.coverage.0 && c <= cfg.coverage.1
}

/// Random mask restricted to background: every instance is dilated by one
/// pixel before being cut out, leaving a buffer around the foreground.
pub fn gen_removal_mask(scene: &SceneSample, seed: u64, cfg: &MaskConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exclusion = scene.foreground().dilate(1);
    for _ in 0..cfg.max_attempts {
        let mask = random_strokes(&mut rng, scene.size(), cfg).subtract(&exclusion);
        if in_range(&mask, cfg) {
            return Ok(mask);
        }
    }
    Err(Error::Generation(format!(
        "no background mask with coverage in [{}, {}] after {} attempts",
        cfg.coverage.0, cfg.coverage.1, cfg.max_attempts
    )))
}

/// The same stroke process without any foreground exclusion.
pub fn gen_naive_mask(scene: &SceneSample, seed: u64, cfg: &MaskConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = BinaryMask::empty(scene.size(), scene.size());
    for _ in 0..cfg.max_attempts {
        last = random_strokes(&mut rng, scene.size(), cfg);
        if in_range(&last, cfg) {
            break;
        }
    }
    Ok(last)
}

/// Creation-policy mask together with the indices of the instances it was
/// built around. `count` fixes how many instances are selected.
pub fn creation_mask_with_selection<R: Rng + ?Sized>(
    scene: &SceneSample,
    rng: &mut R,
    cfg: &MaskConfig,
    count: Option<usize>,
) -> Result<(BinaryMask, Vec<usize>)> {
    let n = scene.instances.len();
    if n == 0 {
        return Err(param_err("creation mask needs a scene with at least one instance"));
    }
    let k = match count {
        Some(k) if k == 0 || k > n => return Err(param_err(format!("cannot select {k} of {n} instances"))),
        Some(k) => k,
        None => rng.gen_range(1..=n),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();

    let size = scene.size();
    let margin = rng.gen_range(cfg.creation_margin.0..=cfg.creation_margin.1);
    let chosen = selected
        .iter()
        .fold(BinaryMask::empty(size, size), |acc, &i| acc.union(&scene.instances[i].mask));
    let mut mask = chosen.dilate(margin);
    if rng.gen_bool(cfg.blob_probability) {
        // a few small discs in the band just outside the mask
        let band = mask.dilate(3).subtract(&mask);
        let spots: Vec<usize> = (0..band.data().len()).filter(|&i| band.data()[i]).collect();
        for _ in 0..rng.gen_range(1..=2) {
            if let Some(&i) = spots.choose(rng) {
                let r = rng.gen_range(2..=4usize);
                let mut disc = BinaryMask::empty(size, size);
                disc.set(i / size, i % size, true);
                mask = mask.union(&disc.dilate(r));
            }
        }
    }
    Ok((mask, selected))
}

/// Mask that fully contains at least one instance.
pub fn gen_creation_mask(scene: &SceneSample, seed: u64, cfg: &MaskConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    creation_mask_with_selection(scene, &mut rng, cfg, None).map(|(m, _)| m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Creation,
    Removal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image: Tensor<f32>,
    pub inpaint_mask: BinaryMask,
    pub mode: TrainMode,
}

impl TrainExample {
    /// Checks the mode invariant against the scene the example came from.
    pub fn satisfies_policy(&self, scene: &SceneSample) -> bool {
        match self.mode {
            TrainMode::Removal => !self.inpaint_mask.intersects(&scene.foreground()),
            TrainMode::Creation => scene
                .instances
                .iter()
                .any(|inst| inst.mask.is_subset_of(&self.inpaint_mask)),
        }
    }
}

/// Draws a scene, a mode (creation or removal with equal odds) and a mask from
/// the matching policy. Scenes that cannot host the chosen mode are redrawn.
pub fn sample_train_example(
    seed: u64,
    scene_cfg: &SceneConfig,
    mask_cfg: &MaskConfig,
) -> Result<(SceneSample, TrainExample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = if rng.gen_bool(0.5) {
        TrainMode::Creation
    } else {
        TrainMode::Removal
    };
    let mut last_err = None;
    for attempt in 0..32u64 {
        let scene = generate_scene(derive_seed(seed, attempt), scene_cfg)?;
        let mask_seed = derive_seed(seed ^ 0x6d61_736b, attempt);
        let mask = match mode {
            TrainMode::Creation if scene.instances.is_empty() => continue,
            TrainMode::Creation => gen_creation_mask(&scene, mask_seed, mask_cfg),
            TrainMode::Removal => gen_removal_mask(&scene, mask_seed, mask_cfg),
        };
        match mask {
            Ok(inpaint_mask) => {
                let example = TrainExample {
                    image: scene.image.clone(),
                    inpaint_mask,
                    mode,
                };
                return Ok((scene, example));
            }
            Err(e @ Error::Generation(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Generation(format!("no usable scene for seed {seed}"))))
}

//! Procedural scenes: flat-coloured geometric objects over textured
//! backgrounds, with exact per-instance masks.

mod dataset;
mod eval;
mod masks;
mod palette;

pub use dataset::{read_dataset, write_dataset, Dataset, DATASET_FORMAT_VERSION};
pub use eval::{
    build_eval_set, build_train_set, creation_eval_sample, mixed_eval_sample, removal_eval_sample, LabeledScene,
    SampleMode,
};
pub use masks::{
    creation_mask_with_selection, gen_creation_mask, gen_naive_mask, gen_removal_mask, sample_train_example, MaskConfig,
    TrainExample, TrainMode,
};
pub use palette::{nearest_color, ColorClass, BACKGROUND_PALETTE, OBJECT_PALETTE, TEXTURE_COUNT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    /// Rasterizes the shape centred at `(cy, cx)` with half-extent `radius`.
    pub fn rasterize(self, size: usize, cy: usize, cx: usize, radius: usize) -> BinaryMask {
        let (cy, cx, r) = (cy as isize, cx as isize, radius as isize);
        BinaryMask::from_fn(size, size, |y, x| {
            let (dy, dx) = (y as isize - cy, x as isize - cx);
            match self {
                ShapeKind::Circle => dy * dy + dx * dx <= r * r,
                ShapeKind::Square => dy.abs() < r && dx.abs() < r,
                ShapeKind::Triangle => {
                    // apex on top, base on row cy + r
                    let row = dy + r;
                    (0..=2 * r).contains(&row) && 2 * dx.abs() <= row
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Gradient,
    Stripes,
    Blotch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: BinaryMask,
    pub shape: ShapeKind,
    pub color_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor<f32>,
    pub instances: Vec<Instance>,
    pub background_kind: BackgroundKind,
    /// Texture identifier in `0..TEXTURE_COUNT`.
    pub texture: usize,
    pub background_colors: [usize; 2],
}

impl SceneSample {
    pub fn size(&self) -> usize {
        self.image.height()
    }

    pub fn foreground(&self) -> BinaryMask {
        let s = self.size();
        self.instances
            .iter()
            .fold(BinaryMask::empty(s, s), |acc, inst| acc.union(&inst.mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: usize,
    pub max_radius: usize,
    /// Minimum empty gap between objects, in pixels.
    pub gap: usize,
    pub noise_std: f32,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::for_size(32)
    }
}

impl SceneConfig {
    /// Object sizes scale with the image so that 32 and 64 pixel scenes look alike.
    pub fn for_size(image_size: usize) -> Self {
        let scale = image_size as f64 / 32.0;
        Self {
            image_size,
            min_objects: 1,
            max_objects: 4,
            min_radius: ((3.0 * scale).round() as usize).max(3),
            max_radius: ((7.0 * scale).round() as usize).max(3),
            gap: 2,
            noise_std: 0.02,
            placement_attempts: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(param_err("min_objects exceeds max_objects"));
        }
        if self.min_radius < 3 || self.min_radius > self.max_radius {
            return Err(param_err("radius range must satisfy 3 <= min_radius <= max_radius"));
        }
        if self.image_size < 2 * self.max_radius + 2 {
            return Err(param_err(format!(
                "image_size {} too small for objects of radius {}",
                self.image_size, self.max_radius
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_std) {
            return Err(param_err("noise_std must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Mixes an index into a base seed so that neighbouring indices give
/// unrelated streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const MIN_INSTANCE_AREA: usize = 16;

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;

    let texture = rng.gen_range(0..TEXTURE_COUNT);
    let c1 = rng.gen_range(0..BACKGROUND_PALETTE.len());
    let mut c2 = rng.gen_range(0..BACKGROUND_PALETTE.len() - 1);
    if c2 >= c1 {
        c2 += 1;
    }
    let mut image = palette::render_background(&mut rng, size, texture, BACKGROUND_PALETTE[c1], BACKGROUND_PALETTE[c2]);
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, config.noise_std).expect("validated std");
        for v in image.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let target = rng.gen_range(config.min_objects..=config.max_objects);
    let mut occupied = BinaryMask::empty(size, size);
    let mut instances = Vec::with_capacity(target);
    for _ in 0..target {
        let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
        let color_index = rng.gen_range(0..OBJECT_PALETTE.len());
        let keep_out = occupied.dilate(config.gap);
        let mut placed = None;
        for _ in 0..config.placement_attempts {
            let r = rng.gen_range(config.min_radius..=config.max_radius);
            let cy = rng.gen_range(r..size - r);
            let cx = rng.gen_range(r..size - r);
            let mask = shape.rasterize(size, cy, cx, r);
            if mask.count() >= MIN_INSTANCE_AREA && !mask.intersects(&keep_out) {
                placed = Some(mask);
                break;
            }
        }
        // a crowded canvas just ends up with fewer objects
        let Some(mask) = placed else { break };
        occupied = occupied.union(&mask);
        instances.push(Instance {
            mask,
            shape,
            color_index,
        });
    }

    let plane = size * size;
    for inst in &instances {
        let color = OBJECT_PALETTE[inst.color_index];
        for (i, &on) in inst.mask.data().iter().enumerate() {
            if on {
                for (ch, &v) in color.iter().enumerate() {
                    image.data_mut()[ch * plane + i] = v;
                }
            }
        }
    }

    Ok(SceneSample {
        image,
        instances,
        background_kind: palette::texture_kind(texture),
        texture,
        background_colors: [c1, c2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_meet_minimum_area_at_smallest_radius() {
        for shape in ShapeKind::ALL {
            let m = shape.rasterize(32, 16, 16, 3);
            assert!(m.count() >= MIN_INSTANCE_AREA, "{shape:?} area {}", m.count());
        }
    }

    #[test]
    fn triangle_rows_widen_downward() {
        let m = ShapeKind::Triangle.rasterize(16, 8, 8, 3);
        let widths: Vec<usize> = (5..=11).map(|y| (0..16).filter(|&x| m.get(y, x)).count()).collect();
        assert_eq!(widths, vec![1, 1, 3, 3, 5, 5, 7]);
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(9, &cfg).unwrap(), generate_scene(9, &cfg).unwrap());
        assert_ne!(generate_scene(9, &cfg).unwrap().image, generate_scene(10, &cfg).unwrap().image);
    }

    #[test]
    fn zero_object_config() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..SceneConfig::default()
        };
        let s = generate_scene(1, &cfg).unwrap();
        assert!(s.instances.is_empty());
        assert!(s.foreground().is_empty());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SceneConfig {
            image_size: 8,
            ..SceneConfig::default()
        };
        assert!(generate_scene(0, &cfg).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }
}

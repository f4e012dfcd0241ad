//! Labelled scenes: a scene plus a ternary intent field, for training sets and
//! the three evaluation sets (removal, creation, mixed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masks::{creation_mask_with_selection, sample_train_example, MaskConfig, TrainExample, TrainMode};
use super::{derive_seed, generate_scene, SceneConfig, SceneSample, ShapeKind};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, TernaryIntentMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Creation,
    Removal,
    Mixed,
}

impl From<TrainMode> for SampleMode {
    fn from(m: TrainMode) -> Self {
        match m {
            TrainMode::Creation => SampleMode::Creation,
            TrainMode::Removal => SampleMode::Removal,
        }
    }
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "creation" => Ok(Self::Creation),
            "removal" => Ok(Self::Removal),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Param(format!(
                "unknown mode {other:?}; expected creation, removal or mixed"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub id: usize,
    pub seed: u64,
    pub scene: SceneSample,
    pub intent: TernaryIntentMask,
    pub mode: SampleMode,
    /// Instances the removal region was drawn around.
    pub removal_targets: Vec<usize>,
}

impl LabeledScene {
    /// Training view. In training data `+1` marks a creation-policy mask and
    /// `-1` a removal-policy mask; mixed samples have no training view.
    pub fn train_example(&self) -> Option<TrainExample> {
        let mode = match self.mode {
            SampleMode::Creation => TrainMode::Creation,
            SampleMode::Removal => TrainMode::Removal,
            SampleMode::Mixed => return None,
        };
        Some(TrainExample {
            image: self.scene.image.clone(),
            inpaint_mask: self.intent.inpaint_mask(),
            mode,
        })
    }
}

const SCENE_ATTEMPTS: u64 = 64;
const PLACEMENT_ATTEMPTS: usize = 64;

/// An object-shaped region over background (a shape plus a margin) that stays
/// clear of `forbidden`.
fn phantom_region<R: Rng + ?Sized>(
    rng: &mut R,
    scene_cfg: &SceneConfig,
    mask_cfg: &MaskConfig,
    forbidden: &BinaryMask,
) -> Option<BinaryMask> {
    let size = scene_cfg.image_size;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
        let r = rng.gen_range(scene_cfg.min_radius..=scene_cfg.max_radius);
        let cy = rng.gen_range(r..size - r);
        let cx = rng.gen_range(r..size - r);
        let margin = rng.gen_range(mask_cfg.creation_margin.0..=mask_cfg.creation_margin.1);
        let region = shape.rasterize(size, cy, cx, r).dilate(margin);
        if !region.intersects(forbidden) {
            return Some(region);
        }
    }
    None
}

/// Removal region around selected instances that leaves every other instance
/// (and a one pixel buffer around it) untouched.
fn removal_region<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &SceneSample,
    mask_cfg: &MaskConfig,
    count: Option<usize>,
) -> Result<Option<(BinaryMask, Vec<usize>)>> {
    if scene.instances.is_empty() {
        return Ok(None);
    }
    let (mask, selected) = creation_mask_with_selection(scene, rng, mask_cfg, count)?;
    let clean = scene
        .instances
        .iter()
        .enumerate()
        .filter(|(i, _)| !selected.contains(i))
        .all(|(_, inst)| !mask.intersects(&inst.mask.dilate(1)));
    Ok(clean.then_some((mask, selected)))
}

fn exhausted(kind: &str, seed: u64) -> Error {
    Error::Generation(format!("no {kind} sample found for seed {seed} after {SCENE_ATTEMPTS} scenes"))
}

pub fn removal_eval_sample(seed: u64, scene_cfg: &SceneConfig, mask_cfg: &MaskConfig) -> Result<LabeledScene> {
    mask_cfg.validate()?;
    for attempt in 0..SCENE_ATTEMPTS {
        let scene = generate_scene(derive_seed(seed, attempt), scene_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x72656d, attempt));
        if let Some((mask, targets)) = removal_region(&mut rng, &scene, mask_cfg, None)? {
            return Ok(LabeledScene {
                id: 0,
                seed,
                intent: TernaryIntentMask::from_region(&mask, -1)?,
                scene,
                mode: SampleMode::Removal,
                removal_targets: targets,
            });
        }
    }
    Err(exhausted("removal", seed))
}

pub fn creation_eval_sample(seed: u64, scene_cfg: &SceneConfig, mask_cfg: &MaskConfig) -> Result<LabeledScene> {
    mask_cfg.validate()?;
    for attempt in 0..SCENE_ATTEMPTS {
        let scene = generate_scene(derive_seed(seed, attempt), scene_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x637265, attempt));
        let forbidden = scene.foreground().dilate(scene_cfg.gap);
        if let Some(region) = phantom_region(&mut rng, scene_cfg, mask_cfg, &forbidden) {
            return Ok(LabeledScene {
                id: 0,
                seed,
                intent: TernaryIntentMask::from_region(&region, 1)?,
                scene,
                mode: SampleMode::Creation,
                removal_targets: Vec::new(),
            });
        }
    }
    Err(exhausted("creation", seed))
}

/// One removal region around a single instance plus a disjoint creation
/// region over background.
pub fn mixed_eval_sample(seed: u64, scene_cfg: &SceneConfig, mask_cfg: &MaskConfig) -> Result<LabeledScene> {
    mask_cfg.validate()?;
    for attempt in 0..SCENE_ATTEMPTS {
        let scene = generate_scene(derive_seed(seed, attempt), scene_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x6d6978, attempt));
        let Some((removal, targets)) = removal_region(&mut rng, &scene, mask_cfg, Some(1))? else {
            continue;
        };
        let forbidden = scene.foreground().union(&removal).dilate(scene_cfg.gap);
        let Some(creation) = phantom_region(&mut rng, scene_cfg, mask_cfg, &forbidden) else {
            continue;
        };
        let mut intent = TernaryIntentMask::from_region(&removal, -1)?;
        intent.paint(&creation, 1)?;
        return Ok(LabeledScene {
            id: 0,
            seed,
            scene,
            intent,
            mode: SampleMode::Mixed,
            removal_targets: targets,
        });
    }
    Err(exhausted("mixed", seed))
}

/// `n` evaluation samples of one kind; sample `i` uses `derive_seed(seed, i)`.
pub fn build_eval_set(
    mode: SampleMode,
    n: usize,
    seed: u64,
    scene_cfg: &SceneConfig,
    mask_cfg: &MaskConfig,
) -> Result<Vec<LabeledScene>> {
    let make = match mode {
        SampleMode::Removal => removal_eval_sample,
        SampleMode::Creation => creation_eval_sample,
        SampleMode::Mixed => mixed_eval_sample,
    };
    (0..n)
        .map(|i| {
            let mut s = make(derive_seed(seed, i as u64), scene_cfg, mask_cfg)?;
            s.id = i;
            Ok(s)
        })
        .collect()
}

/// Training samples with the 50/50 creation/removal mix.
pub fn build_train_set(n: usize, seed: u64, scene_cfg: &SceneConfig, mask_cfg: &MaskConfig) -> Result<Vec<LabeledScene>> {
    (0..n)
        .map(|i| {
            let sample_seed = derive_seed(seed, i as u64);
            let (scene, ex) = sample_train_example(sample_seed, scene_cfg, mask_cfg)?;
            let value = if ex.mode == TrainMode::Creation { 1 } else { -1 };
            Ok(LabeledScene {
                id: i,
                seed: sample_seed,
                intent: TernaryIntentMask::from_region(&ex.inpaint_mask, value)?,
                scene,
                mode: ex.mode.into(),
                removal_targets: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_eval_targets_are_covered_and_others_untouched() {
        let (sc, mc) = (SceneConfig::default(), MaskConfig::default());
        for s in build_eval_set(SampleMode::Removal, 30, 1, &sc, &mc).unwrap() {
            let region = s.intent.region(-1);
            assert!(!s.removal_targets.is_empty());
            for (i, inst) in s.scene.instances.iter().enumerate() {
                if s.removal_targets.contains(&i) {
                    assert!(inst.mask.is_subset_of(&region));
                } else {
                    assert!(!inst.mask.intersects(&region));
                }
            }
            assert!(s.intent.region(1).is_empty());
        }
    }

    #[test]
    fn creation_eval_region_is_clear_of_objects() {
        let (sc, mc) = (SceneConfig::default(), MaskConfig::default());
        for s in build_eval_set(SampleMode::Creation, 30, 2, &sc, &mc).unwrap() {
            let region = s.intent.region(1);
            assert!(!region.is_empty());
            assert!(!region.intersects(&s.scene.foreground()));
            assert!(s.intent.region(-1).is_empty());
        }
    }

    #[test]
    fn mixed_eval_regions_are_disjoint_and_both_present() {
        let (sc, mc) = (SceneConfig::default(), MaskConfig::default());
        for s in build_eval_set(SampleMode::Mixed, 20, 3, &sc, &mc).unwrap() {
            let (pos, neg) = (s.intent.region(1), s.intent.region(-1));
            assert!(!pos.is_empty() && !neg.is_empty());
            assert!(!pos.intersects(&neg.dilate(1)));
            assert_eq!(s.removal_targets.len(), 1);
        }
    }

    #[test]
    fn train_set_modes_are_balanced_and_valid() {
        let set = build_train_set(200, 5, &SceneConfig::default(), &MaskConfig::default()).unwrap();
        let creation = set.iter().filter(|s| s.mode == SampleMode::Creation).count();
        assert!((70..=130).contains(&creation), "{creation}");
        for s in &set {
            assert!(s.train_example().unwrap().satisfies_policy(&s.scene));
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mixed".parse::<SampleMode>().unwrap(), SampleMode::Mixed);
        assert!("both".parse::<SampleMode>().is_err());
    }
}

//! Palette-oracle metrics. Object and background palettes are disjoint, so
//! nearest-colour classification tells object pixels from background pixels
//! exactly on synthetic scenes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::InpaintModel;
use crate::error::{param_err, Result};
use crate::mask::{BinaryMask, TernaryIntentMask};
use crate::scene::{derive_seed, nearest_color, ColorClass, LabeledScene, SampleMode};
use crate::schedule::GuidanceConfig;
use crate::tensor::Tensor;

pub const MIN_DETECTION_AREA: usize = 12;
/// Width of the background ring used for colour-consistency distances.
pub const RING_WIDTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: BinaryMask,
    /// Most frequent object palette index inside the component.
    pub color_index: usize,
}

fn pixel(image: &Tensor<f32>, i: usize) -> [f32; 3] {
    let plane = image.plane();
    [0, 1, 2].map(|ch| image.data()[ch * plane + i])
}

fn object_map(image: &Tensor<f32>) -> Vec<Option<usize>> {
    (0..image.plane())
        .map(|i| match nearest_color(pixel(image, i)) {
            ColorClass::Object(k) => Some(k),
            ColorClass::Background(_) => None,
        })
        .collect()
}

/// Object-coloured 4-connected components of at least
/// [`MIN_DETECTION_AREA`] pixels, optionally restricted to `region`.
pub fn detect_objects(image: &Tensor<f32>, region: Option<&BinaryMask>) -> Vec<Detection> {
    let classes = object_map(image);
    let (h, w) = (image.height(), image.width());
    let data = classes
        .iter()
        .enumerate()
        .map(|(i, c)| c.is_some() && region.is_none_or(|r| r.data()[i]))
        .collect();
    let objects = BinaryMask::from_vec(h, w, data).expect("sized");
    objects
        .components()
        .into_iter()
        .filter(|c| c.count() >= MIN_DETECTION_AREA)
        .map(|mask| {
            let mut votes = [0usize; 8];
            for (i, &on) in mask.data().iter().enumerate() {
                if let (true, Some(k)) = (on, classes[i]) {
                    votes[k] += 1;
                }
            }
            let color_index = (0..votes.len()).max_by_key(|&k| (votes[k], usize::MAX - k)).unwrap_or(0);
            Detection { mask, color_index }
        })
        .collect()
}

/// Fraction of `region` pixels whose nearest palette colour is an object colour.
pub fn object_pixel_fraction(image: &Tensor<f32>, region: &BinaryMask) -> f64 {
    let n = region.count();
    if n == 0 {
        return 0.0;
    }
    let classes = object_map(image);
    let hits = region
        .data()
        .iter()
        .zip(&classes)
        .filter(|(&on, c)| on && c.is_some())
        .count();
    hits as f64 / n as f64
}

fn mean_color(image: &Tensor<f32>, pixels: impl Iterator<Item = usize>) -> Option<[f64; 3]> {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for i in pixels {
        let p = pixel(image, i);
        for ch in 0..3 {
            sum[ch] += p[ch] as f64;
        }
        n += 1;
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// RGB distance between the mean colour of `region` and the mean colour of
/// the background pixels in a ring around it. `None` without a usable ring.
pub fn ring_color_distance(image: &Tensor<f32>, region: &BinaryMask) -> Option<f64> {
    let classes = object_map(image);
    let ring = region.dilate(RING_WIDTH).subtract(region);
    let inner = mean_color(image, (0..region.data().len()).filter(|&i| region.data()[i]))?;
    let outer = mean_color(
        image,
        (0..ring.data().len()).filter(|&i| ring.data()[i] && classes[i].is_none()),
    )?;
    Some((0..3).map(|ch| (inner[ch] - outer[ch]).powi(2)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub pixels: usize,
    pub object_pixel_fraction: f64,
    pub detected_objects: usize,
    pub background_color_distance: Option<f64>,
}

impl RegionSummary {
    pub fn measure(image: &Tensor<f32>, region: &BinaryMask) -> Self {
        Self {
            pixels: region.count(),
            object_pixel_fraction: object_pixel_fraction(image, region),
            detected_objects: detect_objects(image, Some(region)).len(),
            background_color_distance: ring_color_distance(image, region),
        }
    }
}

/// Batch means over one kind of region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAggregate {
    pub object_pixel_fraction: f64,
    /// Fraction of samples with at least one detection in the region.
    pub creation_rate: f64,
    pub detected_objects: f64,
    pub background_color_distance: Option<f64>,
}

impl RegionAggregate {
    fn over<'a>(items: impl Iterator<Item = &'a RegionSummary>) -> Option<Self> {
        let items: Vec<&RegionSummary> = items.collect();
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let dists: Vec<f64> = items.iter().filter_map(|r| r.background_color_distance).collect();
        Some(Self {
            object_pixel_fraction: items.iter().map(|r| r.object_pixel_fraction).sum::<f64>() / n,
            creation_rate: items.iter().filter(|r| r.detected_objects > 0).count() as f64 / n,
            detected_objects: items.iter().map(|r| r.detected_objects as f64).sum::<f64>() / n,
            background_color_distance: (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: usize,
    pub creation: Option<RegionSummary>,
    pub removal: Option<RegionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub mode: SampleMode,
    pub w: f64,
    pub steps: usize,
    pub seed: u64,
    pub samples: usize,
    /// Headline metrics: the evaluated region for single-intent runs, the
    /// removal region for mixed runs.
    pub object_pixel_fraction: f64,
    /// Headline creation rate: the creation region for creation and mixed
    /// runs, the removal region for removal runs.
    pub creation_rate: f64,
    pub background_color_distance: Option<f64>,
    pub creation_region: Option<RegionAggregate>,
    pub removal_region: Option<RegionAggregate>,
    pub per_sample: Vec<SampleResult>,
}

fn run_set(
    model: &InpaintModel,
    set: &[LabeledScene],
    intents: Vec<TernaryIntentMask>,
    guidance: &GuidanceConfig,
) -> Result<Vec<SampleResult>> {
    set.par_iter()
        .zip(intents)
        .map(|(sample, intent)| {
            let mut g = *guidance;
            g.seed = derive_seed(guidance.seed, sample.id as u64);
            let out = model.inpaint(&sample.scene.image, &intent, &g)?;
            let measure = |v: i8| {
                let region = intent.region(v);
                (!region.is_empty()).then(|| RegionSummary::measure(&out, &region))
            };
            Ok(SampleResult {
                id: sample.id,
                creation: measure(1),
                removal: measure(-1),
            })
        })
        .collect()
}

fn report(mode: SampleMode, guidance: &GuidanceConfig, per_sample: Vec<SampleResult>) -> OracleReport {
    let creation_region = RegionAggregate::over(per_sample.iter().filter_map(|s| s.creation.as_ref()));
    let removal_region = RegionAggregate::over(per_sample.iter().filter_map(|s| s.removal.as_ref()));
    let (headline, rate) = match mode {
        SampleMode::Removal => (removal_region.as_ref(), removal_region.as_ref()),
        SampleMode::Creation => (creation_region.as_ref(), creation_region.as_ref()),
        SampleMode::Mixed => (removal_region.as_ref(), creation_region.as_ref()),
    };
    OracleReport {
        mode,
        w: guidance.w,
        steps: guidance.steps,
        seed: guidance.seed,
        samples: per_sample.len(),
        object_pixel_fraction: headline.map_or(0.0, |r| r.object_pixel_fraction),
        creation_rate: rate.map_or(0.0, |r| r.creation_rate),
        background_color_distance: headline.and_then(|r| r.background_color_distance),
        creation_region,
        removal_region,
        per_sample,
    }
}

fn nonempty(set: &[LabeledScene]) -> Result<()> {
    if set.is_empty() {
        Err(param_err("evaluation set is empty"))
    } else {
        Ok(())
    }
}

/// Every masked pixel of every sample is set to removal.
pub fn eval_removal(model: &InpaintModel, set: &[LabeledScene], guidance: &GuidanceConfig) -> Result<OracleReport> {
    nonempty(set)?;
    let intents = set
        .iter()
        .map(|s| TernaryIntentMask::from_region(&s.intent.inpaint_mask(), -1))
        .collect::<Result<_>>()?;
    Ok(report(SampleMode::Removal, guidance, run_set(model, set, intents, guidance)?))
}

/// Every masked pixel of every sample is set to creation.
pub fn eval_creation(model: &InpaintModel, set: &[LabeledScene], guidance: &GuidanceConfig) -> Result<OracleReport> {
    nonempty(set)?;
    let intents = set
        .iter()
        .map(|s| TernaryIntentMask::from_region(&s.intent.inpaint_mask(), 1))
        .collect::<Result<_>>()?;
    Ok(report(SampleMode::Creation, guidance, run_set(model, set, intents, guidance)?))
}

/// One pass per sample with the sample's own two-region intent field.
pub fn eval_mixed(model: &InpaintModel, set: &[LabeledScene], guidance: &GuidanceConfig) -> Result<OracleReport> {
    nonempty(set)?;
    for s in set {
        let (pos, neg) = (s.intent.region(1), s.intent.region(-1));
        if pos.is_empty() || neg.is_empty() {
            return Err(param_err(format!("sample {} lacks a creation or a removal region", s.id)));
        }
    }
    let intents = set.iter().map(|s| s.intent.clone()).collect();
    Ok(report(SampleMode::Mixed, guidance, run_set(model, set, intents, guidance)?))
}

/// Two-region intent field from separate masks; overlapping masks are
/// rejected.
pub fn mixed_intent(creation: &BinaryMask, removal: &BinaryMask) -> Result<TernaryIntentMask> {
    if creation.intersects(removal) {
        return Err(param_err(format!(
            "creation and removal regions overlap in {} pixels",
            creation.intersection_count(removal)
        )));
    }
    let mut intent = TernaryIntentMask::from_region(removal, -1)?;
    intent.paint(creation, 1)?;
    Ok(intent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig, BACKGROUND_PALETTE, OBJECT_PALETTE};

    fn flat(color: [f32; 3], size: usize) -> Tensor<f32> {
        let plane = size * size;
        Tensor::from_vec(3, size, size, (0..3 * plane).map(|i| color[i / plane]).collect()).unwrap()
    }

    fn paint(img: &mut Tensor<f32>, region: &BinaryMask, color: [f32; 3]) {
        let plane = img.plane();
        for i in (0..plane).filter(|&i| region.data()[i]) {
            for (ch, &v) in color.iter().enumerate() {
                img.data_mut()[ch * plane + i] = v;
            }
        }
    }

    #[test]
    fn background_has_no_detections() {
        assert!(detect_objects(&flat(BACKGROUND_PALETTE[2], 16), None).is_empty());
    }

    #[test]
    fn small_objects_are_discarded() {
        let mut img = flat(BACKGROUND_PALETTE[0], 16);
        let ten = BinaryMask::from_fn(16, 16, |y, x| y == 3 && (2..12).contains(&x));
        paint(&mut img, &ten, OBJECT_PALETTE[1]);
        assert!(detect_objects(&img, None).is_empty());
        let twelve = BinaryMask::from_fn(16, 16, |y, x| y == 8 && (2..14).contains(&x));
        paint(&mut img, &twelve, OBJECT_PALETTE[4]);
        let found = detect_objects(&img, None);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].color_index, 4);
    }

    #[test]
    fn detections_match_generated_instances() {
        let cfg = SceneConfig::default();
        let mut checked = 0;
        for seed in 0..60 {
            let s = generate_scene(seed, &cfg).unwrap();
            let found = detect_objects(&s.image, None);
            assert_eq!(found.len(), s.instances.len(), "seed {seed}");
            for inst in &s.instances {
                let best = found.iter().map(|d| d.mask.iou(&inst.mask)).fold(0.0, f64::max);
                assert!(best > 0.8);
            }
            checked += usize::from(s.instances.len() == 3);
        }
        assert!(checked > 0);
    }

    #[test]
    fn pixel_fraction_definitions() {
        let mut img = flat(BACKGROUND_PALETTE[0], 8);
        let region = BinaryMask::from_fn(8, 8, |y, _| y < 4);
        assert_eq!(object_pixel_fraction(&img, &region), 0.0);
        let obj = BinaryMask::from_fn(8, 8, |y, x| y < 2 && x < 4);
        paint(&mut img, &obj, OBJECT_PALETTE[0]);
        assert_eq!(object_pixel_fraction(&img, &region), 8.0 / 32.0);
    }

    #[test]
    fn ring_distance_is_zero_for_flat_fill() {
        let img = flat(BACKGROUND_PALETTE[3], 12);
        let region = BinaryMask::from_fn(12, 12, |y, x| (4..8).contains(&y) && (4..8).contains(&x));
        assert!(ring_color_distance(&img, &region).unwrap() < 1e-9);
    }

    #[test]
    fn overlapping_regions_rejected() {
        let a = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let b = BinaryMask::from_fn(4, 4, |y, _| y == 1);
        assert!(mixed_intent(&a, &b).is_err());
        let c = BinaryMask::from_fn(4, 4, |y, _| y == 3);
        let m = mixed_intent(&a, &c).unwrap();
        assert_eq!(m.get(0, 0), 1);
        assert_eq!(m.get(3, 0), -1);
    }
}

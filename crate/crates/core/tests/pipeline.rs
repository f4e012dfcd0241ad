mod common;

use common::{random_image, random_intent, scrambled_checkpoint, small32};
use intentfill::nn::DenoiserConfig;
use intentfill::pipeline::{eval_mixed, eval_removal, inpaint_with, CountingPredictor, InpaintModel, InpaintRequest};
use intentfill::scene::{build_eval_set, MaskConfig, SampleMode};
use intentfill::{GuidanceConfig, Sampler, SceneConfig, TernaryIntentMask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mini() -> InpaintModel {
    InpaintModel::from_checkpoint(&scrambled_checkpoint(DenoiserConfig::miniature(), 5)).unwrap()
}

fn request(seed: u64, w: f64, steps: usize, sampler: Sampler) -> InpaintRequest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InpaintRequest {
        image: random_image(8, &mut rng),
        intent: random_intent(8, &mut rng),
        guidance: GuidanceConfig { w, steps, seed, sampler },
    }
}

#[test]
fn two_denoiser_calls_per_step() {
    let model = mini();
    for (sampler, steps) in [(Sampler::Ddim, 7), (Sampler::Ddpm, 4), (Sampler::Ddim, 1)] {
        let counter = CountingPredictor::new(&model.denoiser);
        let req = request(1, 2.0, steps, sampler);
        inpaint_with(&req, &counter, &model.embedding, model.config(), &model.schedule).unwrap();
        assert_eq!(counter.calls(), 2 * steps, "{sampler:?}");
    }
}

#[test]
fn ddim_output_is_bit_identical_for_a_seed() {
    let model = mini();
    let req = request(9, 2.0, 6, Sampler::Ddim);
    let a = model.run(&req).unwrap();
    let b = mini().run(&req).unwrap();
    assert_eq!(a.data(), b.data());
    let mut other = req.clone();
    other.guidance.seed += 1;
    assert_ne!(model.run(&other).unwrap().data(), a.data());
}

#[test]
fn invalid_requests_are_rejected() {
    let model = mini();
    let mut req = request(2, 2.0, 3, Sampler::Ddim);
    req.intent = TernaryIntentMask::zeros(8, 8);
    let err = model.run(&req).unwrap_err().to_string();
    assert!(err.contains("no nonzero"), "{err}");

    let mut req = request(2, 2.0, 3, Sampler::Ddim);
    req.intent = TernaryIntentMask::new(8, 4, vec![1; 32]).unwrap();
    assert!(model.run(&req).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let req = InpaintRequest {
        image: random_image(16, &mut rng),
        intent: random_intent(16, &mut rng),
        guidance: GuidanceConfig::default(),
    };
    assert!(model.run(&req).unwrap_err().to_string().contains("model expects"));

    assert!(model.run(&request(2, -0.5, 3, Sampler::Ddim)).is_err());
    assert!(model.run(&request(2, 2.0, 0, Sampler::Ddim)).is_err());
    assert!(model.run(&request(2, 2.0, 1001, Sampler::Ddim)).is_err());
}

#[test]
fn zero_weight_sends_the_removal_prediction_everywhere() {
    let model = mini();
    let req = request(4, 0.0, 5, Sampler::Ddim);
    let base = model.run(&req).unwrap();
    let flipped = req.intent.swapped();
    let all_removal = TernaryIntentMask::from_region(&req.intent.inpaint_mask(), -1).unwrap();
    let all_creation = TernaryIntentMask::from_region(&req.intent.inpaint_mask(), 1).unwrap();
    for intent in [flipped, all_removal] {
        let out = model.inpaint(&req.image, &intent, &req.guidance).unwrap();
        assert_eq!(out.data(), base.data());
    }
    // at nonzero weight the sign matters
    let mut g = req.guidance;
    g.w = 2.0;
    let creation = model.inpaint(&req.image, &all_creation, &g).unwrap();
    let removal = model.inpaint(&req.image, &TernaryIntentMask::from_region(&req.intent.inpaint_mask(), -1).unwrap(), &g).unwrap();
    assert_ne!(creation.data(), removal.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pixels_outside_the_inpaint_mask_are_untouched(seed in any::<u64>(), w in 0.0f64..6.0, ddpm in any::<bool>()) {
        let model = mini();
        let sampler = if ddpm { Sampler::Ddpm } else { Sampler::Ddim };
        let req = request(seed, w, 2, sampler);
        let out = model.run(&req).unwrap();
        let mask = req.intent.inpaint_mask();
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let v = out.get(ch, y, x);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if !mask.get(y, x) {
                        prop_assert_eq!(v, req.image.get(ch, y, x));
                    }
                }
            }
        }
    }
}

#[test]
fn evaluation_is_a_pure_function_of_its_inputs() {
    let model = InpaintModel::from_checkpoint(&scrambled_checkpoint(small32(), 8)).unwrap();
    let set = build_eval_set(SampleMode::Mixed, 3, 21, &SceneConfig::default(), &MaskConfig::default()).unwrap();
    let g = GuidanceConfig {
        steps: 3,
        ..GuidanceConfig::default()
    };
    let a = serde_json::to_value(eval_mixed(&model, &set, &g).unwrap()).unwrap();
    let b = serde_json::to_value(eval_mixed(&model, &set, &g).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a["samples"], 3);
    let frac = a["object_pixel_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));

    assert!(eval_removal(&model, &[], &g).is_err());
    // removal-only samples lack a creation region
    let removal = build_eval_set(SampleMode::Removal, 2, 3, &SceneConfig::default(), &MaskConfig::default()).unwrap();
    assert!(eval_mixed(&model, &removal, &g).is_err());
}

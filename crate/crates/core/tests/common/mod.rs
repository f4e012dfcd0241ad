#![allow(dead_code)]

use intentfill::nn::{DenoiserConfig, Scalar};
use intentfill::train::initial_checkpoint;
use intentfill::{Checkpoint, ScheduleConfig, TernaryIntentMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A freshly initialized checkpoint with every weight and both intent vectors
/// randomized, so that the two conditions give visibly different predictions.
pub fn scrambled_checkpoint(model: DenoiserConfig, seed: u64) -> Checkpoint {
    let mut ckpt = initial_checkpoint(model, ScheduleConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in ckpt.params.tensors_mut() {
        for v in &mut t.data {
            *v += 0.05 * f32::standard_normal(&mut rng);
        }
    }
    for v in ckpt.embedding.creation.iter_mut().chain(ckpt.embedding.removal.iter_mut()) {
        *v = f32::standard_normal(&mut rng);
    }
    ckpt
}

/// 32x32 images with the miniature widths: cheap enough to run evaluations on.
pub fn small32() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 32,
        ..DenoiserConfig::miniature()
    }
}

pub fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..3 * size * size).map(|_| rng.gen_range(0..=255u8) as f32 / 255.0).collect();
    Tensor::from_vec(3, size, size, data).unwrap()
}

pub fn random_intent(size: usize, rng: &mut ChaCha8Rng) -> TernaryIntentMask {
    loop {
        let values: Vec<i8> = (0..size * size).map(|_| rng.gen_range(-1..=1i8)).collect();
        let m = TernaryIntentMask::new(size, size, values).unwrap();
        if m.has_intent() {
            return m;
        }
    }
}

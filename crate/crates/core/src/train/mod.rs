//! Two-stage training. Stage 1 teaches plain inpainting under the neutral
//! (zero) condition; stage 2 keeps training the network while learning one
//! condition vector per intent from mode-labelled examples.

mod observer;
mod optim;

pub use observer::{JsonLines, NullObserver, Recorder, SnapshotWriter, StepRecord, TrainObserver};
pub use optim::AdamW;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Progress};
use crate::error::{param_err, shape_err, Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{assemble_input, init_params, to_model_space, ConditionEmbedding, Denoiser, DenoiserConfig, Grads, Scalar};
use crate::scene::{derive_seed, sample_train_example, MaskConfig, SceneConfig, TrainExample, TrainMode};
use crate::schedule::{forward_noise, NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;

/// Relative weight of the error outside the inpainting mask.
pub const UNMASKED_WEIGHT: f64 = 0.1;
pub const DIVERGENCE_LOSS: f64 = 1e3;
pub const DIVERGENCE_PATIENCE: u32 = 100;
/// Standard deviation of the jitter that separates the two intent vectors
/// when stage 2 starts.
pub const EMBEDDING_JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate decays geometrically to `lr * lr_decay_factor`.
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Snapshot interval in steps; 0 disables snapshots.
    pub checkpoint_every: u64,
    pub weight_decay: f64,
    /// Stage-2 budget cap as a fraction of the stage-1 steps.
    pub max_stage2_fraction: f64,
    /// Examples per gradient work unit. Units are reduced in a fixed order, so
    /// results do not depend on the number of worker threads.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 10_000,
            batch_size: 32,
            // from-scratch training of a small network; 1e-4 barely moves it
            lr: 1e-3,
            lr_decay_factor: 1e-2,
            seed: 0,
            checkpoint_every: 1000,
            weight_decay: 0.01,
            max_stage2_fraction: 0.3,
            grad_chunk: 4,
        }
    }
}

impl TrainConfig {
    pub fn stage2() -> Self {
        Self {
            stage: 2,
            steps: 3_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(param_err(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.steps == 0 {
            return Err(param_err("steps must be >= 1"));
        }
        if self.batch_size == 0 || self.grad_chunk == 0 {
            return Err(param_err("batch_size and grad_chunk must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(param_err("lr_decay_factor must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(param_err("weight_decay must be >= 0"));
        }
        if !(self.max_stage2_fraction > 0.0 && self.max_stage2_fraction <= 1.0) {
            return Err(param_err("max_stage2_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let progress = step.saturating_sub(1) as f64 / self.steps as f64;
        self.lr * self.lr_decay_factor.powf(progress)
    }
}

/// Where training examples come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// Fresh scenes and masks drawn per example.
    Procedural { scene: SceneConfig, masks: MaskConfig },
    /// A fixed pool; each example slot picks from it uniformly.
    Examples(&'a [TrainExample]),
}

impl TrainData<'_> {
    fn validate(&self, model: &DenoiserConfig) -> Result<()> {
        let s = model.image_size;
        match self {
            TrainData::Procedural { scene, masks } => {
                scene.validate()?;
                masks.validate()?;
                if scene.image_size != s {
                    return Err(shape_err(format!("scenes are {0}x{0} but the model expects {s}x{s}", scene.image_size)));
                }
            }
            TrainData::Examples(pool) => {
                if pool.is_empty() {
                    return Err(param_err("training pool is empty"));
                }
                if let Some(i) = pool.iter().position(|e| {
                    e.image.dims() != (model.channels, s, s)
                        || (e.inpaint_mask.height(), e.inpaint_mask.width()) != (s, s)
                }) {
                    return Err(shape_err(format!("training example {i} does not match the model's input size")));
                }
                if let Some(i) = pool.iter().position(|e| e.inpaint_mask.is_empty()) {
                    return Err(param_err(format!("training example {i} has an empty mask")));
                }
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrainExample> {
        match self {
            TrainData::Procedural { scene, masks } => Ok(sample_train_example(rng.gen(), scene, masks)?.1),
            TrainData::Examples(pool) => Ok(pool[rng.gen_range(0..pool.len())].clone()),
        }
    }
}

/// Which condition vector an example is trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondSlot {
    Neutral,
    Creation,
    Removal,
}

impl CondSlot {
    pub fn select(stage: u8, mode: TrainMode) -> Self {
        match (stage, mode) {
            (1, _) => CondSlot::Neutral,
            (_, TrainMode::Creation) => CondSlot::Creation,
            (_, TrainMode::Removal) => CondSlot::Removal,
        }
    }

    pub fn vector<T>(self, emb: &ConditionEmbedding<T>) -> &[T] {
        match self {
            CondSlot::Neutral => &emb.neutral,
            CondSlot::Creation => &emb.creation,
            CondSlot::Removal => &emb.removal,
        }
    }
}

/// Mean squared error over the mask plus [`UNMASKED_WEIGHT`] times the mean
/// squared error elsewhere. Returns the loss and its gradient w.r.t. `pred`.
pub fn masked_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &BinaryMask) -> Result<(T, Tensor<T>)> {
    pred.check_same(target, "prediction and target")?;
    let (c, h, w) = pred.dims();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(shape_err("loss mask does not match prediction"));
    }
    let inside = mask.count();
    let outside = h * w - inside;
    let scale = |n: usize, weight: f64| if n == 0 { T::zero() } else { T::lit(weight / (c * n) as f64) };
    let (s_in, s_out) = (scale(inside, 1.0), scale(outside, UNMASKED_WEIGHT));
    let hw = h * w;
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.data().len()];
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let s = if mask.data()[i % hw] { s_in } else { s_out };
        let d = p - t;
        loss = loss + s * d * d;
        grad[i] = T::lit(2.0) * s * d;
    }
    Ok((loss, Tensor::from_vec(c, h, w, grad)?))
}

/// Loss and gradients for one example at a fixed timestep and noise draw.
/// Parameter gradients are added into `grads`; the condition gradient is
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn example_loss<T: Scalar>(
    model: &Denoiser<T>,
    clean: &Tensor<T>,
    mask: &BinaryMask,
    cond: &[T],
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
    grads: &mut Grads<T>,
) -> Result<(T, Vec<T>)> {
    let z_t = forward_noise(clean, t, eps, sched)?;
    let input = assemble_input(&z_t, mask, clean)?;
    let (pred, tape) = model.forward(&input, t, cond)?;
    let (loss, dpred) = masked_mse(&pred, eps, mask)?;
    let dcond = model.backward(&tape, &dpred, grads)?;
    Ok((loss, dcond))
}

#[derive(Debug, Clone)]
pub struct LossStep<T> {
    pub loss: T,
    pub t: usize,
    pub slot: CondSlot,
    pub cond_grad: Vec<T>,
}

/// Samples a timestep uniformly and a Gaussian noise field, then evaluates
/// [`example_loss`] with the condition the stage and mode call for.
pub fn loss_step<T: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<T>,
    example: &TrainExample,
    emb: &ConditionEmbedding<T>,
    stage: u8,
    sched: &NoiseSchedule,
    rng: &mut R,
    grads: &mut Grads<T>,
) -> Result<LossStep<T>> {
    let clean = to_model_space::<T>(&example.image);
    let t = rng.gen_range(0..sched.len());
    let (c, h, w) = clean.dims();
    let noise = (0..c * h * w).map(|_| T::standard_normal(rng)).collect();
    let eps = Tensor::from_vec(c, h, w, noise)?;
    let slot = CondSlot::select(stage, example.mode);
    let (loss, cond_grad) = example_loss(model, &clean, &example.inpaint_mask, slot.vector(emb), t, &eps, sched, grads)?;
    Ok(LossStep {
        loss,
        t,
        slot,
        cond_grad,
    })
}

/// Fresh, untrained checkpoint.
pub fn initial_checkpoint(model: DenoiserConfig, schedule: ScheduleConfig, seed: u64) -> Result<Checkpoint> {
    model.validate()?;
    schedule.build()?;
    Ok(Checkpoint {
        model,
        schedule,
        params: init_params(seed, &model),
        embedding: ConditionEmbedding::zeros(model.cond_dim),
        optimizer: None,
        progress: Progress {
            stage: 0,
            step: 0,
            stage1_steps: 0,
            seed,
        },
    })
}

pub fn train_stage1(
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    data: TrainData<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    config.validate()?;
    if config.stage != 1 {
        return Err(param_err("train_stage1 needs a stage-1 config"));
    }
    let start = initial_checkpoint(model, schedule, config.seed)?;
    run(start, data, config, observer)
}

pub fn train_stage2(
    start: &Checkpoint,
    data: TrainData<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    config.validate()?;
    if config.stage != 2 {
        return Err(param_err("train_stage2 needs a stage-2 config"));
    }
    if start.progress.stage != 1 {
        return Err(param_err(format!(
            "stage 2 must start from a stage-1 checkpoint, got stage {}",
            start.progress.stage
        )));
    }
    let budget = (config.max_stage2_fraction * start.progress.stage1_steps as f64).floor() as u64;
    if config.steps > budget {
        return Err(param_err(format!(
            "stage-2 steps {} exceed {} ({} of the {} stage-1 steps)",
            config.steps, budget, config.max_stage2_fraction, start.progress.stage1_steps
        )));
    }
    let mut init = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let jitter = EMBEDDING_JITTER as f32;
    let neutral = init.embedding.neutral.clone();
    init.embedding.creation = neutral.iter().map(|v| v + jitter * f32::standard_normal(&mut rng)).collect();
    init.embedding.removal = neutral.iter().map(|v| v + jitter * f32::standard_normal(&mut rng)).collect();
    // moments start fresh; stage 2 is a new optimization problem
    init.optimizer = None;
    run(init, data, config, observer)
}

struct Partial {
    loss: f64,
    grads: Grads<f32>,
    creation: Vec<f32>,
    removal: Vec<f32>,
}

fn add_into(acc: &mut [f32], src: &[f32]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

fn run(
    start: Checkpoint,
    data: TrainData<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    data.validate(&start.model)?;
    let sched = start.schedule.build()?;
    let stage = config.stage;
    let stage1_steps = start.progress.stage1_steps;
    let mut model = Denoiser::new(start.model, start.params)?;
    let mut emb = start.embedding;
    let dim = emb.dim();

    let names: Vec<String> = model.params().tensors().iter().map(|t| t.name.clone()).collect();
    let decay: Vec<bool> = names.iter().map(|n| n.ends_with(".weight")).collect();
    let sizes: Vec<usize> = model.params().tensors().iter().map(|t| t.data.len()).collect();
    let mut slots: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
    if stage == 2 {
        slots.push(("embedding.creation", dim));
        slots.push(("embedding.removal", dim));
    }
    let mut opt = AdamW::new(slots, config.weight_decay);

    let clock = Instant::now();
    let chunks: Vec<(usize, usize)> = (0..config.batch_size)
        .step_by(config.grad_chunk)
        .map(|lo| (lo, (lo + config.grad_chunk).min(config.batch_size)))
        .collect();
    let stream = config.seed ^ ((stage as u64) << 56);
    let mut over_limit = 0u32;

    for step in 1..=config.steps {
        let lr = config.lr_at(step);
        let step_seed = derive_seed(stream, step);
        let partials: Vec<Result<Partial>> = chunks
            .par_iter()
            .map(|&(lo, hi)| {
                let mut part = Partial {
                    loss: 0.0,
                    grads: model.params().zeros_like(),
                    creation: vec![0.0; dim],
                    removal: vec![0.0; dim],
                };
                for i in lo..hi {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, i as u64));
                    let example = data.draw(&mut rng)?;
                    let out = loss_step(&model, &example, &emb, stage, &sched, &mut rng, &mut part.grads)?;
                    part.loss += out.loss as f64;
                    match out.slot {
                        CondSlot::Creation => add_into(&mut part.creation, &out.cond_grad),
                        CondSlot::Removal => add_into(&mut part.removal, &out.cond_grad),
                        CondSlot::Neutral => {}
                    }
                }
                Ok(part)
            })
            .collect();
        let mut parts = partials.into_iter();
        let mut total = parts.next().expect("batch has at least one chunk")?;
        for p in parts {
            let p = p?;
            total.loss += p.loss;
            for (a, g) in total.grads.iter_mut().zip(&p.grads) {
                add_into(a, g);
            }
            add_into(&mut total.creation, &p.creation);
            add_into(&mut total.removal, &p.removal);
        }
        let inv = 1.0 / config.batch_size as f32;
        let loss = total.loss / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {loss} at lr {lr:.3e}"),
            });
        }
        over_limit = if loss > DIVERGENCE_LOSS { over_limit + 1 } else { 0 };
        if over_limit >= DIVERGENCE_PATIENCE {
            return Err(Error::Training {
                step,
                reason: format!(
                    "diverged: loss above {DIVERGENCE_LOSS} for {DIVERGENCE_PATIENCE} consecutive steps (last {loss:.4e})"
                ),
            });
        }

        opt.begin_step();
        let grads = total.grads;
        for (i, tensor) in model.params_mut().tensors_mut().iter_mut().enumerate() {
            let g: Vec<f32> = grads[i].iter().map(|v| v * inv).collect();
            opt.update(i, &mut tensor.data, &g, lr, decay[i])?;
        }
        if stage == 2 {
            let n = names.len();
            let gc: Vec<f32> = total.creation.iter().map(|v| v * inv).collect();
            let gr: Vec<f32> = total.removal.iter().map(|v| v * inv).collect();
            opt.update(n, &mut emb.creation, &gc, lr, false)?;
            opt.update(n + 1, &mut emb.removal, &gr, lr, false)?;
        }

        observer.on_step(&StepRecord {
            stage,
            step,
            loss,
            lr,
            wall_time: clock.elapsed().as_secs_f64(),
        })?;
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            let snap = snapshot(&model, &emb, &opt, &start.schedule, stage, step, stage1_steps, config.seed);
            observer.on_snapshot(&snap)?;
        }
    }
    Ok(snapshot(
        &model,
        &emb,
        &opt,
        &start.schedule,
        stage,
        config.steps,
        stage1_steps,
        config.seed,
    ))
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    model: &Denoiser<f32>,
    emb: &ConditionEmbedding<f32>,
    opt: &AdamW,
    schedule: &ScheduleConfig,
    stage: u8,
    step: u64,
    stage1_steps: u64,
    seed: u64,
) -> Checkpoint {
    Checkpoint {
        model: *model.config(),
        schedule: *schedule,
        params: model.params().clone(),
        embedding: emb.clone(),
        optimizer: Some(opt.state().clone()),
        progress: Progress {
            stage,
            step,
            stage1_steps: if stage == 1 { step } else { stage1_steps },
            seed,
        },
    }
}

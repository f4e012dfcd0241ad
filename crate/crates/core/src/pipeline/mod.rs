//! Inference with spatially varying guidance, plus the palette-oracle
//! evaluator.

mod oracle;

pub use oracle::{
    detect_objects, eval_creation, eval_mixed, eval_removal, mixed_intent, object_pixel_fraction, ring_color_distance,
    Detection, OracleReport, RegionAggregate, RegionSummary, SampleResult, MIN_DETECTION_AREA,
};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{param_err, shape_err, Result};
use crate::mask::{BinaryMask, TernaryIntentMask};
use crate::nn::{assemble_input, to_image_space, to_model_space, ConditionEmbedding, Denoiser, DenoiserConfig};
use crate::schedule::{
    cfg_spatial, ddim_step, ddpm_step, sampling_timesteps, GuidanceConfig, NoiseSchedule, Sampler,
};
use crate::tensor::Tensor;

/// Anything that predicts noise from an assembled inpainting input.
pub trait NoisePredictor: Sync {
    fn predict(&self, input: &Tensor<f32>, t: usize, cond: &[f32]) -> Result<Tensor<f32>>;
}

impl NoisePredictor for Denoiser<f32> {
    fn predict(&self, input: &Tensor<f32>, t: usize, cond: &[f32]) -> Result<Tensor<f32>> {
        self.denoise(input, t, cond)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, input: &Tensor<f32>, t: usize, cond: &[f32]) -> Result<Tensor<f32>> {
        (**self).predict(input, t, cond)
    }
}

/// Wraps a predictor and counts its evaluations.
pub struct CountingPredictor<P> {
    pub inner: P,
    calls: AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn predict(&self, input: &Tensor<f32>, t: usize, cond: &[f32]) -> Result<Tensor<f32>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(input, t, cond)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    /// `[0, 1]` image, channels x H x W.
    pub image: Tensor<f32>,
    pub intent: TernaryIntentMask,
    pub guidance: GuidanceConfig,
}

impl InpaintRequest {
    pub fn validate(&self, model: &DenoiserConfig, train_steps: usize) -> Result<()> {
        let (c, h, w) = self.image.dims();
        if (self.intent.height(), self.intent.width()) != (h, w) {
            return Err(shape_err(format!(
                "image is {h}x{w} but intent mask is {}x{}",
                self.intent.height(),
                self.intent.width()
            )));
        }
        if (c, h, w) != (model.channels, model.image_size, model.image_size) {
            return Err(shape_err(format!(
                "model expects {}x{}x{} images, got {c}x{h}x{w}",
                model.channels, model.image_size, model.image_size
            )));
        }
        if !self.intent.has_intent() {
            return Err(param_err("intent mask has no nonzero pixel; nothing to inpaint"));
        }
        self.guidance.validate(train_steps)
    }
}

/// `mask * generated + (1 - mask) * original`, per pixel across channels.
pub fn composite(original: &Tensor<f32>, generated: &Tensor<f32>, inpaint_mask: &BinaryMask) -> Result<Tensor<f32>> {
    original.check_same(generated, "composite operands")?;
    if (inpaint_mask.height(), inpaint_mask.width()) != (original.height(), original.width()) {
        return Err(shape_err("composite mask does not match images"));
    }
    let plane = original.plane();
    let mut out = original.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if inpaint_mask.data()[i % plane] {
            *v = generated.data()[i];
        }
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::randn(c, h, w, rng)
}

/// Runs the sampler with two evaluations per step (creation and removal
/// conditions), combines them with [`cfg_spatial`], and after each step
/// pastes a freshly noised copy of the original into the known region.
pub fn inpaint_with(
    req: &InpaintRequest,
    predictor: &dyn NoisePredictor,
    embedding: &ConditionEmbedding<f32>,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    req.validate(model, sched.len())?;
    if embedding.dim() != model.cond_dim {
        return Err(shape_err("condition embedding does not match the model"));
    }
    let g = &req.guidance;
    let (c, h, w) = req.image.dims();
    let mask = req.intent.inpaint_mask();
    let known = to_model_space::<f32>(&req.image);
    let timesteps = sampling_timesteps(sched.len(), g.steps)?;
    let mut ascending = timesteps.clone();
    ascending.reverse();
    let respaced = match g.sampler {
        Sampler::Ddpm => Some(sched.respaced(&ascending)?),
        Sampler::Ddim => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut z = gaussian(&mut rng, c, h, w);
    let n = timesteps.len();
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied();
        let input = assemble_input(&z, &mask, &known)?;
        let eps_c = predictor.predict(&input, t, &embedding.creation)?;
        let eps_r = predictor.predict(&input, t, &embedding.removal)?;
        let eps = cfg_spatial(&eps_c, &eps_r, &req.intent, g.w)?;
        z = match &respaced {
            Some(rs) => {
                let noise = gaussian(&mut rng, c, h, w);
                ddpm_step(&z, &eps, n - 1 - i, rs, &noise)?
            }
            None => ddim_step(&z, &eps, t, t_prev, sched)?,
        };
        // known region back at the new noise level
        let level = t_prev.map_or(1.0, |p| sched.alpha_bar(p));
        let fresh = gaussian(&mut rng, c, h, w);
        let (a, b) = (level.sqrt() as f32, (1.0 - level).sqrt() as f32);
        let plane = h * w;
        for (j, v) in z.data_mut().iter_mut().enumerate() {
            if !mask.data()[j % plane] {
                *v = a * known.data()[j] + b * fresh.data()[j];
            }
        }
    }
    composite(&req.image, &to_image_space(&z), &mask)
}

/// [`inpaint_with`] using the denoiser stored in `ckpt`.
pub fn inpaint(req: &InpaintRequest, ckpt: &Checkpoint) -> Result<Tensor<f32>> {
    InpaintModel::from_checkpoint(ckpt)?.run(req)
}

/// A loaded checkpoint ready for repeated inference.
pub struct InpaintModel {
    pub denoiser: Denoiser<f32>,
    pub embedding: ConditionEmbedding<f32>,
    pub schedule: NoiseSchedule,
}

impl InpaintModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.embedding.validate()?;
        Ok(Self {
            denoiser: Denoiser::new(ckpt.model, ckpt.params.clone())?,
            embedding: ckpt.embedding.clone(),
            schedule: ckpt.schedule.build()?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.denoiser.config()
    }

    pub fn run(&self, req: &InpaintRequest) -> Result<Tensor<f32>> {
        inpaint_with(req, &self.denoiser, &self.embedding, self.denoiser.config(), &self.schedule)
    }

    pub fn inpaint(&self, image: &Tensor<f32>, intent: &TernaryIntentMask, guidance: &GuidanceConfig) -> Result<Tensor<f32>> {
        self.run(&InpaintRequest {
            image: image.clone(),
            intent: intent.clone(),
            guidance: *guidance,
        })
    }
}

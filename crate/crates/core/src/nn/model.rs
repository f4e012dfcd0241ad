//! A small conditional UNet that predicts the noise added to an image, given
//! the inpainting input stack, a timestep and a learned condition vector.
//!
//! The condition vector is projected into the timestep-embedding space and
//! summed with it; every residual block turns that joint embedding into a
//! per-channel scale and shift applied after its second normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, NormCache};
use super::scalar::Scalar;
use crate::error::{param_err, shape_err, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            base_width: 32,
            depth: 3,
            cond_dim: 64,
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    /// 8x8 images, width 4: small enough for exhaustive gradient checks.
    pub fn miniature() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            base_width: 4,
            depth: 3,
            cond_dim: 8,
            time_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.channels,
            self.base_width,
            self.depth,
            self.cond_dim,
            self.time_dim,
        ];
        if dims.contains(&0) {
            return Err(param_err(format!("all denoiser dimensions must be >= 1: {self:?}")));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(param_err("time_dim must be even"));
        }
        let factor = 1usize << (self.depth - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(param_err(format!(
                "image_size {} not divisible by 2^(depth-1) = {factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Feature width per resolution level.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.base_width << l).collect()
    }

    pub fn input_channels(&self) -> usize {
        2 * self.channels + 1
    }

    pub fn emb_dim(&self) -> usize {
        self.time_dim
    }

    /// Side lengths a request image must be divisible by.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// The learned condition vectors: creation, removal and the neutral vector
/// used while the network learns plain inpainting.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding<T = f32> {
    pub creation: Vec<T>,
    pub removal: Vec<T>,
    pub neutral: Vec<T>,
}

impl<T: Scalar> ConditionEmbedding<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            creation: vec![T::zero(); dim],
            removal: vec![T::zero(); dim],
            neutral: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.neutral.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.neutral.len();
        if self.creation.len() != d || self.removal.len() != d {
            return Err(shape_err("condition embeddings differ in dimension"));
        }
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.creation) && finite(&self.removal) && finite(&self.neutral)) {
            return Err(param_err("condition embedding has non-finite entries"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ConditionEmbedding<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::from(x).expect("cast")).collect();
        ConditionEmbedding {
            creation: c(&self.creation),
            removal: c(&self.removal),
            neutral: c(&self.neutral),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T = f32> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn from_tensors(tensors: Vec<ParamTensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn data(&self, index: usize) -> &[T] {
        &self.tensors[index].data
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::from(v).expect("cast")).collect(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    /// Checks names and shapes against the layout `config` implies.
    pub fn check_layout(&self, config: &DenoiserConfig) -> Result<()> {
        let layout = Layout::new(config);
        if layout.specs.len() != self.tensors.len() {
            return Err(shape_err(format!(
                "expected {} parameter tensors, found {}",
                layout.specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, t) in layout.specs.iter().zip(&self.tensors) {
            if spec.name != t.name || spec.shape != t.shape {
                return Err(shape_err(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    t.name, t.shape, spec.name, spec.shape
                )));
            }
            if t.data.len() != spec.shape.iter().product::<usize>() {
                return Err(shape_err(format!("parameter '{}' has wrong element count", t.name)));
            }
        }
        Ok(())
    }
}

/// Gradient buffers aligned with [`DenoiserParams::tensors`].
pub type Grads<T> = Vec<Vec<T>>;

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize, f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
    channels: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    dout: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    film: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<Spec>,
    time1: Dense,
    time2: Dense,
    cond: Dense,
    in_conv: Conv,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: Norm,
    out_conv: Conv,
}

impl Layout {
    fn new(config: &DenoiserConfig) -> Self {
        let mut b = LayoutBuilder { specs: Vec::new() };
        let emb = config.emb_dim();
        let widths = config.widths();
        let depth = config.depth;
        let time1 = b.dense("time.fc1", config.time_dim, emb);
        let time2 = b.dense("time.fc2", emb, emb);
        let cond = b.dense("cond.proj", config.cond_dim, emb);
        let in_conv = b.conv("input.conv", config.input_channels(), widths[0], 3, 1.0);
        let mut down = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = if l == 0 { widths[0] } else { widths[l - 1] };
            down.push(b.res_block(&format!("down.{l}"), cin, widths[l], emb));
        }
        let mid = b.res_block("mid", widths[depth - 1], widths[depth - 1], emb);
        let mut up = vec![None; depth];
        for l in (0..depth).rev() {
            let below = if l == depth - 1 { widths[depth - 1] } else { widths[l + 1] };
            up[l] = Some(b.res_block(&format!("up.{l}"), below + widths[l], widths[l], emb));
        }
        let out_norm = b.norm("output.norm", widths[0]);
        let out_conv = b.conv("output.conv", widths[0], config.channels, 3, 0.1);
        Self {
            specs: b.specs,
            time1,
            time2,
            cond,
            in_conv,
            down,
            mid,
            up: up.into_iter().map(|u| u.expect("every level built")).collect(),
            out_norm,
            out_conv,
        }
    }
}

struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let fan_in = cin * k * k;
        let w = self.push(format!("{name}.weight"), vec![cout, cin, k, k], Init::FanIn(fan_in, gain));
        let b = self.push(format!("{name}.bias"), vec![cout], Init::Zeros);
        Conv { w, b, cin, cout, k }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        let w = self.push(format!("{name}.weight"), vec![dout, din], Init::FanIn(din, 1.0));
        let b = self.push(format!("{name}.bias"), vec![dout], Init::Zeros);
        Dense { w, b, dout }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let g = self.push(format!("{name}.gamma"), vec![channels], Init::Ones);
        let b = self.push(format!("{name}.beta"), vec![channels], Init::Zeros);
        Norm {
            g,
            b,
            channels,
            groups: ops::norm_groups(channels),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResBlock {
        let norm1 = self.norm(&format!("{name}.norm1"), cin);
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, 1.0);
        let film = self.dense(&format!("{name}.film"), emb, 2 * cout);
        let norm2 = self.norm(&format!("{name}.norm2"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1.0);
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1.0));
        ResBlock {
            norm1,
            conv1,
            film,
            norm2,
            conv2,
            skip,
        }
    }
}

/// Fan-in scaled Gaussian initialization; identical seeds give identical
/// tensors.
pub fn init_params(seed: u64, config: &DenoiserConfig) -> DenoiserParams<f32> {
    init_params_as::<f32>(seed, config)
}

pub fn init_params_as<T: Scalar>(seed: u64, config: &DenoiserConfig) -> DenoiserParams<T> {
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .specs
        .iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::FanIn(fan_in, gain) => {
                    let std = gain / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::lit(std * f64::standard_normal(&mut rng)))
                        .collect()
                }
            };
            ParamTensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                data,
            }
        })
        .collect();
    DenoiserParams { tensors }
}

/// Maps a `[0, 1]` image to the `[-1, 1]` range the network works in.
pub fn to_model_space<T: Scalar>(image: &Tensor<f32>) -> Tensor<T> {
    image.cast::<T>().map(|v| v * T::lit(2.0) - T::one())
}

/// Inverse of [`to_model_space`], clamped to `[0, 1]`.
pub fn to_image_space<T: Scalar>(x: &Tensor<T>) -> Tensor<f32> {
    x.map(|v| ((v + T::one()) * T::lit(0.5)).max(T::zero()).min(T::one()))
        .cast::<f32>()
}

/// Stacks `[z_t | mask | original * (1 - mask)]` along channels.
pub fn assemble_input<T: Scalar>(z_t: &Tensor<T>, inpaint_mask: &BinaryMask, original: &Tensor<T>) -> Result<Tensor<T>> {
    z_t.check_same(original, "noisy and original images")?;
    let (c, h, w) = z_t.dims();
    if (inpaint_mask.height(), inpaint_mask.width()) != (h, w) {
        return Err(shape_err(format!(
            "mask is {}x{} but images are {h}x{w}",
            inpaint_mask.height(),
            inpaint_mask.width()
        )));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity((2 * c + 1) * hw);
    data.extend_from_slice(z_t.data());
    data.extend(inpaint_mask.data().iter().map(|&m| if m { T::one() } else { T::zero() }));
    for ch in original.data().chunks(hw) {
        data.extend(ch.iter().zip(inpaint_mask.data()).map(|(&v, &m)| if m { T::zero() } else { v }));
    }
    Tensor::from_vec(2 * c + 1, h, w, data)
}

struct ResTape<T> {
    x_dims: (usize, usize),
    n1: NormCache<T>,
    pre1: Vec<T>,
    cols1: Vec<T>,
    n2: NormCache<T>,
    pre2: Vec<T>,
    film: Vec<T>,
    modulated: Vec<T>,
    cols2: Vec<T>,
    skip_in: Option<Vec<T>>,
}

/// Intermediate values recorded by [`Denoiser::forward`] for the backward pass.
pub struct Tape<T> {
    height: usize,
    width: usize,
    time_in: Vec<T>,
    time_pre: Vec<T>,
    time_hidden: Vec<T>,
    cond: Vec<T>,
    joint: Vec<T>,
    joint_act: Vec<T>,
    in_cols: Vec<T>,
    down: Vec<ResTape<T>>,
    mid: ResTape<T>,
    up: Vec<ResTape<T>>,
    out_norm: NormCache<T>,
    out_pre: Vec<T>,
    out_cols: Vec<T>,
}

/// A parameterised denoiser ready for forward and backward passes.
#[derive(Debug, Clone)]
pub struct Denoiser<T = f32> {
    config: DenoiserConfig,
    layout: Layout,
    params: DenoiserParams<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, params: DenoiserParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self {
            layout: Layout::new(&config),
            config,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &DenoiserParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DenoiserParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> DenoiserParams<T> {
        self.params
    }

    fn p(&self, i: usize) -> &[T] {
        self.params.data(i)
    }

    /// Predicts the noise component of `input` (shaped per [`assemble_input`]).
    pub fn denoise(&self, input: &Tensor<T>, t: usize, cond: &[T]) -> Result<Tensor<T>> {
        self.forward(input, t, cond).map(|(out, _)| out)
    }

    pub fn forward(&self, input: &Tensor<T>, t: usize, cond: &[T]) -> Result<(Tensor<T>, Tape<T>)> {
        let cfg = &self.config;
        let (c, h, w) = input.dims();
        if c != cfg.input_channels() {
            return Err(shape_err(format!(
                "input has {c} channels, expected {}",
                cfg.input_channels()
            )));
        }
        let m = cfg.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(shape_err(format!("input {h}x{w} not divisible by {m}")));
        }
        if cond.len() != cfg.cond_dim {
            return Err(shape_err(format!(
                "condition vector has length {}, expected {}",
                cond.len(),
                cfg.cond_dim
            )));
        }
        let lay = &self.layout;

        let sin = ops::timestep_embedding::<T>(t, cfg.time_dim);
        let time_pre = ops::linear_forward(&sin, self.p(lay.time1.w), self.p(lay.time1.b), lay.time1.dout);
        let time_hidden = ops::silu(&time_pre);
        let time_emb = ops::linear_forward(&time_hidden, self.p(lay.time2.w), self.p(lay.time2.b), lay.time2.dout);
        let cond_emb = ops::linear_forward(cond, self.p(lay.cond.w), self.p(lay.cond.b), lay.cond.dout);
        let joint: Vec<T> = time_emb.iter().zip(&cond_emb).map(|(&a, &b)| a + b).collect();
        let joint_act = ops::silu(&joint);

        let in_cols = ops::im2col3(input.data(), c, h, w);
        let mut x = self.conv_apply(&lay.in_conv, &in_cols, h * w);

        let depth = cfg.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut down = Vec::with_capacity(depth);
        for l in 0..depth {
            let (lh, lw) = (h >> l, w >> l);
            let (out, tape) = self.res_forward(&lay.down[l], x, lh, lw, &joint_act);
            down.push(tape);
            x = if l + 1 < depth {
                let pooled = ops::avg_pool2(&out, lay.down[l].conv2.cout, lh, lw);
                skips.push(out);
                pooled
            } else {
                skips.push(out.clone());
                out
            };
        }
        let (lh, lw) = (h >> (depth - 1), w >> (depth - 1));
        let (mut x, mid) = self.res_forward(&lay.mid, x, lh, lw, &joint_act);

        let mut up: Vec<Option<ResTape<T>>> = (0..depth).map(|_| None).collect();
        let mut x_ch = lay.mid.conv2.cout;
        for l in (0..depth).rev() {
            let (lh, lw) = (h >> l, w >> l);
            if l + 1 < depth {
                x = ops::upsample2(&x, x_ch, h >> (l + 1), w >> (l + 1));
            }
            x.extend_from_slice(&skips[l]);
            let (out, tape) = self.res_forward(&lay.up[l], x, lh, lw, &joint_act);
            up[l] = Some(tape);
            x_ch = lay.up[l].conv2.cout;
            x = out;
        }

        let norm = &lay.out_norm;
        let (out_pre, out_norm) = ops::group_norm_forward(&x, norm.channels, h * w, norm.groups, self.p(norm.g), self.p(norm.b));
        let act = ops::silu(&out_pre);
        let out_cols = ops::im2col3(&act, norm.channels, h, w);
        let out = self.conv_apply(&lay.out_conv, &out_cols, h * w);

        let tape = Tape {
            height: h,
            width: w,
            time_in: sin,
            time_pre,
            time_hidden,
            cond: cond.to_vec(),
            joint,
            joint_act,
            in_cols,
            down,
            mid,
            up: up.into_iter().map(|u| u.expect("every level visited")).collect(),
            out_norm,
            out_pre,
            out_cols,
        };
        Ok((Tensor::from_vec(cfg.channels, h, w, out)?, tape))
    }

    fn conv_apply(&self, conv: &Conv, cols: &[T], hw: usize) -> Vec<T> {
        ops::conv_forward(cols, self.p(conv.w), self.p(conv.b), conv.cout, conv.cin * conv.k * conv.k, hw)
    }

    fn res_forward(&self, blk: &ResBlock, x: Vec<T>, h: usize, w: usize, emb: &[T]) -> (Vec<T>, ResTape<T>) {
        let hw = h * w;
        let n1 = &blk.norm1;
        let (pre1, c1) = ops::group_norm_forward(&x, n1.channels, hw, n1.groups, self.p(n1.g), self.p(n1.b));
        let cols1 = ops::im2col3(&ops::silu(&pre1), n1.channels, h, w);
        let hidden = self.conv_apply(&blk.conv1, &cols1, hw);
        let n2 = &blk.norm2;
        let (pre2, c2) = ops::group_norm_forward(&hidden, n2.channels, hw, n2.groups, self.p(n2.g), self.p(n2.b));
        drop(hidden);
        let film = ops::linear_forward(emb, self.p(blk.film.w), self.p(blk.film.b), blk.film.dout);
        let cout = n2.channels;
        let mut modulated = pre2.clone();
        for ch in 0..cout {
            let scale = T::one() + film[ch];
            let shift = film[cout + ch];
            for v in &mut modulated[ch * hw..(ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
        let cols2 = ops::im2col3(&ops::silu(&modulated), cout, h, w);
        let mut out = self.conv_apply(&blk.conv2, &cols2, hw);
        let skip_in = match &blk.skip {
            Some(skip) => {
                let s = self.conv_apply(skip, &x, hw);
                for (o, v) in out.iter_mut().zip(s) {
                    *o = *o + v;
                }
                Some(x)
            }
            None => {
                for (o, &v) in out.iter_mut().zip(&x) {
                    *o = *o + v;
                }
                None
            }
        };
        let tape = ResTape {
            x_dims: (h, w),
            n1: c1,
            pre1,
            cols1,
            n2: c2,
            pre2,
            film,
            modulated,
            cols2,
            skip_in,
        };
        (out, tape)
    }

    /// Back-propagates `dout` (gradient of a scalar loss w.r.t. the forward
    /// output) into parameter gradients, which are added to `grads`, and
    /// returns the gradient w.r.t. the condition vector.
    pub fn backward(&self, tape: &Tape<T>, dout: &Tensor<T>, grads: &mut Grads<T>) -> Result<Vec<T>> {
        let cfg = &self.config;
        let lay = &self.layout;
        let (h, w) = (tape.height, tape.width);
        if dout.dims() != (cfg.channels, h, w) {
            return Err(shape_err("output gradient does not match forward output"));
        }
        if grads.len() != self.params.len() {
            return Err(shape_err("gradient buffers do not match parameters"));
        }
        let hw = h * w;
        let mut demb = vec![T::zero(); cfg.emb_dim()];

        let dcols = self.conv_grad(&lay.out_conv, dout.data(), &tape.out_cols, hw, grads);
        let mut dx = ops::col2im3(&dcols, lay.out_norm.channels, h, w);
        ops::silu_backward(&tape.out_pre, &mut dx);
        let mut dx = self.norm_grad(&lay.out_norm, &dx, &tape.out_norm, hw, grads);

        let depth = cfg.depth;
        let mut dskips: Vec<Vec<T>> = vec![Vec::new(); depth];
        #[allow(clippy::needless_range_loop)]
        for l in 0..depth {
            let blk = &lay.up[l];
            let (lh, lw) = (h >> l, w >> l);
            let din = self.res_backward(blk, &tape.up[l], &dx, &tape.joint_act, &mut demb, grads);
            let skip_ch = lay.down[l].conv2.cout;
            let below_ch = blk.norm1.channels - skip_ch;
            let split = below_ch * lh * lw;
            dskips[l] = din[split..].to_vec();
            let dbelow = &din[..split];
            dx = if l + 1 < depth {
                ops::upsample2_backward(dbelow, below_ch, h >> (l + 1), w >> (l + 1))
            } else {
                dbelow.to_vec()
            };
        }
        // dx now holds the gradient at the mid block output
        let mut dx = self.res_backward(&lay.mid, &tape.mid, &dx, &tape.joint_act, &mut demb, grads);
        for l in (0..depth).rev() {
            let (lh, lw) = (h >> l, w >> l);
            let mut dout_l = std::mem::take(&mut dskips[l]);
            if l + 1 < depth {
                let pooled = ops::avg_pool2_backward(&dx, lay.down[l].conv2.cout, lh, lw);
                for (a, b) in dout_l.iter_mut().zip(pooled) {
                    *a = *a + b;
                }
            } else {
                for (a, &b) in dout_l.iter_mut().zip(&dx) {
                    *a = *a + b;
                }
            }
            dx = self.res_backward(&lay.down[l], &tape.down[l], &dout_l, &tape.joint_act, &mut demb, grads);
        }
        // the image gradient is not needed, only the input conv's parameters
        self.conv_param_grad(&lay.in_conv, &dx, &tape.in_cols, hw, grads);

        ops::silu_backward(&tape.joint, &mut demb);
        let dcond = {
            let (gw, gb) = pair_mut(grads, lay.cond.w, lay.cond.b);
            ops::linear_backward(&demb, &tape.cond, self.p(lay.cond.w), gw, gb)
        };
        let mut dhidden = {
            let (gw, gb) = pair_mut(grads, lay.time2.w, lay.time2.b);
            ops::linear_backward(&demb, &tape.time_hidden, self.p(lay.time2.w), gw, gb)
        };
        ops::silu_backward(&tape.time_pre, &mut dhidden);
        let (gw, gb) = pair_mut(grads, lay.time1.w, lay.time1.b);
        ops::linear_backward(&dhidden, &tape.time_in, self.p(lay.time1.w), gw, gb);
        Ok(dcond)
    }

    fn conv_grad(&self, conv: &Conv, dout: &[T], cols: &[T], hw: usize, grads: &mut Grads<T>) -> Vec<T> {
        let (gw, gb) = pair_mut(grads, conv.w, conv.b);
        ops::conv_backward(dout, cols, self.p(conv.w), conv.cout, conv.cin * conv.k * conv.k, hw, gw, gb)
    }

    fn conv_param_grad(&self, conv: &Conv, dout: &[T], cols: &[T], hw: usize, grads: &mut Grads<T>) {
        let k = conv.cin * conv.k * conv.k;
        let (gw, gb) = pair_mut(grads, conv.w, conv.b);
        super::scalar::matmul(conv.cout, hw, k, dout, false, cols, true, gw, true);
        for (g, row) in gb.iter_mut().zip(dout.chunks(hw)) {
            *g = *g + row.iter().copied().sum::<T>();
        }
    }

    fn norm_grad(&self, norm: &Norm, dy: &[T], cache: &NormCache<T>, hw: usize, grads: &mut Grads<T>) -> Vec<T> {
        let (gg, gb) = pair_mut(grads, norm.g, norm.b);
        ops::group_norm_backward(dy, cache, norm.channels, hw, self.p(norm.g), gg, gb)
    }

    fn res_backward(
        &self,
        blk: &ResBlock,
        tape: &ResTape<T>,
        dout: &[T],
        emb: &[T],
        demb: &mut [T],
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let (h, w) = tape.x_dims;
        let hw = h * w;
        let cout = blk.conv2.cout;
        let cin = blk.norm1.channels;

        let dcols2 = self.conv_grad(&blk.conv2, dout, &tape.cols2, hw, grads);
        let mut dmod = ops::col2im3(&dcols2, cout, h, w);
        ops::silu_backward(&tape.modulated, &mut dmod);

        let mut dfilm = vec![T::zero(); 2 * cout];
        let mut dpre2 = dmod;
        for ch in 0..cout {
            let span = ch * hw..(ch + 1) * hw;
            let scale = T::one() + tape.film[ch];
            let mut dscale = T::zero();
            let mut dshift = T::zero();
            for (d, &p) in dpre2[span.clone()].iter_mut().zip(&tape.pre2[span]) {
                dscale = dscale + *d * p;
                dshift = dshift + *d;
                *d = *d * scale;
            }
            dfilm[ch] = dscale;
            dfilm[cout + ch] = dshift;
        }
        let de = {
            let (gw, gb) = pair_mut(grads, blk.film.w, blk.film.b);
            ops::linear_backward(&dfilm, emb, self.p(blk.film.w), gw, gb)
        };
        for (a, b) in demb.iter_mut().zip(de) {
            *a = *a + b;
        }
        let dhidden = self.norm_grad(&blk.norm2, &dpre2, &tape.n2, hw, grads);
        let dcols1 = self.conv_grad(&blk.conv1, &dhidden, &tape.cols1, hw, grads);
        let mut dpre1 = ops::col2im3(&dcols1, cin, h, w);
        ops::silu_backward(&tape.pre1, &mut dpre1);
        let mut dx = self.norm_grad(&blk.norm1, &dpre1, &tape.n1, hw, grads);
        match (&blk.skip, &tape.skip_in) {
            (Some(skip), Some(x)) => {
                let ds = self.conv_grad(skip, dout, x, hw, grads);
                for (a, b) in dx.iter_mut().zip(ds) {
                    *a = *a + b;
                }
            }
            _ => {
                for (a, &b) in dx.iter_mut().zip(dout) {
                    *a = *a + b;
                }
            }
        }
        dx
    }
}

fn pair_mut<T>(grads: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b, "parameter indices out of order");
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}


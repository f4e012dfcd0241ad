use rand::Rng;

use super::BackgroundKind;
use crate::tensor::Tensor;

/// Saturated colours used only for objects.
pub const OBJECT_PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.10],
    [0.10, 0.20, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90],
    [0.10, 0.90, 0.90],
    [1.00, 0.55, 0.00],
    [0.55, 0.10, 0.95],
];

/// Muted colours used only for backgrounds. Every convex blend of these stays
/// far from the object colours, so gradients never look like objects.
pub const BACKGROUND_PALETTE: [[f32; 3]; 8] = [
    [0.50, 0.50, 0.50],
    [0.35, 0.35, 0.40],
    [0.62, 0.58, 0.52],
    [0.45, 0.50, 0.45],
    [0.55, 0.50, 0.60],
    [0.40, 0.45, 0.50],
    [0.65, 0.65, 0.62],
    [0.30, 0.32, 0.30],
];

pub const TEXTURE_COUNT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorClass {
    Object(usize),
    Background(usize),
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Nearest entry across both palettes.
pub fn nearest_color(rgb: [f32; 3]) -> ColorClass {
    let mut best = (f32::INFINITY, ColorClass::Background(0));
    for (i, &c) in OBJECT_PALETTE.iter().enumerate() {
        let d = dist2(rgb, c);
        if d < best.0 {
            best = (d, ColorClass::Object(i));
        }
    }
    for (i, &c) in BACKGROUND_PALETTE.iter().enumerate() {
        let d = dist2(rgb, c);
        if d < best.0 {
            best = (d, ColorClass::Background(i));
        }
    }
    best.1
}

pub(crate) fn texture_kind(texture: usize) -> BackgroundKind {
    match texture {
        0..=2 => BackgroundKind::Gradient,
        3..=5 => BackgroundKind::Stripes,
        _ => BackgroundKind::Blotch,
    }
}

/// Bilinearly interpolated value noise on a `cells x cells` lattice.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, size: usize, cells: usize) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f32>()).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let step = cells as f32 / size as f32;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f32 + 0.5) * step;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = (x as f32 + 0.5) * step;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

pub(crate) fn render_background<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    texture: usize,
    c1: [f32; 3],
    c2: [f32; 3],
) -> Tensor<f32> {
    let span = (size - 1).max(1) as f32;
    let period = rng.gen_range(4..=8usize);
    let half = period / 2;
    let blend: Vec<f32> = match texture {
        0 => (0..size * size).map(|i| (i % size) as f32 / span).collect(),
        1 => (0..size * size).map(|i| (i / size) as f32 / span).collect(),
        2 => (0..size * size)
            .map(|i| ((i % size) + (i / size)) as f32 / (2.0 * span))
            .collect(),
        3 => (0..size * size).map(|i| ((i / size / half) % 2) as f32).collect(),
        4 => (0..size * size).map(|i| ((i % size / half) % 2) as f32).collect(),
        5 => (0..size * size)
            .map(|i| ((((i % size) + (i / size)) / half) % 2) as f32)
            .collect(),
        6 => value_noise(rng, size, 3),
        _ => value_noise(rng, size, 6),
    };
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, &t) in blend.iter().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = c1[ch] * (1.0 - t) + c2[ch] * t;
        }
    }
    Tensor::from_vec(3, size, size, data).expect("sized buffer")
}

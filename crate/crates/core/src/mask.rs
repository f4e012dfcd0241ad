//! Binary region masks and the ternary intent field.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};

/// A per-pixel boolean region, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "{} mask values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    fn check(&self, other: &Self) {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask dimensions differ"
        );
    }

    pub fn union(&self, other: &Self) -> Self {
        self.check(other);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Self { data, ..*self }
    }

    pub fn intersect(&self, other: &Self) -> Self {
        self.check(other);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Self { data, ..*self }
    }

    pub fn subtract(&self, other: &Self) -> Self {
        self.check(other);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect();
        Self { data, ..*self }
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| !v).collect(),
            ..*self
        }
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.check(other);
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// True when every pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.check(other);
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.check(other);
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Dilation with a Euclidean disk of the given radius (radius 1 is the full
    /// 3x3 neighbourhood).
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let limit = if radius == 1 { 2 } else { r * r };
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| dy * dy + dx * dx <= limit)
            .collect();
        let mut out = Self::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < self.height && (xx as usize) < self.width
                    {
                        out.set(yy as usize, xx as usize, true);
                    }
                }
            }
        }
        out
    }

    /// 4-connected components, in raster order of their first pixel.
    pub fn components(&self) -> Vec<BinaryMask> {
        let mut label = vec![usize::MAX; self.data.len()];
        let mut comps = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut comp = Self::empty(self.height, self.width);
            label[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                comp.data[i] = true;
                let (y, x) = (i / self.width, i % self.width);
                let mut visit = |j: usize| {
                    if self.data[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(i - self.width);
                }
                if y + 1 < self.height {
                    visit(i + self.width);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < self.width {
                    visit(i + 1);
                }
            }
            comps.push(comp);
        }
        comps
    }
}

/// Per-pixel intent: `+1` creation, `-1` removal, `0` not applied.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TernaryIntentMask {
    height: usize,
    width: usize,
    values: Vec<i8>,
}

impl TernaryIntentMask {
    pub fn new(height: usize, width: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err(format!(
                "{} intent values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !matches!(v, -1..=1)) {
            return Err(param_err(format!(
                "intent value {} at (x={}, y={}) is not one of -1, 0, +1",
                values[i],
                i % width.max(1),
                i / width.max(1)
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, value: i8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds an intent field that is `value` inside `region` and 0 elsewhere.
    pub fn from_region(region: &BinaryMask, value: i8) -> Result<Self> {
        let values = region.data().iter().map(|&m| if m { value } else { 0 }).collect();
        Self::new(region.height(), region.width(), values)
    }

    /// Overwrites pixels inside `region` with `value`.
    pub fn paint(&mut self, region: &BinaryMask, value: i8) -> Result<()> {
        if (region.height(), region.width()) != (self.height, self.width) {
            return Err(shape_err("region and intent dimensions differ"));
        }
        if !matches!(value, -1..=1) {
            return Err(param_err(format!("intent value {value} out of range")));
        }
        for (v, &m) in self.values.iter_mut().zip(region.data()) {
            if m {
                *v = value;
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> i8 {
        self.values[y * self.width + x]
    }

    /// The binary inpaint region: every pixel with nonzero intent.
    pub fn inpaint_mask(&self) -> BinaryMask {
        BinaryMask::from_vec(
            self.height,
            self.width,
            self.values.iter().map(|&v| v != 0).collect(),
        )
        .expect("dimensions are consistent")
    }

    pub fn region(&self, value: i8) -> BinaryMask {
        BinaryMask::from_vec(
            self.height,
            self.width,
            self.values.iter().map(|&v| v == value).collect(),
        )
        .expect("dimensions are consistent")
    }

    pub fn has_intent(&self) -> bool {
        self.values.iter().any(|&v| v != 0)
    }

    /// Negates every entry, exchanging creation and removal regions.
    pub fn swapped(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| -v).collect(),
            ..*self
        }
    }
}

/// Quantization deadzone: block means within `[-1/3, 1/3]` map to 0.
pub const DEADZONE: f64 = 1.0 / 3.0;

/// Reduces an intent field by `factor` in each direction. Each output cell is
/// the sign of its block mean, with means inside the deadzone mapped to 0.
pub fn downsample_ternary(mask: &TernaryIntentMask, factor: usize) -> Result<TernaryIntentMask> {
    if factor == 0 {
        return Err(param_err("downsample factor must be at least 1"));
    }
    if !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(param_err(format!(
            "factor {factor} does not divide {}x{}",
            mask.height, mask.width
        )));
    }
    let (oh, ow) = (mask.height / factor, mask.width / factor);
    let area = (factor * factor) as f64;
    let mut values = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            let mut sum = 0i64;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    sum += mask.get(y, x) as i64;
                }
            }
            let mean = sum as f64 / area;
            values.push(if mean > DEADZONE {
                1
            } else if mean < -DEADZONE {
                -1
            } else {
                0
            });
        }
    }
    TernaryIntentMask::new(oh, ow, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(TernaryIntentMask::new(1, 2, vec![0, 2]).is_err());
        assert!(TernaryIntentMask::new(1, 2, vec![0]).is_err());
    }

    #[test]
    fn inpaint_mask_is_nonzero_support() {
        let m = TernaryIntentMask::new(2, 2, vec![1, 0, -1, 0]).unwrap();
        assert_eq!(m.inpaint_mask().data(), &[true, false, true, false]);
    }

    #[test]
    fn downsample_identity_at_factor_one() {
        let m = TernaryIntentMask::new(2, 3, vec![1, 0, -1, -1, 1, 0]).unwrap();
        assert_eq!(downsample_ternary(&m, 1).unwrap(), m);
    }

    #[test]
    fn downsample_uniform_block() {
        let m = TernaryIntentMask::uniform(4, 4, 1).unwrap();
        let d = downsample_ternary(&m, 2).unwrap();
        assert_eq!(d.values(), &[1, 1, 1, 1]);
    }

    #[test]
    fn downsample_deadzone_block() {
        // mean of [+1, +1, -1, 0] is 0.25, inside the deadzone
        let m = TernaryIntentMask::new(2, 2, vec![1, 1, -1, 0]).unwrap();
        assert_eq!(downsample_ternary(&m, 2).unwrap().values(), &[0]);
        let m = TernaryIntentMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(downsample_ternary(&m, 2).unwrap().values(), &[1]);
        let m = TernaryIntentMask::new(2, 2, vec![-1, -1, 0, -1]).unwrap();
        assert_eq!(downsample_ternary(&m, 2).unwrap().values(), &[-1]);
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        let m = TernaryIntentMask::zeros(3, 4);
        assert!(downsample_ternary(&m, 2).is_err());
        assert!(downsample_ternary(&m, 0).is_err());
    }

    #[test]
    fn dilate_radius_one_covers_neighbourhood() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        assert_eq!(m.dilate(1).count(), 9);
        assert_eq!(m.dilate(0), m);
    }

    #[test]
    fn components_are_four_connected() {
        // diagonal neighbours are separate components
        let m = BinaryMask::from_vec(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(m.components().len(), 2);
        let m = BinaryMask::from_vec(2, 2, vec![true, true, false, true]).unwrap();
        assert_eq!(m.components().len(), 1);
    }

    proptest! {
        #[test]
        fn downsample_stays_ternary(vals in proptest::collection::vec(-1i8..=1, 64), factor in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let m = TernaryIntentMask::new(8, 8, vals).unwrap();
            let d = downsample_ternary(&m, factor).unwrap();
            prop_assert_eq!(d.height(), 8 / factor);
            prop_assert!(d.values().iter().all(|v| matches!(v, -1..=1)));
        }
    }
}

use crate::checkpoint::{Moments, OptimizerState};
use crate::error::{shape_err, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with decoupled weight decay. One moment pair per trainable slot,
/// matched to slots by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    state: OptimizerState,
    weight_decay: f64,
}

impl AdamW {
    pub fn new<'a>(slots: impl IntoIterator<Item = (&'a str, usize)>, weight_decay: f64) -> Self {
        let moments = slots
            .into_iter()
            .map(|(name, n)| Moments {
                name: name.to_string(),
                first: vec![0.0; n],
                second: vec![0.0; n],
            })
            .collect();
        Self {
            state: OptimizerState { step: 0, moments },
            weight_decay,
        }
    }

    pub fn from_state(state: OptimizerState, weight_decay: f64) -> Self {
        Self { state, weight_decay }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn into_state(self) -> OptimizerState {
        self.state
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// updating the slots.
    pub fn begin_step(&mut self) {
        self.state.step += 1;
    }

    /// Updates slot `index` in place. Decay is applied only when `decay` is set
    /// (weight matrices), never to biases, norms or condition vectors.
    pub fn update(&mut self, index: usize, params: &mut [f32], grads: &[f32], lr: f64, decay: bool) -> Result<()> {
        let m = &mut self.state.moments[index];
        if params.len() != m.first.len() || grads.len() != params.len() {
            return Err(shape_err(format!("optimizer slot '{}' size mismatch", m.name)));
        }
        let t = self.state.step.max(1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let mi = BETA1 * m.first[i] as f64 + (1.0 - BETA1) * g;
            let vi = BETA2 * m.second[i] as f64 + (1.0 - BETA2) * g * g;
            m.first[i] = mi as f32;
            m.second[i] = vi as f32;
            let p = params[i] as f64;
            let step = (mi / c1) / ((vi / c2).sqrt() + EPSILON) + wd * p;
            params[i] = (p - lr * step) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = AdamW::new([("w", 3)], 0.0);
        let mut p = vec![1.0f32, 1.0, 1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.5, -2.0, 0.0], 0.1, false).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut opt = AdamW::new([("w", 1)], 0.5);
        let mut p = vec![2.0f32];
        opt.begin_step();
        opt.update(0, &mut p, &[0.0], 0.1, true).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new([("w", 2)], 0.0);
        let mut p = vec![3.0f32, -4.0];
        for _ in 0..2000 {
            let g: Vec<f32> = p.iter().map(|v| 2.0 * v).collect();
            opt.begin_step();
            opt.update(0, &mut p, &g, 0.01, false).unwrap();
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn rejects_size_mismatch() {
        let mut opt = AdamW::new([("w", 2)], 0.0);
        opt.begin_step();
        assert!(opt.update(0, &mut [0.0], &[0.0], 0.1, false).is_err());
    }
}

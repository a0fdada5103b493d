use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mlp::{Gradients, LayerSpec, Mlp};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A trainable network: online weights, Adam moments and an EMA target copy.
///
/// Single writer. Forward passes on `online` or `target` take `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub spec: LayerSpec,
    pub online: Mlp,
    pub target: Mlp,
    pub adam_m: Mlp,
    pub adam_v: Mlp,
    pub step: u64,
}

impl ParamSet {
    /// He-uniform init from a ChaCha8 stream seeded with `seed`.
    pub fn init(spec: &LayerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_online(spec.clone(), Mlp::he_uniform(spec, &mut rng)))
    }

    pub fn zeros(spec: &LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self::from_online(spec.clone(), Mlp::zeros(spec)))
    }

    pub fn from_online(spec: LayerSpec, online: Mlp) -> Self {
        let zeros = online.zeros_like();
        Self {
            spec,
            target: online.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            online,
            step: 0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.online.parameter_count()
    }

    /// Bias-corrected Adam update of the online weights.
    ///
    /// Rejects the whole update, leaving `self` untouched, if any gradient is
    /// non-finite.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f32) -> Result<()> {
        if !self.online.same_shape(grads) {
            return Err(Error::Shape {
                expected: self.online.parameter_count(),
                got: grads.parameter_count(),
                context: "adam gradients",
            });
        }
        for (l, layer) in grads.layers.iter().enumerate() {
            if layer.weights.iter().chain(&layer.biases).any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    layer: l,
                    context: "adam gradient",
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = (1.0 - ADAM_BETA1.powi(t)) as f32;
        let bc2 = (1.0 - ADAM_BETA2.powi(t)) as f32;
        let (b1, b2, eps) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32, ADAM_EPS as f32);
        for l in 0..grads.layers.len() {
            let g = &grads.layers[l];
            let p = &mut self.online.layers[l];
            let m = &mut self.adam_m.layers[l];
            let v = &mut self.adam_v.layers[l];
            let update = |p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]| {
                for i in 0..p.len() {
                    let gi = g[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            };
            update(&mut p.weights, &mut m.weights, &mut v.weights, &g.weights);
            update(&mut p.biases, &mut m.biases, &mut v.biases, &g.biases);
        }
        Ok(())
    }

    /// `target ← (1 − rate)·target + rate·online`.
    pub fn ema_update(&mut self, rate: f32) -> Result<()> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("ema rate {rate} outside (0, 1]")));
        }
        if rate == 1.0 {
            self.target = self.online.clone();
            return Ok(());
        }
        for (t, o) in self.target.values_mut().zip(self.online.values()) {
            *t += rate * (o - *t);
        }
        Ok(())
    }
}

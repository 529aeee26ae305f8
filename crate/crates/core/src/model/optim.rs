use serde::{Deserialize, Serialize};

use super::real::Real;
use super::ParamLayout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices and embeddings only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warm-up to `peak` over `warmup` steps, then linear decay to 0 at
/// `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    /// Learning rate for the 1-based optimizer step `step`.
    pub fn at(&self, step: u64) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let rest = self.total.saturating_sub(self.warmup);
        if rest == 0 {
            return self.peak;
        }
        let done = step.saturating_sub(self.warmup).min(rest);
        self.peak * (rest - done) as f64 / rest as f64
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.to_f64() * g.to_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, layout: &ParamLayout) -> Self {
        let mut decay = vec![false; layout.total()];
        for t in layout.tensors().iter().filter(|t| t.shape.len() == 2) {
            decay[t.range()].fill(true);
        }
        Self::with_decay_mask(config, decay)
    }

    /// Optimizer over a flat vector where `decay[i]` selects weight decay.
    pub fn with_decay_mask(config: AdamWConfig, decay: Vec<bool>) -> Self {
        let n = decay.len();
        AdamW {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
        }
    }

    pub fn update<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for another layout");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64();
            let m = c.beta1 * self.m[i] as f64 + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.v[i] as f64 + (1.0 - c.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let mut p = params[i].to_f64();
            if self.decay[i] {
                p -= lr * c.weight_decay * p;
            }
            p -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            params[i] = T::from_f64(p);
        }
    }

    /// `step` then interleaved `m`, `v` moments, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.m.len() * 8);
        out.extend_from_slice(&self.step.to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&m.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn restore(&mut self, bytes: &[u8]) -> Result<(), String> {
        let n = self.m.len();
        if bytes.len() != 8 + n * 8 {
            return Err(format!("optimizer state holds {} bytes, expected {}", bytes.len(), 8 + n * 8));
        }
        self.step = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        for (i, chunk) in bytes[8..].chunks_exact(8).enumerate() {
            self.m[i] = f32::from_le_bytes(chunk[..4].try_into().expect("4 bytes"));
            self.v[i] = f32::from_le_bytes(chunk[4..].try_into().expect("4 bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            peak: 1e-3,
            warmup: 10,
            total: 110,
        };
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(5) - 5e-4).abs() < 1e-15);
        assert_eq!(s.at(10), 1e-3);
        assert!((s.at(60) - 5e-4).abs() < 1e-15);
        assert_eq!(s.at(110), 0.0);
        assert_eq!(s.at(500), 0.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut small = vec![0.1f32];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }
}

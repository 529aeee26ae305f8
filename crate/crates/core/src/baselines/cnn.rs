//! Small temporal CNN over `[time, channels]` signal matrices: two blocks of
//! same-padded convolution, ReLU and max-pool 2, then global average
//! pooling and a linear head.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::model::real::{matmul, matmul_nt, matmul_tn_acc};
use crate::model::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub channels: [usize; 2],
    pub kernel: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            channels: [32, 64],
            kernel: 3,
            batch_size: 32,
            steps: 600,
            lr: 3e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CnnLayout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub time: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub config: CnnConfig,
    pub params: Vec<f64>,
    layout: CnnLayout,
}

struct ConvCache {
    cols: Vec<f64>,
    pre: Vec<f64>,
    argmax: Vec<usize>,
}

struct Trace {
    c1: ConvCache,
    c2: ConvCache,
    pooled: Vec<f64>,
    t2: usize,
    logits: Vec<f64>,
}

fn im2col(x: &[f64], t: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut cols = vec![0.0; t * k * c];
    for ti in 0..t {
        for dt in 0..k {
            let src = ti + dt;
            if src < pad || src - pad >= t {
                continue;
            }
            let s = (src - pad) * c;
            cols[ti * k * c + dt * c..][..c].copy_from_slice(&x[s..s + c]);
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], dx: &mut [f64], t: usize, c: usize, k: usize) {
    let pad = k / 2;
    for ti in 0..t {
        for dt in 0..k {
            let src = ti + dt;
            if src < pad || src - pad >= t {
                continue;
            }
            let s = (src - pad) * c;
            for i in 0..c {
                dx[s + i] += dcols[ti * k * c + dt * c + i];
            }
        }
    }
}

impl Cnn {
    pub fn new(time: usize, in_channels: usize, n_classes: usize, config: CnnConfig) -> Result<Self, BaselineError> {
        if time < 4 || in_channels == 0 || n_classes < 2 || config.kernel.is_multiple_of(2) {
            return Err(BaselineError::Shape(
                "CNN needs at least 4 time steps, an odd kernel and two classes".into(),
            ));
        }
        let [c1, c2] = config.channels;
        let k = config.kernel;
        let mut total = 0;
        let mut take = |n: usize| {
            let r = total..total + n;
            total += n;
            r
        };
        let layout = CnnLayout {
            w1: take(k * in_channels * c1),
            b1: take(c1),
            w2: take(k * c1 * c2),
            b2: take(c2),
            wo: take(c2 * n_classes),
            bo: take(n_classes),
        };
        let mut params = vec![0.0; total];
        let mut r = rng::stream(config.seed, &[rng::label("cnn-init")]);
        for (range, fan_in) in [
            (&layout.w1, k * in_channels),
            (&layout.w2, k * c1),
            (&layout.wo, c2),
        ] {
            let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            params[range.clone()].iter_mut().for_each(|p| *p = he.sample(&mut r));
        }
        Ok(Cnn {
            time,
            in_channels,
            n_classes,
            config,
            params,
            layout,
        })
    }

    fn conv_block(&self, x: &[f64], t: usize, cin: usize, w: &Range<usize>, b: &Range<usize>) -> (Vec<f64>, ConvCache) {
        let k = self.config.kernel;
        let cout = b.len();
        let cols = im2col(x, t, cin, k);
        let mut pre = vec![0.0; t * cout];
        matmul(&cols, &self.params[w.clone()], &mut pre, t, k * cin, cout);
        for row in pre.chunks_exact_mut(cout) {
            row.iter_mut().zip(&self.params[b.clone()]).for_each(|(v, &bb)| *v += bb);
        }
        let tp = t / 2;
        let mut out = vec![0.0; tp * cout];
        let mut argmax = vec![0; tp * cout];
        for tt in 0..tp {
            for o in 0..cout {
                let (a, bb) = (pre[2 * tt * cout + o].max(0.0), pre[(2 * tt + 1) * cout + o].max(0.0));
                let (v, idx) = if bb > a { (bb, 2 * tt + 1) } else { (a, 2 * tt) };
                out[tt * cout + o] = v;
                argmax[tt * cout + o] = idx;
            }
        }
        (out, ConvCache { cols, pre, argmax })
    }

    fn conv_block_backward(
        &self,
        cache: &ConvCache,
        dout: &[f64],
        t: usize,
        cin: usize,
        w: &Range<usize>,
        b: &Range<usize>,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let k = self.config.kernel;
        let cout = b.len();
        let mut dpre = vec![0.0; t * cout];
        for (j, &d) in dout.iter().enumerate() {
            let o = j % cout;
            let src = cache.argmax[j] * cout + o;
            if cache.pre[src] > 0.0 {
                dpre[src] += d;
            }
        }
        matmul_tn_acc(&cache.cols, &dpre, &mut grads[w.clone()], k * cin, t, cout);
        for row in dpre.chunks_exact(cout) {
            grads[b.clone()].iter_mut().zip(row).for_each(|(g, &d)| *g += d);
        }
        let mut dcols = vec![0.0; t * k * cin];
        matmul_nt(&dpre, &self.params[w.clone()], &mut dcols, t, cout, k * cin, 0.0);
        let mut dx = vec![0.0; t * cin];
        col2im_acc(&dcols, &mut dx, t, cin, k);
        dx
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let l = &self.layout;
        let [c1, c2] = self.config.channels;
        let (h1, cache1) = self.conv_block(x, self.time, self.in_channels, &l.w1, &l.b1);
        let t1 = self.time / 2;
        let (h2, cache2) = self.conv_block(&h1, t1, c1, &l.w2, &l.b2);
        let t2 = t1 / 2;
        let mut pooled = vec![0.0; c2];
        for row in h2.chunks_exact(c2) {
            pooled.iter_mut().zip(row).for_each(|(p, &v)| *p += v / t2 as f64);
        }
        let mut logits = vec![0.0; self.n_classes];
        matmul(&pooled, &self.params[l.wo.clone()], &mut logits, 1, c2, self.n_classes);
        logits.iter_mut().zip(&self.params[l.bo.clone()]).for_each(|(z, &b)| *z += b);
        Trace {
            c1: cache1,
            c2: cache2,
            pooled,
            t2,
            logits,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).logits
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Vec<usize> {
        inputs
            .iter()
            .map(|x| {
                let z = self.logits(x);
                (0..z.len()).fold(0, |b, c| if z[c] > z[b] { c } else { b })
            })
            .collect()
    }

    /// Weighted cross-entropy `Σ w·ℓ / |idx|` over `idx` and its gradient.
    pub fn loss_and_grad(&self, inputs: &[Vec<f64>], labels: &[usize], weights: &[f64], idx: &[usize]) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let [c1, c2] = self.config.channels;
        let k = self.n_classes;
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for &i in idx {
            let tr = self.trace(&inputs[i]);
            let max = tr.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + tr.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let w = weights[labels[i]] / idx.len() as f64;
            loss += w * (lse - tr.logits[labels[i]]);
            let dz: Vec<f64> = (0..k)
                .map(|c| w * ((tr.logits[c] - lse).exp() - f64::from(u8::from(c == labels[i]))))
                .collect();
            matmul_tn_acc(&tr.pooled, &dz, &mut grads[l.wo.clone()], c2, 1, k);
            grads[l.bo.clone()].iter_mut().zip(&dz).for_each(|(g, &d)| *g += d);
            let mut dpool = vec![0.0; c2];
            matmul_nt(&dz, &self.params[l.wo.clone()], &mut dpool, 1, k, c2, 0.0);
            let dh2: Vec<f64> = (0..tr.t2 * c2).map(|j| dpool[j % c2] / tr.t2 as f64).collect();
            let t1 = self.time / 2;
            let dh1 = self.conv_block_backward(&tr.c2, &dh2, t1, c1, &l.w2, &l.b2, &mut grads);
            self.conv_block_backward(&tr.c1, &dh1, self.time, self.in_channels, &l.w1, &l.b1, &mut grads);
        }
        (loss, grads)
    }
}

/// Trains with AdamW on uniformly sampled mini-batches, weighting each
/// sample by `class_weights[label]`.
pub fn train_cnn(
    inputs: &[Vec<f64>],
    labels: &[usize],
    time: usize,
    n_classes: usize,
    class_weights: Option<&[f64]>,
    config: &CnnConfig,
) -> Result<Cnn, BaselineError> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(BaselineError::Shape("inputs and labels must be non-empty and aligned".into()));
    }
    let width = inputs[0].len();
    if !width.is_multiple_of(time) || inputs.iter().any(|x| x.len() != width || x.iter().any(|v| !v.is_finite())) {
        return Err(BaselineError::Shape("windows must share one finite [time, channels] shape".into()));
    }
    if labels.iter().any(|&y| y >= n_classes) {
        return Err(BaselineError::Shape("label out of range".into()));
    }
    if (0..n_classes).filter(|c| labels.contains(c)).count() < 2 {
        return Err(BaselineError::SingleClass);
    }
    let mut net = Cnn::new(time, width / time, n_classes, config.clone())?;
    let weights: Vec<f64> = class_weights.map_or_else(|| vec![1.0; n_classes], |w| w.to_vec());
    let l = &net.layout;
    let mut decay = vec![false; net.params.len()];
    for r in [&l.w1, &l.w2, &l.wo] {
        decay[r.clone()].fill(true);
    }
    let mut opt = AdamW::with_decay_mask(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        decay,
    );
    let schedule = LrSchedule {
        peak: config.lr,
        warmup: config.steps / 20,
        total: config.steps,
    };
    for step in 0..config.steps {
        let mut r = rng::stream(config.seed, &[rng::label("cnn-batch"), step]);
        let idx: Vec<usize> = (0..config.batch_size).map(|_| r.gen_range(0..inputs.len())).collect();
        let (loss, mut grads) = net.loss_and_grad(inputs, labels, &weights, &idx);
        if !loss.is_finite() {
            return Err(BaselineError::NonFinite { step: step + 1 });
        }
        clip_grad_norm(&mut grads, config.clip_norm);
        opt.update(&mut net.params, &grads, schedule.at(step + 1));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = CnnConfig {
            channels: [3, 4],
            seed: 4,
            ..CnnConfig::default()
        };
        let mut net = Cnn::new(8, 2, 3, cfg).unwrap();
        for (i, p) in net.params.iter_mut().enumerate() {
            *p += 0.01 * ((i * 7919) % 13) as f64;
        }
        let mut r = rng::stream(5, &[]);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..16).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let labels = [0, 2, 1];
        let weights = [1.0, 2.0, 0.5];
        let idx = [0, 1, 2];
        let (_, g) = net.loss_and_grad(&inputs, &labels, &weights, &idx);
        let h = 1e-6;
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = net.loss_and_grad(&inputs, &labels, &weights, &idx).0;
            net.params[i] = orig - h;
            let down = net.loss_and_grad(&inputs, &labels, &weights, &idx).0;
            net.params[i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn learns_a_trend_task_and_is_reproducible() {
        let mut r = rng::stream(6, &[]);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let slope = if c == 0 { -0.2 } else { 0.2 };
            inputs.push((0..20).map(|t| slope * (t / 2) as f64 + r.gen_range(-0.3..0.3)).collect());
            labels.push(c);
        }
        let cfg = CnnConfig {
            channels: [8, 8],
            steps: 150,
            seed: 1,
            ..CnnConfig::default()
        };
        let a = train_cnn(&inputs, &labels, 10, 2, None, &cfg).unwrap();
        let b = train_cnn(&inputs, &labels, 10, 2, None, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let pred = a.predict(&inputs);
        let acc = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
        assert!(acc > 180, "{acc}");
        let mut rev: Vec<Vec<f64>> = inputs.clone();
        rev.reverse();
        let mut rp = a.predict(&rev);
        rp.reverse();
        assert_eq!(rp, pred);
    }
}

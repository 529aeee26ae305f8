//! Forward and backward passes. Sequences are processed independently (in
//! parallel when threads are available) and their gradients summed in batch
//! order, so results do not depend on scheduling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{
    add_bias, col_sum_acc, cross_entropy, cross_entropy_grad, gelu, gelu_grad, layer_norm, layer_norm_backward,
    softmax_row, softmax_row_backward, NormCache,
};
use super::real::{matmul, matmul_nt, matmul_tn_acc, MatMut, MatRef, Real};
use super::{Head, HeadIdx, LayerIdx, Model, ModelError};
use crate::rng;

/// Label value excluded from the MLM loss.
pub const IGNORE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One target per position; [`IGNORE`] where no prediction is scored.
    Mlm(Vec<u32>),
    /// One class per sequence.
    Class(Vec<usize>),
}

/// `size × seq_len` token ids with a key-padding mask (`true` = attend).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub attention: Vec<bool>,
    pub labels: Labels,
}

impl Batch {
    pub fn size(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.ids.len() / self.seq_len
        }
    }

    fn validate<T: Real>(&self, model: &Model<T>) -> Result<(), ModelError> {
        let cfg = model.config();
        let err = |m: String| Err(ModelError::Contract(m));
        if self.seq_len == 0 || self.seq_len > cfg.max_seq_len {
            return err(format!("sequence length {} outside 1..={}", self.seq_len, cfg.max_seq_len));
        }
        if !self.ids.len().is_multiple_of(self.seq_len) || self.attention.len() != self.ids.len() {
            return err("ids and attention mask shapes disagree".into());
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return err(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
        }
        match (&self.labels, cfg.head) {
            (Labels::Mlm(l), Head::Mlm) => {
                if l.len() != self.ids.len() {
                    return err("MLM labels must cover every position".into());
                }
                if l.iter().any(|&t| t != IGNORE && t as usize >= cfg.vocab_size) {
                    return err("MLM label outside vocabulary".into());
                }
            }
            (Labels::Class(l), Head::Classifier { n_classes }) => {
                if l.len() != self.size() {
                    return err("one class label per sequence required".into());
                }
                if l.iter().any(|&c| c >= n_classes) {
                    return err("class label out of range".into());
                }
            }
            _ => return err("label kind does not match model head".into()),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutput {
    pub loss: f64,
    pub correct: usize,
    pub scored: usize,
}

impl EvalOutput {
    pub fn accuracy(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.correct as f64 / self.scored as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Mean MLM cross-entropy over scored positions, or `Σ w·ℓ / B` over
    /// the `B` sequences of a classification batch.
    pub loss: f64,
    pub grads: Vec<T>,
    /// Correct top-1 predictions among `scored` targets.
    pub correct: usize,
    pub scored: usize,
    /// Set when an MLM batch has no scored position: loss and gradients are
    /// then exactly zero.
    pub all_ignored: bool,
}

fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut Option<ChaCha8Rng>) -> Option<Vec<T>> {
    let r = rng.as_mut()?;
    if p == 0.0 {
        return None;
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    Some((0..len).map(|_| if r.gen::<f64>() < p { T::ZERO } else { keep }).collect())
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
}

struct LayerCache<T> {
    input: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    drop_attn: Option<Vec<T>>,
    ln1: NormCache<T>,
    h1: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
    drop_ff: Option<Vec<T>>,
    ln2: NormCache<T>,
}

struct EncoderCache<T> {
    ids: Vec<u32>,
    emb_ln: NormCache<T>,
    drop_emb: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> Model<T> {
    fn p(&self, r: &std::ops::Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    /// Encoder forward for one sequence; returns final hidden states
    /// `[len, hidden]`.
    fn encode(&self, ids: &[u32], attention: &[bool], rng: &mut Option<ChaCha8Rng>) -> (Vec<T>, EncoderCache<T>) {
        let cfg = &self.config;
        let (l, h) = (ids.len(), cfg.hidden_size);
        let lay = &self.layout;
        let tok = self.p(&lay.tok_emb);
        let pos = self.p(&lay.pos_emb);
        let mut x0 = vec![T::ZERO; l * h];
        for (i, &id) in ids.iter().enumerate() {
            let (t, p) = (&tok[id as usize * h..][..h], &pos[i * h..][..h]);
            for j in 0..h {
                x0[i * h + j] = t[j] + p[j];
            }
        }
        let mut x = vec![T::ZERO; l * h];
        let emb_ln = layer_norm(&x0, self.p(&lay.emb_ln_g), self.p(&lay.emb_ln_b), &mut x, h);
        let drop_emb = dropout_mask(l * h, cfg.dropout, rng);
        apply_mask(&mut x, &drop_emb);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in &lay.layers {
            let (out, cache) = self.layer_forward(li, x, attention, rng);
            layers.push(cache);
            x = out;
        }
        (
            x,
            EncoderCache {
                ids: ids.to_vec(),
                emb_ln,
                drop_emb,
                layers,
            },
        )
    }

    fn layer_forward(
        &self,
        li: &LayerIdx,
        input: Vec<T>,
        attention: &[bool],
        rng: &mut Option<ChaCha8Rng>,
    ) -> (Vec<T>, LayerCache<T>) {
        let cfg = &self.config;
        let (l, h, f) = (attention.len(), cfg.hidden_size, cfg.ff_size);
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut qkv = vec![T::ZERO; l * 3 * h];
        matmul(&input, self.p(&li.qkv_w), &mut qkv, l, h, 3 * h);
        add_bias(&mut qkv, self.p(&li.qkv_b));

        let mut probs = vec![T::ZERO; nh * l * l];
        let mut ctx = vec![T::ZERO; l * h];
        for hd in 0..nh {
            let s = &mut probs[hd * l * l..(hd + 1) * l * l];
            let q = MatRef::strided(&qkv, hd * dh, l, dh, 3 * h, 1);
            let kt = MatRef::strided(&qkv, h + hd * dh, l, dh, 3 * h, 1).t();
            T::gemm(scale, q, kt, T::ZERO, MatMut::new(s, l, l));
            for row in s.chunks_exact_mut(l) {
                for (v, &keep) in row.iter_mut().zip(attention) {
                    if !keep {
                        *v = T::NEG_INFINITY;
                    }
                }
                softmax_row(row);
            }
            let v = MatRef::strided(&qkv, 2 * h + hd * dh, l, dh, 3 * h, 1);
            T::gemm(T::ONE, MatRef::new(s, l, l), v, T::ZERO, MatMut::strided(&mut ctx, hd * dh, l, dh, h, 1));
        }

        let mut a = vec![T::ZERO; l * h];
        matmul(&ctx, self.p(&li.out_w), &mut a, l, h, h);
        add_bias(&mut a, self.p(&li.out_b));
        let drop_attn = dropout_mask(l * h, cfg.dropout, rng);
        apply_mask(&mut a, &drop_attn);
        for (v, &x) in a.iter_mut().zip(&input) {
            *v += x;
        }
        let mut h1 = vec![T::ZERO; l * h];
        let ln1 = layer_norm(&a, self.p(&li.ln1_g), self.p(&li.ln1_b), &mut h1, h);

        let mut ff_pre = vec![T::ZERO; l * f];
        matmul(&h1, self.p(&li.ff_in_w), &mut ff_pre, l, h, f);
        add_bias(&mut ff_pre, self.p(&li.ff_in_b));
        let ff_act: Vec<T> = ff_pre.iter().map(|&u| gelu(u)).collect();
        let mut g = vec![T::ZERO; l * h];
        matmul(&ff_act, self.p(&li.ff_out_w), &mut g, l, f, h);
        add_bias(&mut g, self.p(&li.ff_out_b));
        let drop_ff = dropout_mask(l * h, cfg.dropout, rng);
        apply_mask(&mut g, &drop_ff);
        for (v, &x) in g.iter_mut().zip(&h1) {
            *v += x;
        }
        let mut out = vec![T::ZERO; l * h];
        let ln2 = layer_norm(&g, self.p(&li.ln2_g), self.p(&li.ln2_b), &mut out, h);
        (
            out,
            LayerCache {
                input,
                qkv,
                probs,
                ctx,
                drop_attn,
                ln1,
                h1,
                ff_pre,
                ff_act,
                drop_ff,
                ln2,
            },
        )
    }

    fn layer_backward(&self, li: &LayerIdx, c: &LayerCache<T>, dout: &[T], grads: &mut [T]) -> Vec<T> {
        let cfg = &self.config;
        let l = c.input.len() / cfg.hidden_size;
        let (h, f) = (cfg.hidden_size, cfg.ff_size);
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut dr2 = vec![T::ZERO; l * h];
        {
            let (dg, db) = two_mut(grads, &li.ln2_g, &li.ln2_b);
            layer_norm_backward(dout, &c.ln2, self.p(&li.ln2_g), dg, db, &mut dr2, h);
        }
        let mut dg = dr2.clone();
        apply_mask(&mut dg, &c.drop_ff);
        matmul_tn_acc(&c.ff_act, &dg, &mut grads[li.ff_out_w.clone()], f, l, h);
        col_sum_acc(&dg, &mut grads[li.ff_out_b.clone()]);
        let mut du = vec![T::ZERO; l * f];
        matmul_nt(&dg, self.p(&li.ff_out_w), &mut du, l, h, f, T::ZERO);
        for (d, &u) in du.iter_mut().zip(&c.ff_pre) {
            *d *= gelu_grad(u);
        }
        matmul_tn_acc(&c.h1, &du, &mut grads[li.ff_in_w.clone()], h, l, f);
        col_sum_acc(&du, &mut grads[li.ff_in_b.clone()]);
        let mut dh1 = dr2;
        matmul_nt(&du, self.p(&li.ff_in_w), &mut dh1, l, f, h, T::ONE);

        let mut dr1 = vec![T::ZERO; l * h];
        {
            let (dg, db) = two_mut(grads, &li.ln1_g, &li.ln1_b);
            layer_norm_backward(&dh1, &c.ln1, self.p(&li.ln1_g), dg, db, &mut dr1, h);
        }
        let mut da = dr1.clone();
        apply_mask(&mut da, &c.drop_attn);
        matmul_tn_acc(&c.ctx, &da, &mut grads[li.out_w.clone()], h, l, h);
        col_sum_acc(&da, &mut grads[li.out_b.clone()]);
        let mut dctx = vec![T::ZERO; l * h];
        matmul_nt(&da, self.p(&li.out_w), &mut dctx, l, h, h, T::ZERO);

        let mut dqkv = vec![T::ZERO; l * 3 * h];
        let mut ds = vec![T::ZERO; l * l];
        for hd in 0..nh {
            let p = &c.probs[hd * l * l..(hd + 1) * l * l];
            let dctx_h = MatRef::strided(&dctx, hd * dh, l, dh, h, 1);
            let vt = MatRef::strided(&c.qkv, 2 * h + hd * dh, l, dh, 3 * h, 1).t();
            T::gemm(T::ONE, dctx_h, vt, T::ZERO, MatMut::new(&mut ds, l, l));
            T::gemm(
                T::ONE,
                MatRef::new(p, l, l).t(),
                dctx_h,
                T::ZERO,
                MatMut::strided(&mut dqkv, 2 * h + hd * dh, l, dh, 3 * h, 1),
            );
            for (prow, drow) in p.chunks_exact(l).zip(ds.chunks_exact_mut(l)) {
                softmax_row_backward(prow, drow);
            }
            let k = MatRef::strided(&c.qkv, h + hd * dh, l, dh, 3 * h, 1);
            let q = MatRef::strided(&c.qkv, hd * dh, l, dh, 3 * h, 1);
            T::gemm(scale, MatRef::new(&ds, l, l), k, T::ZERO, MatMut::strided(&mut dqkv, hd * dh, l, dh, 3 * h, 1));
            T::gemm(
                scale,
                MatRef::new(&ds, l, l).t(),
                q,
                T::ZERO,
                MatMut::strided(&mut dqkv, h + hd * dh, l, dh, 3 * h, 1),
            );
        }
        matmul_tn_acc(&c.input, &dqkv, &mut grads[li.qkv_w.clone()], h, l, 3 * h);
        col_sum_acc(&dqkv, &mut grads[li.qkv_b.clone()]);
        let mut dx = dr1;
        matmul_nt(&dqkv, self.p(&li.qkv_w), &mut dx, l, 3 * h, h, T::ONE);
        dx
    }

    fn encode_backward(&self, cache: &EncoderCache<T>, mut dx: Vec<T>, grads: &mut [T]) {
        let lay = &self.layout;
        let h = self.config.hidden_size;
        for (li, c) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(li, c, &dx, grads);
        }
        apply_mask(&mut dx, &cache.drop_emb);
        let mut dx0 = vec![T::ZERO; dx.len()];
        {
            let (dg, db) = two_mut(grads, &lay.emb_ln_g, &lay.emb_ln_b);
            layer_norm_backward(&dx, &cache.emb_ln, self.p(&lay.emb_ln_g), dg, db, &mut dx0, h);
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = &dx0[i * h..(i + 1) * h];
            let t = &mut grads[lay.tok_emb.start + id as usize * h..][..h];
            t.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
            let p = &mut grads[lay.pos_emb.start + i * h..][..h];
            p.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
        }
    }

    /// MLM transform + decoder on selected rows of `hidden`.
    fn mlm_head(&self, hidden: &[T], rows: &[usize]) -> (Vec<T>, MlmCache<T>) {
        let HeadIdx::Mlm {
            dense_w,
            dense_b,
            ln_g,
            ln_b,
            dec_w,
            dec_b,
        } = &self.layout.head
        else {
            unreachable!("mlm head requested on classifier model")
        };
        let (h, v, n) = (self.config.hidden_size, self.config.vocab_size, rows.len());
        let mut x = vec![T::ZERO; n * h];
        for (k, &r) in rows.iter().enumerate() {
            x[k * h..(k + 1) * h].copy_from_slice(&hidden[r * h..(r + 1) * h]);
        }
        let mut pre = vec![T::ZERO; n * h];
        matmul(&x, self.p(dense_w), &mut pre, n, h, h);
        add_bias(&mut pre, self.p(dense_b));
        let act: Vec<T> = pre.iter().map(|&u| gelu(u)).collect();
        let mut u = vec![T::ZERO; n * h];
        let ln = layer_norm(&act, self.p(ln_g), self.p(ln_b), &mut u, h);
        let mut logits = vec![T::ZERO; n * v];
        matmul(&u, self.p(dec_w), &mut logits, n, h, v);
        add_bias(&mut logits, self.p(dec_b));
        (logits, MlmCache { x, pre, ln, u })
    }

    fn mlm_head_backward(&self, c: &MlmCache<T>, dlogits: &[T], grads: &mut [T]) -> Vec<T> {
        let HeadIdx::Mlm {
            dense_w,
            dense_b,
            ln_g,
            ln_b,
            dec_w,
            dec_b,
        } = &self.layout.head
        else {
            unreachable!()
        };
        let (h, v) = (self.config.hidden_size, self.config.vocab_size);
        let n = c.x.len() / h;
        matmul_tn_acc(&c.u, dlogits, &mut grads[dec_w.clone()], h, n, v);
        col_sum_acc(dlogits, &mut grads[dec_b.clone()]);
        let mut du = vec![T::ZERO; n * h];
        matmul_nt(dlogits, self.p(dec_w), &mut du, n, v, h, T::ZERO);
        let mut dact = vec![T::ZERO; n * h];
        {
            let (dg, db) = two_mut(grads, ln_g, ln_b);
            layer_norm_backward(&du, &c.ln, self.p(ln_g), dg, db, &mut dact, h);
        }
        for (d, &p) in dact.iter_mut().zip(&c.pre) {
            *d *= gelu_grad(p);
        }
        matmul_tn_acc(&c.x, &dact, &mut grads[dense_w.clone()], h, n, h);
        col_sum_acc(&dact, &mut grads[dense_b.clone()]);
        let mut dx = vec![T::ZERO; n * h];
        matmul_nt(&dact, self.p(dense_w), &mut dx, n, h, h, T::ZERO);
        dx
    }

    fn classifier_head(&self, hidden: &[T], rng: &mut Option<ChaCha8Rng>) -> (Vec<T>, ClsCache<T>) {
        let HeadIdx::Classifier {
            pool_w,
            pool_b,
            out_w,
            out_b,
        } = &self.layout.head
        else {
            unreachable!("classifier head requested on mlm model")
        };
        let h = self.config.hidden_size;
        let k = out_b.len();
        let x = hidden[..h].to_vec();
        let mut pooled = vec![T::ZERO; h];
        matmul(&x, self.p(pool_w), &mut pooled, 1, h, h);
        add_bias(&mut pooled, self.p(pool_b));
        pooled.iter_mut().for_each(|v| *v = v.tanh());
        let drop = dropout_mask(h, self.config.dropout, rng);
        let mut z = pooled.clone();
        apply_mask(&mut z, &drop);
        let mut logits = vec![T::ZERO; k];
        matmul(&z, self.p(out_w), &mut logits, 1, h, k);
        add_bias(&mut logits, self.p(out_b));
        (logits, ClsCache { x, pooled, z, drop })
    }

    fn classifier_head_backward(&self, c: &ClsCache<T>, dlogits: &[T], grads: &mut [T]) -> Vec<T> {
        let HeadIdx::Classifier {
            pool_w,
            pool_b,
            out_w,
            out_b,
        } = &self.layout.head
        else {
            unreachable!()
        };
        let h = self.config.hidden_size;
        let k = dlogits.len();
        matmul_tn_acc(&c.z, dlogits, &mut grads[out_w.clone()], h, 1, k);
        col_sum_acc(dlogits, &mut grads[out_b.clone()]);
        let mut dz = vec![T::ZERO; h];
        matmul_nt(dlogits, self.p(out_w), &mut dz, 1, k, h, T::ZERO);
        apply_mask(&mut dz, &c.drop);
        for (d, &p) in dz.iter_mut().zip(&c.pooled) {
            *d *= T::ONE - p * p;
        }
        matmul_tn_acc(&c.x, &dz, &mut grads[pool_w.clone()], h, 1, h);
        col_sum_acc(&dz, &mut grads[pool_b.clone()]);
        let mut dx = vec![T::ZERO; h];
        matmul_nt(&dz, self.p(pool_w), &mut dx, 1, h, h, T::ZERO);
        dx
    }

    /// Inference logits: `[batch, seq, vocab]` for the MLM head,
    /// `[batch, classes]` for the classifier. No dropout.
    pub fn forward(&self, ids: &[u32], attention: &[bool], seq_len: usize) -> Result<Vec<T>, ModelError> {
        let probe = Batch {
            seq_len,
            ids: ids.to_vec(),
            attention: attention.to_vec(),
            labels: match self.config.head {
                Head::Mlm => Labels::Mlm(vec![IGNORE; ids.len()]),
                Head::Classifier { .. } => Labels::Class(vec![0; ids.len() / seq_len.max(1)]),
            },
        };
        probe.validate(self)?;
        let rows: Vec<usize> = (0..seq_len).collect();
        let out: Vec<Vec<T>> = ids
            .par_chunks(seq_len)
            .zip(attention.par_chunks(seq_len))
            .map(|(s, a)| {
                let (hidden, _) = self.encode(s, a, &mut None);
                match self.config.head {
                    Head::Mlm => self.mlm_head(&hidden, &rows).0,
                    Head::Classifier { .. } => self.classifier_head(&hidden, &mut None).0,
                }
            })
            .collect();
        Ok(out.concat())
    }

    /// MLM logits `[positions, vocab]` at selected positions of one
    /// sequence. No dropout.
    pub fn mlm_logits_at(&self, ids: &[u32], attention: &[bool], positions: &[usize]) -> Vec<T> {
        let (hidden, _) = self.encode(ids, attention, &mut None);
        self.mlm_head(&hidden, positions).0
    }

    /// Loss and accuracy without gradients or dropout.
    pub fn evaluate(&self, batch: &Batch, class_weights: Option<&[f64]>) -> Result<EvalOutput, ModelError> {
        batch.validate(self)?;
        let l = batch.seq_len;
        let v = self.config.vocab_size;
        let parts: Vec<(f64, f64, usize, usize)> = match &batch.labels {
            Labels::Mlm(labels) => (0..batch.size())
                .into_par_iter()
                .map(|b| {
                    let span = b * l..(b + 1) * l;
                    let rows: Vec<usize> = (0..l).filter(|&i| labels[span.start + i] != IGNORE).collect();
                    if rows.is_empty() {
                        return (0.0, 0.0, 0, 0);
                    }
                    let logits = self.mlm_logits_at(&batch.ids[span.clone()], &batch.attention[span.clone()], &rows);
                    let mut loss = 0.0;
                    let mut correct = 0;
                    for (k, &r) in rows.iter().enumerate() {
                        let row = &logits[k * v..(k + 1) * v];
                        let target = labels[span.start + r] as usize;
                        loss += cross_entropy(row, target).1.to_f64();
                        correct += usize::from(argmax(row) == target);
                    }
                    (loss, rows.len() as f64, correct, rows.len())
                })
                .collect(),
            Labels::Class(classes) => (0..batch.size())
                .into_par_iter()
                .map(|b| {
                    let span = b * l..(b + 1) * l;
                    let (hidden, _) = self.encode(&batch.ids[span.clone()], &batch.attention[span], &mut None);
                    let logits = self.classifier_head(&hidden, &mut None).0;
                    let w = class_weights.map_or(1.0, |w| w[classes[b]]);
                    let ce = cross_entropy(&logits, classes[b]).1.to_f64();
                    (w * ce, 1.0, usize::from(argmax(&logits) == classes[b]), 1)
                })
                .collect(),
        };
        let (mut loss, mut weight, mut correct, mut scored) = (0.0, 0.0, 0, 0);
        for (a, w, c, n) in parts {
            loss += a;
            weight += w;
            correct += c;
            scored += n;
        }
        Ok(EvalOutput {
            loss: if weight > 0.0 { loss / weight } else { 0.0 },
            correct,
            scored,
        })
    }

    /// Loss and gradients for a batch. `class_weights` (classifier only)
    /// weights each sequence by its label; `dropout_seed` enables dropout
    /// with a per-sequence stream.
    pub fn loss_and_backward(
        &self,
        batch: &Batch,
        class_weights: Option<&[f64]>,
        dropout_seed: Option<u64>,
    ) -> Result<StepOutput<T>, ModelError> {
        batch.validate(self)?;
        let l = batch.seq_len;
        let n_params = self.params.len();
        let per_seq: Vec<SeqResult<T>> = match &batch.labels {
            Labels::Mlm(labels) => {
                let scored = labels.iter().filter(|&&t| t != IGNORE).count();
                if scored == 0 {
                    return Ok(StepOutput {
                        loss: 0.0,
                        grads: vec![T::ZERO; n_params],
                        correct: 0,
                        scored: 0,
                        all_ignored: true,
                    });
                }
                let scale = T::from_f64(1.0 / scored as f64);
                (0..batch.size())
                    .into_par_iter()
                    .map(|b| {
                        let span = b * l..(b + 1) * l;
                        let mut rng = dropout_seed.map(|s| rng::stream(s, &[b as u64]));
                        self.mlm_sequence(&batch.ids[span.clone()], &batch.attention[span.clone()], &labels[span], scale, &mut rng)
                    })
                    .collect()
            }
            Labels::Class(classes) => {
                let k = match self.config.head {
                    Head::Classifier { n_classes } => n_classes,
                    Head::Mlm => unreachable!("validated"),
                };
                let w = |c: usize| class_weights.map_or(1.0, |w| w[c]);
                if let Some(cw) = class_weights {
                    if cw.len() != k {
                        return Err(ModelError::Contract(format!("{} class weights for {k} classes", cw.len())));
                    }
                }
                let total: f64 = classes.iter().map(|&c| w(c)).sum();
                if !(total > 0.0) {
                    return Err(ModelError::Contract("class weights of the batch sum to zero".into()));
                }
                (0..batch.size())
                    .into_par_iter()
                    .map(|b| {
                        let span = b * l..(b + 1) * l;
                        let mut rng = dropout_seed.map(|s| rng::stream(s, &[b as u64]));
                        let weight = w(classes[b]) / batch.size() as f64;
                        self.class_sequence(&batch.ids[span.clone()], &batch.attention[span], classes[b], weight, &mut rng)
                    })
                    .collect()
            }
        };
        let mut out = StepOutput {
            loss: 0.0,
            grads: vec![T::ZERO; n_params],
            correct: 0,
            scored: 0,
            all_ignored: false,
        };
        for r in per_seq {
            out.loss += r.loss;
            out.correct += r.correct;
            out.scored += r.scored;
            out.grads.iter_mut().zip(&r.grads).for_each(|(g, &d)| *g += d);
        }
        Ok(out)
    }

    fn mlm_sequence(
        &self,
        ids: &[u32],
        attention: &[bool],
        labels: &[u32],
        scale: T,
        rng: &mut Option<ChaCha8Rng>,
    ) -> SeqResult<T> {
        let h = self.config.hidden_size;
        let v = self.config.vocab_size;
        let mut grads = vec![T::ZERO; self.params.len()];
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE).collect();
        if rows.is_empty() {
            return SeqResult {
                loss: 0.0,
                grads,
                correct: 0,
                scored: 0,
            };
        }
        let (hidden, cache) = self.encode(ids, attention, rng);
        let (logits, hc) = self.mlm_head(&hidden, &rows);
        let mut dlogits = vec![T::ZERO; logits.len()];
        let mut loss = 0.0;
        let mut correct = 0;
        for (k, &r) in rows.iter().enumerate() {
            let row = &logits[k * v..(k + 1) * v];
            let target = labels[r] as usize;
            let (lse, ce) = cross_entropy(row, target);
            loss += ce.to_f64() * scale.to_f64();
            if argmax(row) == target {
                correct += 1;
            }
            cross_entropy_grad(row, lse, target, scale, &mut dlogits[k * v..(k + 1) * v]);
        }
        let dx = self.mlm_head_backward(&hc, &dlogits, &mut grads);
        let mut dhidden = vec![T::ZERO; hidden.len()];
        for (k, &r) in rows.iter().enumerate() {
            dhidden[r * h..(r + 1) * h].copy_from_slice(&dx[k * h..(k + 1) * h]);
        }
        self.encode_backward(&cache, dhidden, &mut grads);
        SeqResult {
            loss,
            grads,
            correct,
            scored: rows.len(),
        }
    }

    fn class_sequence(
        &self,
        ids: &[u32],
        attention: &[bool],
        class: usize,
        weight: f64,
        rng: &mut Option<ChaCha8Rng>,
    ) -> SeqResult<T> {
        let h = self.config.hidden_size;
        let mut grads = vec![T::ZERO; self.params.len()];
        let (hidden, cache) = self.encode(ids, attention, rng);
        let (logits, hc) = self.classifier_head(&hidden, rng);
        let (lse, ce) = cross_entropy(&logits, class);
        let mut dlogits = vec![T::ZERO; logits.len()];
        cross_entropy_grad(&logits, lse, class, T::from_f64(weight), &mut dlogits);
        let dx = self.classifier_head_backward(&hc, &dlogits, &mut grads);
        let mut dhidden = vec![T::ZERO; hidden.len()];
        dhidden[..h].copy_from_slice(&dx);
        self.encode_backward(&cache, dhidden, &mut grads);
        SeqResult {
            loss: weight * ce.to_f64(),
            grads,
            correct: usize::from(argmax(&logits) == class),
            scored: 1,
        }
    }
}

struct SeqResult<T> {
    loss: f64,
    grads: Vec<T>,
    correct: usize,
    scored: usize,
}

struct MlmCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    ln: NormCache<T>,
    u: Vec<T>,
}

struct ClsCache<T> {
    x: Vec<T>,
    pooled: Vec<T>,
    z: Vec<T>,
    drop: Option<Vec<T>>,
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Two disjoint mutable sub-slices (`a` must precede `b`).
fn two_mut<'a, T>(
    x: &'a mut [T],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = x.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

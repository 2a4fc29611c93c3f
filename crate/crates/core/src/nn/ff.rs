//! Embedding, masked flatten, ReLU dense stack, sigmoid head.

use std::ops::Range;

use super::ops::{add_bias, bias_grad, sigmoid};
use super::params::{Init, Layout};
use super::scalar::{mm, mm_at_acc, mm_bt_acc};
use super::{Dropout, ModelConfig, Scalar};
use crate::featurize::Batch;

#[derive(Debug, Clone)]
pub(crate) struct FfLayout {
    embed: Range<usize>,
    /// `(weight, bias, in, out)` per dense layer, head last.
    dense: Vec<(Range<usize>, Range<usize>, usize, usize)>,
}

impl FfLayout {
    pub fn new(cfg: &ModelConfig, layout: &mut Layout) -> Self {
        let e = cfg.embed_dim;
        let embed = layout.add("embed.token", &[cfg.vocab_size, e], Init::Embedding);
        let mut dense = Vec::new();
        let mut width = cfg.seq_len * e;
        let dims = cfg.hidden_dims.iter().copied().chain(std::iter::once(1));
        for (i, out) in dims.enumerate() {
            let name = if i == cfg.hidden_dims.len() {
                "head".to_string()
            } else {
                format!("dense{i}")
            };
            let w = layout.add(
                format!("{name}.weight"),
                &[width, out],
                Init::Glorot {
                    fan_in: width,
                    fan_out: out,
                },
            );
            let b = layout.add(format!("{name}.bias"), &[out], Init::Zeros);
            dense.push((w, b, width, out));
            width = out;
        }
        FfLayout { embed, dense }
    }
}

pub(crate) struct FfCache<T> {
    /// Input of every dense layer, including the flattened embedding.
    inputs: Vec<Vec<T>>,
    /// Dropout multipliers applied to each hidden activation.
    drops: Vec<Option<Vec<T>>>,
    pub probs: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(
    l: &FfLayout,
    cfg: &ModelConfig,
    p: &[T],
    batch: &Batch,
    mut dropout: Option<Dropout<'_>>,
) -> FfCache<T> {
    let e = cfg.embed_dim;
    let n = batch.rows;
    let emb = &p[l.embed.clone()];
    let mut x = vec![T::zero(); n * cfg.seq_len * e];
    for r in 0..n {
        let toks = batch.row_tokens(r);
        let mask = batch.row_mask(r);
        let row = &mut x[r * cfg.seq_len * e..(r + 1) * cfg.seq_len * e];
        for (i, (&t, &m)) in toks.iter().zip(mask).enumerate() {
            if m != 0 {
                let t = t as usize;
                row[i * e..(i + 1) * e].copy_from_slice(&emb[t * e..(t + 1) * e]);
            }
        }
    }
    let mut inputs = vec![x];
    let mut drops = Vec::new();
    let last = l.dense.len() - 1;
    let mut logits = Vec::new();
    for (i, (w, b, din, dout)) in l.dense.iter().enumerate() {
        let mut y = vec![T::zero(); n * dout];
        mm(n, *din, *dout, &inputs[i], &p[w.clone()], &mut y);
        add_bias(&mut y, &p[b.clone()]);
        if i == last {
            logits = y;
            break;
        }
        for v in y.iter_mut() {
            *v = v.max(T::zero());
        }
        let drop = dropout
            .as_mut()
            .filter(|d| d.rate > 0.0)
            .map(|d| d.mask::<T>(y.len()));
        if let Some(m) = &drop {
            for (v, k) in y.iter_mut().zip(m) {
                *v *= *k;
            }
        }
        drops.push(drop);
        inputs.push(y);
    }
    FfCache {
        inputs,
        drops,
        probs: logits.into_iter().map(sigmoid).collect(),
    }
}

pub(crate) fn backward<T: Scalar>(
    l: &FfLayout,
    cfg: &ModelConfig,
    p: &[T],
    batch: &Batch,
    cache: &FfCache<T>,
    dlogit: &[T],
    grads: &mut [T],
) {
    let n = batch.rows;
    let mut dy = dlogit.to_vec();
    for i in (0..l.dense.len()).rev() {
        let (w, b, din, dout) = &l.dense[i];
        let x = &cache.inputs[i];
        mm_at_acc(*din, n, *dout, x, &dy, &mut grads[w.clone()]);
        bias_grad(&dy, &mut grads[b.clone()]);
        let mut dx = vec![T::zero(); n * din];
        mm_bt_acc(n, *dout, *din, &dy, &p[w.clone()], &mut dx);
        if i > 0 {
            // `x` is the (dropped-out) ReLU output of layer i - 1.
            let drop = &cache.drops[i - 1];
            for (j, (d, &v)) in dx.iter_mut().zip(x).enumerate() {
                if v <= T::zero() {
                    *d = T::zero();
                } else if let Some(m) = drop {
                    *d *= m[j];
                }
            }
        }
        dy = dx;
    }
    let e = cfg.embed_dim;
    let gemb = &mut grads[l.embed.clone()];
    for r in 0..n {
        let toks = batch.row_tokens(r);
        let mask = batch.row_mask(r);
        let row = &dy[r * cfg.seq_len * e..(r + 1) * cfg.seq_len * e];
        for (i, (&t, &m)) in toks.iter().zip(mask).enumerate() {
            if m != 0 {
                let t = t as usize;
                for (g, &d) in gemb[t * e..(t + 1) * e]
                    .iter_mut()
                    .zip(&row[i * e..(i + 1) * e])
                {
                    *g += d;
                }
            }
        }
    }
}

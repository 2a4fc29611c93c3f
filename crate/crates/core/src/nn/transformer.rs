//! Transformer encoder over the valid tokens of each row.
//!
//! Rows are packed: the valid positions of every row are gathered into one
//! `N × d` matrix so projections and feed-forward layers run as single
//! matrix products, while attention runs per row and head over that row's
//! valid tokens only. The last layer computes its output for the
//! classification token alone, since nothing else reaches the head.

use std::ops::Range;

use super::ops::{
    add_bias, bias_grad, gelu, gelu_grad, layer_norm, layer_norm_backward, sigmoid, softmax,
};
use super::params::{Init, Layout};
use super::scalar::{mm, mm_at_acc, mm_bt_acc};
use super::{Dropout, ModelConfig, Scalar};
use crate::error::{Error, Result};
use crate::featurize::Batch;

#[derive(Debug, Clone)]
struct LayerLayout {
    qkv_w: Range<usize>,
    qkv_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    ff1_w: Range<usize>,
    ff1_b: Range<usize>,
    ff2_w: Range<usize>,
    ff2_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct TfLayout {
    tok: Range<usize>,
    pos: Range<usize>,
    emb_g: Range<usize>,
    emb_b: Range<usize>,
    layers: Vec<LayerLayout>,
    final_g: Option<Range<usize>>,
    final_b: Option<Range<usize>>,
    head_w: Range<usize>,
    head_b: Range<usize>,
}

impl TfLayout {
    pub fn new(cfg: &ModelConfig, l: &mut Layout) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim;
        let glorot = |i, o| Init::Glorot {
            fan_in: i,
            fan_out: o,
        };
        let tok = l.add("embed.token", &[cfg.vocab_size, d], Init::Embedding);
        let pos_init = if cfg.sinusoidal_positions {
            Init::Sinusoidal
        } else {
            Init::Embedding
        };
        let pos = l.add("embed.position", &[cfg.seq_len, d], pos_init);
        let emb_g = l.add("embed.norm.gain", &[d], Init::Ones);
        let emb_b = l.add("embed.norm.bias", &[d], Init::Zeros);
        let layers = (0..cfg.num_layers)
            .map(|i| LayerLayout {
                qkv_w: l.add(
                    format!("layer{i}.attn.qkv.weight"),
                    &[d, 3 * d],
                    glorot(d, d),
                ),
                qkv_b: l.add(format!("layer{i}.attn.qkv.bias"), &[3 * d], Init::Zeros),
                out_w: l.add(format!("layer{i}.attn.out.weight"), &[d, d], glorot(d, d)),
                out_b: l.add(format!("layer{i}.attn.out.bias"), &[d], Init::Zeros),
                ln1_g: l.add(format!("layer{i}.norm1.gain"), &[d], Init::Ones),
                ln1_b: l.add(format!("layer{i}.norm1.bias"), &[d], Init::Zeros),
                ff1_w: l.add(format!("layer{i}.ffn.in.weight"), &[d, f], glorot(d, f)),
                ff1_b: l.add(format!("layer{i}.ffn.in.bias"), &[f], Init::Zeros),
                ff2_w: l.add(format!("layer{i}.ffn.out.weight"), &[f, d], glorot(f, d)),
                ff2_b: l.add(format!("layer{i}.ffn.out.bias"), &[d], Init::Zeros),
                ln2_g: l.add(format!("layer{i}.norm2.gain"), &[d], Init::Ones),
                ln2_b: l.add(format!("layer{i}.norm2.bias"), &[d], Init::Zeros),
            })
            .collect();
        let (final_g, final_b) = if cfg.pre_norm {
            (
                Some(l.add("final.norm.gain", &[d], Init::Ones)),
                Some(l.add("final.norm.bias", &[d], Init::Zeros)),
            )
        } else {
            (None, None)
        };
        let head_w = l.add("head.weight", &[d], glorot(d, 1));
        let head_b = l.add("head.bias", &[1], Init::Zeros);
        TfLayout {
            tok,
            pos,
            emb_g,
            emb_b,
            layers,
            final_g,
            final_b,
            head_w,
            head_b,
        }
    }
}

/// Normalized values and reciprocal deviations of one layer norm.
struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> NormCache<T> {
    fn apply(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, Self) {
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); x.len() / d];
        layer_norm(x, d, g, b, &mut y, &mut xhat, &mut rstd);
        (y, NormCache { xhat, rstd })
    }

    fn backward(&self, dy: &[T], d: usize, g: &[T], dg: &mut [T], db: &mut [T]) -> Vec<T> {
        let mut dx = vec![T::zero(); dy.len()];
        layer_norm_backward(dy, d, g, &self.xhat, &self.rstd, dg, db, &mut dx, false);
        dx
    }
}

struct LayerCache<T> {
    /// Input of the attention projections: the layer input, or its
    /// normalization under pre-norm.
    attn_in: Vec<T>,
    norm_in: Option<NormCache<T>>,
    qkv: Vec<T>,
    /// Attention probabilities, row by row and head by head.
    probs: Vec<T>,
    ctx: Vec<T>,
    drop_attn: Option<Vec<T>>,
    /// Post-norm: first residual norm. Pre-norm: norm before the FFN.
    norm_mid: NormCache<T>,
    /// Input of the first FFN product.
    ffn_in: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    drop_ffn: Option<Vec<T>>,
    /// Post-norm only: second residual norm.
    norm_out: Option<NormCache<T>>,
    /// Query rows, as indices into the packed token rows.
    queries: Vec<usize>,
}

pub(crate) struct TfCache<T> {
    /// Packed row start and length per batch row.
    spans: Vec<(usize, usize)>,
    tokens: Vec<(usize, usize)>,
    norm_emb: NormCache<T>,
    layers: Vec<LayerCache<T>>,
    norm_final: Option<NormCache<T>>,
    cls: Vec<T>,
    pub probs: Vec<T>,
}

fn gather<T: Scalar>(x: &[T], d: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

fn apply_drop<T: Scalar>(x: &mut [T], drop: &Option<Vec<T>>) {
    if let Some(m) = drop {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= *k;
        }
    }
}

/// Query row range of batch row `r`, in query space.
fn query_span(spans: &[(usize, usize)], r: usize, all: bool) -> (usize, usize) {
    if all {
        spans[r]
    } else {
        (r, 1)
    }
}

pub(crate) fn forward<T: Scalar>(
    l: &TfLayout,
    cfg: &ModelConfig,
    p: &[T],
    batch: &Batch,
    mut dropout: Option<Dropout<'_>>,
) -> Result<TfCache<T>> {
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut spans = Vec::with_capacity(batch.rows);
    let mut tokens = Vec::new();
    for r in 0..batch.rows {
        let mask = batch.row_mask(r);
        if mask.first() != Some(&1) {
            return Err(Error::ShapeMismatch(format!(
                "row {r} has a masked classification token"
            )));
        }
        let start = tokens.len();
        for (i, (&t, &m)) in batch.row_tokens(r).iter().zip(mask).enumerate() {
            if m != 0 {
                tokens.push((t as usize, i));
            }
        }
        spans.push((start, tokens.len() - start));
    }
    let n = tokens.len();

    let tok = &p[l.tok.clone()];
    let pos = &p[l.pos.clone()];
    let mut e = vec![T::zero(); n * d];
    for (row, &(t, i)) in e.chunks_exact_mut(d).zip(&tokens) {
        for k in 0..d {
            row[k] = tok[t * d + k] + pos[i * d + k];
        }
    }
    let (mut x, norm_emb) = NormCache::apply(&e, d, &p[l.emb_g.clone()], &p[l.emb_b.clone()]);

    let mut layers = Vec::with_capacity(l.layers.len());
    for (li, ll) in l.layers.iter().enumerate() {
        let all = li + 1 < l.layers.len();
        let queries: Vec<usize> = if all {
            (0..n).collect()
        } else {
            spans.iter().map(|&(s, _)| s).collect()
        };
        let nq = queries.len();

        let (attn_in, norm_in) = if cfg.pre_norm {
            let (u, c) = NormCache::apply(&x, d, &p[ll.ln1_g.clone()], &p[ll.ln1_b.clone()]);
            (u, Some(c))
        } else {
            (x.clone(), None)
        };
        let mut qkv = vec![T::zero(); n * 3 * d];
        mm(n, d, 3 * d, &attn_in, &p[ll.qkv_w.clone()], &mut qkv);
        add_bias(&mut qkv, &p[ll.qkv_b.clone()]);

        let mut probs = Vec::new();
        let mut ctx = vec![T::zero(); nq * d];
        for (r, &(s, len)) in spans.iter().enumerate() {
            let (qs, qn) = query_span(&spans, r, all);
            for h in 0..heads {
                let base = probs.len();
                probs.resize(base + qn * len, T::zero());
                let sc = &mut probs[base..];
                T::gemm(
                    qn,
                    dh,
                    len,
                    scale,
                    &qkv[s * 3 * d + h * dh..],
                    (3 * d) as isize,
                    1,
                    &qkv[s * 3 * d + d + h * dh..],
                    1,
                    (3 * d) as isize,
                    T::zero(),
                    sc,
                    len as isize,
                    1,
                );
                for row in sc.chunks_exact_mut(len) {
                    softmax(row);
                }
                T::gemm(
                    qn,
                    len,
                    dh,
                    T::one(),
                    &probs[base..],
                    len as isize,
                    1,
                    &qkv[s * 3 * d + 2 * d + h * dh..],
                    (3 * d) as isize,
                    1,
                    T::zero(),
                    &mut ctx[qs * d + h * dh..],
                    d as isize,
                    1,
                );
            }
        }

        let mut a = vec![T::zero(); nq * d];
        mm(nq, d, d, &ctx, &p[ll.out_w.clone()], &mut a);
        add_bias(&mut a, &p[ll.out_b.clone()]);
        let drop_attn = dropout
            .as_mut()
            .filter(|dr| dr.rate > 0.0)
            .map(|dr| dr.mask::<T>(a.len()));
        apply_drop(&mut a, &drop_attn);

        let mut h = if all {
            x.clone()
        } else {
            gather(&x, d, &queries)
        };
        for (v, &av) in h.iter_mut().zip(&a) {
            *v += av;
        }

        let (h, ffn_in, norm_mid) = if cfg.pre_norm {
            let (w, c) = NormCache::apply(&h, d, &p[ll.ln2_g.clone()], &p[ll.ln2_b.clone()]);
            (h, w, c)
        } else {
            let (hn, c) = NormCache::apply(&h, d, &p[ll.ln1_g.clone()], &p[ll.ln1_b.clone()]);
            (hn.clone(), hn, c)
        };

        let f = cfg.ffn_dim;
        let mut pre_act = vec![T::zero(); nq * f];
        mm(nq, d, f, &ffn_in, &p[ll.ff1_w.clone()], &mut pre_act);
        add_bias(&mut pre_act, &p[ll.ff1_b.clone()]);
        let act: Vec<T> = pre_act.iter().map(|&v| gelu(v)).collect();
        let mut f2 = vec![T::zero(); nq * d];
        mm(nq, f, d, &act, &p[ll.ff2_w.clone()], &mut f2);
        add_bias(&mut f2, &p[ll.ff2_b.clone()]);
        let drop_ffn = dropout
            .as_mut()
            .filter(|dr| dr.rate > 0.0)
            .map(|dr| dr.mask::<T>(f2.len()));
        apply_drop(&mut f2, &drop_ffn);

        let mut out = h;
        for (v, &fv) in out.iter_mut().zip(&f2) {
            *v += fv;
        }
        let norm_out = if cfg.pre_norm {
            None
        } else {
            let (y, c) = NormCache::apply(&out, d, &p[ll.ln2_g.clone()], &p[ll.ln2_b.clone()]);
            out = y;
            Some(c)
        };
        x = out;
        layers.push(LayerCache {
            attn_in,
            norm_in,
            qkv,
            probs,
            ctx,
            drop_attn,
            norm_mid,
            ffn_in,
            pre_act,
            act,
            drop_ffn,
            norm_out,
            queries,
        });
    }

    let (cls, norm_final) = match (&l.final_g, &l.final_b) {
        (Some(g), Some(b)) => {
            let (y, c) = NormCache::apply(&x, d, &p[g.clone()], &p[b.clone()]);
            (y, Some(c))
        }
        _ => (x, None),
    };
    let w = &p[l.head_w.clone()];
    let b = p[l.head_b.start];
    let probs = cls
        .chunks_exact(d)
        .map(|row| sigmoid(row.iter().zip(w).map(|(&a, &c)| a * c).sum::<T>() + b))
        .collect();
    Ok(TfCache {
        spans,
        tokens,
        norm_emb,
        layers,
        norm_final,
        cls,
        probs,
    })
}

pub(crate) fn backward<T: Scalar>(
    l: &TfLayout,
    cfg: &ModelConfig,
    p: &[T],
    cache: &TfCache<T>,
    dlogit: &[T],
    grads: &mut [T],
) {
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let n = cache.tokens.len();
    let spans = &cache.spans;

    let w = &p[l.head_w.clone()];
    let mut dx = vec![T::zero(); cache.cls.len()];
    for (r, (row, drow)) in cache
        .cls
        .chunks_exact(d)
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let g = dlogit[r];
        grads[l.head_b.start] += g;
        for k in 0..d {
            grads[l.head_w.start + k] += g * row[k];
            drow[k] = g * w[k];
        }
    }
    if let (Some(c), Some(gr), Some(br)) = (&cache.norm_final, &l.final_g, &l.final_b) {
        let (dg, db) = split_two(grads, gr.clone(), br.clone());
        dx = c.backward(&dx, d, &p[gr.clone()], dg, db);
    }

    for (li, (ll, lc)) in l.layers.iter().zip(&cache.layers).enumerate().rev() {
        let all = li + 1 < l.layers.len();
        let nq = lc.queries.len();

        // dx holds the gradient of the layer output at the query rows.
        let mut d_out = dx;
        if let Some(c) = &lc.norm_out {
            let (dg, db) = split_two(grads, ll.ln2_g.clone(), ll.ln2_b.clone());
            d_out = c.backward(&d_out, d, &p[ll.ln2_g.clone()], dg, db);
        }
        // d_out: gradient of the second residual sum.
        let mut df2 = d_out.clone();
        apply_drop(&mut df2, &lc.drop_ffn);
        mm_at_acc(f, nq, d, &lc.act, &df2, &mut grads[ll.ff2_w.clone()]);
        bias_grad(&df2, &mut grads[ll.ff2_b.clone()]);
        let mut dact = vec![T::zero(); nq * f];
        mm_bt_acc(nq, d, f, &df2, &p[ll.ff2_w.clone()], &mut dact);
        for (g, &z) in dact.iter_mut().zip(&lc.pre_act) {
            *g *= gelu_grad(z);
        }
        mm_at_acc(d, nq, f, &lc.ffn_in, &dact, &mut grads[ll.ff1_w.clone()]);
        bias_grad(&dact, &mut grads[ll.ff1_b.clone()]);
        let mut dffn_in = vec![T::zero(); nq * d];
        mm_bt_acc(nq, f, d, &dact, &p[ll.ff1_w.clone()], &mut dffn_in);

        // Gradient of the first residual sum (input + attention).
        let d_res1 = if cfg.pre_norm {
            let (dg, db) = split_two(grads, ll.ln2_g.clone(), ll.ln2_b.clone());
            let dn = lc
                .norm_mid
                .backward(&dffn_in, d, &p[ll.ln2_g.clone()], dg, db);
            let mut r = d_out;
            for (v, &g) in r.iter_mut().zip(&dn) {
                *v += g;
            }
            r
        } else {
            let mut dh = dffn_in;
            for (v, &g) in dh.iter_mut().zip(&d_out) {
                *v += g;
            }
            let (dg, db) = split_two(grads, ll.ln1_g.clone(), ll.ln1_b.clone());
            lc.norm_mid.backward(&dh, d, &p[ll.ln1_g.clone()], dg, db)
        };

        let mut da = d_res1.clone();
        apply_drop(&mut da, &lc.drop_attn);
        mm_at_acc(d, nq, d, &lc.ctx, &da, &mut grads[ll.out_w.clone()]);
        bias_grad(&da, &mut grads[ll.out_b.clone()]);
        let mut dctx = vec![T::zero(); nq * d];
        mm_bt_acc(nq, d, d, &da, &p[ll.out_w.clone()], &mut dctx);

        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut off = 0;
        for (r, &(s, len)) in spans.iter().enumerate() {
            let (qs, qn) = query_span(spans, r, all);
            for h in 0..heads {
                let probs = &lc.probs[off..off + qn * len];
                off += qn * len;
                // dV += Pᵀ dctx
                T::gemm(
                    len,
                    qn,
                    dh,
                    T::one(),
                    probs,
                    1,
                    len as isize,
                    &dctx[qs * d + h * dh..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dqkv[s * 3 * d + 2 * d + h * dh..],
                    (3 * d) as isize,
                    1,
                );
                // dP = dctx Vᵀ
                let mut ds = vec![T::zero(); qn * len];
                T::gemm(
                    qn,
                    dh,
                    len,
                    T::one(),
                    &dctx[qs * d + h * dh..],
                    d as isize,
                    1,
                    &lc.qkv[s * 3 * d + 2 * d + h * dh..],
                    1,
                    (3 * d) as isize,
                    T::zero(),
                    &mut ds,
                    len as isize,
                    1,
                );
                for (dr, pr) in ds.chunks_exact_mut(len).zip(probs.chunks_exact(len)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                // dQ = scale dS K
                T::gemm(
                    qn,
                    len,
                    dh,
                    scale,
                    &ds,
                    len as isize,
                    1,
                    &lc.qkv[s * 3 * d + d + h * dh..],
                    (3 * d) as isize,
                    1,
                    T::one(),
                    &mut dqkv[s * 3 * d + h * dh..],
                    (3 * d) as isize,
                    1,
                );
                // dK = scale dSᵀ Q
                T::gemm(
                    len,
                    qn,
                    dh,
                    scale,
                    &ds,
                    1,
                    len as isize,
                    &lc.qkv[s * 3 * d + h * dh..],
                    (3 * d) as isize,
                    1,
                    T::one(),
                    &mut dqkv[s * 3 * d + d + h * dh..],
                    (3 * d) as isize,
                    1,
                );
            }
        }

        mm_at_acc(
            d,
            n,
            3 * d,
            &lc.attn_in,
            &dqkv,
            &mut grads[ll.qkv_w.clone()],
        );
        bias_grad(&dqkv, &mut grads[ll.qkv_b.clone()]);
        let mut din = vec![T::zero(); n * d];
        mm_bt_acc(n, 3 * d, d, &dqkv, &p[ll.qkv_w.clone()], &mut din);
        if let Some(c) = &lc.norm_in {
            let (dg, db) = split_two(grads, ll.ln1_g.clone(), ll.ln1_b.clone());
            din = c.backward(&din, d, &p[ll.ln1_g.clone()], dg, db);
        }
        for (qi, &row) in lc.queries.iter().enumerate() {
            for k in 0..d {
                din[row * d + k] += d_res1[qi * d + k];
            }
        }
        dx = din;
    }

    let (dg, db) = split_two(grads, l.emb_g.clone(), l.emb_b.clone());
    let de = cache.norm_emb.backward(&dx, d, &p[l.emb_g.clone()], dg, db);
    for (row, &(t, i)) in de.chunks_exact(d).zip(&cache.tokens) {
        for k in 0..d {
            grads[l.tok.start + t * d + k] += row[k];
            grads[l.pos.start + i * d + k] += row[k];
        }
    }
}

/// Disjoint mutable views of two parameter ranges, `a` before `b`.
fn split_two<T>(buf: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

//! Streaming forward pass and partial attention-row recomputation.
//!
//! The fast pass never stores an attention matrix: each output row is built
//! with a blockwise online softmax. It keeps the input hidden states and keys
//! of every layer, which is enough to recompute the text and anchor rows of
//! every attention matrix afterwards at a cost of `(|Q| + 1) * T * d_h` score
//! products per head instead of `T^2 * d_h`.

use ndarray::{s, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};

use super::graph::embed;
use super::params::LayerIdx;
use super::{Model, SequenceLayout, VisualTokens};
use crate::autograd::{Tape, LAYER_NORM_EPS};
use crate::error::{Error, Result};

const BLOCK: usize = 32;

/// Activations cached by [`Model::forward_fast`].
#[derive(Debug, Clone)]
pub struct FastForward {
    pub layout: SequenceLayout,
    /// `L + 1` hidden states, `T x d`.
    pub hidden: Vec<Array2<f64>>,
    /// Per layer, the keys of every head side by side (`T x d`).
    pub keys: Vec<Array2<f64>>,
}

/// Rows recovered by [`anchor_rows_partial`].
#[derive(Debug, Clone)]
pub struct PartialRows {
    /// `L x H x |V|`.
    pub anchor_attn: Array3<f64>,
    /// `L x H x |Q| x |V|`.
    pub query_attn: Array4<f64>,
    /// Sequence positions whose rows were recomputed.
    pub rows: Vec<usize>,
    /// Query-key multiply-adds spent on scores.
    pub score_macs: u64,
}

pub(crate) fn layer_norm_rows(x: ArrayView2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> Array2<f64> {
    let c = x.ncols() as f64;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rs * gain[j] + bias[j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Causal attention for one head with an online softmax over key blocks.
fn stream_head(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, scale: f64) -> Array2<f64> {
    let (t, dh) = q.dim();
    let q = q.as_slice().expect("standard layout");
    let k = k.as_slice().expect("standard layout");
    let v = v.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((t, dh));
    let mut scores = [0.0f64; BLOCK];
    let mut acc = vec![0.0f64; dh];
    for i in 0..t {
        let qi = &q[i * dh..(i + 1) * dh];
        let mut m = f64::NEG_INFINITY;
        let mut l = 0.0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut start = 0;
        while start <= i {
            let end = (start + BLOCK).min(i + 1);
            let mut bm = f64::NEG_INFINITY;
            for (slot, j) in (start..end).enumerate() {
                let kj = &k[j * dh..(j + 1) * dh];
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[slot] = s;
                bm = bm.max(s);
            }
            let new_m = m.max(bm);
            let corr = (m - new_m).exp();
            l *= corr;
            acc.iter_mut().for_each(|a| *a *= corr);
            for (slot, j) in (start..end).enumerate() {
                let e = (scores[slot] - new_m).exp();
                l += e;
                let vj = &v[j * dh..(j + 1) * dh];
                acc.iter_mut().zip(vj).for_each(|(a, b)| *a += e * b);
            }
            m = new_m;
            start = end;
        }
        let mut o = out.row_mut(i);
        for (dst, a) in o.iter_mut().zip(&acc) {
            *dst = a / l;
        }
    }
    out
}

pub(crate) fn forward(model: &Model, visual: &VisualTokens, query: &[u32], layout: SequenceLayout) -> FastForward {
    let c = model.config();
    let p = model.params();
    let d = c.d_model;
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // The embedding sum is cheap; reuse the tape version so both paths agree exactly.
    let mut tape = Tape::new();
    let vars = super::graph::param_vars(&mut tape, &embed_only(p), false);
    let h0 = embed(&mut tape, &vars, visual, query);
    let mut x = tape.value(h0).clone();

    let mut hidden = vec![x.clone()];
    let mut keys = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let li = LayerIdx::new(l);
        let xn = layer_norm_rows(x.view(), p.get(li.ln1_gain()).row(0), p.get(li.ln1_bias()).row(0));
        let qkv = xn.dot(p.get(li.qkv_weight())) + p.get(li.qkv_bias()).row(0);
        let mut cat = Array2::<f64>::zeros((layout.total_len(), d));
        for h in 0..c.heads {
            let qh = qkv.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
            let kh = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]).to_owned();
            let vh = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).to_owned();
            let o = stream_head(&qh, &kh, &vh, scale);
            cat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&o);
        }
        keys.push(qkv.slice(s![.., d..2 * d]).to_owned());
        let a = cat.dot(p.get(li.out_weight())) + p.get(li.out_bias()).row(0);
        let x2 = &x + &a;
        let xn2 = layer_norm_rows(x2.view(), p.get(li.ln2_gain()).row(0), p.get(li.ln2_bias()).row(0));
        let f = (xn2.dot(p.get(li.ffn_in_weight())) + p.get(li.ffn_in_bias()).row(0)).mapv(gelu);
        let f = f.dot(p.get(li.ffn_out_weight())) + p.get(li.ffn_out_bias()).row(0);
        x = x2 + f;
        hidden.push(x.clone());
    }
    FastForward { layout, hidden, keys }
}

/// Only the embedding tables, so the fast path does not clone the whole model.
fn embed_only(p: &super::Params) -> super::Params {
    super::Params::from_tensors(p.tensors()[..6].to_vec())
}

/// Recompute the text-token and anchor rows of every attention matrix.
pub fn anchor_rows_partial(model: &Model, ff: &FastForward) -> Result<PartialRows> {
    let c = model.config();
    let p = model.params();
    if ff.hidden.len() != c.layers + 1 || ff.keys.len() != c.layers {
        return Err(Error::MissingCache(format!(
            "need {} hidden states and {} key caches, have {} and {}",
            c.layers + 1,
            c.layers,
            ff.hidden.len(),
            ff.keys.len()
        )));
    }
    let layout = ff.layout;
    let t = layout.total_len();
    if ff.hidden.iter().any(|h| h.nrows() != t) || ff.keys.iter().any(|k| k.nrows() != t) {
        return Err(Error::MissingCache("cached activations do not match the layout".into()));
    }
    let d = c.d_model;
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let vlen = layout.visual_len;
    let qlen = layout.query_len;
    let mut rows: Vec<usize> = layout.query_positions().collect();
    rows.push(layout.anchor_pos());

    let mut anchor = Array3::<f64>::zeros((c.layers, c.heads, vlen));
    let mut query = Array4::<f64>::zeros((c.layers, c.heads, qlen, vlen));
    let mut macs = 0u64;
    let mut probs = vec![0.0f64; t];
    for l in 0..c.layers {
        let li = LayerIdx::new(l);
        let x = ff.hidden[l].select(Axis(0), &rows);
        let xn = layer_norm_rows(x.view(), p.get(li.ln1_gain()).row(0), p.get(li.ln1_bias()).row(0));
        let wq = p.get(li.qkv_weight()).slice(s![.., 0..d]);
        let bq = p.get(li.qkv_bias()).slice(s![0, 0..d]);
        let q = xn.dot(&wq) + bq;
        let keys = &ff.keys[l];
        for h in 0..c.heads {
            let kh = keys.slice(s![.., h * dh..(h + 1) * dh]);
            for (r, &pos) in rows.iter().enumerate() {
                let qr = q.slice(s![r, h * dh..(h + 1) * dh]);
                let mut m = f64::NEG_INFINITY;
                for j in 0..=pos {
                    let s = qr.iter().zip(kh.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
                    probs[j] = s;
                    m = m.max(s);
                }
                macs += ((pos + 1) * dh) as u64;
                let mut sum = 0.0;
                for pj in probs.iter_mut().take(pos + 1) {
                    *pj = (*pj - m).exp();
                    sum += *pj;
                }
                let dst = if r < qlen { query.slice_mut(s![l, h, r, ..]) } else { anchor.slice_mut(s![l, h, ..]) };
                let mut dst = dst;
                for j in 0..vlen.min(pos + 1) {
                    dst[j] = probs[j] / sum;
                }
            }
        }
    }
    Ok(PartialRows { anchor_attn: anchor, query_attn: query, rows, score_macs: macs })
}

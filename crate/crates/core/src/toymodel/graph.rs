//! Tape construction of the forward pass.

use ndarray::{Array3, Array4};

use super::params::{LayerIdx, Params, EMBED_COL, EMBED_ROW, EMBED_SPECIAL, EMBED_TEXT, EMBED_TEXT_POS, EMBED_VISUAL};
use super::{ForwardTrace, ModelConfig, SequenceLayout, TraceOptions, VisualTokens, ANCHOR_TOKENS};
use crate::autograd::{Tape, Var};

/// Put every parameter on the tape, as leaves when gradients are wanted.
pub(crate) fn param_vars(tape: &mut Tape, params: &Params, differentiable: bool) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|t| if differentiable { tape.leaf(t.value.clone()) } else { tape.constant(t.value.clone()) })
        .collect()
}

pub(crate) struct GraphForward {
    /// `L + 1` hidden-state nodes.
    pub hidden: Vec<Var>,
    /// `L * H` attention matrices, layer-major.
    pub attn: Vec<Var>,
    pub heads: usize,
}

impl GraphForward {
    pub fn attn(&self, layer: usize, head: usize) -> Var {
        self.attn[layer * self.heads + head]
    }

    pub fn trace(&self, tape: &Tape, layout: SequenceLayout, opts: TraceOptions) -> ForwardTrace {
        let layers = self.hidden.len() - 1;
        let heads = self.heads;
        let v = layout.visual_len;
        let q = layout.query_len;
        let a = layout.anchor_pos();
        let mut anchor = Array3::<f64>::zeros((layers, heads, v));
        let mut query = opts.query_rows.then(|| Array4::<f64>::zeros((layers, heads, q, v)));
        for l in 0..layers {
            for h in 0..heads {
                let p = tape.value(self.attn(l, h));
                for j in 0..v {
                    anchor[[l, h, j]] = p[[a, j]];
                }
                if let Some(qa) = query.as_mut() {
                    for i in 0..q {
                        let row = layout.query_pos(i);
                        for j in 0..v {
                            qa[[l, h, i, j]] = p[[row, j]];
                        }
                    }
                }
            }
        }
        ForwardTrace {
            layout,
            hidden: self.hidden.iter().map(|h| tape.value(*h).clone()).collect(),
            anchor_attn: anchor,
            query_attn: query,
            full_attn: opts.full_rows.then(|| self.attn.iter().map(|p| tape.value(*p).clone()).collect()),
        }
    }
}

pub(crate) fn embed(tape: &mut Tape, vars: &[Var], visual: &VisualTokens, query: &[u32]) -> Var {
    let ids: Vec<usize> = visual.ids.iter().map(|&i| i as usize).collect();
    let rows: Vec<usize> = (0..visual.len()).map(|i| i / visual.cols).collect();
    let cols: Vec<usize> = (0..visual.len()).map(|i| i % visual.cols).collect();
    let tok = tape.gather(vars[EMBED_VISUAL], ids);
    let r = tape.gather(vars[EMBED_ROW], rows);
    let c = tape.gather(vars[EMBED_COL], cols);
    let vis = tape.add(tok, r);
    let vis = tape.add(vis, c);

    let mut parts = vec![vis];
    let q = query.len();
    if q > 0 {
        let t = tape.gather(vars[EMBED_TEXT], query.iter().map(|&i| i as usize).collect());
        let p = tape.gather(vars[EMBED_TEXT_POS], (0..q).collect());
        parts.push(tape.add(t, p));
    }
    let s = tape.gather(vars[EMBED_SPECIAL], (0..ANCHOR_TOKENS).collect());
    let p = tape.gather(vars[EMBED_TEXT_POS], (q..q + ANCHOR_TOKENS).collect());
    parts.push(tape.add(s, p));
    tape.concat_rows(parts)
}

pub(crate) fn build(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &[Var],
    visual: &VisualTokens,
    query: &[u32],
) -> GraphForward {
    let d = config.d_model;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embed(tape, vars, visual, query);
    let mut hidden = vec![x];
    let mut attn = Vec::with_capacity(config.layers * config.heads);
    for l in 0..config.layers {
        let li = LayerIdx::new(l);
        let xn = tape.layer_norm(x, vars[li.ln1_gain()], vars[li.ln1_bias()]);
        let qkv = tape.matmul(xn, vars[li.qkv_weight()]);
        let qkv = tape.add_row(qkv, vars[li.qkv_bias()]);
        let mut outs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = tape.col_slice(qkv, h * dh, dh);
            let kh = tape.col_slice(qkv, d + h * dh, dh);
            let vh = tape.col_slice(qkv, 2 * d + h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let p = tape.causal_softmax(scores, scale);
            attn.push(p);
            outs.push(tape.matmul(p, vh));
        }
        let cat = tape.concat_cols(outs);
        let a = tape.matmul(cat, vars[li.out_weight()]);
        let a = tape.add_row(a, vars[li.out_bias()]);
        let x2 = tape.add(x, a);
        let xn2 = tape.layer_norm(x2, vars[li.ln2_gain()], vars[li.ln2_bias()]);
        let f = tape.matmul(xn2, vars[li.ffn_in_weight()]);
        let f = tape.add_row(f, vars[li.ffn_in_bias()]);
        let f = tape.gelu(f);
        let f = tape.matmul(f, vars[li.ffn_out_weight()]);
        let f = tape.add_row(f, vars[li.ffn_out_bias()]);
        x = tape.add(x2, f);
        hidden.push(x);
    }
    GraphForward { hidden, attn, heads: config.heads }
}

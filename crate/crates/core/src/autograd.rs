//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D array; row vectors are `1 x n` and scalars `1 x 1`.
//! The op set is exactly what the toy transformer and the grounding loss
//! need, with a few fused kernels (layer norm, causal softmax, cosine sums)
//! whose backward passes are written out by hand.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a `1 x c` row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    CausalSoftmax {
        x: Var,
        scale: f64,
    },
    ColSlice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Select {
        x: Var,
        rows: Vec<usize>,
        cols: Range<usize>,
    },
    SumAll(Var),
    RowSums(Var),
    Softmax(Var),
    Normalize(Var),
    KlDiv {
        p: Var,
        q: Var,
        eps: f64,
    },
    CosineSums {
        q: Var,
        v: Var,
    },
    StopGrad,
    Relu(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax of `scale * x` where entry (i, j) is masked out for j > i.
pub fn causal_softmax(x: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let (r, c) = x.dim();
    let mut out = Array2::<f64>::zeros((r, c));
    for i in 0..r {
        let lim = (i + 1).min(c);
        let row = x.row(i);
        let mut m = f64::NEG_INFINITY;
        for j in 0..lim {
            m = m.max(scale * row[j]);
        }
        let mut sum = 0.0;
        let mut o = out.row_mut(i);
        for j in 0..lim {
            let e = (scale * row[j] - m).exp();
            o[j] = e;
            sum += e;
        }
        for j in 0..lim {
            o[j] /= sum;
        }
    }
    out
}

/// Sum over `v` rows of cosine(q_i, v_j), for every row `q_i`; zero-norm rows contribute 0.
pub fn cosine_sums(q: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
    let (qn, _) = unit_rows(q);
    let (vn, _) = unit_rows(v);
    let total = vn.sum_axis(Axis(0));
    let out = qn.dot(&total);
    out.insert_axis(Axis(0))
}

fn unit_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row.mapv_inplace(|a| a / n);
        } else {
            row.fill(0.0);
        }
    }
    (out, norms)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Array2::<f64>::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Gather { table, ids })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dim();
        let mut xhat = Array2::<f64>::zeros((r, c));
        let mut rstd = Vec::with_capacity(r);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            let mut h = xhat.row_mut(i);
            for j in 0..c {
                h[j] = (row[j] - mean) * rs;
            }
        }
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let out = &xhat * &g + b;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Var {
        let v = causal_softmax(self.value(x).view(), scale);
        self.push(v, Op::CausalSoftmax { x, scale })
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::ColSlice { x, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn select(&mut self, x: Var, rows: Vec<usize>, cols: Range<usize>) -> Var {
        let xv = self.value(x);
        let mut v = Array2::<f64>::zeros((rows.len(), cols.len()));
        for (r, &src) in rows.iter().enumerate() {
            v.row_mut(r).assign(&xv.slice(s![src, cols.clone()]));
        }
        self.push(v, Op::Select { x, rows, cols })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    /// `r x c -> 1 x r`, each entry the sum of one row.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(0));
        self.push(v, Op::RowSums(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|a| (a - m).exp());
            let s = row.sum();
            row.mapv_inplace(|a| a / s);
        }
        self.push(v, Op::Softmax(x))
    }

    /// Divide a `1 x n` row by its sum.
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum();
        let v = xv / s;
        self.push(v, Op::Normalize(x))
    }

    /// `sum_{p_i > 0} p_i (ln p_i - ln max(q_i, eps))` as a `1 x 1` value.
    pub fn kl_div(&mut self, p: Var, q: Var, eps: f64) -> Var {
        let pv = self.value(p);
        let qv = self.value(q);
        let mut acc = 0.0;
        Zip::from(pv).and(qv).for_each(|&a, &b| {
            if a > 0.0 {
                acc += a * (a.ln() - b.max(eps).ln());
            }
        });
        self.push(Array2::from_elem((1, 1), acc), Op::KlDiv { p, q, eps })
    }

    pub fn cosine_sums(&mut self, q: Var, v: Var) -> Var {
        let out = cosine_sums(self.value(q).view(), self.value(v).view());
        self.push(out, Op::CosineSums { q, v })
    }

    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem(self.nodes[loss.0].value.dim(), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Const | Op::StopGrad => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Gather { table, ids } => {
                    let mut gt = Array2::<f64>::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = xhat.ncols() as f64;
                    let gv = self.value(*gamma).row(0).to_owned();
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * &gv;
                    let mut dx = Array2::<f64>::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dh = dxhat.row(i);
                        let h = xhat.row(i);
                        let mean_dh = dh.sum() / c;
                        let mean_dhh = dh.dot(&h) / c;
                        let mut out = dx.row_mut(i);
                        for j in 0..h.len() {
                            out[j] = rstd[i] * (dh[j] - mean_dh - h[j] * mean_dhh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::CausalSoftmax { x, scale } => {
                    let p = &node.value;
                    let mut dx = Array2::<f64>::zeros(p.dim());
                    for i in 0..p.nrows() {
                        let pr = p.row(i);
                        let gr = g.row(i);
                        let dot = pr.dot(&gr);
                        let mut o = dx.row_mut(i);
                        for j in 0..pr.len() {
                            o[j] = scale * pr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ColSlice { x, start } => {
                    let mut dx = Array2::<f64>::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Select { x, rows, cols } => {
                    let mut dx = Array2::<f64>::zeros(self.value(*x).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = dx.slice_mut(s![src, cols.clone()]);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let dx = Array2::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    acc(&mut grads, *x, dx);
                }
                Op::RowSums(x) => {
                    let (r, c) = self.value(*x).dim();
                    let mut dx = Array2::<f64>::zeros((r, c));
                    for i in 0..r {
                        dx.row_mut(i).fill(g[[0, i]]);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Array2::<f64>::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot = y.row(i).dot(&g.row(i));
                        let mut o = dx.row_mut(i);
                        for j in 0..y.ncols() {
                            o[j] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Normalize(x) => {
                    let y = &node.value;
                    let s = self.value(*x).sum();
                    let dot = (y * &g).sum();
                    let dx = (&g - dot) / s;
                    acc(&mut grads, *x, dx);
                }
                Op::KlDiv { p, q, eps } => {
                    let gs = g[[0, 0]];
                    let pv = self.value(*p);
                    let qv = self.value(*q);
                    let mut dp = Array2::<f64>::zeros(pv.dim());
                    let mut dq = Array2::<f64>::zeros(qv.dim());
                    Zip::from(&mut dp).and(&mut dq).and(pv).and(qv).for_each(|dp, dq, &a, &b| {
                        if a > 0.0 {
                            *dp = gs * (a.ln() - b.max(*eps).ln() + 1.0);
                            if b >= *eps {
                                *dq = -gs * a / b;
                            }
                        }
                    });
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *p, dp);
                }
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::CosineSums { q, v } => {
                    let (qn, qnorm) = unit_rows(self.value(*q).view());
                    let (vn, vnorm) = unit_rows(self.value(*v).view());
                    let total = vn.sum_axis(Axis(0));
                    let gq_row = g.row(0);
                    let mut dq = Array2::<f64>::zeros(qn.dim());
                    for i in 0..qn.nrows() {
                        if qnorm[i] == 0.0 {
                            continue;
                        }
                        let u = qn.row(i);
                        let proj = u.dot(&total);
                        let mut o = dq.row_mut(i);
                        for k in 0..u.len() {
                            o[k] = gq_row[i] * (total[k] - proj * u[k]) / qnorm[i];
                        }
                    }
                    // sum_i g_i * qn_i
                    let weighted = gq_row.dot(&qn);
                    let mut dv = Array2::<f64>::zeros(vn.dim());
                    for j in 0..vn.nrows() {
                        if vnorm[j] == 0.0 {
                            continue;
                        }
                        let u = vn.row(j);
                        let proj = u.dot(&weighted);
                        let mut o = dv.row_mut(j);
                        for k in 0..u.len() {
                            o[k] = (weighted[k] - proj * u[k]) / vnorm[j];
                        }
                    }
                    acc(&mut grads, *v, dv);
                    acc(&mut grads, *q, dq);
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }
}

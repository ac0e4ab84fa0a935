//! Head weighting, anchored aggregation, and click decoding.
//!
//! Every strategy produces one raw score per (layer, head); the scores are
//! turned into weights by a softmax over all `L * H` heads, and the anchor's
//! visual attention rows are mixed with those weights and renormalized.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::cosine_sums;
use crate::error::{Error, Result};
use crate::geometry::{PatchGrid, Point};
use crate::toymodel::{ForwardTrace, SequenceLayout};

/// Floor applied to head token distributions inside the soft strategy's KL.
pub const SOFT_KL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform mean over every query token's rows; no anchor involved.
    Vanilla,
    Uniform,
    AllQuery,
    Anchor,
    Sink,
    Soft,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::Vanilla, Strategy::Uniform, Strategy::AllQuery, Strategy::Anchor, Strategy::Sink, Strategy::Soft];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Uniform => "uniform",
            Strategy::AllQuery => "all_query",
            Strategy::Anchor => "anchor",
            Strategy::Sink => "sink",
            Strategy::Soft => "soft",
        }
    }

    /// Whether the strategy reads query-token attention rows.
    pub fn needs_query_rows(self) -> bool {
        !matches!(self, Strategy::Uniform | Strategy::Anchor)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkMode {
    Global,
    Layerwise,
}

impl SinkMode {
    pub fn name(self) -> &'static str {
        match self {
            SinkMode::Global => "global",
            SinkMode::Layerwise => "layerwise",
        }
    }
}

impl FromStr for SinkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SinkMode::Global),
            "layerwise" => Ok(SinkMode::Layerwise),
            _ => Err(Error::Config(format!("unknown sink mode `{s}` (global|layerwise)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    #[default]
    Argmax,
    /// Probability-weighted centroid of the argmax patch's 3x3 neighborhood.
    Centroid,
}

impl FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Decode::Argmax),
            "centroid" => Ok(Decode::Centroid),
            _ => Err(Error::Config(format!("unknown decode rule `{s}` (argmax|centroid)"))),
        }
    }
}

/// Everything that decides how a trace becomes a click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub sink_mode: SinkMode,
    pub sink_k: usize,
    pub decode: Decode,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Sink, sink_mode: SinkMode::Global, sink_k: 1, decode: Decode::Argmax }
    }
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Sink && self.sink_k == 0 {
            return Err(Error::Config("sink_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Short label such as `sink(global,top1)`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Sink => format!("sink({},top{})", self.sink_mode.name(), self.sink_k),
            s => s.name().to_string(),
        }
    }
}

/// Per-layer and layer-summed visual-sink scores of the query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkScores {
    /// `L x |Q|`.
    pub per_layer: Array2<f64>,
    pub summed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkSelection {
    pub mode: SinkMode,
    pub k: usize,
    /// Selected query indices for each layer; identical rows in global mode.
    pub per_layer: Vec<Vec<usize>>,
}

impl SinkSelection {
    pub fn global_indices(&self) -> Option<&[usize]> {
        match self.mode {
            SinkMode::Global => self.per_layer.first().map(Vec::as_slice),
            SinkMode::Layerwise => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `L x H`, summing to 1.
    pub w: Array2<f64>,
    /// Scores before the softmax.
    pub raw: Array2<f64>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDistribution {
    pub values: Vec<f64>,
    pub grid: PatchGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenVisualDistributions {
    /// `D_g` over query tokens.
    pub global_dist: Vec<f64>,
    /// `L x H x |Q|`, each `[l, h, ..]` lane a distribution over query tokens.
    pub head_dists: Array3<f64>,
}

/// Sum over visual tokens of the cosine between each query hidden state and
/// each visual hidden state, using the output of every layer.
pub fn visual_sink_scores(trace: &ForwardTrace, layout: &SequenceLayout) -> Result<SinkScores> {
    let layers = trace.layers();
    if trace.hidden.len() != layers + 1 {
        return Err(Error::MissingCache(format!("{} hidden states for {layers} layers", trace.hidden.len())));
    }
    let (v, q) = (layout.visual_len, layout.query_len);
    let mut per_layer = Array2::<f64>::zeros((layers, q));
    for l in 0..layers {
        let h = &trace.hidden[l + 1];
        let qs = h.slice(s![v..v + q, ..]);
        let vs = h.slice(s![0..v, ..]);
        per_layer.row_mut(l).assign(&cosine_sums(qs, vs).row(0));
    }
    let summed = per_layer.sum_axis(Axis(0)).to_vec();
    Ok(SinkScores { per_layer, summed })
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn select_sinks(scores: &SinkScores, mode: SinkMode, k: usize) -> Result<SinkSelection> {
    let q = scores.summed.len();
    if q == 0 {
        return Err(Error::EmptyQuery);
    }
    if k == 0 || k > q {
        return Err(Error::Config(format!("sink K must lie in 1..={q}, got {k}")));
    }
    let layers = scores.per_layer.nrows();
    let per_layer = match mode {
        SinkMode::Global => vec![top_k(&scores.summed, k); layers],
        SinkMode::Layerwise => {
            (0..layers).map(|l| top_k(scores.per_layer.row(l).as_slice().expect("contiguous"), k)).collect()
        }
    };
    Ok(SinkSelection { mode, k, per_layer })
}

/// An attention row of the trace: a query token's or the anchor's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Row {
    Query(usize),
    Anchor,
}

/// `sum over rows r of layer l, sum over v of A^{l,h}_{r,v}` for every head.
pub fn visual_mass(trace: &ForwardTrace, rows_per_layer: &[Vec<Row>]) -> Result<Array2<f64>> {
    let (layers, heads, _) = trace.anchor_attn.dim();
    if rows_per_layer.len() != layers {
        return Err(Error::Shape(format!("{} row sets for {layers} layers", rows_per_layer.len())));
    }
    let mut out = Array2::<f64>::zeros((layers, heads));
    for (l, rows) in rows_per_layer.iter().enumerate() {
        for h in 0..heads {
            let mut acc = 0.0;
            for row in rows {
                acc += match *row {
                    Row::Anchor => trace.anchor_attn.slice(s![l, h, ..]).sum(),
                    Row::Query(i) => {
                        let qa = trace.query_attn.as_ref().ok_or_else(|| Error::MissingQueryRows("sink".into()))?;
                        if i >= qa.dim().2 {
                            return Err(Error::Shape(format!("query row {i} of {}", qa.dim().2)));
                        }
                        qa.slice(s![l, h, i, ..]).sum()
                    }
                };
            }
            out[[l, h]] = acc;
        }
    }
    Ok(out)
}

/// `D_g` from the summed sink scores and `D_head` from each head's visual mass per query token.
pub fn token_visual_distributions(trace: &ForwardTrace, scores: &SinkScores) -> Result<TokenVisualDistributions> {
    let qa = trace.query_attn.as_ref().ok_or_else(|| Error::MissingQueryRows("soft".into()))?;
    let (layers, heads, q, _) = qa.dim();
    if q == 0 {
        return Err(Error::EmptyQuery);
    }
    let head_dists = Array3::from_shape_fn((layers, heads, q), |(l, h, i)| qa.slice(s![l, h, i, ..]).sum());
    let mut head_dists = head_dists;
    for mut lane in head_dists.lanes_mut(Axis(2)) {
        let total = lane.sum();
        if total > 0.0 {
            lane.mapv_inplace(|x| x / total);
        } else {
            lane.fill(1.0 / q as f64);
        }
    }
    Ok(TokenVisualDistributions { global_dist: global_distribution(&scores.summed), head_dists })
}

/// Negative sink scores are clipped to zero before normalizing; an all-zero
/// vector falls back to uniform.
pub fn global_distribution(summed: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = summed.iter().map(|c| c.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / summed.len() as f64; summed.len()]
    }
}

/// `sum_{p_i > 0} p_i ln(p_i / max(q_i, eps))`.
pub fn kl_floored(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a.ln() - b.max(eps).ln())).sum()
}

/// Softmax over every entry of `raw`.
pub fn softmax_all(raw: &Array2<f64>) -> Array2<f64> {
    let m = raw.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = raw.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// Raw per-head scores for a strategy.
pub fn raw_head_scores(
    trace: &ForwardTrace,
    layout: &SequenceLayout,
    strategy: Strategy,
    sinks: Option<&SinkSelection>,
) -> Result<Array2<f64>> {
    let (layers, heads, _) = trace.anchor_attn.dim();
    if strategy.needs_query_rows() && trace.query_attn.is_none() {
        return Err(Error::MissingQueryRows(strategy.name().into()));
    }
    let all_queries = || vec![(0..layout.query_len).map(Row::Query).collect::<Vec<_>>(); layers];
    match strategy {
        Strategy::Vanilla => Err(Error::Config("vanilla aggregation does not weight heads".into())),
        Strategy::Uniform => Ok(Array2::zeros((layers, heads))),
        Strategy::AllQuery => visual_mass(trace, &all_queries()),
        Strategy::Anchor => visual_mass(trace, &vec![vec![Row::Anchor]; layers]),
        Strategy::Sink => {
            let sel = sinks.ok_or_else(|| Error::Config("sink strategy needs a sink selection".into()))?;
            let rows: Vec<Vec<Row>> =
                sel.per_layer.iter().map(|r| r.iter().map(|&i| Row::Query(i)).collect()).collect();
            visual_mass(trace, &rows)
        }
        Strategy::Soft => {
            let scores = visual_sink_scores(trace, layout)?;
            let d = token_visual_distributions(trace, &scores)?;
            Ok(Array2::from_shape_fn((layers, heads), |(l, h)| {
                let lane = d.head_dists.slice(s![l, h, ..]).to_vec();
                -kl_floored(&d.global_dist, &lane, SOFT_KL_EPS)
            }))
        }
    }
}

pub fn head_weights(
    trace: &ForwardTrace,
    layout: &SequenceLayout,
    strategy: Strategy,
    sinks: Option<&SinkSelection>,
) -> Result<HeadWeights> {
    let raw = raw_head_scores(trace, layout, strategy, sinks)?;
    Ok(HeadWeights { w: softmax_all(&raw), raw, strategy })
}

fn normalized(values: Vec<f64>, grid: PatchGrid) -> Result<PatchDistribution> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::domain(format!("aggregate mass {total} cannot be normalized")));
    }
    Ok(PatchDistribution { values: values.into_iter().map(|v| v / total).collect(), grid })
}

/// Weighted sum of the anchor rows, renormalized.
pub fn aggregate(anchor_attn: ArrayView3<f64>, weights: &HeadWeights, grid: PatchGrid) -> Result<PatchDistribution> {
    let (layers, heads, v) = anchor_attn.dim();
    if weights.w.dim() != (layers, heads) {
        return Err(Error::Shape(format!("weights {:?} for {layers}x{heads} heads", weights.w.dim())));
    }
    if v != grid.len() {
        return Err(Error::Shape(format!("{v} anchor entries for a {}-patch grid", grid.len())));
    }
    let mut out = vec![0.0; v];
    for l in 0..layers {
        for h in 0..heads {
            let w = weights.w[[l, h]];
            for (o, a) in out.iter_mut().zip(anchor_attn.slice(s![l, h, ..])) {
                *o += w * a;
            }
        }
    }
    normalized(out, grid)
}

/// Uniform mean of every query token's visual rows, renormalized.
pub fn vanilla_aggregate(query_attn: ArrayView4<f64>, grid: PatchGrid) -> Result<PatchDistribution> {
    let (layers, heads, q, v) = query_attn.dim();
    if q == 0 {
        return Err(Error::EmptyQuery);
    }
    if v != grid.len() {
        return Err(Error::Shape(format!("{v} query-row entries for a {}-patch grid", grid.len())));
    }
    let n = (layers * heads * q) as f64;
    let mut out = vec![0.0; v];
    for l in 0..layers {
        for h in 0..heads {
            for i in 0..q {
                for (o, a) in out.iter_mut().zip(query_attn.slice(s![l, h, i, ..])) {
                    *o += a / n;
                }
            }
        }
    }
    normalized(out, grid)
}

/// Full pipeline from a trace to a patch distribution.
pub fn patch_distribution(
    trace: &ForwardTrace,
    grid: PatchGrid,
    cfg: &StrategyConfig,
) -> Result<(PatchDistribution, Option<HeadWeights>)> {
    cfg.validate()?;
    let layout = trace.layout;
    if cfg.strategy == Strategy::Vanilla {
        let qa = trace.query_attn.as_ref().ok_or_else(|| Error::MissingQueryRows("vanilla".into()))?;
        return Ok((vanilla_aggregate(qa.view(), grid)?, None));
    }
    let sinks = if cfg.strategy == Strategy::Sink {
        let scores = visual_sink_scores(trace, &layout)?;
        Some(select_sinks(&scores, cfg.sink_mode, cfg.sink_k.min(layout.query_len.max(1)))?)
    } else {
        None
    };
    let w = head_weights(trace, &layout, cfg.strategy, sinks.as_ref())?;
    Ok((aggregate(trace.anchor_attn.view(), &w, grid)?, Some(w)))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_click(dist: &PatchDistribution, decode: Decode) -> Point {
    let g = &dist.grid;
    let best = argmax(&dist.values);
    let center = |i: usize| g.patch_center(i).expect("index from the grid");
    match decode {
        Decode::Argmax => center(best),
        Decode::Centroid => {
            let (r, c) = g.row_col(best);
            let (mut x, mut y, mut total) = (0.0, 0.0, 0.0);
            for rr in r.saturating_sub(1)..=(r + 1).min(g.rows() - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(g.cols() - 1) {
                    let i = rr * g.cols() + cc;
                    let p = dist.values[i];
                    let pc = center(i);
                    x += p * pc.x;
                    y += p * pc.y;
                    total += p;
                }
            }
            if total > 0.0 {
                Point::new(x / total, y / total)
            } else {
                center(best)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    fn trace_from(
        anchor: Array3<f64>,
        query: Option<Array4<f64>>,
        hidden: Vec<Array2<f64>>,
        v: usize,
        q: usize,
    ) -> ForwardTrace {
        ForwardTrace {
            layout: SequenceLayout::new(v, q),
            hidden,
            anchor_attn: anchor,
            query_attn: query,
            full_attn: None,
        }
    }

    #[test]
    fn sink_scores_hand_table() {
        // visual rows (1,0,0), (1,1,0); query rows (0,1,0), (2,0,0)
        let h = array![
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0]
        ];
        let t = trace_from(Array3::zeros((1, 1, 2)), None, vec![h.clone(), h], 2, 2);
        let s = visual_sink_scores(&t, &t.layout).unwrap();
        let r = 0.5f64.sqrt();
        assert!((s.per_layer[[0, 0]] - (0.0 + r)).abs() < 1e-12);
        assert!((s.per_layer[[0, 1]] - (1.0 + r)).abs() < 1e-12);
        assert_eq!(s.summed, s.per_layer.row(0).to_vec());
    }

    #[test]
    fn sink_scores_identical_and_orthogonal() {
        let v = 3;
        let mut h = Array2::<f64>::zeros((v + 2 + 3, 2));
        for i in 0..v {
            h.row_mut(i).assign(&array![1.0, 1.0]);
        }
        h.row_mut(v).assign(&array![2.0, 2.0]);
        h.row_mut(v + 1).assign(&array![1.0, -1.0]);
        let t = trace_from(Array3::zeros((1, 1, v)), None, vec![h.clone(), h], v, 2);
        let s = visual_sink_scores(&t, &t.layout).unwrap();
        assert!((s.summed[0] - 3.0).abs() < 1e-12);
        assert!(s.summed[1].abs() < 1e-12);
    }

    #[test]
    fn select_sinks_examples() {
        let one = SinkScores { per_layer: array![[0.3], [0.1]], summed: vec![0.4] };
        for mode in [SinkMode::Global, SinkMode::Layerwise] {
            assert_eq!(select_sinks(&one, mode, 1).unwrap().per_layer, vec![vec![0], vec![0]]);
        }
        let s = SinkScores { per_layer: array![[1.0, 4.0, 0.5], [2.0, 5.0, 0.5]], summed: vec![3.0, 9.0, 1.0] };
        assert_eq!(select_sinks(&s, SinkMode::Global, 1).unwrap().global_indices(), Some(&[1][..]));
        let lw = SinkScores { per_layer: array![[5.0, 1.0, 0.0], [0.0, 1.0, 5.0]], summed: vec![5.0, 2.0, 5.0] };
        assert_eq!(select_sinks(&lw, SinkMode::Layerwise, 1).unwrap().per_layer, vec![vec![0], vec![2]]);
        // tie on the summed scores goes to the lower position
        assert_eq!(select_sinks(&lw, SinkMode::Global, 1).unwrap().per_layer[0], vec![0]);
        let empty = SinkScores { per_layer: Array2::zeros((2, 0)), summed: vec![] };
        assert!(matches!(select_sinks(&empty, SinkMode::Global, 1), Err(Error::EmptyQuery)));
    }

    #[test]
    fn uniform_weights_and_symmetry() {
        let t = trace_from(Array3::from_elem((2, 2, 4), 0.1), None, vec![Array2::zeros((7, 2)); 3], 4, 0);
        let w = head_weights(&t, &t.layout, Strategy::Uniform, None).unwrap();
        assert_eq!(w.w, Array2::from_elem((2, 2), 0.25));
        let w = head_weights(&t, &t.layout, Strategy::Anchor, None).unwrap();
        assert!(w.w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        assert!(matches!(head_weights(&t, &t.layout, Strategy::AllQuery, None), Err(Error::MissingQueryRows(_))));
    }

    #[test]
    fn sink_weights_match_brute_force() {
        // L=2, H=1, |Q|=2, |V|=2
        let query = Array4::from_shape_vec((2, 1, 2, 2), vec![0.1, 0.2, 0.3, 0.1, 0.4, 0.4, 0.05, 0.05]).unwrap();
        let t = trace_from(Array3::from_elem((2, 1, 2), 0.3), Some(query), vec![Array2::zeros((7, 2)); 3], 2, 2);
        let sel = SinkSelection { mode: SinkMode::Layerwise, k: 1, per_layer: vec![vec![1], vec![0]] };
        let w = head_weights(&t, &t.layout, Strategy::Sink, Some(&sel)).unwrap();
        let (a, b) = (0.3f64 + 0.1, 0.4f64 + 0.4);
        let expect = [a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp())];
        assert!((w.w[[0, 0]] - expect[0]).abs() < 1e-15);
        assert!((w.w[[1, 0]] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn aggregate_hand_case() {
        let grid = PatchGrid::new(48, 16, 16).unwrap();
        let anchor = Array3::from_shape_vec(
            (2, 2, 3),
            vec![
                0.2, 0.2, 0.1, //
                0.0, 0.5, 0.0, //
                0.3, 0.0, 0.3, //
                0.1, 0.1, 0.1,
            ],
        )
        .unwrap();
        let w = HeadWeights {
            w: array![[0.5, 0.25], [0.25, 0.0]],
            raw: Array2::zeros((2, 2)),
            strategy: Strategy::Uniform,
        };
        let d = aggregate(anchor.view(), &w, grid).unwrap();
        // 0.5*(.2,.2,.1) + .25*(0,.5,0) + .25*(.3,0,.3) = (.175, .225, .125), total .525
        let expect = [0.175 / 0.525, 0.225 / 0.525, 0.125 / 0.525];
        for (a, b) in d.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = HeadWeights { w: array![[0.0, 0.0], [0.0, 1.0]], ..w };
        assert!(aggregate(Array3::zeros((2, 2, 3)).view(), &zero, grid).is_err());
    }

    #[test]
    fn vanilla_matches_uniform_for_single_query() {
        let grid = PatchGrid::new(32, 32, 16).unwrap();
        let q = Array4::from_shape_fn((2, 3, 1, 4), |(l, h, _, v)| 0.05 + 0.01 * (l * 7 + h * 3 + v) as f64);
        let anchor = q.index_axis(Axis(2), 0).to_owned();
        let uni = HeadWeights {
            w: Array2::from_elem((2, 3), 1.0 / 6.0),
            raw: Array2::zeros((2, 3)),
            strategy: Strategy::Uniform,
        };
        let a = aggregate(anchor.view(), &uni, grid).unwrap();
        let b = vanilla_aggregate(q.view(), grid).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
        let twice = ndarray::concatenate(Axis(2), &[q.view(), q.view()]).unwrap();
        let c = vanilla_aggregate(twice.view(), grid).unwrap();
        for (x, y) in c.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn click_decoding() {
        let grid = PatchGrid::new(64, 64, 16).unwrap();
        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        let d = PatchDistribution { values: v, grid };
        assert_eq!(predict_click(&d, Decode::Argmax), Point::new(8.0, 8.0));
        let u = PatchDistribution { values: vec![1.0 / 16.0; 16], grid };
        assert_eq!(predict_click(&u, Decode::Argmax), Point::new(8.0, 8.0));
        let mut v = vec![0.0; 16];
        v[5] = 0.5;
        v[6] = 0.5;
        let d = PatchDistribution { values: v, grid };
        assert_eq!(predict_click(&d, Decode::Centroid), Point::new(32.0, 24.0));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }
}

//! KL supervision of the anchored aggregation, Adam, and gradient checking.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, CropRegion, Point};
use crate::grounding::{top_k, PatchDistribution, SinkMode, Strategy, StrategyConfig, SOFT_KL_EPS};
use crate::labeling::{patch_labels_with, GroundingLabel, LabelMode, DEFAULT_ALPHA};
use crate::synthdata::{render, RenderSpec, Scene};
use crate::toymodel::{graph, Model, SequenceLayout, VisualTokens};

/// Floor on predicted probabilities inside the loss.
pub const PRED_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub label_mode: LabelMode,
    pub strategy: StrategyConfig,
    /// Treat head weights as constants during backpropagation.
    pub stop_grad_weights: bool,
    pub seed: u64,
    /// Run the evaluation callback every this many steps (0 = only at the end).
    pub eval_every: u64,
    /// Linear ramp from 0 to `learning_rate` over this many steps.
    pub warmup_steps: u64,
    /// Cosine decay to 0 over the run once warmup ends; `fit` only.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            alpha: DEFAULT_ALPHA,
            label_mode: LabelMode::Weighted,
            strategy: StrategyConfig::default(),
            stop_grad_weights: false,
            seed: 0,
            eval_every: 0,
            warmup_steps: 0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate for 1-based `step` of a run of `total` steps.
    pub fn learning_rate_at(&self, step: u64, total: Option<u64>) -> f64 {
        let mut lr = self.learning_rate;
        if step <= self.warmup_steps {
            lr *= step as f64 / (self.warmup_steps + 1) as f64;
        } else if let (true, Some(total)) = (self.cosine_decay, total) {
            let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
            let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.strategy.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Mean over the batch.
    pub kl_value: f64,
    pub per_sample: Vec<f64>,
    pub step: u64,
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub visual: VisualTokens,
    pub query: Vec<u32>,
    pub label: GroundingLabel,
}

impl Sample {
    /// Step-one rendering of a scene with its patch label.
    pub fn from_scene(scene: &Scene, alpha: f64, mode: LabelMode) -> Result<Self> {
        let r = render(scene, &RenderSpec::full(scene.cells_per_patch))?;
        let label = patch_labels_with(&r.grid, &scene.gt_bbox, alpha, mode)?;
        Ok(Self { visual: r.tokens, query: scene.query_tokens.clone(), label })
    }

    /// A zoomed crop around the target, as the second inference step would
    /// see it. The crop center is jittered by up to a quarter of the crop
    /// side, drawn from `seed`.
    pub fn zoomed_crop(
        scene: &Scene,
        crop_px: u32,
        zoom: f64,
        seed: u64,
        alpha: f64,
        mode: LabelMode,
    ) -> Result<(Self, CropRegion)> {
        let grid = scene.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reach = crop_px as f64 / 4.0;
        let c = scene.gt_bbox.center();
        let jx = if reach > 0.0 { rng.random_range(-reach..reach) } else { 0.0 };
        let jy = if reach > 0.0 { rng.random_range(-reach..reach) } else { 0.0 };
        let (w, h) = (grid.image_w() as f64, grid.image_h() as f64);
        let center = Point::new((c.x + jx).clamp(0.0, w - 1e-6), (c.y + jy).clamp(0.0, h - 1e-6));
        let crop = grid.plan_crop(center, crop_px, zoom)?;
        let r = render(scene, &RenderSpec { crop: Some(crop), cells_per_patch: scene.cells_per_patch })?;
        let b = &scene.gt_bbox;
        let local = BBox::new(
            (b.x1 - r.crop.origin_x as f64) * r.crop.zoom,
            (b.y1 - r.crop.origin_y as f64) * r.crop.zoom,
            (b.x2 - r.crop.origin_x as f64) * r.crop.zoom,
            (b.y2 - r.crop.origin_y as f64) * r.crop.zoom,
        );
        let label = patch_labels_with(&r.grid, &local, alpha, mode)?;
        Ok((Self { visual: r.tokens, query: scene.query_tokens.clone(), label }, r.crop))
    }
}

/// `sum_{p_i > 0} p_i ln(p_i / max(pred_i, eps))`.
pub fn kl_loss(label: &GroundingLabel, pred: &PatchDistribution) -> Result<f64> {
    let p = label.values();
    if p.len() != pred.values.len() {
        return Err(Error::Shape(format!("label of {} vs prediction of {}", p.len(), pred.values.len())));
    }
    Ok(p.iter().zip(&pred.values).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a.ln() - b.max(PRED_EPS).ln())).sum())
}

pub(crate) struct LossGraph {
    pub loss: Var,
    /// `1 x LH` raw head scores before any stop-gradient, when the strategy has them.
    #[cfg_attr(not(test), allow(dead_code))]
    pub raw: Option<Var>,
    /// `1 x LH` head weights.
    pub weights: Option<Var>,
}

/// Cosine sink sums of the query tokens at the output of every layer, from tape values.
fn sink_selection(
    tape: &Tape,
    hidden: &[Var],
    layout: &SequenceLayout,
    mode: SinkMode,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let (v, q) = (layout.visual_len, layout.query_len);
    if q == 0 {
        return Err(Error::EmptyQuery);
    }
    let k = k.min(q);
    let per_layer: Vec<Vec<f64>> = hidden[1..]
        .iter()
        .map(|h| {
            let h = tape.value(*h);
            crate::autograd::cosine_sums(h.slice(ndarray::s![v..v + q, ..]), h.slice(ndarray::s![0..v, ..]))
                .row(0)
                .to_vec()
        })
        .collect();
    Ok(match mode {
        SinkMode::Global => {
            let summed: Vec<f64> = (0..q).map(|i| per_layer.iter().map(|r| r[i]).sum()).collect();
            vec![top_k(&summed, k); per_layer.len()]
        }
        SinkMode::Layerwise => per_layer.iter().map(|r| top_k(r, k)).collect(),
    })
}

/// Forward pass, aggregation and KL loss on one tape.
///
/// `frozen` replaces the head weights by constants (`L x H`), which is how the
/// stop-gradient regime is checked numerically.
pub(crate) fn build_loss(
    tape: &mut Tape,
    model: &Model,
    vars: &[Var],
    sample: &Sample,
    cfg: &StrategyConfig,
    stop_grad: bool,
    frozen: Option<&Array2<f64>>,
) -> Result<LossGraph> {
    let layout = model.check_inputs(&sample.visual, &sample.query)?;
    if sample.label.values().len() != layout.visual_len {
        return Err(Error::Shape(format!(
            "label of {} for {} visual tokens",
            sample.label.values().len(),
            layout.visual_len
        )));
    }
    let c = model.config();
    let g = graph::build(tape, c, vars, &sample.visual, &sample.query);
    let (v, q) = (layout.visual_len, layout.query_len);
    let lh = c.layers * c.heads;
    let qrows: Vec<usize> = layout.query_positions().collect();
    let heads: Vec<(usize, usize)> = (0..c.layers).flat_map(|l| (0..c.heads).map(move |h| (l, h))).collect();
    let label = tape.constant(Array2::from_shape_vec((1, v), sample.label.values().to_vec()).expect("1 x V"));

    if cfg.strategy == Strategy::Vanilla {
        if q == 0 {
            return Err(Error::EmptyQuery);
        }
        let rows: Vec<Var> = heads.iter().map(|&(l, h)| tape.select(g.attn(l, h), qrows.clone(), 0..v)).collect();
        let stack = tape.concat_rows(rows);
        let ones = tape.constant(Array2::ones((1, lh * q)));
        let sum = tape.matmul(ones, stack);
        let pred = tape.normalize(sum);
        let loss = tape.kl_div(label, pred, PRED_EPS);
        return Ok(LossGraph { loss, raw: None, weights: None });
    }
    if cfg.strategy.needs_query_rows() && q == 0 {
        return Err(Error::EmptyQuery);
    }

    let a = layout.anchor_pos();
    let anchor_rows: Vec<Var> = heads.iter().map(|&(l, h)| tape.select(g.attn(l, h), vec![a], 0..v)).collect();
    let stack = tape.concat_rows(anchor_rows);

    let raw = match cfg.strategy {
        Strategy::Vanilla => unreachable!("handled above"),
        Strategy::Uniform => None,
        Strategy::Anchor => Some(tape.row_sums(stack)),
        Strategy::AllQuery => {
            let parts: Vec<Var> = heads
                .iter()
                .map(|&(l, h)| {
                    let s = tape.select(g.attn(l, h), qrows.clone(), 0..v);
                    tape.sum_all(s)
                })
                .collect();
            Some(tape.concat_cols(parts))
        }
        Strategy::Sink => {
            let sel = sink_selection(tape, &g.hidden, &layout, cfg.sink_mode, cfg.sink_k)?;
            let parts: Vec<Var> = heads
                .iter()
                .map(|&(l, h)| {
                    let rows = sel[l].iter().map(|&i| layout.query_pos(i)).collect();
                    let s = tape.select(g.attn(l, h), rows, 0..v);
                    tape.sum_all(s)
                })
                .collect();
            Some(tape.concat_cols(parts))
        }
        Strategy::Soft => {
            let d = c.d_model;
            let mut summed: Option<Var> = None;
            for l in 0..c.layers {
                let hq = tape.select(g.hidden[l + 1], qrows.clone(), 0..d);
                let hv = tape.select(g.hidden[l + 1], (0..v).collect(), 0..d);
                let cs = tape.cosine_sums(hq, hv);
                summed = Some(match summed {
                    None => cs,
                    Some(s) => tape.add(s, cs),
                });
            }
            let clipped = tape.relu(summed.expect("at least one layer"));
            let dg = if tape.value(clipped).sum() > 0.0 {
                tape.normalize(clipped)
            } else {
                tape.constant(Array2::from_elem((1, q), 1.0 / q as f64))
            };
            let parts: Vec<Var> = heads
                .iter()
                .map(|&(l, h)| {
                    let s = tape.select(g.attn(l, h), qrows.clone(), 0..v);
                    let mass = tape.row_sums(s);
                    let dh = tape.normalize(mass);
                    let kl = tape.kl_div(dg, dh, SOFT_KL_EPS);
                    tape.scale(kl, -1.0)
                })
                .collect();
            Some(tape.concat_cols(parts))
        }
    };

    let weights = match (frozen, raw) {
        (Some(w), _) => {
            if w.len() != lh {
                return Err(Error::Shape(format!("{} frozen weights for {lh} heads", w.len())));
            }
            tape.constant(w.clone().into_shape_with_order((1, lh)).expect("1 x LH"))
        }
        (None, None) => tape.constant(Array2::from_elem((1, lh), 1.0 / lh as f64)),
        (None, Some(r)) => {
            let r = if stop_grad { tape.stop_grad(r) } else { r };
            tape.softmax(r)
        }
    };
    let mixed = tape.matmul(weights, stack);
    let pred = tape.normalize(mixed);
    let loss = tape.kl_div(label, pred, PRED_EPS);
    Ok(LossGraph { loss, raw, weights: Some(weights) })
}

/// Loss and parameter gradients (one array per tensor) for one sample.
pub fn loss_and_grads(
    model: &Model,
    sample: &Sample,
    cfg: &StrategyConfig,
    stop_grad: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let vars = graph::param_vars(&mut tape, model.params(), true);
    let lg = build_loss(&mut tape, model, &vars, sample, cfg, stop_grad, None)?;
    let loss = tape.scalar(lg.loss);
    let mut grads = tape.backward(lg.loss);
    let out = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Array2::zeros(t.value.dim())))
        .collect();
    Ok((loss, out))
}

/// Loss only, optionally with frozen head weights.
pub fn loss_value(model: &Model, sample: &Sample, cfg: &StrategyConfig, frozen: Option<&Array2<f64>>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = graph::param_vars(&mut tape, model.params(), false);
    let lg = build_loss(&mut tape, model, &vars, sample, cfg, false, frozen)?;
    Ok(tape.scalar(lg.loss))
}

/// Head weights (`L x H`) the loss graph uses at the current parameters.
pub fn training_head_weights(model: &Model, sample: &Sample, cfg: &StrategyConfig) -> Result<Option<Array2<f64>>> {
    let mut tape = Tape::new();
    let vars = graph::param_vars(&mut tape, model.params(), false);
    let lg = build_loss(&mut tape, model, &vars, sample, cfg, false, None)?;
    let c = model.config();
    Ok(lg.weights.map(|w| tape.value(w).clone().into_shape_with_order((c.layers, c.heads)).expect("L x H")))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Array2<f64>> = model.params().tensors().iter().map(|t| Array2::zeros(t.value.dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update; parameters are snapped back to `f32` afterwards.
    pub fn step(&mut self, model: &mut Model, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((t, g), m), v) in model.params_mut().tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v)
        {
            ndarray::Zip::from(&mut t.value).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = (*p - update) as f32 as f64;
            });
        }
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model);
        Ok(Self { model, config, adam, step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam update on the mean loss of `batch`.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossReport> {
        self.scheduled_step(batch, None)
    }

    fn scheduled_step(&mut self, batch: &[Sample], total_steps: Option<u64>) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let step = self.step + 1;
        let cfg = &self.config;
        let results: Vec<(f64, Vec<Array2<f64>>)> = batch
            .par_iter()
            .map(|s| loss_and_grads(&self.model, s, &cfg.strategy, cfg.stop_grad_weights))
            .collect::<Result<_>>()?;
        // summed in batch order so the result does not depend on scheduling
        let mut per_sample = Vec::with_capacity(batch.len());
        let mut total: Option<Vec<Array2<f64>>> = None;
        for (loss, grads) in results {
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            per_sample.push(loss);
            match &mut total {
                None => total = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
            }
        }
        let n = batch.len() as f64;
        let mut grads = total.expect("non-empty batch");
        grads.iter_mut().for_each(|g| *g /= n);
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteLoss { step });
        }
        self.adam.step(&mut self.model, &grads, cfg.learning_rate_at(step, total_steps));
        self.step = step;
        Ok(LossReport { kl_value: per_sample.iter().sum::<f64>() / n, per_sample, step })
    }

    /// Epoch loop with a seeded shuffle; one JSON telemetry line per step.
    pub fn fit(
        &mut self,
        data: &[Sample],
        mut eval: Option<&mut dyn FnMut(&Model) -> Result<f64>>,
        log: &mut dyn Write,
    ) -> Result<TrainSummary> {
        if data.is_empty() {
            return Err(Error::Shape("no training samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::new();
        let mut last_eval = None;
        let per_epoch = data.len().div_ceil(self.config.batch_size) as u64;
        let total = self.step + per_epoch * self.config.epochs as u64;
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
                let report = self.scheduled_step(&batch, Some(total))?;
                losses.push(report.kl_value);
                let due = self.config.eval_every > 0 && report.step % self.config.eval_every == 0;
                let acc = match (&mut eval, due) {
                    (Some(f), true) => Some(f(&self.model)?),
                    _ => None,
                };
                if acc.is_some() {
                    last_eval = acc;
                }
                let line = serde_json::json!({
                    "step": report.step,
                    "epoch": epoch,
                    "loss": report.kl_value,
                    "eval_acc": acc,
                });
                writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
        }
        if let Some(f) = eval.as_mut() {
            if self.config.eval_every == 0 || !self.step.is_multiple_of(self.config.eval_every) {
                let acc = f(&self.model)?;
                last_eval = Some(acc);
                let line = serde_json::json!({ "step": self.step, "epoch": self.config.epochs, "loss": null, "eval_acc": acc });
                writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
        }
        Ok(TrainSummary { steps: self.step, losses, final_eval: last_eval })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub final_eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Random coordinates per tensor, on top of the largest-gradient one.
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Magnitude below which differences are measured absolutely.
    pub floor: f64,
    /// Test hook: scale the analytic gradient of this tensor.
    pub corrupt_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { tolerance: 1e-4, step: 1e-3, coords_per_tensor: 6, seed: 0, floor: 1e-4, corrupt_tensor: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub worst_rel_error: f64,
    pub worst_tensor: String,
    pub worst_coord: (usize, usize),
    pub checked: usize,
    /// Worst relative error per tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients of the loss against central differences.
///
/// With `stop_grad` the head weights are held at their base-point values
/// while differencing, matching what the analytic pass differentiates.
pub fn grad_check(
    model: &Model,
    sample: &Sample,
    cfg: &StrategyConfig,
    stop_grad: bool,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, mut grads) = loss_and_grads(model, sample, cfg, stop_grad)?;
    if let Some(i) = opts.corrupt_tensor {
        if let Some(g) = grads.get_mut(i) {
            g.mapv_inplace(|x| x * 1.5 + 1e-3);
        }
    }
    let frozen = if stop_grad { training_head_weights(model, sample, cfg)? } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        passed: true,
        worst_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_coord: (0, 0),
        checked: 0,
        per_tensor: Vec::new(),
    };
    for (ti, g) in grads.iter().enumerate() {
        let (rows, cols) = g.dim();
        let mut coords: Vec<(usize, usize)> = Vec::new();
        let biggest = g
            .indexed_iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(ix, _)| ix)
            .expect("non-empty tensor");
        coords.push(biggest);
        for _ in 0..opts.coords_per_tensor {
            coords.push((rng.random_range(0..rows), rng.random_range(0..cols)));
        }
        coords.sort_unstable();
        coords.dedup();
        let name = model.params().tensors()[ti].name.clone();
        let mut worst = 0.0f64;
        for &(r, c) in &coords {
            let base = model.params().get(ti)[[r, c]];
            probe.params_mut().tensors_mut()[ti].value[[r, c]] = base + opts.step;
            let up = loss_value(&probe, sample, cfg, frozen.as_ref())?;
            probe.params_mut().tensors_mut()[ti].value[[r, c]] = base - opts.step;
            let down = loss_value(&probe, sample, cfg, frozen.as_ref())?;
            probe.params_mut().tensors_mut()[ti].value[[r, c]] = base;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(g[[r, c]], numeric, opts.floor);
            report.checked += 1;
            worst = worst.max(err);
            if err > report.worst_rel_error || report.worst_tensor.is_empty() {
                report.worst_rel_error = err;
                report.worst_tensor = name.clone();
                report.worst_coord = (r, c);
            }
        }
        report.per_tensor.push((name, worst));
    }
    report.passed = report.worst_rel_error <= opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, PatchGrid};
    use crate::labeling::patch_labels;
    use crate::toymodel::ModelConfig;

    fn tiny_sample(seed: u64) -> (Model, Sample) {
        let c = ModelConfig { seed, ..ModelConfig::tiny() };
        let m = Model::new(c).unwrap();
        let grid = PatchGrid::new(64, 64, 16).unwrap();
        let ids = (0..16).map(|i| ((i * 7 + seed as usize) % c.visual_vocab) as u32).collect();
        let visual = VisualTokens::new(ids, 4, 4).unwrap();
        let label = patch_labels(&grid, &BBox::new(10.0, 20.0, 40.0, 44.0), DEFAULT_ALPHA).unwrap();
        (m, Sample { visual, query: vec![0, 2, 6], label })
    }

    #[test]
    fn zoomed_crop_labels_cover_the_target() {
        use crate::synthdata::{gen_scene, Difficulty};
        for seed in 0..20 {
            let scene = gen_scene(seed, &Difficulty::hard()).unwrap();
            let (s, crop) = Sample::zoomed_crop(&scene, 256, 2.0, seed, DEFAULT_ALPHA, LabelMode::Weighted).unwrap();
            assert_eq!((s.visual.rows, s.visual.cols), (8, 8));
            let g = s.label.grid();
            for (i, &p) in s.label.values().iter().enumerate() {
                let r = g.patch_rect(i).unwrap();
                let a = crop.map_to_global(Point::new(r.x1, r.y1)).unwrap();
                let b = crop.map_to_global(Point::new(r.x2, r.y2)).unwrap();
                let overlaps = BBox::new(a.x, a.y, b.x, b.y).iou(&scene.gt_bbox) > 0.0;
                assert_eq!(p > 0.0, overlaps, "seed {seed} patch {i}");
            }
        }
    }

    #[test]
    fn kl_examples() {
        let grid = PatchGrid::new(32, 32, 16).unwrap();
        let label = patch_labels(&grid, &BBox::new(0.0, 0.0, 16.0, 16.0), 0.8).unwrap();
        let same = PatchDistribution { values: label.values().to_vec(), grid };
        assert_eq!(kl_loss(&label, &same).unwrap(), 0.0);
        let half = PatchDistribution { values: vec![0.5, 0.5, 0.0, 0.0], grid };
        assert!((kl_loss(&label, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let short = PatchDistribution { values: vec![1.0], grid };
        assert!(matches!(kl_loss(&label, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig { learning_rate: 1.0, warmup_steps: 3, cosine_decay: true, ..TrainConfig::default() };
        assert_eq!(c.learning_rate_at(1, Some(13)), 0.25);
        assert_eq!(c.learning_rate_at(3, Some(13)), 0.75);
        assert!((c.learning_rate_at(8, Some(13)) - 0.5).abs() < 1e-12);
        assert!(c.learning_rate_at(13, Some(13)).abs() < 1e-12);
        assert_eq!(c.learning_rate_at(13, None), 1.0);
        assert_eq!(TrainConfig::default().learning_rate_at(1, Some(10)), 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (m, s) = tiny_sample(1);
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let mut t = Trainer::new(m.clone(), cfg).unwrap();
        t.train_step(&[s]).unwrap();
        assert_eq!(t.model.params(), m.params());
    }

    #[test]
    fn overfits_one_sample() {
        let (m, s) = tiny_sample(2);
        let cfg = TrainConfig { learning_rate: 1e-2, ..TrainConfig::default() };
        let mut t = Trainer::new(m, cfg).unwrap();
        let batch = [s];
        let first = t.train_step(&batch).unwrap().kl_value;
        let mut last = first;
        for _ in 1..50 {
            last = t.train_step(&batch).unwrap().kl_value;
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let (m, s) = tiny_sample(3);
        let (_, s2) = tiny_sample(4);
        let data = vec![s, s2];
        let cfg = TrainConfig { epochs: 3, batch_size: 1, learning_rate: 5e-3, ..TrainConfig::default() };
        let run = || {
            let mut t = Trainer::new(m.clone(), cfg.clone()).unwrap();
            let mut log = Vec::new();
            let sum = t.fit(&data, None, &mut log).unwrap();
            (sum.losses, t.model, log)
        };
        let (a, ma, la) = run();
        let (b, mb, lb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(la, lb);
    }

    #[test]
    fn gradients_pass_check_for_each_strategy() {
        let (m, s) = tiny_sample(5);
        for st in Strategy::ALL {
            for stop in [false, true] {
                let cfg = StrategyConfig::new(st);
                let r = grad_check(&m, &s, &cfg, stop, &GradCheckOptions::default()).unwrap();
                assert!(
                    r.passed,
                    "{st} stop={stop}: {} in {} at {:?}",
                    r.worst_rel_error, r.worst_tensor, r.worst_coord
                );
            }
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (m, s) = tiny_sample(6);
        let opts = GradCheckOptions { corrupt_tensor: Some(8), ..GradCheckOptions::default() };
        let r = grad_check(&m, &s, &StrategyConfig::default(), false, &opts).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_tensor, m.params().tensors()[8].name);
    }

    #[test]
    fn stop_grad_zeroes_head_score_gradients() {
        let (m, s) = tiny_sample(7);
        for st in [Strategy::Sink, Strategy::Soft, Strategy::AllQuery, Strategy::Anchor] {
            let mut tape = Tape::new();
            let vars = graph::param_vars(&mut tape, m.params(), true);
            let lg = build_loss(&mut tape, &m, &vars, &s, &StrategyConfig::new(st), true, None).unwrap();
            let grads = tape.backward(lg.loss);
            assert!(grads.get(lg.raw.unwrap()).is_none(), "{st}");
            let mut tape = Tape::new();
            let vars = graph::param_vars(&mut tape, m.params(), true);
            let lg = build_loss(&mut tape, &m, &vars, &s, &StrategyConfig::new(st), false, None).unwrap();
            let grads = tape.backward(lg.loss);
            assert!(grads.get(lg.raw.unwrap()).unwrap().iter().any(|g| *g != 0.0), "{st}");
        }
    }
}

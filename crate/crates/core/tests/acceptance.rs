//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits nonzero if any fails.

use std::time::{Duration, Instant};

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aima_core::config::RunConfig;
use aima_core::geometry::{BBox, PatchGrid};
use aima_core::grounding::{
    global_distribution, patch_distribution, raw_head_scores, visual_sink_scores, SinkMode, SinkSelection, Strategy,
    StrategyConfig,
};
use aima_core::harness::{ablation_run, default_arms, evaluate, gradcheck_scene, TwoStepParams};
use aima_core::labeling::{patch_labels, patch_labels_with, LabelMode};
use aima_core::synthdata::{
    gen_dataset, read_corpus, write_dataset, Corpus, DatasetSpec, DifficultyLevel, Record, Split,
};
use aima_core::toymodel::{save_checkpoint, Model, ModelConfig, TraceOptions, VisualTokens};
use aima_core::training::{grad_check, GradCheckOptions, Sample, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- labels

/// Direct transcription of the label definition: IoU times an axis-aligned
/// Gaussian at the patch center, normalized over the grid.
fn oracle_labels(cols: u32, rows: u32, p: u32, b: [f64; 4], alpha: f64) -> Vec<f64> {
    let [x1, y1, x2, y2] = b;
    let (bw, bh) = (x2 - x1, y2 - y1);
    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let sx = (alpha * bw).max(0.5);
    let sy = (alpha * bh).max(0.5);
    let p = p as f64;
    let mut w = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (px1, py1) = (c as f64 * p, r as f64 * p);
            let ix = (x2.min(px1 + p) - x1.max(px1)).max(0.0);
            let iy = (y2.min(py1 + p) - y1.max(py1)).max(0.0);
            let inter = ix * iy;
            let iou = inter / (p * p + bw * bh - inter);
            let (dx, dy) = (px1 + p / 2.0 - cx, py1 + p / 2.0 - cy);
            let g = (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
            w.push(iou * g);
        }
    }
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64, min_side: f64) -> [f64; 4] {
    let (bw, bh) = (rng.random_range(min_side..=w), rng.random_range(min_side..=h));
    let (x, y) = (rng.random_range(0.0..=w - bw), rng.random_range(0.0..=h - bh));
    [x, y, x + bw, y + bh]
}

fn label_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (cols, rows, p) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(2..=32));
        let grid = PatchGrid::new(cols * p, rows * p, p).unwrap();
        let b = random_box(&mut rng, (cols * p) as f64, (rows * p) as f64, 1.0);
        let got = patch_labels(&grid, &BBox::new(b[0], b[1], b[2], b[3]), 0.8).unwrap();
        let want = oracle_labels(cols, rows, p, b, 0.8);
        for (g, w) in got.values().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    let mut violations = 0;
    for i in 0..10_000 {
        let (cols, rows, p) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=32));
        let grid = PatchGrid::new(cols * p, rows * p, p).unwrap();
        let min_side = if i % 10 == 0 { 0.0 } else { 1.0 };
        let b = random_box(&mut rng, (cols * p) as f64, (rows * p) as f64, min_side);
        let bbox = BBox::new(b[0], b[1], b[2], b[3]);
        let mode = if i % 2 == 0 { LabelMode::Weighted } else { LabelMode::Flat };
        let alpha = rng.random_range(0.1..3.0);
        let Ok(l) = patch_labels_with(&grid, &bbox, alpha, mode) else {
            violations += 1;
            continue;
        };
        let v = l.values();
        let sum_ok = (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12 && v.iter().all(|&x| x >= 0.0);
        let support_ok =
            min_side == 0.0 || v.iter().enumerate().all(|(j, &x)| (x > 0.0) == (grid.iou(j, &bbox).unwrap() > 0.0));
        violations += (!sum_ok || !support_ok) as usize;
    }
    check(
        worst <= 1e-12 && violations == 0,
        format!("oracle max abs diff {worst:.1e} over 1000 cases; {violations} invariant violations in 10000"),
    )
}

// ---------------------------------------------------------------- gradients

fn gradient_check() -> Outcome {
    let model = Model::new(ModelConfig::tiny()).unwrap();
    let opts = GradCheckOptions { tolerance: 1e-4, coords_per_tensor: 8, ..GradCheckOptions::default() };
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    for seed in 0..3 {
        let scene = gradcheck_scene(seed).unwrap();
        let sample = Sample::from_scene(&scene, 0.8, LabelMode::Weighted).unwrap();
        for st in Strategy::ALL {
            for stop_grad in [false, true] {
                let r = grad_check(&model, &sample, &StrategyConfig::new(st), stop_grad, &opts).unwrap();
                let tag = format!("{st}/stop_grad={stop_grad}/scene {seed}");
                if r.worst_rel_error > worst.0 {
                    worst = (r.worst_rel_error, format!("{tag} {}", r.worst_tensor));
                }
                if !r.passed {
                    failed.push(tag);
                }
            }
        }
    }
    check(failed.is_empty(), format!("worst relative error {:.2e} at {}; failing: {failed:?}", worst.0, worst.1))
}

// ---------------------------------------------------------------- partial rows

fn random_inputs(rng: &mut ChaCha8Rng, c: &ModelConfig) -> (VisualTokens, Vec<u32>) {
    let rows = rng.random_range(1..=c.max_rows);
    let cols = rng.random_range(1..=c.max_cols);
    let ids = (0..rows * cols).map(|_| rng.random_range(0..c.visual_vocab as u32)).collect();
    let q = rng.random_range(1..=c.max_query_len);
    let query = (0..q).map(|_| rng.random_range(0..c.text_vocab as u32)).collect();
    (VisualTokens::new(ids, rows, cols).unwrap(), query)
}

fn partial_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let model = Model::new(ModelConfig { seed: i, ..ModelConfig::default() }).unwrap();
        let (vis, q) = random_inputs(&mut rng, model.config());
        let full = model.forward(&vis, &q, TraceOptions { query_rows: true, full_rows: false }).unwrap();
        let part = model.trace_fast(&vis, &q, true).unwrap();
        let qa = (full.query_attn.unwrap() - part.query_attn.unwrap()).mapv(f64::abs);
        let aa = (full.anchor_attn - part.anchor_attn).mapv(f64::abs);
        worst = worst.max(qa.fold(0.0, |a, &b| a.max(b))).max(aa.fold(0.0, |a, &b| a.max(b)));
    }
    check(worst <= 1e-6, format!("max abs difference {worst:.1e} over 100 traces"))
}

// ---------------------------------------------------------------- strategy algebra

fn strategy_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = PatchGrid::new(64, 64, 16).unwrap();
    let (mut anchor_mismatch, mut soft_not_max, mut off_simplex) = (0, 0, 0);
    for i in 0..1000u64 {
        let cfg = ModelConfig { seed: i, ..ModelConfig::tiny() };
        let model = Model::new(cfg).unwrap();
        let (vis, q) = random_inputs(&mut rng, &ModelConfig { max_query_len: 6, ..cfg });
        let trace = model.trace_fast(&vis, &q, true).unwrap();
        let layout = trace.layout;
        let (layers, heads, _) = trace.anchor_attn.dim();
        let grid = if vis.len() == 16 {
            grid
        } else {
            PatchGrid::new(16 * vis.cols as u32, 16 * vis.rows as u32, 16).unwrap()
        };

        // a sink token whose attention rows are the anchor's
        let pick = rng.random_range(0..q.len());
        let mut moved = trace.clone();
        let qa = moved.query_attn.as_mut().unwrap();
        for l in 0..layers {
            for h in 0..heads {
                let row = trace.anchor_attn.slice(s![l, h, ..]).to_owned();
                qa.slice_mut(s![l, h, pick, ..]).assign(&row);
            }
        }
        let sel = SinkSelection { mode: SinkMode::Global, k: 1, per_layer: vec![vec![pick]; layers] };
        let sink = raw_head_scores(&moved, &layout, Strategy::Sink, Some(&sel)).unwrap();
        let anchor = raw_head_scores(&trace, &layout, Strategy::Anchor, None).unwrap();
        anchor_mismatch += (sink != anchor) as usize;

        // one head whose per-token visual mass equals the global distribution
        let scores = visual_sink_scores(&trace, &layout).unwrap();
        let dg = global_distribution(&scores.summed);
        let (tl, th) = (rng.random_range(0..layers), rng.random_range(0..heads));
        let mut aligned = trace.clone();
        let qa = aligned.query_attn.as_mut().unwrap();
        let v = layout.visual_len as f64;
        for (t, &m) in dg.iter().enumerate() {
            qa.slice_mut(s![tl, th, t, ..]).fill(m / v);
        }
        let soft = raw_head_scores(&aligned, &layout, Strategy::Soft, None).unwrap();
        let best = soft.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        soft_not_max += (soft[[tl, th]] < best - 1e-12) as usize;

        for st in Strategy::ALL {
            for mode in [SinkMode::Global, SinkMode::Layerwise] {
                let sc = StrategyConfig { sink_mode: mode, ..StrategyConfig::new(st) };
                let (d, w) = patch_distribution(&trace, grid, &sc).unwrap();
                let mut ok = (d.values.iter().sum::<f64>() - 1.0).abs() < 1e-12 && d.values.iter().all(|&x| x >= 0.0);
                if let Some(w) = w {
                    ok &= (w.w.sum() - 1.0).abs() < 1e-12 && w.w.iter().all(|&x| x >= 0.0);
                }
                off_simplex += (!ok) as usize;
            }
        }
    }
    check(
        anchor_mismatch == 0 && soft_not_max == 0 && off_simplex == 0,
        format!(
            "1000 traces: {anchor_mismatch} sink/anchor mismatches, {soft_not_max} soft maxima missed, \
             {off_simplex} off-simplex outputs"
        ),
    )
}

// ---------------------------------------------------------------- learning gate

fn samples(records: &[Record], cfg: &RunConfig) -> Vec<Sample> {
    let mut out = Vec::new();
    for r in records {
        out.push(Sample::from_scene(&r.scene, cfg.train.alpha, cfg.train.label_mode).unwrap());
        if cfg.zoom_augment {
            let p = TwoStepParams::from_patches(&r.scene, cfg.crop_patches, cfg.zoom);
            let (s, _) =
                Sample::zoomed_crop(&r.scene, p.crop_px, p.zoom, r.scene.seed, cfg.train.alpha, cfg.train.label_mode)
                    .unwrap();
            out.push(s);
        }
    }
    out
}

fn split(c: &Corpus, s: Split) -> Vec<Record> {
    c.split(s).cloned().collect()
}

fn train(cfg: &RunConfig, data: &[Sample]) -> Model {
    let mut t = Trainer::new(Model::new(cfg.model).unwrap(), cfg.train.clone()).unwrap();
    t.fit(data, None, &mut std::io::sink()).unwrap();
    t.model
}

fn easy_config() -> RunConfig {
    RunConfig {
        train: TrainConfig {
            learning_rate: 2e-3,
            warmup_steps: 200,
            cosine_decay: true,
            epochs: 12,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn learning_gate() -> Outcome {
    let spec = DatasetSpec { val_frac: 0.0, test_frac: 0.2, ..DatasetSpec::new(2500, 1, DifficultyLevel::Easy) };
    let (corpus, _) = gen_dataset(&spec).unwrap();
    let (train_set, test_set) = (split(&corpus, Split::Train), split(&corpus, Split::Test));
    let cfg = easy_config();
    let sc = cfg.train.strategy;

    let untrained = evaluate(&Model::new(cfg.model).unwrap(), &test_set, &sc, None).unwrap();
    let gap = (untrained.step_one.accuracy - untrained.gt_patch_share).abs();
    let t0 = Instant::now();
    let model = train(&cfg, &samples(&train_set, &cfg));
    let took = t0.elapsed();
    let acc = evaluate(&model, &test_set, &sc, None).unwrap().step_one.accuracy;
    check(
        acc >= 0.85 && gap <= 0.05,
        format!(
            "trained {} on {} scenes in {:.0?}: accuracy {acc:.3} on {} held-out (target 0.85); \
             untrained {:.3} vs analytic baseline {:.3} (gap {gap:.3}, allowed 0.05; random patch center rate {:.3})",
            sc.label(),
            train_set.len(),
            took,
            test_set.len(),
            untrained.step_one.accuracy,
            untrained.gt_patch_share,
            untrained.random_baseline
        ),
    )
}

// ---------------------------------------------------------------- two-step gate

fn hard_config() -> RunConfig {
    RunConfig { zoom_augment: true, ..easy_config() }
}

fn two_step_gate() -> Outcome {
    let spec = DatasetSpec { val_frac: 0.0, test_frac: 0.2, ..DatasetSpec::new(2500, 2, DifficultyLevel::Hard) };
    let (corpus, _) = gen_dataset(&spec).unwrap();
    let (train_set, test_set) = (split(&corpus, Split::Train), split(&corpus, Split::Test));
    let cfg = hard_config();
    let sc = cfg.train.strategy;
    let model = train(&cfg, &samples(&train_set, &cfg));
    let params = TwoStepParams::from_patches(&test_set[0].scene, cfg.crop_patches, 2.0);
    let r = evaluate(&model, &test_set, &sc, Some(params)).unwrap();
    let t = r.two_step.as_ref().unwrap();

    let whole = TwoStepParams { crop_px: test_set[0].scene.width_px(), zoom: 1.0 };
    let id = evaluate(&model, &test_set, &sc, Some(whole)).unwrap();
    let identical = id.records.chunks(2).all(|p| {
        p[0].predicted.x.to_bits() == p[1].predicted.x.to_bits()
            && p[0].predicted.y.to_bits() == p[1].predicted.y.to_bits()
            && p[0].hit == p[1].hit
            && p[0].min_relax == p[1].min_relax
    });
    check(
        t.recovered > t.lost && t.acc2 > t.acc1 && identical,
        format!(
            "{} hard scenes, crop {} px zoom 2: acc1 {:.3} acc2 {:.3} recovered {} lost {}; \
             zoom-1 full crop identical to one step: {identical}",
            r.n, t.crop_px, t.acc1, t.acc2, t.recovered, t.lost
        ),
    )
}

// ---------------------------------------------------------------- ablation

fn ablation() -> Outcome {
    let spec = DatasetSpec { val_frac: 0.2, test_frac: 0.0, ..DatasetSpec::new(500, 3, DifficultyLevel::Easy) };
    let (corpus, _) = gen_dataset(&spec).unwrap();
    let cfg = RunConfig {
        model: ModelConfig { layers: 2, heads: 4, d_model: 32, d_ff: 64, ..ModelConfig::default() },
        train: TrainConfig { learning_rate: 2e-3, epochs: 3, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    let arms = default_arms();
    let r = ablation_run(&corpus, &arms, &[0, 1, 2], &cfg, Split::Val, &mut std::io::sink()).unwrap();
    println!("{}", r.table().trim_end());
    let complete = r.rows.len() == 8 && r.rows.iter().all(|row| row.accuracies.len() == 3);
    let trends: Vec<String> =
        r.trends.iter().map(|t| format!("{} {:+.3}", t.name, t.delta.unwrap_or(f64::NAN))).collect();
    check(complete, format!("8 arms x 3 seeds on 500 scenes; informational trends: {}", trends.join(", ")))
}

// ---------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(60, 7, DifficultyLevel::Easy);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_dataset(&spec, &a).unwrap();
    write_dataset(&spec, &b).unwrap();
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    let gen_same =
        read(&a) == read(&b) && read(&a.with_extension("manifest.json")) == read(&b.with_extension("manifest.json"));

    let corpus = read_corpus(&a).unwrap();
    let cfg = RunConfig {
        model: ModelConfig { layers: 2, heads: 2, d_model: 16, d_ff: 32, ..ModelConfig::default() },
        train: TrainConfig { epochs: 2, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    let data = samples(&split(&corpus, Split::Train), &cfg);
    let ckpt = |name: &str| {
        let p = dir.path().join(name);
        save_checkpoint(&train(&cfg, &data), &p).unwrap();
        read(&p)
    };
    let train_same = ckpt("m1.ckpt") == ckpt("m2.ckpt");

    let model = train(&cfg, &data);
    let test = split(&corpus, Split::Test);
    let params = Some(TwoStepParams::from_patches(&test[0].scene, 4, 2.0));
    let e1 = evaluate(&model, &test, &cfg.train.strategy, params).unwrap().to_json();
    let mut rev = test.clone();
    rev.reverse();
    let e2 = evaluate(&model, &rev, &cfg.train.strategy, params).unwrap().to_json();
    let eval_same = e1 == e2;
    check(
        gen_same && train_same && eval_same,
        format!("byte-identical gen: {gen_same}, train: {train_same}, eval: {eval_same}"),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("label oracle", label_oracle),
        ("gradient check", gradient_check),
        ("partial attention rows", partial_rows),
        ("strategy algebra", strategy_algebra),
        ("synthetic learning gate", learning_gate),
        ("two-step trend gate", two_step_gate),
        ("ablation harness", ablation),
        ("determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in checks {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = f();
        let took = t0.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {name} ({}): {detail}", secs(took)),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({}): {detail}", secs(took));
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

use proptest::prelude::*;

use aima_core::geometry::{BBox, PatchGrid, Point};
use aima_core::grounding::{patch_distribution, SinkMode, Strategy as Grounding, StrategyConfig};
use aima_core::harness::min_relax;
use aima_core::labeling::{patch_labels_with, LabelMode};
use aima_core::synthdata::{gen_scene, render, Difficulty, RenderSpec};
use aima_core::toymodel::{Model, ModelConfig, TraceOptions, VisualTokens};

fn grid_and_bbox() -> impl Strategy<Value = (PatchGrid, BBox)> {
    (1u32..=8, 1u32..=8, 2u32..=16).prop_flat_map(|(c, r, p)| {
        let (w, h) = (c * p, r * p);
        (0.0..w as f64, 0.0..w as f64, 0.0..h as f64, 0.0..h as f64).prop_filter_map(
            "sub-pixel bbox",
            move |(xa, xb, ya, yb)| {
                let b = BBox::new(xa, ya, xb, yb);
                (b.width() >= 1.0 && b.height() >= 1.0).then(|| (PatchGrid::new(w, h, p).unwrap(), b))
            },
        )
    })
}

fn tokens(rows: usize, cols: usize) -> impl Strategy<Value = (VisualTokens, Vec<u32>)> {
    (prop::collection::vec(0u32..34, rows * cols), prop::collection::vec(0u32..17, 1..=4))
        .prop_map(move |(ids, q)| (VisualTokens::new(ids, rows, cols).unwrap(), q))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn labels_are_distributions_on_overlapping_patches((grid, bbox) in grid_and_bbox(), alpha in 0.2f64..2.0) {
        for mode in [LabelMode::Weighted, LabelMode::Flat] {
            let l = patch_labels_with(&grid, &bbox, alpha, mode).unwrap();
            let v = l.values();
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (i, &p) in v.iter().enumerate() {
                prop_assert!(p >= 0.0);
                prop_assert_eq!(p > 0.0, grid.iou(i, &bbox).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn expansion_is_monotone((grid, bbox) in grid_and_bbox(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let p = Point::new(x * grid.image_w() as f64, y * grid.image_h() as f64);
        let k = min_relax(&grid, &bbox, p);
        for j in 0..=8 {
            let inside = grid.expand_bbox(&bbox, j).contains(p);
            prop_assert_eq!(inside, k.is_some_and(|k| j >= k));
        }
        prop_assert_eq!(bbox.contains(p), k == Some(0));
    }

    #[test]
    fn crops_stay_inside_and_round_trip(
        cols in 2u32..=16, rows in 2u32..=16, x in 0.0f64..1.0, y in 0.0f64..1.0,
        side in 1u32..=8, zoom in prop::sample::select(vec![1.0, 2.0, 4.0]),
    ) {
        let grid = PatchGrid::new(cols * 16, rows * 16, 16).unwrap();
        let c = Point::new(x * grid.image_w() as f64, y * grid.image_h() as f64);
        let crop = grid.plan_crop(c, side * 16, zoom).unwrap();
        prop_assert!(grid.bounds().encloses(&crop.bbox()));
        let inner = Point::new(crop.origin_x as f64 + 3.0, crop.origin_y as f64 + 5.0);
        let back = crop.map_to_global(crop.to_local(inner)).unwrap();
        prop_assert!((back.x - inner.x).abs() < 1e-9 && (back.y - inner.y).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn strategies_land_on_the_simplex((vis, q) in tokens(4, 4), seed in 0u64..1000) {
        let m = Model::new(ModelConfig { seed, ..ModelConfig::tiny() }).unwrap();
        let trace = m.trace_fast(&vis, &q, true).unwrap();
        let grid = PatchGrid::new(64, 64, 16).unwrap();
        for st in Grounding::ALL {
            for mode in [SinkMode::Global, SinkMode::Layerwise] {
                let cfg = StrategyConfig { sink_mode: mode, ..StrategyConfig::new(st) };
                let (d, w) = patch_distribution(&trace, grid, &cfg).unwrap();
                prop_assert!((d.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(d.values.iter().all(|&x| x >= 0.0));
                if let Some(w) = w {
                    prop_assert!((w.w.sum() - 1.0).abs() < 1e-9);
                    prop_assert!(w.w.iter().all(|&x| x > 0.0));
                }
            }
        }
    }

    #[test]
    fn attention_is_causal_and_row_stochastic((vis, q) in tokens(3, 3), seed in 0u64..1000) {
        let m = Model::new(ModelConfig { seed, ..ModelConfig::tiny() }).unwrap();
        let t = m.forward(&vis, &q, TraceOptions { query_rows: true, full_rows: true }).unwrap();
        for a in t.full_attn.as_ref().unwrap() {
            for (i, row) in a.rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().skip(i + 1).all(|&x| x == 0.0));
            }
        }
        // a different query cannot change the visual prefix
        let other: Vec<u32> = q.iter().map(|&x| (x + 1) % 17).collect();
        let u = m.forward_fast(&vis, &other).unwrap();
        let v = m.forward_fast(&vis, &q).unwrap();
        for (a, b) in u.hidden.iter().zip(&v.hidden) {
            for r in 0..vis.len() {
                prop_assert_eq!(a.row(r), b.row(r));
            }
        }
    }

    #[test]
    fn halving_patches_keeps_the_target_visible(seed in 0u64..10_000) {
        let scene = gen_scene(seed, &Difficulty::hard()).unwrap();
        let target = {
            let w = &scene.widgets[scene.target];
            aima_core::synthdata::Vocabulary::standard().widget_id(w.kind, w.color, w.glyph)
        };
        let visible = |cpp: u32| render(&scene, &RenderSpec::full(cpp)).unwrap().tokens.ids.contains(&target);
        // a strict majority in a block implies one in some quarter of it
        let mut prev = false;
        for cpp in [8, 4, 2, 1] {
            let now = visible(cpp);
            prop_assert!(now || !prev, "lost at {cpp}");
            prev = now;
        }
        prop_assert!(visible(1));
    }
}

//! End-to-end grounding, evaluation, ablations, and exports.

mod ablation;
mod eval;
mod export;

pub use ablation::{ablation_run, default_arms, parse_arms, AblationReport, AblationRow, Arm, Trend};
pub use eval::{evaluate, gt_patch_share, random_hit_rate, EvalReport, RelaxBins, StepStats, TwoStepReport};
pub use export::{
    export_heatmap, read_heatmap_sidecar, token_correlation, token_correlation_report, HeatmapSidecar,
    TokenCorrelation, TokenProfile,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, PatchGrid, Point};
use crate::grounding::{patch_distribution, predict_click, PatchDistribution, StrategyConfig};
use crate::synthdata::{render, Difficulty, DifficultyLevel, RenderSpec, Rendered, Scene, TargetPool, Vocabulary};
use crate::toymodel::{ForwardTrace, Model};

/// Largest bbox expansion, in patches, that [`min_relax`] searches.
pub const RELAX_CAP: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: u64,
    pub step: Step,
    pub predicted: Point,
    pub hit: bool,
    /// `None` when even a `RELAX_CAP`-patch expansion misses.
    pub min_relax: Option<u32>,
}

/// Smallest `k` such that `gt` grown by `k` patches contains `p`.
pub fn min_relax(grid: &PatchGrid, gt: &BBox, p: Point) -> Option<u32> {
    (0..=RELAX_CAP).find(|&k| grid.expand_bbox(gt, k).contains(p))
}

/// Crop size and zoom for the second pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStepParams {
    pub crop_px: u32,
    pub zoom: f64,
}

impl TwoStepParams {
    /// A crop `patches` step-one patches wide.
    pub fn from_patches(scene: &Scene, patches: u32, zoom: f64) -> Self {
        Self { crop_px: patches * scene.cells_per_patch * scene.cell_px, zoom }
    }
}

/// Everything computed while grounding one rendered view.
#[derive(Debug, Clone)]
pub struct ViewGrounding {
    pub rendered: Rendered,
    pub trace: ForwardTrace,
    pub dist: PatchDistribution,
    /// Click in the view's local frame.
    pub local: Point,
}

/// Render, run the fast forward, aggregate, and decode a click.
pub fn ground_view(model: &Model, scene: &Scene, spec: &RenderSpec, cfg: &StrategyConfig) -> Result<ViewGrounding> {
    let rendered = render(scene, spec)?;
    let trace = model.trace_fast(&rendered.tokens, &scene.query_tokens, cfg.strategy.needs_query_rows())?;
    let (dist, _) = patch_distribution(&trace, rendered.grid, cfg)?;
    let local = predict_click(&dist, cfg.decode);
    Ok(ViewGrounding { rendered, trace, dist, local })
}

fn record(scene: &Scene, scene_id: u64, step: Step, predicted: Point) -> Result<EvalRecord> {
    let grid = scene.grid()?;
    let relax = min_relax(&grid, &scene.gt_bbox, predicted);
    Ok(EvalRecord { scene_id, step, predicted, hit: scene.gt_bbox.contains(predicted), min_relax: relax })
}

pub fn ground_one_step(model: &Model, scene: &Scene, scene_id: u64, cfg: &StrategyConfig) -> Result<EvalRecord> {
    let g = ground_view(model, scene, &RenderSpec::full(scene.cells_per_patch), cfg)?;
    record(scene, scene_id, Step::One, g.local)
}

/// Step one, then a zoomed re-render of a crop centered on the step-one click.
pub fn ground_two_step(
    model: &Model,
    scene: &Scene,
    scene_id: u64,
    cfg: &StrategyConfig,
    params: TwoStepParams,
) -> Result<(EvalRecord, EvalRecord)> {
    let one = ground_one_step(model, scene, scene_id, cfg)?;
    let grid = scene.grid()?;
    let crop = grid.plan_crop(one.predicted, params.crop_px, params.zoom)?;
    let spec = RenderSpec { crop: Some(crop), cells_per_patch: scene.cells_per_patch };
    let g = ground_view(model, scene, &spec, cfg)?;
    let global = g.rendered.crop.map_to_global(g.local)?;
    let two = record(scene, scene_id, Step::Two, global)?;
    Ok((one, two))
}

/// A 4 x 4-patch scene that fits the small gradient-check model.
pub fn gradcheck_scene(seed: u64) -> Result<Scene> {
    let d = Difficulty {
        level: DifficultyLevel::Easy,
        vocab: Vocabulary::standard(),
        fine_w: 16,
        fine_h: 16,
        cell_px: 8,
        cells_per_patch: 4,
        min_widgets: 1,
        max_widgets: 3,
        min_side: 3,
        max_side: 6,
        share_prob: 0.0,
        unique_pairs: true,
        pool: TargetPool::Any,
    };
    crate::synthdata::gen_scene(seed, &d)
}

pub(crate) fn no_records() -> Error {
    Error::Shape("no scenes to evaluate".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::Strategy;
    use crate::synthdata::gen_scene;
    use crate::toymodel::ModelConfig;

    #[test]
    fn min_relax_examples() {
        let grid = PatchGrid::new(64, 64, 16).unwrap();
        let gt = BBox::new(16.0, 16.0, 32.0, 32.0);
        assert_eq!(min_relax(&grid, &gt, Point::new(20.0, 20.0)), Some(0));
        assert_eq!(min_relax(&grid, &gt, Point::new(40.0, 20.0)), Some(1));
        assert_eq!(min_relax(&grid, &gt, Point::new(56.0, 56.0)), Some(2));
        let big = PatchGrid::new(1024, 1024, 16).unwrap();
        assert_eq!(min_relax(&big, &gt, Point::new(1000.0, 20.0)), None);
    }

    #[test]
    fn whole_screen_gt_always_hits() {
        let mut scene = gen_scene(1, &Difficulty::easy()).unwrap();
        scene.gt_bbox = BBox::new(0.0, 0.0, scene.width_px() as f64, scene.height_px() as f64);
        let m = Model::new(ModelConfig::default()).unwrap();
        let r = ground_one_step(&m, &scene, 0, &StrategyConfig::default()).unwrap();
        assert!(r.hit);
        assert_eq!(r.min_relax, Some(0));
    }

    #[test]
    fn zoom_one_full_crop_matches_one_step() {
        let m = Model::new(ModelConfig::default()).unwrap();
        for seed in 0..5 {
            let scene = gen_scene(seed, &Difficulty::hard()).unwrap();
            let params = TwoStepParams { crop_px: scene.width_px(), zoom: 1.0 };
            for st in [Strategy::Sink, Strategy::Anchor, Strategy::Vanilla] {
                let (one, two) = ground_two_step(&m, &scene, seed, &StrategyConfig::new(st), params).unwrap();
                assert_eq!(one.predicted.x.to_bits(), two.predicted.x.to_bits());
                assert_eq!(one.predicted.y.to_bits(), two.predicted.y.to_bits());
                assert_eq!((one.hit, one.min_relax), (two.hit, two.min_relax));
            }
        }
    }

    #[test]
    fn lossless_crop_quantization_within_one_cell() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let cfg = StrategyConfig::new(Strategy::Anchor);
        for seed in 0..5 {
            let scene = gen_scene(seed, &Difficulty::easy()).unwrap();
            let one = ground_one_step(&m, &scene, 0, &cfg).unwrap();
            let crop = scene.grid().unwrap().plan_crop(one.predicted, 64, 2.0).unwrap();
            // two cells per patch halved by the zoom: one cell per local patch
            let spec = RenderSpec { crop: Some(crop), cells_per_patch: 2 };
            let g = ground_view(&m, &scene, &spec, &cfg).unwrap();
            let global = g.rendered.crop.map_to_global(g.local).unwrap();
            let (r, c) = g.rendered.grid.row_col(crate::grounding::argmax(&g.dist.values));
            let cell = scene.cell_px as f64;
            let x0 = g.rendered.crop.origin_x as f64 + c as f64 * cell;
            let y0 = g.rendered.crop.origin_y as f64 + r as f64 * cell;
            assert!(global.x >= x0 && global.x <= x0 + cell, "{global:?} vs cell at {x0}");
            assert!(global.y >= y0 && global.y <= y0 + cell);
        }
    }
}

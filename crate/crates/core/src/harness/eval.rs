use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ground_one_step, ground_two_step, no_records, EvalRecord, TwoStepParams};
use crate::error::Result;
use crate::grounding::StrategyConfig;
use crate::synthdata::{Record, Scene};
use crate::toymodel::Model;

pub const EVAL_FORMAT: &str = "aima-eval/1";

/// Misses that a relaxed bbox turns into hits, bucketed by the smallest
/// expansion `k` that suffices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelaxBins {
    pub k1: usize,
    pub k2: usize,
    /// `3 <= k <= 5`.
    pub k3_to_5: usize,
}

impl RelaxBins {
    pub fn total(&self) -> usize {
        self.k1 + self.k2 + self.k3_to_5
    }

    fn add(&mut self, min_relax: Option<u32>) {
        match min_relax {
            Some(1) => self.k1 += 1,
            Some(2) => self.k2 += 1,
            Some(3..=5) => self.k3_to_5 += 1,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub n: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub relax: RelaxBins,
    /// Predictions still outside the bbox at the largest searched expansion.
    pub beyond_cap: usize,
}

impl StepStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Self {
        let (mut n, mut hits, mut beyond_cap) = (0, 0, 0);
        let mut relax = RelaxBins::default();
        for r in records {
            n += 1;
            hits += r.hit as usize;
            beyond_cap += r.min_relax.is_none() as usize;
            relax.add(r.min_relax);
        }
        let accuracy = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        Self { n, hits, accuracy, relax, beyond_cap }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepReport {
    pub crop_px: u32,
    pub zoom: f64,
    /// Wrong at step one, right at step two.
    pub recovered: usize,
    /// Right at step one, wrong at step two.
    pub lost: usize,
    pub acc1: f64,
    pub acc2: f64,
    pub step_two: StepStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub strategy: String,
    pub n: usize,
    pub step_one: StepStats,
    pub two_step: Option<TwoStepReport>,
    /// Hit rate of a click at a uniformly random patch center.
    pub random_baseline: f64,
    /// Mean share of patches that overlap the target.
    pub gt_patch_share: f64,
    /// Sorted by scene id, step one before step two.
    pub records: Vec<EvalRecord>,
}

/// Fraction of patch centers that fall inside the target bbox.
pub fn random_hit_rate(scene: &Scene) -> Result<f64> {
    let grid = scene.grid()?;
    let mut inside = 0usize;
    for i in 0..grid.len() {
        inside += scene.gt_bbox.contains(grid.patch_center(i)?) as usize;
    }
    Ok(inside as f64 / grid.len() as f64)
}

/// Fraction of patches with nonzero overlap with the target bbox.
pub fn gt_patch_share(scene: &Scene) -> Result<f64> {
    let grid = scene.grid()?;
    let mut overlap = 0usize;
    for i in 0..grid.len() {
        overlap += (grid.iou(i, &scene.gt_bbox)? > 0.0) as usize;
    }
    Ok(overlap as f64 / grid.len() as f64)
}

/// Grounds every record in parallel and reduces the results in scene-id
/// order, so the report does not depend on input order or scheduling.
pub fn evaluate(
    model: &Model,
    records: &[Record],
    cfg: &StrategyConfig,
    two_step: Option<TwoStepParams>,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(no_records());
    }
    cfg.validate()?;
    let mut sorted: Vec<&Record> = records.iter().collect();
    sorted.sort_by_key(|r| r.id);

    let per_scene: Vec<(EvalRecord, Option<EvalRecord>, f64, f64)> = sorted
        .par_iter()
        .map(|rec| {
            let base = random_hit_rate(&rec.scene)?;
            let share = gt_patch_share(&rec.scene)?;
            match two_step {
                None => Ok((ground_one_step(model, &rec.scene, rec.id, cfg)?, None, base, share)),
                Some(p) => {
                    let (one, two) = ground_two_step(model, &rec.scene, rec.id, cfg, p)?;
                    Ok((one, Some(two), base, share))
                }
            }
        })
        .collect::<Result<_>>()?;

    let n = per_scene.len();
    let step_one = StepStats::from_records(per_scene.iter().map(|t| &t.0));
    let random_baseline = per_scene.iter().map(|t| t.2).sum::<f64>() / n as f64;
    let gt_patch_share = per_scene.iter().map(|t| t.3).sum::<f64>() / n as f64;
    let two = two_step.map(|p| {
        let step_two = StepStats::from_records(per_scene.iter().filter_map(|t| t.1.as_ref()));
        let (mut recovered, mut lost) = (0, 0);
        for (one, two, ..) in &per_scene {
            let two = two.as_ref().expect("two-step record");
            recovered += (!one.hit && two.hit) as usize;
            lost += (one.hit && !two.hit) as usize;
        }
        TwoStepReport {
            crop_px: p.crop_px,
            zoom: p.zoom,
            recovered,
            lost,
            acc1: step_one.accuracy,
            acc2: step_two.accuracy,
            step_two,
        }
    });
    let mut out = Vec::with_capacity(n * 2);
    for (one, two, ..) in per_scene {
        out.push(one);
        out.extend(two);
    }
    Ok(EvalReport {
        format: EVAL_FORMAT.into(),
        strategy: cfg.label(),
        n,
        step_one,
        two_step: two,
        random_baseline,
        gt_patch_share,
        records: out,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Human-readable table in the Relax@1 / @2 / @5 / recovered / lost layout.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "strategy {}  scenes {}  random baseline {:.4}  gt patch share {:.4}",
            self.strategy, self.n, self.random_baseline, self.gt_patch_share
        );
        let _ = writeln!(
            s,
            "{:<6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>6}",
            "step", "acc", "Relax@1", "Relax@2", "Relax@5", "Total", "Recovered", "Lost"
        );
        let row = |s: &mut String, name: &str, st: &StepStats, rl: Option<(usize, usize)>| {
            let (rec, lost) = rl.map_or(("-".to_string(), "-".to_string()), |(a, b)| (a.to_string(), b.to_string()));
            let _ = writeln!(
                s,
                "{:<6} {:>8.4} {:>8} {:>8} {:>8} {:>8} {:>10} {:>6}",
                name,
                st.accuracy,
                st.relax.k1,
                st.relax.k2,
                st.relax.k3_to_5,
                st.relax.total(),
                rec,
                lost
            );
        };
        row(&mut s, "one", &self.step_one, None);
        if let Some(t) = &self.two_step {
            row(&mut s, "two", &t.step_two, Some((t.recovered, t.lost)));
            let _ = writeln!(s, "crop {} px  zoom {}x  acc gain {:+.4}", t.crop_px, t.zoom, t.acc2 - t.acc1);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Point};
    use crate::grounding::Strategy;
    use crate::harness::Step;
    use crate::synthdata::{gen_dataset, DatasetSpec, DifficultyLevel, Split};
    use crate::toymodel::ModelConfig;

    fn rec(id: u64, hit: bool, relax: Option<u32>) -> EvalRecord {
        EvalRecord { scene_id: id, step: Step::One, predicted: Point::new(0.0, 0.0), hit, min_relax: relax }
    }

    #[test]
    fn all_hits_have_no_relax_counts() {
        let rs: Vec<_> = (0..4).map(|i| rec(i, true, Some(0))).collect();
        let st = StepStats::from_records(&rs);
        assert_eq!(st.accuracy, 1.0);
        assert_eq!(st.relax, RelaxBins::default());
        assert_eq!(st.relax.total(), 0);
    }

    #[test]
    fn relax_binning() {
        let rs = [
            rec(0, false, Some(1)),
            rec(1, false, Some(2)),
            rec(2, false, Some(3)),
            rec(3, false, Some(5)),
            rec(4, false, Some(6)),
            rec(5, false, None),
        ];
        let st = StepStats::from_records(&rs);
        assert_eq!(st.relax, RelaxBins { k1: 1, k2: 1, k3_to_5: 2 });
        assert_eq!(st.beyond_cap, 1);
    }

    #[test]
    fn random_rate_of_whole_screen_is_one() {
        let (c, _) = gen_dataset(&DatasetSpec::new(2, 4, DifficultyLevel::Easy)).unwrap();
        let mut scene = c.records[0].scene.clone();
        scene.gt_bbox = BBox::new(0.0, 0.0, scene.width_px() as f64, scene.height_px() as f64);
        assert_eq!(random_hit_rate(&scene).unwrap(), 1.0);
        assert_eq!(gt_patch_share(&scene).unwrap(), 1.0);
    }

    #[test]
    fn gt_share_counts_touched_patches() {
        let (c, _) = gen_dataset(&DatasetSpec::new(2, 4, DifficultyLevel::Easy)).unwrap();
        let mut scene = c.records[0].scene.clone();
        let grid = scene.grid().unwrap();
        let p = grid.patch_px() as f64;
        // straddles a 2 x 2 block of patches but contains no patch center
        scene.gt_bbox = BBox::new(p - 2.0, p - 2.0, p + 2.0, p + 2.0);
        assert_eq!(gt_patch_share(&scene).unwrap(), 4.0 / grid.len() as f64);
        assert_eq!(random_hit_rate(&scene).unwrap(), 0.0);
    }

    #[test]
    fn accounting_identity_and_order_independence() {
        let (c, _) = gen_dataset(&DatasetSpec::new(30, 9, DifficultyLevel::Hard)).unwrap();
        let recs: Vec<Record> = c.split(Split::Train).cloned().collect();
        let m = Model::new(ModelConfig::default()).unwrap();
        let cfg = StrategyConfig::new(Strategy::Anchor);
        let params = TwoStepParams::from_patches(&recs[0].scene, 4, 2.0);
        let a = evaluate(&m, &recs, &cfg, Some(params)).unwrap();
        let t = a.two_step.as_ref().unwrap();
        assert_eq!(t.step_two.hits as i64, a.step_one.hits as i64 + t.recovered as i64 - t.lost as i64);
        assert!(t.recovered <= a.n - a.step_one.hits && t.lost <= a.step_one.hits);
        let mut rev = recs.clone();
        rev.reverse();
        let b = evaluate(&m, &rev, &cfg, Some(params)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.table().contains("Recovered"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        assert!(evaluate(&m, &[], &StrategyConfig::default(), None).is_err());
    }
}

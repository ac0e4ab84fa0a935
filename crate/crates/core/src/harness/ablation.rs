use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grounding::{Decode, SinkMode, Strategy, StrategyConfig};
use crate::labeling::LabelMode;
use crate::synthdata::{Corpus, Record, Split};
use crate::toymodel::Model;
use crate::training::{Sample, Trainer};

pub const ABLATION_FORMAT: &str = "aima-ablation/1";

/// One configuration under comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub strategy: StrategyConfig,
    pub label_mode: LabelMode,
}

impl Arm {
    pub fn new(name: &str, strategy: StrategyConfig, label_mode: LabelMode) -> Self {
        Self { name: name.into(), strategy, label_mode }
    }
}

fn sink(mode: SinkMode) -> StrategyConfig {
    StrategyConfig { sink_mode: mode, ..StrategyConfig::new(Strategy::Sink) }
}

pub fn default_arms() -> Vec<Arm> {
    use LabelMode::{Flat, Weighted};
    vec![
        Arm::new("vanilla", StrategyConfig::new(Strategy::Vanilla), Weighted),
        Arm::new("uniform", StrategyConfig::new(Strategy::Uniform), Weighted),
        Arm::new("all_query", StrategyConfig::new(Strategy::AllQuery), Weighted),
        Arm::new("anchor", StrategyConfig::new(Strategy::Anchor), Weighted),
        Arm::new("sink_global_top1", sink(SinkMode::Global), Weighted),
        Arm::new("sink_layerwise_top1", sink(SinkMode::Layerwise), Weighted),
        Arm::new("soft", StrategyConfig::new(Strategy::Soft), Weighted),
        Arm::new("sink_global_top1_flat", sink(SinkMode::Global), Flat),
    ]
}

/// One arm per line: `name key=value ...` with keys `strategy`, `sink_mode`,
/// `sink_k`, `decode`, and `labels`. `#` starts a comment line.
pub fn parse_arms(text: &str) -> Result<Vec<Arm>> {
    let mut arms = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse(format!("arms line {}: {msg}", n + 1));
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line");
        let mut arm = Arm::new(name, StrategyConfig::default(), LabelMode::Weighted);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{kv}`")))?;
            match k {
                "strategy" => arm.strategy.strategy = v.parse::<Strategy>()?,
                "sink_mode" => arm.strategy.sink_mode = v.parse::<SinkMode>()?,
                "sink_k" => arm.strategy.sink_k = v.parse().map_err(|_| err(format!("bad sink_k `{v}`")))?,
                "decode" => arm.strategy.decode = v.parse::<Decode>()?,
                "labels" => {
                    arm.label_mode = match v {
                        "weighted" => LabelMode::Weighted,
                        "flat" => LabelMode::Flat,
                        _ => return Err(err(format!("labels must be weighted|flat, got `{v}`"))),
                    }
                }
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        arm.strategy.validate()?;
        arms.push(arm);
    }
    if arms.is_empty() {
        return Err(Error::Config("arms file lists no arms".into()));
    }
    Ok(arms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub strategy: String,
    pub labels: String,
    pub seeds: Vec<u64>,
    /// Step-one accuracy per seed, in `seeds` order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// `max - min` over seeds.
    pub spread: f64,
}

/// Difference of two arm means; `None` when either arm is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub name: String,
    pub better: String,
    pub worse: String,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format: String,
    pub train_scenes: usize,
    pub eval_split: String,
    pub eval_scenes: usize,
    pub rows: Vec<AblationRow>,
    pub trends: Vec<Trend>,
}

fn samples(records: &[&Record], cfg: &RunConfig, mode: LabelMode) -> Result<Vec<Sample>> {
    records.iter().map(|r| Sample::from_scene(&r.scene, cfg.train.alpha, mode)).collect()
}

/// Trains one model per (arm, seed) on the train split and scores it on
/// `eval_split`. Per-step training telemetry goes to `log`.
pub fn ablation_run(
    corpus: &Corpus,
    arms: &[Arm],
    seeds: &[u64],
    base: &RunConfig,
    eval_split: Split,
    log: &mut dyn Write,
) -> Result<AblationReport> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one arm and one seed".into()));
    }
    let train: Vec<&Record> = corpus.split(Split::Train).collect();
    let eval: Vec<Record> = corpus.split(eval_split).cloned().collect();
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config(format!("corpus needs train and {} scenes", eval_split.name())));
    }
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let data = samples(&train, base, arm.label_mode)?;
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut mc = base.model;
            mc.seed = base.model.seed.wrapping_add(seed);
            let mut tc = base.train.clone();
            tc.seed = base.train.seed.wrapping_add(seed);
            tc.strategy = arm.strategy;
            tc.label_mode = arm.label_mode;
            tc.eval_every = 0;
            let line = serde_json::json!({ "arm": arm.name, "seed": seed });
            writeln!(log, "{line}").map_err(|e| Error::io("<ablation log>", e))?;
            let mut trainer = Trainer::new(Model::new(mc)?, tc)?;
            trainer.fit(&data, None, log)?;
            accuracies.push(evaluate(&trainer.model, &eval, &arm.strategy, None)?.step_one.accuracy);
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
        rows.push(AblationRow {
            arm: arm.name.clone(),
            strategy: arm.strategy.label(),
            labels: arm.label_mode.name().into(),
            seeds: seeds.to_vec(),
            accuracies,
            mean,
            spread: max - min,
        });
    }
    let trends = vec![
        trend(&rows, "sink_vs_uniform", "sink_global_top1", "uniform"),
        trend(&rows, "weighted_vs_flat", "sink_global_top1", "sink_global_top1_flat"),
    ];
    Ok(AblationReport {
        format: ABLATION_FORMAT.into(),
        train_scenes: train.len(),
        eval_split: eval_split.name().into(),
        eval_scenes: eval.len(),
        rows,
        trends,
    })
}

fn trend(rows: &[AblationRow], name: &str, better: &str, worse: &str) -> Trend {
    let mean = |arm: &str| rows.iter().find(|r| r.arm == arm).map(|r| r.mean);
    let delta = match (mean(better), mean(worse)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Trend { name: name.into(), better: better.into(), worse: worse.into(), delta }
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train {} scenes, eval {} {} scenes", self.train_scenes, self.eval_scenes, self.eval_split);
        let _ = writeln!(s, "{:<24} {:<28} {:<9} {:>8} {:>8}", "arm", "strategy", "labels", "mean", "spread");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:<28} {:<9} {:>8.4} {:>8.4}", r.arm, r.strategy, r.labels, r.mean, r.spread);
        }
        for t in &self.trends {
            match t.delta {
                Some(d) => {
                    let verdict = if d >= 0.0 { "holds" } else { "reversed" };
                    let _ = writeln!(s, "trend {}: {} - {} = {:+.4} ({verdict})", t.name, t.better, t.worse, d);
                }
                None => {
                    let _ = writeln!(s, "trend {}: not measured", t.name);
                }
            }
        }
        s
    }
}

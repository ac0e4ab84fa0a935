use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aima_core::config::RunConfig;
use aima_core::grounding::{Decode, SinkMode, Strategy};
use aima_core::harness::{
    ablation_run, default_arms, evaluate, export_heatmap, gradcheck_scene, ground_view, min_relax, parse_arms,
    token_correlation_report, TwoStepParams,
};
use aima_core::labeling::LabelMode;
use aima_core::synthdata::{
    gen_scene, read_corpus, split_seed, write_dataset, Corpus, DatasetSpec, DifficultyLevel, Record, RenderSpec, Scene,
};
use aima_core::toymodel::{load_checkpoint, save_checkpoint, Model};
use aima_core::training::{grad_check, GradCheckOptions, Sample, Trainer};
use aima_core::{Error, Result};

#[derive(Parser)]
#[command(name = "aima", version, about = "Attention-based click grounding on synthetic screens")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a corpus and its manifest.
    Gen(GenArgs),
    /// Train a model on the train split of a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally with two-step zoom-in.
    Eval(EvalArgs),
    /// Ground one scene and export its patch heatmap.
    Ground(GroundArgs),
    /// Train and compare several strategy arms over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write embedding and attention token-correlation profiles for one scene.
    AnalyzeTokens(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for aima_core::synthdata::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

fn parse_difficulty(s: &str) -> Result<DifficultyLevel> {
    DifficultyLevel::parse(s)
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_difficulty, default_value = "easy")]
    difficulty: DifficultyLevel,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    /// Hold out a quarter of the target (kind, color) pairs from training.
    #[arg(long)]
    hard_split: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides of the grounding strategy given in the config file.
#[derive(Args)]
struct StrategyArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    sink_mode: Option<SinkMode>,
    #[arg(long)]
    sink_k: Option<usize>,
    #[arg(long)]
    decode: Option<Decode>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    strategy: StrategyArgs,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let s = &mut cfg.train.strategy;
        if let Some(v) = self.strategy.strategy {
            s.strategy = v;
        }
        if let Some(v) = self.strategy.sink_mode {
            s.sink_mode = v;
        }
        if let Some(v) = self.strategy.sink_k {
            s.sink_k = v;
        }
        if let Some(v) = self.strategy.decode {
            s.decode = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    flat_labels: bool,
    /// Evaluate on this split whenever `eval_every` steps have passed.
    #[arg(long, value_enum, default_value = "val")]
    eval_split: SplitArg,
    /// Training telemetry, one JSON object per step; stderr when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TwoStepArgs {
    #[arg(long)]
    two_step: bool,
    /// Crop side in pixels; the configured number of step-one patches when omitted.
    #[arg(long)]
    crop_px: Option<u32>,
    #[arg(long)]
    zoom: Option<f64>,
}

impl TwoStepArgs {
    fn params(&self, cfg: &RunConfig, scene: &Scene) -> Option<TwoStepParams> {
        self.two_step.then(|| {
            let mut p = TwoStepParams::from_patches(scene, cfg.crop_patches, self.zoom.unwrap_or(cfg.zoom));
            if let Some(px) = self.crop_px {
                p.crop_px = px;
            }
            p
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    two: TwoStepArgs,
    /// JSON report; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    report: PathBuf,
}

/// A scene from a corpus by id, or generated from a seed.
#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    scene_id: u64,
    #[arg(long, conflicts_with = "difficulty")]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_difficulty)]
    difficulty: Option<DifficultyLevel>,
    /// Base seed for generated scenes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SceneArgs {
    fn scene(&self) -> Result<Scene> {
        match (&self.data, self.difficulty) {
            (Some(p), _) => read_corpus(p)?
                .get(self.scene_id)
                .map(|r| r.scene.clone())
                .ok_or_else(|| Error::Config(format!("no scene with id {} in {}", self.scene_id, p.display()))),
            (None, Some(d)) => {
                gen_scene(split_seed(self.seed, aima_core::synthdata::Split::Test, self.scene_id), &d.config())
            }
            (None, None) => Err(Error::Config("pass --data or --difficulty".into())),
        }
    }
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    two: TwoStepArgs,
    #[arg(long)]
    export_heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Arms file; the standard eight arms when omitted.
    #[arg(long)]
    arms: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn log_sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stderr()),
    })
}

fn split_records(path: &Path, split: SplitArg) -> Result<Vec<Record>> {
    let corpus = read_corpus(path)?;
    let recs: Vec<Record> = corpus.split(split.into()).cloned().collect();
    if recs.is_empty() {
        return Err(Error::Config(format!("{} has no {} scenes", path.display(), split_name(split))));
    }
    Ok(recs)
}

fn split_name(s: SplitArg) -> &'static str {
    aima_core::synthdata::Split::from(s).name()
}

/// Step-one views of the train split, plus zoomed crops when configured.
fn training_samples(corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let (alpha, mode) = (cfg.train.alpha, cfg.train.label_mode);
    let mut data = Vec::new();
    for r in corpus.split(aima_core::synthdata::Split::Train) {
        data.push(Sample::from_scene(&r.scene, alpha, mode)?);
        if cfg.zoom_augment {
            let p = TwoStepParams::from_patches(&r.scene, cfg.crop_patches, cfg.zoom);
            data.push(Sample::zoomed_crop(&r.scene, p.crop_px, p.zoom, r.scene.seed, alpha, mode)?.0);
        }
    }
    Ok(data)
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = DatasetSpec {
        val_frac: a.val_frac,
        test_frac: a.test_frac,
        hard_split: a.hard_split,
        ..DatasetSpec::new(a.count, a.seed, a.difficulty)
    };
    let m = write_dataset(&spec, &a.out)?;
    println!("{}", serde_json::to_string(&m).expect("manifest serializes"));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if a.flat_labels {
        cfg.train.label_mode = LabelMode::Flat;
    }
    let corpus = read_corpus(&a.data)?;
    let data = training_samples(&corpus, &cfg)?;
    let held: Vec<Record> = corpus.split(a.eval_split.into()).cloned().collect();
    let strategy = cfg.train.strategy;
    let mut trainer = Trainer::new(Model::new(cfg.model)?, cfg.train.clone())?;
    let mut eval_fn = |m: &Model| evaluate(m, &held, &strategy, None).map(|r| r.step_one.accuracy);
    let eval: Option<&mut dyn FnMut(&Model) -> Result<f64>> = if held.is_empty() { None } else { Some(&mut eval_fn) };
    let mut log = log_sink(&a.log)?;
    let summary = trainer.fit(&data, eval, &mut log)?;
    log.flush().map_err(|e| Error::Io { path: "<log>".into(), source: e })?;
    save_checkpoint(&trainer.model, &a.out)?;
    let line = serde_json::json!({
        "steps": summary.steps,
        "final_loss": summary.losses.last(),
        "eval_split": split_name(a.eval_split),
        "eval_acc": summary.final_eval,
        "checkpoint": a.out,
    });
    println!("{line}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let model = load_checkpoint(&a.ckpt)?;
    let recs = split_records(&a.data, a.split)?;
    let params = a.two.params(&cfg, &recs[0].scene);
    let report = evaluate(&model, &recs, &cfg.train.strategy, params)?;
    write_text(&a.report, &report.to_json())?;
    let table = report.table();
    write_text(&a.report.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn ground(a: GroundArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let model = load_checkpoint(&a.ckpt)?;
    let scene = a.scene.scene()?;
    let grid = scene.grid()?;
    let sc = &cfg.train.strategy;
    let one = ground_view(&model, &scene, &RenderSpec::full(scene.cells_per_patch), sc)?;
    let mut out = serde_json::json!({
        "scene_id": a.scene.scene_id,
        "strategy": sc.label(),
        "gt_bbox": scene.gt_bbox,
        "step_one": one.local,
        "hit": scene.gt_bbox.contains(one.local),
        "min_relax": min_relax(&grid, &scene.gt_bbox, one.local),
    });
    if let Some(p) = a.two.params(&cfg, &scene) {
        let crop = grid.plan_crop(one.local, p.crop_px, p.zoom)?;
        let spec = RenderSpec { crop: Some(crop), cells_per_patch: scene.cells_per_patch };
        let two = ground_view(&model, &scene, &spec, sc)?;
        let global = two.rendered.crop.map_to_global(two.local)?;
        out["crop"] = serde_json::json!(two.rendered.crop);
        out["step_two"] = serde_json::json!(global);
        out["hit_two"] = serde_json::json!(scene.gt_bbox.contains(global));
        if let Some(path) = &a.export_heatmap {
            let zoomed = path
                .with_file_name(format!("{}.zoom.pgm", path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap")));
            export_heatmap(&two.dist.values, &two.dist.grid, &zoomed)?;
        }
    }
    if let Some(path) = &a.export_heatmap {
        export_heatmap(&one.dist.values, &one.dist.grid, path)?;
    }
    println!("{out}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let arms = match &a.arms {
        Some(p) => parse_arms(&std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.into(), source: e })?)?,
        None => default_arms(),
    };
    let corpus = read_corpus(&a.data)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let mut log = log_sink(&a.log)?;
    let report = ablation_run(&corpus, &arms, &seeds, &cfg, a.split.into(), &mut log)?;
    write_text(&a.report, &report.to_json())?;
    let table = report.table();
    write_text(&a.report.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let cfg = a.config.load()?;
    let model = Model::new(cfg.model)?;
    let scene = gradcheck_scene(a.seed)?;
    let sample = Sample::from_scene(&scene, cfg.train.alpha, cfg.train.label_mode)?;
    let opts = GradCheckOptions { tolerance: a.tolerance, seed: a.seed, ..GradCheckOptions::default() };
    let mut ok = true;
    for stop_grad in [false, true] {
        let r = grad_check(&model, &sample, &cfg.train.strategy, stop_grad, &opts)?;
        ok &= r.passed;
        let line = serde_json::json!({
            "strategy": cfg.train.strategy.label(),
            "stop_grad_weights": stop_grad,
            "passed": r.passed,
            "worst_rel_error": r.worst_rel_error,
            "worst_tensor": r.worst_tensor,
            "worst_coord": r.worst_coord,
            "checked": r.checked,
        });
        println!("{line}");
    }
    Ok(ok)
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let scene = a.scene.scene()?;
    let rendered = aima_core::synthdata::render(&scene, &RenderSpec::full(scene.cells_per_patch))?;
    let trace = model.trace_fast(&rendered.tokens, &scene.query_tokens, true)?;
    let report = token_correlation_report(&trace, &scene.query_tokens, &a.out)?;
    println!("{}", serde_json::to_string(&report.overall).expect("profile serializes"));
    Ok(())
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Gen(a) => gen(a)?,
        Cmd::Train(a) => train(a)?,
        Cmd::Eval(a) => eval(a)?,
        Cmd::Ground(a) => ground(a)?,
        Cmd::Ablate(a) => ablate(a)?,
        Cmd::Gradcheck(a) => return gradcheck(a),
        Cmd::AnalyzeTokens(a) => analyze(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[gradcheck]: relative error above tolerance");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

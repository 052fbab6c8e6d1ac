//! Command-line lifecycle: generate splits, fit surrogates, optimize patches,
//! evaluate attacks/defenses/detectors, and time generation.
//!
//! Every command writes `run.json` next to its outputs. Exit codes: 0 ok,
//! 2 configuration, 3 generation, 4 lifecycle misuse, 5 twin mismatch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{optimize_patch, save_patch, AttackOptions, PatchInit, PatchSidecar};
use crate::dataset::{generate_dataset_for, load_patch_png, read_manifest, read_split_dir, write_split, Dataset};
use crate::defense::{
    apply_defense, detection_eval, ConstantDetector, Defense, LgsParams, OracleDetector, PatchDetector,
    ReferenceDetector,
};
use crate::error::{Error, Result};
use crate::geometry::Eye;
use crate::metrics::{evaluate_split, higher_is_better, InputTransform, SplitEvaluation};
use crate::model::{fit_heads, init_model_for, SurrogateModel};
use crate::scene::{
    apply_billboard_overrides, builtin_situations, find_situation, parse_collection_config, parse_simulation_config,
    CollectionConfig, SimulationConfig, Task, TaskProfile,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_GENERATION: u8 = 3;
pub const EXIT_LIFECYCLE: u8 = 4;
pub const EXIT_NOT_TWINS: u8 = 5;

pub const RUN_RECORD_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const DETECTION_FILE: &str = "detection.json";
pub const TIMING_FILE: &str = "timing.csv";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Parser)]
#[command(name = "patchsim", version, about = "Synthetic adversarial-patch datasets, attacks and defenses")]
pub struct Cli {
    /// Worker threads for per-sample work. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one dataset split from a collection config.
    Generate(GenerateArgs),
    /// Initialize a surrogate model and fit its heads on a clean split.
    Fit(FitArgs),
    /// Optimize patch textures on a clean training split.
    Attack(AttackArgs),
    /// Compare a model on twin clean/patched splits, optionally defended.
    Evaluate(EvaluateArgs),
    /// Score twin splits with a patch detector and report AUROC.
    Detect(DetectArgs),
    /// Time per-item generation for each task over several seeds.
    Timing(TimingArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Collection config (YAML).
    #[arg(long)]
    pub config: PathBuf,
    /// Simulation config (YAML); defaults apply when absent.
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    /// Spawn-limit overrides per situation (YAML).
    #[arg(long)]
    pub billboard_config: Option<PathBuf>,
    #[arg(long)]
    pub situation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Patch PNG per surface, in surface-id order. Replaces the config's list.
    #[arg(long)]
    pub patch: Vec<PathBuf>,
    /// Split name override.
    #[arg(long)]
    pub split: Option<String>,
    /// Root directory override; the split lands in `<out>/<split>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Clean split directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Trunk weight seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ridge penalty of the head fit.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    /// Output directory for `model.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Gray,
    Random,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Clean training split directory.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Must match the split's situation when given.
    #[arg(long)]
    pub situation: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub step_size: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Gray)]
    pub init: InitArg,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    /// Texture rows and columns.
    #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"], default_values_t = [150, 300])]
    pub patch_dims: Vec<usize>,
    /// Surface ids to attack; all surfaces when absent.
    #[arg(long, value_delimiter = ',')]
    pub surfaces: Vec<u32>,
    /// Output directory for `patch_s<id>.png` and its sidecar.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseArg {
    Lgs,
    Mask,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub adv: PathBuf,
    /// Optional random-patch twin for the control row.
    #[arg(long)]
    pub random: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub defense: Option<DefenseArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DetectorArg {
    Reference,
    Oracle,
    Constant,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub patched: PathBuf,
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long, value_enum, default_value_t = DetectorArg::Reference)]
    pub detector: DetectorArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    /// Tasks to time; all four when absent.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value = "billboard02")]
    pub situation: String,
    /// First seed; repeat `r` uses `seed + r`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    /// Image width and height; task defaults when absent.
    #[arg(long, num_args = 2, value_names = ["WIDTH", "HEIGHT"])]
    pub resolution: Vec<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub arguments: Vec<String>,
    /// SHA-256 of each input file (configs, models, patches).
    pub config_hashes: BTreeMap<String, String>,
    pub phases: Vec<Phase>,
    pub outputs: Vec<String>,
    /// SHA-256 of each output file.
    pub output_hashes: BTreeMap<String, String>,
    pub tool_version: String,
}

/// A failure tagged with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: Error,
}

/// Exit code for an error outside the generation phase.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotTwins(_) => EXIT_NOT_TWINS,
        Error::Lifecycle(_) | Error::SituationMismatch { .. } => EXIT_LIFECYCLE,
        Error::DegenerateView(_) | Error::PlacementFailure(_) | Error::SingularHomography(_) => EXIT_GENERATION,
        _ => EXIT_CONFIG,
    }
}

fn fail(e: Error) -> Failure {
    Failure {
        code: exit_code(&e),
        error: e,
    }
}

fn generation_failure(e: Error) -> Failure {
    Failure {
        code: EXIT_GENERATION,
        error: e,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        fail(e)
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Regular files under `dir`, sorted.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

struct Recorder {
    record: RunRecord,
    clock: Instant,
}

impl Recorder {
    fn new(command: &str, arguments: &[String]) -> Self {
        Self {
            record: RunRecord {
                command: command.into(),
                arguments: arguments.to_vec(),
                config_hashes: BTreeMap::new(),
                phases: Vec::new(),
                outputs: Vec::new(),
                output_hashes: BTreeMap::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
            },
            clock: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.record.config_hashes.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Closes the running phase.
    fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.record.phases.push(Phase {
            name: name.into(),
            seconds: (now - self.clock).as_secs_f64(),
        });
        self.clock = now;
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        let key = path.display().to_string();
        self.record.outputs.push(key.clone());
        self.record.output_hashes.insert(key, hash);
        Ok(())
    }

    fn finish(self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_RECORD_FILE);
        let json = serde_json::to_string_pretty(&self.record).expect("run record serializes");
        write_text(&path, &(json + "\n"))?;
        Ok(path)
    }
}

/// Reads a split directory with the task recorded in its manifest.
pub fn load_split(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    read_split_dir(dir, manifest.task)
}

fn profile_of(ds: &Dataset) -> TaskProfile {
    TaskProfile {
        width: ds.manifest.image_width,
        height: ds.manifest.image_height,
        ..TaskProfile::for_task(ds.task())
    }
}

fn cmd_generate(a: &GenerateArgs, argv: &[String]) -> CmdResult<()> {
    let mut rec = Recorder::new("generate", argv);
    let mut cfg = parse_collection_config(&read_text(&a.config)?)?;
    rec.input(&a.config)?;
    let sim = match &a.sim_config {
        Some(p) => {
            rec.input(p)?;
            parse_simulation_config(&read_text(p)?)?
        }
        None => SimulationConfig::default(),
    };
    if let Some(s) = &a.situation {
        cfg.situation_name = s.clone();
    }
    if let Some(seed) = a.seed {
        cfg.seed = Some(seed);
    }
    if let Some(n) = a.samples {
        cfg.num_samples = n;
    }
    if !a.patch.is_empty() {
        cfg.patch_paths = a.patch.clone();
    }
    if let Some(split) = &a.split {
        cfg.split = split.clone();
    }
    if let Some(out) = &a.out {
        cfg.root_dir = out.clone();
    }
    cfg.validate()?;
    let mut situations = builtin_situations();
    if let Some(p) = &a.billboard_config {
        rec.input(p)?;
        apply_billboard_overrides(&read_text(p)?, &mut situations)?;
    }
    let situation = situations
        .into_iter()
        .find(|s| s.name == cfg.situation_name)
        .ok_or_else(|| Error::UnknownSituation(cfg.situation_name.clone()))?;
    let mut patches = Vec::new();
    for p in &cfg.patch_paths {
        rec.input(p)?;
        patches.push(load_patch_png(p)?);
    }
    rec.phase("configure");

    let ds =
        generate_dataset_for(&cfg, &sim, &situation, &cfg.profile(), &patches).map_err(generation_failure)?;
    rec.phase("generate");
    let dir = write_split(&ds).map_err(generation_failure)?;
    rec.phase("write");

    for f in files_under(&dir)? {
        if f.file_name().is_some_and(|n| n != RUN_RECORD_FILE) {
            rec.output(&f)?;
        }
    }
    let m = &ds.manifest;
    println!(
        "generated {} {} samples of `{}` (seed {}, {}x{}, patch {}) in {}",
        m.sample_count,
        m.task,
        m.situation,
        m.seed,
        m.image_width,
        m.image_height,
        if m.is_patched() { &m.patch_fingerprint[..16] } else { "none" },
        dir.display()
    );
    rec.finish(&dir)?;
    Ok(())
}

fn cmd_fit(a: &FitArgs, argv: &[String]) -> CmdResult<()> {
    let mut rec = Recorder::new("fit", argv);
    let ds = load_split(&a.train)?;
    if ds.manifest.is_patched() {
        return Err(fail(Error::Lifecycle("surrogates are fitted on clean splits only".into())));
    }
    rec.phase("load");
    let mut model = init_model_for(&profile_of(&ds), a.seed);
    let report = fit_heads(&mut model, &ds.samples, a.lambda)?;
    rec.phase("fit");
    let path = a.out.join(MODEL_FILE);
    model.save(&path)?;
    rec.output(&path)?;
    println!(
        "fitted {} surrogate on {} samples ({} pixel rows, {} cell rows) -> {}",
        model.task,
        ds.len(),
        report.pixel_rows,
        report.cell_rows,
        path.display()
    );
    rec.finish(&a.out)?;
    Ok(())
}

/// Output file of the patch for `surface_id` under an attack directory.
pub fn patch_file(dir: &Path, surface_id: u32) -> PathBuf {
    dir.join(format!("patch_s{surface_id}.png"))
}

fn cmd_attack(a: &AttackArgs, argv: &[String]) -> CmdResult<()> {
    let mut rec = Recorder::new("attack", argv);
    rec.input(&a.model)?;
    let model = SurrogateModel::load(&a.model)?;
    let train = load_split(&a.train)?;
    if let Some(s) = &a.situation {
        if *s != train.manifest.situation {
            return Err(fail(Error::SituationMismatch {
                expected: s.clone(),
                actual: train.manifest.situation.clone(),
            }));
        }
    }
    let situation = find_situation(&train.manifest.situation)?;
    let opts = AttackOptions {
        steps: a.steps,
        step_size: a.step_size,
        batch: a.batch,
        init: match a.init {
            InitArg::Gray => PatchInit::Gray,
            InitArg::Random => PatchInit::RandomSeeded,
        },
        momentum: a.momentum,
        target_surfaces: a.surfaces.clone(),
        seed: a.seed,
        eval_every: a.eval_every,
        patch_dims: (a.patch_dims[0], a.patch_dims[1]),
    };
    rec.phase("load");
    let result = optimize_patch(&model, &train, &situation, &opts)?;
    rec.phase("optimize");
    let fingerprint = model.fingerprint();
    for (patch, &surface_id) in result.patches.iter().zip(&result.surfaces) {
        let png = patch_file(&a.out, surface_id);
        let sidecar = PatchSidecar {
            situation: situation.name.clone(),
            surface_id,
            task: model.task,
            model_fingerprint: fingerprint.clone(),
            options: opts.clone(),
            initial_loss: result.initial_loss,
            best_loss: result.best_loss,
            best_step: result.best_step,
            patch_fingerprint: String::new(),
        };
        save_patch(&png, patch, sidecar)?;
        rec.output(&png)?;
        rec.output(&crate::attack::sidecar_path(&png))?;
    }
    rec.phase("write");
    println!(
        "initial loss {:.6}, final loss {:.6} (best at step {}) on {} surface(s) -> {}",
        result.initial_loss,
        result.best_loss,
        result.best_step,
        result.surfaces.len(),
        a.out.display()
    );
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseColumns {
    pub defense: DefenseArg,
    pub clean_defended: SplitEvaluation,
    pub adv_defended: SplitEvaluation,
    /// `adv_defended - clean_defended`: the attack's effect with the defense in place.
    pub delta_defended: f64,
    /// `adv_defended - clean`.
    pub delta_defended_vs_clean: f64,
    /// `1 - |delta_defended| / |delta_adv|`; absent when the attack had no effect.
    pub delta_reduction: Option<f64>,
}

/// Written by `evaluate` as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: Task,
    pub metric: String,
    pub higher_is_better: bool,
    pub clean: SplitEvaluation,
    pub adv: SplitEvaluation,
    /// `adv - clean`.
    pub delta_adv: f64,
    pub random: Option<SplitEvaluation>,
    pub delta_random: Option<f64>,
    pub defense: Option<DefenseColumns>,
}

/// Surfaces a defense may treat as patched for a twin pair.
fn defended_surfaces(adv: &Dataset) -> Vec<u32> {
    adv.manifest.patched_surface_ids.clone()
}

pub fn evaluate_twins(
    model: &SurrogateModel,
    clean: &Dataset,
    adv: &Dataset,
    random: Option<&Dataset>,
    defense: Option<DefenseArg>,
) -> Result<EvaluationReport> {
    clean.manifest.check_twin(&adv.manifest)?;
    if let Some(r) = random {
        clean.manifest.check_twin(&r.manifest)?;
    }
    let clean_eval = evaluate_split(model, clean, None)?;
    let adv_eval = evaluate_split(model, adv, None)?;
    let random_eval = random.map(|r| evaluate_split(model, r, None)).transpose()?;
    let delta_adv = adv_eval.report.value - clean_eval.report.value;
    let defense = match defense {
        Some(d) => {
            let surfaces = defended_surfaces(adv);
            let kind = match d {
                DefenseArg::Lgs => Defense::Lgs(LgsParams::default()),
                DefenseArg::Mask => Defense::Mask,
            };
            let transform = |s: &crate::dataset::Sample, eye: Eye, img: Vec<f64>| {
                apply_defense(&kind, s, eye, img, &surfaces)
            };
            let t: &InputTransform = &transform;
            let clean_defended = evaluate_split(model, clean, Some(t))?;
            let adv_defended = evaluate_split(model, adv, Some(t))?;
            let delta_defended = adv_defended.report.value - clean_defended.report.value;
            Some(DefenseColumns {
                defense: d,
                delta_defended_vs_clean: adv_defended.report.value - clean_eval.report.value,
                delta_reduction: (delta_adv != 0.0).then(|| 1.0 - delta_defended.abs() / delta_adv.abs()),
                delta_defended,
                clean_defended,
                adv_defended,
            })
        }
        None => None,
    };
    Ok(EvaluationReport {
        task: model.task,
        metric: clean_eval.report.metric.clone(),
        higher_is_better: higher_is_better(model.task),
        delta_random: random_eval.as_ref().map(|r| r.report.value - clean_eval.report.value),
        random: random_eval,
        clean: clean_eval,
        adv: adv_eval,
        delta_adv,
        defense,
    })
}

pub fn format_report(r: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} ({} is better)", r.task, r.metric, if r.higher_is_better { "higher" } else { "lower" });
    let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>12}", "split", "value", "delta", "mean_loss");
    let row = |out: &mut String, name: &str, e: &SplitEvaluation, delta: Option<f64>| {
        let d = delta.map_or_else(|| "-".to_string(), |d| format!("{d:+.6}"));
        let _ = writeln!(out, "{:<16} {:>12.6} {:>12} {:>12.6}", name, e.report.value, d, e.mean_loss);
    };
    row(&mut out, "clean", &r.clean, None);
    if let Some(rand) = &r.random {
        row(&mut out, "random", rand, r.delta_random);
    }
    row(&mut out, "adv", &r.adv, Some(r.delta_adv));
    if let Some(d) = &r.defense {
        let name = format!("{:?}", d.defense).to_lowercase();
        row(&mut out, &format!("clean+{name}"), &d.clean_defended, Some(d.clean_defended.report.value - r.clean.report.value));
        row(&mut out, &format!("adv+{name}"), &d.adv_defended, Some(d.delta_defended_vs_clean));
        let _ = writeln!(out, "defended delta (adv+{name} - clean+{name}) {:+.6}", d.delta_defended);
        if let Some(red) = d.delta_reduction {
            let _ = writeln!(out, "delta reduction {:.1}%", 100.0 * red);
        }
    }
    out
}

fn cmd_evaluate(a: &EvaluateArgs, argv: &[String]) -> CmdResult<()> {
    let mut rec = Recorder::new("evaluate", argv);
    rec.input(&a.model)?;
    let model = SurrogateModel::load(&a.model)?;
    let clean = load_split(&a.clean)?;
    let adv = load_split(&a.adv)?;
    let random = a.random.as_deref().map(load_split).transpose()?;
    rec.phase("load");
    let report = evaluate_twins(&model, &clean, &adv, random.as_ref(), a.defense)?;
    rec.phase("evaluate");
    let path = a.out.join(REPORT_FILE);
    write_text(&path, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    rec.output(&path)?;
    print!("{}", format_report(&report));
    rec.finish(&a.out)?;
    Ok(())
}

fn cmd_detect(a: &DetectArgs, argv: &[String]) -> CmdResult<()> {
    let mut rec = Recorder::new("detect", argv);
    let patched = load_split(&a.patched)?;
    let clean = load_split(&a.clean)?;
    rec.phase("load");
    let detector: &dyn PatchDetector = match a.detector {
        DetectorArg::Reference => &ReferenceDetector,
        DetectorArg::Oracle => &OracleDetector,
        DetectorArg::Constant => &ConstantDetector,
    };
    let eval = detection_eval(detector, &patched, &clean)?;
    rec.phase("score");
    let mut csv = String::from("name,score,is_patched\n");
    for s in &eval.scores {
        let _ = writeln!(csv, "{},{:?},{}", s.name, s.score, s.is_patched);
    }
    let scores = a.out.join(SCORES_FILE);
    write_text(&scores, &csv)?;
    rec.output(&scores)?;
    let summary = a.out.join(DETECTION_FILE);
    let json = serde_json::json!({ "detector": eval.detector, "auroc": eval.auroc, "images": eval.scores.len() });
    write_text(&summary, &(serde_json::to_string_pretty(&json).expect("summary serializes") + "\n"))?;
    rec.output(&summary)?;
    println!("{} AUROC {:.6} over {} images", eval.detector, eval.auroc, eval.scores.len());
    rec.finish(&a.out)?;
    Ok(())
}

/// Per-task timing summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub task: Task,
    pub samples: usize,
    pub repeats: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_timing(a: &TimingArgs, argv: &[String]) -> CmdResult<()> {
    let mut rec = Recorder::new("timing", argv);
    if a.samples == 0 || a.repeats == 0 {
        return Err(fail(Error::InvalidArgument("samples and repeats must be at least 1".into())));
    }
    let tasks: Vec<Task> = if a.tasks.is_empty() {
        vec![
            Task::SemanticSegmentation,
            Task::Detection2D,
            Task::StereoDetection3D,
            Task::MonocularDepth,
        ]
    } else {
        a.tasks.iter().map(|t| t.parse()).collect::<Result<_>>()?
    };
    let resolution = match a.resolution.as_slice() {
        [] => None,
        [w, h] => Some((*w, *h)),
        _ => return Err(fail(Error::InvalidArgument("--resolution takes WIDTH HEIGHT".into()))),
    };
    let sim = match &a.sim_config {
        Some(p) => {
            rec.input(p)?;
            parse_simulation_config(&read_text(p)?)?
        }
        None => SimulationConfig::default(),
    };
    let situation = find_situation(&a.situation)?;
    let scratch = a.out.join(".timing-scratch");
    rec.phase("configure");

    let mut rows = Vec::new();
    for &task in &tasks {
        let mut per_item = Vec::with_capacity(a.repeats);
        for r in 0..a.repeats {
            let mut cfg = CollectionConfig::new(task, &situation.name);
            cfg.num_samples = a.samples;
            cfg.seed = Some(a.seed + r as u64);
            cfg.resolution = resolution;
            cfg.root_dir = scratch.clone();
            cfg.split = format!("{task}_{r}");
            cfg.validate()?;
            let start = Instant::now();
            let ds = generate_dataset_for(&cfg, &sim, &situation, &cfg.profile(), &[]).map_err(generation_failure)?;
            let dir = write_split(&ds).map_err(generation_failure)?;
            per_item.push(start.elapsed().as_secs_f64() / a.samples as f64);
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let (mean_s, std_s) = mean_std(&per_item);
        rows.push(TimingRow {
            task,
            samples: a.samples,
            repeats: a.repeats,
            mean_s,
            std_s,
        });
        rec.phase(task.as_str());
    }
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    let mut csv = String::from("task,samples,repeats,mean_s,std_s\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{:.6},{:.6}", r.task, r.samples, r.repeats, r.mean_s, r.std_s);
        println!("{:<24} {:.4} s/item ± {:.4}", r.task.as_str(), r.mean_s, r.std_s);
    }
    let path = a.out.join(TIMING_FILE);
    write_text(&path, &csv)?;
    rec.output(&path)?;
    rec.finish(&a.out)?;
    Ok(())
}

/// Runs a parsed command line. `argv` is recorded in `run.json`.
pub fn run(cli: &Cli, argv: &[String]) -> std::result::Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(fail(Error::InvalidArgument("--threads must be at least 1".into())));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, argv),
        Command::Fit(a) => cmd_fit(a, argv),
        Command::Attack(a) => cmd_attack(a, argv),
        Command::Evaluate(a) => cmd_evaluate(a, argv),
        Command::Detect(a) => cmd_detect(a, argv),
        Command::Timing(a) => cmd_timing(a, argv),
    }
}

/// Entry point of the binary: parses, runs, and maps failures to exit codes.
pub fn main_with_args(argv: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli, &argv[1.min(argv.len())..]) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

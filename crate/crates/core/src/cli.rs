//! Command-line front end: `tritex synthesize | train | generate | eval`.
//!
//! Precedence is flags over config file over built-in defaults. Relative
//! paths in a config file resolve against the file's directory; relative
//! paths given as flags resolve against the working directory. Every run
//! writes `run.toml` into its output directory: the fully resolved
//! configuration with absolute paths, usable as `--config` to repeat the run.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 runtime failure
//! (non-finite loss, divergence, I/O), 3 an evaluation check failed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    alignment_metric, gradcheck_loss_3channel, gradcheck_stochastic, unbiasedness_check, AlignmentReport,
    GradcheckReport, UnbiasednessReport,
};
use crate::extractor::{ExtractorConfig, FeatureExtractor, Pooling, IMAGENET_NORMALIZATION, MOCK_WEIGHTS};
use crate::generator::{load_model, train_generator_with, train_trace_to_csv, GeneratorArch, TrainConfig};
use crate::loss::{LossConfig, LossMode};
use crate::material::{load_material, save_material, MaterialManifest, MaterialStack};
use crate::seed;
use crate::synthesis::{synthesize_with, trace_to_csv, InitMode, Objective, Parameterization, SynthesisConfig};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// Extractor table of the config file. Unset fields take the defaults of
/// the chosen weights (`"mock"` or a VGG-19 file).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub weights: Option<String>,
    pub taps: Option<Vec<String>>,
    pub pooling: Option<Pooling>,
    pub normalization: Option<[[f64; 2]; 3]>,
}

impl ExtractorSection {
    pub fn resolve(&self) -> ExtractorConfig {
        let weights = self.weights.clone().unwrap_or_else(|| MOCK_WEIGHTS.to_string());
        let mut config = if weights == MOCK_WEIGHTS {
            ExtractorConfig::mock()
        } else {
            ExtractorConfig::vgg19(weights)
        };
        if let Some(taps) = &self.taps {
            config.taps = taps.clone();
        }
        config.pooling = self.pooling.unwrap_or(config.pooling);
        config.normalization = self.normalization.unwrap_or(IMAGENET_NORMALIZATION);
        config
    }

    fn from_config(config: &ExtractorConfig) -> Self {
        Self {
            weights: Some(config.weights.clone()),
            taps: Some(config.taps.clone()),
            pooling: Some(config.pooling),
            normalization: Some(config.normalization),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub init: InitMode,
    pub noise_amplitude: f64,
    pub parameterization: Parameterization,
    pub exact_every: usize,
    pub checkpoint_every: usize,
    /// When set, optimize the separate-losses baseline over these disjoint
    /// channel groups instead of the `[loss]` objective.
    pub separate_groups: Option<Vec<Vec<usize>>>,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        let d = SynthesisConfig::default();
        Self {
            height: d.height,
            width: d.width,
            steps: d.steps,
            adam: d.adam,
            init: d.init,
            noise_amplitude: d.noise_amplitude,
            parameterization: d.parameterization,
            exact_every: d.exact_every,
            checkpoint_every: d.checkpoint_every,
            separate_groups: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub crop_size: usize,
    pub checkpoint_every: usize,
    pub architecture: GeneratorArch,
    pub divergence_window: usize,
    pub divergence_patience: usize,
    /// Model file; defaults to `model.safetensors` in the output directory.
    pub model: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            steps: d.steps,
            adam: d.adam,
            crop_size: d.crop_size,
            checkpoint_every: d.checkpoint_every,
            architecture: d.architecture,
            divergence_window: d.divergence_window,
            divergence_patience: d.divergence_patience,
            model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub model: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            model: None,
            height: 256,
            width: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Unbiasedness,
    Gradcheck,
    Alignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checks: Vec<Check>,
    /// Unbiasedness runs on random stacks with 1..=channels channels.
    pub channels: usize,
    /// Side length of the random stacks.
    pub size: usize,
    pub coordinates: usize,
    /// Triplets per estimate in the stochastic gradcheck.
    pub k: usize,
    pub gap_tolerance: f64,
    pub gradcheck_tolerance: f64,
    /// Synthesized material compared against the exemplar by the alignment check.
    pub synthesis: Option<PathBuf>,
    /// Optional pass bar for the alignment error; without it the check only reports.
    pub max_alignment_error: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checks: vec![Check::Unbiasedness, Check::Gradcheck],
            channels: 4,
            size: 16,
            coordinates: 100,
            k: 2,
            gap_tolerance: 1e-6,
            gradcheck_tolerance: 1e-4,
            synthesis: None,
            max_alignment_error: None,
        }
    }
}

/// Provenance appended to a written run manifest; ignored when read back.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    pub extractor_fingerprint: String,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Material manifest of the exemplar.
    pub exemplar: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub extractor: ExtractorSection,
    pub loss: LossConfig,
    pub synthesis: SynthesisSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            exemplar: None,
            output_dir: PathBuf::from("out"),
            extractor: ExtractorSection::default(),
            loss: LossConfig::default(),
            synthesis: SynthesisSection::default(),
            train: TrainSection::default(),
            generate: GenerateSection::default(),
            eval: EvalSection::default(),
            run: None,
        }
    }
}

fn absolute(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn cwd() -> PathBuf {
    std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.run = None;
        config.rebase(base_dir);
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let base = path.parent().map(|p| absolute(p, &cwd())).unwrap_or_else(cwd);
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Makes every relative path absolute with respect to `base`.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                *path = absolute(path, base);
            }
        };
        fix(&mut self.exemplar);
        fix(&mut self.train.model);
        fix(&mut self.generate.model);
        fix(&mut self.eval.synthesis);
        self.output_dir = absolute(&self.output_dir, base);
        if let Some(w) = &self.extractor.weights {
            if w != MOCK_WEIGHTS {
                self.extractor.weights = Some(absolute(Path::new(w), base).to_string_lossy().into_owned());
            }
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn k(&self) -> usize {
        match self.loss.mode {
            LossMode::Stochastic { k } => k,
            LossMode::Exact => 1,
        }
    }

    pub fn synthesis_config(&self) -> SynthesisConfig {
        let s = &self.synthesis;
        let objective = match (&s.separate_groups, self.loss.mode) {
            (Some(groups), _) => Objective::Separate { groups: groups.clone() },
            (None, LossMode::Stochastic { k }) => Objective::Stochastic { k },
            (None, LossMode::Exact) => Objective::Exact,
        };
        SynthesisConfig {
            height: s.height,
            width: s.width,
            steps: s.steps,
            adam: s.adam,
            seed: self.seed,
            objective,
            init: s.init,
            noise_amplitude: s.noise_amplitude,
            parameterization: s.parameterization,
            exact_every: s.exact_every,
            checkpoint_every: s.checkpoint_every,
            enumeration_cap: self.loss.enumeration_cap,
            cache_entries: self.loss.cache_entries,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if self.loss.mode == LossMode::Exact {
            return Err(Error::Config(
                "generator training uses the stochastic loss; set mode = \"stochastic\"".into(),
            ));
        }
        let t = &self.train;
        Ok(TrainConfig {
            batch_size: t.batch_size,
            steps: t.steps,
            adam: t.adam,
            seed: self.seed,
            k: self.k(),
            per_element_triplets: self.loss.per_element_triplets,
            crop_size: t.crop_size,
            checkpoint_every: t.checkpoint_every,
            architecture: t.architecture.clone(),
            cache_entries: self.loss.cache_entries,
            divergence_window: t.divergence_window,
            divergence_patience: t.divergence_patience,
        })
    }

    fn model_path(&self) -> PathBuf {
        self.train
            .model
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.safetensors"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tritex",
    version,
    about = "Multi-channel material texture synthesis with randomized channel triplets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a stack directly against the exemplar.
    Synthesize(SynthesizeArgs),
    /// Train a feedforward generator on the exemplar.
    Train(TrainArgs),
    /// Sample a trained generator at any admissible size.
    Generate(GenerateArgs),
    /// Run the unbiasedness, gradient and alignment checks.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Material manifest of the exemplar.
    #[arg(long)]
    pub exemplar: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature network weights: `mock` or a VGG-19 safetensors file.
    #[arg(long)]
    pub weights: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Stochastic,
    Exact,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output size as HxW (or a single number for a square).
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Triplets per step for the stochastic loss.
    #[arg(long)]
    pub k: Option<usize>,
    /// Allow the exact loss beyond the enumeration cap.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training crop side length.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Where to write the model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checks to run, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub checks: Option<Vec<Check>>,
    /// Synthesized material manifest for the alignment check.
    #[arg(long)]
    pub synthesis: Option<PathBuf>,
}

pub fn parse_size(text: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("invalid size {text:?}; expected HxW"))
    };
    match text.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(text).map(|s| (s, s)),
    }
}

/// Exit code for a library error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::NonFiniteLoss { .. }
        | Error::Diverged { .. }
        | Error::NonFinite(_)
        | Error::Io(_)
        | Error::ExtractorMismatch(_) => EXIT_RUNTIME,
        _ => EXIT_CONFIG,
    }
}

fn base_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.rebase(&cwd());
            c
        }
    };
    let here = cwd();
    if let Some(p) = &common.exemplar {
        config.exemplar = Some(absolute(p, &here));
    }
    if let Some(p) = &common.out {
        config.output_dir = absolute(p, &here);
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(w) = &common.weights {
        config.extractor.weights = Some(if w == MOCK_WEIGHTS {
            w.clone()
        } else {
            absolute(Path::new(w), &here).to_string_lossy().into_owned()
        });
    }
    Ok(config)
}

fn load_exemplar(config: &ExperimentConfig) -> Result<(MaterialStack, MaterialManifest)> {
    let path = config
        .exemplar
        .as_ref()
        .ok_or_else(|| Error::Config("no exemplar given (use --exemplar or `exemplar` in the config)".into()))?;
    let manifest = MaterialManifest::from_file(path)?;
    let stack = load_material(&manifest)?;
    Ok((stack, manifest))
}

fn write_maps(stack: &MaterialStack, dir: &Path, bit_depth: u8) -> Result<()> {
    let manifest = MaterialManifest::for_output(stack.layout(), dir, bit_depth);
    save_material(stack, &manifest)?;
    let relative = MaterialManifest::for_output(stack.layout(), ".", bit_depth);
    fs::write(dir.join("manifest.toml"), relative.to_toml_string())?;
    Ok(())
}

fn write_run_manifest(
    config: &ExperimentConfig,
    command: &str,
    extractor: &ExtractorConfig,
    warnings: Vec<String>,
) -> Result<()> {
    let mut resolved = config.clone();
    resolved.extractor = ExtractorSection::from_config(extractor);
    resolved.run = Some(RunInfo {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        extractor_fingerprint: extractor.fingerprint(),
        warnings,
    });
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("run.toml"), resolved.to_toml_string())?;
    Ok(())
}

pub fn cmd_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    if let Some(steps) = args.steps {
        config.synthesis.steps = steps;
    }
    if let Some(lr) = args.lr {
        config.synthesis.adam.learning_rate = lr;
    }
    if let Some((h, w)) = args.size {
        config.synthesis.height = h;
        config.synthesis.width = w;
    }
    match (args.loss, args.k) {
        (Some(LossArg::Exact), _) => config.loss.mode = LossMode::Exact,
        (Some(LossArg::Stochastic), k) => config.loss.mode = LossMode::Stochastic { k: k.unwrap_or(1) },
        (None, Some(k)) => config.loss.mode = LossMode::Stochastic { k },
        (None, None) => {}
    }
    let (exemplar, manifest) = load_exemplar(&config)?;
    let n = exemplar.channels();
    if config.loss.mode == LossMode::Exact && n > config.loss.enumeration_cap {
        if args.force {
            log::warn!("exact loss over {} triplets forced past the enumeration cap", n * n * n);
            config.loss.enumeration_cap = n;
        } else {
            return Err(Error::Config(format!(
                "{n} channels exceed the exact-loss enumeration cap of {} ({} evaluations per step); pass --force or use the stochastic loss",
                config.loss.enumeration_cap,
                n * n * n
            )));
        }
    }
    let extractor_config = config.extractor.resolve();
    let extractor = FeatureExtractor::load(extractor_config.clone())?;
    let synth = config.synthesis_config();
    write_run_manifest(&config, "synthesize", &extractor_config, Vec::new())?;

    let out = config.output_dir.clone();
    let depth = manifest.bit_depth;
    let result = synthesize_with(&exemplar, &synth, &extractor, &mut |step, stack| {
        let dir = out.join("checkpoints").join(format!("step_{step:06}"));
        write_maps(stack, &dir, depth)
    })?;
    write_maps(&result.stack, &out, depth)?;
    fs::write(out.join("trace.csv"), trace_to_csv(&result.trace))?;
    log::info!("synthesis written to {}", out.display());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    if let Some(lr) = args.lr {
        config.train.adam.learning_rate = lr;
    }
    if let Some(k) = args.k {
        config.loss.mode = LossMode::Stochastic { k };
    }
    if let Some(b) = args.batch {
        config.train.batch_size = b;
    }
    if let Some(c) = args.crop {
        config.train.crop_size = c;
    }
    if let Some(m) = &args.model {
        config.train.model = Some(absolute(m, &cwd()));
    }
    config.train.model = Some(config.model_path());
    let train = config.train_config()?;
    let (exemplar, _) = load_exemplar(&config)?;
    let extractor_config = config.extractor.resolve();
    let extractor = FeatureExtractor::load(extractor_config.clone())?;
    write_run_manifest(&config, "train", &extractor_config, Vec::new())?;

    let out = config.output_dir.clone();
    let outcome = train_generator_with(&exemplar, &train, &extractor, &mut |step, model| {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir)?;
        model.save(&dir.join(format!("model_step_{step:06}.safetensors")))
    })?;
    let model_path = config.model_path();
    if let Some(parent) = model_path.parent() {
        fs::create_dir_all(parent)?;
    }
    outcome.model.save(&model_path)?;
    fs::write(out.join("train_trace.csv"), train_trace_to_csv(&outcome.trace))?;
    log::info!("model written to {}", model_path.display());
    Ok(())
}

/// Admissible neighbours of a requested size for a pyramid factor.
fn admissible_sizes(height: usize, width: usize, factor: usize) -> String {
    let around = |v: usize| {
        let lo = (v / factor) * factor;
        let mut opts: Vec<usize> = [lo, lo + factor].into_iter().filter(|&x| x > 0).collect();
        opts.dedup();
        opts
    };
    let mut sizes = Vec::new();
    for h in around(height) {
        for w in around(width) {
            sizes.push(format!("{h}x{w}"));
        }
    }
    sizes.join(", ")
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    if let Some(m) = &args.model {
        config.generate.model = Some(absolute(m, &cwd()));
    }
    if let Some((h, w)) = args.size {
        config.generate.height = h;
        config.generate.width = w;
    }
    let model_path = config
        .generate
        .model
        .clone()
        .ok_or_else(|| Error::Config("no model given (use --model or [generate] model)".into()))?;
    config.generate.model = Some(model_path.clone());
    let extractor_config = config.extractor.resolve();
    let loaded = load_model(&model_path, Some(&extractor_config.fingerprint()))?;
    let (h, w) = (config.generate.height, config.generate.width);
    let stack = loaded.model.generate(h, w, config.seed).map_err(|e| match e {
        Error::PyramidSize { factor, .. } => Error::Config(format!(
            "size {h}x{w} is not a multiple of {factor} (the model has {} scales); admissible nearby sizes: {}",
            loaded.model.arch().scales,
            admissible_sizes(h, w, factor)
        )),
        other => other,
    })?;
    write_run_manifest(&config, "generate", &extractor_config, loaded.warnings)?;
    write_maps(&stack, &config.output_dir, 8)?;
    Ok(())
}

/// Everything `eval` measured; written as `eval_report.json`.
#[derive(Debug, Default, Serialize)]
pub struct EvalReport {
    pub unbiasedness: Vec<UnbiasednessReport>,
    pub gradcheck_loss_3channel: Option<GradcheckReport>,
    pub gradcheck_stochastic: Option<GradcheckReport>,
    /// Edge-correlation alignment error, a proxy for inter-channel correlation.
    pub alignment: Option<AlignmentReport>,
    pub failures: Vec<String>,
    pub passed: bool,
}

fn random_stack(n: usize, size: usize, rng: &mut impl Rng) -> Result<MaterialStack> {
    let data = Array3::from_shape_simple_fn((n, size, size), || rng.gen::<f64>());
    MaterialStack::from_planes(data)
}

pub fn run_eval(config: &ExperimentConfig, extractor: &FeatureExtractor) -> Result<EvalReport> {
    let e = &config.eval;
    let mut report = EvalReport::default();
    let mut rng = seed::stream(config.seed, "eval");
    if e.checks.contains(&Check::Unbiasedness) {
        for n in 1..=e.channels {
            let a = random_stack(n, e.size, &mut rng)?;
            let b = random_stack(n, e.size, &mut rng)?;
            let r = unbiasedness_check(&a, &b, extractor, e.channels.max(config.loss.enumeration_cap))?;
            if !(r.relative_gap < e.gap_tolerance) {
                report.failures.push(format!(
                    "unbiasedness n={n}: gap {:e} >= {:e}",
                    r.relative_gap, e.gap_tolerance
                ));
            }
            report.unbiasedness.push(r);
        }
    }
    if e.checks.contains(&Check::Gradcheck) {
        let image = random_stack(3, e.size, &mut rng)?;
        let reference = random_stack(3, e.size, &mut rng)?;
        let grams = extractor.gram_statistics(reference.data())?;
        let r = gradcheck_loss_3channel(extractor, image.data(), &grams, e.coordinates, config.seed)?;
        if !(r.max_relative_error < e.gradcheck_tolerance) {
            report
                .failures
                .push(format!("gradcheck loss_3channel: {:e}", r.max_relative_error));
        }
        report.gradcheck_loss_3channel = Some(r);
        let n = e.channels.max(1);
        let a = random_stack(n, e.size, &mut rng)?;
        let b = random_stack(n, e.size, &mut rng)?;
        let r = gradcheck_stochastic(extractor, &a, &b, e.k.max(1), config.seed, e.coordinates, config.seed)?;
        if !(r.max_relative_error < e.gradcheck_tolerance) {
            report
                .failures
                .push(format!("gradcheck stochastic: {:e}", r.max_relative_error));
        }
        report.gradcheck_stochastic = Some(r);
    }
    if e.checks.contains(&Check::Alignment) {
        let synthesis_path = e
            .synthesis
            .as_ref()
            .ok_or_else(|| Error::Config("alignment check needs --synthesis <manifest>".into()))?;
        let (exemplar, _) = load_exemplar(config)?;
        let synthesis = load_material(&MaterialManifest::from_file(synthesis_path)?)?;
        let r = alignment_metric(&exemplar, &synthesis)?;
        if let Some(max) = e.max_alignment_error {
            if !(r.error() <= max) {
                report
                    .failures
                    .push(format!("alignment error {:.4} > {max}", r.error()));
            }
        }
        report.alignment = Some(r);
    }
    report.passed = report.failures.is_empty();
    Ok(report)
}

/// Returns whether every enabled check passed.
pub fn cmd_eval(args: &EvalArgs) -> Result<bool> {
    let mut config = base_config(&args.common)?;
    if let Some(checks) = &args.checks {
        config.eval.checks = checks.clone();
    }
    if let Some(s) = &args.synthesis {
        config.eval.synthesis = Some(absolute(s, &cwd()));
        if args.checks.is_none() && !config.eval.checks.contains(&Check::Alignment) {
            config.eval.checks.push(Check::Alignment);
        }
    }
    let extractor_config = config.extractor.resolve();
    let extractor = FeatureExtractor::load(extractor_config.clone())?;
    write_run_manifest(&config, "eval", &extractor_config, Vec::new())?;
    let report = run_eval(&config, &extractor)?;
    let out = &config.output_dir;
    fs::write(
        out.join("eval_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    if let Some(a) = &report.alignment {
        fs::write(out.join("alignment.csv"), a.to_csv())?;
    }
    for failure in &report.failures {
        log::error!("check failed: {failure}");
    }
    Ok(report.passed)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Synthesize(a) => cmd_synthesize(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Generate(a) => cmd_generate(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

//! Texture synthesis by direct optimization of an n-channel stack.

use std::fmt::Write as _;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::graph::sigmoid;
use crate::loss::{GramCache, LossReport, TexturalLoss, TripletIndex, DEFAULT_ENUMERATION_CAP};
use crate::material::MaterialStack;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Objective {
    /// Mean over `k` random triplets, redrawn every step.
    Stochastic { k: usize },
    /// Mean over all `n³` triplets.
    Exact,
    /// Sum of 3-channel losses over fixed disjoint groups.
    Separate { groups: Vec<Vec<usize>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    UniformNoise,
    MeanPlusNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Clamped,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub objective: Objective,
    pub init: InitMode,
    pub noise_amplitude: f64,
    pub parameterization: Parameterization,
    /// Evaluate the exact loss every this many steps (0 disables).
    pub exact_every: usize,
    /// Hand intermediate stacks to the checkpoint callback every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub enumeration_cap: usize,
    pub cache_entries: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            steps: 500,
            adam: AdamConfig::default(),
            seed: 0,
            objective: Objective::Stochastic { k: 1 },
            init: InitMode::MeanPlusNoise,
            noise_amplitude: 0.1,
            parameterization: Parameterization::Sigmoid,
            exact_every: 0,
            checkpoint_every: 0,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            cache_entries: crate::loss::DEFAULT_CACHE_ENTRIES,
        }
    }
}

impl SynthesisConfig {
    fn validate(&self, extractor: &FeatureExtractor) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Objective::Stochastic { k: 0 } = self.objective {
            return Err(Error::Config("k must be at least 1".into()));
        }
        extractor.check_image(self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Training objective at this step; absent on the closing row.
    pub estimate: Option<f64>,
    pub exact: Option<f64>,
    pub triplets: Vec<TripletIndex>,
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub stack: MaterialStack,
    pub trace: Vec<TraceEntry>,
}

/// Loss trace as CSV with header `step,estimate,exact,triplets`. Missing
/// values are empty; triplets are `a-b-c` joined by `;`.
pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("step,estimate,exact,triplets\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for e in trace {
        let triplets: Vec<String> = e.triplets.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e.step,
            fmt(e.estimate),
            fmt(e.exact),
            triplets.join(";")
        );
    }
    out
}

/// Seeded starting stack for `config`.
pub fn initialize(exemplar: &MaterialStack, config: &SynthesisConfig) -> Result<MaterialStack> {
    let mut rng = seed::stream(config.seed, "init");
    let n = exemplar.channels();
    let means = exemplar.channel_means();
    let amp = config.noise_amplitude;
    let data = Array3::from_shape_fn((n, config.height, config.width), |(c, _, _)| match config.init {
        InitMode::UniformNoise => rng.gen::<f64>(),
        InitMode::MeanPlusNoise => (means[c] + amp * (2.0 * rng.gen::<f64>() - 1.0)).clamp(0.0, 1.0),
    });
    MaterialStack::new(data, exemplar.layout().clone())
}

const LOGIT_MARGIN: f64 = 1e-4;

fn logit(x: f64) -> f64 {
    let x = x.clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN);
    (x / (1.0 - x)).ln()
}

struct Objectives<'a> {
    loss: TexturalLoss<'a>,
    objective: &'a Objective,
    cap: usize,
}

impl Objectives<'_> {
    fn evaluate(
        &self,
        candidate: &MaterialStack,
        exemplar: &MaterialStack,
        rng: &mut seed::StreamRng,
    ) -> Result<(LossReport, Array3<f64>)> {
        match self.objective {
            Objective::Stochastic { k } => self.loss.stochastic_with_grad(candidate, exemplar, rng, *k),
            Objective::Exact => self.loss.exact_with_grad(candidate, exemplar, self.cap),
            Objective::Separate { groups } => self.loss.baseline_with_grad(candidate, exemplar, groups),
        }
    }
}

pub fn synthesize(
    exemplar: &MaterialStack,
    config: &SynthesisConfig,
    extractor: &FeatureExtractor,
) -> Result<SynthesisResult> {
    synthesize_with(exemplar, config, extractor, &mut |_, _| Ok(()))
}

/// Runs the optimization, calling `on_checkpoint(step, stack)` every
/// `checkpoint_every` steps.
pub fn synthesize_with(
    exemplar: &MaterialStack,
    config: &SynthesisConfig,
    extractor: &FeatureExtractor,
    on_checkpoint: &mut dyn FnMut(usize, &MaterialStack) -> Result<()>,
) -> Result<SynthesisResult> {
    config.validate(extractor)?;
    extractor.check_image(exemplar.height(), exemplar.width())?;
    let init = initialize(exemplar, config)?;
    if config.steps == 0 {
        return Ok(SynthesisResult {
            stack: init,
            trace: Vec::new(),
        });
    }

    let cache = GramCache::new(config.cache_entries);
    let loss = TexturalLoss::with_cache(extractor, &cache);
    let objectives = Objectives {
        loss,
        objective: &config.objective,
        cap: config.enumeration_cap,
    };
    let mut triplet_rng = seed::stream(config.seed, "triplets");
    let layout = exemplar.layout().clone();

    // Optimized variable: logits for the sigmoid mode, raw values when clamped.
    let mut param: Vec<f64> = match config.parameterization {
        Parameterization::Sigmoid => init.data().iter().map(|&v| logit(v)).collect(),
        Parameterization::Clamped => init.data().iter().copied().collect(),
    };
    let shape = init.data().raw_dim();
    let to_stack = |param: &[f64]| -> Result<MaterialStack> {
        let values: Vec<f64> = match config.parameterization {
            Parameterization::Sigmoid => param.iter().map(|&z| sigmoid(z)).collect(),
            Parameterization::Clamped => param.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        };
        let data = Array3::from_shape_vec(shape, values).expect("shape preserved");
        MaterialStack::new(data, layout.clone()).map_err(|_| Error::NonFinite("synthesized stack"))
    };

    let mut adam = Adam::new(config.adam, param.len());
    let mut trace = Vec::with_capacity(config.steps + 1);
    let exact_at = |step: usize, current: &MaterialStack| -> Result<Option<f64>> {
        if config.exact_every > 0 && step.is_multiple_of(config.exact_every) {
            Ok(Some(loss.exact(current, exemplar, config.enumeration_cap)?.total))
        } else {
            Ok(None)
        }
    };

    for step in 0..config.steps {
        let current = to_stack(&param)?;
        if config.checkpoint_every > 0 && step > 0 && step % config.checkpoint_every == 0 {
            on_checkpoint(step, &current)?;
        }
        let (report, grad) = objectives.evaluate(&current, exemplar, &mut triplet_rng)?;
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                triplets: report.triplets,
            });
        }
        trace.push(TraceEntry {
            step,
            estimate: Some(report.total),
            exact: exact_at(step, &current)?,
            triplets: report.triplets,
        });
        let grad: Vec<f64> = match config.parameterization {
            Parameterization::Sigmoid => grad
                .iter()
                .zip(current.data().iter())
                .map(|(g, x)| g * x * (1.0 - x))
                .collect(),
            Parameterization::Clamped => grad.iter().copied().collect(),
        };
        adam.step(&mut param, &grad);
        if config.parameterization == Parameterization::Clamped {
            param.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }

    let stack = to_stack(&param)?;
    trace.push(TraceEntry {
        step: config.steps,
        estimate: None,
        exact: exact_at(config.steps, &stack)?,
        triplets: Vec::new(),
    });
    if config.checkpoint_every > 0 {
        on_checkpoint(config.steps, &stack)?;
    }
    Ok(SynthesisResult { stack, trace })
}

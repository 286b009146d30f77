//! Multi-scale feedforward texture generator.
//!
//! Noise at `S` scales (finest `H × W`, coarsest `H/2^(S-1) × W/2^(S-1)`)
//! passes through a per-scale branch; branches are merged coarse to fine by
//! nearest-neighbour upsampling, channel concatenation and a join block. A
//! 1×1 projection and a sigmoid map the finest features to `n` channels in
//! `[0, 1]`. Every block is `conv3×3 → norm → act`, `conv3×3 → norm → act`,
//! `conv1×1 → norm → act`, where `norm` is a per-channel instance
//! normalization with learned gain and shift and `act` a leaky ReLU.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{ArrayD, Ix3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::container::{decode_arrays, encode_arrays, StoredType};
use crate::error::{Error, Result};
use crate::extractor::{FeatureExtractor, GramStatistics};
use crate::graph::{Graph, Tensor, Var};
use crate::loss::{record_view_loss, sample_triplet, GramCache, TexturalLoss, TripletIndex};
use crate::material::{ChannelLayout, MaterialStack};
use crate::seed;

pub const MODEL_FORMAT: &str = "tritex-generator";
pub const MODEL_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorArch {
    pub scales: usize,
    pub noise_channels: usize,
    /// Output width of each per-scale branch.
    pub branch_width: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            scales: 5,
            noise_channels: 3,
            branch_width: 8,
            leaky_slope: 0.01,
        }
    }
}

impl GeneratorArch {
    /// Output sizes must be multiples of this.
    pub fn size_factor(&self) -> usize {
        1 << (self.scales - 1)
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let factor = self.size_factor();
        if height == 0 || width == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
            return Err(Error::PyramidSize { height, width, factor });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > 12 || self.noise_channels == 0 || self.branch_width == 0 {
            return Err(Error::Config(format!("invalid generator architecture {self:?}")));
        }
        Ok(())
    }

    /// `(name, in, out, kernel)` for every block convolution, in creation order.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut blocks = Vec::new();
        let mut acc = 0;
        for s in (0..self.scales).rev() {
            blocks.push((format!("scale{s}.branch"), self.noise_channels, self.branch_width));
            if acc == 0 {
                acc = self.branch_width;
            } else {
                let width = acc + self.branch_width;
                blocks.push((format!("scale{s}.join"), width, width));
                acc = width;
            }
        }
        blocks
    }

    fn final_width(&self) -> usize {
        self.branch_width * self.scales
    }
}

/// Trained (or freshly initialized) generator weights plus provenance.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    arch: GeneratorArch,
    layout: ChannelLayout,
    extractor_fingerprint: String,
    train_config: Option<TrainConfig>,
    params: IndexMap<String, Arc<Tensor>>,
}

fn he_uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
}

struct BlockVars {
    convs: [Var; 3],
    gains: [Var; 3],
    shifts: [Var; 3],
}

impl GeneratorModel {
    pub fn new(
        arch: GeneratorArch,
        layout: ChannelLayout,
        extractor_fingerprint: impl Into<String>,
        seed_value: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::stream(seed_value, "model-init");
        let mut params = IndexMap::new();
        for (name, cin, cout) in arch.blocks() {
            for (i, (kernel, input)) in [(3, cin), (3, cout), (1, cout)].into_iter().enumerate() {
                params.insert(
                    format!("{name}.conv{i}.weight"),
                    Arc::new(he_uniform(&mut rng, &[cout, input, kernel, kernel])),
                );
                params.insert(format!("{name}.norm{i}.gain"), Arc::new(ArrayD::ones(IxDyn(&[cout]))));
                params.insert(format!("{name}.norm{i}.shift"), Arc::new(ArrayD::zeros(IxDyn(&[cout]))));
            }
        }
        let n = layout.total_channels();
        let width = arch.final_width();
        let out_w = he_uniform(&mut rng, &[n, width, 1, 1]).mapv(|v| 0.1 * v);
        params.insert("output.weight".into(), Arc::new(out_w));
        params.insert("output.bias".into(), Arc::new(ArrayD::zeros(IxDyn(&[n]))));
        Ok(Self {
            arch,
            layout,
            extractor_fingerprint: extractor_fingerprint.into(),
            train_config: None,
            params,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn extractor_fingerprint(&self) -> &str {
        &self.extractor_fingerprint
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    pub fn parameters(&self) -> &IndexMap<String, Arc<Tensor>> {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// Noise pyramid, coarsest scale first, drawn from `rng` in that order.
    pub fn sample_noise(&self, height: usize, width: usize, rng: &mut impl Rng) -> Vec<Tensor> {
        (0..self.arch.scales)
            .rev()
            .map(|s| {
                let shape = [self.arch.noise_channels, height >> s, width >> s];
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.gen::<f64>())
            })
            .collect()
    }

    /// Places every parameter on the graph; trainable when `train` is set.
    fn place_params(&self, g: &mut Graph, train: bool) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| {
                let var = if train {
                    g.variable_shared(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }

    fn block_vars(vars: &IndexMap<String, Var>, name: &str) -> BlockVars {
        let get = |suffix: String| vars[&format!("{name}.{suffix}")];
        BlockVars {
            convs: [0, 1, 2].map(|i| get(format!("conv{i}.weight"))),
            gains: [0, 1, 2].map(|i| get(format!("norm{i}.gain"))),
            shifts: [0, 1, 2].map(|i| get(format!("norm{i}.shift"))),
        }
    }

    fn record_block(&self, g: &mut Graph, vars: &BlockVars, mut x: Var) -> Var {
        for i in 0..3 {
            let pad = if i < 2 { 1 } else { 0 };
            x = g.conv2d(x, vars.convs[i], None, pad);
            x = g.instance_norm(x, vars.gains[i], vars.shifts[i]);
            x = g.leaky_relu(x, self.arch.leaky_slope);
        }
        x
    }

    /// Records a forward pass; `noise` is coarsest first. Returns the `(n, H, W)` output.
    fn record_forward(&self, g: &mut Graph, vars: &IndexMap<String, Var>, noise: &[Tensor]) -> Var {
        let mut acc: Option<Var> = None;
        for (level, s) in (0..self.arch.scales).rev().enumerate() {
            let z = g.constant(Arc::new(noise[level].clone()));
            let branch = Self::block_vars(vars, &format!("scale{s}.branch"));
            let b = self.record_block(g, &branch, z);
            acc = Some(match acc {
                None => b,
                Some(prev) => {
                    let up = g.upsample2(prev);
                    let joined = g.concat(&[up, b]);
                    let join = Self::block_vars(vars, &format!("scale{s}.join"));
                    self.record_block(g, &join, joined)
                }
            });
        }
        let features = acc.expect("at least one scale");
        let y = g.conv2d(features, vars["output.weight"], Some(vars["output.bias"]), 0);
        g.sigmoid(y)
    }

    /// Deterministic sample of size `height × width` for `seed`.
    pub fn generate(&self, height: usize, width: usize, seed_value: u64) -> Result<MaterialStack> {
        self.arch.check_size(height, width)?;
        let mut rng = seed::stream(seed_value, "noise");
        let noise = self.sample_noise(height, width, &mut rng);
        self.generate_from_noise(&noise)
    }

    pub fn generate_from_noise(&self, noise: &[Tensor]) -> Result<MaterialStack> {
        let mut g = Graph::new();
        let vars = self.place_params(&mut g, false);
        let out = self.record_forward(&mut g, &vars, noise);
        let data = g
            .value(out)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3-D output")
            .to_owned();
        MaterialStack::from_unclamped(data, self.layout.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelMetadata {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION.to_string(),
            architecture: self.arch.clone(),
            layout: self.layout.clone(),
            extractor_fingerprint: self.extractor_fingerprint.clone(),
            train_config: self.train_config.clone(),
        };
        let mut meta = HashMap::new();
        meta.insert(
            METADATA_KEY.to_string(),
            serde_json::to_string(&header).expect("serializable metadata"),
        );
        let arrays: Vec<(&str, &Tensor)> = self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref())).collect();
        encode_arrays(&arrays, StoredType::F64, &meta)
    }
}

/// Everything a model file records besides the parameters; stored as one
/// JSON document under the `generator` metadata key so files are
/// byte-for-byte reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMetadata {
    format: String,
    version: String,
    architecture: GeneratorArch,
    layout: ChannelLayout,
    extractor_fingerprint: String,
    train_config: Option<TrainConfig>,
}

const METADATA_KEY: &str = "generator";

/// A loaded model plus non-fatal findings (version or fingerprint mismatch).
#[derive(Debug)]
pub struct LoadedModel {
    pub model: GeneratorModel,
    pub warnings: Vec<String>,
}

/// Reads a model file. When `expected_fingerprint` is given and differs from
/// the stored one, a warning is recorded rather than failing.
pub fn load_model(path: &Path, expected_fingerprint: Option<&str>) -> Result<LoadedModel> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes, expected_fingerprint)
}

pub fn model_from_bytes(bytes: &[u8], expected_fingerprint: Option<&str>) -> Result<LoadedModel> {
    let named = decode_arrays(bytes).map_err(Error::Model)?;
    let text = named
        .metadata
        .get(METADATA_KEY)
        .ok_or_else(|| Error::Model(format!("not a generator model: metadata lacks `{METADATA_KEY}`")))?;
    let header: ModelMetadata = serde_json::from_str(text).map_err(|e| Error::Model(format!("metadata: {e}")))?;
    if header.format != MODEL_FORMAT {
        return Err(Error::Model(format!("not a generator model: format {}", header.format)));
    }
    let mut warnings = Vec::new();
    if header.version != MODEL_VERSION {
        warnings.push(format!("model version {} differs from {MODEL_VERSION}", header.version));
    }
    let ModelMetadata {
        architecture: arch,
        layout,
        extractor_fingerprint: fingerprint,
        train_config,
        ..
    } = header;
    if let Some(expected) = expected_fingerprint {
        if expected != fingerprint {
            warnings.push(format!(
                "extractor fingerprint {fingerprint} differs from the current extractor {expected}"
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let template = GeneratorModel::new(arch.clone(), layout.clone(), fingerprint.clone(), 0)?;
    let mut params = IndexMap::new();
    for (name, expected) in &template.params {
        let stored = named
            .arrays
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
        if stored.shape() != expected.shape() {
            return Err(Error::Model(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                stored.shape(),
                expected.shape()
            )));
        }
        params.insert(name.clone(), Arc::new(stored.clone()));
    }
    Ok(LoadedModel {
        model: GeneratorModel {
            arch,
            layout,
            extractor_fingerprint: fingerprint,
            train_config,
            params,
        },
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Triplets per batch.
    pub k: usize,
    pub per_element_triplets: bool,
    /// Square crop taken from the exemplar when it is larger; also the
    /// training resolution.
    pub crop_size: usize,
    pub checkpoint_every: usize,
    pub architecture: GeneratorArch,
    pub cache_entries: usize,
    /// Window of the running-mean loss used by the divergence guard.
    pub divergence_window: usize,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 1000,
            adam: AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
            seed: 0,
            k: 1,
            per_element_triplets: false,
            crop_size: 128,
            checkpoint_every: 0,
            architecture: GeneratorArch::default(),
            cache_entries: crate::loss::DEFAULT_CACHE_ENTRIES,
            divergence_window: 50,
            divergence_patience: 500,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.k == 0 {
            return Err(Error::Config("batch size, steps and k must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.architecture.validate()
    }

    /// Side length of generated training samples for an exemplar of this size.
    pub fn training_size(&self, exemplar: &MaterialStack) -> Result<(usize, usize)> {
        let factor = self.architecture.size_factor();
        let fit = |len: usize| (len.min(self.crop_size) / factor) * factor;
        let (h, w) = (fit(exemplar.height()), fit(exemplar.width()));
        self.architecture.check_size(h, w)?;
        Ok((h, w))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainTraceEntry {
    pub step: usize,
    pub loss: f64,
    pub triplets: Vec<TripletIndex>,
}

pub fn train_trace_to_csv(trace: &[TrainTraceEntry]) -> String {
    let mut out = String::from("step,loss,triplets\n");
    for e in trace {
        let ts: Vec<String> = e.triplets.iter().map(ToString::to_string).collect();
        out.push_str(&format!("{},{:e},{}\n", e.step, e.loss, ts.join(";")));
    }
    out
}

/// One batch worth of loss and parameter gradients.
pub struct BatchEvaluation {
    pub loss: f64,
    pub triplets: Vec<TripletIndex>,
    pub gradients: IndexMap<String, Tensor>,
}

struct Trainer<'a> {
    model: &'a GeneratorModel,
    extractor: &'a FeatureExtractor,
    loss: TexturalLoss<'a>,
    size: (usize, usize),
}

impl Trainer<'_> {
    fn evaluate_batch(
        &self,
        exemplar: &MaterialStack,
        triplets_per_element: &[Vec<TripletIndex>],
        noise_rng: &mut impl Rng,
    ) -> Result<BatchEvaluation> {
        let mut g = Graph::new();
        let vars = self.model.place_params(&mut g, true);
        let batch = triplets_per_element.len();
        let mut terms = Vec::new();
        let mut references: HashMap<TripletIndex, Arc<GramStatistics>> = HashMap::new();
        for triplets in triplets_per_element {
            let noise = self.model.sample_noise(self.size.0, self.size.1, noise_rng);
            let out = self.model.record_forward(&mut g, &vars, &noise);
            for &t in triplets {
                let reference = match references.get(&t) {
                    Some(r) => r.clone(),
                    None => {
                        let r = self.loss.reference_grams(exemplar, t)?;
                        references.insert(t, r.clone());
                        r
                    }
                };
                let view = g.gather(out, &t.channels());
                let (total, _) = record_view_loss(&mut g, self.extractor, view, &reference)?;
                terms.push(g.scale(total, 1.0 / (batch * triplets.len()) as f64));
            }
        }
        let total = g.sum(&terms);
        let loss = g.scalar(total);
        let mut grads = g.backward(total);
        let gradients = vars
            .iter()
            .map(|(name, var)| {
                let grad = grads
                    .take(*var)
                    .unwrap_or_else(|| ArrayD::zeros(self.model.params[name].raw_dim()));
                (name.clone(), grad)
            })
            .collect();
        let mut seen = Vec::new();
        for t in triplets_per_element.iter().flatten() {
            if !seen.contains(t) {
                seen.push(*t);
            }
        }
        Ok(BatchEvaluation {
            loss,
            triplets: seen,
            gradients,
        })
    }
}

fn draw_triplets(config: &TrainConfig, n: usize, rng: &mut impl rand::RngCore) -> Result<Vec<Vec<TripletIndex>>> {
    let draw = |rng: &mut dyn rand::RngCore| -> Result<Vec<TripletIndex>> {
        (0..config.k).map(|_| sample_triplet(n, rng)).collect()
    };
    if config.per_element_triplets {
        (0..config.batch_size).map(|_| draw(rng)).collect()
    } else {
        let shared = draw(rng)?;
        Ok(vec![shared; config.batch_size])
    }
}

/// Loss and parameter gradients of `model` on one random batch, without updating it.
pub fn batch_gradients(
    model: &GeneratorModel,
    exemplar: &MaterialStack,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
) -> Result<BatchEvaluation> {
    config.validate()?;
    let size = config.training_size(exemplar)?;
    let crop = exemplar.crop(
        0,
        0,
        exemplar.height().min(config.crop_size),
        exemplar.width().min(config.crop_size),
    )?;
    let trainer = Trainer {
        model,
        extractor,
        loss: TexturalLoss::new(extractor),
        size,
    };
    let mut triplet_rng = seed::stream(config.seed, "triplets");
    let mut noise_rng = seed::stream(config.seed, "noise");
    let triplets = draw_triplets(config, exemplar.channels(), &mut triplet_rng)?;
    trainer.evaluate_batch(&crop, &triplets, &mut noise_rng)
}

/// Aborts training once the running-mean loss has stayed above ten times
/// its minimum for `patience` consecutive steps.
#[derive(Clone, Debug)]
pub struct DivergenceGuard {
    window: VecDeque<f64>,
    capacity: usize,
    sum: f64,
    minimum: f64,
    patience: usize,
    above: usize,
}

impl DivergenceGuard {
    pub fn new(window: usize, patience: usize) -> Self {
        Self {
            window: VecDeque::new(),
            capacity: window.max(1),
            sum: 0.0,
            minimum: f64::INFINITY,
            patience: patience.max(1),
            above: 0,
        }
    }

    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        self.window.push_back(loss);
        self.sum += loss;
        if self.window.len() > self.capacity {
            self.sum -= self.window.pop_front().expect("non-empty window");
        }
        let running = self.sum / self.window.len() as f64;
        self.minimum = self.minimum.min(running);
        if running > 10.0 * self.minimum {
            self.above += 1;
            if self.above >= self.patience {
                return Err(Error::Diverged {
                    step,
                    running_mean: running,
                    minimum: self.minimum,
                });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GeneratorModel,
    pub trace: Vec<TrainTraceEntry>,
}

pub fn train_generator(
    exemplar: &MaterialStack,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
) -> Result<TrainOutcome> {
    train_generator_with(exemplar, config, extractor, &mut |_, _| Ok(()))
}

/// Trains a fresh generator, calling `on_checkpoint(step, model)` every
/// `checkpoint_every` steps.
pub fn train_generator_with(
    exemplar: &MaterialStack,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
    on_checkpoint: &mut dyn FnMut(usize, &GeneratorModel) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let size = config.training_size(exemplar)?;
    extractor.check_image(size.0, size.1)?;
    let mut model = GeneratorModel::new(
        config.architecture.clone(),
        exemplar.layout().clone(),
        extractor.config().fingerprint(),
        config.seed,
    )?;
    model.train_config = Some(config.clone());

    let cache = GramCache::new(config.cache_entries);
    let n = exemplar.channels();
    let mut triplet_rng = seed::stream(config.seed, "triplets");
    let mut noise_rng = seed::stream(config.seed, "noise");
    let mut crop_rng = seed::stream(config.seed, "crops");
    let needs_crop = exemplar.height() > config.crop_size || exemplar.width() > config.crop_size;
    let mut optimizers: IndexMap<String, Adam> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), Adam::new(config.adam, v.len())))
        .collect();

    let mut trace = Vec::with_capacity(config.steps);
    let mut guard = DivergenceGuard::new(config.divergence_window, config.divergence_patience);

    for step in 0..config.steps {
        let reference = if needs_crop {
            let (ch, cw) = (
                exemplar.height().min(config.crop_size),
                exemplar.width().min(config.crop_size),
            );
            let top = crop_rng.gen_range(0..=exemplar.height() - ch);
            let left = crop_rng.gen_range(0..=exemplar.width() - cw);
            exemplar.crop(top, left, ch, cw)?
        } else {
            exemplar.clone()
        };
        let triplets = draw_triplets(config, n, &mut triplet_rng)?;
        let eval = {
            let trainer = Trainer {
                model: &model,
                extractor,
                loss: TexturalLoss::with_cache(extractor, &cache),
                size,
            };
            trainer.evaluate_batch(&reference, &triplets, &mut noise_rng)?
        };
        if !eval.loss.is_finite() || eval.gradients.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss {
                step,
                triplets: eval.triplets,
            });
        }
        for (name, grad) in &eval.gradients {
            let param = Arc::make_mut(model.params.get_mut(name).expect("known parameter"));
            let slice = param.as_slice_mut().expect("contiguous parameter");
            optimizers[name].step(slice, grad.as_slice().expect("contiguous gradient"));
        }
        trace.push(TrainTraceEntry {
            step,
            loss: eval.loss,
            triplets: eval.triplets,
        });

        guard.observe(step, eval.loss)?;

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            on_checkpoint(step + 1, &model)?;
        }
    }
    Ok(TrainOutcome { model, trace })
}

/// Convenience for tests and evaluation: exact n-channel loss of a generated sample.
pub fn sample_exact_loss(
    model: &GeneratorModel,
    exemplar: &MaterialStack,
    extractor: &FeatureExtractor,
    height: usize,
    width: usize,
    seed_value: u64,
    cap: usize,
) -> Result<f64> {
    let sample = model.generate(height, width, seed_value)?;
    Ok(TexturalLoss::new(extractor).exact(&sample, exemplar, cap)?.total)
}

/// Output of an untrained generator, mainly for comparisons.
pub fn untrained(
    arch: GeneratorArch,
    layout: ChannelLayout,
    extractor: &FeatureExtractor,
    seed_value: u64,
) -> Result<GeneratorModel> {
    GeneratorModel::new(arch, layout, extractor.config().fingerprint(), seed_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn small_arch() -> GeneratorArch {
        GeneratorArch {
            scales: 3,
            ..Default::default()
        }
    }

    fn exemplar(n: usize, size: usize) -> MaterialStack {
        let data = Array3::from_shape_fn((n, size, size), |(c, i, j)| {
            0.5 + 0.4 * ((i as f64 * 1.1 + c as f64).sin() * (j as f64 * 0.6).cos())
        });
        MaterialStack::from_planes(data).unwrap()
    }

    #[test]
    fn shape_law_and_parameter_count() {
        let m = GeneratorModel::new(small_arch(), ChannelLayout::anonymous(4).unwrap(), "fp", 1).unwrap();
        for (h, w) in [(4, 4), (8, 12), (16, 4)] {
            let s = m.generate(h, w, 0).unwrap();
            assert_eq!(s.data().dim(), (4, h, w));
            assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(matches!(m.generate(6, 8, 0), Err(Error::PyramidSize { factor: 4, .. })));
        assert!(m.generate(0, 8, 0).is_err());
        // 3 blocks x (3 convs + 3 norms) + branch/join widths, counted independently
        let (nc, bw) = (3, 8);
        let block = |cin: usize, cout: usize| cout * cin * 9 + cout * cout * 9 + cout * cout + 6 * cout;
        let expected = 3 * block(nc, bw) + block(16, 16) + block(24, 24) + 4 * 24 + 4;
        assert_eq!(m.parameter_count(), expected);
    }

    #[test]
    fn generation_is_seeded() {
        let m = GeneratorModel::new(small_arch(), ChannelLayout::anonymous(2).unwrap(), "fp", 1).unwrap();
        let a = m.generate(8, 8, 5).unwrap();
        assert_eq!(a, m.generate(8, 8, 5).unwrap());
        let b = m.generate(8, 8, 6).unwrap();
        let diff = (a.data() - b.data()).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let m = GeneratorModel::new(small_arch(), ChannelLayout::pbr(), "abc", 2).unwrap();
        let bytes = m.to_bytes();
        let loaded = model_from_bytes(&bytes, Some("abc")).unwrap();
        assert!(loaded.warnings.is_empty());
        for (k, v) in m.parameters() {
            let w = &loaded.model.parameters()[k];
            assert!(v.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(loaded.model.layout(), &ChannelLayout::pbr());
        let mismatched = model_from_bytes(&bytes, Some("other")).unwrap();
        assert_eq!(mismatched.warnings.len(), 1);
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() / 2], None),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn one_step_changes_weights() {
        let ex = FeatureExtractor::mock();
        let e = exemplar(2, 8);
        let config = TrainConfig {
            steps: 1,
            batch_size: 1,
            architecture: small_arch(),
            seed: 3,
            ..Default::default()
        };
        let out = train_generator(&e, &config, &ex).unwrap();
        assert_eq!(out.trace.len(), 1);
        let init = GeneratorModel::new(small_arch(), e.layout().clone(), "", 3).unwrap();
        let changed = init
            .parameters()
            .iter()
            .any(|(k, v)| v.as_ref() != out.model.parameters()[k].as_ref());
        assert!(changed);
        assert!(out.model.train_config().is_some());
    }

    #[test]
    fn per_element_triplets_differ() {
        let config = TrainConfig {
            batch_size: 8,
            per_element_triplets: true,
            ..Default::default()
        };
        let mut rng = seed::stream(0, "triplets");
        let drawn = draw_triplets(&config, 9, &mut rng).unwrap();
        assert_eq!(drawn.len(), 8);
        assert!(drawn.iter().any(|t| t != &drawn[0]));
        let shared = draw_triplets(
            &TrainConfig {
                batch_size: 8,
                ..Default::default()
            },
            9,
            &mut rng,
        )
        .unwrap();
        assert!(shared.iter().all(|t| t == &shared[0]));
    }

    #[test]
    fn divergence_guard_needs_sustained_growth() {
        let mut guard = DivergenceGuard::new(1, 3);
        guard.observe(0, 1.0).unwrap();
        guard.observe(1, 20.0).unwrap();
        guard.observe(2, 0.5).unwrap();
        guard.observe(3, 20.0).unwrap();
        guard.observe(4, 20.0).unwrap();
        assert!(matches!(guard.observe(5, 20.0), Err(Error::Diverged { step: 5, .. })));
    }

    #[test]
    fn training_size_rounds_to_pyramid() {
        let config = TrainConfig::default();
        assert_eq!(config.training_size(&exemplar(1, 40)).unwrap(), (32, 32));
        assert_eq!(config.training_size(&exemplar(1, 300)).unwrap(), (128, 128));
        assert!(config.training_size(&exemplar(1, 8)).is_err());
    }
}

//! Python bindings: material stacks, feature extractors, the textural losses,
//! per-image synthesis, the feedforward generator and the evaluation checks.
//!
//! Stacks cross the boundary as `float64` arrays shaped `(channels, height, width)`.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplet_texture::evaluation::{alignment_metric, unbiasedness_check};
use triplet_texture::generator::{load_model, train_generator, train_trace_to_csv};
use triplet_texture::loss::{sample_triplet, DEFAULT_ENUMERATION_CAP};
use triplet_texture::material::{load_material, save_material};
use triplet_texture::synthesis::{synthesize as run_synthesis, trace_to_csv, Objective, SynthesisConfig};
use triplet_texture::{
    ChannelLayout, Error, ExtractorConfig, FeatureExtractor, GeneratorModel, LossReport, MaterialManifest,
    MaterialStack, TexturalLoss, TrainConfig,
};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::MissingFile(path) => PyFileNotFoundError::new_err(path.display().to_string()),
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e @ (Error::Diverged { .. } | Error::NonFiniteLoss { .. }) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn triplet_tuples(report: &LossReport) -> Vec<(usize, usize, usize)> {
    report
        .triplets
        .iter()
        .map(|t| {
            let [a, b, c] = t.channels();
            (a, b, c)
        })
        .collect()
}

#[pyclass(name = "ChannelLayout", module = "tritex", frozen, from_py_object)]
#[derive(Clone)]
struct PyChannelLayout {
    inner: ChannelLayout,
}

#[pymethods]
impl PyChannelLayout {
    /// Layout from `(role, width)` pairs, e.g. `[("albedo", 3), ("roughness", 1)]`.
    #[new]
    fn new(entries: Vec<(String, usize)>) -> PyResult<Self> {
        Ok(Self {
            inner: ChannelLayout::new(entries).map_err(to_py)?,
        })
    }

    /// albedo 3, normal 3, roughness 1, metalness 1, ao 1.
    #[staticmethod]
    fn pbr() -> Self {
        Self {
            inner: ChannelLayout::pbr(),
        }
    }

    /// `n` single-channel roles named `c0`, `c1`, ….
    #[staticmethod]
    fn anonymous(n: usize) -> PyResult<Self> {
        Ok(Self {
            inner: ChannelLayout::anonymous(n).map_err(to_py)?,
        })
    }

    #[getter]
    fn entries(&self) -> Vec<(String, usize)> {
        self.inner.entries().to_vec()
    }

    #[getter]
    fn total_channels(&self) -> usize {
        self.inner.total_channels()
    }

    fn __repr__(&self) -> String {
        let roles: Vec<String> = self.inner.entries().iter().map(|(r, w)| format!("{r}:{w}")).collect();
        format!("ChannelLayout({})", roles.join(", "))
    }
}

#[pyclass(name = "MaterialStack", module = "tritex", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMaterialStack {
    inner: MaterialStack,
}

#[pymethods]
impl PyMaterialStack {
    /// Stack from a `(channels, height, width)` array with values in `[0, 1]`.
    #[new]
    #[pyo3(signature = (data, layout=None))]
    fn new(data: PyReadonlyArray3<'_, f64>, layout: Option<PyChannelLayout>) -> PyResult<Self> {
        let data = data.as_array().to_owned();
        let inner = match layout {
            Some(l) => MaterialStack::new(data, l.inner),
            None => MaterialStack::from_planes(data),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Load the maps listed in a material manifest.
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        let manifest = MaterialManifest::from_file(&manifest).map_err(to_py)?;
        Ok(Self {
            inner: load_material(&manifest).map_err(to_py)?,
        })
    }

    /// Write one PNG per role into `directory`; returns the written paths.
    #[pyo3(signature = (directory, bit_depth=8))]
    fn save(&self, directory: PathBuf, bit_depth: u8) -> PyResult<Vec<PathBuf>> {
        let manifest = MaterialManifest::for_output(self.inner.layout(), directory, bit_depth);
        save_material(&self.inner, &manifest).map_err(to_py)
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f64>> {
        self.inner.data().clone().into_pyarray(py)
    }

    #[getter]
    fn layout(&self) -> PyChannelLayout {
        PyChannelLayout {
            inner: self.inner.layout().clone(),
        }
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn __repr__(&self) -> String {
        format!(
            "MaterialStack(channels={}, height={}, width={})",
            self.inner.channels(),
            self.inner.height(),
            self.inner.width()
        )
    }
}

#[pyclass(name = "FeatureExtractor", module = "tritex", frozen)]
struct PyFeatureExtractor {
    inner: FeatureExtractor,
}

#[pymethods]
impl PyFeatureExtractor {
    /// Tiny deterministic network for tests and quick experiments.
    #[staticmethod]
    fn mock() -> Self {
        Self {
            inner: FeatureExtractor::mock(),
        }
    }

    /// VGG-19 from a safetensors weights file with the default taps.
    #[staticmethod]
    fn vgg19(weights: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: FeatureExtractor::load(ExtractorConfig::vgg19(weights)).map_err(to_py)?,
        })
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.config().fingerprint()
    }

    #[getter]
    fn feature_counts(&self) -> Vec<usize> {
        self.inner.feature_counts().to_vec()
    }

    #[getter]
    fn min_size(&self) -> usize {
        self.inner.min_size()
    }

    /// Per-tap Gram matrices of a 3-channel `(3, height, width)` image.
    fn gram_statistics<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'_, f64>,
    ) -> PyResult<Vec<Bound<'py, PyArray2<f64>>>> {
        let stats = self
            .inner
            .gram_statistics(&image.as_array().to_owned())
            .map_err(to_py)?;
        Ok((0..stats.len())
            .map(|l| stats.layer(l).to_owned().into_pyarray(py))
            .collect())
    }
}

#[pyclass(name = "LossReport", module = "tritex", frozen, get_all)]
struct PyLossReport {
    total: f64,
    per_layer: Vec<f64>,
    triplets: Vec<(usize, usize, usize)>,
}

impl From<LossReport> for PyLossReport {
    fn from(report: LossReport) -> Self {
        Self {
            triplets: triplet_tuples(&report),
            total: report.total,
            per_layer: report.per_layer,
        }
    }
}

#[pymethods]
impl PyLossReport {
    fn __repr__(&self) -> String {
        format!("LossReport(total={}, triplets={})", self.total, self.triplets.len())
    }
}

/// `FFᵀ / M` of an `(N, M)` feature matrix.
#[pyfunction]
fn gram<'py>(py: Python<'py>, features: PyReadonlyArray2<'_, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let g = triplet_texture::extractor::gram(features.as_array()).map_err(to_py)?;
    Ok(g.into_pyarray(py))
}

/// Gram loss of a 3-channel image against a 3-channel reference image.
#[pyfunction]
fn loss_3channel(
    image: PyReadonlyArray3<'_, f64>,
    reference: PyReadonlyArray3<'_, f64>,
    extractor: &PyFeatureExtractor,
) -> PyResult<PyLossReport> {
    let ex = &extractor.inner;
    let grams = ex.gram_statistics(&reference.as_array().to_owned()).map_err(to_py)?;
    let image: Array3<f64> = image.as_array().to_owned();
    Ok(triplet_texture::loss::loss_3channel(&image, &grams, ex)
        .map_err(to_py)?
        .into())
}

/// Mean of the 3-channel loss over all `n³` triplet views.
#[pyfunction]
#[pyo3(signature = (a, b, extractor, cap=DEFAULT_ENUMERATION_CAP))]
fn loss_exact(
    a: &PyMaterialStack,
    b: &PyMaterialStack,
    extractor: &PyFeatureExtractor,
    cap: usize,
) -> PyResult<PyLossReport> {
    let loss = TexturalLoss::new(&extractor.inner);
    Ok(loss.exact(&a.inner, &b.inner, cap).map_err(to_py)?.into())
}

/// Mean of the 3-channel loss over `k` uniformly drawn triplets.
#[pyfunction]
#[pyo3(signature = (a, b, extractor, k=1, seed=0))]
fn loss_stochastic(
    a: &PyMaterialStack,
    b: &PyMaterialStack,
    extractor: &PyFeatureExtractor,
    k: usize,
    seed: u64,
) -> PyResult<PyLossReport> {
    let loss = TexturalLoss::new(&extractor.inner);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(loss.stochastic(&a.inner, &b.inner, &mut rng, k).map_err(to_py)?.into())
}

/// Sum of 3-channel losses over disjoint channel groups of at most three.
#[pyfunction]
fn loss_separate(
    a: &PyMaterialStack,
    b: &PyMaterialStack,
    extractor: &PyFeatureExtractor,
    groups: Vec<Vec<usize>>,
) -> PyResult<PyLossReport> {
    let loss = TexturalLoss::new(&extractor.inner);
    Ok(loss.baseline(&a.inner, &b.inner, &groups).map_err(to_py)?.into())
}

/// `count` uniform ordered triplets over `n` channels.
#[pyfunction]
#[pyo3(signature = (n, count, seed=0))]
fn sample_triplets(n: usize, count: usize, seed: u64) -> PyResult<Vec<(usize, usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let [a, b, c] = sample_triplet(n, &mut rng).map_err(to_py)?.channels();
            Ok((a, b, c))
        })
        .collect()
}

/// Optimize an image against the exemplar. `objective` is `"stochastic"`,
/// `"exact"` or `"separate"` (which needs `groups`). Returns the stack and
/// the loss trace as CSV.
#[pyfunction]
#[pyo3(signature = (exemplar, extractor, height=64, width=64, steps=500, seed=0, objective="stochastic", k=1, groups=None, learning_rate=None))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    py: Python<'_>,
    exemplar: &PyMaterialStack,
    extractor: &PyFeatureExtractor,
    height: usize,
    width: usize,
    steps: usize,
    seed: u64,
    objective: &str,
    k: usize,
    groups: Option<Vec<Vec<usize>>>,
    learning_rate: Option<f64>,
) -> PyResult<(PyMaterialStack, String)> {
    let objective = match (objective, groups) {
        ("stochastic", None) => Objective::Stochastic { k },
        ("exact", None) => Objective::Exact,
        ("separate", Some(groups)) => Objective::Separate { groups },
        ("separate", None) => return Err(PyValueError::new_err("objective 'separate' needs groups")),
        (other @ ("stochastic" | "exact"), Some(_)) => {
            return Err(PyValueError::new_err(format!(
                "groups only apply to 'separate', not '{other}'"
            )))
        }
        (other, _) => return Err(PyValueError::new_err(format!("unknown objective '{other}'"))),
    };
    let mut config = SynthesisConfig {
        height,
        width,
        steps,
        seed,
        objective,
        ..Default::default()
    };
    if let Some(lr) = learning_rate {
        config.adam.learning_rate = lr;
    }
    let (exemplar, ex) = (&exemplar.inner, &extractor.inner);
    let out = py.detach(|| run_synthesis(exemplar, &config, ex)).map_err(to_py)?;
    Ok((PyMaterialStack { inner: out.stack }, trace_to_csv(&out.trace)))
}

#[pyclass(name = "GeneratorModel", module = "tritex", frozen)]
struct PyGeneratorModel {
    inner: GeneratorModel,
    warnings: Vec<String>,
}

#[pymethods]
impl PyGeneratorModel {
    /// Train a generator on the exemplar. Returns the model and the training
    /// trace as CSV.
    #[staticmethod]
    #[pyo3(signature = (exemplar, extractor, steps=1000, batch_size=4, crop_size=128, k=1, seed=0, learning_rate=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        exemplar: &PyMaterialStack,
        extractor: &PyFeatureExtractor,
        steps: usize,
        batch_size: usize,
        crop_size: usize,
        k: usize,
        seed: u64,
        learning_rate: Option<f64>,
    ) -> PyResult<(Self, String)> {
        let mut config = TrainConfig {
            steps,
            batch_size,
            crop_size,
            k,
            seed,
            ..Default::default()
        };
        if let Some(lr) = learning_rate {
            config.adam.learning_rate = lr;
        }
        let (exemplar, ex) = (&exemplar.inner, &extractor.inner);
        let out = py.detach(|| train_generator(exemplar, &config, ex)).map_err(to_py)?;
        Ok((
            Self {
                inner: out.model,
                warnings: Vec::new(),
            },
            train_trace_to_csv(&out.trace),
        ))
    }

    /// Load a model file. A mismatching `fingerprint` or format version is
    /// reported in `warnings`, not raised.
    #[staticmethod]
    #[pyo3(signature = (path, fingerprint=None))]
    fn load(path: PathBuf, fingerprint: Option<String>) -> PyResult<Self> {
        let loaded = load_model(Path::new(&path), fingerprint.as_deref()).map_err(to_py)?;
        Ok(Self {
            inner: loaded.model,
            warnings: loaded.warnings,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Sample a `height × width` stack; both must be multiples of `size_factor`.
    #[pyo3(signature = (height, width, seed=0))]
    fn generate(&self, py: Python<'_>, height: usize, width: usize, seed: u64) -> PyResult<PyMaterialStack> {
        let model = &self.inner;
        let inner = py.detach(|| model.generate(height, width, seed)).map_err(to_py)?;
        Ok(PyMaterialStack { inner })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn size_factor(&self) -> usize {
        self.inner.arch().size_factor()
    }

    #[getter]
    fn layout(&self) -> PyChannelLayout {
        PyChannelLayout {
            inner: self.inner.layout().clone(),
        }
    }

    #[getter]
    fn extractor_fingerprint(&self) -> String {
        self.inner.extractor_fingerprint().to_string()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

/// Mean `|ρ_synthesis − ρ_exemplar|` over channel pairs of edge-magnitude and
/// value correlations.
#[pyfunction]
fn alignment_error(exemplar: &PyMaterialStack, synthesis: &PyMaterialStack) -> PyResult<f64> {
    Ok(alignment_metric(&exemplar.inner, &synthesis.inner)
        .map_err(to_py)?
        .error())
}

/// `(exact, stochastic_mean, relative_gap)` with the estimator forced through
/// every triplet once.
#[pyfunction]
#[pyo3(signature = (a, b, extractor, cap=DEFAULT_ENUMERATION_CAP))]
fn unbiasedness(
    a: &PyMaterialStack,
    b: &PyMaterialStack,
    extractor: &PyFeatureExtractor,
    cap: usize,
) -> PyResult<(f64, f64, f64)> {
    let r = unbiasedness_check(&a.inner, &b.inner, &extractor.inner, cap).map_err(to_py)?;
    Ok((r.exact, r.stochastic_mean, r.relative_gap))
}

#[pymodule]
fn tritex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChannelLayout>()?;
    m.add_class::<PyMaterialStack>()?;
    m.add_class::<PyFeatureExtractor>()?;
    m.add_class::<PyLossReport>()?;
    m.add_class::<PyGeneratorModel>()?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(loss_3channel, m)?)?;
    m.add_function(wrap_pyfunction!(loss_exact, m)?)?;
    m.add_function(wrap_pyfunction!(loss_stochastic, m)?)?;
    m.add_function(wrap_pyfunction!(loss_separate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_triplets, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_error, m)?)?;
    m.add_function(wrap_pyfunction!(unbiasedness, m)?)?;
    Ok(())
}

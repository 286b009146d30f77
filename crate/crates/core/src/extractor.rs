//! Convolutional feature taps and Gram statistics.
//!
//! Two networks are supported: VGG-19 loaded from a named-array weights file
//! (see [`crate::container`]) and a two-layer mock with fixed pseudo-random
//! weights used for tests and desk-scale experiments.
//!
//! Layer names follow the usual VGG convention: `conv{block}_{index}`,
//! `relu{block}_{index}` and `pool{block}`. Weight arrays are named
//! `conv{b}_{i}.weight` with shape `(out, in, 3, 3)` and `conv{b}_{i}.bias`.

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Ix2, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::read_arrays;
use crate::error::{Error, Result};
use crate::graph::{self, Graph, Tensor, Var};

pub const MOCK_WEIGHTS: &str = "mock";
const MOCK_SEED: u64 = 0x005e_ed0f_7e47;

/// ImageNet statistics the VGG weights were trained with, as (mean, std).
pub const IMAGENET_NORMALIZATION: [[f64; 2]; 3] = [[0.485, 0.229], [0.456, 0.224], [0.406, 0.225]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Average,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// `"mock"` or a path to a VGG-19 weights file.
    pub weights: String,
    pub taps: Vec<String>,
    pub pooling: Pooling,
    /// Per input channel `[mean, std]`.
    pub normalization: [[f64; 2]; 3],
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::mock()
    }
}

impl ExtractorConfig {
    pub fn mock() -> Self {
        Self {
            weights: MOCK_WEIGHTS.into(),
            taps: vec!["relu1_1".into(), "relu2_1".into()],
            pooling: Pooling::Average,
            normalization: IMAGENET_NORMALIZATION,
        }
    }

    /// First block activation and the four pooling outputs.
    pub fn vgg19(weights: impl Into<PathBuf>) -> Self {
        Self {
            weights: weights.into().to_string_lossy().into_owned(),
            taps: ["relu1_1", "pool1", "pool2", "pool3", "pool4"]
                .map(String::from)
                .to_vec(),
            pooling: Pooling::Average,
            normalization: IMAGENET_NORMALIZATION,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.weights == MOCK_WEIGHTS
    }

    /// Stable identifier of everything that affects the produced features
    /// except the weight values themselves.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("serializable config");
        format!("{:016x}", crate::seed::fnv1a64(canonical.as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("extractor needs at least one tap layer".into()));
        }
        if self
            .normalization
            .iter()
            .any(|[m, s]| !(m.is_finite() && s.is_finite() && *s > 0.0))
        {
            return Err(Error::Config("normalization std must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
enum LayerKind {
    Conv { weight: Arc<Tensor>, bias: Arc<Tensor> },
    Relu,
    Pool,
}

#[derive(Debug)]
struct Layer {
    name: String,
    kind: LayerKind,
}

/// Immutable feature network.
#[derive(Debug)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    layers: Vec<Layer>,
    /// Layer index producing each configured tap.
    tap_layers: Vec<usize>,
    feature_counts: Vec<usize>,
    min_size: usize,
}

/// Per-tap feature maps flattened to `(N_l, M_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub layers: Vec<Array2<f64>>,
}

/// Per-tap Gram matrices `(N_l, N_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramStatistics {
    grams: Vec<Arc<Tensor>>,
}

impl GramStatistics {
    pub fn new(grams: Vec<Array2<f64>>) -> Self {
        Self {
            grams: grams.into_iter().map(|g| Arc::new(g.into_dyn())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn layer(&self, l: usize) -> ArrayView2<'_, f64> {
        self.grams[l].view().into_dimensionality::<Ix2>().expect("2-D gram")
    }

    pub fn feature_counts(&self) -> Vec<usize> {
        self.grams.iter().map(|g| g.shape()[0]).collect()
    }

    pub(crate) fn shared(&self, l: usize) -> Arc<Tensor> {
        self.grams[l].clone()
    }
}

/// Spatially normalized Gram matrix `F·Fᵀ / M` of an `(N, M)` feature matrix.
pub fn gram(features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if features.ncols() == 0 {
        return Err(Error::Stack("gram of a feature map with no positions".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(graph::gram(features))
}

const VGG19_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];

fn vgg19_layer_names() -> Vec<(String, Option<usize>)> {
    // (name, Some(out_channels)) for convolutions
    let mut names = Vec::new();
    for (b, (convs, width)) in VGG19_BLOCKS.iter().enumerate() {
        for i in 1..=*convs {
            names.push((format!("conv{}_{i}", b + 1), Some(*width)));
            names.push((format!("relu{}_{i}", b + 1), None));
        }
        names.push((format!("pool{}", b + 1), None));
    }
    names
}

fn mock_layers() -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(MOCK_SEED);
    let mut conv = |name: &str, inputs: usize, outputs: usize| {
        let bound = (6.0 / (inputs * 9) as f64).sqrt();
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&[outputs, inputs, 3, 3]), || rng.gen_range(-bound..bound));
        let bias = ArrayD::from_shape_simple_fn(IxDyn(&[outputs]), || rng.gen_range(-0.1..0.1));
        Layer {
            name: name.into(),
            kind: LayerKind::Conv {
                weight: Arc::new(weight),
                bias: Arc::new(bias),
            },
        }
    };
    let c1 = conv("conv1_1", 3, 8);
    let c2 = conv("conv2_1", 8, 16);
    vec![
        c1,
        Layer {
            name: "relu1_1".into(),
            kind: LayerKind::Relu,
        },
        Layer {
            name: "pool1".into(),
            kind: LayerKind::Pool,
        },
        c2,
        Layer {
            name: "relu2_1".into(),
            kind: LayerKind::Relu,
        },
    ]
}

fn vgg19_layers(path: &str, deepest: &[String]) -> Result<Vec<Layer>> {
    let names = vgg19_layer_names();
    let last = deepest
        .iter()
        .map(|t| {
            names
                .iter()
                .position(|(n, _)| n == t)
                .ok_or_else(|| Error::TapNotFound(t.clone()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .expect("at least one tap");
    let arrays = read_arrays(std::path::Path::new(path))?;
    let mut layers = Vec::new();
    let mut channels = 3;
    for (name, conv) in names.into_iter().take(last + 1) {
        let kind = match conv {
            Some(_) => {
                let fetch = |suffix: &str| {
                    arrays
                        .get(&format!("{name}.{suffix}"))
                        .cloned()
                        .ok_or_else(|| Error::Weights(format!("{path}: missing {name}.{suffix}")))
                };
                let weight = fetch("weight")?;
                let bias = fetch("bias")?;
                let shape = weight.shape().to_vec();
                if shape.len() != 4 || shape[1] != channels || shape[2] != 3 || shape[3] != 3 {
                    return Err(Error::Weights(format!(
                        "{name}.weight has shape {shape:?}, expected [out, {channels}, 3, 3]"
                    )));
                }
                if bias.shape() != [shape[0]] {
                    return Err(Error::Weights(format!("{name}.bias has shape {:?}", bias.shape())));
                }
                channels = shape[0];
                LayerKind::Conv {
                    weight: Arc::new(weight),
                    bias: Arc::new(bias),
                }
            }
            None if name.starts_with("relu") => LayerKind::Relu,
            None => LayerKind::Pool,
        };
        layers.push(Layer { name, kind });
    }
    Ok(layers)
}

impl FeatureExtractor {
    pub fn load(config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        let layers = if config.is_mock() {
            mock_layers()
        } else {
            vgg19_layers(&config.weights, &config.taps)?
        };
        let tap_layers = config
            .taps
            .iter()
            .map(|t| {
                layers
                    .iter()
                    .position(|l| &l.name == t)
                    .ok_or_else(|| Error::TapNotFound(t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut width = 3;
        let mut widths = Vec::with_capacity(layers.len());
        let mut pools = Vec::with_capacity(layers.len());
        let mut pool_count = 0u32;
        for layer in &layers {
            match &layer.kind {
                LayerKind::Conv { weight, .. } => width = weight.shape()[0],
                LayerKind::Pool => pool_count += 1,
                LayerKind::Relu => {}
            }
            widths.push(width);
            pools.push(pool_count);
        }
        let feature_counts = tap_layers.iter().map(|&i| widths[i]).collect();
        let min_size = tap_layers.iter().map(|&i| 1usize << pools[i]).max().unwrap_or(1);
        Ok(Self {
            config,
            layers,
            tap_layers,
            feature_counts,
            min_size,
        })
    }

    pub fn mock() -> Self {
        Self::load(ExtractorConfig::mock()).expect("mock extractor is valid")
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// `N_l` per tap, in configured order.
    pub fn feature_counts(&self) -> &[usize] {
        &self.feature_counts
    }

    pub fn num_taps(&self) -> usize {
        self.tap_layers.len()
    }

    /// Smallest admissible input height/width.
    pub fn min_size(&self) -> usize {
        self.min_size
    }

    /// Spatial size `(h, w)` of each tap for an `height × width` input.
    pub fn tap_sizes(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let mut size = (height, width);
        let mut sizes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let LayerKind::Pool = layer.kind {
                size = (size.0 / 2, size.1 / 2);
            }
            sizes.push(size);
        }
        self.tap_layers.iter().map(|&i| sizes[i]).collect()
    }

    /// Conv bias of the named layer, mainly for golden tests.
    pub fn conv_bias(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find_map(|l| match &l.kind {
            LayerKind::Conv { bias, .. } if l.name == name => Some(bias.as_ref()),
            _ => None,
        })
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        if height < self.min_size || width < self.min_size {
            return Err(Error::ImageTooSmall {
                height,
                width,
                min: self.min_size,
            });
        }
        Ok(())
    }

    /// Records the network on `g` for a `(3, H, W)` image in `[0, 1]`;
    /// returns one `(N_l, h_l, w_l)` feature map per tap in configured order.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Stack(format!(
                "extractor input must be (3, H, W), got {shape:?}"
            )));
        }
        self.check_image(shape[1], shape[2])?;
        if g.value(image).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extractor input"));
        }
        let scale: Vec<f64> = self.config.normalization.iter().map(|[_, s]| 1.0 / s).collect();
        let offset: Vec<f64> = self.config.normalization.iter().map(|[m, s]| -m / s).collect();
        let mut x = g.channel_affine(image, &scale, &offset);
        let last = *self.tap_layers.iter().max().expect("at least one tap");
        let mut outputs = Vec::with_capacity(last + 1);
        for layer in &self.layers[..=last] {
            x = match &layer.kind {
                LayerKind::Conv { weight, bias } => {
                    let w = g.constant(weight.clone());
                    let b = g.constant(bias.clone());
                    g.conv2d(x, w, Some(b), 1)
                }
                LayerKind::Relu => g.relu(x),
                LayerKind::Pool => match self.config.pooling {
                    Pooling::Average => g.avg_pool2(x),
                    Pooling::Max => g.max_pool2(x),
                },
            };
            outputs.push(x);
        }
        Ok(self.tap_layers.iter().map(|&i| outputs[i]).collect())
    }

    /// Records Gram matrices for every tap.
    pub fn forward_grams(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let taps = self.forward(g, image)?;
        Ok(taps.into_iter().map(|t| g.gram(t)).collect())
    }

    pub fn extract_features(&self, image: &Array3<f64>) -> Result<LayerFeatures> {
        let mut g = Graph::new();
        let x = g.constant(Arc::new(image.clone().into_dyn()));
        let taps = self.forward(&mut g, x)?;
        let layers = taps
            .into_iter()
            .map(|t| {
                let f = g.value(t).view().into_dimensionality::<Ix3>().expect("3-D features");
                let (c, h, w) = f.dim();
                f.to_owned().into_shape_with_order((c, h * w)).expect("contiguous")
            })
            .collect();
        Ok(LayerFeatures { layers })
    }

    pub fn gram_statistics(&self, image: &Array3<f64>) -> Result<GramStatistics> {
        let features = self.extract_features(image)?;
        Ok(GramStatistics::new(
            features.layers.iter().map(|f| graph::gram(f.view())).collect(),
        ))
    }

    pub(crate) fn check_reference(&self, reference: &GramStatistics) -> Result<()> {
        let counts = reference.feature_counts();
        if counts != self.feature_counts {
            return Err(Error::ExtractorMismatch(format!(
                "reference has feature counts {counts:?}, extractor produces {:?}",
                self.feature_counts
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_shape_and_sizes() {
        let ex = FeatureExtractor::mock();
        assert_eq!(ex.feature_counts(), &[8, 16]);
        assert_eq!(ex.min_size(), 2);
        let img = Array3::from_elem((3, 10, 7), 0.3);
        let f = ex.extract_features(&img).unwrap();
        // relu1_1 keeps the full 10x7 grid, pool1 floors to 5x3
        assert_eq!(f.layers[0].dim(), (8, 70));
        assert_eq!(f.layers[1].dim(), (16, 15));
        assert_eq!(ex.tap_sizes(10, 7), vec![(10, 7), (5, 3)]);
    }

    #[test]
    fn zero_normalized_input_yields_relu_of_bias() {
        let ex = FeatureExtractor::mock();
        let mean: Vec<f64> = IMAGENET_NORMALIZATION.iter().map(|[m, _]| *m).collect();
        let img = Array3::from_shape_fn((3, 6, 6), |(c, _, _)| mean[c]);
        let f = ex.extract_features(&img).unwrap();
        let bias = ex.conv_bias("conv1_1").unwrap();
        assert!(bias.iter().any(|&b| b > 0.0) && bias.iter().any(|&b| b < 0.0));
        for (c, row) in f.layers[0].outer_iter().enumerate() {
            let expected = bias[c].max(0.0);
            assert!(row.iter().all(|&v| (v - expected).abs() < 1e-12), "channel {c}");
        }
    }

    #[test]
    fn unknown_tap_and_bad_config() {
        let mut cfg = ExtractorConfig::mock();
        cfg.taps = vec!["conv9_9".into()];
        assert!(matches!(FeatureExtractor::load(cfg), Err(Error::TapNotFound(t)) if t == "conv9_9"));
        let mut cfg = ExtractorConfig::mock();
        cfg.normalization[1][1] = 0.0;
        assert!(FeatureExtractor::load(cfg).is_err());
        let mut cfg = ExtractorConfig::mock();
        cfg.taps.clear();
        assert!(FeatureExtractor::load(cfg).is_err());
    }

    #[test]
    fn too_small_and_non_finite_inputs() {
        let ex = FeatureExtractor::mock();
        assert!(matches!(
            ex.extract_features(&Array3::zeros((3, 1, 4))),
            Err(Error::ImageTooSmall { .. })
        ));
        let mut img = Array3::zeros((3, 4, 4));
        img[[0, 1, 1]] = f64::NAN;
        assert!(matches!(ex.extract_features(&img), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gram_golden() {
        let f = ndarray::arr2(&[[1.0, 1.0, 1.0], [0.0, 1.0, 0.0]]);
        let g = gram(f.view()).unwrap();
        let expected = ndarray::arr2(&[[1.0, 1.0 / 3.0], [1.0 / 3.0, 1.0 / 3.0]]);
        assert!((&g - &expected).iter().all(|d| d.abs() < 1e-15));
        assert_eq!(
            gram(Array2::<f64>::zeros((3, 4)).view()).unwrap(),
            Array2::<f64>::zeros((3, 3))
        );
        assert!(gram(Array2::<f64>::zeros((3, 0)).view()).is_err());
    }

    #[test]
    fn max_pooling_variant_runs() {
        let mut cfg = ExtractorConfig::mock();
        cfg.pooling = Pooling::Max;
        let ex = FeatureExtractor::load(cfg).unwrap();
        let img = Array3::from_shape_fn((3, 8, 8), |(c, i, j)| ((c + i * j) % 5) as f64 / 5.0);
        let s = ex.gram_statistics(&img).unwrap();
        assert_eq!(s.feature_counts(), vec![8, 16]);
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = ExtractorConfig::mock();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.pooling = Pooling::Max;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}

//! Multi-channel material texture synthesis driven by a Gram-matrix loss on
//! randomized channel triplets.

// `!(x < tol)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod cli;
pub mod container;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod generator;
pub mod graph;
pub mod loss;
pub mod material;
pub mod seed;
pub mod synthesis;

pub use error::{Error, Result};
pub use extractor::{ExtractorConfig, FeatureExtractor, GramStatistics, LayerFeatures, Pooling};
pub use generator::{GeneratorArch, GeneratorModel, TrainConfig};
pub use loss::{LossReport, TexturalLoss, TripletIndex, TripletSource};
pub use material::{ChannelLayout, MaterialManifest, MaterialStack};

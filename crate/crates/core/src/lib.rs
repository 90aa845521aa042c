//! Lip-movement identification toolkit.
//!
//! The crate covers the non-neural half of a visual (audio-free) lip biometric
//! system that uses the spoken language as a soft biometric:
//!
//! - [`dataset`]: clip manifests, the subject-dependent and subject-independent
//!   evaluation splits, and stratified k-fold generation.
//! - [`geometry`]: 8-point lip landmark sequences and pivot-distance features.
//! - [`svm`]: SMO-trained binary SVMs, a one-vs-rest wrapper and an exhaustive
//!   grid search under k-fold cross-validation.
//! - [`fusion`]: score matrices, rank lists, the language-gated top-k fusion
//!   rule and a seeded score simulator.
//! - [`eval`]: accuracy, confusion matrices, error attribution and reports.
//! - [`preprocess`]: grayscale conversion, Sobel/Laplacian/Canny filters and the
//!   LBTF binary tensor format.
//! - [`synth`]: synthetic manifests and landmark sequences for tests and demos.

pub mod dataset;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod preprocess;
pub mod rng;
pub mod svm;
pub mod synth;

pub use dataset::{ClipRecord, DatasetManifest, Language, Split};
pub use eval::{ConfusionMatrix, ErrorAttribution};
pub use fusion::{FusionDecision, RankList, ScoreMatrix, SimulationConfig};
pub use geometry::{FeatureParams, FeatureVector, LandmarkSequence, Metric, MetricSet, Point};
pub use preprocess::{Frame, FrameTensor};
pub use svm::{Kernel, SvmBinaryModel, SvmMulticlassModel};

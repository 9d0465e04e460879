//! End-to-end tooling: synthetic data, a demo feature extractor, ROC
//! evaluation and benchmarking.

pub mod bench;
pub mod features;
pub mod roc;
pub mod synth;

pub use bench::{bench, BenchConfig, BenchOptions, BenchReport, BenchRow};
pub use features::{extract_features, GrayImage};
pub use roc::{nms, roc_eval, tau_grid, MatchCriterion, RocPoint, Scorer};
pub use synth::{gen_model, gen_scene, ModelSpec, SceneSpec, SyntheticScene};

//! Post-backbone machinery for multimodal product classification.
//!
//! Per-modality class probabilities (and optional feature vectors) come in
//! as CSV files. From there the crate provides confident-learning label-noise
//! pruning, decision-level fusion through shallow policy networks trained in
//! k-fold cross-validation, feature-level fusion baselines, majority-vote
//! ensembling and a synthetic multimodal generator with a Bayes oracle.

pub mod dataio;
pub mod error;
pub mod fusion;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use dataio::{AlignedDataset, FoldAssignment, Keyed, ModalitySources, ProbabilityMatrix, SplitSpec};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use metrics::{ConfusionMatrix, EvaluationReport};
pub use pipeline::{run_pipeline, PipelineError, PipelineManifest, RunReport, Stage};

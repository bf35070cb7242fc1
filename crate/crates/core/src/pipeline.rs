//! End-to-end protocol driven by a TOML manifest.
//!
//! Stages run in a fixed order: load, split, denoise, unimodal baselines,
//! feature-level baseline, policy training per variant, prediction, voting
//! across variants, evaluation and the run report. Every stage seed is derived
//! from the manifest's single `seed`, and nothing time-dependent is written, so
//! rerunning a manifest reproduces every output file byte for byte.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    align_modalities, load_features, load_labels, load_probability_matrix, save_id_list, split_train_val,
    AlignedDataset, ModalitySources, SplitSpec,
};
use crate::error::{Error, Result};
use crate::fusion::{
    assemble_fusion_input, pipeline_ensemble, policy_predict, save_ensemble, train_feature_fusion,
    train_policy_ensemble, EnsemblePrediction, FeatureFusionMode, FeatureFusionModel, FeatureHead, PolicyConfig, PolicyEnsemble,
};
use crate::metrics::EvaluationReport;
use crate::nn::{checkpoint_to_string, NetworkLayout, TrainConfig};
use crate::noise::{denoise, BaseClassifier, DenoiseConfig, DenoiseOutcome, PruneAmount};
use crate::synth::BundlePaths;

/// Pipeline stage, used to tag errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Manifest,
    Load,
    Split,
    Denoise,
    FeatureFusion,
    Policy,
    Predict,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Manifest => "manifest",
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Denoise => "denoise",
            Stage::FeatureFusion => "feature-fusion",
            Stage::Policy => "policy",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, PipelineError>;

trait Tag<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> Tag<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityFiles {
    pub name: String,
    pub probabilities: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFiles {
    /// Without labels the test set is only predicted, not scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub modalities: Vec<ModalityFiles>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_fraction: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseSection {
    pub enabled: bool,
    pub folds: usize,
    pub fraction: f64,
    /// Modality whose features (or probabilities) feed the out-of-fold
    /// classifier. Defaults to the first modality in name order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    pub epochs: usize,
}

impl Default for DenoiseSection {
    fn default() -> Self {
        let base = BaseClassifier::default();
        DenoiseSection {
            enabled: true,
            folds: 4,
            fraction: 0.10,
            modality: None,
            epochs: base.config.epochs,
        }
    }
}

/// Which split the policy networks are trained on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainOn {
    #[default]
    Validation,
    Train,
}

impl TrainOn {
    fn name(self) -> &'static str {
        match self {
            TrainOn::Validation => "validation",
            TrainOn::Train => "train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub folds: usize,
    /// Hidden units; 0 means a single linear layer.
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_on: TrainOn,
}

impl Default for FusionSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        FusionSection {
            folds: PolicyConfig::default().folds,
            hidden: NetworkLayout::DEFAULT_HIDDEN,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            train_on: TrainOn::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureFusionSection {
    pub enabled: bool,
    pub mode: FeatureFusionMode,
    /// Hidden units of the head; 0 means linear.
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FeatureFusionSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        FeatureFusionSection {
            enabled: true,
            mode: FeatureFusionMode::Concat,
            // a bottleneck of 6 units cannot separate 27 classes from raw features
            hidden: 0,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
        }
    }
}

/// Overrides of the `[fusion]` section for one pipeline variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Train on the denoised labels (default: whenever denoising is enabled).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoised: Option<bool>,
}

impl Variant {
    pub fn base() -> Self {
        Variant {
            name: "base".into(),
            hidden: None,
            learning_rate: None,
            batch_size: None,
            denoised: None,
        }
    }
}

/// Twelve variants: {linear, hidden 6} x lr {0.01, 0.005} x batch {32, 64, 128}.
pub fn default_variants() -> Vec<Variant> {
    let mut out = Vec::with_capacity(12);
    for hidden in [0, NetworkLayout::DEFAULT_HIDDEN] {
        for lr in [0.01, 0.005] {
            for batch in [32, 64, 128] {
                out.push(Variant {
                    name: format!("v{:02}", out.len()),
                    hidden: Some(hidden),
                    learning_rate: Some(lr),
                    batch_size: Some(batch),
                    denoised: None,
                });
            }
        }
    }
    out
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run needs. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineManifest {
    #[serde(default)]
    pub seed: u64,
    pub n_classes: usize,
    /// Optional external code per class index, used in `submission.csv`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_codes: Vec<String>,
    pub labels: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub modalities: Vec<ModalityFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestFiles>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub denoise: DenoiseSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub feature_fusion: FeatureFusionSection,
    /// Empty means a single variant using `[fusion]` as is.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn hidden(h: usize) -> Option<usize> {
    (h > 0).then_some(h)
}

impl PipelineManifest {
    /// A manifest with every protocol default and the given data files.
    pub fn new(n_classes: usize, labels: PathBuf, modalities: Vec<ModalityFiles>) -> Self {
        PipelineManifest {
            seed: 0,
            n_classes,
            class_codes: Vec::new(),
            labels,
            out_dir: default_out_dir(),
            modalities,
            test: None,
            split: SplitSection::default(),
            denoise: DenoiseSection::default(),
            fusion: FusionSection::default(),
            feature_fusion: FeatureFusionSection::default(),
            variants: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: PipelineManifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(reason) => Error::parse(path, reason),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if !self.class_codes.is_empty() && self.class_codes.len() != self.n_classes {
            return bad(format!("{} class codes for {} classes", self.class_codes.len(), self.n_classes));
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        let mut names = HashSet::new();
        for m in &self.modalities {
            if !valid_name(&m.name) {
                return bad(format!("modality name {:?} must be [A-Za-z0-9_-]+", m.name));
            }
            if !names.insert(m.name.as_str()) {
                return bad(format!("modality {:?} listed twice", m.name));
            }
        }
        if let Some(test) = &self.test {
            let test_names: HashSet<&str> = test.modalities.iter().map(|m| m.name.as_str()).collect();
            if test_names != names || test_names.len() != test.modalities.len() {
                return bad("test modalities must match the training modalities".into());
            }
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.split.train_fraction));
        }
        if let Some(name) = &self.denoise.modality {
            if !names.contains(name.as_str()) {
                return bad(format!("denoise modality {name:?} is not a listed modality"));
            }
        }
        if !(0.0..=1.0).contains(&self.denoise.fraction) {
            return bad(format!("denoise fraction {} outside [0, 1]", self.denoise.fraction));
        }
        if self.denoise.folds < 2 || self.fusion.folds < 1 {
            return bad("denoise needs at least 2 folds and fusion at least 1".into());
        }
        let mut variant_names = HashSet::new();
        for v in &self.variants {
            if !valid_name(&v.name) || !variant_names.insert(v.name.as_str()) {
                return bad(format!("variant name {:?} is invalid or repeated", v.name));
            }
        }
        for v in self.effective_variants() {
            self.policy_config(&v).train.validate()?;
        }
        self.feature_config().validate()
    }

    pub fn effective_variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            vec![Variant::base()]
        } else {
            self.variants.clone()
        }
    }

    pub fn policy_config(&self, variant: &Variant) -> PolicyConfig {
        let f = &self.fusion;
        PolicyConfig {
            folds: f.folds,
            hidden_dim: hidden(variant.hidden.unwrap_or(f.hidden)),
            train: TrainConfig {
                learning_rate: variant.learning_rate.unwrap_or(f.learning_rate),
                epochs: f.epochs,
                batch_size: variant.batch_size.unwrap_or(f.batch_size),
                ..TrainConfig::default()
            },
        }
    }

    pub fn denoise_config(&self) -> DenoiseConfig {
        let base = BaseClassifier::default();
        DenoiseConfig {
            folds: self.denoise.folds,
            amount: PruneAmount::FractionOfCandidates(self.denoise.fraction),
            base: BaseClassifier {
                config: TrainConfig {
                    epochs: self.denoise.epochs,
                    ..base.config
                },
                ..base
            },
        }
    }

    fn feature_config(&self) -> TrainConfig {
        let f = &self.feature_fusion;
        TrainConfig {
            learning_rate: f.learning_rate,
            epochs: f.epochs,
            batch_size: f.batch_size,
            ..TrainConfig::default()
        }
    }

    pub fn denoise_modality(&self) -> String {
        self.denoise.modality.clone().unwrap_or_else(|| {
            let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
            names.sort_unstable();
            names[0].to_string()
        })
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::derive(self.seed, self.effective_variants().len())
    }
}

fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    path.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

fn bundle_modalities(bundle: &BundlePaths, dir: &Path) -> Vec<ModalityFiles> {
    bundle
        .modalities
        .iter()
        .map(|(name, probs, feats)| ModalityFiles {
            name: name.clone(),
            probabilities: relative_to(probs, dir),
            features: Some(relative_to(feats, dir)),
        })
        .collect()
}

/// A default-protocol manifest over synthetic bundles written into `dir`,
/// with paths stored relative to `dir`.
pub fn manifest_for_bundles(
    n_classes: usize,
    labeled: &BundlePaths,
    test: Option<&BundlePaths>,
    dir: &Path,
    seed: u64,
) -> PipelineManifest {
    let mut m = PipelineManifest::new(n_classes, relative_to(&labeled.labels, dir), bundle_modalities(labeled, dir));
    m.seed = seed;
    m.test = test.map(|t| TestFiles {
        labels: Some(relative_to(&t.labels, dir)),
        modalities: bundle_modalities(t, dir),
    });
    m.base_dir = dir.to_path_buf();
    m
}

/// Stage seeds derived from the global seed by fixed offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageSeeds {
    pub global: u64,
    pub split: u64,
    pub denoise: u64,
    pub feature_fusion: u64,
    /// One per variant, in manifest order.
    pub policy: Vec<u64>,
}

impl StageSeeds {
    pub const DENOISE_OFFSET: u64 = 100_000;
    pub const FEATURE_OFFSET: u64 = 200_000;
    pub const POLICY_OFFSET: u64 = 300_000;
    /// Spacing between variants; each ensemble uses seeds up to `base + 1001 + folds`.
    pub const VARIANT_STRIDE: u64 = 10_000;

    pub fn derive(seed: u64, n_variants: usize) -> Self {
        StageSeeds {
            global: seed,
            split: seed,
            denoise: seed.wrapping_add(Self::DENOISE_OFFSET),
            feature_fusion: seed.wrapping_add(Self::FEATURE_OFFSET),
            policy: (0..n_variants as u64)
                .map(|v| seed.wrapping_add(Self::POLICY_OFFSET + v * Self::VARIANT_STRIDE))
                .collect(),
        }
    }
}

fn load_set(
    manifest: &PipelineManifest,
    modalities: &[ModalityFiles],
    labels: Option<&Path>,
) -> Result<AlignedDataset> {
    let c = manifest.n_classes;
    let mut sources = ModalitySources::default();
    for m in modalities {
        let probs = load_probability_matrix(manifest.resolve(&m.probabilities), c)?;
        sources.probabilities.push((m.name.clone(), probs));
        if let Some(f) = &m.features {
            sources.features.push((m.name.clone(), load_features(manifest.resolve(f))?));
        }
    }
    if let Some(path) = labels {
        sources.labels = Some(load_labels(manifest.resolve(path), c)?);
    }
    align_modalities(sources, c)
}

/// Labeled data split 9:1, plus the optional test set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub labeled: AlignedDataset,
    pub train: AlignedDataset,
    pub validation: AlignedDataset,
    pub test: Option<AlignedDataset>,
}

impl Prepared {
    /// The split the policy networks train on.
    pub fn fit_split(&self, train_on: TrainOn) -> &AlignedDataset {
        match train_on {
            TrainOn::Validation => &self.validation,
            TrainOn::Train => &self.train,
        }
    }

    /// The labeled test set when there is one, otherwise the split the policy did not see.
    pub fn evaluation_set(&self, train_on: TrainOn) -> (&'static str, &AlignedDataset) {
        match (&self.test, train_on) {
            (Some(t), _) if t.labels().is_some() => ("test", t),
            (_, TrainOn::Validation) => ("train", &self.train),
            (_, TrainOn::Train) => ("validation", &self.validation),
        }
    }

    /// The set written to the prediction files.
    pub fn prediction_set(&self, train_on: TrainOn) -> (&'static str, &AlignedDataset) {
        match &self.test {
            Some(t) => ("test", t),
            None => self.evaluation_set(train_on),
        }
    }
}

pub fn prepare(manifest: &PipelineManifest) -> StageResult<Prepared> {
    let labeled = load_set(manifest, &manifest.modalities, Some(&manifest.labels)).at(Stage::Load)?;
    let test = manifest
        .test
        .as_ref()
        .map(|t| load_set(manifest, &t.modalities, t.labels.as_deref()))
        .transpose()
        .at(Stage::Load)?;
    let spec = SplitSpec {
        train_fraction: manifest.split.train_fraction,
        seed: manifest.seeds().split,
    };
    let (train, validation) = split_train_val(&labeled, spec).at(Stage::Split)?;
    info!(
        "loaded {} labeled samples (train {}, validation {})",
        labeled.len(),
        train.len(),
        validation.len()
    );
    Ok(Prepared {
        labeled,
        train,
        validation,
        test,
    })
}

pub const NOISE_REPORT: &str = "noise_report.csv";
pub const REMOVED_IDS: &str = "removed_ids.txt";

/// Out-of-fold noise detection over all labeled samples; writes the ranked
/// candidates and the pruned ids into `out_dir`.
pub fn run_denoise(manifest: &PipelineManifest, labeled: &AlignedDataset, out_dir: &Path) -> StageResult<DenoiseOutcome> {
    let outcome = denoise(
        labeled,
        &manifest.denoise_modality(),
        &manifest.denoise_config(),
        manifest.seeds().denoise,
    )
    .at(Stage::Denoise)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e)).at(Stage::Denoise)?;
    outcome.report.save_csv(out_dir.join(NOISE_REPORT)).at(Stage::Denoise)?;
    save_id_list(out_dir.join(REMOVED_IDS), &outcome.prune.removed_ids).at(Stage::Denoise)?;
    info!(
        "denoise: {} candidates, {} removed",
        outcome.report.candidates.len(),
        outcome.prune.removed_ids.len()
    );
    Ok(outcome)
}

fn drop_ids(dataset: &AlignedDataset, removed: &[String]) -> AlignedDataset {
    if removed.is_empty() {
        return dataset.clone();
    }
    let set: HashSet<&str> = removed.iter().map(String::as_str).collect();
    dataset.without_ids(&set)
}

/// One trained policy ensemble per variant, in manifest order.
pub fn train_variants(
    manifest: &PipelineManifest,
    fit: &AlignedDataset,
    removed: &[String],
) -> StageResult<Vec<(Variant, PolicyEnsemble)>> {
    let seeds = manifest.seeds();
    let cleaned = drop_ids(fit, removed);
    manifest
        .effective_variants()
        .into_iter()
        .zip(seeds.policy)
        .map(|(variant, seed)| {
            let use_clean = variant.denoised.unwrap_or(manifest.denoise.enabled);
            let data = if use_clean { &cleaned } else { fit };
            let input = assemble_fusion_input(data).at(Stage::Policy)?;
            let labels = data.require_labels().at(Stage::Policy)?;
            let ens = train_policy_ensemble(&input, labels, &manifest.policy_config(&variant), seed)
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("variant {}: {m}", variant.name)),
                    other => other,
                })
                .at(Stage::Policy)?;
            info!("variant {} trained on {} samples", variant.name, data.len());
            Ok((variant, ens))
        })
        .collect()
}

/// Per-variant voted predictions on `dataset`.
pub fn predict_variants(
    ensembles: &[(Variant, PolicyEnsemble)],
    dataset: &AlignedDataset,
) -> StageResult<Vec<EnsemblePrediction>> {
    let input = assemble_fusion_input(dataset).at(Stage::Predict)?;
    ensembles
        .iter()
        .map(|(_, ens)| policy_predict(ens, &input).at(Stage::Predict))
        .collect()
}

fn feature_parts(dataset: &AlignedDataset) -> Option<Vec<&crate::matrix::Matrix>> {
    dataset
        .modality_names()
        .iter()
        .map(|name| dataset.features().get(*name))
        .collect()
}

fn train_feature_baseline(
    manifest: &PipelineManifest,
    fit: &AlignedDataset,
    seed: u64,
) -> Result<Option<FeatureFusionModel>> {
    if feature_parts(fit).is_none() {
        return Ok(None);
    }
    // an inner 9:1 split of the fit data selects the checkpoint
    let (tr, va) = split_train_val(
        fit,
        SplitSpec {
            train_fraction: manifest.split.train_fraction,
            seed,
        },
    )?;
    let (tp, vp) = (feature_parts(&tr).unwrap(), feature_parts(&va).unwrap());
    let f = &manifest.feature_fusion;
    train_feature_fusion(
        &tp,
        tr.require_labels()?,
        &vp,
        va.require_labels()?,
        manifest.n_classes,
        f.mode,
        hidden(f.hidden),
        &manifest.feature_config(),
        seed,
    )
    .map(Some)
}

fn save_feature_model(path: &Path, model: &FeatureFusionModel) -> Result<()> {
    let head = match &model.head {
        FeatureHead::Static { model, .. } => {
            serde_json::from_str::<serde_json::Value>(&checkpoint_to_string(model)?).map_err(|e| Error::Config(e.to_string()))?
        }
        FeatureHead::Attention(trained) => serde_json::json!({
            "model": trained.best_network,
            "config": trained.config,
            "best_epoch": trained.best_epoch,
            "best_val_score": trained.best_val_score,
            "history": trained.history,
        }),
    };
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "format": "latefuse-feature-fusion/1",
        "mode": model.mode(),
        "scalers": model.scalers,
        "head": head,
    }))
    .map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Macro-F1 of one stage on the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageScore {
    pub stage: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Sizes {
    pub labeled: usize,
    pub train: usize,
    pub validation: usize,
    pub removed: usize,
    pub evaluation: usize,
    pub prediction: usize,
}

/// Summary of a run; enough to reproduce it from the manifest echo and seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub policy_trained_on: String,
    pub evaluation_set: String,
    pub prediction_set: String,
    /// Output files, relative to the output directory.
    pub artifacts: Vec<String>,
    pub seeds: StageSeeds,
    pub sizes: Sizes,
    /// In execution order.
    pub stages: Vec<StageScore>,
    pub manifest: PipelineManifest,
}

impl RunReport {
    pub fn score(&self, stage: &str) -> Option<&StageScore> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub const PREDICTIONS: &str = "predictions.csv";
pub const ENSEMBLE_PREDICTIONS: &str = "ensemble_predictions.csv";
pub const SUBMISSION: &str = "submission.csv";
pub const EVALUATION: &str = "evaluation.toml";
pub const REPORT: &str = "report.toml";

/// `id,predicted_label`, with class codes substituted when the manifest has them.
pub fn save_submission(path: &Path, ids: &[String], labels: &[usize], codes: &[String]) -> Result<()> {
    let mut text = String::from("id,predicted_label\n");
    for (id, &y) in ids.iter().zip(labels) {
        let label = codes.get(y).cloned().unwrap_or_else(|| y.to_string());
        text.push_str(&format!("{id},{label}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Recorder {
    out_dir: PathBuf,
    artifacts: Vec<String>,
    stages: Vec<StageScore>,
    evaluations: Vec<EvaluationReport>,
}

impl Recorder {
    fn path(&mut self, relative: &str) -> PathBuf {
        self.artifacts.push(relative.to_string());
        self.out_dir.join(relative)
    }

    fn score(&mut self, name: &str, preds: &[usize], labels: &[usize], n_classes: usize) -> Result<()> {
        let report = EvaluationReport::new(name, preds, labels, n_classes)?;
        info!("{name}: macro-F1 {:.4}", report.macro_f1);
        self.stages.push(StageScore {
            stage: name.to_string(),
            n_samples: report.n_samples,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
        });
        self.evaluations.push(report);
        Ok(())
    }
}

/// Runs every stage and writes all artifacts under the manifest's output directory.
pub fn run_pipeline(manifest: &PipelineManifest) -> StageResult<RunReport> {
    manifest.validate().at(Stage::Manifest)?;
    let out_dir = manifest.out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e)).at(Stage::Manifest)?;
    let seeds = manifest.seeds();
    let c = manifest.n_classes;
    let mut rec = Recorder {
        out_dir: out_dir.clone(),
        artifacts: Vec::new(),
        stages: Vec::new(),
        evaluations: Vec::new(),
    };

    let data = prepare(manifest)?;
    let removed = if manifest.denoise.enabled {
        let outcome = run_denoise(manifest, &data.labeled, &out_dir)?;
        rec.artifacts.push(NOISE_REPORT.into());
        rec.artifacts.push(REMOVED_IDS.into());
        outcome.prune.removed_ids
    } else {
        Vec::new()
    };

    let train_on = manifest.fusion.train_on;
    let fit = data.fit_split(train_on);
    let (eval_name, eval_set) = data.evaluation_set(train_on);
    let (pred_name, pred_set) = data.prediction_set(train_on);
    let eval_labels = eval_set.require_labels().at(Stage::Evaluate)?;

    for name in eval_set.modality_names() {
        let preds = eval_set.probabilities()[name].argmax_rows();
        rec.score(&format!("unimodal.{name}"), &preds, eval_labels, c).at(Stage::Evaluate)?;
    }

    if manifest.feature_fusion.enabled {
        let fit_clean = drop_ids(fit, &removed);
        let model = train_feature_baseline(manifest, &fit_clean, seeds.feature_fusion).at(Stage::FeatureFusion)?;
        match (model, feature_parts(eval_set)) {
            (Some(model), Some(parts)) => {
                let path = rec.path("feature_fusion.json");
                save_feature_model(&path, &model).at(Stage::FeatureFusion)?;
                let preds = model.predict(&parts).at(Stage::FeatureFusion)?;
                rec.score("feature_level", &preds, eval_labels, c).at(Stage::Evaluate)?;
            }
            _ => info!("feature-level baseline skipped: features missing"),
        }
    }

    let ensembles = train_variants(manifest, fit, &removed)?;
    for (variant, ens) in &ensembles {
        let rel = format!("policy/{}", variant.name);
        save_ensemble(out_dir.join(&rel), ens).at(Stage::Policy)?;
        rec.artifacts.push(format!("{rel}/{}", crate::fusion::ENSEMBLE_MANIFEST));
        rec.artifacts
            .extend((0..ens.members.len()).map(|f| format!("{rel}/member_{f}.json")));
    }

    let eval_preds = predict_variants(&ensembles, eval_set)?;
    rec.score("decision_level", &eval_preds[0].labels, eval_labels, c).at(Stage::Evaluate)?;
    if ensembles.len() > 1 {
        for ((variant, _), pred) in ensembles.iter().zip(&eval_preds) {
            rec.score(&format!("variant.{}", variant.name), &pred.labels, eval_labels, c)
                .at(Stage::Evaluate)?;
        }
    }
    let refs: Vec<&EnsemblePrediction> = eval_preds.iter().collect();
    let voted = pipeline_ensemble(&refs).at(Stage::Predict)?;
    rec.score("variant_ensemble", &voted.labels, eval_labels, c).at(Stage::Evaluate)?;

    let (pred_single, pred_voted) = if std::ptr::eq(pred_set, eval_set) {
        (eval_preds[0].clone(), voted)
    } else {
        let p = predict_variants(&ensembles, pred_set)?;
        let refs: Vec<&EnsemblePrediction> = p.iter().collect();
        let v = pipeline_ensemble(&refs).at(Stage::Predict)?;
        (p[0].clone(), v)
    };
    let path = rec.path(PREDICTIONS);
    pred_single.save_csv(&path, pred_set.ids()).at(Stage::Predict)?;
    let path = rec.path(ENSEMBLE_PREDICTIONS);
    pred_voted.save_csv(&path, pred_set.ids()).at(Stage::Predict)?;
    let path = rec.path(SUBMISSION);
    save_submission(&path, pred_set.ids(), &pred_voted.labels, &manifest.class_codes).at(Stage::Predict)?;

    let path = rec.path(EVALUATION);
    let text: String = rec.evaluations.iter().map(EvaluationReport::to_toml).collect::<Vec<_>>().join("\n");
    fs::write(&path, text).map_err(|e| Error::io(&path, e)).at(Stage::Report)?;
    rec.artifacts.push(REPORT.into());

    let report = RunReport {
        policy_trained_on: train_on.name().into(),
        evaluation_set: eval_name.into(),
        prediction_set: pred_name.into(),
        artifacts: rec.artifacts,
        seeds,
        sizes: Sizes {
            labeled: data.labeled.len(),
            train: data.train.len(),
            validation: data.validation.len(),
            removed: removed.len(),
            evaluation: eval_set.len(),
            prediction: pred_set.len(),
        },
        stages: rec.stages,
        manifest: manifest.clone(),
    };
    let path = out_dir.join(REPORT);
    fs::write(&path, report.to_toml().at(Stage::Report)?)
        .map_err(|e| Error::io(&path, e))
        .at(Stage::Report)?;
    Ok(report)
}

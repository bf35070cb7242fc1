//! Synthetic multimodal data with known ground truth.
//!
//! Each sample draws a true class from the priors, optionally flips its
//! observed label to a uniformly random other class, and for every modality
//! draws a perceived class `z ~ Q[y, ·]` and a probability row from
//! `Dirichlet(α0 + κ·Q[z, ·])`. Feature rows are the centered log of the
//! probability row plus Gaussian jitter. Every sample uses its own seeded
//! stream, so generation order does not affect the output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataio::{self, align_modalities, AlignedDataset, Keyed, ModalitySources, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::metrics;
use crate::nn::log_sum_exp;
use crate::rng::{self, Rng};

/// Largest and smallest class sizes of the reference catalogue.
pub const LARGEST_CLASS: f64 = 10_209.0;
pub const SMALLEST_CLASS: f64 = 764.0;

/// Stream offset separating oracle draws from dataset draws.
const ORACLE_STREAM: u64 = 1 << 62;
/// Probabilities are clamped here before taking logs.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Row-stochastic C x C; row `y` is the distribution of perceived classes.
    pub confusion: Vec<Vec<f64>>,
    /// κ: weight of the perceived class profile in the Dirichlet parameters.
    pub concentration: f64,
    /// α0: floor added to every Dirichlet parameter.
    pub base_concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub class_priors: Vec<f64>,
    /// Top-level group of each class.
    pub class_groups: Vec<usize>,
    pub modalities: Vec<ModalitySpec>,
    pub label_noise_rate: f64,
    pub feature_jitter: f64,
    pub seed: u64,
}

/// Priors falling geometrically from the largest to the smallest class size.
pub fn imbalanced_priors(n_classes: usize) -> Vec<f64> {
    if n_classes == 1 {
        return vec![1.0];
    }
    let ratio = SMALLEST_CLASS / LARGEST_CLASS;
    let raw: Vec<f64> = (0..n_classes)
        .map(|k| LARGEST_CLASS * ratio.powf(k as f64 / (n_classes - 1) as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

/// Classes split into `n_groups` contiguous, nearly equal blocks.
pub fn contiguous_groups(n_classes: usize, n_groups: usize) -> Vec<usize> {
    (0..n_classes).map(|k| k * n_groups / n_classes).collect()
}

pub fn identity_confusion(n_classes: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|i| (0..n_classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn uniform_confusion(n_classes: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / n_classes as f64; n_classes]; n_classes]
}

/// Keeps `1 - error` on the diagonal and spreads `error` uniformly over the
/// classes selected by `eligible(true, other)`. Rows with no eligible class
/// stay on the diagonal.
pub fn structured_confusion(n_classes: usize, error: f64, eligible: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|y| {
            let others: Vec<usize> = (0..n_classes).filter(|&k| k != y && eligible(y, k)).collect();
            let mut row = vec![0.0; n_classes];
            if others.is_empty() {
                row[y] = 1.0;
            } else {
                row[y] = 1.0 - error;
                for &k in &others {
                    row[k] = error / others.len() as f64;
                }
            }
            row
        })
        .collect()
}

impl GeneratorConfig {
    pub const DEFAULT_CLASSES: usize = 27;
    pub const DEFAULT_GROUPS: usize = 4;

    /// Two modalities with complementary mistakes: `image` confuses classes
    /// inside a top-level group, `text` is more accurate overall and confuses
    /// classes across groups.
    pub fn complementary(n_samples: usize, seed: u64) -> Self {
        let c = Self::DEFAULT_CLASSES;
        let groups = contiguous_groups(c, Self::DEFAULT_GROUPS);
        let within = {
            let g = groups.clone();
            move |a: usize, b: usize| g[a] == g[b]
        };
        let across = {
            let g = groups.clone();
            move |a: usize, b: usize| g[a] != g[b]
        };
        GeneratorConfig {
            n_samples,
            n_classes: c,
            class_priors: imbalanced_priors(c),
            class_groups: groups,
            modalities: vec![
                ModalitySpec {
                    name: "image".into(),
                    confusion: structured_confusion(c, 0.40, within),
                    concentration: 30.0,
                    base_concentration: 0.1,
                },
                ModalitySpec {
                    name: "text".into(),
                    confusion: structured_confusion(c, 0.15, across),
                    concentration: 30.0,
                    base_concentration: 0.1,
                },
            ],
            label_noise_rate: 0.0,
            feature_jitter: 0.1,
            seed,
        }
    }

    /// One accurate modality (identity confusion, high concentration) with
    /// injected label noise; the setting for noise-detection checks.
    pub fn noisy_labels(n_samples: usize, n_classes: usize, label_noise_rate: f64, seed: u64) -> Self {
        GeneratorConfig {
            n_samples,
            n_classes,
            class_priors: imbalanced_priors(n_classes),
            class_groups: contiguous_groups(n_classes, Self::DEFAULT_GROUPS.min(n_classes)),
            modalities: vec![ModalitySpec {
                name: "image".into(),
                confusion: identity_confusion(n_classes),
                concentration: 200.0,
                base_concentration: 0.5,
            }],
            label_noise_rate,
            feature_jitter: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        let bad = |m: String| Err(Error::Config(m));
        if c < 2 {
            return bad(format!("need at least 2 classes, got {c}"));
        }
        if self.class_priors.len() != c || self.class_groups.len() != c {
            return bad("priors and group map must have one entry per class".into());
        }
        if self.class_priors.iter().any(|p| p.is_nan() || *p < 0.0) || (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("class priors must be non-negative and sum to 1".into());
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return bad(format!("label noise rate {} outside [0, 1)", self.label_noise_rate));
        }
        if self.feature_jitter.is_nan() || self.feature_jitter < 0.0 {
            return bad("feature jitter must be >= 0".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality required".into());
        }
        for m in &self.modalities {
            if !(m.concentration > 0.0 && m.base_concentration > 0.0) {
                return bad(format!("modality {}: concentrations must be positive", m.name));
            }
            if m.confusion.len() != c || m.confusion.iter().any(|r| r.len() != c) {
                return bad(format!("modality {}: confusion must be {c}x{c}", m.name));
            }
            for row in &m.confusion {
                if row.iter().any(|q| q.is_nan() || *q < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad(format!("modality {}: confusion rows must be distributions", m.name));
                }
            }
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("modality names must be unique".into());
        }
        Ok(())
    }
}

/// Generated data plus the hidden truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: AlignedDataset,
    pub true_labels: Vec<usize>,
    pub flipped: Vec<bool>,
}

impl SyntheticDataset {
    pub fn flipped_ids(&self) -> Vec<&str> {
        self.dataset
            .ids()
            .iter()
            .zip(&self.flipped)
            .filter(|(_, f)| **f)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

struct Draw {
    truth: usize,
    observed: usize,
    /// Per modality: probability row, feature row.
    rows: Vec<(Vec<f64>, Vec<f64>)>,
}

fn categorical(rng: &mut Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the final cumulative sum.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn dirichlet_params(spec: &ModalitySpec, perceived: usize) -> Vec<f64> {
    spec.confusion[perceived]
        .iter()
        .map(|q| spec.base_concentration + spec.concentration * q)
        .collect()
}

fn draw_probability_row(rng: &mut Rng, alpha: &[f64]) -> Vec<f64> {
    let mut row: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

/// Centered log transform, clamped away from log(0).
pub fn centered_log(row: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = row.iter().map(|p| p.max(LOG_FLOOR).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.iter().map(|l| l - mean).collect()
}

fn draw_sample(config: &GeneratorConfig, stream: u64) -> Draw {
    let mut rng = rng::stream(config.seed, stream);
    let c = config.n_classes;
    let truth = categorical(&mut rng, &config.class_priors);
    let observed = if rng.random::<f64>() < config.label_noise_rate {
        let r = rng.random_range(0..c - 1);
        if r >= truth {
            r + 1
        } else {
            r
        }
    } else {
        truth
    };
    let jitter = Normal::new(0.0, config.feature_jitter).expect("finite jitter");
    let rows = config
        .modalities
        .iter()
        .map(|spec| {
            let perceived = categorical(&mut rng, &spec.confusion[truth]);
            let probs = draw_probability_row(&mut rng, &dirichlet_params(spec, perceived));
            let features = centered_log(&probs)
                .into_iter()
                .map(|f| f + jitter.sample(&mut rng))
                .collect();
            (probs, features)
        })
        .collect();
    Draw {
        truth,
        observed,
        rows,
    }
}

/// Sample ids sort in generation order.
pub fn sample_id(i: usize) -> String {
    format!("s{i:07}")
}

pub fn generate(config: &GeneratorConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    if config.n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let draws: Vec<Draw> = (0..config.n_samples as u64)
        .into_par_iter()
        .map(|i| draw_sample(config, i))
        .collect();

    let ids: Vec<String> = (0..config.n_samples).map(sample_id).collect();
    let c = config.n_classes;
    let mut sources = ModalitySources {
        labels: Some(Keyed {
            ids: ids.clone(),
            values: draws.iter().map(|d| d.observed).collect(),
        }),
        ..Default::default()
    };
    for (m, spec) in config.modalities.iter().enumerate() {
        let mut probs = Vec::with_capacity(config.n_samples * c);
        let mut feats = Vec::with_capacity(config.n_samples * c);
        for d in &draws {
            probs.extend_from_slice(&d.rows[m].0);
            feats.extend_from_slice(&d.rows[m].1);
        }
        sources.probabilities.push((
            spec.name.clone(),
            Keyed {
                ids: ids.clone(),
                values: ProbabilityMatrix::new(Matrix::from_vec(config.n_samples, c, probs)?)?,
            },
        ));
        sources.features.push((
            spec.name.clone(),
            Keyed {
                ids: ids.clone(),
                values: Matrix::from_vec(config.n_samples, c, feats)?,
            },
        ));
    }
    Ok(SyntheticDataset {
        dataset: align_modalities(sources, c)?,
        true_labels: draws.iter().map(|d| d.truth).collect(),
        flipped: draws.iter().map(|d| d.truth != d.observed).collect(),
    })
}

/// Paths written by [`write_bundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct BundlePaths {
    pub labels: PathBuf,
    pub truth: PathBuf,
    /// (modality, probability csv, feature csv)
    pub modalities: Vec<(String, PathBuf, PathBuf)>,
}

/// Writes labels, per-modality probability/feature CSVs and the truth file
/// (`id,true_label,flipped`) as `{prefix}_*.csv` under `dir`.
pub fn write_bundle(data: &SyntheticDataset, dir: &Path, prefix: &str) -> Result<BundlePaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ds = &data.dataset;
    let labels = dir.join(format!("{prefix}_labels.csv"));
    dataio::save_labels(&labels, ds.ids(), ds.require_labels()?)?;
    let truth = dir.join(format!("{prefix}_truth.csv"));
    let mut body = String::from("id,true_label,flipped\n");
    for ((id, t), f) in ds.ids().iter().zip(&data.true_labels).zip(&data.flipped) {
        body.push_str(&format!("{id},{t},{}\n", u8::from(*f)));
    }
    fs::write(&truth, body).map_err(|e| Error::io(&truth, e))?;
    let mut modalities = Vec::new();
    for name in ds.modality_names() {
        let p = dir.join(format!("{prefix}_{name}_probs.csv"));
        let f = dir.join(format!("{prefix}_{name}_features.csv"));
        dataio::save_probability_matrix(&p, ds.ids(), &ds.probabilities()[name])?;
        dataio::save_features(&f, ds.ids(), &ds.features()[name])?;
        modalities.push((name.to_string(), p, f));
    }
    Ok(BundlePaths {
        labels,
        truth,
        modalities,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScore {
    pub accuracy: f64,
    pub accuracy_std_error: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub n_mc: usize,
    pub per_modality: Vec<(String, OracleScore)>,
    pub fused: OracleScore,
}

fn log_dirichlet(row: &[f64], alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    let mut out = ln_gamma(total);
    for (&p, &a) in row.iter().zip(alpha) {
        out += (a - 1.0) * p.max(f64::MIN_POSITIVE).ln() - ln_gamma(a);
    }
    out
}

/// log p(row | y) for every y, marginalizing the perceived class.
fn modality_log_likelihood(spec: &ModalitySpec, row: &[f64]) -> Vec<f64> {
    let c = spec.confusion.len();
    let by_perceived: Vec<f64> = (0..c)
        .map(|z| log_dirichlet(row, &dirichlet_params(spec, z)))
        .collect();
    (0..c)
        .map(|y| {
            let terms: Vec<f64> = (0..c)
                .filter(|&z| spec.confusion[y][z] > 0.0)
                .map(|z| spec.confusion[y][z].ln() + by_perceived[z])
                .collect();
            if terms.is_empty() {
                f64::NEG_INFINITY
            } else {
                log_sum_exp(&terms)
            }
        })
        .collect()
}

fn score(preds: &[usize], truth: &[usize], c: usize) -> OracleScore {
    let accuracy = metrics::accuracy(preds, truth).expect("equal lengths");
    OracleScore {
        accuracy,
        accuracy_std_error: (accuracy * (1.0 - accuracy) / preds.len() as f64).sqrt(),
        macro_f1: metrics::macro_f1(preds, truth, c).expect("valid classes"),
    }
}

/// Monte Carlo accuracy of the exact posterior-argmax classifier, per
/// modality and with all modalities combined (conditionally independent
/// given the true class). Scored against true labels.
pub fn bayes_oracle(config: &GeneratorConfig, n_mc: usize) -> Result<OracleEstimate> {
    config.validate()?;
    if n_mc < 1000 {
        return Err(Error::Config(format!("n_mc = {n_mc}; at least 1000 draws required")));
    }
    let c = config.n_classes;
    let log_prior: Vec<f64> = config
        .class_priors
        .iter()
        .map(|p| if *p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let m = config.modalities.len();

    // Per draw: truth, per-modality prediction, fused prediction.
    let results: Vec<(usize, Vec<usize>, usize)> = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let draw = draw_sample(config, ORACLE_STREAM + i);
            let mut fused = log_prior.clone();
            let mut single = Vec::with_capacity(m);
            for (spec, (row, _)) in config.modalities.iter().zip(&draw.rows) {
                let ll = modality_log_likelihood(spec, row);
                let post: Vec<f64> = log_prior.iter().zip(&ll).map(|(p, l)| p + l).collect();
                single.push(argmax(&post));
                fused.iter_mut().zip(&ll).for_each(|(f, l)| *f += l);
            }
            (draw.truth, single, argmax(&fused))
        })
        .collect();

    let truth: Vec<usize> = results.iter().map(|r| r.0).collect();
    let per_modality = config
        .modalities
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let preds: Vec<usize> = results.iter().map(|r| r.1[j]).collect();
            (spec.name.clone(), score(&preds, &truth, c))
        })
        .collect();
    let fused_preds: Vec<usize> = results.iter().map(|r| r.2).collect();
    Ok(OracleEstimate {
        n_mc,
        per_modality,
        fused: score(&fused_preds, &truth, c),
    })
}

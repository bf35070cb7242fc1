//! Feature-level fusion baselines on fixed, pre-extracted feature vectors.
//!
//! Only the fusion weights and the classifier head are trained; the feature
//! extractors upstream are frozen.

use serde::{Deserialize, Serialize};

use crate::dataio::ProbabilityMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{softmax_in_place, train, Differentiable, LabeledData, Network, NetworkLayout, TrainConfig, TrainedModel};
use crate::rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFusionMode {
    #[default]
    Concat,
    Sum,
    Attention,
}

fn check_equal_dims(parts: &[&Matrix]) -> Result<usize> {
    let first = parts.first().ok_or_else(|| Error::Empty("feature sets".into()))?;
    if let Some(bad) = parts.iter().find(|m| m.cols() != first.cols() || m.rows() != first.rows()) {
        return Err(Error::Dimension(format!(
            "feature sets {}x{} and {}x{} differ",
            first.rows(),
            first.cols(),
            bad.rows(),
            bad.cols()
        )));
    }
    Ok(first.cols())
}

/// Parameter-free fusion: horizontal concatenation or elementwise sum.
/// Attention has learned weights; use [`AttentionFusion::fuse`].
pub fn fuse_features(parts: &[&Matrix], mode: FeatureFusionMode) -> Result<Matrix> {
    match mode {
        FeatureFusionMode::Concat => {
            if parts.is_empty() {
                return Err(Error::Empty("feature sets".into()));
            }
            Matrix::hstack(parts)
        }
        FeatureFusionMode::Sum => {
            check_equal_dims(parts)?;
            let mut out = parts[0].clone();
            for p in &parts[1..] {
                for (o, v) in out.as_mut_slice().iter_mut().zip(p.as_slice()) {
                    *o += v;
                }
            }
            Ok(out)
        }
        FeatureFusionMode::Attention => Err(Error::Config(
            "attention fusion needs trained weights (AttentionFusion)".into(),
        )),
    }
}

/// Attention pooling over modalities followed by a softmax head.
///
/// For modality features `f_m`, the score is `s_m = w·f_m + b_m`, the weights
/// are `α = softmax(s)` and the pooled vector `Σ α_m f_m` feeds the head.
/// Inputs arrive as the concatenation of the M feature blocks.
/// Parameters: `w` (D), `b` (M), then the head's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFusion {
    n_modalities: usize,
    dim: usize,
    head_layout: NetworkLayout,
    head_seed: u64,
    params: Vec<f64>,
}

impl AttentionFusion {
    pub fn init(n_modalities: usize, dim: usize, hidden_dim: Option<usize>, n_classes: usize, seed: u64) -> Result<Self> {
        if n_modalities == 0 || dim == 0 {
            return Err(Error::Config("attention needs at least one modality and dimension".into()));
        }
        let head_layout = NetworkLayout::with_hidden(dim, hidden_dim, n_classes);
        let head = Network::init(head_layout, seed)?;
        let limit = (6.0 / (dim + 1) as f64).sqrt();
        let mut rng = rng::stream(seed, 1);
        let mut params: Vec<f64> = (0..dim)
            .map(|_| limit * (2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0))
            .collect();
        params.extend(std::iter::repeat_n(0.0, n_modalities));
        params.extend_from_slice(head.params());
        Ok(AttentionFusion {
            n_modalities,
            dim,
            head_layout,
            head_seed: seed,
            params,
        })
    }

    /// Replaces the scoring weights and modality biases.
    pub fn set_scorer(&mut self, weights: &[f64], biases: &[f64]) -> Result<()> {
        if weights.len() != self.dim || biases.len() != self.n_modalities {
            return Err(Error::Dimension("scorer shape".into()));
        }
        self.params[..self.dim].copy_from_slice(weights);
        self.params[self.dim..self.dim + self.n_modalities].copy_from_slice(biases);
        Ok(())
    }

    fn head_offset(&self) -> usize {
        self.dim + self.n_modalities
    }

    fn head(&self) -> Network {
        Network::from_params(self.head_layout, self.params[self.head_offset()..].to_vec(), self.head_seed)
            .expect("head parameters match layout")
    }

    fn check(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.n_modalities * self.dim {
            return Err(Error::Dimension(format!(
                "attention expects {} x {} inputs, got {}",
                self.n_modalities,
                self.dim,
                inputs.cols()
            )));
        }
        Ok(())
    }

    /// Attention weights per sample (N x M).
    pub fn weights(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check(inputs)?;
        let (w, b) = (&self.params[..self.dim], &self.params[self.dim..self.head_offset()]);
        let mut alpha = Matrix::zeros(inputs.rows(), self.n_modalities);
        for i in 0..inputs.rows() {
            let x = inputs.row(i);
            let a = alpha.row_mut(i);
            for (m, slot) in a.iter_mut().enumerate() {
                let f = &x[m * self.dim..(m + 1) * self.dim];
                *slot = b[m] + f.iter().zip(w).map(|(p, q)| p * q).sum::<f64>();
            }
            softmax_in_place(a);
        }
        Ok(alpha)
    }

    /// Attention-pooled features (N x D).
    pub fn fuse(&self, inputs: &Matrix) -> Result<Matrix> {
        let alpha = self.weights(inputs)?;
        Ok(self.pool(inputs, &alpha))
    }

    fn pool(&self, inputs: &Matrix, alpha: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(inputs.rows(), self.dim);
        for i in 0..inputs.rows() {
            let x = inputs.row(i);
            let a = alpha.row(i);
            let o = out.row_mut(i);
            for m in 0..self.n_modalities {
                for (slot, v) in o.iter_mut().zip(&x[m * self.dim..(m + 1) * self.dim]) {
                    *slot += a[m] * v;
                }
            }
        }
        out
    }
}

impl Differentiable for AttentionFusion {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_classes(&self) -> usize {
        self.head_layout.output_dim
    }

    fn loss(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        self.head().loss(&self.fuse(inputs)?, labels)
    }

    fn loss_and_grad(&self, inputs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let alpha = self.weights(inputs)?;
        let pooled = self.pool(inputs, &alpha);
        let (loss, head_grad, dpooled) = self.head().backprop(&pooled, labels, true)?;
        let dpooled = dpooled.expect("input gradient requested");

        let mut grads = vec![0.0; self.params.len()];
        let (gw, rest) = grads.split_at_mut(self.dim);
        let (gb, gh) = rest.split_at_mut(self.n_modalities);
        gh.copy_from_slice(&head_grad);
        let mut dalpha = vec![0.0; self.n_modalities];
        for i in 0..inputs.rows() {
            let x = inputs.row(i);
            let a = alpha.row(i);
            let dg = dpooled.row(i);
            for (m, slot) in dalpha.iter_mut().enumerate() {
                *slot = dg.iter().zip(&x[m * self.dim..(m + 1) * self.dim]).map(|(p, q)| p * q).sum();
            }
            let weighted: f64 = a.iter().zip(&dalpha).map(|(p, q)| p * q).sum();
            for m in 0..self.n_modalities {
                let ds = a[m] * (dalpha[m] - weighted);
                gb[m] += ds;
                for (g, v) in gw.iter_mut().zip(&x[m * self.dim..(m + 1) * self.dim]) {
                    *g += ds * v;
                }
            }
        }
        Ok((loss, grads))
    }

    fn predict_proba(&self, inputs: &Matrix) -> Result<ProbabilityMatrix> {
        self.head().forward(&self.fuse(inputs)?)
    }
}

/// Per-column z-scoring fitted on training rows, one per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero spread get scale 1.
    pub fn fit(m: &Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::Empty("standardizer fit rows".into()));
        }
        let n = m.rows() as f64;
        let mut mean = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= n);
        let mut var = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                m.cols()
            )));
        }
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(out)
    }
}

fn standardize(scalers: &[Standardizer], parts: &[&Matrix]) -> Result<Vec<Matrix>> {
    if scalers.len() != parts.len() {
        return Err(Error::LengthMismatch {
            expected: scalers.len(),
            actual: parts.len(),
        });
    }
    scalers.iter().zip(parts).map(|(s, p)| s.apply(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureHead {
    /// Concat or sum followed by a network.
    Static {
        mode: FeatureFusionMode,
        model: TrainedModel<Network>,
    },
    Attention(TrainedModel<AttentionFusion>),
}

/// A trained feature-level fusion classifier: per-modality standardization,
/// fusion, then the head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFusionModel {
    pub scalers: Vec<Standardizer>,
    pub head: FeatureHead,
}

impl FeatureFusionModel {
    pub fn mode(&self) -> FeatureFusionMode {
        match &self.head {
            FeatureHead::Static { mode, .. } => *mode,
            FeatureHead::Attention(_) => FeatureFusionMode::Attention,
        }
    }

    pub fn predict_proba(&self, parts: &[&Matrix]) -> Result<ProbabilityMatrix> {
        let scaled = standardize(&self.scalers, parts)?;
        let refs: Vec<&Matrix> = scaled.iter().collect();
        match &self.head {
            FeatureHead::Static { mode, model } => model.best_network.forward(&fuse_features(&refs, *mode)?),
            FeatureHead::Attention(model) => {
                check_equal_dims(&refs)?;
                model.best_network.predict_proba(&Matrix::hstack(&refs)?)
            }
        }
    }

    pub fn predict(&self, parts: &[&Matrix]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(parts)?.argmax_rows())
    }

    pub fn best_val_score(&self) -> f64 {
        match &self.head {
            FeatureHead::Static { model, .. } => model.best_val_score,
            FeatureHead::Attention(model) => model.best_val_score,
        }
    }
}

/// Standardizes each modality on the training rows, fuses, and trains the
/// head (and the attention scorer).
#[allow(clippy::too_many_arguments)]
pub fn train_feature_fusion(
    train_parts: &[&Matrix],
    train_labels: &[usize],
    val_parts: &[&Matrix],
    val_labels: &[usize],
    n_classes: usize,
    mode: FeatureFusionMode,
    hidden_dim: Option<usize>,
    config: &TrainConfig,
    seed: u64,
) -> Result<FeatureFusionModel> {
    let scalers = train_parts.iter().map(|p| Standardizer::fit(p)).collect::<Result<Vec<_>>>()?;
    let train_scaled = standardize(&scalers, train_parts)?;
    let val_scaled = standardize(&scalers, val_parts)?;
    let train_parts: Vec<&Matrix> = train_scaled.iter().collect();
    let val_parts: Vec<&Matrix> = val_scaled.iter().collect();
    let head = match mode {
        FeatureFusionMode::Concat | FeatureFusionMode::Sum => {
            let tx = fuse_features(&train_parts, mode)?;
            let vx = fuse_features(&val_parts, mode)?;
            let net = Network::init(NetworkLayout::with_hidden(tx.cols(), hidden_dim, n_classes), seed)?;
            let model = train(net, LabeledData::new(&tx, train_labels)?, LabeledData::new(&vx, val_labels)?, config)?;
            FeatureHead::Static { mode, model }
        }
        FeatureFusionMode::Attention => {
            let dim = check_equal_dims(&train_parts)?;
            check_equal_dims(&val_parts)?;
            let tx = Matrix::hstack(&train_parts)?;
            let vx = Matrix::hstack(&val_parts)?;
            let model = AttentionFusion::init(train_parts.len(), dim, hidden_dim, n_classes, seed)?;
            let trained = train(model, LabeledData::new(&tx, train_labels)?, LabeledData::new(&vx, val_labels)?, config)?;
            FeatureHead::Attention(trained)
        }
    };
    Ok(FeatureFusionModel { scalers, head })
}

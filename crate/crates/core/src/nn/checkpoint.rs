//! JSON checkpoint files. Floats are written in shortest round-trip form and
//! parsed with correct rounding, so saving and loading is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, Network, NetworkLayout, TrainConfig, TrainedModel};
use crate::error::{Error, Result};

const FORMAT: &str = "latefuse-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    layout: NetworkLayout,
    init_seed: u64,
    config: TrainConfig,
    layers: Vec<LayerRecord>,
    best_epoch: usize,
    best_val_score: f64,
    history: Vec<EpochRecord>,
}

pub fn checkpoint_to_string(model: &TrainedModel) -> Result<String> {
    let net = &model.best_network;
    let file = CheckpointFile {
        format: FORMAT.into(),
        layout: *net.layout(),
        init_seed: net.init_seed(),
        config: model.config,
        layers: net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                rows: l.rows,
                cols: l.cols,
                weights: l.weights.to_vec(),
                bias: l.bias.to_vec(),
            })
            .collect(),
        best_epoch: model.best_epoch,
        best_val_score: model.best_val_score,
        history: model.history.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))
}

pub fn checkpoint_from_str(text: &str) -> Result<TrainedModel> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::parse("<checkpoint>", e))?;
    if file.format != FORMAT {
        return Err(Error::parse("<checkpoint>", format!("unknown format {:?}", file.format)));
    }
    let shapes = file.layout.weight_shapes();
    if shapes.len() != file.layers.len() {
        return Err(Error::Dimension("checkpoint layer count does not match layout".into()));
    }
    let mut params = Vec::with_capacity(file.layout.n_params());
    for ((rows, cols), layer) in shapes.into_iter().zip(file.layers) {
        if layer.rows != rows || layer.cols != cols || layer.weights.len() != rows * cols || layer.bias.len() != rows {
            return Err(Error::Dimension(format!("checkpoint layer does not match {rows}x{cols}")));
        }
        params.extend(layer.weights);
        params.extend(layer.bias);
    }
    Ok(TrainedModel {
        best_network: Network::from_params(file.layout, params, file.init_seed)?,
        best_epoch: file.best_epoch,
        best_val_score: file.best_val_score,
        history: file.history,
        config: file.config,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    let path = path.as_ref();
    let mut text = checkpoint_to_string(model)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text).map_err(|e| match e {
        Error::Parse { reason, .. } => Error::parse(path, reason),
        other => other,
    })
}

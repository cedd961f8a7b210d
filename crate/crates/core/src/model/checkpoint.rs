//! Checkpoint format: one JSON header line describing the architecture,
//! dims and head task ranges, followed by one binary matrix dump per
//! parameter tensor in header order.

use super::{AffineLayer, ClassifierHead, FeatureExtractor};
use crate::error::{CoreError, Result};
use crate::linalg::{read_matrix, write_matrix, Matrix};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    input_dim: usize,
    hidden: Vec<usize>,
    feature_dim: usize,
    task_ranges: Vec<(usize, usize)>,
    classes: Vec<usize>,
    tensors: Vec<String>,
}

pub fn save_checkpoint(path: &Path, extractor: &FeatureExtractor, head: &ClassifierHead) -> Result<()> {
    let mut tensors = Vec::new();
    for (i, _) in extractor.layers.iter().enumerate() {
        tensors.push(format!("layers.{i}.weight"));
        tensors.push(format!("layers.{i}.bias"));
    }
    tensors.push("head.weight".to_string());
    let header = CheckpointHeader {
        input_dim: extractor.input_dim(),
        hidden: extractor.hidden_dims(),
        feature_dim: extractor.feature_dim(),
        task_ranges: head.task_ranges().to_vec(),
        classes: head.classes().to_vec(),
        tensors,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for layer in &extractor.layers {
        write_matrix(&mut w, &layer.weight)?;
        let bias = Matrix::from_vec(1, layer.bias.len(), layer.bias.clone())?;
        write_matrix(&mut w, &bias)?;
    }
    write_matrix(&mut w, &head.weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FeatureExtractor, ClassifierHead)> {
    if !path.exists() {
        return Err(CoreError::MissingArtifact(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;

    let depth = header.hidden.len() + 1;
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        let weight = read_matrix(&mut r)?;
        let bias_m = read_matrix(&mut r)?;
        let relu = i < header.hidden.len();
        layers.push(AffineLayer { weight, bias: bias_m.data().to_vec(), relu });
    }
    let head_weights = read_matrix(&mut r)?;

    let extractor = FeatureExtractor {
        layers,
        input_dim: header.input_dim,
        feature_dim: header.feature_dim,
    };
    if extractor.hidden_dims() != header.hidden {
        return Err(CoreError::Parse("checkpoint hidden dims do not match tensors".into()));
    }
    if head_weights.rows() != header.feature_dim {
        return Err(CoreError::Parse("checkpoint head rows do not match feature dim".into()));
    }
    let head = ClassifierHead {
        weights: head_weights,
        ranges: header.task_ranges,
        classes: header.classes,
    };
    if head.task_ranges().iter().map(|&(_, c)| c).sum::<usize>() != head.num_classes() {
        return Err(CoreError::Parse("checkpoint task ranges do not partition columns".into()));
    }
    Ok((extractor, head))
}

//! Toy-model manifests: an ordered chain of linear layers with optional relu.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::tensor::{load_tensor, save_tensor, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    pub fn apply_in_place(self, m: &mut DMatrix<f64>) {
        if self == Activation::Relu {
            m.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }
}

/// File references for a quantized layer, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedFiles {
    pub w_int_path: String,
    pub scales_path: String,
    pub zeros_path: String,
    pub sidecar_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub weight_path: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantized: Option<QuantizedFiles>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ModelManifest {
    /// Checks the dimension chain between consecutive layers.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Manifest("model has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Manifest(format!("layer {k} has a zero dimension")));
            }
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Manifest(format!(
                    "layer {k} out_dim {} does not match layer {} in_dim {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: ModelManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A full-precision model: manifest plus one (out_dim x in_dim) weight matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub manifest: ModelManifest,
    pub weights: Vec<DMatrix<f64>>,
}

impl Model {
    pub fn new(manifest: ModelManifest, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        manifest.validate()?;
        if weights.len() != manifest.layers.len() {
            return Err(Error::Manifest(format!(
                "{} layers declared but {} weight matrices given",
                manifest.layers.len(),
                weights.len()
            )));
        }
        for (k, (l, w)) in manifest.layers.iter().zip(&weights).enumerate() {
            if w.shape() != (l.out_dim, l.in_dim) {
                return Err(Error::Manifest(format!(
                    "layer {k} weight has shape {:?}, manifest says ({}, {})",
                    w.shape(),
                    l.out_dim,
                    l.in_dim
                )));
            }
        }
        Ok(Self { manifest, weights })
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.manifest.layers.iter().map(|l| l.activation).collect()
    }

    /// Loads `manifest.json` and every referenced weight tensor from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = ModelManifest::load(dir.join(MANIFEST_FILE))?;
        let weights = manifest
            .layers
            .iter()
            .map(|l| load_tensor(dir.join(&l.weight_path))?.to_matrix())
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, weights)
    }

    /// Writes weights as f64 tensors next to `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (l, w) in self.manifest.layers.iter().zip(&self.weights) {
            save_tensor(&Tensor::from_matrix(w)?, dir.join(&l.weight_path))?;
        }
        self.manifest.save(dir.join(MANIFEST_FILE))
    }
}

pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_FILE)
}

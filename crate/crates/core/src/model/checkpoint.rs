use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::{ModelSpec, Parameters};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::synthgeo::FeatureStats;

pub const CHECKPOINT_MAGIC: &str = "MILGRAIN-CKPT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Affine map between raw labels and the standardized training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub mean: f64,
    pub scale: f64,
}

impl LabelStats {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("no labels to standardize".into()));
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let sd = (labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            mean,
            scale: if sd < 1e-12 { 1.0 } else { sd },
        })
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn restore(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }
}

/// Everything needed to reuse a trained model on raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub config_hash: String,
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub features: FeatureStats,
    pub labels: LabelStats,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        spec: &ModelSpec,
        params: &Parameters,
        feature_names: Vec<String>,
        features: FeatureStats,
        labels: LabelStats,
        config_hash: &str,
    ) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.to_string(),
            config_hash: config_hash.to_string(),
            spec: spec.clone(),
            feature_names,
            features,
            labels,
            tensors: params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Parameters checked against the layout of the stored spec.
    pub fn parameters(&self) -> Result<Parameters> {
        let layout = self.spec.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Spec(format!(
                "checkpoint holds {} tensors, spec needs {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape), t) in layout.into_iter().zip(&self.tensors) {
            if t.name != name || t.shape != shape {
                return Err(Error::Spec(format!(
                    "checkpoint tensor {} {:?} does not match {name} {shape:?}",
                    t.name, t.shape
                )));
            }
            tensors.push(Tensor::new(shape, t.data.clone())?);
            names.push(name);
        }
        Ok(Parameters { names, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, format!("not a checkpoint (magic {:?})", ckpt.magic)));
        }
        ckpt.parameters()?;
        Ok(ckpt)
    }
}

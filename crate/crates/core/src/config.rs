//! Run configuration: strict JSON with a default for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Method, Protocol};
use crate::model::{ModelDims, ModelSpec, Pooling};
use crate::synthgeo::{SceneSpec, SplitSpec};
use crate::train::{derive_seed, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Bag sizes of the sweep, strictly ascending.
    pub ks: Vec<usize>,
    /// In-season steps; empty means every step of the scene.
    pub inseason_t: Vec<usize>,
    /// Feature groups to ablate; empty means all of them.
    pub ablation_groups: Vec<String>,
    /// Coarse grid of the scene regenerated for the sweep, so that large
    /// bags have enough candidate cells.
    pub sweep_coarse_grid: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ks: vec![50, 100, 200],
            inseason_t: Vec::new(),
            ablation_groups: Vec::new(),
            sweep_coarse_grid: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Scene, sampling, split and training seeds derive from it.
    pub seed: u64,
    pub scene: SceneSpec,
    pub bag_size: usize,
    pub split: SplitSpec,
    pub model: ModelDims,
    pub methods: Vec<Method>,
    pub ridge_lambda: f64,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    /// Where artifacts go. Left out of `resolved_config.json` so that the
    /// same run written elsewhere carries the same hash.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            bag_size: 100,
            split: SplitSpec::default(),
            model: ModelDims::default(),
            methods: Method::ALL.to_vec(),
            ridge_lambda: 1.0,
            train: TrainConfig::default(),
            experiment: ExperimentConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

const SAMPLE_STREAM: u64 = 0x5341_4d50_4c45_0000;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(config.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Copies the master seed into the nested configs.
    pub fn resolved(mut self) -> Self {
        self.scene.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        ModelSpec::new(1, self.model.clone(), Pooling::Attn, 0).validate()?;
        if self.bag_size == 0 {
            return Err(Error::Config("bag_size must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::Config("ridge_lambda must be finite and >= 0".into()));
        }
        let s = self.split;
        if !(s.test > 0.0 && s.val > 0.0 && s.test < 1.0 && s.val < 1.0) {
            return Err(Error::Config("split fractions must lie in (0, 1)".into()));
        }
        let e = &self.experiment;
        if e.ks.is_empty() || e.ks.contains(&0) || e.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("experiment.ks must be positive and strictly ascending".into()));
        }
        if let Some(t) = e.inseason_t.iter().find(|&&t| t == 0 || t > self.scene.time_steps) {
            return Err(Error::Config(format!(
                "experiment.inseason_t value {t} is outside 1..={}",
                self.scene.time_steps
            )));
        }
        if e.sweep_coarse_grid == 0 {
            return Err(Error::Config("experiment.sweep_coarse_grid must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sample_seed(&self) -> u64 {
        derive_seed(self.seed, SAMPLE_STREAM)
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            dims: self.model.clone(),
            train: self.train.clone(),
            ridge_lambda: self.ridge_lambda,
            split: self.split,
        }
    }

    pub fn inseason_steps(&self) -> Vec<usize> {
        if self.experiment.inseason_t.is_empty() {
            (1..=self.scene.time_steps).collect()
        } else {
            self.experiment.inseason_t.clone()
        }
    }

    /// Pretty JSON with a trailing newline, as written to `resolved_config.json`.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    /// SHA-256 of [`RunConfig::to_json`], in hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Writes `resolved_config.json` into `dir` and returns its hash.
    pub fn write_resolved(&self, dir: &Path) -> Result<String> {
        crate::io::create_dir(dir)?;
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, bad) in [
            (r#"{"sed": 1}"#, "`sed`"),
            (r#"{"train": {"lr": 0.1}}"#, "`lr`"),
            (r#"{"scene": {"counties": 3}}"#, "`counties`"),
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains(bad), "{e}");
        }
    }

    #[test]
    fn hash_ignores_the_output_location() {
        let a = RunConfig::parse(r#"{"output_dir": "a"}"#).unwrap();
        let b = RunConfig::parse(r#"{"output_dir": "b"}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_seed(1).hash());
    }

    #[test]
    fn seed_reaches_nested_configs() {
        let c = RunConfig::parse(r#"{"seed": 7}"#).unwrap();
        assert_eq!((c.scene.seed, c.train.seed), (7, 7));
        let c = c.with_seed(9);
        assert_eq!((c.scene.seed, c.train.seed), (9, 9));
    }

    #[test]
    fn hash_follows_content() {
        let a = RunConfig::default();
        let b = RunConfig::parse(&a.to_json()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), a.clone().with_seed(1).hash());
    }

    #[test]
    fn validation() {
        RunConfig::default().validate().unwrap();
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().unwrap_err().exit_code()
        };
        assert_eq!(bad(|c| c.experiment.ks = vec![100, 50]), 2);
        assert_eq!(bad(|c| c.experiment.inseason_t = vec![11]), 2);
        assert_eq!(bad(|c| c.methods.clear()), 2);
        assert_eq!(bad(|c| c.model.embed_dim = 0), 2);
        assert_eq!(bad(|c| c.train.lr0 = -1.0), 2);
    }

    #[test]
    fn methods_parse_by_name() {
        let c = RunConfig::parse(r#"{"methods": ["attn", "ridge"]}"#).unwrap();
        assert_eq!(c.methods, vec![Method::Attn, Method::Ridge]);
        assert!(RunConfig::parse(r#"{"methods": ["svm"]}"#).is_err());
    }
}

//! Experiment configuration: one JSON document with a block per stage of the
//! pipeline. Unknown keys are rejected; omitted keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    exploration_pools, BlobConfig, BlobWorld, Dataset, GaussianWorld, LongTailProfile, MixtureConfig, Splits, World,
};
use crate::error::{Error, Result};
use crate::explore::{FineTuneConfig, LoopConfig, Policy};
use crate::metrics::OpenSetPolicy;
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Gaussian(MixtureConfig),
    Blobs(BlobConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Gaussian(MixtureConfig {
            dim: 16,
            known_classes: 20,
            open_classes: 5,
            profile: LongTailProfile::exp(20, 500, 100.0, 1),
            open_count_per_class: 50,
            test_per_class: 50,
            mean_radius: 5.25,
            noise_sigma: 1.0,
        })
    }
}

impl DatasetConfig {
    pub fn known_classes(&self) -> usize {
        match self {
            DatasetConfig::Gaussian(c) => c.known_classes,
            DatasetConfig::Blobs(c) => c.known_classes,
        }
    }

    pub fn open_classes(&self) -> usize {
        match self {
            DatasetConfig::Gaussian(c) => c.open_classes,
            DatasetConfig::Blobs(c) => c.open_classes,
        }
    }

    fn profile(&self) -> &LongTailProfile {
        match self {
            DatasetConfig::Gaussian(c) => &c.profile,
            DatasetConfig::Blobs(c) => &c.profile,
        }
    }

    pub fn world(&self, seed: u64) -> Result<Box<dyn World>> {
        Ok(match self {
            DatasetConfig::Gaussian(c) => Box::new(GaussianWorld::new(seed, c)?),
            DatasetConfig::Blobs(c) => Box::new(BlobWorld::new(seed, c)?),
        })
    }

    pub fn generate(&self, seed: u64) -> Result<Splits> {
        match self {
            DatasetConfig::Gaussian(c) => crate::data::generate_gaussian_mixture(seed, c),
            DatasetConfig::Blobs(c) => crate::data::generate_blob_images(seed, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveConfig {
    /// Fraction of each stage pool sent to the annotator.
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// New open classes introduced by each stage.
    #[serde(default = "default_stages")]
    pub stages: Vec<usize>,
    #[serde(default = "default_pool_known")]
    pub pool_known_per_class: usize,
    #[serde(default = "default_pool_open")]
    pub pool_open_per_class: usize,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default)]
    pub fine_tune: FineTuneConfig,
}

fn default_budget() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    1.0
}
fn default_stages() -> Vec<usize> {
    vec![3, 2]
}
fn default_pool_known() -> usize {
    10
}
fn default_pool_open() -> usize {
    40
}
fn default_policy() -> Policy {
    Policy::Score
}

impl Default for ActiveConfig {
    fn default() -> Self {
        ActiveConfig {
            budget: default_budget(),
            temperature: default_temperature(),
            stages: default_stages(),
            pool_known_per_class: default_pool_known(),
            pool_open_per_class: default_pool_open(),
            policy: default_policy(),
            fine_tune: FineTuneConfig::default(),
        }
    }
}

impl ActiveConfig {
    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            budget: self.budget,
            temperature: self.temperature,
            policy: self.policy,
            fine_tune: self.fine_tune.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub openset: OpenSetPolicy,
    #[serde(default)]
    pub active: ActiveConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dataset.known_classes();
        if self.dataset.profile().num_classes != k {
            return Err(Error::Config(format!(
                "dataset.profile.num_classes = {} but dataset.known_classes = {k}",
                self.dataset.profile().num_classes
            )));
        }
        self.dataset
            .profile()
            .validate()
            .map_err(|e| Error::Config(format!("dataset.profile: {e}")))?;
        self.model.validate()?;
        self.objective
            .validate()
            .map_err(|e| Error::Config(format!("objective: {e}")))?;
        self.training.validate(k)?;
        self.openset.validate()?;
        let a = &self.active;
        if !(0.0..=1.0).contains(&a.budget) {
            return Err(Error::Config(format!(
                "active.budget must lie in [0, 1], got {}",
                a.budget
            )));
        }
        if !(a.temperature > 0.0) || !a.temperature.is_finite() {
            return Err(Error::Config("active.temperature must be positive".into()));
        }
        let introduced: usize = a.stages.iter().sum();
        if introduced > self.dataset.open_classes() {
            return Err(Error::Config(format!(
                "active.stages introduce {introduced} classes but dataset.open_classes = {}",
                self.dataset.open_classes()
            )));
        }
        if k < 2 {
            return Err(Error::Config("dataset.known_classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Splits> {
        self.dataset.generate(self.seed)
    }

    pub fn pools(&self) -> Result<Vec<Dataset>> {
        let world = self.dataset.world(self.seed)?;
        exploration_pools(
            world.as_ref(),
            &self.active.stages,
            self.active.pool_known_per_class,
            self.active.pool_open_per_class,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Sampling;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.objective.lambda, 0.1);
        assert_eq!(c.objective.margin, 5.0);
        assert_eq!(c.openset.threshold, 0.1);
    }

    #[test]
    fn round_trip_and_hash() {
        let mut c = ExperimentConfig::default();
        c.training.sampling = Sampling::Instance;
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.seed = 1;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"trainig": {}}"#).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("trainig"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"training": {"epocs": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("epocs"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"dataset": {"kind": "gaussian", "dim": 4, "bogus": 1}}"#).unwrap_err();
        assert!(e.is_config(), "{e}");
    }

    #[test]
    fn cross_block_validation() {
        let e = ExperimentConfig::from_json(r#"{"training": {"classes_per_batch": 21}}"#).unwrap_err();
        assert!(e.to_string().contains("classes_per_batch"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"active": {"stages": [4, 2]}}"#).unwrap_err();
        assert!(e.to_string().contains("stages"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"openset": {"threshold": 2}}"#).unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn syntax_errors_carry_position() {
        let e = ExperimentConfig::from_json("{\n  \"seed\": ,\n}").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn pools_follow_stages() {
        let mut c = ExperimentConfig::default();
        c.active.pool_known_per_class = 2;
        c.active.pool_open_per_class = 3;
        let pools = c.pools().unwrap();
        assert_eq!(pools.len(), 2);
        assert_eq!(pools[0].len(), 20 * 2 + 3 * 3);
        assert_eq!(pools[1].len(), 20 * 2 + 2 * 3);
        assert!(pools[0].labels.iter().all(|&l| l < 23));
        assert!(pools[1].labels.iter().all(|&l| !(20..23).contains(&l)));
    }
}

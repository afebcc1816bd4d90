use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::{BenchmarkConfig, ModelKind, NetConfig, SvmConfig};
use crate::error::{Error, Result};
use crate::mocap::SynthConfig;
use crate::model::ModelConfig;
use crate::preprocess::SsaParams;
use crate::training::{LossWeights, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub models: Vec<ModelKind>,
    pub folds: usize,
    pub knn_k: usize,
    pub svm: SvmConfig,
    pub cnn: NetConfig,
    #[serde(deserialize_with = "latent_overrides")]
    pub latent: NetConfig,
}

/// Reads a partial latent-head section on top of the latent preset rather
/// than the CNN preset that `NetConfig` defaults to.
fn latent_overrides<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<NetConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(NetConfig::latent()).map_err(D::Error::custom)?;
    match (given, &mut base) {
        (serde_json::Value::Object(over), serde_json::Value::Object(b)) => {
            for (k, v) in over {
                b.insert(k, v);
            }
        }
        (other, _) => {
            return Err(D::Error::custom(format!(
                "latent must be an object, got {other}"
            )))
        }
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl Default for EvalOptions {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            models: ModelKind::ALL.to_vec(),
            folds: b.folds,
            knn_k: b.knn_k,
            svm: b.svm,
            cnn: b.cnn,
            latent: b.latent,
        }
    }
}

impl EvalOptions {
    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            folds: self.folds,
            knn_k: self.knn_k,
            svm: self.svm,
            cnn: self.cnn.clone(),
            latent: self.latent.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainOptions {
    /// Also write every per-sample attribution map.
    pub per_sample: bool,
}

/// Every setting of a pipeline run. Missing sections and keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of model initialization, fold assignment and classifier training.
    pub seed: u64,
    pub synth: SynthConfig,
    pub preprocess: SsaParams,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub explain: ExplainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth: SynthConfig::default(),
            preprocess: SsaParams::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            explain: ExplainOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed of the run to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.rng_seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.eval.folds < 2 {
            return Err(Error::invalid("eval.folds must be at least 2"));
        }
        if self.eval.models.is_empty() {
            return Err(Error::invalid("eval.models is empty"));
        }
        Ok(())
    }

    /// Writes the fully resolved configuration as pretty JSON.
    pub fn write_effective(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let echoed = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&echoed).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        let c =
            RunConfig::from_json(r#"{"train": {"epochs": 3}, "eval": {"models": ["svm-xyz"]}}"#)
                .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch, TrainConfig::default().batch);
        assert_eq!(c.eval.models, vec![ModelKind::SvmXyz]);
        assert!(RunConfig::from_json(r#"{"eval": {"models": ["svm-rbf"]}}"#).is_err());
        let c =
            RunConfig::from_json(r#"{"eval": {"latent": {"epochs": 5}, "cnn": {"epochs": 2}}}"#)
                .unwrap();
        assert_eq!(
            c.eval.latent,
            NetConfig {
                epochs: 5,
                ..NetConfig::latent()
            }
        );
        assert_eq!(
            c.eval.cnn,
            NetConfig {
                epochs: 2,
                ..NetConfig::cnn()
            }
        );
        assert!(RunConfig::from_json(r#"{"eval": {"latent": {"epoch": 5}}}"#).is_err());
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let c = RunConfig::default().with_seed(3);
        assert_eq!((c.seed, c.synth.rng_seed, c.train.seed), (3, 3, 3));
    }
}

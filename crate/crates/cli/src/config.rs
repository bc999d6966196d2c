//! The JSON run configuration.
//!
//! Every section and every key is optional; `{}` is the default three-cluster
//! experiment. Unknown keys are rejected by name.

use std::path::Path;

use anchor_contrast::losses::{LossConfig, LossSpec, Objective};
use anchor_contrast::synthdata::ClusterParams;
use anchor_contrast::train::{ModelConfig, Reduction, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Seeded generator used for every random draw. ChaCha8 is the only choice;
/// the field exists so manifests say which stream produced them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RngAlgorithm {
    #[default]
    Chacha8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub rng: RngAlgorithm,
    pub data: ClusterParams,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub loss: LossSection,
    pub anchors: AnchorSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// 1.0
    pub lr: f64,
    /// Total SGD steps, 2000.
    pub steps: usize,
    /// Rows per batch (half originals, half augmentations), 64.
    pub batch_size: usize,
    /// Model init, shuffling, augmentation noise and label mask, 0.
    pub seed: u64,
    /// Share of each class whose labels the anchor term sees, 0.1.
    pub label_fraction: f64,
    /// Noise of the negation augmentation, 0.05.
    pub aug_sigma: f64,
    /// `mean` (default) or `sum` over the rows of a batch.
    pub reduction: Reduction,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            label_fraction: t.label_fraction,
            aug_sigma: t.aug_sigma,
            reduction: t.reduction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// `infonce`, `dcl`, `vicreg`, `barlow`, or any of them prefixed `cloa-`.
    pub name: LossSpec,
    pub temperature: f64,
    pub cloa_weight: f64,
    pub vicreg_weights: [f64; 3],
    pub vicreg_gamma: f64,
    pub vicreg_eps: f64,
    pub bt_lambda: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self::from_parts(LossSpec::plain(Objective::InfoNce), &LossConfig::default())
    }
}

impl LossSection {
    fn from_parts(name: LossSpec, c: &LossConfig) -> Self {
        Self {
            name,
            temperature: c.temperature,
            cloa_weight: c.cloa_weight,
            vicreg_weights: c.vicreg_weights,
            vicreg_gamma: c.vicreg_gamma,
            vicreg_eps: c.vicreg_eps,
            bt_lambda: c.bt_lambda,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            cloa_weight: self.cloa_weight,
            vicreg_weights: self.vicreg_weights,
            vicreg_gamma: self.vicreg_gamma,
            vicreg_eps: self.vicreg_eps,
            bt_lambda: self.bt_lambda,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSection {
    pub seed: u64,
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads `path`, or the defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: self.model.clone(),
            learning_rate: t.lr,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            loss: self.loss.name,
            loss_config: self.loss.loss_config(),
            label_fraction: t.label_fraction,
            anchor_seed: self.anchors.seed,
            aug_sigma: t.aug_sigma,
            reduction: t.reduction,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_experiment() {
        let c = RunConfigFile::from_json("{}").unwrap();
        assert_eq!(c, RunConfigFile::default());
        let t = c.train_config();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.data, ClusterParams::default());
        assert_eq!((c.data.k, c.data.per_cluster, c.data.d), (3, 100, 3));
    }

    #[test]
    fn unknown_keys_are_named() {
        for (doc, key) in [
            (r#"{"trian": {}}"#, "trian"),
            (r#"{"train": {"learning_rate": 1}}"#, "learning_rate"),
            (r#"{"loss": {"tau": 0.1}}"#, "tau"),
            (r#"{"data": {"clusters": 3}}"#, "clusters"),
        ] {
            let e = RunConfigFile::from_json(doc).unwrap_err();
            assert!(matches!(e, CliError::Config(_)));
            assert!(e.to_string().contains(key), "{e}");
        }
    }

    #[test]
    fn bad_values_are_config_errors() {
        for doc in [
            r#"{"loss": {"name": "simclr"}}"#,
            r#"{"train": {"lr": -1}}"#,
            r#"{"train": {"batch_size": 5}}"#,
            r#"{"data": {"k": 0}}"#,
            r#"{"loss": {"temperature": 0}}"#,
            r#"{"rng": "pcg"}"#,
            "[1, 2]",
        ] {
            assert!(
                matches!(RunConfigFile::from_json(doc), Err(CliError::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn sections_map_onto_the_train_config() {
        let c = RunConfigFile::from_json(
            r#"{"train": {"lr": 0.25, "steps": 7, "seed": 9, "reduction": "sum"},
                "loss": {"name": "cloa-dcl", "temperature": 0.2, "cloa_weight": 3},
                "model": {"h1": 5}, "anchors": {"seed": 4}}"#,
        )
        .unwrap();
        let t = c.train_config();
        assert_eq!(t.learning_rate, 0.25);
        assert_eq!(t.steps, 7);
        assert_eq!(t.seed, 9);
        assert_eq!(t.reduction, Reduction::Sum);
        assert_eq!(t.loss.to_string(), "cloa-dcl");
        assert_eq!(t.loss_config.temperature, 0.2);
        assert_eq!(t.loss_config.cloa_weight, 3.0);
        assert_eq!(t.model.h1, 5);
        assert_eq!(t.model.h2, 64);
        assert_eq!(t.anchor_seed, 4);
    }

    #[test]
    fn pretty_json_round_trips() {
        let mut c = RunConfigFile::default();
        c.train.lr = 0.1 + 0.2;
        c.loss.name = "cloa-barlow".parse().unwrap();
        assert_eq!(RunConfigFile::from_json(&c.to_json_pretty()).unwrap(), c);
    }
}

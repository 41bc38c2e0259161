//! Experiment configuration: one JSON document drives the whole pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::Strategy;
use crate::synthdata::UserKind;
use crate::target_model::TrainHyper;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own labeled stream from it.
    pub seed: u64,
    pub n_per_class: usize,
    /// The simulated user the sweep evaluates.
    pub user_kind: UserKind,
    pub strategies: Vec<Strategy>,
    /// Budget fractions of the training split, each in (0, 1].
    pub p_grid: Vec<f64>,
    pub runs: u32,
    pub out_dir: PathBuf,
    pub target_hyper: TrainHyper,
    pub concept_m: usize,
    pub concept_hyper: TrainHyper,
    pub user_hyper: TrainHyper,
    /// Retrain on masked instead of plain images.
    pub masked_retraining: bool,
    /// Represent each class in the BT density by a sampled exemplar instead
    /// of the class mean.
    pub bt_exemplar: bool,
    /// Refit the expertise vector inside every sweep run instead of once.
    pub refit_user_per_run: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            n_per_class: 300,
            user_kind: UserKind::ColorUser,
            strategies: Strategy::all().to_vec(),
            p_grid: vec![0.10, 0.15, 0.20, 0.25, 0.30],
            runs: 5,
            out_dir: PathBuf::from("out"),
            target_hyper: TrainHyper {
                lr: 1e-3,
                epochs: 10,
                batch: 32,
                weight_decay: 0.0,
            },
            concept_m: 8,
            concept_hyper: TrainHyper {
                lr: 1e-3,
                epochs: 20,
                batch: 32,
                weight_decay: 0.0,
            },
            user_hyper: TrainHyper {
                lr: 1e-2,
                epochs: 40,
                batch: 32,
                weight_decay: 0.0,
            },
            masked_retraining: false,
            bt_exemplar: false,
            refit_user_per_run: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 5 {
            return Err(Error::Config(format!(
                "n_per_class must be at least 5, got {}",
                self.n_per_class
            )));
        }
        if self.p_grid.is_empty() {
            return Err(Error::Config("p_grid is empty".into()));
        }
        for &p in &self.p_grid {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("p = {p} outside (0, 1]")));
            }
        }
        if self.runs < 1 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        if self.concept_m < 2 {
            return Err(Error::Config(format!(
                "concept_m must be at least 2, got {}",
                self.concept_m
            )));
        }
        for (name, hyper) in [
            ("target_hyper", &self.target_hyper),
            ("concept_hyper", &self.concept_hyper),
            ("user_hyper", &self.user_hyper),
        ] {
            if hyper.lr <= 0.0 || !hyper.lr.is_finite() {
                return Err(Error::Config(format!("{name}.lr must be positive")));
            }
            if hyper.epochs == 0 || hyper.batch == 0 {
                return Err(Error::Config(format!(
                    "{name} epochs and batch must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip_with_overrides() {
        let cfg = ExperimentConfig::from_json(
            r#"{"seed": 3, "p_grid": [0.2, 1.0], "user_kind": "shape_user", "strategies": ["hypercorrection", "bt"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.user_kind, UserKind::ShapeUser);
        assert_eq!(cfg.strategies, vec![Strategy::Hypercorrection, Strategy::Bt]);
        assert_eq!(cfg.n_per_class, 300);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"p_grid": [0.0]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"p_grid": [1.5]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"runs": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"strategies": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"unknown_field": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"strategies": ["nope"]}"#).is_err());
        assert!(ExperimentConfig::from_json("not json").is_err());
    }
}

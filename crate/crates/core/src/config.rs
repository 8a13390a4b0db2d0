//! Experiment configuration shared by the CLI and the trainer.
//!
//! Every section defaults to the documented values, so a config file only
//! needs the fields it overrides. Unknown keys are rejected.

use crate::advantage::{Epsilons, EstimatorKind, KlDampingConfig};
use crate::clustering::ClusteringSettings;
use crate::objective::ObjectiveConfig;
use crate::rewards::RewardWeights;
use crate::synthenv::EnvironmentConfig;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Validation failure, carrying the dotted path of the offending field.
#[derive(Debug, Error, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Estimators to run, one training run per (estimator, seed).
    pub estimators: Vec<EstimatorKind>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub rewards: RewardWeights,
    pub advantage: Epsilons,
    pub clustering: ClusteringSettings,
    pub damping: KlDampingConfig,
    pub objective: ObjectiveConfig,
    pub environment: EnvironmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            estimators: vec![EstimatorKind::Drpo],
            seeds: vec![42],
            output_dir: PathBuf::from("out"),
            rewards: RewardWeights::default(),
            advantage: Epsilons::default(),
            clustering: ClusteringSettings::default(),
            damping: KlDampingConfig::default(),
            objective: ObjectiveConfig::default(),
            environment: EnvironmentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.estimators.is_empty() {
            return Err(invalid("estimators", "at least one estimator is required"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        self.rewards
            .validate()
            .map_err(|e| invalid("rewards", e.to_string()))?;
        if self.advantage.norm < 0.0 {
            return Err(invalid("advantage.norm", "must be nonnegative"));
        }
        if !(self.advantage.floor > 0.0) {
            return Err(invalid("advantage.floor", "must be positive"));
        }
        if self.clustering.k_max < 1 {
            return Err(invalid("clustering.k_max", "must be at least 1"));
        }
        if !(self.clustering.tau > 0.0 && self.clustering.tau < 1.0) {
            return Err(invalid("clustering.tau", "must lie strictly inside (0,1)"));
        }
        if !(self.damping.percentile > 0.0 && self.damping.percentile < 1.0) {
            return Err(invalid("damping.percentile", "must lie strictly inside (0,1)"));
        }
        self.objective
            .validate()
            .map_err(|e| invalid("objective", e.to_string()))?;
        let env = &self.environment;
        if env.domains.is_empty() {
            return Err(invalid("environment.domains", "at least one domain is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, domain) in env.domains.iter().enumerate() {
            let field = |name: &str| format!("environment.domains[{i}].{name}");
            if domain.id.trim().is_empty() {
                return Err(invalid(&field("id"), "must be a nonempty string"));
            }
            if !seen.insert(&domain.id) {
                return Err(invalid(&field("id"), format!("duplicate domain id `{}`", domain.id)));
            }
            if !(domain.prevalence > 0.0) {
                return Err(invalid(&field("prevalence"), "must be positive"));
            }
            if domain.vocab_size < 2 {
                return Err(invalid(&field("vocab_size"), "must be at least 2"));
            }
            if !(0.0..=1.0).contains(&domain.difficulty) {
                return Err(invalid(&field("difficulty"), "must lie in [0,1]"));
            }
            if domain.mask_height < 4 || domain.mask_width < 4 {
                return Err(invalid(&field("mask_height"), "mask grid must be at least 4x4"));
            }
        }
        if env.group_size < 2 {
            return Err(invalid("environment.group_size", "must be at least 2"));
        }
        if env.questions_per_iteration < 1 {
            return Err(invalid("environment.questions_per_iteration", "must be at least 1"));
        }
        if !(env.learning_rate > 0.0) {
            return Err(invalid("environment.learning_rate", "must be positive"));
        }
        if env.feature_dim < 1 {
            return Err(invalid("environment.feature_dim", "must be at least 1"));
        }
        if env.noise_scale < 0.0 {
            return Err(invalid("environment.noise_scale", "must be nonnegative"));
        }
        if env.eval_questions_per_domain < 1 {
            return Err(invalid("environment.eval_questions_per_domain", "must be at least 1"));
        }
        if env.eval_interval < 1 {
            return Err(invalid("environment.eval_interval", "must be at least 1"));
        }
        Ok(())
    }
}

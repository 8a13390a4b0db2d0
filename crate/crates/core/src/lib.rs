//! Critic-free policy optimization with domain-aware advantage scaling.
//!
//! This crate implements the DRPO training signal: group-relative advantage
//! normalization (GRPO), hierarchical rescaling of those advantages by
//! domain- and cluster-level temperature factors, KL-aware damping of
//! outliers, the clipped surrogate objective, and the reward functions the
//! advantages are computed from. A seeded multi-domain synthetic environment
//! with a logistic toy policy makes the whole pipeline trainable end to end
//! at desk scale.
//!
//! Module map:
//!
//! - [`batch`]: rollouts, question groups, domain batches, iteration batches.
//! - [`rewards`]: set-F1 accuracy, best-IoU alignment, format reward, and
//!   their weighted combination.
//! - [`clustering`]: seeded k-means over per-question reward vectors with
//!   elbow-method model selection.
//! - [`advantage`]: GRPO/DRPO advantage estimators plus RLOO, Reinforce++,
//!   ReMax, and plain REINFORCE baselines.
//! - [`objective`]: clipped surrogate objective with per-token importance
//!   ratios and KL penalty, plus analytic gradients for the toy policy.
//! - [`synthenv`]: synthetic multi-domain diagnosis environment and trainer.
//! - [`metrics`]: balanced accuracy / macro-F1 with dataset, domain, and
//!   overall averaging.
//! - [`config`]: experiment configuration shared by the CLI and the trainer.

pub mod advantage;
pub mod batch;
pub mod clustering;
pub mod config;
pub mod metrics;
pub mod objective;
pub mod rewards;
pub mod rng;
pub mod synthenv;

pub use advantage::{
    baseline_advantages, drpo_advantages, grpo_advantages, AdvantageTensor, DrpoVariant,
    EstimatorKind, KlDampingConfig,
};
pub use batch::{IterationBatch, QuestionGroup, Rollout, RolloutRecord, TokenSequence};
pub use clustering::{kmeans, select_k_elbow, ClusterModel, RewardVector};
pub use config::ExperimentConfig;
pub use objective::{surrogate_objective, ObjectiveConfig};
pub use rewards::{best_iou, combine, format_reward, set_f1, BoundingBox, LabelSet, Mask, RewardWeights};

//! Clipped surrogate objective with per-token importance ratios and a KL
//! penalty against the reference policy.
//!
//! For each group the objective averages the clipped term over rollouts and
//! tokens and subtracts `beta` times the group's per-token KL estimate:
//!
//! ```text
//! J = mean over groups of
//!     (1/|G|) sum_i (1/n_i) sum_k min(phi * A, clip(phi, 1-eps, 1+eps) * A)
//!     - beta * KL(group)
//! ```
//!
//! with `phi = exp(logp_current - logp_old)` per token. The KL estimate uses
//! the same per-token form as the damping machinery,
//! `exp(logp_current) * (logp_current - logp_ref)`, averaged per token within
//! each response and then across the group's responses.
//!
//! [`objective_gradient`] differentiates J for the synthetic environment's
//! logistic policy, recomputing `logp_current` from the policy parameters.
//! The clip contributes a zero subgradient on its clipped branch.

use crate::advantage::AdvantageTensor;
use crate::batch::{IterationBatch, TokenSequence};
use crate::synthenv::{PolicyGradient, SyntheticQuestion, ToyPolicy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("no advantage entry for rollout {rollout_id}")]
    MissingAdvantage { rollout_id: String },
    #[error("no question entry for {question_id}")]
    MissingQuestion { question_id: String },
    #[error("rollout {rollout_id} has no prediction payload to recompute log-probabilities from")]
    MissingPrediction { rollout_id: String },
    #[error("clip range must lie in (0,1), got {0}")]
    InvalidClip(f64),
    #[error("KL coefficient must be nonnegative, got {0}")]
    InvalidBeta(f64),
}

/// Clip width and KL coefficient of the surrogate objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub clip: f64,
    pub beta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { clip: 0.2, beta: 1e-4 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(ObjectiveError::InvalidClip(self.clip));
        }
        if self.beta < 0.0 {
            return Err(ObjectiveError::InvalidBeta(self.beta));
        }
        Ok(())
    }
}

/// Importance ratio at token `k`: `exp(logp_current - logp_old)`.
pub fn token_ratio(tokens: &TokenSequence, k: usize) -> f64 {
    (tokens.logp_current()[k] - tokens.logp_old()[k]).exp()
}

/// `min(ratio * advantage, clip(ratio, 1-clip, 1+clip) * advantage)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Per-token KL estimate on a realized token.
fn token_kl(logp_current: f64, logp_ref: f64) -> f64 {
    logp_current.exp() * (logp_current - logp_ref)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupObjective {
    pub question_id: String,
    pub domain: String,
    /// `(1/|G|) sum_i (1/n_i) sum_k` of the clipped terms.
    pub clipped_mean: f64,
    /// Group KL estimate (token-mean per response, response-mean per group).
    pub kl: f64,
    /// `clipped_mean - beta * kl`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBreakdown {
    /// Mean of the group values.
    pub value: f64,
    pub groups: Vec<GroupObjective>,
}

/// Evaluates the objective on a batch with advantages attached, using the
/// stored token log-probabilities. Greedy probe rollouts do not participate.
pub fn surrogate_objective(
    batch: &IterationBatch,
    advantages: &AdvantageTensor,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveBreakdown, ObjectiveError> {
    cfg.validate()?;
    let by_id = advantages.by_rollout_id();
    let mut groups = Vec::with_capacity(batch.group_count());
    for group in batch.groups() {
        let mut clipped_mean = 0.0;
        let mut kl = 0.0;
        let size = group.sampled_len() as f64;
        for rollout in group.sampled() {
            let advantage = by_id
                .get(rollout.id.as_str())
                .ok_or_else(|| ObjectiveError::MissingAdvantage { rollout_id: rollout.id.clone() })?
                .advantage;
            let n = rollout.tokens.len() as f64;
            let mut token_sum = 0.0;
            let mut kl_sum = 0.0;
            for k in 0..rollout.tokens.len() {
                token_sum += clipped_term(token_ratio(&rollout.tokens, k), advantage, cfg.clip);
                kl_sum += token_kl(rollout.tokens.logp_current()[k], rollout.tokens.logp_ref()[k]);
            }
            clipped_mean += token_sum / n / size;
            kl += kl_sum / n / size;
        }
        groups.push(GroupObjective {
            question_id: group.question_id().to_string(),
            domain: group.domain().to_string(),
            clipped_mean,
            kl,
            value: clipped_mean - cfg.beta * kl,
        });
    }
    let value = groups.iter().map(|g| g.value).sum::<f64>() / groups.len() as f64;
    Ok(ObjectiveBreakdown { value, groups })
}

/// Token decisions of a rollout, recovered from its prediction payload and
/// the policy's domain vocabulary (token `k` is the binary decision on the
/// k-th vocabulary label).
fn rollout_decisions(
    policy: &ToyPolicy,
    domain: &str,
    rollout: &crate::batch::Rollout,
) -> Result<Vec<bool>, ObjectiveError> {
    let prediction = rollout
        .prediction
        .as_ref()
        .ok_or_else(|| ObjectiveError::MissingPrediction { rollout_id: rollout.id.clone() })?;
    Ok(policy
        .head(domain)
        .vocab
        .iter()
        .map(|label| prediction.labels.contains(label))
        .collect())
}

/// The objective as a function of the policy parameters: `logp_current` is
/// recomputed from `policy` while `logp_old`, `logp_ref`, and the advantages
/// stay fixed. Used by the analytic gradient and by finite-difference checks.
pub fn policy_objective(
    policy: &ToyPolicy,
    batch: &IterationBatch,
    advantages: &AdvantageTensor,
    questions: &BTreeMap<String, SyntheticQuestion>,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    let by_id = advantages.by_rollout_id();
    let mut total = 0.0;
    for group in batch.groups() {
        let question = questions
            .get(group.question_id())
            .ok_or_else(|| ObjectiveError::MissingQuestion { question_id: group.question_id().to_string() })?;
        let size = group.sampled_len() as f64;
        let mut group_value = 0.0;
        for rollout in group.sampled() {
            let advantage = by_id
                .get(rollout.id.as_str())
                .ok_or_else(|| ObjectiveError::MissingAdvantage { rollout_id: rollout.id.clone() })?
                .advantage;
            let decisions = rollout_decisions(policy, group.domain(), rollout)?;
            let n = decisions.len() as f64;
            let mut token_sum = 0.0;
            let mut kl_sum = 0.0;
            for (k, &decision) in decisions.iter().enumerate() {
                let logp = policy.token_logp(group.domain(), k, &question.features, decision);
                let ratio = (logp - rollout.tokens.logp_old()[k]).exp();
                token_sum += clipped_term(ratio, advantage, cfg.clip);
                kl_sum += token_kl(logp, rollout.tokens.logp_ref()[k]);
            }
            group_value += (token_sum - cfg.beta * kl_sum) / n / size;
        }
        total += group_value;
    }
    Ok(total / batch.group_count() as f64)
}

/// Analytic gradient of [`policy_objective`] with respect to the policy
/// parameters. The clipped branch contributes a zero subgradient.
pub fn objective_gradient(
    policy: &ToyPolicy,
    batch: &IterationBatch,
    advantages: &AdvantageTensor,
    questions: &BTreeMap<String, SyntheticQuestion>,
    cfg: &ObjectiveConfig,
) -> Result<PolicyGradient, ObjectiveError> {
    cfg.validate()?;
    let by_id = advantages.by_rollout_id();
    let mut gradient = PolicyGradient::zeros_like(policy);
    let group_weight = 1.0 / batch.group_count() as f64;
    for group in batch.groups() {
        let question = questions
            .get(group.question_id())
            .ok_or_else(|| ObjectiveError::MissingQuestion { question_id: group.question_id().to_string() })?;
        let size = group.sampled_len() as f64;
        for rollout in group.sampled() {
            let advantage = by_id
                .get(rollout.id.as_str())
                .ok_or_else(|| ObjectiveError::MissingAdvantage { rollout_id: rollout.id.clone() })?
                .advantage;
            let decisions = rollout_decisions(policy, group.domain(), rollout)?;
            let n = decisions.len() as f64;
            let weight = group_weight / size / n;
            for (k, &decision) in decisions.iter().enumerate() {
                let logp = policy.token_logp(group.domain(), k, &question.features, decision);
                let ratio = (logp - rollout.tokens.logp_old()[k]).exp();
                let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                // d(term)/d(logp): ratio * advantage on the unclipped branch
                // (d ratio / d logp = ratio), zero when the min picks the
                // clipped product.
                let surrogate_dlogp = if ratio * advantage <= clipped * advantage {
                    ratio * advantage
                } else {
                    0.0
                };
                // d/d(logp) of exp(logp) * (logp - logp_ref)
                let kl_dlogp = logp.exp() * (logp - rollout.tokens.logp_ref()[k] + 1.0);
                let dlogp = weight * (surrogate_dlogp - cfg.beta * kl_dlogp);
                // chain rule through logp: d(logp)/d(score) = z - p
                let p = policy.prob(group.domain(), k, &question.features);
                let dscore = dlogp * (if decision { 1.0 } else { 0.0 } - p);
                gradient.accumulate(group.domain(), k, &question.features, dscore);
            }
        }
    }
    Ok(gradient)
}

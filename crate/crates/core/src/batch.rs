//! Batch data model shared by every estimator.
//!
//! A [`Rollout`] is one sampled response with its scalar reward and per-token
//! log-probabilities under the current, old, and reference policies. The
//! rollouts answering one prompt form a [`QuestionGroup`], groups of one
//! domain form a [`DomainBatch`], and all domains of one iteration form an
//! [`IterationBatch`]. Batches are immutable after construction and carry a
//! canonical ordering: domains sorted lexicographically, groups sorted by
//! question id, rollouts sorted by rollout id.
//!
//! Group sizes must be uniform across the batch (clustering consumes the
//! group reward vectors as fixed-length points). A group may additionally
//! carry one greedy rollout, flagged via `is_greedy`; greedy rollouts serve
//! as the ReMax baseline and are excluded from all group and batch reward
//! statistics.

use crate::rewards::{BoundingBox, LabelSet, RewardWeights};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("token log-probability lists must share one length >= 1 (got {current}/{old}/{reference})")]
    TokenLengthMismatch { current: usize, old: usize, reference: usize },
    #[error("token log-probabilities must be finite and <= 0, got {value} at position {index}")]
    InvalidLogProb { index: usize, value: f64 },
    #[error("reward must be finite, got {0}")]
    NonFiniteReward(f64),
    #[error("domain id must be a nonempty string (question {question_id})")]
    EmptyDomain { question_id: String },
    #[error("question {question_id} has {count} sampled rollouts; at least 2 are required")]
    SingletonGroup { question_id: String, count: usize },
    #[error("question {question_id} carries inconsistent domain tags ({first} vs {second})")]
    InconsistentDomain { question_id: String, first: String, second: String },
    #[error("question {question_id} flags {count} greedy rollouts; at most 1 is allowed")]
    MultipleGreedy { question_id: String, count: usize },
    #[error("non-uniform group size: question {question_id} has {size} sampled rollouts, batch uses {expected}")]
    NonUniformGroupSize { question_id: String, size: usize, expected: usize },
    #[error("duplicate rollout id {rollout_id}")]
    DuplicateRolloutId { rollout_id: String },
    #[error("duplicate question id {question_id}")]
    DuplicateQuestionId { question_id: String },
    #[error(
        "rollout {rollout_id}: reward {reward} does not match weighted breakdown {expected} (tolerance 1e-9)"
    )]
    RewardBreakdownMismatch { rollout_id: String, reward: f64, expected: f64 },
    #[error("batch has no groups")]
    EmptyBatch,
}

/// Per-token log-probabilities of one response under the current, old, and
/// reference policies. All three lists share the same length and every entry
/// is finite and non-positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    logp_current: Vec<f64>,
    logp_old: Vec<f64>,
    logp_ref: Vec<f64>,
}

impl TokenSequence {
    pub fn new(
        logp_current: Vec<f64>,
        logp_old: Vec<f64>,
        logp_ref: Vec<f64>,
    ) -> Result<Self, BatchError> {
        let n = logp_current.len();
        if n == 0 || logp_old.len() != n || logp_ref.len() != n {
            return Err(BatchError::TokenLengthMismatch {
                current: logp_current.len(),
                old: logp_old.len(),
                reference: logp_ref.len(),
            });
        }
        for list in [&logp_current, &logp_old, &logp_ref] {
            if let Some((index, &value)) =
                list.iter().enumerate().find(|(_, v)| !v.is_finite() || **v > 0.0)
            {
                return Err(BatchError::InvalidLogProb { index, value });
            }
        }
        Ok(Self { logp_current, logp_old, logp_ref })
    }

    pub fn len(&self) -> usize {
        self.logp_current.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }

    pub fn logp_current(&self) -> &[f64] {
        &self.logp_current
    }

    pub fn logp_old(&self) -> &[f64] {
        &self.logp_old
    }

    pub fn logp_ref(&self) -> &[f64] {
        &self.logp_ref
    }
}

/// Reward channel breakdown `(acc, iou, aux)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub iou: f64,
    pub aux: f64,
}

/// Prediction payload attached to synthetic rollouts. Opaque to the batch
/// machinery; used to recompute rewards and for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: LabelSet,
    /// `(label, box)` pairs, one entry per emitted box.
    pub boxes: Vec<(String, BoundingBox)>,
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub id: String,
    pub reward: f64,
    pub breakdown: Option<RewardBreakdown>,
    pub tokens: TokenSequence,
    pub is_greedy: bool,
    pub prediction: Option<Prediction>,
}

impl Rollout {
    pub fn new(id: impl Into<String>, reward: f64, tokens: TokenSequence) -> Result<Self, BatchError> {
        if !reward.is_finite() {
            return Err(BatchError::NonFiniteReward(reward));
        }
        Ok(Self { id: id.into(), reward, breakdown: None, tokens, is_greedy: false, prediction: None })
    }

    pub fn with_breakdown(mut self, breakdown: RewardBreakdown) -> Self {
        self.breakdown = Some(breakdown);
        self
    }

    pub fn with_prediction(mut self, prediction: Prediction) -> Self {
        self.prediction = Some(prediction);
        self
    }

    pub fn greedy(mut self) -> Self {
        self.is_greedy = true;
        self
    }

    /// Checks that the stored reward equals the weighted combination of the
    /// breakdown within 1e-9. Rollouts without a breakdown pass.
    pub fn validate_reward(&self, weights: &RewardWeights) -> Result<(), BatchError> {
        if let Some(b) = &self.breakdown {
            let expected = crate::rewards::combine(b.acc, b.iou, b.aux, weights);
            if (expected - self.reward).abs() > 1e-9 {
                return Err(BatchError::RewardBreakdownMismatch {
                    rollout_id: self.id.clone(),
                    reward: self.reward,
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// The rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionGroup {
    question_id: String,
    domain: String,
    rollouts: Vec<Rollout>,
}

impl QuestionGroup {
    /// Builds a group, sorting rollouts by id and validating the invariants:
    /// nonempty domain, at least two sampled rollouts, at most one greedy
    /// rollout, unique rollout ids.
    pub fn new(
        question_id: impl Into<String>,
        domain: impl Into<String>,
        mut rollouts: Vec<Rollout>,
    ) -> Result<Self, BatchError> {
        let question_id = question_id.into();
        let domain = domain.into();
        if domain.trim().is_empty() {
            return Err(BatchError::EmptyDomain { question_id });
        }
        rollouts.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in rollouts.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(BatchError::DuplicateRolloutId { rollout_id: pair[0].id.clone() });
            }
        }
        let greedy_count = rollouts.iter().filter(|r| r.is_greedy).count();
        if greedy_count > 1 {
            return Err(BatchError::MultipleGreedy { question_id, count: greedy_count });
        }
        let sampled = rollouts.len() - greedy_count;
        if sampled < 2 {
            return Err(BatchError::SingletonGroup { question_id, count: sampled });
        }
        Ok(Self { question_id, domain, rollouts })
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// All rollouts, including a greedy one if present.
    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    /// Sampled (non-greedy) rollouts; the unit of every reward statistic.
    pub fn sampled(&self) -> impl Iterator<Item = &Rollout> {
        self.rollouts.iter().filter(|r| !r.is_greedy)
    }

    pub fn sampled_len(&self) -> usize {
        self.rollouts.iter().filter(|r| !r.is_greedy).count()
    }

    pub fn greedy_rollout(&self) -> Option<&Rollout> {
        self.rollouts.iter().find(|r| r.is_greedy)
    }

    pub fn sampled_rewards(&self) -> Vec<f64> {
        self.sampled().map(|r| r.reward).collect()
    }
}

/// All question groups of one domain in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBatch {
    domain: String,
    groups: Vec<QuestionGroup>,
    mean_reward: f64,
}

impl DomainBatch {
    fn new(domain: String, groups: Vec<QuestionGroup>) -> Self {
        let (sum, count) = groups
            .iter()
            .flat_map(|g| g.sampled())
            .fold((0.0, 0usize), |(s, c), r| (s + r.reward, c + 1));
        let mean_reward = sum / count as f64;
        Self { domain, groups, mean_reward }
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn groups(&self) -> &[QuestionGroup] {
        &self.groups
    }

    /// Number of questions in the domain this iteration (`N`).
    pub fn question_count(&self) -> usize {
        self.groups.len()
    }

    /// Mean sampled-rollout reward over the domain (`mu`).
    pub fn mean_reward(&self) -> f64 {
        self.mean_reward
    }
}

/// The full sampled batch of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationBatch {
    iteration: u64,
    domains: Vec<DomainBatch>,
    group_size: usize,
}

impl IterationBatch {
    /// Builds a batch from pre-formed groups, enforcing canonical ordering
    /// and the cross-group invariants (unique question ids, uniform sampled
    /// group size).
    pub fn from_groups(iteration: u64, groups: Vec<QuestionGroup>) -> Result<Self, BatchError> {
        if groups.is_empty() {
            return Err(BatchError::EmptyBatch);
        }
        let mut seen_questions = std::collections::BTreeSet::new();
        let mut seen_rollouts = std::collections::BTreeSet::new();
        let group_size = groups[0].sampled_len();
        for group in &groups {
            if !seen_questions.insert(group.question_id.clone()) {
                return Err(BatchError::DuplicateQuestionId {
                    question_id: group.question_id.clone(),
                });
            }
            for rollout in &group.rollouts {
                if !seen_rollouts.insert(rollout.id.clone()) {
                    return Err(BatchError::DuplicateRolloutId { rollout_id: rollout.id.clone() });
                }
            }
            if group.sampled_len() != group_size {
                return Err(BatchError::NonUniformGroupSize {
                    question_id: group.question_id.clone(),
                    size: group.sampled_len(),
                    expected: group_size,
                });
            }
        }
        let mut by_domain: std::collections::BTreeMap<String, Vec<QuestionGroup>> =
            std::collections::BTreeMap::new();
        for group in groups {
            by_domain.entry(group.domain.clone()).or_default().push(group);
        }
        let domains = by_domain
            .into_iter()
            .map(|(domain, mut groups)| {
                groups.sort_by(|a, b| a.question_id.cmp(&b.question_id));
                DomainBatch::new(domain, groups)
            })
            .collect();
        Ok(Self { iteration, domains, group_size })
    }

    /// Builds a batch from flat per-rollout records, grouping by question id.
    /// Records of one question must agree on the domain tag.
    pub fn from_records(iteration: u64, records: Vec<RolloutRecord>) -> Result<Self, BatchError> {
        let mut grouped: std::collections::BTreeMap<String, (String, Vec<Rollout>)> =
            std::collections::BTreeMap::new();
        for record in records {
            let RolloutRecord {
                question_id,
                domain,
                rollout_id,
                reward,
                reward_breakdown,
                logp_current,
                logp_old,
                logp_ref,
                is_greedy,
            } = record;
            if domain.trim().is_empty() {
                return Err(BatchError::EmptyDomain { question_id });
            }
            let tokens = TokenSequence::new(logp_current, logp_old, logp_ref)?;
            let mut rollout = Rollout::new(rollout_id, reward, tokens)?;
            rollout.breakdown = reward_breakdown;
            rollout.is_greedy = is_greedy;
            match grouped.get_mut(&question_id) {
                None => {
                    grouped.insert(question_id, (domain, vec![rollout]));
                }
                Some((first_domain, rollouts)) => {
                    if *first_domain != domain {
                        return Err(BatchError::InconsistentDomain {
                            question_id,
                            first: first_domain.clone(),
                            second: domain,
                        });
                    }
                    rollouts.push(rollout);
                }
            }
        }
        let groups = grouped
            .into_iter()
            .map(|(question_id, (domain, rollouts))| QuestionGroup::new(question_id, domain, rollouts))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_groups(iteration, groups)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn domains(&self) -> &[DomainBatch] {
        &self.domains
    }

    pub fn domain(&self, id: &str) -> Option<&DomainBatch> {
        self.domains.iter().find(|d| d.domain == id)
    }

    /// Uniform sampled group size.
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Groups in canonical order (domain, then question id).
    pub fn groups(&self) -> impl Iterator<Item = &QuestionGroup> {
        self.domains.iter().flat_map(|d| d.groups.iter())
    }

    pub fn group_count(&self) -> usize {
        self.domains.iter().map(|d| d.groups.len()).sum()
    }

    /// Sampled rollouts across the batch, in canonical order.
    pub fn sampled_rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.groups().flat_map(|g| g.sampled())
    }

    /// Flattens the batch back into per-rollout records (canonical order).
    pub fn to_records(&self) -> Vec<RolloutRecord> {
        self.groups()
            .flat_map(|group| {
                group.rollouts().iter().map(move |rollout| RolloutRecord {
                    question_id: group.question_id().to_string(),
                    domain: group.domain().to_string(),
                    rollout_id: rollout.id.clone(),
                    reward: rollout.reward,
                    reward_breakdown: rollout.breakdown,
                    logp_current: rollout.tokens.logp_current().to_vec(),
                    logp_old: rollout.tokens.logp_old().to_vec(),
                    logp_ref: rollout.tokens.logp_ref().to_vec(),
                    is_greedy: rollout.is_greedy,
                })
            })
            .collect()
    }
}

/// Flat wire representation of one rollout: one JSON object per line in the
/// rollout JSONL format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub question_id: String,
    pub domain: String,
    pub rollout_id: String,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_breakdown: Option<RewardBreakdown>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    #[serde(default)]
    pub is_greedy: bool,
}

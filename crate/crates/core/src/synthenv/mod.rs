//! Seeded multi-domain synthetic diagnosis environment.
//!
//! Questions are drawn from domains with configurable prevalence, vocabulary
//! size, and difficulty. A question's features are the prototype vector of
//! its gold label plus Gaussian noise scaled by the domain difficulty, so a
//! linear policy can learn each domain but noisy domains stay hard. Each gold
//! label also owns a rectangle on the domain's mask grid; gold masks and
//! predicted boxes reuse those rectangles, which gives the IoU reward channel
//! signal that tracks label accuracy.

mod policy;
mod trainer;

pub use policy::{DomainHead, HeadGradient, PolicyGradient, ToyPolicy};
pub use trainer::{train, TraceRow, TrainError, TrainTrace};

use crate::batch::{Prediction, QuestionGroup, Rollout, TokenSequence};
use crate::rewards::{self, BoundingBox, LabelSet, Mask, RewardWeights};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("environment needs at least one domain")]
    NoDomains,
    #[error("domain {0}: prevalence must be positive")]
    InvalidPrevalence(String),
    #[error("domain {0}: vocabulary size must be at least 2")]
    VocabTooSmall(String),
    #[error("domain {0}: difficulty must lie in [0,1]")]
    InvalidDifficulty(String),
    #[error("domain {0}: mask dimensions must be at least 4x4")]
    MaskTooSmall(String),
    #[error("duplicate domain id {0}")]
    DuplicateDomain(String),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
}

/// One synthetic domain: its share of the question mix, label vocabulary
/// size, feature-noise level, and mask-grid geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    pub prevalence: f64,
    pub vocab_size: usize,
    pub difficulty: f64,
    #[serde(default = "default_mask_dim")]
    pub mask_height: usize,
    #[serde(default = "default_mask_dim")]
    pub mask_width: usize,
}

fn default_mask_dim() -> usize {
    16
}

/// Environment and trainer knobs. The default mirrors an imbalanced
/// three-domain mix: one common easy domain, one mid, one rare hard domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentConfig {
    pub domains: Vec<DomainSpec>,
    pub group_size: usize,
    pub questions_per_iteration: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub feature_dim: usize,
    /// Feature noise standard deviation at difficulty 1.0.
    pub noise_scale: f64,
    pub eval_questions_per_domain: usize,
    pub eval_interval: u64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        let domain = |id: &str, prevalence: f64, difficulty: f64| DomainSpec {
            id: id.to_string(),
            prevalence,
            vocab_size: 4,
            difficulty,
            mask_height: 16,
            mask_width: 16,
        };
        Self {
            domains: vec![
                domain("cxr", 0.80, 0.2),
                domain("ct", 0.15, 0.5),
                domain("ecg", 0.05, 0.8),
            ],
            group_size: 5,
            questions_per_iteration: 512,
            iterations: 300,
            learning_rate: 1e-6,
            feature_dim: 8,
            noise_scale: 2.0,
            eval_questions_per_domain: 64,
            eval_interval: 1,
        }
    }
}

#[derive(Debug)]
struct DomainTable {
    spec: DomainSpec,
    vocab: Vec<String>,
    /// One prototype feature vector per vocabulary label.
    prototypes: Vec<Vec<f64>>,
}

/// Instantiated environment: normalized prevalences plus per-label feature
/// prototypes drawn once from the master seed.
#[derive(Debug)]
pub struct EnvModel {
    config: EnvironmentConfig,
    prevalence: Vec<f64>,
    domains: Vec<DomainTable>,
}

impl EnvModel {
    pub fn new(config: &EnvironmentConfig, seed: u64) -> Result<Self, EnvError> {
        if config.domains.is_empty() {
            return Err(EnvError::NoDomains);
        }
        let mut seen = std::collections::BTreeSet::new();
        for spec in &config.domains {
            if !seen.insert(&spec.id) {
                return Err(EnvError::DuplicateDomain(spec.id.clone()));
            }
            if !(spec.prevalence > 0.0) {
                return Err(EnvError::InvalidPrevalence(spec.id.clone()));
            }
            if spec.vocab_size < 2 {
                return Err(EnvError::VocabTooSmall(spec.id.clone()));
            }
            if !(0.0..=1.0).contains(&spec.difficulty) {
                return Err(EnvError::InvalidDifficulty(spec.id.clone()));
            }
            if spec.mask_height < 4 || spec.mask_width < 4 {
                return Err(EnvError::MaskTooSmall(spec.id.clone()));
            }
        }
        let total: f64 = config.domains.iter().map(|d| d.prevalence).sum();
        let prevalence = config.domains.iter().map(|d| d.prevalence / total).collect();
        let domains = config
            .domains
            .iter()
            .map(|spec| {
                let vocab: Vec<String> = (0..spec.vocab_size).map(|l| format!("l{l}")).collect();
                let prototypes = (0..spec.vocab_size)
                    .map(|l| {
                        let mut rng =
                            rng::stream(seed, &["prototype", &spec.id, &l.to_string()]);
                        (0..config.feature_dim).map(|_| rng.sample(StandardNormal)).collect()
                    })
                    .collect();
                DomainTable { spec: spec.clone(), vocab, prototypes }
            })
            .collect();
        Ok(Self { config: config.clone(), prevalence, domains })
    }

    pub fn config(&self) -> &EnvironmentConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(|d| d.spec.id.as_str())
    }

    /// The domain with the smallest configured prevalence.
    pub fn rarest_domain(&self) -> &str {
        self.domains
            .iter()
            .min_by(|a, b| a.spec.prevalence.partial_cmp(&b.spec.prevalence).unwrap())
            .map(|d| d.spec.id.as_str())
            .unwrap()
    }

    fn table(&self, domain: &str) -> &DomainTable {
        self.domains
            .iter()
            .find(|d| d.spec.id == domain)
            .unwrap_or_else(|| panic!("unknown domain {domain}"))
    }

    pub fn vocab(&self, domain: &str) -> &[String] {
        &self.table(domain).vocab
    }

    pub fn prototype(&self, domain: &str, label: usize) -> &[f64] {
        &self.table(domain).prototypes[label]
    }

    /// Canonical rectangle of a label on the domain's mask grid. Labels cycle
    /// through the four grid quadrants, nudged one cell per cycle so larger
    /// vocabularies stay distinguishable.
    pub fn label_box(&self, domain: &str, label: usize) -> BoundingBox {
        let spec = &self.table(domain).spec;
        let half_w = spec.mask_width as f64 / 2.0;
        let half_h = spec.mask_height as f64 / 2.0;
        let qx = (label % 2) as f64;
        let qy = ((label / 2) % 2) as f64;
        let nudge = ((label / 4) % 2) as f64;
        BoundingBox {
            x: qx * half_w + 1.0 + nudge,
            y: qy * half_h + 1.0,
            w: (half_w - 2.0).max(1.0),
            h: (half_h - 2.0).max(1.0),
        }
    }

    /// Gold mask for a label: its canonical rectangle rasterized.
    pub fn gold_mask(&self, domain: &str, label: usize) -> Mask {
        let spec = &self.table(domain).spec;
        let mut mask = Mask::zeros(spec.mask_height, spec.mask_width).expect("validated dims");
        mask.fill_box(&self.label_box(domain, label));
        mask
    }

    fn sample_domain_index(&self, rng: &mut impl Rng) -> usize {
        let mut target = rng.gen::<f64>();
        for (i, &p) in self.prevalence.iter().enumerate() {
            if target < p {
                return i;
            }
            target -= p;
        }
        self.prevalence.len() - 1
    }

    fn question_in(&self, table: &DomainTable, id: String, rng: &mut impl Rng) -> SyntheticQuestion {
        let label = rng.gen_range(0..table.spec.vocab_size);
        let noise_std = table.spec.difficulty * self.config.noise_scale;
        let features = table.prototypes[label]
            .iter()
            .map(|&p| p + noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut gold_labels = LabelSet::new();
        gold_labels.insert(&table.vocab[label]);
        SyntheticQuestion {
            id,
            domain: table.spec.id.clone(),
            gold_label: label,
            features,
            gold_labels,
            gold_mask: self.gold_mask(&table.spec.id, label),
        }
    }

    fn sample_question(&self, id: String, rng: &mut impl Rng) -> SyntheticQuestion {
        let domain_index = self.sample_domain_index(rng);
        self.question_in(&self.domains[domain_index], id, rng)
    }

    /// Draws a held-out question pinned to one domain (evaluation sets are
    /// stratified per domain regardless of prevalence).
    pub fn eval_question(&self, domain: &str, id: String, rng: &mut impl Rng) -> SyntheticQuestion {
        self.question_in(self.table(domain), id, rng)
    }
}

/// One synthetic prompt: features plus gold labels and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQuestion {
    pub id: String,
    pub domain: String,
    pub gold_label: usize,
    pub features: Vec<f64>,
    pub gold_labels: LabelSet,
    pub gold_mask: Mask,
}

/// Samples one iteration's questions i.i.d.: domain by prevalence, gold label
/// uniform within the domain vocabulary. Deterministic in `(seed, t)`.
pub fn generate_batch(
    env: &EnvModel,
    count: usize,
    seed: u64,
    iteration: u64,
) -> Vec<SyntheticQuestion> {
    (0..count)
        .map(|i| {
            let id = format!("t{iteration:05}-q{i:05}");
            let mut rng = rng::stream(seed, &["question", &iteration.to_string(), &i.to_string()]);
            env.sample_question(id, &mut rng)
        })
        .collect()
}

/// The three policy snapshots a rollout records log-probabilities under.
#[derive(Clone, Copy)]
pub struct PolicySet<'a> {
    pub current: &'a ToyPolicy,
    pub old: &'a ToyPolicy,
    pub reference: &'a ToyPolicy,
}

fn rollout_from_decisions(
    env: &EnvModel,
    policies: &PolicySet<'_>,
    question: &SyntheticQuestion,
    decisions: &[bool],
    id: String,
    weights: &RewardWeights,
) -> Rollout {
    let vocab = env.vocab(&question.domain);
    let mut logp_current = Vec::with_capacity(decisions.len());
    let mut logp_old = Vec::with_capacity(decisions.len());
    let mut logp_ref = Vec::with_capacity(decisions.len());
    let mut labels = LabelSet::new();
    let mut boxes = Vec::new();
    let mut boxes_per_label = BTreeMap::new();
    for (l, &decision) in decisions.iter().enumerate() {
        logp_current.push(policies.current.token_logp(&question.domain, l, &question.features, decision));
        logp_old.push(policies.old.token_logp(&question.domain, l, &question.features, decision));
        logp_ref.push(policies.reference.token_logp(&question.domain, l, &question.features, decision));
        if decision {
            labels.insert(&vocab[l]);
            boxes.push((vocab[l].clone(), env.label_box(&question.domain, l)));
            *boxes_per_label.entry(vocab[l].clone()).or_insert(0) += 1;
        }
    }
    let acc = rewards::set_f1(&labels, &question.gold_labels);
    let only_boxes: Vec<BoundingBox> = boxes.iter().map(|(_, b)| *b).collect();
    let iou = rewards::best_iou(&only_boxes, &question.gold_mask);
    let aux = rewards::format_reward(&labels, &boxes_per_label);
    let reward = rewards::combine(acc, iou, aux, weights);
    let tokens = TokenSequence::new(logp_current, logp_old, logp_ref).expect("finite logps");
    let mut rollout = Rollout::new(id, reward, tokens).expect("finite reward");
    rollout.breakdown = Some(crate::batch::RewardBreakdown { acc, iou, aux });
    rollout.prediction = Some(Prediction { labels, boxes });
    rollout
}

/// Samples the rollout group for one question. Every rollout makes one
/// Bernoulli decision per vocabulary label under the current policy; with
/// `include_greedy` an extra probe rollout takes the argmax decisions.
/// Deterministic in `(seed, question id)`.
pub fn rollout_group(
    env: &EnvModel,
    policies: &PolicySet<'_>,
    question: &SyntheticQuestion,
    group_size: usize,
    include_greedy: bool,
    weights: &RewardWeights,
    seed: u64,
) -> QuestionGroup {
    let vocab_len = env.vocab(&question.domain).len();
    let mut rng = rng::stream(seed, &["rollout", &question.id]);
    let mut rollouts = Vec::with_capacity(group_size + usize::from(include_greedy));
    for j in 0..group_size {
        let decisions: Vec<bool> = (0..vocab_len)
            .map(|l| {
                let p = policies.current.prob(&question.domain, l, &question.features);
                rng.gen::<f64>() < p
            })
            .collect();
        rollouts.push(rollout_from_decisions(
            env,
            policies,
            question,
            &decisions,
            format!("{}-r{j}", question.id),
            weights,
        ));
    }
    if include_greedy {
        let decisions: Vec<bool> = (0..vocab_len)
            .map(|l| policies.current.prob(&question.domain, l, &question.features) >= 0.5)
            .collect();
        let mut greedy = rollout_from_decisions(
            env,
            policies,
            question,
            &decisions,
            format!("{}-greedy", question.id),
            weights,
        );
        greedy.is_greedy = true;
        rollouts.push(greedy);
    }
    QuestionGroup::new(question.id.clone(), question.domain.clone(), rollouts)
        .expect("group size >= 2 by construction")
}

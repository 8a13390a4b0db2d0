//! Logistic toy policy over per-domain label vocabularies.
//!
//! A response to a question is a sequence of independent binary decisions,
//! one per vocabulary label of the question's domain; each decision is one
//! "token". The decision probability is the logistic of an affine score
//! `w_l . x + b_l`, so per-token log-probabilities are exact under the
//! current, old, and reference parameter snapshots.

use super::EnvModel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn softplus(x: f64) -> f64 {
    // stable for large |x|; never returns inf for finite input
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weights and bias for one domain's vocabulary: `weights[label][dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainHead {
    pub vocab: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Per-domain logistic policy with snapshot-friendly parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    heads: BTreeMap<String, DomainHead>,
}

impl ToyPolicy {
    /// Zero-initialized policy (every decision probability 0.5).
    pub fn zeros(env: &EnvModel) -> Self {
        let dim = env.feature_dim();
        let heads = env
            .domain_ids()
            .map(|domain| {
                let vocab = env.vocab(domain).to_vec();
                let head = DomainHead {
                    weights: vec![vec![0.0; dim]; vocab.len()],
                    bias: vec![0.0; vocab.len()],
                    vocab,
                };
                (domain.to_string(), head)
            })
            .collect();
        Self { heads }
    }

    pub fn from_heads(heads: BTreeMap<String, DomainHead>) -> Self {
        Self { heads }
    }

    pub fn head(&self, domain: &str) -> &DomainHead {
        &self.heads[domain]
    }

    pub fn head_mut(&mut self, domain: &str) -> &mut DomainHead {
        self.heads.get_mut(domain).expect("unknown domain")
    }

    pub fn heads(&self) -> impl Iterator<Item = (&String, &DomainHead)> {
        self.heads.iter()
    }

    pub fn score(&self, domain: &str, label: usize, features: &[f64]) -> f64 {
        let head = &self.heads[domain];
        head.weights[label].iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + head.bias[label]
    }

    /// Probability of deciding "label present".
    pub fn prob(&self, domain: &str, label: usize, features: &[f64]) -> f64 {
        sigmoid(self.score(domain, label, features))
    }

    /// Log-probability of the realized decision; finite and <= 0 for any
    /// finite score.
    pub fn token_logp(&self, domain: &str, label: usize, features: &[f64], decision: bool) -> f64 {
        let score = self.score(domain, label, features);
        if decision {
            -softplus(-score)
        } else {
            -softplus(score)
        }
    }

    /// One gradient-ascent step.
    pub fn ascend(&mut self, gradient: &PolicyGradient, learning_rate: f64) {
        for (domain, head) in &mut self.heads {
            let grad = &gradient.heads[domain];
            for (row, grow) in head.weights.iter_mut().zip(&grad.weights) {
                for (w, g) in row.iter_mut().zip(grow) {
                    *w += learning_rate * g;
                }
            }
            for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
                *b += learning_rate * g;
            }
        }
    }

    pub fn max_abs_param(&self) -> f64 {
        self.heads
            .values()
            .flat_map(|h| h.weights.iter().flatten().chain(h.bias.iter()))
            .fold(0.0, |acc: f64, &v| acc.max(v.abs()))
    }

    /// Flattened parameter vector in deterministic order (domains sorted,
    /// weight rows before biases).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for head in self.heads.values() {
            for row in &head.weights {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&head.bias);
        }
        out
    }

    /// Writes a flattened parameter vector back (inverse of [`flatten`]).
    pub fn set_flat(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for head in self.heads.values_mut() {
            for row in &mut head.weights {
                for w in row {
                    *w = *it.next().expect("parameter count mismatch");
                }
            }
            for b in &mut head.bias {
                *b = *it.next().expect("parameter count mismatch");
            }
        }
        assert!(it.next().is_none(), "parameter count mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.heads.values().map(|h| h.vocab.len() * (h.weights[0].len() + 1)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Gradient mirroring a [`ToyPolicy`]'s parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub heads: BTreeMap<String, HeadGradient>,
}

impl PolicyGradient {
    pub fn zeros_like(policy: &ToyPolicy) -> Self {
        let heads = policy
            .heads()
            .map(|(domain, head)| {
                (
                    domain.clone(),
                    HeadGradient {
                        weights: vec![vec![0.0; head.weights[0].len()]; head.vocab.len()],
                        bias: vec![0.0; head.vocab.len()],
                    },
                )
            })
            .collect();
        Self { heads }
    }

    /// Adds `dscore * d(score)/d(params)` for one label's affine score:
    /// `dscore * x` into the weight row and `dscore` into the bias.
    pub fn accumulate(&mut self, domain: &str, label: usize, features: &[f64], dscore: f64) {
        let head = self.heads.get_mut(domain).expect("unknown domain");
        for (w, x) in head.weights[label].iter_mut().zip(features) {
            *w += dscore * x;
        }
        head.bias[label] += dscore;
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for head in self.heads.values() {
            for row in &head.weights {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&head.bias);
        }
        out
    }
}

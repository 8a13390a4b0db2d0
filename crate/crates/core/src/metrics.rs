//! Multi-label evaluation metrics with two-level unweighted averaging.
//!
//! Per label: accuracy, precision, recall, F1 from confusion counts, with
//! zero-denominator cells scored 0. Per dataset: balanced accuracy and
//! macro-F1 as unweighted label means. Domain metrics average datasets
//! unweighted; the overall metric averages domains unweighted, so a domain
//! with one dataset counts as much as a domain with ten.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-label confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub true_negatives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.true_negatives + self.false_positives + self.false_negatives
    }

    /// Records one sample: whether the label was predicted and whether it is
    /// in the gold set.
    pub fn record(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.true_positives += 1,
            (false, false) => self.true_negatives += 1,
            (true, false) => self.false_positives += 1,
            (false, true) => self.false_negatives += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall, and F1 for one label. Precision, recall, and
/// F1 are 0 when their denominators are 0.
pub fn label_metrics(counts: &ConfusionCounts) -> LabelMetrics {
    let accuracy = ratio(counts.true_positives + counts.true_negatives, counts.total());
    let precision = ratio(counts.true_positives, counts.true_positives + counts.false_positives);
    let recall = ratio(counts.true_positives, counts.true_positives + counts.false_negatives);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    LabelMetrics { accuracy, precision, recall, f1 }
}

/// Dataset-level aggregate: unweighted means over the dataset's label set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
}

/// Balanced accuracy and macro-F1 as unweighted means over labels.
pub fn dataset_metrics(per_label: &[LabelMetrics]) -> DatasetMetrics {
    if per_label.is_empty() {
        return DatasetMetrics { balanced_accuracy: 0.0, macro_f1: 0.0 };
    }
    let n = per_label.len() as f64;
    DatasetMetrics {
        balanced_accuracy: per_label.iter().map(|m| m.accuracy).sum::<f64>() / n,
        macro_f1: per_label.iter().map(|m| m.f1).sum::<f64>() / n,
    }
}

/// One scored dataset, tagged with the domain it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub domain: String,
    pub dataset: String,
    pub metrics: DatasetMetrics,
}

/// Per-domain and overall metrics from dataset scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domains: BTreeMap<String, DatasetMetrics>,
    pub overall: DatasetMetrics,
}

/// Averages dataset metrics into domain metrics (unweighted over datasets),
/// then domain metrics into the overall metric (unweighted over domains).
pub fn domain_report(datasets: &[DatasetScore]) -> DomainReport {
    let mut grouped: BTreeMap<String, Vec<DatasetMetrics>> = BTreeMap::new();
    for score in datasets {
        grouped.entry(score.domain.clone()).or_default().push(score.metrics);
    }
    let domains: BTreeMap<String, DatasetMetrics> = grouped
        .into_iter()
        .map(|(domain, ms)| {
            let n = ms.len() as f64;
            let metrics = DatasetMetrics {
                balanced_accuracy: ms.iter().map(|m| m.balanced_accuracy).sum::<f64>() / n,
                macro_f1: ms.iter().map(|m| m.macro_f1).sum::<f64>() / n,
            };
            (domain, metrics)
        })
        .collect();
    let n = domains.len() as f64;
    let overall = if domains.is_empty() {
        DatasetMetrics { balanced_accuracy: 0.0, macro_f1: 0.0 }
    } else {
        DatasetMetrics {
            balanced_accuracy: domains.values().map(|m| m.balanced_accuracy).sum::<f64>() / n,
            macro_f1: domains.values().map(|m| m.macro_f1).sum::<f64>() / n,
        }
    };
    DomainReport { domains, overall }
}

/// Accumulates set-valued predictions against gold label sets over a fixed
/// label universe. Matching is order-independent: a label counts as predicted
/// if it is anywhere in the predicted set.
#[derive(Debug, Clone, Default)]
pub struct MultiLabelTally {
    counts: BTreeMap<String, ConfusionCounts>,
}

impl MultiLabelTally {
    pub fn new<I: IntoIterator<Item = String>>(labels: I) -> Self {
        Self { counts: labels.into_iter().map(|l| (l, ConfusionCounts::default())).collect() }
    }

    pub fn record(&mut self, predicted: &crate::rewards::LabelSet, gold: &crate::rewards::LabelSet) {
        for (label, counts) in &mut self.counts {
            counts.record(predicted.contains(label), gold.contains(label));
        }
    }

    pub fn counts(&self) -> &BTreeMap<String, ConfusionCounts> {
        &self.counts
    }

    pub fn dataset_metrics(&self) -> DatasetMetrics {
        let per_label: Vec<LabelMetrics> = self.counts.values().map(label_metrics).collect();
        dataset_metrics(&per_label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fneg: u64) -> ConfusionCounts {
        ConfusionCounts {
            true_positives: tp,
            true_negatives: tn,
            false_positives: fp,
            false_negatives: fneg,
        }
    }

    #[test]
    fn perfect_label() {
        let m = label_metrics(&counts(1, 1, 0, 0));
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn zero_denominator_guards() {
        let m = label_metrics(&counts(0, 5, 0, 5));
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn worked_label_metrics() {
        let m = label_metrics(&counts(3, 4, 1, 2));
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_means() {
        let a = LabelMetrics { accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 0.9 };
        let b = LabelMetrics { accuracy: 0.5, precision: 0.0, recall: 0.0, f1: 0.6 };
        let c = LabelMetrics { accuracy: 0.75, precision: 0.0, recall: 0.0, f1: 0.0 };
        let m = dataset_metrics(&[a, b]);
        assert!((m.balanced_accuracy - 0.75).abs() < 1e-12);
        let m3 = dataset_metrics(&[a, b, c]);
        assert!((m3.macro_f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn domain_report_two_level_averaging() {
        // Domain X has 3 datasets, domain Y has 1: each domain still weighs
        // 1/2 in the overall metric.
        let ds = |domain: &str, dataset: &str, f1: f64| DatasetScore {
            domain: domain.into(),
            dataset: dataset.into(),
            metrics: DatasetMetrics { balanced_accuracy: f1, macro_f1: f1 },
        };
        let report = domain_report(&[
            ds("x", "a", 0.2),
            ds("x", "b", 0.2),
            ds("x", "c", 0.2),
            ds("y", "d", 0.4),
        ]);
        assert!((report.domains["x"].macro_f1 - 0.2).abs() < 1e-12);
        assert!((report.domains["y"].macro_f1 - 0.4).abs() < 1e-12);
        assert!((report.overall.macro_f1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_dataset_passthrough() {
        let score = DatasetScore {
            domain: "x".into(),
            dataset: "a".into(),
            metrics: DatasetMetrics { balanced_accuracy: 0.7, macro_f1: 0.55 },
        };
        let report = domain_report(&[score.clone()]);
        assert_eq!(report.domains["x"], score.metrics);
        assert_eq!(report.overall, score.metrics);
    }

    #[test]
    fn tally_is_order_independent() {
        let mut tally = MultiLabelTally::new(["a".to_string(), "b".to_string()]);
        let pred: crate::rewards::LabelSet = ["b", "a"].iter().collect();
        let gold: crate::rewards::LabelSet = ["a", "b"].iter().collect();
        tally.record(&pred, &gold);
        let m = tally.dataset_metrics();
        assert_eq!(m.balanced_accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }
}

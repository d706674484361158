//! Confusion-matrix based evaluation: per-class precision/recall/F1,
//! macro F1, and cross-fold aggregation with mean ± population standard
//! deviation.

use crate::error::{Error, Result};

/// Rows are true classes, columns are predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.count(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, pred)).sum()
    }
}

/// Builds a confusion matrix from aligned prediction/truth sequences.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions vs {} truths", pred.len(), truth.len()),
        ));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Config(format!(
                "class index out of range: truth {t}, pred {p}, classes {classes}"
            )));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Cross-fold spread, present on aggregated reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSpread {
    pub per_class_std: Vec<ClassMetrics>,
    pub macro_f1_std: f64,
    /// Macro F1 of each constituent fold, in input order.
    pub fold_macro_f1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean of per-class F1 (macro averaging).
    pub macro_f1: f64,
    pub sample_count: u64,
    pub spread: Option<ReportSpread>,
}

/// Precision/recall/F1 per class plus macro F1. Degenerate 0/0 ratios are
/// defined as 0, so a vanished class penalizes instead of inflating.
pub fn prf1(cm: &ConfusionMatrix) -> MetricsReport {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(cm.classes());
    for c in 0..cm.classes() {
        let tp = cm.count(c, c);
        let precision = ratio(tp, cm.col_sum(c));
        let recall = ratio(tp, cm.row_sum(c));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
        });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len().max(1) as f64;
    MetricsReport {
        per_class,
        macro_f1,
        sample_count: cm.total(),
        spread: None,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Population standard deviation: the k folds are the whole population
    // of rotations, not a sample from one.
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates per-fold reports into means with population standard
/// deviations per metric.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let Some(first) = reports.first() else {
        return Err(Error::Config("cannot aggregate an empty report list".into()));
    };
    let classes = first.per_class.len();
    if reports.iter().any(|r| r.per_class.len() != classes) {
        return Err(Error::Config("reports disagree on the class set".into()));
    }

    let mut per_class = Vec::with_capacity(classes);
    let mut per_class_std = Vec::with_capacity(classes);
    for c in 0..classes {
        let collect = |f: fn(&ClassMetrics) -> f64| -> Vec<f64> {
            reports.iter().map(|r| f(&r.per_class[c])).collect()
        };
        let (p_mean, p_std) = mean_std(&collect(|m| m.precision));
        let (r_mean, r_std) = mean_std(&collect(|m| m.recall));
        let (f_mean, f_std) = mean_std(&collect(|m| m.f1));
        per_class.push(ClassMetrics {
            precision: p_mean,
            recall: r_mean,
            f1: f_mean,
        });
        per_class_std.push(ClassMetrics {
            precision: p_std,
            recall: r_std,
            f1: f_std,
        });
    }
    let fold_macro_f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let (macro_mean, macro_std) = mean_std(&fold_macro_f1);
    Ok(MetricsReport {
        per_class,
        macro_f1: macro_mean,
        sample_count: reports.iter().map(|r| r.sample_count).sum(),
        spread: Some(ReportSpread {
            per_class_std,
            macro_f1_std: macro_std,
            fold_macro_f1,
        }),
    })
}

impl MetricsReport {
    /// Tab-separated table: one row per class plus a macro row. Aggregated
    /// reports add std columns. The header names the averaging convention.
    pub fn to_tsv(&self, class_names: Option<&[&str]>) -> String {
        let name_of = |c: usize| -> String {
            class_names
                .and_then(|n| n.get(c).map(|s| s.to_string()))
                .unwrap_or_else(|| format!("class{c}"))
        };
        let mut out = String::new();
        match &self.spread {
            None => {
                out.push_str("class\tprecision\trecall\tf1\n");
                for (c, m) in self.per_class.iter().enumerate() {
                    out.push_str(&format!(
                        "{}\t{:.4}\t{:.4}\t{:.4}\n",
                        name_of(c),
                        m.precision,
                        m.recall,
                        m.f1
                    ));
                }
                out.push_str(&format!("macro_f1\t\t\t{:.4}\n", self.macro_f1));
            }
            Some(spread) => {
                out.push_str(
                    "class\tprecision_mean\tprecision_std\trecall_mean\trecall_std\tf1_mean\tf1_std\n",
                );
                for (c, (m, s)) in self.per_class.iter().zip(&spread.per_class_std).enumerate() {
                    out.push_str(&format!(
                        "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                        name_of(c),
                        m.precision,
                        s.precision,
                        m.recall,
                        s.recall,
                        m.f1,
                        s.f1
                    ));
                }
                out.push_str(&format!(
                    "macro_f1\t\t\t\t\t{:.4}\t{:.4}\n",
                    self.macro_f1, spread.macro_f1_std
                ));
                out.push_str("# macro = unweighted class mean; std = population over folds\n");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_all_ones() {
        let pred = [0usize, 1, 2, 3, 4, 5, 6];
        let cm = confusion(&pred, &pred, 7).unwrap();
        let report = prf1(&cm);
        for m in &report.per_class {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.sample_count, 7);
    }

    #[test]
    fn empty_input_gives_zero_matrix() {
        let cm = confusion(&[], &[], 7).unwrap();
        assert_eq!(cm.total(), 0);
        let report = prf1(&cm);
        assert_eq!(report.macro_f1, 0.0);
    }

    #[test]
    fn single_sample_lands_in_one_cell() {
        let cm = confusion(&[5], &[2], 7).unwrap();
        assert_eq!(cm.count(2, 5), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn out_of_range_index_rejected() {
        assert!(confusion(&[7], &[0], 7).is_err());
        assert!(confusion(&[0], &[9], 7).is_err());
        assert!(confusion(&[0, 1], &[0], 7).is_err());
    }

    #[test]
    fn two_thirds_case_evaluates_the_definitions() {
        // Class 0: TP = 2, FP = 1, FN = 1 → P = R = F1 = 2/3.
        let truth = [0, 0, 0, 1, 1];
        let pred = [0, 0, 1, 0, 1];
        let cm = confusion(&pred, &truth, 2).unwrap();
        let report = prf1(&cm);
        let m = report.per_class[0];
        let expect = 2.0 / 3.0;
        assert!((m.precision - expect).abs() < 1e-15);
        assert!((m.recall - expect).abs() < 1e-15);
        assert!((m.f1 - expect).abs() < 1e-15);
    }

    #[test]
    fn absent_class_resolves_to_zero() {
        // Class 2 never appears in truth or prediction.
        let truth = [0, 1, 0];
        let pred = [0, 1, 1];
        let cm = confusion(&pred, &truth, 3).unwrap();
        let report = prf1(&cm);
        let m = report.per_class[2];
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn row_and_column_sums_match_truth_and_prediction_counts() {
        let truth = [0, 0, 1, 2, 2, 2, 1];
        let pred = [0, 1, 1, 2, 0, 2, 1];
        let cm = confusion(&pred, &truth, 3).unwrap();
        for c in 0..3 {
            assert_eq!(cm.row_sum(c) as usize, truth.iter().filter(|&&t| t == c).count());
            assert_eq!(cm.col_sum(c) as usize, pred.iter().filter(|&&p| p == c).count());
        }
    }

    #[test]
    fn macro_f1_invariant_under_relabeling() {
        let truth = [0usize, 0, 1, 2, 2, 1, 0, 2];
        let pred = [0usize, 1, 1, 2, 0, 1, 0, 2];
        let cm = confusion(&pred, &truth, 3).unwrap();
        let base = prf1(&cm).macro_f1;

        let relabel = |xs: &[usize]| -> Vec<usize> { xs.iter().map(|&x| (x + 1) % 3).collect() };
        let cm2 = confusion(&relabel(&pred), &relabel(&truth), 3).unwrap();
        assert!((prf1(&cm2).macro_f1 - base).abs() < 1e-15);
    }

    #[test]
    fn single_report_aggregates_with_zero_std() {
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let report = prf1(&cm);
        let agg = aggregate_folds(&[report.clone()]).unwrap();
        assert_eq!(agg.macro_f1, report.macro_f1);
        let spread = agg.spread.unwrap();
        assert_eq!(spread.macro_f1_std, 0.0);
        assert!(spread.per_class_std.iter().all(|m| m.f1 == 0.0));
    }

    #[test]
    fn two_reports_average_cleanly() {
        let mk = |f1: f64| MetricsReport {
            per_class: vec![ClassMetrics { precision: f1, recall: f1, f1 }],
            macro_f1: f1,
            sample_count: 10,
            spread: None,
        };
        let agg = aggregate_folds(&[mk(0.6), mk(0.8)]).unwrap();
        assert!((agg.macro_f1 - 0.7).abs() < 1e-15);
        let spread = agg.spread.unwrap();
        assert!((spread.macro_f1_std - 0.1).abs() < 1e-15);
    }

    #[test]
    fn five_report_aggregate_matches_two_pass_oracle() {
        let f1s = [0.62, 0.71, 0.68, 0.74, 0.66];
        let reports: Vec<MetricsReport> = f1s
            .iter()
            .map(|&f1| MetricsReport {
                per_class: vec![ClassMetrics { precision: f1, recall: f1, f1 }],
                macro_f1: f1,
                sample_count: 100,
                spread: None,
            })
            .collect();
        let agg = aggregate_folds(&reports).unwrap();

        // Independent two-pass mean/std.
        let mean = f1s.iter().sum::<f64>() / 5.0;
        let std = (f1s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0).sqrt();
        assert!((agg.macro_f1 - mean).abs() < 1e-12);
        assert!((agg.spread.as_ref().unwrap().macro_f1_std - std).abs() < 1e-12);
    }

    #[test]
    fn aggregation_rejects_empty_and_mismatched() {
        assert!(aggregate_folds(&[]).is_err());
        let a = MetricsReport {
            per_class: vec![ClassMetrics::default(); 2],
            macro_f1: 0.0,
            sample_count: 0,
            spread: None,
        };
        let b = MetricsReport {
            per_class: vec![ClassMetrics::default(); 3],
            macro_f1: 0.0,
            sample_count: 0,
            spread: None,
        };
        assert!(aggregate_folds(&[a, b]).is_err());
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        use rand::Rng;
        let mut rng = crate::stream::derive(3, "metrics-prop", &[]);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
            let report = prf1(&confusion(&pred, &truth, 7).unwrap());
            for m in &report.per_class {
                assert!((0.0..=1.0).contains(&m.precision));
                assert!((0.0..=1.0).contains(&m.recall));
                assert!((0.0..=1.0).contains(&m.f1));
            }
            assert!((0.0..=1.0).contains(&report.macro_f1));
            let expected_macro =
                report.per_class.iter().map(|m| m.f1).sum::<f64>() / report.per_class.len() as f64;
            assert!((report.macro_f1 - expected_macro).abs() < 1e-15);
        }
    }
}

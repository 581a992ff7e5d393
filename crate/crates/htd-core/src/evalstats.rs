//! Classifier evaluation statistics: confusion matrix, the four headline
//! metrics, chi-square significance, and comparative tables.
//!
//! Rendered confusion matrices use the `[[TP, FP], [FN, TN]]` layout (rows
//! are predictions, columns are actual classes) with a legend, and the
//! positive class is AI-generated text. Zero-denominator metrics are
//! reported as 0 with an explicit `undefined` flag rather than NaN so JSON
//! consumers never see non-numbers.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("confusion matrix has no observations")]
    EmptyMatrix,
    #[error("need at least two categories, got {0}")]
    TooFewCategories(usize),
    #[error("expected count at index {0} is not positive")]
    NonPositiveExpected(usize),
    #[error("degrees of freedom must be positive")]
    ZeroDf,
    #[error("degenerate marginals: a row or column sum is zero")]
    DegenerateMarginals,
}

/// 2x2 confusion counts. The positive class is AI-generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    #[serde(rename = "tp")]
    pub true_positive: u64,
    #[serde(rename = "fp")]
    pub false_positive: u64,
    #[serde(rename = "fn")]
    pub false_negative: u64,
    #[serde(rename = "tn")]
    pub true_negative: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fne: u64, tn: u64) -> Self {
        Self {
            true_positive: tp,
            false_positive: fp,
            false_negative: fne,
            true_negative: tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }
}

/// Tallies predictions against labels (`true` = positive = AI).
pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut m = ConfusionMatrix::new(0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => m.true_positive += 1,
            (true, false) => m.false_positive += 1,
            (false, true) => m.false_negative += 1,
            (false, false) => m.true_negative += 1,
        }
    }
    Ok(m)
}

/// Accuracy, precision, recall, and F1 in `[0,1]`. Metrics whose
/// denominator was zero appear in `undefined` and are reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(rename = "undefined")]
    pub undefined_flags: BTreeSet<String>,
}

pub fn metrics(m: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = m.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut undefined_flags = BTreeSet::new();
    let mut fraction = |num: u64, den: u64, name: &str| -> f64 {
        if den == 0 {
            undefined_flags.insert(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = fraction(m.true_positive + m.true_negative, total, "accuracy");
    let precision = fraction(
        m.true_positive,
        m.true_positive + m.false_positive,
        "precision",
    );
    let recall = fraction(
        m.true_positive,
        m.true_positive + m.false_negative,
        "recall",
    );
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined_flags.insert("f1".to_string());
        0.0
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        undefined_flags,
    })
}

/// Chi-square statistic with its p-value (upper tail at `df` degrees of
/// freedom).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    #[serde(rename = "df")]
    pub degrees_of_freedom: usize,
    #[serde(rename = "p")]
    pub p_value: f64,
}

/// `sum (O - E)^2 / E` with the p-value from the regularized upper
/// incomplete gamma function `Q(df/2, x/2)`.
pub fn chi_square(
    observed: &[f64],
    expected: &[f64],
    df: usize,
) -> Result<ChiSquareResult, EvalError> {
    if observed.len() != expected.len() {
        return Err(EvalError::LengthMismatch {
            left: observed.len(),
            right: expected.len(),
        });
    }
    if observed.len() < 2 {
        return Err(EvalError::TooFewCategories(observed.len()));
    }
    if let Some(i) = expected.iter().position(|&e| e <= 0.0) {
        return Err(EvalError::NonPositiveExpected(i));
    }
    if df == 0 {
        return Err(EvalError::ZeroDf);
    }
    let statistic: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o - e) * (o - e) / e)
        .sum();
    let p_value = regularized_gamma_q(df as f64 / 2.0, statistic / 2.0);
    Ok(ChiSquareResult {
        statistic,
        degrees_of_freedom: df,
        p_value,
    })
}

/// Chi-square test of independence over the 2x2 confusion table: expected
/// counts come from the marginals, df = 1.
pub fn independence_test(m: &ConfusionMatrix) -> Result<ChiSquareResult, EvalError> {
    let (tp, fp) = (m.true_positive as f64, m.false_positive as f64);
    let (fne, tn) = (m.false_negative as f64, m.true_negative as f64);
    let total = tp + fp + fne + tn;
    let rows = [tp + fp, fne + tn];
    let cols = [tp + fne, fp + tn];
    if total == 0.0 || rows.contains(&0.0) || cols.contains(&0.0) {
        return Err(EvalError::DegenerateMarginals);
    }
    let observed = [tp, fp, fne, tn];
    let expected = [
        rows[0] * cols[0] / total,
        rows[0] * cols[1] / total,
        rows[1] * cols[0] / total,
        rows[1] * cols[1] / total,
    ];
    chi_square(&observed, &expected, 1)
}

/// One row of the comparative table.
#[derive(Debug, Clone)]
pub struct ReportEntry {
    pub name: String,
    pub accuracy: f64,
    pub f1: f64,
}

/// Renders entries sorted by accuracy descending (stable on ties), with
/// percentages to one decimal.
pub fn comparative_report(entries: &[ReportEntry]) -> String {
    let mut sorted: Vec<&ReportEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .expect("accuracy must not be NaN")
    });
    let name_width = sorted
        .iter()
        .map(|e| e.name.chars().count())
        .max()
        .unwrap_or(0)
        .max("model".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<name_width$}  accuracy      f1", "model");
    for e in sorted {
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>7.1}%  {:>5.1}%",
            e.name,
            e.accuracy * 100.0,
            e.f1 * 100.0
        );
    }
    out
}

/// Everything one evaluation produces. The text rendering and the JSON
/// serialization read the same fields; neither recomputes anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// `None` when the marginals are degenerate (the test is undefined).
    pub chi_square: Option<ChiSquareResult>,
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let c = &self.confusion;
        let m = &self.metrics;
        let mut out = String::new();
        let _ = writeln!(out, "confusion matrix (positive class: ai-generated)");
        let _ = writeln!(out, "                 actual +    actual -");
        let _ = writeln!(
            out,
            "  predicted +  {:>10}  {:>10}",
            c.true_positive, c.false_positive
        );
        let _ = writeln!(
            out,
            "  predicted -  {:>10}  {:>10}",
            c.false_negative, c.true_negative
        );
        let _ = writeln!(out, "  layout: [[TP, FP], [FN, TN]]");
        let _ = writeln!(out);
        let _ = writeln!(out, "metrics");
        let _ = writeln!(out, "  accuracy   {:.6}", m.accuracy);
        let _ = writeln!(out, "  precision  {:.6}", m.precision);
        let _ = writeln!(out, "  recall     {:.6}", m.recall);
        let _ = writeln!(out, "  f1         {:.6}", m.f1);
        if !m.undefined_flags.is_empty() {
            let flags: Vec<&str> = m.undefined_flags.iter().map(String::as_str).collect();
            let _ = writeln!(out, "  undefined: {}", flags.join(", "));
        }
        let _ = writeln!(out);
        match &self.chi_square {
            Some(x) => {
                let _ = writeln!(
                    out,
                    "chi-square independence: statistic {:.6}, df {}, p {:.6}",
                    x.statistic, x.degrees_of_freedom, x.p_value
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "chi-square independence: unavailable (degenerate marginals)"
                );
            }
        }
        out
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = Gamma(a,x)/Gamma(a)`,
/// series expansion below `a + 1`, continued fraction above. Absolute error
/// stays under 1e-8 across the chi-square range used here.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma Q needs a > 0");
    if x <= 0.0 {
        return 1.0;
    }
    let q = if x < a + 1.0 {
        1.0 - lower_gamma_series(a, x)
    } else {
        upper_gamma_cf(a, x)
    };
    q.clamp(0.0, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    const COF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

const GAMMA_ITMAX: usize = 500;
const GAMMA_EPS: f64 = 1e-15;

fn lower_gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..GAMMA_ITMAX {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn upper_gamma_cf(a: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_ITMAX {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_covers_all_four_cases() {
        let m = confusion(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert_eq!(m, ConfusionMatrix::new(1, 1, 1, 1));
    }

    #[test]
    fn perfect_classifier_has_empty_off_diagonal() {
        let m = confusion(&[true, false], &[true, false]).unwrap();
        assert_eq!(m, ConfusionMatrix::new(1, 0, 0, 1));
    }

    #[test]
    fn confusion_input_errors() {
        assert_eq!(
            confusion(&[true; 3], &[false; 4]),
            Err(EvalError::LengthMismatch { left: 3, right: 4 })
        );
        assert_eq!(confusion(&[], &[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn headline_matrix_metrics() {
        let m = ConfusionMatrix::new(1850, 150, 140, 1620);
        let r = metrics(&m).unwrap();
        assert!((r.accuracy - 0.922872).abs() < 1e-6);
        assert!((r.precision - 0.925000).abs() < 1e-6);
        assert!((r.recall - 0.929648).abs() < 1e-6);
        assert!((r.f1 - 0.927319).abs() < 1e-6);
        assert!(r.undefined_flags.is_empty());
    }

    #[test]
    fn all_correct_matrix_scores_one_everywhere() {
        let r = metrics(&ConfusionMatrix::new(5, 0, 0, 5)).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn zero_denominators_flag_instead_of_nan() {
        let r = metrics(&ConfusionMatrix::new(0, 0, 3, 4)).unwrap();
        assert_eq!(r.precision, 0.0);
        assert!(r.undefined_flags.contains("precision"));
        assert!(r.undefined_flags.contains("f1"));
        assert!(r.f1 == 0.0 && !r.f1.is_nan());

        assert_eq!(
            metrics(&ConfusionMatrix::new(0, 0, 0, 0)),
            Err(EvalError::EmptyMatrix)
        );
    }

    #[test]
    fn chi_square_worked_example() {
        let r = chi_square(&[50.0, 50.0], &[45.0, 55.0], 1).unwrap();
        assert!((r.statistic - 1.010101).abs() < 1e-6);
    }

    #[test]
    fn chi_square_null_case() {
        let r = chi_square(&[10.0, 20.0, 30.0], &[10.0, 20.0, 30.0], 2).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn p_value_matches_critical_points() {
        // Textbook critical values for df = 1.
        let p = regularized_gamma_q(0.5, 3.841 / 2.0);
        assert!((p - 0.0500).abs() < 0.001, "p = {p}");
        let p = regularized_gamma_q(0.5, 6.635 / 2.0);
        assert!((p - 0.0100).abs() < 0.001, "p = {p}");
        // df = 2: exact closed form exp(-x/2).
        let p = regularized_gamma_q(1.0, 2.3);
        assert!((p - (-2.3f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn chi_square_input_errors() {
        assert_eq!(
            chi_square(&[1.0, 2.0], &[1.0], 1),
            Err(EvalError::LengthMismatch { left: 2, right: 1 })
        );
        assert_eq!(
            chi_square(&[1.0], &[1.0], 1),
            Err(EvalError::TooFewCategories(1))
        );
        assert_eq!(
            chi_square(&[1.0, 2.0], &[1.0, 0.0], 1),
            Err(EvalError::NonPositiveExpected(1))
        );
        assert_eq!(
            chi_square(&[1.0, 2.0], &[1.0, 2.0], 0),
            Err(EvalError::ZeroDf)
        );
    }

    #[test]
    fn independence_on_headline_matrix_is_significant() {
        let r = independence_test(&ConfusionMatrix::new(1850, 150, 140, 1620)).unwrap();
        assert!(r.statistic > 3.841, "statistic {}", r.statistic);
        assert!(r.p_value < 0.05, "p {}", r.p_value);
        assert_eq!(r.degrees_of_freedom, 1);
    }

    #[test]
    fn independence_on_uniform_table_is_null() {
        let r = independence_test(&ConfusionMatrix::new(10, 10, 10, 10)).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn independence_rejects_degenerate_marginals() {
        // Nobody was actually positive: first column is all zero.
        assert_eq!(
            independence_test(&ConfusionMatrix::new(0, 5, 0, 5)),
            Err(EvalError::DegenerateMarginals)
        );
    }

    #[test]
    fn comparative_table_sorts_by_accuracy() {
        let entries = vec![
            ReportEntry {
                name: "Jones and Lee".into(),
                accuracy: 0.885,
                f1: 0.893,
            },
            ReportEntry {
                name: "Ours".into(),
                accuracy: 0.925,
                f1: 0.921,
            },
            ReportEntry {
                name: "Smith et al.".into(),
                accuracy: 0.897,
                f1: 0.902,
            },
        ];
        let table = comparative_report(&entries);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[1].starts_with("Ours") && lines[1].contains("92.5%") && lines[1].contains("92.1%"));
        assert!(lines[2].starts_with("Smith et al.") && lines[2].contains("89.7%"));
        assert!(lines[3].starts_with("Jones and Lee") && lines[3].contains("88.5%"));
    }

    #[test]
    fn comparative_table_tie_keeps_input_order() {
        let entries = vec![
            ReportEntry {
                name: "first".into(),
                accuracy: 0.9,
                f1: 0.8,
            },
            ReportEntry {
                name: "second".into(),
                accuracy: 0.9,
                f1: 0.9,
            },
        ];
        let table = comparative_report(&entries);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("first"));
        assert!(lines[2].starts_with("second"));
    }

    #[test]
    fn report_text_renders_the_same_numbers_as_the_struct() {
        let confusion = ConfusionMatrix::new(1850, 150, 140, 1620);
        let report = EvalReport {
            metrics: metrics(&confusion).unwrap(),
            chi_square: Some(independence_test(&confusion).unwrap()),
            confusion,
        };
        let text = report.render_text();
        assert!(text.contains("0.922872"));
        assert!(text.contains("0.925000"));
        assert!(text.contains("0.929648"));
        // f1 = 3700/3990 = 0.92731829..., so six decimals end in ...18.
        assert!(text.contains("0.927318"));
        assert!(text.contains("[[TP, FP], [FN, TN]]"));
        assert!(text.contains("1850"));

        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["confusion"]["tp"], 1850);
        assert_eq!(json["chi_square"]["df"], 1);
        assert!(json["metrics"]["undefined"].as_array().unwrap().is_empty());

        let no_chi = EvalReport {
            chi_square: None,
            ..report.clone()
        };
        assert!(no_chi.render_text().contains("unavailable"));
        let json = serde_json::to_value(&no_chi).unwrap();
        assert!(json["chi_square"].is_null());
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(tp in 0u64..500, fp in 0u64..500, fne in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fp + fne + tn > 0);
            let r = metrics(&ConfusionMatrix::new(tp, fp, fne, tn)).unwrap();
            for v in [r.accuracy, r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !r.undefined_flags.contains("precision")
                && !r.undefined_flags.contains("recall")
                && r.precision > 0.0
                && r.recall > 0.0
            {
                prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
                prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
            }
            let total = (tp + fp + fne + tn) as f64;
            prop_assert!((r.accuracy * total - (tp + tn) as f64).abs() < 1e-6);
        }

        #[test]
        fn chi_square_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..100.0, 0.1f64..100.0), 2..8),
            swap_a in 0usize..8, swap_b in 0usize..8,
        ) {
            let observed: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let expected: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let base = chi_square(&observed, &expected, 1).unwrap();
            let (a, b) = (swap_a % pairs.len(), swap_b % pairs.len());
            let mut o2 = observed.clone();
            let mut e2 = expected.clone();
            o2.swap(a, b);
            e2.swap(a, b);
            let swapped = chi_square(&o2, &e2, 1).unwrap();
            prop_assert!((base.statistic - swapped.statistic).abs() < 1e-9);
        }

        #[test]
        fn p_value_decreases_in_statistic(df in 1usize..6, lo in 0.01f64..20.0, delta in 0.01f64..10.0) {
            let p_lo = regularized_gamma_q(df as f64 / 2.0, lo / 2.0);
            let p_hi = regularized_gamma_q(df as f64 / 2.0, (lo + delta) / 2.0);
            prop_assert!(p_hi < p_lo);
        }
    }
}

//! Confusion-matrix metrics, hold-out evaluation and the results table.
//!
//! Precision, recall and F1 are computed per class one-vs-rest and then
//! macro-averaged (unweighted mean over classes). A ratio whose denominator
//! is zero is reported as 0 and flagged rather than propagated as NaN.

use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::{argmax_rows, Classifier};
use crate::datakit::{load_tensors, LabeledDataset, PreprocessSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column order of the results table.
pub const REPORT_HEADER: [&str; 11] = [
    "model",
    "dataset",
    "train_loss",
    "val_loss",
    "test_loss",
    "train_acc",
    "val_acc",
    "test_acc",
    "precision",
    "recall",
    "f1",
];

/// `C x C` counts, rows indexed by true class and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::InvalidArgument(format!(
                "{} true labels but {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for l in [truth, pred] {
            if l >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Counts as one vector per true class.
    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        (0..self.classes).map(|c| self.row(c).to_vec()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true class is this one.
    pub support: u64,
    /// Some ratio had a zero denominator and was set to 0.
    pub zero_division: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub zero_division: bool,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let c = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let predicted: u64 = (0..c).map(|t| cm.get(t, k)).sum();
            let support: u64 = cm.row(k).iter().sum();
            let mut flag = false;
            let precision = ratio(tp, predicted as f64, &mut flag);
            let recall = ratio(tp, support as f64, &mut flag);
            let f1 = ratio(2.0 * precision * recall, precision + recall, &mut flag);
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
                zero_division: flag,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        zero_division: per_class.iter().any(|m| m.zero_division),
        per_class,
    })
}

/// Held-out predictions of one classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutEvaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Mean cross-entropy of the true class.
    pub test_loss: f64,
    pub predictions: Vec<usize>,
}

/// Smallest probability used inside the log when scoring predictions.
const MIN_PROB: f64 = 1e-12;

/// Scores `model` on preprocessed `images` with true classes `labels`.
pub fn evaluate_tensors<S: Scalar>(
    model: &Classifier<S>,
    images: &[crate::numeric::Tensor<S>],
    labels: &[usize],
) -> Result<HoldoutEvaluation> {
    if images.is_empty() {
        return Err(Error::Dataset("hold-out set is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let k = model.num_classes();
    let probs = model.predict(images)?;
    let predictions = argmax_rows(&probs)?;
    let confusion = ConfusionMatrix::from_labels(labels, &predictions, k)?;
    let nll: f64 = probs
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| -row[l].to_f64_lossy().max(MIN_PROB).ln())
        .sum();
    Ok(HoldoutEvaluation {
        metrics: metrics(&confusion)?,
        confusion,
        test_loss: nll / labels.len() as f64,
        predictions,
    })
}

/// Loads every item of `holdout` with `spec` and scores `model` on it.
pub fn evaluate_holdout<S: Scalar>(
    model: &Classifier<S>,
    holdout: &LabeledDataset,
    spec: &PreprocessSpec,
) -> Result<HoldoutEvaluation> {
    if holdout.is_empty() {
        return Err(Error::Dataset("hold-out set is empty".into()));
    }
    if holdout.classes().len() != model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "hold-out set has {} classes, classifier {}",
            holdout.classes().len(),
            model.num_classes()
        )));
    }
    let images = load_tensors(holdout, spec)?;
    evaluate_tensors(model, &images, &holdout.labels())
}

/// One line of the results table. Accuracies and metrics are fractions in
/// `[0, 1]`; accuracies are printed as percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ReportRow {
    pub fn fields(&self) -> [String; 11] {
        [
            self.model.clone(),
            self.dataset.clone(),
            format!("{:.4}", self.train_loss),
            format!("{:.4}", self.val_loss),
            format!("{:.4}", self.test_loss),
            format!("{:.2}", 100.0 * self.train_acc),
            format!("{:.2}", 100.0 * self.val_acc),
            format!("{:.2}", 100.0 * self.test_acc),
            format!("{:.2}", self.precision),
            format!("{:.2}", self.recall),
            format!("{:.2}", self.f1),
        ]
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let text = report_csv(rows)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Plain-text per-class breakdown written next to the table.
pub fn per_class_text(classes: &[String], eval: &HoldoutEvaluation) -> String {
    let m = &eval.metrics;
    let mut s = String::new();
    let _ = writeln!(s, "precision, recall and f1 in the table are macro averages over classes");
    let _ = writeln!(s, "accuracy {:.4}", m.accuracy);
    let _ = writeln!(s, "test_loss {:.4}", eval.test_loss);
    let _ = writeln!(s, "class precision recall f1 support zero_division");
    for (name, c) in classes.iter().zip(&m.per_class) {
        let _ = writeln!(
            s,
            "{name} {:.4} {:.4} {:.4} {} {}",
            c.precision, c.recall, c.f1, c.support, c.zero_division
        );
    }
    let _ = writeln!(s, "confusion (rows true, columns predicted)");
    for row in eval.confusion.to_rows() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matrix() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.to_rows(), vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn identity_is_diagonal_and_perfect() {
        let y = [0, 1, 2, 2, 1, 0, 3];
        let cm = ConfusionMatrix::from_labels(&y, &y, 4).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
        let m = metrics(&cm).unwrap();
        assert_eq!((m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!m.zero_division);
    }

    #[test]
    fn out_of_range_and_empty() {
        assert!(matches!(
            ConfusionMatrix::from_labels(&[0, 2], &[0, 1], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(ConfusionMatrix::from_labels(&[0], &[0, 1], 2).is_err());
        assert!(metrics(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn absent_class_is_flagged() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1], &[0, 0, 0], 3).unwrap();
        let m = metrics(&cm).unwrap();
        assert!(m.zero_division);
        assert_eq!(m.per_class[2].precision, 0.0);
        assert_eq!(m.per_class[2].f1, 0.0);
        assert!(m.macro_f1.is_finite());
    }

    fn fixture() -> ReportRow {
        ReportRow {
            model: "ResNet50".into(),
            dataset: "Covid".into(),
            train_loss: 0.0083,
            val_loss: 0.0320,
            test_loss: 1.8761,
            train_acc: 0.9986,
            val_acc: 0.9955,
            test_acc: 0.7824,
            precision: 0.77,
            recall: 0.77,
            f1: 0.77,
        }
    }

    #[test]
    fn published_row_formats_identically() {
        let csv = report_csv(&[fixture()]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model,dataset,train_loss,val_loss,test_loss,train_acc,val_acc,test_acc,precision,recall,f1"
        );
        assert_eq!(
            lines.next().unwrap(),
            "ResNet50,Covid,0.0083,0.0320,1.8761,99.86,99.55,78.24,0.77,0.77,0.77"
        );
        assert!(lines.next().is_none());
    }

    #[test]
    fn report_rows_and_reemission() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![fixture(), ReportRow { dataset: "ALL".into(), ..fixture() }];
        let p = dir.path().join("r/report.csv");
        emit_report(&rows, &p).unwrap();
        let a = std::fs::read(&p).unwrap();
        emit_report(&rows, &p).unwrap();
        assert_eq!(a, std::fs::read(&p).unwrap());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
        assert!(emit_report(&[], &p).is_err());
    }
}

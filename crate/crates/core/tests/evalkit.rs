use diffsynth_core::evalkit::{metrics, report_csv, ConfusionMatrix, ReportRow, REPORT_HEADER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts and ratios straight from the label lists, without a matrix.
struct Brute {
    counts: Vec<Vec<u64>>,
    accuracy: f64,
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
}

fn brute(truth: &[usize], pred: &[usize], classes: usize) -> Brute {
    let mut counts = vec![vec![0u64; classes]; classes];
    for (t, row) in counts.iter_mut().enumerate() {
        for (p, cell) in row.iter_mut().enumerate() {
            *cell = truth.iter().zip(pred).filter(|&(&a, &b)| a == t && b == p).count() as u64;
        }
    }
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let safe = |n: f64, d: f64| if d == 0.0 { 0.0 } else { n / d };
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    for k in 0..classes {
        let tp = truth.iter().zip(pred).filter(|&(&a, &b)| a == k && b == k).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&a, &b)| a != k && b == k).count() as f64;
        let fneg = truth.iter().zip(pred).filter(|&(&a, &b)| a == k && b != k).count() as f64;
        let p = safe(tp, tp + fp);
        let r = safe(tp, tp + fneg);
        precision.push(p);
        recall.push(r);
        f1.push(safe(2.0 * p * r, p + r));
    }
    Brute {
        counts,
        accuracy: correct as f64 / truth.len() as f64,
        precision,
        recall,
        f1,
    }
}

#[test]
fn metrics_match_brute_force_on_random_label_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(1..=60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let cm = ConfusionMatrix::from_labels(&truth, &pred, classes).unwrap();
        let m = metrics(&cm).unwrap();
        let b = brute(&truth, &pred, classes);
        assert_eq!(cm.to_rows(), b.counts);
        assert_eq!(m.accuracy, b.accuracy);
        for k in 0..classes {
            assert_eq!(m.per_class[k].precision, b.precision[k]);
            assert_eq!(m.per_class[k].recall, b.recall[k]);
            assert_eq!(m.per_class[k].f1, b.f1[k]);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert_eq!(m.macro_precision, mean(&b.precision));
        assert_eq!(m.macro_recall, mean(&b.recall));
        assert_eq!(m.macro_f1, mean(&b.f1));
    }
}

#[test]
fn worked_binary_example() {
    // TP 3, FN 2, FP 1, TN 4 with class 1 as positive
    let truth = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
    let pred = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0];
    let m = metrics(&ConfusionMatrix::from_labels(&truth, &pred, 2).unwrap()).unwrap();
    let pos = m.per_class[1];
    assert_eq!(pos.precision, 0.75);
    assert_eq!(pos.recall, 0.6);
    assert!((pos.f1 - 0.6667).abs() < 5e-5);
    assert_eq!(m.accuracy, 0.7);
}

#[test]
fn report_has_the_column_schema() {
    let row = ReportRow {
        model: "residual".into(),
        dataset: "toy".into(),
        train_loss: 0.01,
        val_loss: 0.02,
        test_loss: 0.3,
        train_acc: 1.0,
        val_acc: 0.99,
        test_acc: 0.9,
        precision: 0.9,
        recall: 0.9,
        f1: 0.9,
    };
    let text = report_csv(&[row]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), REPORT_HEADER.join(","));
    assert_eq!(lines.next().unwrap(), "residual,toy,0.0100,0.0200,0.3000,100.00,99.00,90.00,0.90,0.90,0.90");
    assert!(lines.next().is_none());
}

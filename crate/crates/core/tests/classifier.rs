use diffsynth_core::classifier::*;
use diffsynth_core::datakit::{channel_stats, load_tensors, make_toy_corpus, Normalization, PreprocessSpec};
use diffsynth_core::numeric::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(per_class: usize) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_toy_corpus(&["disk", "square", "cross"], per_class, 16, 5, dir.path()).unwrap();
    let (mean, std) = channel_stats(&ds, 16, 16, 1).unwrap();
    let spec = PreprocessSpec {
        width: 16,
        height: 16,
        channels: 1,
        normalization: Normalization::Standardize { mean, std },
    };
    (load_tensors(&ds, &spec).unwrap(), ds.labels())
}

fn config(max_epochs: usize) -> ClassifierConfig {
    ClassifierConfig {
        family: Family::Residual,
        depth: Depth::Tiny,
        image_size: 16,
        num_classes: 3,
        batch_size: 16,
        max_epochs,
        patience: 3,
        ..ClassifierConfig::default()
    }
}

#[test]
fn learns_the_toy_shapes() {
    let (images, labels) = toy(60);
    let data = Examples::new(&images, &labels).unwrap();
    let (train, val): (Vec<usize>, Vec<usize>) = (0..images.len()).partition(|i| i % 4 != 0);
    let cfg = ClassifierConfig {
        patience: 5,
        ..config(30)
    };
    let model = Classifier::<f32>::build(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let run = train_classifier(&model, data, &train, &val, 2).unwrap();
    assert!(run.best().val_acc >= 0.9, "val acc {}", run.best().val_acc);
    assert!(run.history[0].train_loss > run.best().train_loss);
}

#[test]
fn predictions_are_distributions_and_follow_their_inputs() {
    let (images, _) = toy(8);
    let model = Classifier::<f32>::build(config(1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let probs = model.predict(&images).unwrap();
    for row in probs.data().chunks(3) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    let mut perm: Vec<usize> = (0..images.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let shuffled: Vec<Tensor<f32>> = perm.iter().map(|&i| images[i].clone()).collect();
    let permuted = model.predict(&shuffled).unwrap();
    for (row, &src) in permuted.data().chunks(3).zip(&perm) {
        let want = &probs.data()[src * 3..src * 3 + 3];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn cross_validation_is_deterministic_and_folds_are_independent() {
    let (images, labels) = toy(10);
    let data = Examples::new(&images, &labels).unwrap();
    let cfg = config(3);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| cross_validate(&cfg, data, 5, 11).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.folds.len(), 5);
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        assert_eq!(fa.train_idx, fb.train_idx);
        assert_eq!(fa.val_idx, fb.val_idx);
        assert_eq!(fa.run.history, fb.run.history);
        assert_eq!(fa.run.params, fb.run.params);
    }
    assert_eq!(a.aggregate, b.aggregate);
    let mut seen: Vec<usize> = a.folds.iter().flat_map(|f| f.val_idx.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..images.len()).collect::<Vec<_>>());
    for f in &a.folds {
        assert!(f.train_idx.iter().all(|i| !f.val_idx.contains(i)));
    }
}

use diffsynth_core::datakit::{preprocess, to_image, PreprocessSpec};
use diffsynth_core::lime::{apply_mask, channel_means, explain, segment_grid, LimeConfig};
use diffsynth_core::numeric::Tensor;
use diffsynth_core::Result;
use image::{DynamicImage, GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A 16x16 image whose 4x4 cells each hold one random level, so every
/// segment is distinguishable from the mean fill.
fn blocky(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let levels: Vec<f64> = (0..16).map(|_| rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::from_fn(vec![1, 16, 16], |i| {
        let (y, x) = (i / 16 % 16, i % 16);
        levels[(y / 4) * 4 + x / 4]
    })
}

#[test]
fn linear_black_box_coefficients_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = blocky(&mut rng);
    let seg = segment_grid(16, 16, 4).unwrap();
    let fill = channel_means(&image)[0];
    let truth: Vec<f64> = (0..seg.count()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let bias = 0.3;
    // f(img) = bias + sum_s truth_s * indicator_s, written as a linear map
    // of one pixel per segment
    let coeff: Vec<(usize, f64)> = (0..seg.count())
        .map(|s| {
            let pixel = (s / 4) * 4 * 16 + (s % 4) * 4;
            (pixel, truth[s] / (image.data()[pixel] - fill))
        })
        .collect();
    let offset: f64 = bias - coeff.iter().map(|&(_, c)| c * fill).sum::<f64>();
    let predict = |batch: &[Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
        Ok(batch
            .iter()
            .map(|img| vec![offset + coeff.iter().map(|&(p, c)| c * img.data()[p]).sum::<f64>()])
            .collect())
    };
    let cfg = LimeConfig {
        cell: Some(4),
        samples: 400,
        kernel_width: None,
        ridge: 1e-6,
        seed: 3,
    };
    let expl = explain(predict, &image, &seg, Some(0), &cfg).unwrap();
    for (got, want) in expl.weights.iter().zip(&truth) {
        assert!((got - want).abs() < 1e-3, "weight {got} vs {want}");
    }
    assert!((expl.intercept - bias).abs() < 1e-3);
    assert!(expl.r2 > 0.999_999);
}

#[test]
fn all_on_mask_reproduces_the_image_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gray = GrayImage::from_fn(32, 32, |_, _| Luma([rng.random::<u8>()]));
    let original = DynamicImage::ImageLuma8(gray.clone());
    let tensor = preprocess::<f32>(&original, &PreprocessSpec::dm(32, 1)).unwrap();
    let seg = segment_grid(32, 32, 4).unwrap();
    let fill = channel_means(&tensor);
    let kept = apply_mask(&tensor, &seg, &vec![true; seg.count()], &fill).unwrap();
    let back = to_image(&kept).unwrap().to_luma8();
    assert_eq!(back.as_raw(), gray.as_raw());
}

#[test]
fn explanation_is_deterministic_in_the_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = blocky(&mut rng);
    let seg = segment_grid(16, 16, 4).unwrap();
    let predict = |batch: &[Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
        Ok(batch.iter().map(|img| {
            let s = img.data()[0].tanh();
            vec![s, 1.0 - s]
        }).collect())
    };
    let cfg = LimeConfig {
        cell: Some(4),
        samples: 100,
        kernel_width: None,
        ridge: 1e-3,
        seed: 8,
    };
    let a = explain(predict, &image, &seg, None, &cfg).unwrap();
    let b = explain(predict, &image, &seg, None, &cfg).unwrap();
    assert_eq!(a, b);
}

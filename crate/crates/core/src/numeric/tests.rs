use std::collections::HashMap;

use indexmap::IndexMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_1x1_convolution_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::<f64>::randn(vec![1, 1, 5, 7], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let w = tape.constant(t64(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, w, None, ConvOpts::default()).unwrap();
    assert_eq!(tape.value(y), &img);
}

#[test]
fn matmul_small_example() {
    let mut tape = Tape::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    assert_eq!(tape.value(c).shape(), &[2, 1]);
}

#[test]
fn relu_example() {
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn square_gradient_is_six_at_three() {
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::scalar(3.0f64));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward_scalar(y).unwrap();
    assert_eq!(g.get("x").unwrap().item(), 6.0);
}

#[test]
fn product_gradient() {
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::scalar(2.0f64));
    let y = tape.input("y", Tensor::scalar(5.0f64));
    let z = tape.mul(x, y).unwrap();
    let g = tape.backward_scalar(z).unwrap();
    assert_eq!(g.get("x").unwrap().item(), 5.0);
    assert_eq!(g.get("y").unwrap().item(), 2.0);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::scalar(2.0f64));
    let _unused = tape.input("u", t64(&[2], &[1.0, 1.0]));
    let y = tape.scale(x, 4.0).unwrap();
    let g = tape.backward_scalar(y).unwrap();
    assert_eq!(g.get("u").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn seed_shape_must_match_output() {
    let mut tape = Tape::new();
    let x = tape.input("x", t64(&[2], &[1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y, Tensor::scalar(1.0)), Err(Error::Shape { .. })));
}

#[test]
fn conv_shape_mismatch_is_reported() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(vec![4, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, ConvOpts::same(3)), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[1], &[f64::MAX]));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
}

#[test]
fn forward_eval_composes_and_replays() {
    let mut inputs = HashMap::new();
    inputs.insert("a".to_owned(), t64(&[1, 2], &[1.0, -2.0]));
    inputs.insert("w".to_owned(), t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let (out, tape, id) = forward_eval(&inputs, |tape, ids| {
        let y = tape.matmul(ids["a"], ids["w"])?;
        tape.relu(y)
    })
    .unwrap();
    assert_eq!(out.data(), &[1.0, 0.0]);
    let g = tape.backward(id, t64(&[1, 2], &[1.0, 1.0])).unwrap();
    assert_eq!(g.get("a").unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln2() {
    let mut tape = Tape::new();
    let l = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
    let ce = tape.cross_entropy(l, &[0]).unwrap();
    assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cross_entropy_survives_confident_logits() {
    let mut tape = Tape::new();
    let l = tape.constant(t64(&[1, 2], &[1000.0, 0.0]));
    let ce = tape.cross_entropy(l, &[0]).unwrap();
    assert!(tape.value(ce).item().abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let l = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
    assert!(matches!(tape.cross_entropy(l, &[2]), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = Tensor::<f64>::randn(vec![4, 3], &mut rng);
    let labels = [0, 2, 1, 2];
    let mut tape = Tape::new();
    let l = tape.input("l", logits.clone());
    let ce = tape.cross_entropy(l, &labels).unwrap();
    let g = tape.backward_scalar(ce).unwrap();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * 3..r * 3 + 3];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (c, v) in row.iter().enumerate() {
            let expected = (v.exp() / z - if c == label { 1.0 } else { 0.0 }) / 4.0;
            assert!((g.get("l").unwrap().data()[r * 3 + c] - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn param_registration_is_shared_by_name() {
    let mut tape = Tape::new();
    let p = Tensor::scalar(3.0f64);
    let a = tape.param("w", &p);
    let b = tape.param("w", &p);
    assert_eq!(a, b);
    let y = tape.add(a, b).unwrap();
    assert_eq!(tape.backward_scalar(y).unwrap().get("w").unwrap().item(), 2.0);
}

fn scalar_store(theta: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert("theta", Tensor::scalar(theta));
    p
}

fn scalar_grads(g: f64) -> IndexMap<String, Tensor<f64>> {
    let mut m = IndexMap::new();
    m.insert("theta".to_owned(), Tensor::scalar(g));
    m
}

#[test]
fn adamw_single_step_hand_computed() {
    // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25; update = 0.1 * (0.5 / (0.5 + 1e-8) + 0.01)
    let cfg = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut params = scalar_store(1.0);
    let mut opt = AdamW::new(cfg, &params).unwrap();
    opt.step(&mut params, &scalar_grads(0.5)).unwrap();
    let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01);
    let got = params.get("theta").unwrap().item();
    assert!((got - expected).abs() < 1e-15);
    assert!((got - 0.899).abs() < 1e-6);
    assert_eq!(opt.steps_taken(), 1);
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut params = scalar_store(0.7);
    let mut opt = AdamW::new(cfg, &params).unwrap();
    for _ in 0..5 {
        opt.step(&mut params, &scalar_grads(0.0)).unwrap();
    }
    assert_eq!(params.get("theta").unwrap().item(), 0.7);
}

#[test]
fn adamw_rejects_non_finite_gradient_without_mutating() {
    let mut params = scalar_store(1.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
    assert!(matches!(
        opt.step(&mut params, &scalar_grads(f64::NAN)),
        Err(Error::NonFinite { op: "adamw_step" })
    ));
    assert_eq!(params.get("theta").unwrap().item(), 1.0);
    assert_eq!(opt.steps_taken(), 0);
    assert_eq!(opt.first_moment().get("theta").unwrap().item(), 0.0);
}

#[test]
fn adamw_config_validation() {
    let bad = AdamWConfig {
        beta1: 1.0,
        ..AdamWConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = AdamWConfig {
        weight_decay: -0.1,
        ..AdamWConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn checkpoint_round_trip_preserves_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    store.insert("conv.weight", Tensor::randn(vec![2, 1, 3, 3], &mut rng));
    store.insert("conv.bias", Tensor::randn(vec![2], &mut rng));
    store
        .save(dir.path(), &[("image_size".into(), "32".into())])
        .unwrap();
    let (back, meta) = ParamStore::<f32>::load(dir.path()).unwrap();
    assert_eq!(back, store);
    assert_eq!(meta["image_size"], "32");
    assert_eq!(meta["pipeline_version"], PIPELINE_VERSION);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("tensor conv.weight f32 2,1,3,3 0000.f32"));
    let raw = std::fs::read(dir.path().join("0001.f32")).unwrap();
    assert_eq!(raw.len(), 8);
    assert_eq!(f32::from_le_bytes(raw[..4].try_into().unwrap()), store.get("conv.bias").unwrap().data()[0]);
}

#[test]
fn group_norm_helper_picks_divisor() {
    assert_eq!(GroupNorm::new("g", 24, 8).groups, 8);
    assert_eq!(GroupNorm::new("g", 12, 8).groups, 6);
    assert_eq!(GroupNorm::new("g", 4, 8).groups, 4);
    assert_eq!(GroupNorm::new("g", 7, 8).groups, 7);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals.clone()).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let ce = tape.cross_entropy(x, &[0, 1, 3]).unwrap();
        prop_assert!(tape.value(ce).item() >= 0.0);
    }

    #[test]
    fn adamw_zero_lr_leaves_parameters(theta in -10.0f64..10.0, g in -10.0f64..10.0, wd in 0.0f64..1.0) {
        let cfg = AdamWConfig { lr: 0.0, weight_decay: wd, ..AdamWConfig::default() };
        let mut params = scalar_store(theta);
        let mut opt = AdamW::new(cfg, &params).unwrap();
        opt.step(&mut params, &scalar_grads(g)).unwrap();
        prop_assert_eq!(params.get("theta").unwrap().item(), theta);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::randn(vec![2, 3, 6, 6], &mut rng);
        let w = Tensor::<f32>::randn(vec![4, 3, 3, 3], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.constant(w.clone());
            let y = tape.conv2d(xi, wi, None, ConvOpts::same(3)).unwrap();
            let y = tape.silu(y).unwrap();
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn im2col_matches_direct_indexing() {
    use super::kernels::{col2im, im2col, ConvGeom};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w, k, stride, pad) in [(5, 7, 3, 1, 1), (6, 6, 3, 2, 1), (7, 5, 2, 2, 0), (4, 4, 1, 1, 0), (5, 5, 3, 3, 2)] {
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        let g = ConvGeom { channels: 2, height: h, width: w, kernel_h: k, kernel_w: k, stride, padding: pad, out_h, out_w };
        let img = Tensor::<f64>::randn(vec![2 * h * w], &mut rng);
        let mut col = vec![f64::NAN; g.col_rows() * g.col_cols()];
        im2col(img.data(), &g, &mut Vec::new(), &mut col);
        let at = |c: usize, y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                img.data()[c * h * w + y as usize * w + x as usize]
            }
        };
        let cols = g.col_cols();
        for c in 0..2 {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            assert_eq!(col[row * cols + oy * out_w + ox], at(c, y, x));
                        }
                    }
                }
            }
        }
        // adjoint: <im2col(x), y> == <x, col2im(y)>
        let y = Tensor::<f64>::randn(vec![col.len()], &mut rng);
        let mut back = vec![0.0; 2 * h * w];
        col2im(y.data(), &g, &mut back);
        let lhs: f64 = col.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (cin, cout, groups, k, stride, pad) in [(4, 6, 1, 3, 1, 1), (4, 6, 2, 3, 2, 1), (3, 3, 3, 3, 1, 1), (2, 4, 1, 2, 1, 0), (2, 2, 1, 3, 1, 2)] {
        let (h, w) = (7, 6);
        let x = Tensor::<f64>::randn(vec![2, cin, h, w], &mut rng);
        let wt = Tensor::<f64>::randn(vec![cout, cin / groups, k, k], &mut rng);
        let b = Tensor::<f64>::randn(vec![cout], &mut rng);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xi, wi, Some(bi), ConvOpts { stride, padding: pad, groups }).unwrap();
        let y = tape.value(y);
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        assert_eq!(y.shape(), &[2, cout, oh, ow]);
        let (cin_g, cout_g) = (cin / groups, cout / groups);
        for s in 0..2 {
            for co in 0..cout {
                let gi = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for cl in 0..cin_g {
                            let ci = gi * cin_g + cl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((co * cin_g + cl) * k + ky) * k + kx]
                                        * x.data()[((s * cin + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = y.data()[((s * cout + co) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }
}

//! Finite-difference checks of every tape primitive and of a small
//! end-to-end denoiser. Each entry reports the worst relative error over its
//! trials next to its tolerance, so callers decide how to report failure.

#![allow(dead_code)]

use diffsynth_core::denoiser::{DenoiserConfig, DenoiserModel};
use diffsynth_core::numeric::{ConvOpts, Gradients, NodeId, ParamStore, PoolOpts, Tape, Tensor};
use diffsynth_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{away_from_zero, check_gradients, distinct, uniform};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Precision-dependent step and tolerance.
pub fn settings<S: Scalar>() -> (f64, f64) {
    if S::DTYPE == "f64" {
        (1e-5, 1e-5)
    } else {
        (1e-2, 1e-3)
    }
}

pub const TRIALS: u64 = 10;

fn small_dims(rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(3..=6), rng.random_range(3..=6))
}

/// Folds per-trial errors into one entry per primitive.
#[derive(Default)]
struct Collector {
    checks: Vec<Check>,
}

impl Collector {
    fn add(&mut self, name: &str, err: f64, tol: f64) {
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => c.max_rel_err = c.max_rel_err.max(err),
            None => self.checks.push(Check {
                name: name.to_owned(),
                max_rel_err: err,
                tol,
            }),
        }
    }
}

pub fn conv<S: Scalar>() -> Vec<Check> {
    let (h, tol) = settings::<S>();
    let mut out = Collector::default();
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (n, _, hh, ww) = small_dims(&mut rng);
        let groups = if trial % 3 == 0 { 2 } else { 1 };
        let cin = groups * rng.random_range(1..=2);
        let cout = groups * rng.random_range(1..=2);
        let k = if trial % 2 == 0 { 3 } else { 1 };
        let opts = ConvOpts {
            stride: 1 + (trial as usize % 2),
            padding: if k == 3 { (trial as usize) % 2 } else { 0 },
            groups,
        };
        let x = uniform::<S>(&[n, cin, hh.max(k), ww.max(k)], &mut rng);
        let w = uniform::<S>(&[cout, cin / groups, k, k], &mut rng);
        let b = uniform::<S>(&[cout], &mut rng);
        let r = check_gradients(
            &[("x", x), ("w", w), ("b", b)],
            |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), opts),
            h,
            usize::MAX,
            trial,
        );
        out.add("conv2d", r.max_rel_err, tol);
    }
    out.checks
}

/// The 3x3 same-padded convolution on an 8x8 input at 64-bit.
pub fn conv3x3_on_8x8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform::<f64>(&[1, 2, 8, 8], &mut rng);
    let w = uniform::<f64>(&[3, 2, 3, 3], &mut rng);
    let b = uniform::<f64>(&[3], &mut rng);
    let r = check_gradients(
        &[("x", x), ("w", w), ("b", b)],
        |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), ConvOpts::same(3)),
        1e-5,
        usize::MAX,
        0,
    );
    Check {
        name: "conv3x3 8x8".into(),
        max_rel_err: r.max_rel_err,
        tol: 1e-5,
    }
}

pub fn elementwise<S: Scalar>() -> Vec<Check> {
    let (h, tol) = settings::<S>();
    let mut out = Collector::default();
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let (n, c, hh, ww) = small_dims(&mut rng);
        let shape = [n, c, hh, ww];
        let a = away_from_zero::<S>(&shape, 0.1, &mut rng);
        let b = uniform::<S>(&shape, &mut rng);
        let one = |f: fn(&mut Tape<S>, NodeId) -> diffsynth_core::Result<NodeId>| {
            check_gradients(&[("a", a.clone())], |t, i| f(t, i[0]), h, usize::MAX, trial).max_rel_err
        };
        out.add("relu", one(|t, x| t.relu(x)), tol);
        out.add("silu", one(|t, x| t.silu(x)), tol);
        out.add("scale", one(|t, x| t.scale(x, S::from_f64_lossy(-1.5))), tol);
        let pair = [("a", a.clone()), ("b", b.clone())];
        out.add("add", check_gradients(&pair, |t, i| t.add(i[0], i[1]), h, usize::MAX, trial).max_rel_err, tol);
        out.add("mul", check_gradients(&pair, |t, i| t.mul(i[0], i[1]), h, usize::MAX, trial).max_rel_err, tol);
    }
    out.checks
}

pub fn structural<S: Scalar>() -> Vec<Check> {
    let (h, tol) = settings::<S>();
    let mut out = Collector::default();
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let (n, c, hh, ww) = small_dims(&mut rng);
        let x = uniform::<S>(&[n, c, hh, ww], &mut rng);
        let y = uniform::<S>(&[n, c + 1, hh, ww], &mut rng);
        let v = uniform::<S>(&[n, c], &mut rng);
        let single = [("x", x.clone())];
        out.add(
            "upsample_nearest",
            check_gradients(&single, |t, i| t.upsample_nearest(i[0], 2), h, usize::MAX, trial).max_rel_err,
            tol,
        );
        out.add(
            "global_avg_pool",
            check_gradients(&single, |t, i| t.global_avg_pool(i[0]), h, usize::MAX, trial).max_rel_err,
            tol,
        );
        out.add("flatten", check_gradients(&single, |t, i| t.flatten(i[0]), h, usize::MAX, trial).max_rel_err, tol);
        out.add(
            "concat",
            check_gradients(&[("x", x.clone()), ("y", y)], |t, i| t.concat(&[i[0], i[1]]), h, usize::MAX, trial).max_rel_err,
            tol,
        );
        out.add(
            "add_channel_bias",
            check_gradients(&[("x", x), ("v", v)], |t, i| t.add_channel_bias(i[0], i[1]), h, usize::MAX, trial).max_rel_err,
            tol,
        );
        let xp = distinct::<S>(&[n, c, hh + 1, ww + 1], 0.05, &mut rng);
        let opts = PoolOpts {
            kernel: 2 + (trial as usize % 2),
            stride: 1 + (trial as usize % 2),
            padding: trial as usize % 2,
        };
        out.add(
            "max_pool2d",
            check_gradients(&[("x", xp)], |t, i| t.max_pool2d(i[0], opts), h / 10.0, usize::MAX, trial).max_rel_err,
            tol,
        );
    }
    out.checks
}

pub fn norm_and_dense<S: Scalar>() -> Vec<Check> {
    let (h, tol) = settings::<S>();
    let mut out = Collector::default();
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
        let groups = 1 + (trial as usize % 3);
        let c = groups * rng.random_range(1..=2);
        let (n, _, hh, ww) = small_dims(&mut rng);
        let x = uniform::<S>(&[n, c, hh, ww], &mut rng);
        let gamma = uniform::<S>(&[c], &mut rng);
        let beta = uniform::<S>(&[c], &mut rng);
        let err = check_gradients(
            &[("x", x), ("gamma", gamma), ("beta", beta)],
            |t, i| t.group_norm(i[0], i[1], i[2], groups),
            h,
            usize::MAX,
            trial,
        )
        .max_rel_err;
        out.add("group_norm", err, tol);

        let (m, k, nn) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
        let a = uniform::<S>(&[m, k], &mut rng);
        let b = uniform::<S>(&[k, nn], &mut rng);
        let bias = uniform::<S>(&[nn], &mut rng);
        let err = check_gradients(
            &[("a", a), ("b", b), ("bias", bias)],
            |t, i| {
                let y = t.matmul(i[0], i[1])?;
                t.add_row_bias(y, i[2])
            },
            h,
            usize::MAX,
            trial,
        )
        .max_rel_err;
        out.add("matmul + row bias", err, tol);

        let logits = uniform::<S>(&[m, k + 1], &mut rng).scale(S::from_f64_lossy(3.0));
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..=k)).collect();
        let err = check_gradients(&[("l", logits.clone())], |t, i| t.softmax(i[0]), h, usize::MAX, trial).max_rel_err;
        out.add("softmax", err, tol);
        let err = check_gradients(&[("l", logits)], |t, i| t.cross_entropy(i[0], &labels), h, usize::MAX, trial).max_rel_err;
        out.add("cross_entropy", err, tol);

        let p = uniform::<S>(&[m, nn], &mut rng);
        let q = uniform::<S>(&[m, nn], &mut rng);
        let err = check_gradients(&[("p", p), ("q", q)], |t, i| t.mse_loss(i[0], i[1]), h, usize::MAX, trial).max_rel_err;
        out.add("mse_loss", err, tol);

        let table = uniform::<S>(&[4, nn], &mut rng);
        let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..4)).collect();
        let err = check_gradients(&[("table", table)], |t, i| t.gather_rows(i[0], &ids), h, usize::MAX, trial).max_rel_err;
        out.add("gather_rows", err, tol);
    }
    out.checks
}

/// Every primitive at precision `S`.
pub fn primitives<S: Scalar>() -> Vec<Check> {
    let mut all = conv::<S>();
    all.extend(elementwise::<S>());
    all.extend(structural::<S>());
    all.extend(norm_and_dense::<S>());
    all
}

pub fn tiny_denoiser_config(classes: usize) -> DenoiserConfig {
    DenoiserConfig {
        image_size: 16,
        in_channels: 1,
        base_channels: 4,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        time_embed_dim: 8,
        num_classes: classes,
        norm_groups: 2,
    }
}

fn cast<A: Scalar, B: Scalar>(t: &Tensor<A>) -> Tensor<B> {
    Tensor::from_fn(t.shape().to_vec(), |i| B::from_f64_lossy(t.data()[i].to_f64_lossy()))
}

/// Noise-prediction MSE of `model` under `params` on a fixed batch, with
/// the gradients of every parameter and of the input when `backward`.
fn denoiser_loss<S: Scalar>(
    model: &DenoiserModel<S>,
    params: &ParamStore<S>,
    x: &Tensor<S>,
    target: &Tensor<S>,
    backward: bool,
) -> (f64, Option<Gradients<S>>) {
    let mut tape = Tape::new();
    let xi = tape.input("x", x.clone());
    let pred = model.forward_with(&mut tape, params, xi, &[3, 17], Some(&[0, 2])).expect("forward");
    let tgt = tape.constant(target.clone());
    let l = tape.mse_loss(pred, tgt).expect("loss");
    let value = tape.value(l).data()[0].to_f64_lossy();
    (value, backward.then(|| tape.backward_scalar(l).expect("backward")))
}

/// Gradient of the noise-prediction MSE of a small conditional denoiser at
/// precision `S`, with respect to its parameters and its input, against
/// 64-bit central differences of the loss at the same (S-representable)
/// point, on `coords` sampled coordinates per tensor.
pub fn end_to_end_denoiser<S: Scalar>(coords: usize) -> Check {
    let (_, tol) = settings::<S>();
    let (h, _) = settings::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = tiny_denoiser_config(3);
    let reference = DenoiserModel::<f64>::build(cfg.clone(), &mut rng).expect("tiny denoiser builds");
    // a fresh model zeroes its output layer; randomize every tensor so the
    // whole network carries gradient
    let mut params = reference.params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_owned()).collect();
    let round = |v: f64| S::from_f64_lossy(v).to_f64_lossy();
    for name in &names {
        for v in params.get_mut(name).expect("listed parameter").data_mut() {
            *v = round(rng.random_range(-0.5..0.5));
        }
    }
    let x = uniform::<f64>(&[2, 1, 16, 16], &mut rng).map(round);
    let target = uniform::<f64>(&[2, 1, 16, 16], &mut rng).map(round);

    let mut low = ParamStore::<S>::new();
    for (name, t) in params.iter() {
        low.insert(name, cast(t));
    }
    let model = DenoiserModel::<S>::from_params(cfg, low.clone()).expect("same architecture");
    let (_, grads) = denoiser_loss(&model, &low, &cast(&x), &cast(&target), true);
    let grads = grads.expect("gradients requested");

    let mut worst: f64 = 0.0;
    let mut tensors: Vec<(String, bool)> = names.iter().map(|n| (n.clone(), true)).collect();
    tensors.push(("x".into(), false));
    for (name, is_param) in tensors {
        let analytic = grads.get(&name).expect("gradient for every tensor").clone();
        let len = analytic.len();
        let picks: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, coords).into_vec()
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in picks {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut xx = x.clone();
                let slot = if is_param {
                    &mut p.get_mut(&name).expect("listed parameter").data_mut()[j]
                } else {
                    &mut xx.data_mut()[j]
                };
                *slot += delta;
                denoiser_loss(&reference, &p, &xx, &target, false).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[j].to_f64_lossy();
            diff2 += (a - fd) * (a - fd);
            a2 += a * a;
            n2 += fd * fd;
        }
        let denom = f64::sqrt(a2).max(f64::sqrt(n2)).max(1e-10);
        worst = worst.max(f64::sqrt(diff2) / denom);
    }
    Check {
        name: format!("end-to-end denoiser {}", S::DTYPE),
        max_rel_err: worst,
        tol,
    }
}

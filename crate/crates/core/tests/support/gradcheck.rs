//! Central finite-difference oracle for tape adjoints.
//!
//! Independent of the backward pass: it only re-runs the forward program on
//! perturbed copies of the inputs.

#![allow(dead_code)]

use diffsynth_core::numeric::{NodeId, Tape, Tensor};
use diffsynth_core::{Result, Scalar};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    /// Largest relative error over all checked inputs.
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

type Program<'a, S> = dyn Fn(&mut Tape<S>, &[NodeId]) -> Result<NodeId> + 'a;

fn projected<S: Scalar>(
    inputs: &[(String, Tensor<S>)],
    build: &Program<'_, S>,
    weights: &Tensor<S>,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|(n, t)| tape.input(n, t.clone())).collect();
    let out = build(&mut tape, &ids).expect("forward");
    tape.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&o, &w)| o.to_f64_lossy() * w.to_f64_lossy())
        .sum()
}

/// Compares the adjoint of `<build(inputs), r>` for a random `r` with
/// central differences of step `h`, on at most `max_coords` coordinates per
/// input. Relative error is `|a - n| / max(|a|, |n|, floor)` over the
/// checked coordinate vector of each input.
pub fn check_gradients<S: Scalar>(
    inputs: &[(&str, Tensor<S>)],
    build: impl Fn(&mut Tape<S>, &[NodeId]) -> Result<NodeId>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheck {
    let inputs: Vec<(String, Tensor<S>)> = inputs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|(n, t)| tape.input(n, t.clone())).collect();
    let out = build(&mut tape, &ids).expect("forward");
    let weights = Tensor::from_fn(tape.value(out).shape().to_vec(), |_| S::from_f64_lossy(rng.random_range(-1.0..1.0)));
    let grads = tape.backward(out, weights.clone()).expect("backward");

    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0;
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(name).expect("gradient for every input");
        let coords: Vec<usize> = if t.len() <= max_coords {
            (0..t.len()).collect()
        } else {
            let mut c = sample(&mut rng, t.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &j in &coords {
            let mut plus = inputs.clone();
            plus[k].1.data_mut()[j] += S::from_f64_lossy(h);
            let mut minus = inputs.clone();
            minus[k].1.data_mut()[j] -= S::from_f64_lossy(h);
            let fd = (projected(&plus, &build, &weights) - projected(&minus, &build, &weights)) / (2.0 * h);
            let a = analytic.data()[j].to_f64_lossy();
            diff2 += (a - fd) * (a - fd);
            a2 += a * a;
            n2 += fd * fd;
        }
        coords_checked += coords.len();
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-10);
        max_rel_err = max_rel_err.max(diff2.sqrt() / denom);
    }
    GradCheck {
        max_rel_err,
        coords_checked,
    }
}

/// Uniform entries in `[-1, 1)` kept at least `gap` away from zero, so
/// kinked primitives are differentiable at every coordinate tested.
pub fn away_from_zero<S: Scalar>(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(gap..1.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        S::from_f64_lossy(sign * mag)
    })
}

pub fn uniform<S: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| S::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

/// Distinct values with gaps of at least `gap` (shuffled), for max pooling.
pub fn distinct<S: Scalar>(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<S> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v.into_iter().map(S::from_f64_lossy).collect()).unwrap()
}

//! Variance schedule and the closed-form forward (noising) process.
//!
//! Timesteps are 1-indexed everywhere in the public API: `t` ranges over
//! `1..=T`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
        }
    }
}

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{s<=t} alpha_s`,
/// stored in double precision regardless of the model scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` at `t = 1` to `beta_end`
    /// at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            kind: ScheduleKind::Linear,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`; `alpha_bar_0 = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Entries for a checkpoint manifest.
    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("schedule_kind".into(), self.kind.as_str().into()),
            ("timesteps".into(), self.steps().to_string()),
            ("beta_start".into(), format!("{:e}", self.beta_start)),
            ("beta_end".into(), format!("{:e}", self.beta_end)),
        ]
    }

    /// One Markov noising step, `sqrt(1 - beta_t) x + sqrt(beta_t) z`, with
    /// the noise `z` supplied by the caller.
    pub fn forward_step_with_noise<S: Scalar>(&self, x_prev: &Tensor<S>, t: usize, z: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        let keep = S::from_f64_lossy((1.0 - self.beta(t)).sqrt());
        let noise = S::from_f64_lossy(self.beta(t).sqrt());
        x_prev.zip_map(z, |x, z| keep * x + noise * z)
    }

    /// One Markov noising step with standard-normal noise.
    pub fn forward_step_sample<S: Scalar, R: Rng + ?Sized>(
        &self,
        x_prev: &Tensor<S>,
        t: usize,
        rng: &mut R,
    ) -> Result<Tensor<S>> {
        self.check_t(t)?;
        let z = Tensor::randn(x_prev.shape().to_vec(), rng);
        self.forward_step_with_noise(x_prev, t, &z)
    }

    /// Closed-form marginal sample `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample<S: Scalar>(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::shape(
                "q_sample",
                format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
            ));
        }
        let ab = self.alpha_bar(t);
        let signal = S::from_f64_lossy(ab.sqrt());
        let noise = S::from_f64_lossy((1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| signal * x + noise * e)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn two_step_arithmetic() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha(1) - 0.9).abs() < 1e-15 && (s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn full_scale_terminal_alpha_bar() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // direct product in a fresh loop
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!((prod - 4.0e-5).abs() < 0.1e-5, "alpha_bar_T = {prod}");
    }

    #[test]
    fn invalid_bounds() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn timestep_range_is_one_indexed() {
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 2, 2]);
        assert!(matches!(s.q_sample(&x, 0, &x), Err(Error::TimestepOutOfRange { t: 0, max: 5 })));
        assert!(s.q_sample(&x, 6, &x).is_err());
        assert!(s.q_sample(&x, 5, &x).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.forward_step_sample(&x, 0, &mut rng).is_err());
    }

    #[test]
    fn zero_noise_step_scales_input() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let x = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let y = s.forward_step_with_noise(&x, 2, &Tensor::zeros(vec![3])).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 0.8f64.sqrt() * b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_step_variance_from_zero() {
        let s = NoiseSchedule::linear(4, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::zeros(vec![10_000]);
        let y = s.forward_step_sample(&x, 3, &mut rng).unwrap();
        let mean = y.sum() / 10_000.0;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9_999.0;
        assert!((var / s.beta(3) - 1.0).abs() < 0.05, "var {var} vs beta {}", s.beta(3));
    }

    #[test]
    fn shape_is_preserved() {
        let s = NoiseSchedule::linear(3, 0.1, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(vec![3, 5, 7], &mut rng);
        assert_eq!(s.forward_step_sample(&x, 1, &mut rng).unwrap().shape(), &[3, 5, 7]);
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let x0 = Tensor::new(vec![2], vec![1.0f64, -3.0]).unwrap();
        let xt = s.q_sample(&x0, 2, &Tensor::zeros(vec![2])).unwrap();
        assert!((xt.data()[0] - 0.848528).abs() < 1e-6);
        assert!((xt.data()[1] + 3.0 * 0.72f64.sqrt()).abs() < 1e-15);
        let e = Tensor::new(vec![2], vec![0.3f64, 2.0]).unwrap();
        let xt = s.q_sample(&Tensor::zeros(vec![2]), 2, &e).unwrap();
        assert_eq!(xt.data()[0], (1.0 - s.alpha_bar(2)).sqrt() * 0.3);
        assert!((xt.data()[0] - 0.28f64.sqrt() * 0.3).abs() < 1e-15);
        assert!(s.q_sample(&x0, 1, &Tensor::zeros(vec![3])).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_invariants(steps in 1usize..400, start in 1e-5f64..0.05, spread in 0.0f64..0.5) {
            let end = (start + spread).min(0.9);
            let s = NoiseSchedule::linear(steps, start, end).unwrap();
            prop_assert_eq!(s.betas().len(), steps);
            let mut prod = 1.0;
            for t in 1..=steps {
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                prod *= s.alpha(t);
                prop_assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
                if t > 1 {
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
            prop_assert!(s.alpha_bar(steps) > 0.0 && s.alpha_bar(1) < 1.0);
        }

        #[test]
        fn q_sample_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, t in 1usize..=50) {
            let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
            let x1 = Tensor::<f64>::randn(vec![6], &mut rng);
            let x2 = Tensor::<f64>::randn(vec![6], &mut rng);
            let e1 = Tensor::<f64>::randn(vec![6], &mut rng);
            let e2 = Tensor::<f64>::randn(vec![6], &mut rng);
            let comb = |u: &Tensor<f64>, v: &Tensor<f64>| u.zip_map(v, |p, q| a * p + b * q).unwrap();
            let lhs = s.q_sample(&comb(&x1, &x2), t, &comb(&e1, &e2)).unwrap();
            let rhs = comb(&s.q_sample(&x1, t, &e1).unwrap(), &s.q_sample(&x2, t, &e2).unwrap());
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}

//! Adjoint of every primitive against central finite differences.

mod support;

use support::suite::{self, Check};

fn assert_all(checks: &[Check]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert!(c.passed(), "{}: rel err {} exceeds {}", c.name, c.max_rel_err, c.tol);
    }
}

#[test]
fn conv3x3_on_8x8_f64() {
    assert_all(&[suite::conv3x3_on_8x8()]);
}

#[test]
fn conv_f64() {
    assert_all(&suite::conv::<f64>());
}

#[test]
fn conv_f32() {
    assert_all(&suite::conv::<f32>());
}

#[test]
fn elementwise_f64() {
    assert_all(&suite::elementwise::<f64>());
}

#[test]
fn elementwise_f32() {
    assert_all(&suite::elementwise::<f32>());
}

#[test]
fn structural_f64() {
    assert_all(&suite::structural::<f64>());
}

#[test]
fn structural_f32() {
    assert_all(&suite::structural::<f32>());
}

#[test]
fn norm_and_dense_f64() {
    assert_all(&suite::norm_and_dense::<f64>());
}

#[test]
fn norm_and_dense_f32() {
    assert_all(&suite::norm_and_dense::<f32>());
}

#[test]
fn end_to_end_denoiser_f64() {
    assert_all(&[suite::end_to_end_denoiser::<f64>(6)]);
}

#[test]
fn end_to_end_denoiser_f32() {
    assert_all(&[suite::end_to_end_denoiser::<f32>(6)]);
}

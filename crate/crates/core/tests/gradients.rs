mod common;

use common::{captioner_grad_check, mfe_grad_check, mlp_grad_check, GradCheck};
use mmi_core::captioner::ArchId;

fn assert_mostly_passes(name: &str, c: GradCheck) {
    assert!(
        c.fraction() >= 0.95,
        "{name}: {}/{} within tolerance, worst relative error {:.3e}",
        c.passed,
        c.checked,
        c.worst
    );
    // Guard against a sample made only of parameters with zero gradient.
    assert!(c.nonzero >= 20, "{name}: only {} informative coordinates", c.nonzero);
    eprintln!("{name}: {}/{} pass, {} informative", c.passed, c.checked, c.nonzero);
}

#[test]
fn captioner_r_gradients_match_finite_differences() {
    assert_mostly_passes("captioner R", captioner_grad_check(ArchId::R, 3));
}

#[test]
fn captioner_v_gradients_match_finite_differences() {
    assert_mostly_passes("captioner V", captioner_grad_check(ArchId::V, 4));
}

#[test]
fn mfe_gradients_match_finite_differences() {
    assert_mostly_passes("mfe", mfe_grad_check(5));
}

#[test]
fn attack_mlp_gradients_match_finite_differences() {
    assert_mostly_passes("attack mlp", mlp_grad_check(6));
}

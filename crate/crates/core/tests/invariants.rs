mod support;

use support::invariants;

#[test]
fn squash_norm_below_one_and_monotone() {
    invariants::squash_norm_below_one_and_monotone().unwrap();
}

#[test]
fn selector_strictly_inside_unit_interval() {
    invariants::selector_strictly_inside_unit_interval().unwrap();
}

#[test]
fn energy_identity() {
    invariants::energy_identity().unwrap();
}

#[test]
fn cosine_logits_ignore_weight_scale() {
    invariants::cosine_logits_ignore_weight_scale().unwrap();
}

#[test]
fn hinge_zero_iff_argument_nonpositive() {
    invariants::hinge_zero_iff_argument_nonpositive().unwrap();
}

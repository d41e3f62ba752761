mod common;

#[test]
fn full_model_gradient_matches_finite_differences() {
    let rep = common::gradient_check(16);
    assert!(rep.checked > 200, "only {} coordinates checked", rep.checked);
    assert!(rep.max_rel <= 1e-3, "max relative error {:.3e} at {}", rep.max_rel, rep.worst);
}

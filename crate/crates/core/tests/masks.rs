mod common;

#[test]
fn prefix_lm_mask_properties_on_random_sequences() {
    let rep = common::mask_trials(100, 21);
    assert_eq!(rep.mask_errors, 0);
    assert!(rep.causal_delta <= 1e-6, "suffix causality broken: {:e}", rep.causal_delta);
    assert!(rep.pad_delta <= 1e-6, "padding leaks into outputs: {:e}", rep.pad_delta);
    assert!(rep.bidir_delta > 1e-9, "prefix is not bidirectional: {:e}", rep.bidir_delta);
}

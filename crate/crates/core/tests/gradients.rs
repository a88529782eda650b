use focalcount::losses::LossKind;
use focalcount::verify::{
    composition_error, dominance_violations, pixel_gradients, primitive_errors, Fault,
    GRAD_TOLERANCE,
};

#[test]
fn full_composition_matches_finite_differences() {
    for seed in 0..12 {
        for kind in [LossKind::Mse, LossKind::Es, LossKind::Fmse] {
            let err = composition_error(seed, kind).unwrap();
            assert!(err < GRAD_TOLERANCE, "seed {seed} {kind}: {err:e}");
        }
    }
}

#[test]
fn primitives_match_finite_differences() {
    for (name, err) in primitive_errors(25).unwrap() {
        assert!(err < GRAD_TOLERANCE, "{name}: {err:e}");
    }
}

#[test]
fn focal_gradient_dominates_on_the_grid() {
    assert!(dominance_violations(None).unwrap().is_empty());
    let (f, m) = pixel_gradients(0.3, 1.0, None).unwrap();
    assert!(f < m && m < 0.0);
}

#[test]
fn dropped_es_term_is_detected() {
    let bad = dominance_violations(Some(Fault::DropEsGradient)).unwrap();
    assert_eq!(bad.len(), 198);
}

use ctd::gradsuite::{gradient_suite, GRAD_TOLERANCE};
use ctd::tensor::{grad_check, probe_sum, sigmoid, Tensor, DEFAULT_FLOOR};

#[test]
fn every_case_passes_for_several_seeds() {
    for seed in [0, 1, 42] {
        for case in gradient_suite(seed).unwrap() {
            assert!(
                case.passed(),
                "seed {seed} {}: {:e} >= {GRAD_TOLERANCE:e}",
                case.name,
                case.report.max_rel_error
            );
            assert!(case.report.checked > 0, "{} checked nothing", case.name);
        }
    }
}

#[test]
fn suite_covers_blocks_and_losses() {
    let names: Vec<&str> = gradient_suite(0).unwrap().iter().map(|c| c.name).collect();
    for want in [
        "ffm",
        "sam",
        "sap + projection",
        "cam",
        "brm",
        "bce sum",
        "iou",
        "l1 mean",
        "boundary",
    ] {
        assert!(names.contains(&want), "missing case {want}");
    }
}

#[test]
fn checker_flags_a_detached_path() {
    // The detached branch contributes to the value but not to the gradient.
    let x = Tensor::<f64>::leaf([1, 1, 2, 2], vec![0.3, -0.2, 0.8, 0.1]).unwrap();
    let report = grad_check(
        || {
            let y = ctd::tensor::add(&sigmoid(&x), &sigmoid(&x).detach())?;
            probe_sum(&y, 0)
        },
        std::slice::from_ref(&x),
        1e-6,
        DEFAULT_FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_error > 0.1);
}

//! Regression against the frozen inequality ceilings.

use phi4_core::calibration::{corpus_ratios, Calibration, INEQUALITIES};

fn fixture() -> Calibration {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/inequality_constants.txt"))
        .expect("fixture present");
    Calibration::parse(&text).expect("fixture parses")
}

#[test]
fn fixture_lists_every_inequality() {
    let cal = fixture();
    for name in INEQUALITIES {
        assert!(cal.ceiling(name).unwrap() > 0.0, "{name}");
    }
}

#[test]
fn calibration_corpus_stays_under_frozen_ceilings() {
    let cal = fixture();
    for name in INEQUALITIES {
        let ceiling = cal.ceiling(name).unwrap();
        let worst = corpus_ratios(name, cal.seed, cal.corpus).unwrap().into_iter().fold(0.0f64, f64::max);
        assert!(worst <= ceiling * (1.0 + 1e-9), "{name}: {worst} > {ceiling}");
    }
}

#[test]
fn fresh_fields_respect_the_bound_shape() {
    let cal = fixture();
    for name in INEQUALITIES {
        let ceiling = cal.ceiling(name).unwrap();
        let worst = corpus_ratios(name, cal.seed ^ 0x5eed, 30).unwrap().into_iter().fold(0.0f64, f64::max);
        assert!(worst <= 1.25 * ceiling, "{name}: {worst} vs frozen {ceiling}");
    }
}

#[test]
fn projections_never_amplify_beyond_the_frozen_bound() {
    // P_N^(i) multiplies by weights in [0, 1]; only the L^4 block norms can grow.
    let cal = fixture();
    assert!(cal.ceiling("projection_bound").unwrap() < 1.5);
}

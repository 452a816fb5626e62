use saclt_web::{histogram, path, ScalarSetup};

fn setup(gamma_star: f64, exponent: f64) -> ScalarSetup {
    ScalarSetup {
        lambda: 1.0,
        root: 1.0,
        noise: 4.0,
        gamma_star,
        exponent,
    }
}

#[test]
fn theory_matches_scalar_closed_forms() {
    let slow = setup(1.0, 0.7).theory().unwrap();
    assert!((slow.v_raw.unwrap()[0][0] - 2.0).abs() < 1e-12);
    assert!((slow.v_avg[0][0] - 4.0).abs() < 1e-12);
    // γ*²u / (2γ*λ - 1) at γ* = 2
    let fast = setup(2.0, 1.0).theory().unwrap();
    assert!((fast.v_raw.unwrap()[0][0] - 16.0 / 3.0 / 2.0).abs() < 1e-12);
    assert!(setup(0.4, 1.0).theory().unwrap().v_raw.is_none());
}

#[test]
fn path_is_deterministic_and_ends_at_horizon() {
    let a = path(&setup(1.0, 0.7), 0.0, 10_000, 3).unwrap();
    let b = path(&setup(1.0, 0.7), 0.0, 10_000, 3).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(*a.n.last().unwrap(), 10_000);
    assert!(a.n.windows(2).all(|w| w[0] < w[1]));
    assert!((a.theta_bar.last().unwrap() - 1.0).abs() < 0.2);
    assert_ne!(
        a.theta,
        path(&setup(1.0, 0.7), 0.0, 10_000, 4).unwrap().theta
    );
}

#[test]
fn histogram_integrates_to_captured_mass_and_tracks_theory() {
    let h = histogram(&setup(1.0, 0.7), 2_000, 1_000, 5, 40, false).unwrap();
    assert_eq!(h.samples, 1_000);
    assert_eq!(h.edges.len(), 41);
    let width = h.edges[1] - h.edges[0];
    let mass: f64 = h.density.iter().map(|d| d * width).sum();
    assert!(mass > 0.99 && mass <= 1.0 + 1e-12);
    let theory = h.theory_variance.unwrap();
    assert!(
        (h.empirical_variance / theory - 1.0).abs() < 0.2,
        "{}",
        h.empirical_variance
    );
    let avg = histogram(&setup(1.0, 0.7), 2_000, 1_000, 5, 40, true).unwrap();
    assert_eq!(avg.theory_variance, Some(4.0));
}

#[test]
fn inputs_are_bounded() {
    assert!(path(&setup(1.0, 0.7), 0.0, 0, 1).is_err());
    assert!(path(&setup(1.0, 0.7), 0.0, 2_000_000, 1).is_err());
    assert!(histogram(&setup(1.0, 0.7), 100_000, 5_000, 1, 40, false).is_err());
    assert!(histogram(&setup(1.0, 0.7), 100, 100, 1, 0, false).is_err());
    let bad = ScalarSetup {
        lambda: -1.0,
        ..setup(1.0, 0.7)
    };
    assert!(bad.theory().is_err());
}

use porl::accountant::{
    calibrate_sigma, compose, default_orders, rdp_single_step, to_dp, Accountant, Conversion, RdpCurve,
};
use porl::numerics::SeededRng;
use proptest::prelude::*;

// Binomial-expansion cost written independently: binomials from lgamma-free
// recurrences and a two-pass max-shifted sum.
fn oracle_cost(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = alpha as f64;
    let mut ln_c = 0.0;
    let mut terms = Vec::new();
    for i in 0..=alpha {
        if i > 0 {
            ln_c += ((alpha - i + 1) as f64 / i as f64).ln();
        }
        let i = i as f64;
        terms.push(ln_c + i * q.ln() + (a - i) * (1.0 - q).ln() + i * (i - 1.0) / (2.0 * sigma * sigma));
    }
    let m = terms.iter().cloned().fold(f64::MIN, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()) / (a - 1.0)
}

#[test]
fn epsilon_matches_straight_line_recomputation() {
    let (q, sigma, k, delta) = (0.01, 1.0, 10_000u64, 1e-6);
    let curve = RdpCurve::subsampled_gaussian(q, sigma, &default_orders()).unwrap();
    let got = to_dp(&compose(&curve, k), delta, Conversion::Classic).unwrap();
    let mut want = f64::INFINITY;
    for alpha in 2..=256u32 {
        let e = k as f64 * oracle_cost(q, sigma, alpha) + (1.0 / delta).ln() / (alpha as f64 - 1.0);
        want = want.min(e);
    }
    assert!((got.epsilon - want).abs() < 1e-9, "{} vs {want}", got.epsilon);
}

#[test]
fn closed_form_agrees_with_monte_carlo_divergence() {
    // D_4((1-q) N(0,1) + q N(1,1) || N(0,1)) estimated from 10^7 draws of N(0,1)
    let (q, sigma, alpha) = (0.01, 1.0, 4);
    let mut rng = SeededRng::new(2024);
    let n = 10_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let z = sigma * rng.normal();
        let ratio = (1.0 - q) + q * ((2.0 * z - 1.0) / (2.0 * sigma * sigma)).exp();
        acc += ratio.powi(alpha as i32);
    }
    let mc = (acc / n as f64).ln() / (alpha as f64 - 1.0);
    let closed = rdp_single_step(q, sigma, alpha).unwrap();
    assert!(((closed - mc) / closed).abs() < 0.1, "closed {closed} mc {mc}");
    assert!(closed >= mc, "closed {closed} mc {mc}");
}

#[test]
fn larger_target_needs_less_noise() {
    let a = calibrate_sigma(0.01, 1000, 1.0, 1e-5).unwrap();
    let b = calibrate_sigma(0.01, 1000, 4.0, 1e-5).unwrap();
    assert!(b.sigma < a.sigma);
}

#[test]
fn unreachable_target_reports_bracket() {
    let err = calibrate_sigma(1.0, 1_000_000_000, 1e-6, 1e-6).unwrap_err();
    assert!(matches!(err, porl::Error::Unreachable { .. }), "{err}");
}

#[test]
fn calibration_lands_within_tolerance() {
    let acc = Accountant::default();
    let c = acc.calibrate(0.02, 5000, 3.0, 1e-5).unwrap();
    let e = acc.epsilon(0.02, c.sigma, 5000, 1e-5).unwrap().epsilon;
    assert!(e <= 3.0 && e >= 3.0 * (1.0 - acc.tolerance), "{e}");
}

#[test]
fn classic_conversion_is_never_tighter() {
    let curve = RdpCurve::subsampled_gaussian(0.05, 2.0, &default_orders())
        .unwrap()
        .compose(2000);
    let c = to_dp(&curve, 1e-6, Conversion::Classic).unwrap();
    let i = to_dp(&curve, 1e-6, Conversion::Improved).unwrap();
    assert!(i.epsilon <= c.epsilon);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cost_is_non_decreasing_in_order(q in 1e-4f64..1.0, sigma in 0.3f64..20.0) {
        let curve = RdpCurve::subsampled_gaussian(q, sigma, &default_orders()).unwrap();
        for w in curve.costs.windows(2) {
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-12) - 1e-300);
            prop_assert!(w[0] >= 0.0);
        }
    }

    #[test]
    fn epsilon_is_monotone(q in 1e-3f64..0.5, sigma in 0.5f64..10.0, k in 1u64..5000) {
        let acc = Accountant::default();
        let base = acc.epsilon(q, sigma, k, 1e-6).unwrap().epsilon;
        prop_assert!(acc.epsilon(q, sigma * 1.2, k, 1e-6).unwrap().epsilon <= base + 1e-12);
        prop_assert!(acc.epsilon(q, sigma, k * 2, 1e-6).unwrap().epsilon >= base - 1e-12);
        prop_assert!(acc.epsilon((q * 1.5).min(1.0), sigma, k, 1e-6).unwrap().epsilon >= base - 1e-12);
    }

    #[test]
    fn composition_is_additive(costs in proptest::collection::vec(0.0f64..10.0, 1..20)) {
        let orders: Vec<u32> = (2..2 + costs.len() as u32).collect();
        let c = RdpCurve { orders, costs };
        let a = compose(&compose(&c, 3), 4);
        let b = compose(&c, 12);
        prop_assert_eq!(&a.orders, &b.orders);
        for (x, y) in a.costs.iter().zip(&b.costs) {
            prop_assert!((x - y).abs() <= 1e-14 * y.abs().max(1.0));
        }
    }

    #[test]
    fn calibration_round_trip_respects_target(
        q in 1e-3f64..0.3,
        k in 10u64..3000,
        eps in 0.5f64..20.0,
    ) {
        let acc = Accountant::default();
        if let Ok(c) = acc.calibrate(q, k, eps, 1e-6) {
            let e = acc.epsilon(q, c.sigma, k, 1e-6).unwrap().epsilon;
            prop_assert!(e <= eps);
            prop_assert!((e - c.privacy.epsilon).abs() < 1e-12);
        }
    }
}

use proptest::prelude::*;
use uail_core::uncertainty::{
    calibrate_lambda, combine_signals, discretize, entropy, std_from_mode, temporal_divergence, uncertainty_score,
    variational_ratio, BinSpec, UncertaintyWindow,
};

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, 2..64)
}

proptest! {
    #[test]
    fn statistics_stay_in_range(xs in samples(), bins in 2usize..40) {
        let s = discretize(&xs, BinSpec::new(-1.0, 1.0, bins).unwrap()).unwrap();
        prop_assert_eq!(s.counts().iter().sum::<u32>() as usize, xs.len());
        let h = entropy(&s);
        prop_assert!(h >= 0.0 && h <= (bins as f64).ln() + 1e-12);
        let vr = variational_ratio(&s);
        prop_assert!((0.0..=1.0 - 1.0 / bins as f64 + 1e-12).contains(&vr));
        prop_assert!(std_from_mode(&s) >= 0.0);
        prop_assert!(s.counts().iter().all(|&c| c <= s.mode_count()));
        prop_assert!(s.counts()[..s.mode_bin()].iter().all(|&c| c < s.mode_count()));
    }

    #[test]
    fn statistics_ignore_sample_order(xs in samples(), rot in 0usize..64) {
        let spec = BinSpec::steering();
        let mut ys = xs.clone();
        let k = rot % ys.len();
        ys.rotate_left(k);
        ys.reverse();
        let (a, b) = (discretize(&xs, spec).unwrap(), discretize(&ys, spec).unwrap());
        prop_assert_eq!(a.counts(), b.counts());
        prop_assert_eq!(entropy(&a), entropy(&b));
        prop_assert_eq!(variational_ratio(&a), variational_ratio(&b));
        prop_assert!((std_from_mode(&a) - std_from_mode(&b)).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_nonnegative_and_zero_on_self(xs in samples(), ys in samples()) {
        let spec = BinSpec::throttle();
        let n = xs.len().min(ys.len());
        let a = discretize(&xs[..n], spec).unwrap();
        let b = discretize(&ys[..n], spec).unwrap();
        prop_assert_eq!(temporal_divergence(&a, &a).unwrap(), 0.0);
        let d = temporal_divergence(&a, &b).unwrap();
        prop_assert!(d >= 0.0 && d.is_finite());
    }

    #[test]
    fn score_is_a_nonnegative_square(xs in samples(), ys in samples(), lambda in 0.0f64..10.0) {
        let spec = BinSpec::steering();
        let n = xs.len().min(ys.len());
        let a = discretize(&xs[..n], spec).unwrap();
        let b = discretize(&ys[..n], spec).unwrap();
        let s = uncertainty_score(&a, &b, lambda).unwrap();
        prop_assert!(s.u >= 0.0);
        let inner = s.td * s.h * s.vr + lambda * s.sd;
        prop_assert!((s.u - inner * inner).abs() <= 1e-12 * (1.0 + s.u));
        let first = uncertainty_score(&a, &a, lambda).unwrap();
        prop_assert_eq!(first.td, 0.0);
    }

    #[test]
    fn combining_is_monotone(us in 0.0f64..5.0, ut in 0.0f64..5.0, d in 0.0f64..1.0, alpha in 0.0f64..2.0) {
        let base = combine_signals(us, ut, alpha).unwrap();
        prop_assert!(combine_signals(us + d, ut, alpha).unwrap() >= base);
        prop_assert!(combine_signals(us, ut + d, alpha).unwrap() >= base);
        prop_assert!(combine_signals(-d - 1e-9, ut, alpha).is_err());
    }

    #[test]
    fn ring_buffer_holds_the_last_t_values(t in 1usize..10, vals in prop::collection::vec(0.0f64..1.0, 0..40)) {
        let mut w = UncertaintyWindow::new(t).unwrap();
        for (i, v) in vals.iter().enumerate() {
            w.record(i as u64, *v);
        }
        let mut want: Vec<f64> = vals.iter().rev().take(t).copied().collect();
        want.resize(t, 0.0);
        let mut got = w.slots().to_vec();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        prop_assert_eq!(got, want);
        let (sum, fire) = w.test(0.5);
        prop_assert_eq!(fire, sum > 0.5);
    }
}

#[test]
fn lambda_balances_the_medians() {
    use uail_core::uncertainty::SignalUncertainty;
    let recs: Vec<SignalUncertainty> = (1..=5)
        .map(|i| SignalUncertainty { td: 1.0, h: i as f64, vr: 0.5, sd: 0.1 * i as f64, u: 0.0 })
        .collect();
    // medians: categorical 1.5, sd 0.3
    assert!((calibrate_lambda(&recs) - 5.0).abs() < 1e-12);
    assert_eq!(calibrate_lambda(&[]), 1.0);
}

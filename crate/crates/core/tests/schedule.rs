use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use simdiff::schedule::*;
use simdiff::tensor::Graph;
use simdiff::Tensor;

fn central_difference(s: &ScheduleSpec, t: f64) -> f64 {
    let h = 1e-5;
    -(s.logsnr(t + h).unwrap() - s.logsnr(t - h).unwrap()) / (2.0 * h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn alpha_sigma_is_variance_preserving(t in 0.0f64..=1.0) {
        let a = ScheduleSpec::cosine(64).unwrap().alpha_sigma(t).unwrap();
        prop_assert!((a.alpha * a.alpha + a.sigma * a.sigma - 1.0).abs() < 1e-12);
        prop_assert!(a.alpha > 0.0 && a.alpha < 1.0 && a.sigma > 0.0 && a.sigma < 1.0);
    }

    #[test]
    fn cosine_is_strictly_decreasing(t1 in 0.0f64..1.0, dt in 1e-6f64..1.0) {
        let t2 = (t1 + dt).min(1.0);
        prop_assume!(t2 > t1);
        prop_assert!(logsnr_cosine(t1, -15.0, 15.0).unwrap() > logsnr_cosine(t2, -15.0, 15.0).unwrap());
    }

    #[test]
    fn shift_identity(t in 0.0f64..=1.0, dlog in 0u32..10, nlog in 0u32..10) {
        let (d, n) = (1u32 << dlog, 1u32 << nlog);
        let diff = logsnr_shifted(t, d, n, -15.0, 15.0).unwrap() - logsnr_cosine(t, -15.0, 15.0).unwrap();
        prop_assert!((diff - 2.0 * (n as f64 / d as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn posterior_is_consistent(s in 0.001f64..0.999, gap in 1e-4f64..1.0) {
        let t = (s + gap).min(1.0);
        prop_assume!(t > s);
        let sch = ScheduleSpec::shifted(64, 16).unwrap();
        let p = sch.posterior_coeffs(s, t).unwrap();
        let (a_s, a_t) = (sch.alpha_sigma(s).unwrap(), sch.alpha_sigma(t).unwrap());
        prop_assert!((p.coef_z * a_t.alpha + p.coef_x - a_s.alpha).abs() < 1e-10);
        prop_assert!((p.var + p.coef_z * p.coef_z * a_t.sigma * a_t.sigma - a_s.sigma * a_s.sigma).abs() < 1e-10);
        prop_assert!(p.var >= 0.0);
        let tc = sch.transition_coeffs(s, t).unwrap();
        prop_assert!(tc.sigma_ts_sq >= 0.0);
        let direct = a_t.sigma.powi(2) - tc.alpha_ts.powi(2) * a_s.sigma.powi(2);
        prop_assert!((tc.sigma_ts_sq - direct).abs() < 1e-12);
    }

    #[test]
    fn shifted_weight_matches_base(t in 0.001f64..0.999, nlog in 0u32..8) {
        let base = ScheduleSpec::cosine(256).unwrap();
        let sh = ScheduleSpec::shifted(256, 1 << nlog).unwrap();
        prop_assert!((base.elbo_weight(t).unwrap() - sh.elbo_weight(t).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn weight_matches_central_differences(t in 0.01f64..0.99) {
        for s in [
            ScheduleSpec::cosine(64).unwrap(),
            ScheduleSpec::interpolated(512, 32, 256).unwrap(),
            ScheduleSpec::interpolated(512, 32, 256).unwrap().with_interpolation(Interpolation::HighAtEnd),
            ScheduleSpec::cosine_unbounded(64).unwrap(),
        ] {
            let (w, fd) = (s.elbo_weight(t).unwrap(), central_difference(&s, t));
            prop_assert!(w > 0.0);
            prop_assert!((w - fd).abs() / w.abs() < 1e-6, "{s}: {w} vs {fd}");
        }
    }
}

#[test]
fn interpolated_weight_at_midpoint() {
    let s = ScheduleSpec::interpolated(512, 32, 256).unwrap();
    let w = s.elbo_weight(0.5).unwrap();
    assert!((w - central_difference(&s, 0.5)).abs() / w < 1e-6);
    // bounded cosine, mpmath
    let c = ScheduleSpec::cosine(64).unwrap();
    assert!((c.elbo_weight(0.5).unwrap() - 6.278_760_632_669_576_5).abs() < 1e-10);
}

#[test]
fn transition_endpoint_matches_sigmoid() {
    let tc = ScheduleSpec::cosine(64).unwrap().transition_coeffs(0.0, 1.0).unwrap();
    // mpmath: σ_1² with bounds ±15
    assert!((tc.sigma_ts_sq - 0.999_999_694_097_773_07).abs() < 1e-6);
}

#[test]
fn pooling_law_empirical() {
    let side = 1000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..side * side).map(|_| StandardNormal.sample(&mut rng)).collect();
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let full = std(&data);
    for s in [2usize, 4, 8] {
        let h = side - side % s;
        let x: Vec<f64> = (0..h).flat_map(|i| data[i * side..i * side + h].to_vec()).collect();
        let g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_vec(&[1, h, h, 1], x).unwrap());
        let pooled = g.avg_pool2d(v, s).unwrap();
        let ratio = full / std(g.value(pooled).data());
        assert!((ratio / s as f64 - 1.0).abs() < 0.02, "s={s}: ratio {ratio}");
        assert_eq!(snr_at_pooled_resolution(1.0, s as u32), (s * s) as f64);
    }
}

//! Monte-Carlo validator behavior: error-scaling slope, sign-flip union
//! bound, signal lower bound, entry tails, and structural invariants of the
//! sampled residuals.

use lordba::tensor::op_norm_est;
use lordba::{
    canonical_adapter, canonical_reconstruction, check_entry_tail, check_reconstruction_bound,
    check_sign_consistency, check_signal_lowerbound, sample_factors, NoiseDist, SignMatrix,
    SignNoiseModel,
};

fn gaussian_model(n: usize, m: usize, r: usize, zeta: f64, seed: u64) -> SignNoiseModel {
    let noise = NoiseDist::Gaussian { std: 1.0 }.with_zeta(zeta);
    SignNoiseModel::new(n, m, r, 1.0, 1.0, noise, seed)
}

#[test]
fn reconstruction_error_scales_linearly_in_noise_proxy() {
    let model = gaussian_model(64, 64, 8, 0.1, 11);
    let report = check_reconstruction_bound(&model, 200, 0.05).unwrap();
    let slope = report.slope.unwrap();
    assert!(
        (slope - 1.0).abs() <= 0.15,
        "log-log slope {slope} strays from linear scaling"
    );
    assert_eq!(report.passed, Some(true));
    // The fitted constant makes the quantile bound tight by construction, so
    // violations cannot exceed the quantile mass.
    assert!(report.violation_rate <= 0.05 + 1e-12);
    assert!(report.fitted_constant.unwrap() > 0.0);
}

#[test]
fn uniform_noise_also_scales_linearly() {
    let mut model = gaussian_model(32, 32, 4, 0.1, 13);
    model.noise = NoiseDist::Uniform { half_width: 0.1 };
    let report = check_reconstruction_bound(&model, 200, 0.05).unwrap();
    let slope = report.slope.unwrap();
    assert!((slope - 1.0).abs() <= 0.15, "uniform slope {slope}");
}

#[test]
fn flip_rate_stays_under_union_bound_where_informative() {
    // p_flip = 4Nr exp(-(mu/zeta)^2) at N=M=16, r=4; informative needs
    // mu/zeta > sqrt(ln 512) ~ 2.5.
    for (i, ratio) in [2.7, 3.0, 3.5, 4.0].iter().enumerate() {
        let model = gaussian_model(16, 16, 4, 1.0 / ratio, 17 + i as u64);
        let report = check_sign_consistency(&model, 2000).unwrap();
        assert!(report.bound[0] < 0.5, "grid point must be informative");
        assert_eq!(
            report.passed,
            Some(true),
            "ratio {ratio}: rate {} vs bound {}",
            report.empirical[0],
            report.bound[0]
        );
    }
}

#[test]
fn strong_separation_gives_zero_flips_in_ten_thousand_trials() {
    let model = gaussian_model(16, 16, 4, 0.1, 23);
    let report = check_sign_consistency(&model, 10_000).unwrap();
    assert_eq!(report.empirical[0], 0.0);
}

#[test]
fn signal_energy_event_meets_advertised_frequency() {
    let report = check_signal_lowerbound(16, 16, 4, 10_000, 29).unwrap();
    let q: f64 = 8.0 / 256.0;
    let se = (q * (1.0 - q) / 10_000.0).sqrt();
    assert!(
        report.empirical[0] >= 1.0 - q - 3.0 * se,
        "frequency {} below 1 - 8/NM - 3SE",
        report.empirical[0]
    );
    assert_eq!(report.passed, Some(true));
    // Mean of Z agrees with rNM = 16384 (checked inside `passed` too).
    assert!((report.empirical[1] - report.bound[1]).abs() / report.bound[1] < 0.05);
}

#[test]
fn rank_one_energy_event_always_holds() {
    let report = check_signal_lowerbound(16, 16, 1, 10_000, 31).unwrap();
    assert_eq!(report.empirical[0], 1.0);
}

#[test]
fn entry_tail_sits_below_subexponential_envelope() {
    let model = gaussian_model(16, 16, 4, 0.3, 37);
    let grid = [0.6, 0.9, 1.2, 1.6, 2.0, 2.6];
    let report = check_entry_tail(&model, 20_000, &grid).unwrap();
    for ((t, emp), bound) in grid.iter().zip(&report.empirical).zip(&report.bound) {
        assert!(emp <= bound, "tail at t={t}: empirical {emp} exceeds envelope {bound}");
    }
    assert_eq!(report.passed, Some(true), "second moment exceeded its variance proxy");
}

#[test]
fn residual_operator_norm_never_exceeds_frobenius() {
    let model = gaussian_model(24, 40, 6, 0.2, 41);
    for trial in 0..20 {
        let s = sample_factors(&model, trial);
        let star =
            canonical_adapter(s.sigma_a.clone(), s.sigma_b.transpose(), 1.0, 1.0, model.r)
                .unwrap()
                .reconstruct();
        let resid = s.factors.delta().sub(&star);
        let op = op_norm_est(&resid, 200);
        assert!(op <= resid.frob_norm() * (1.0 + 1e-9));
    }
}

#[test]
fn observed_signs_rebuild_the_canonical_adapter_bit_for_bit() {
    // At mu/zeta = 10 no flips occur, so the observed-sign reconstruction
    // must equal the latent-sign one exactly, not just approximately.
    let model = gaussian_model(16, 16, 4, 0.1, 43);
    for trial in 0..50 {
        let s = sample_factors(&model, trial);
        assert_eq!(SignMatrix::from_dense(&s.factors.a).count_diff(&s.sigma_a), 0);
        let observed = canonical_reconstruction(&s.factors, model.mu_a, model.mu_b).unwrap();
        let latent =
            canonical_adapter(s.sigma_a.clone(), s.sigma_b.transpose(), model.mu_a, model.mu_b, model.r)
                .unwrap();
        assert_eq!(observed.reconstruct(), latent.reconstruct());
    }
}

#[test]
fn reports_are_deterministic_and_json_serializable() {
    let model = gaussian_model(16, 16, 4, 0.25, 47);
    let a = check_sign_consistency(&model, 500).unwrap();
    let b = check_sign_consistency(&model, 500).unwrap();
    let ja = serde_json::to_string(&a).unwrap();
    assert_eq!(ja, serde_json::to_string(&b).unwrap());
    assert!(ja.contains("\"violation_rate\""));

    let t = check_entry_tail(&model, 400, &[0.5, 1.0]).unwrap();
    let jt = serde_json::to_string_pretty(&t).unwrap();
    assert!(jt.contains("\"quantity\""));
}

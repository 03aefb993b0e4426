use matdiff::evaluation::*;
use matdiff::fem::{Fem, FemConfig};
use matdiff::grid::Dims;
use matdiff::materials::{chunk_index, generate_synthetic_catalog, MaterialRecord};
use matdiff::microstructure::DesignParams;
use proptest::prelude::*;

fn theta(e_m: f64, nu_m: f64, e_p: f64, nu_p: f64, r_p: f64, f_p: f64) -> DesignParams {
    DesignParams {
        e_m,
        e_p,
        nu_m,
        nu_p,
        rho_m: 2.0,
        rho_p: 4.0,
        r_p,
        f_p,
        matrix_id: None,
        particle_id: None,
    }
}

fn result(k_theta: f64, k_star: f64, chunks: [[f64; 3]; 2]) -> EvalResult {
    let eps = (k_theta - k_star).abs();
    EvalResult {
        theta_hat: theta(chunks[0][0], chunks[0][1], chunks[1][0], chunks[1][1], 0.1, 0.2),
        k_theta,
        k_star,
        eps_r: eps / k_star,
        eps,
        k_values: vec![k_theta],
        failed_repeats: 0,
        unreliable: false,
        chunks: [chunk_index(chunks[0]), chunk_index(chunks[1])],
    }
}

#[test]
fn percentiles_and_targets() {
    let data: Vec<f64> = (0..=100).map(f64::from).collect();
    assert_eq!(percentile(&data, 1.0), 1.0);
    assert_eq!(percentile(&data, 99.0), 99.0);
    assert_eq!(percentile(&[0.0, 10.0], 25.0), 2.5);

    let t = select_targets(&data).unwrap();
    assert_eq!(t, [1.0, 25.5, 50.0, 74.5, 99.0]);
    assert!((t[2] - (t[0] + t[4]) / 2.0).abs() < 1e-12);

    assert_eq!(select_targets(&[7.0; 150]).unwrap(), [7.0; 5]);
    assert!(select_targets(&[]).is_err());
    assert!(select_targets(&[1.0, f64::NAN]).is_err());
}

#[test]
fn pure_matrix_design_gives_analytic_modulus() {
    let fem = Fem::new(Dims::Two, 16, FemConfig::default()).unwrap();
    let t = theta(120.0, 0.3, 300.0, 0.2, 0.1, 0.0);
    let r = evaluate_design(&fem, &t, 50.0, &EvalConfig::default(), 3).unwrap();
    let analytic = fem.mesh().boundary.phase_modulus(120.0, 0.3);
    assert_eq!(r.k_values.len(), 10);
    for k in &r.k_values {
        assert!((k - analytic).abs() <= 1e-8 * analytic, "{k} vs {analytic}");
    }
    assert!((r.k_theta - analytic).abs() <= 1e-8 * analytic);
    assert!((r.eps - (r.k_theta - 50.0).abs()).abs() < 1e-12);
    assert!(!r.unreliable);
}

#[test]
fn homogeneous_design_is_layout_independent() {
    let fem = Fem::new(Dims::Two, 32, FemConfig::default()).unwrap();
    let t = theta(80.0, 0.25, 80.0, 0.25, 0.08, 0.3);
    let r = evaluate_design(&fem, &t, 40.0, &EvalConfig { repeats: 4, ..Default::default() }, 9).unwrap();
    let lo = r.k_values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.k_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi - lo <= 1e-6 * hi, "spread {lo}..{hi}");
}

#[test]
fn evaluation_is_seeded_and_validates_input() {
    let fem = Fem::new(Dims::Two, 32, FemConfig::default()).unwrap();
    let t = theta(20.0, 0.3, 300.0, 0.2, 0.09, 0.25);
    let cfg = EvalConfig { repeats: 3, ..Default::default() };
    let a = evaluate_design(&fem, &t, 60.0, &cfg, 11).unwrap();
    let b = evaluate_design(&fem, &t, 60.0, &cfg, 11).unwrap();
    assert_eq!(a, b);
    // particles stiffen a soft matrix
    assert!(a.k_theta > fem.mesh().boundary.phase_modulus(20.0, 0.3));
    assert!(evaluate_design(&fem, &t, 60.0, &EvalConfig { repeats: 0, ..Default::default() }, 1).is_err());
    assert!(evaluate_design(&fem, &t, 0.0, &cfg, 1).is_err());
}

#[test]
fn infeasible_packing_fails_every_repeat() {
    let fem = Fem::new(Dims::Two, 16, FemConfig::default()).unwrap();
    let t = theta(20.0, 0.3, 300.0, 0.2, 0.2, 0.9);
    let cfg = EvalConfig { repeats: 2, ..Default::default() };
    assert!(evaluate_design(&fem, &t, 60.0, &cfg, 1).is_err());
}

#[test]
fn frac_examples() {
    let rs: Vec<_> = [0.005, 0.02, 0.08]
        .iter()
        .map(|e| result(100.0 * (1.0 + e), 100.0, [[10.0, 0.1, 1.0], [400.0, 0.4, 9.0]]))
        .collect();
    assert!((frac_metric(&rs, MarginKind::Relative, 0.01).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(frac_metric(&rs, MarginKind::Relative, f64::INFINITY).unwrap(), 1.0);
    assert!((frac_metric(&rs, MarginKind::Absolute, 5.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(frac_metric(&[], MarginKind::Relative, 0.01).is_err());
}

#[test]
fn cov_counts_matrix_and_particle_chunks_jointly() {
    let catalog = generate_synthetic_catalog(5, 2000).unwrap();
    let total = catalog.nonempty_chunks() as f64;
    let recs: Vec<&MaterialRecord> = catalog.records().iter().take(400).collect();
    let a = recs[0].properties();
    let b = recs
        .iter()
        .map(|r| r.properties())
        .find(|p| chunk_index(*p) != chunk_index(a))
        .unwrap();
    let rs = vec![result(100.0, 100.0, [a, b]), result(100.0, 100.0, [a, a]), result(200.0, 100.0, [b, b])];
    assert_eq!(cov_metric(&rs, MarginKind::Relative, 0.01, &catalog), 2.0 / total);
    assert_eq!(cov_metric(&rs[1..2], MarginKind::Relative, 0.01, &catalog), 1.0 / total);
    assert_eq!(cov_metric(&rs[2..], MarginKind::Relative, 0.01, &catalog), 0.0);

    let report = metric_report(&rs, &catalog).unwrap();
    assert_eq!(report.len(), 5);
    assert!(report.iter().all(|m| (0.0..=1.0).contains(&m.frac) && (0.0..=1.0).contains(&m.cov)));
}

#[test]
fn bounds_check_flags_only_outliers() {
    let fem = Fem::new(Dims::Two, 16, FemConfig::default()).unwrap();
    let b = fem.mesh().boundary;
    let t = theta(50.0, 0.3, 300.0, 0.2, 0.1, 0.2);
    let (km, kp) = (b.phase_modulus(50.0, 0.3), b.phase_modulus(300.0, 0.2));
    let homogeneous = theta(50.0, 0.3, 50.0, 0.3, 0.1, 0.2);
    let samples = vec![
        (homogeneous, 0.2, km),
        (t, 0.0, km),
        (t, 0.5, 0.5 * (km + kp)),
        (t, 0.3, 1.1 * (0.7 * km + 0.3 * kp)),
        (t, 0.3, 0.95 / (0.7 / km + 0.3 / kp)),
    ];
    let r = bounds_check(&fem, &samples);
    assert_eq!(r.outside, 2, "{r:?}");
    assert_eq!(r.violations[0].index, 3);
    assert!((r.violations[1].relative - 0.05).abs() < 1e-9);
    assert!((r.fraction_outside - 0.4).abs() < 1e-12);
    assert!((r.max_relative_violation - 0.1).abs() < 1e-9);
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = generate_synthetic_catalog(5, 500).unwrap();
    let r = result(101.0, 100.0, [[10.0, 0.1, 1.0], [400.0, 0.4, 9.0]]);
    let rows = vec![ReportRow::new(7, 0, 99.0, 0.01, 0.02, &r)];
    write_csv(&dir.path().join("eval.csv"), &rows).unwrap();
    let text = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(text.starts_with("seed,chain,e_m"));
    assert_eq!(text.lines().count(), 2);

    let summary = summarize(&[r], &catalog).unwrap();
    write_json(&dir.path().join("summary.json"), &summary).unwrap();
    let back: Summary = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(back, summary);

    let svg = histogram_svg(&[1.0, 2.0, 2.5, f64::NAN], 4, "K <GPa>");
    assert!(svg.starts_with("<svg") && svg.contains("&lt;GPa&gt;"));
    assert_eq!(svg.matches("<rect").count(), 4);
}

fn arb_results() -> impl Strategy<Value = Vec<EvalResult>> {
    prop::collection::vec((1.0f64..400.0, 0.0f64..500.0, 0.0f64..500.0), 1..30).prop_map(|v| {
        v.into_iter()
            .map(|(k, e_m, e_p)| result(k, 150.0, [[e_m, 0.2, 1.0], [e_p, 0.3, 5.0]]))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frac_is_monotone_in_margin(rs in arb_results(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(frac_metric(&rs, MarginKind::Relative, lo).unwrap() <= frac_metric(&rs, MarginKind::Relative, hi).unwrap());
        prop_assert!(frac_metric(&rs, MarginKind::Absolute, 100.0 * lo).unwrap() <= frac_metric(&rs, MarginKind::Absolute, 100.0 * hi).unwrap());
    }

    #[test]
    fn cov_grows_with_superset(rs in arb_results(), cut in 0usize..30) {
        let catalog = generate_synthetic_catalog(1, 500).unwrap();
        let sub = &rs[..cut.min(rs.len())];
        let m = f64::INFINITY;
        let whole = cov_metric(&rs, MarginKind::Relative, m, &catalog);
        prop_assert!(cov_metric(sub, MarginKind::Relative, m, &catalog) <= whole);
        prop_assert!(whole <= 1.0 + 1e-12 || catalog.nonempty_chunks() < 2);
    }

    #[test]
    fn retargeting_recomputes_errors(k in 1.0f64..400.0, star in 1.0f64..400.0) {
        let r = result(k, star, [[1.0, 0.1, 1.0], [2.0, 0.1, 1.0]]);
        let d = r.with_target(2.0 * star);
        prop_assert_eq!(d.eps, (k - 2.0 * star).abs());
        prop_assert_eq!(d.eps_r, d.eps / (2.0 * star));
        prop_assert_eq!(d.k_theta, k);
    }
}

use matdiff::backprojection::{
    backproject, detect_particles, fit_gmm2, fit_material_gmm, prune_centers, GmmConfig,
};
use matdiff::grid::{Dims, Grid};
use matdiff::materials::generate_synthetic_catalog;
use matdiff::microstructure::{generate_dataset, rasterize, DesignParams, ParticleLayout};
use matdiff::rng::{fill_normal, stream_rng};
use proptest::prelude::*;

#[test]
fn gmm_recovers_separated_clusters() {
    let sigma = 0.01;
    let means = [[0.3, -0.2, 0.5], [-0.4, 0.6, -0.1]];
    let mut noise = vec![0.0; 3 * 4000];
    fill_normal(&mut stream_rng(3, 0), &mut noise);
    let pts: Vec<[f64; 3]> = (0..4000)
        .map(|i| {
            let m = means[usize::from(i % 4 == 0)];
            std::array::from_fn(|d| m[d] + sigma * noise[3 * i + d])
        })
        .collect();
    let fit = fit_gmm2(&pts, &GmmConfig::default()).unwrap();
    for k in 0..2 {
        for d in 0..3 {
            assert!((fit.means[k][d] - means[k][d]).abs() < 1e-3);
        }
    }
    let v_m = fit.variances[0] + fit.variances[1];
    assert!((v_m - 2.0 * sigma * sigma).abs() <= 0.2 * 2.0 * sigma * sigma, "{v_m}");
}

#[test]
fn constant_grid_is_single_material() {
    let g = Grid::filled(Dims::Two, 16, [0.2, 0.1, -0.3]);
    let fit = fit_material_gmm(&g);
    assert!(fit.single_material);
    assert_eq!(fit.v_m, 0.0);
    let cat = generate_synthetic_catalog(1, 50).unwrap();
    let bp = backproject(&g, &cat);
    assert_eq!(bp.theta_hat.f_p, 0.0);
    assert_eq!(bp.r_p, None);
    assert_eq!(bp.theta_hat.matrix_id, bp.theta_hat.particle_id);
}

#[test]
fn centred_circle_radius() {
    let cat = generate_synthetic_catalog(2, 50).unwrap();
    let recs = cat.records();
    let theta = DesignParams::from_materials(&recs[0], &recs[1], 8.0 / 64.0, 0.05);
    let layout = ParticleLayout {
        dims: Dims::Two,
        radius: 8.0 / 64.0,
        centers: vec![[0.5, 0.5, 0.0]],
    };
    let g = rasterize(&theta, &layout, 64);
    let fit = fit_material_gmm(&g);
    assert_eq!(fit.v_m, 0.0);
    let det = detect_particles(&fit.assignment, Dims::Two, 64);
    assert_eq!(det.centers.len(), 1);
    assert!((det.radii[0] - 8.0).abs() <= 0.5, "{:?}", det.radii);
    let bp = backproject(&g, &cat);
    assert_eq!(bp.theta_hat.matrix_id, Some(recs[0].id));
    assert_eq!(bp.theta_hat.particle_id, Some(recs[1].id));
    assert!(bp.d_m <= 1e-5);
}

#[test]
fn all_foreground_is_rejected_by_the_boundary_rule() {
    let labels = vec![1u8; 256];
    let det = detect_particles(&labels, Dims::Two, 16);
    assert!(det.rejected.is_some());
    assert_eq!(det.f_p_hat, 0.0);
}

#[test]
fn clean_samples_roundtrip() {
    let cat = generate_synthetic_catalog(7, 200).unwrap();
    for (dims, side, n) in [(Dims::Two, 64, 60), (Dims::Three, 32, 6)] {
        let ds = generate_dataset(&cat, n, dims, side, 11).unwrap();
        let mut count_ok = 0;
        for i in 0..n {
            let s = &ds.manifest.samples[i];
            let bp = backproject(&ds.grid(i), &cat);
            assert!(bp.d_m <= 1e-5, "sample {i}: d_m {}", bp.d_m);
            if s.particle_count > 0 {
                assert_eq!(bp.theta_hat.matrix_id, s.theta.matrix_id, "sample {i}");
                assert_eq!(bp.theta_hat.f_p, s.realized_fraction, "sample {i}");
                let r = bp.r_p.unwrap();
                assert!((r - s.theta.r_p).abs() < 0.03, "sample {i}: {r} vs {}", s.theta.r_p);
            }
            count_ok += usize::from(bp.particle_count == s.particle_count);
        }
        // at 32³ the smallest particles have no skeleton point two elements deep
        if dims == Dims::Two {
            assert!(count_ok * 10 >= n * 9, "{count_ok}/{n} exact counts");
        }
    }
}

proptest! {
    #[test]
    fn pruning_keeps_the_strongest_point(
        pts in proptest::collection::vec(((0usize..20, 0usize..20), 0.5f64..6.0), 1..40)
    ) {
        let points: Vec<([usize; 3], f64)> = pts.iter().map(|&((a, b), d)| ([a, b, 0], d)).collect();
        let kept = prune_centers(&points, 0.0);
        let max = points.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        prop_assert!(kept.iter().any(|p| p.1 == max));
        // survivors never lie within each other's radius
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                let d = ((a.0[0] as f64 - b.0[0] as f64).powi(2) + (a.0[1] as f64 - b.0[1] as f64).powi(2)).sqrt();
                prop_assert!(d > a.1.min(b.1) || d > a.1.max(b.1));
            }
        }
    }

    #[test]
    fn foreground_counts_are_complementary(bits in proptest::collection::vec(0u8..2, 64)) {
        let det = detect_particles(&bits, Dims::Two, 8);
        let ones = bits.iter().filter(|&&b| b == 1).count();
        let h = &det.hypotheses;
        prop_assert_eq!(h[0].foreground_elements + h[1].foreground_elements, 64);
        prop_assert_eq!(h[1].foreground_elements, ones);
    }
}

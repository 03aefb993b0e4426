use matdiff::diffusion::{build_schedule, convert, ddim_step, q_sample, trailing_timesteps, velocity};
use matdiff::rng::fill_normal;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_variance_matches_schedule() {
    let s = build_schedule(1000, 1e-5, 1e-2, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    let mut eps = vec![0.0; n];
    fill_normal(&mut rng, &mut eps);
    for t in [50, 400, 900] {
        let x = q_sample(&vec![0.0; n], t, &eps, &s);
        let var = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = 1.0 - s.alpha_bar[t];
        // standard error of a variance estimate is ~ sqrt(2/n) * var
        assert!((var - want).abs() < 3.0 * (2.0 / n as f64).sqrt() * want + 1e-12, "{t}: {var} vs {want}");
    }
}

#[test]
fn exact_predictions_preserve_unit_variance() {
    let s = build_schedule(1000, 1e-5, 1e-2, true).unwrap();
    let ts = trailing_timesteps(1000, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let mut x0 = vec![0.0; n];
    fill_normal(&mut rng, &mut x0);
    for eta in [0.0, 1.0] {
        let mut eps = vec![0.0; n];
        fill_normal(&mut rng, &mut eps);
        let mut x = q_sample(&x0, ts[0], &eps, &s);
        for i in 0..ts.len() - 1 {
            let mut z = vec![0.0; n];
            fill_normal(&mut rng, &mut z);
            x = ddim_step(&x, &x0, ts[i], Some(ts[i + 1]), eta, &z, &s);
            let var = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.03, "eta {eta}, step {i}: {var}");
        }
    }
}

#[test]
fn eta_zero_ignores_noise() {
    let s = build_schedule(1000, 1e-5, 1e-2, true).unwrap();
    let a = ddim_step(&[0.4, 1.2], &[0.1, -0.3], 500, Some(490), 0.0, &[1.0, 2.0], &s);
    let b = ddim_step(&[0.4, 1.2], &[0.1, -0.3], 500, Some(490), 0.0, &[-5.0, 0.0], &s);
    assert_eq!(a, b);
}

#[test]
fn oracle_reconstruction_with_deterministic_sampler() {
    let s = build_schedule(1000, 1e-5, 1e-2, true).unwrap();
    let ts = trailing_timesteps(1000, 100).unwrap();
    let x0 = vec![0.7, -0.4, 0.05, -0.99];
    let mut x = vec![0.3, -1.1, 0.8, 2.0];
    for (i, &t) in ts.iter().enumerate() {
        let (ab, bb) = s.coefficients(t);
        // exact v of x0 given x: v = (√ᾱ x − x₀)/√(1−ᾱ)
        let v: Vec<f64> = x.iter().zip(&x0).map(|(x, x0)| (ab * x - x0) / bb).collect();
        let (_, x0_hat) = convert(&v, &x, t, &s);
        x = ddim_step(&x, &x0_hat, t, ts.get(i + 1).copied(), 0.0, &[0.0; 4], &s);
    }
    for (a, b) in x.iter().zip(&x0) {
        assert!((a - b).abs() <= 1e-6);
    }
}

proptest! {
    #[test]
    fn conversions_are_inverse(x0 in -1.0f64..1.0, e in -3.0f64..3.0, t in 0usize..1000) {
        let s = build_schedule(1000, 1e-5, 1e-2, true).unwrap();
        let xt = q_sample(&[x0], t, &[e], &s);
        let v = velocity(&[x0], &[e], t, &s);
        let (e2, x2) = convert(&v, &xt, t, &s);
        prop_assert!((e2[0] - e).abs() < 1e-12 && (x2[0] - x0).abs() < 1e-12);
    }

    #[test]
    fn trailing_is_strictly_decreasing(steps in 2usize..2000, frac in 0.0f64..1.0) {
        let n = 1 + ((steps - 1) as f64 * frac) as usize;
        let ts = trailing_timesteps(steps, n).unwrap();
        prop_assert_eq!(ts[0], steps - 1);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}

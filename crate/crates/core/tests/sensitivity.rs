use matdiff::fem::{Fem, FemConfig, SolverKind};
use matdiff::grid::{Dims, Grid};
use matdiff::materials::normalize;
use matdiff::sensitivity::{
    adjoint_gradient, compare_gradients, finite_difference_gradient, objective, GradientUnits, ObjectiveSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_two_phase(dims: Dims, side: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = || normalize([rng.random_range(10.0..450.0), rng.random_range(0.05..0.45), rng.random_range(1.0..9.0)]).value;
    let (a, b) = (mat(), mat());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut g = Grid::filled(dims, side, a);
    for e in 0..g.n_elements() {
        if rng.random_bool(0.5) {
            g.set_element(e, b);
        }
    }
    g
}

fn direct(dims: Dims, side: usize) -> Fem {
    Fem::new(
        dims,
        side,
        FemConfig {
            solver: SolverKind::Direct,
            ..FemConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn adjoint_matches_finite_differences_2d() {
    let fem = direct(Dims::Two, 4);
    for seed in 0..3 {
        let g = random_two_phase(Dims::Two, 4, seed);
        let k = fem.bulk_modulus_of(&g).unwrap();
        let spec = ObjectiveSpec::j1(0.6 * k);
        let adj = adjoint_gradient(&fem, &g, &spec, GradientUnits::Normalized).unwrap();
        let fd = finite_difference_gradient(&fem, &g, &spec, 1e-4, GradientUnits::Normalized).unwrap();
        let check = compare_gradients(&adj.gradient, &fd, 1e-4, 1e-12, 1e-10);
        assert!(check.passed(), "{check:?}");
    }
}

#[test]
fn adjoint_matches_finite_differences_3d_cg() {
    let fem = Fem::new(Dims::Three, 3, FemConfig::default()).unwrap();
    let g = random_two_phase(Dims::Three, 3, 9);
    let k = fem.bulk_modulus_of(&g).unwrap();
    let spec = ObjectiveSpec::j2(1.3 * k, 0.5);
    let adj = adjoint_gradient(&fem, &g, &spec, GradientUnits::Physical).unwrap();
    let fd = finite_difference_gradient(&fem, &g, &spec, 1e-4, GradientUnits::Physical).unwrap();
    let check = compare_gradients(&adj.gradient, &fd, 1e-4, 1e-12, 1e-10);
    assert!(check.passed(), "{check:?}");
}

#[test]
fn e_gradient_sign_follows_misfit() {
    let fem = direct(Dims::Two, 6);
    let g = random_two_phase(Dims::Two, 6, 4);
    let k = fem.bulk_modulus_of(&g).unwrap();
    for (target, sign) in [(0.5 * k, 1.0), (2.0 * k, -1.0)] {
        let r = adjoint_gradient(&fem, &g, &ObjectiveSpec::j1(target), GradientUnits::Physical).unwrap();
        assert!(r.gradient.elements().all(|x| x[0] * sign > 0.0));
        assert!(r.gradient.elements().all(|x| x[2] == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn directional_derivative_converges_quadratically(seed in 0u64..500) {
        let fem = direct(Dims::Two, 4);
        let g = random_two_phase(Dims::Two, 4, seed);
        let k = fem.bulk_modulus_of(&g).unwrap();
        let spec = ObjectiveSpec::j2(0.7 * k, 1e-2);
        let r = adjoint_gradient(&fem, &g, &spec, GradientUnits::Normalized).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let noise: Vec<f64> = (0..g.as_slice().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir = Grid::from_vec(g.dims(), g.side(), noise).unwrap();
        let slope = r.gradient.dot(&dir);
        let j = |h: f64| {
            let x = g.map_with(&dir, |a, d| a + h * d);
            objective(&spec, fem.bulk_modulus_of(&x).unwrap(), &x)
        };
        // central differences: error shrinks ~4x when h halves
        let err = |h: f64| ((j(h) - j(-h)) / (2.0 * h) - slope).abs();
        let (e1, e2) = (err(2e-2), err(1e-2));
        prop_assert!(e2 < 0.35 * e1 || e2 < 1e-9 * slope.abs().max(1.0), "{e1} {e2}");
    }
}

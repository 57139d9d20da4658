use homcorr::elliptic::{correctors, green_column, solve, SolveConfig};
use homcorr::environment::{sample_environment, CoefficientMap};
use homcorr::kernels::{kernel_k, torus_grad_gh};
use homcorr::lattice::{apply_elliptic, ScalarField, TorusGeometry};
use nalgebra::DMatrix;

#[test]
fn solve_inverts_the_operator_on_a_random_medium() {
    let g = TorusGeometry::new(3, 6).unwrap();
    let env = sample_environment(&g, &CoefficientMap::default(), 11, 3).unwrap();
    let f = ScalarField::from_fn(&g, |x| ((x * 7) % 5) as f64 - 2.0);
    let u = solve(&env.a, 0.1, &f, &SolveConfig::with_tolerance(1e-12)).unwrap();
    let back = apply_elliptic(0.1, &env.a, &u).unwrap();
    assert!(back.max_abs_diff(&f) < 1e-9 * f.max_abs());
}

#[test]
fn constant_medium_has_no_corrector_and_homogenized_green_gradient() {
    let g = TorusGeometry::new(3, 8).unwrap();
    let env = sample_environment(&g, &CoefficientMap::Constant { value: 1.0 }, 1, 0).unwrap();
    let config = SolveConfig::with_tolerance(1e-12);
    let set = correctors(&env.a, 0.0, &config).unwrap();
    assert!(set.combine(&[1.0, 0.0, 0.0]).unwrap().max_abs() < 1e-10);
    let grad = green_column(&env.a, 0.0, 0, &config).unwrap().gradient();
    let reference = torus_grad_gh(&[1.0; 3], &g).unwrap();
    assert!(grad.max_abs_diff(&reference) < 1e-9);
}

#[test]
fn isotropic_kernel_is_the_laplacian_green_function() {
    let q = DMatrix::identity(3, 3);
    for x in [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 1.0]] {
        let r = x.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let k = kernel_k(&q, &[1.0; 3], &x).unwrap();
        assert!((k.value() - 1.0 / (4.0 * std::f64::consts::PI * r)).abs() < 1e-10);
        assert!(k.relative_gap() < 1e-4);
    }
}

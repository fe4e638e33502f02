//! Property tests for the structural invariants across generated instances.

use polyhjb::feedback::GainSet;
use polyhjb::leray::reduce_system;
use polyhjb::linalg::{self, Mat, Vector};
use polyhjb::problems::{make_burgers, make_oseen_mac, make_random_quad, BaseFlow};
use polyhjb::riccati::solve_are;
use polyhjb::simulate::{self, SimOptions};
use polyhjb::tensor_lyap::{assemble_f, gain_k3_dense, solve_dense_k3};
use polyhjb::verify::{self, OracleOptions};
use proptest::prelude::*;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_systems_are_deterministic_and_consistent(n in 2usize..7, m in 1usize..3, seed in 0u64..10_000, stable: bool) {
        let a = make_random_quad(n, m, seed, stable);
        let b = make_random_quad(n, m, seed, stable);
        prop_assert_eq!(&a.a, &b.a);
        prop_assert_eq!(&a.b, &b.b);
        prop_assert_eq!(a.h.entries(), b.h.entries());
        prop_assert_eq!(a.e.clone(), Mat::identity(n, n));
        prop_assert_eq!(a.c.clone(), Mat::identity(n, n));
        if stable {
            prop_assert!(linalg::spectral_abscissa(&a.a) <= -0.5 + 1e-10);
        }
        let y = Vector::from_fn(n, |i, _| (i as f64 + 1.0).sin());
        let z = Vector::from_fn(n, |i, _| (i as f64 * 0.7).cos());
        let hyz = a.h.eval_bilinear(y.as_slice(), z.as_slice()).unwrap();
        let hzy = a.h.eval_bilinear(z.as_slice(), y.as_slice()).unwrap();
        prop_assert!((&hyz - &hzy).norm() <= 1e-13 * (a.h.norm() * y.norm() * z.norm()).max(1e-300));
    }

    #[test]
    fn leray_invariants_on_mac_grids(nx in 3usize..6, ny in 3usize..6, amp in 0.0f64..2.0) {
        let sys = make_oseen_mac(nx, ny, 0.1, 0.0, &BaseFlow::Streamfunction { amplitude: amp }, [0.2, 0.8, 0.0, 0.5], 1).unwrap();
        let red = reduce_system(&sys).unwrap();
        prop_assert!(red.defects.max() <= 1e-12);
        let g = sys.g.as_ref().unwrap();
        prop_assert_eq!(red.n(), sys.n() - g.ncols());
        prop_assert!((g.transpose() * &red.theta_r).norm() <= 1e-12 * g.norm());
    }

    #[test]
    fn riccati_alpha_scaling(seed in 0u64..500, alpha in 0.05f64..5.0) {
        let red = reduce_system(&make_random_quad(4, 2, seed, true)).unwrap();
        let ric = solve_are(&red, alpha).unwrap();
        let mut scaled = red.clone();
        scaled.b = &red.b / alpha.sqrt();
        let ric1 = solve_are(&scaled, 1.0).unwrap();
        prop_assert!((&ric.pi - &ric1.pi).norm() <= 1e-10 * ric.pi.norm());
        prop_assert!(ric.closed_loop_abscissa(&red.e).unwrap() < 0.0);
    }

    #[test]
    fn f_symmetric_and_solution_symmetric(seed in 0u64..500) {
        let red = reduce_system(&make_random_quad(3, 1, seed, true)).unwrap();
        let ric = solve_are(&red, 1.0).unwrap();
        let f = assemble_f(&red, &ric.pi).unwrap();
        prop_assert!(f.symmetry_defect() <= 1e-12);
        let x = solve_dense_k3(&red, &ric, &f).unwrap();
        prop_assert!(x.symmetry_defect() <= 1e-10);
    }

    #[test]
    fn gain_scales_with_rhs(seed in 0u64..500, c in -4.0f64..4.0) {
        let red = reduce_system(&make_random_quad(3, 2, seed, true)).unwrap();
        let ric = solve_are(&red, 1.0).unwrap();
        let f = assemble_f(&red, &ric.pi).unwrap();
        let x = solve_dense_k3(&red, &ric, &f).unwrap();
        let xc = solve_dense_k3(&red, &ric, &f.scaled(c)).unwrap();
        let k = gain_k3_dense(&red, 1.0, &x).unwrap();
        let kc = gain_k3_dense(&red, 1.0, &xc).unwrap();
        let want: Vec<f64> = k.kt.iter().map(|v| v * c).collect();
        prop_assert!(max_abs_diff(&kc.kt, &want) <= 1e-12 * (k.norm() * c.abs()).max(1e-300) + 1e-15);
    }

    #[test]
    fn projected_perturbation_satisfies_constraint(seed in 0u64..10_000, ratio in 1e-4f64..1e-2) {
        let sys = make_oseen_mac(4, 4, 0.1, 0.0, &BaseFlow::Zero, [0.2, 0.8, 0.0, 0.5], 1).unwrap();
        let red = reduce_system(&sys).unwrap();
        let d = simulate::make_perturbation(&Vector::from_element(sys.n(), 1.0), ratio, seed);
        let y0 = simulate::initial_state(&red, &d).unwrap();
        prop_assert!((sys.g.as_ref().unwrap().transpose() * red.lift(&y0)).norm() <= 1e-10);
    }
}

#[test]
fn cost_stable_under_tolerance_refinement() {
    let sys = make_burgers(16, 0.05, 1.0, &[[0.2, 0.4], [0.6, 0.8]]).unwrap();
    let red = reduce_system(&sys).unwrap();
    let ric = solve_are(&red, 1.0).unwrap();
    let g = GainSet::new(&red, &ric, None, 2).unwrap();
    let y0 = Vector::from_fn(16, |i, _| 0.05 * ((i as f64 + 1.0) * 0.4).sin());
    let run = |rtol: f64| {
        let opts = SimOptions { rtol, atol: 1e-8 * y0.norm(), ..SimOptions::default() };
        simulate::integrate_closed_loop(&red, &g, &y0, 20.0, opts).unwrap().j_total()
    };
    let (coarse, fine) = (run(1e-3), run(1e-5));
    assert!((coarse - fine).abs() <= 5e-3 * fine, "{coarse} vs {fine}");
}

fn random2() -> (polyhjb::leray::ReducedSystem, GainSet) {
    let red = reduce_system(&make_random_quad(2, 1, 1, false)).unwrap();
    let ric = solve_are(&red, 1.0).unwrap();
    let f = assemble_f(&red, &ric.pi).unwrap();
    let x = solve_dense_k3(&red, &ric, &f).unwrap();
    let k3 = gain_k3_dense(&red, 1.0, &x).unwrap();
    let g = GainSet::new(&red, &ric, Some(k3), 3).unwrap();
    (red, g)
}

#[test]
fn oracle_value_stable_under_grid_doubling() {
    let (red, g) = random2();
    let y0 = Vector::from_vec(vec![0.016, -0.012]);
    let coarse = verify::ocp_oracle(&red, 1.0, &g.pi, &y0, None, 1000, 1e-8).unwrap();
    let fine = verify::ocp_oracle(&red, 1.0, &g.pi, &y0, Some(coarse.horizon), 2000, 1e-8).unwrap();
    assert!((coarse.j_star - fine.j_star).abs() <= 1e-3 * fine.j_star, "{} vs {}", coarse.j_star, fine.j_star);
}

#[test]
fn rate_slopes_stable_under_halved_scale_range() {
    let (red, g) = random2();
    let dirs = vec![Vector::from_vec(vec![0.8, -0.6])];
    let full: Vec<f64> = (0..5).map(|i| 0.02 * 10f64.powf(-0.5 * i as f64)).collect();
    let half: Vec<f64> = (0..3).map(|i| 0.02 * 10f64.powf(-0.5 * i as f64)).collect();
    let opts = OracleOptions::default();
    let a = verify::rate_check(&red, &g, &dirs, &full, opts).unwrap();
    let b = verify::rate_check(&red, &g, &dirs, &half, opts).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.degree, rb.degree);
        assert!((ra.fitted_slope - rb.fitted_slope).abs() <= 0.15, "d{}: {} vs {}", ra.degree, ra.fitted_slope, rb.fitted_slope);
    }
}

mod common;

use std::f64::consts::PI;

use common::{fem_l2_error, loglog_slope};
use hampic::fem::{assemble_stiffness, eval_field_at, solve_poisson, Boundary, FemSpace, SolverConfig};

fn slope_over(cells: &[usize], len: f64, err: impl Fn(usize) -> f64) -> f64 {
    let h: Vec<f64> = cells.iter().map(|&n| len / n as f64).collect();
    let e: Vec<f64> = cells.iter().map(|&n| err(n)).collect();
    loglog_slope(&h, &e)
}

#[test]
fn periodic_sine_is_second_order() {
    let s = slope_over(&[16, 32, 64, 128], 2.0 * PI, |n| {
        fem_l2_error(&[(0.0, 2.0 * PI)], n, 1, Boundary::Periodic, |x| x[0].sin(), |x| x[0].sin())
    });
    assert!((s - 2.0).abs() <= 0.1, "slope {s}");
}

#[test]
fn dirichlet_sine_is_second_order() {
    let s = slope_over(&[8, 16, 32, 64], 1.0, |n| {
        fem_l2_error(&[(0.0, 1.0)], n, 1, Boundary::DirichletZero, |x| PI * PI * (PI * x[0]).sin(), |x| (PI * x[0]).sin())
    });
    assert!((s - 2.0).abs() <= 0.1, "slope {s}");
}

#[test]
fn bilinear_elements_are_second_order() {
    let exact = |x: &[f64; 3]| (PI * x[0]).sin() * (PI * x[1]).sin();
    let s = slope_over(&[8, 16, 32], 1.0, |n| {
        fem_l2_error(&[(0.0, 1.0), (0.0, 1.0)], n, 1, Boundary::DirichletZero, |x| 2.0 * PI * PI * exact(x), exact)
    });
    assert!((s - 2.0).abs() <= 0.1, "dirichlet slope {s}");

    let exact = |x: &[f64; 3]| x[0].cos() * x[1].sin();
    let s = slope_over(&[8, 16, 32], 2.0 * PI, |n| {
        fem_l2_error(&[(0.0, 2.0 * PI), (0.0, 2.0 * PI)], n, 1, Boundary::Periodic, |x| 2.0 * exact(x), exact)
    });
    assert!((s - 2.0).abs() <= 0.1, "periodic slope {s}");
}

#[test]
fn quadratic_elements_are_third_order() {
    let s = slope_over(&[4, 8, 16, 32], 1.0, |n| {
        fem_l2_error(&[(0.0, 1.0)], n, 2, Boundary::DirichletZero, |x| PI * PI * (PI * x[0]).sin(), |x| (PI * x[0]).sin())
    });
    assert!((s - 3.0).abs() <= 0.15, "slope {s}");
}

// E_h = −φ_h' should approach −cos at the nodes, at least to first order.
#[test]
fn nodal_field_error_is_at_least_first_order() {
    let err = |n: usize| {
        let space = FemSpace::new(&[(0.0, 2.0 * PI)], &[n], 1, Boundary::Periodic).unwrap();
        let h = 2.0 * PI / n as f64;
        let mut load = vec![0.0; space.n_dofs()];
        // Exact hat-function moments of sin.
        for (i, f) in load.iter_mut().enumerate() {
            let x = i as f64 * h;
            *f = x.sin() * 2.0 * (1.0 - h.cos()) / h;
        }
        let phi = solve_poisson(&assemble_stiffness(&space), &load, &SolverConfig { tol: 1e-13, max_iter: None }).unwrap().phi;
        // One-sided nodal gradients (cell to the right of each node).
        (0..n)
            .map(|i| {
                let x = i as f64 * h + 1e-9;
                (eval_field_at(&space, &phi, &[x]).unwrap()[0] + x.cos()).abs()
            })
            .fold(0.0, f64::max)
    };
    let s = slope_over(&[16, 32, 64, 128], 2.0 * PI, err);
    assert!(s >= 0.9, "slope {s}");
}

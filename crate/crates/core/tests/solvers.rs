use fsi_core::bench::preset;
use fsi_core::fem::{apply_dirichlet, SparseSystem};
use fsi_core::linalg::{pcg, IdentityPreconditioner, JacobiPreconditioner};

#[test]
fn jacobi_beats_plain_cg_on_cavity_diffusion() {
    let case = preset("cavity-2-coarse").unwrap();
    let problem = case.build_problem().unwrap();
    let dt = case.dt;
    let mut a = problem.mass_vec.clone();
    a.scale(1.0 / dt);
    a.axpy(1.0, &problem.viscous);
    let n = a.nrows();
    // lid-driven load, solve from rest
    let mut sys = SparseSystem {
        matrix: a,
        rhs: vec![0.0; n],
        symmetric: true,
    };
    let vals = problem.bc.values(&problem.bg, 0.0);
    apply_dirichlet(&mut sys, &problem.bc.dofs, &vals).unwrap();

    let mut x0 = vec![0.0; n];
    let plain = pcg(&sys.matrix, &sys.rhs, &mut x0, &IdentityPreconditioner, 1e-10, 10_000).unwrap();
    let mut x1 = vec![0.0; n];
    let jacobi = JacobiPreconditioner::new(&sys.matrix).unwrap();
    let pre = pcg(&sys.matrix, &sys.rhs, &mut x1, &jacobi, 1e-10, 10_000).unwrap();
    assert!(plain.converged && pre.converged);
    assert!(pre.iterations < plain.iterations, "{} vs {}", pre.iterations, plain.iterations);
    let diff = x0.iter().zip(&x1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-8, "{diff}");
}

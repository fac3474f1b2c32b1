use nalgebra::DMatrix;

use trophic_core::blocksparse::BlockLayout;
use trophic_core::dynamics;
use trophic_core::network::{Network, NetworkConfig};

fn dense_radius(j: &trophic_core::dense::Matrix) -> f64 {
    let m = DMatrix::from_row_slice(j.rows(), j.cols(), j.as_slice());
    let schur = m.try_schur(1e-14, 10_000).expect("schur converges");
    schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn matrix_free_radius_matches_dense_eigenvalues() {
    let mut converged = 0;
    for seed in 0..12u64 {
        let layout = BlockLayout::new(4, 6, 2).unwrap();
        let mut c = NetworkConfig::new(layout, 1, 1);
        c.seed = seed;
        c.init.gain = 0.5 + 0.25 * seed as f64;
        let mut net = Network::new(c).unwrap();
        for t in 0..30 {
            let u = (t as f64 * 0.2).sin();
            net.train_step(&[u], &[(t as f64 * 0.2 + 0.2).sin()]).unwrap();
        }
        let u = [0.3];
        let j = dynamics::one_step_jacobian(&net.w, &net.w_in, &net.state.x, &u, &net.heads.b, &net.config.dynamics).unwrap();
        let exact = dense_radius(&j);
        let est = net.spectral_radius(&u, 3000).unwrap();
        if est.converged {
            converged += 1;
            assert!((est.radius - exact).abs() <= 1e-4 * exact, "seed {seed}: {} vs {exact}", est.radius);
        }
    }
    assert!(converged >= 9, "{converged}");
}

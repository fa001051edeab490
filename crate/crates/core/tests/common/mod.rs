#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ncs_core::{NetworkModel, SubsystemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// `F Fᵀ + shift·I` with F uniform in [-1, 1].
pub fn gram(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let f = uniform(rng, n, n, 1.0);
    &f * f.transpose() + DMatrix::identity(n, n) * shift
}

/// Random instance with PSD Q, P_terminal, noise covariances and PD R.
pub fn random_instance(seed: u64, l: usize, max_dim: usize, horizon: usize) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m0 = rng.random_range(0..=max_dim.min(2));
    let mut subsystems = Vec::new();
    for _ in 0..l {
        let n = rng.random_range(1..=max_dim);
        let m = rng.random_range(1..=max_dim);
        subsystems.push(SubsystemModel {
            a: uniform(&mut rng, n, n, 1.2),
            a_bar: uniform(&mut rng, n, n, 0.5),
            b: uniform(&mut rng, n, m, 1.0),
            b_bar: uniform(&mut rng, n, m, 0.3),
            b0: uniform(&mut rng, n, m0, 1.0),
            b0_bar: uniform(&mut rng, n, m0, 0.3),
            sigma_w: 0.5 * rng.random::<f64>(),
            sigma_v: gram(&mut rng, n, 0.0) * 0.1,
            mu: DVector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0),
            sigma_x0: gram(&mut rng, n, 0.0),
            p: rng.random::<f64>(),
        });
    }
    let nl: usize = subsystems.iter().map(|s| s.a.nrows()).sum();
    let ml: usize = m0 + subsystems.iter().map(|s| s.b.ncols()).sum::<usize>();
    NetworkModel {
        m0,
        horizon,
        subsystems,
        q: gram(&mut rng, nl, 0.0),
        r: gram(&mut rng, ml, 0.1),
        p_terminal: gram(&mut rng, nl, 0.0),
    }
}

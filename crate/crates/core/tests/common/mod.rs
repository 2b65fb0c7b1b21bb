#![allow(dead_code)]

use fqe_core::mdp::{Policy, TabularMdp};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simplex(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Random MDP with full-support rows bounded away from zero.
pub fn random_mdp(seed: u64, ns: usize, na: usize, horizon: usize) -> TabularMdp<f64> {
    let mut r = rng(seed);
    let mut t = Array3::zeros((ns, na, ns));
    for s in 0..ns {
        for a in 0..na {
            for (j, p) in simplex(&mut r, ns, 0.2).into_iter().enumerate() {
                t[[s, a, j]] = p;
            }
        }
    }
    let reward = Array2::from_shape_fn((ns, na), |_| r.random::<f64>());
    let xi = simplex(&mut r, ns, 0.2);
    TabularMdp::new(horizon, t, reward, xi).unwrap()
}

pub fn random_policy(seed: u64, ns: usize, na: usize) -> Policy<f64> {
    let mut r = rng(seed);
    let mut p = Array2::zeros((ns, na));
    for s in 0..ns {
        for (a, x) in simplex(&mut r, na, 0.3).into_iter().enumerate() {
            p[[s, a]] = x;
        }
    }
    Policy::new(p).unwrap()
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-300)
}

//! Instances shared by the integration and acceptance tests.
#![allow(dead_code)]

use mflq::{Mat, ModelSpec, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn s(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

/// `A=C=D=E=F=0, B=1, N=1, Q=1, G=0, T=1, x₀=1`: `P(t) = tanh(1-t)`.
pub fn tanh_spec(n_steps: usize) -> ModelSpec {
    ModelSpec::builder(1, 1, 1.0, n_steps)
        .b(s(1.0))
        .r(s(1.0))
        .q(s(1.0))
        .x0(Vector::from_element(1, 1.0))
        .build()
        .unwrap()
}

/// Scalar pure-jump instance: `dX = X(t-) μ̃(dt)` with one unit-rate atom.
pub fn pure_jump_spec(n_steps: usize) -> ModelSpec {
    ModelSpec::builder(1, 1, 1.0, n_steps)
        .r(s(1.0))
        .x0(Vector::from_element(1, 1.0))
        .atom("unit", 1.0, s(1.0), s(0.0), s(0.0), s(0.0))
        .build()
        .unwrap()
}

/// Two-dimensional instance with Brownian noise, two atoms and mean-field
/// coupling in every coefficient family.
pub fn mixed_spec(n_steps: usize) -> ModelSpec {
    ModelSpec::builder(2, 1, 1.0, n_steps)
        .a(Mat::from_row_slice(2, 2, &[0.1, 0.4, -0.3, 0.0]))
        .a_bar(Mat::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]))
        .b(Mat::from_row_slice(2, 1, &[0.5, 1.0]))
        .b_bar(Mat::from_row_slice(2, 1, &[0.2, -0.1]))
        .c(Mat::identity(2, 2) * 0.4)
        .c_bar(Mat::from_row_slice(2, 2, &[0.1, 0.0, 0.05, 0.1]))
        .d(Mat::from_row_slice(2, 1, &[0.2, 0.1]))
        .d_bar(Mat::from_row_slice(2, 1, &[0.1, 0.0]))
        .q(Mat::identity(2, 2))
        .q_bar(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.5]))
        .r(s(1.0))
        .r_bar(s(0.5))
        .g(Mat::identity(2, 2))
        .g_bar(Mat::identity(2, 2) * 0.3)
        .x0(Vector::from_vec(vec![1.0, -0.5]))
        .atom(
            "up",
            1.5,
            Mat::identity(2, 2) * 0.3,
            Mat::identity(2, 2) * 0.1,
            Mat::from_row_slice(2, 1, &[0.1, 0.0]),
            Mat::from_row_slice(2, 1, &[0.0, 0.1]),
        )
        .atom(
            "down",
            0.5,
            Mat::identity(2, 2) * -0.2,
            Mat::zeros(2, 2),
            Mat::from_row_slice(2, 1, &[0.0, 0.2]),
            Mat::zeros(2, 1),
        )
        .build()
        .unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat {
    let l = uniform(rng, n, n, 1.0);
    &l * l.transpose() * scale
}

/// Random valid instance with `n ≤ 3`, `m ≤ 2`, `K ≤ 2` and PSD costs.
pub fn random_spec(seed: u64, mean_field: bool) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=2);
    let k = rng.random_range(0..=2);
    let delta = 0.1;
    let mut b = ModelSpec::builder(n, m, 1.0, 200)
        .delta(delta)
        .a(uniform(&mut rng, n, n, 1.0))
        .b(uniform(&mut rng, n, m, 1.0))
        .c(uniform(&mut rng, n, n, 0.5))
        .d(uniform(&mut rng, n, m, 0.5))
        .q(psd(&mut rng, n, 1.0))
        .r(psd(&mut rng, m, 0.5) + Mat::identity(m, m) * delta)
        .g(psd(&mut rng, n, 1.0))
        .x0(Vector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0));
    if mean_field {
        b = b
            .a_bar(uniform(&mut rng, n, n, 0.5))
            .b_bar(uniform(&mut rng, n, m, 0.5))
            .c_bar(uniform(&mut rng, n, n, 0.3))
            .d_bar(uniform(&mut rng, n, m, 0.3))
            .q_bar(psd(&mut rng, n, 0.5))
            .r_bar(psd(&mut rng, m, 0.3))
            .g_bar(psd(&mut rng, n, 0.5));
    }
    for j in 0..k {
        let nu = 0.2 + 1.8 * rng.random::<f64>();
        let e = uniform(&mut rng, n, n, 0.4);
        let f = uniform(&mut rng, n, m, 0.4);
        let (e_bar, f_bar) = if mean_field {
            (uniform(&mut rng, n, n, 0.2), uniform(&mut rng, n, m, 0.2))
        } else {
            (Mat::zeros(n, n), Mat::zeros(n, m))
        };
        b = b.atom(&format!("atom{j}"), nu, e, e_bar, f, f_bar);
    }
    b.build().unwrap()
}

pub fn random_direction(seed: u64, spec: &ModelSpec) -> Vec<Vector> {
    mflq::simulator::random_direction(spec, seed)
}

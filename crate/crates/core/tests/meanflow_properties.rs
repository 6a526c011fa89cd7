mod common;

use common::{mixed_spec, random_spec};
use mflq::{propagate_mean, ControlLaw, ModelSpec, Vector};
use proptest::prelude::*;

fn with_x0(spec: &ModelSpec, x0: Vector) -> ModelSpec {
    let mut out = spec.clone();
    out.x0 = x0;
    out
}

fn open_loop(spec: &ModelSpec, f: impl Fn(usize, usize) -> f64) -> Vec<Vector> {
    (0..spec.n_steps).map(|i| Vector::from_fn(spec.m, |j, _| f(i, j))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mean_flow_is_linear(seed in 0u64..10_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let spec = random_spec(seed, true);
        let x = spec.x0.clone();
        let y = Vector::from_fn(spec.n, |i, _| 0.3 * i as f64 - 0.5);
        let u = open_loop(&spec, |i, j| (i as f64 * 0.05 + j as f64).sin());
        let v = open_loop(&spec, |i, j| (i as f64 * 0.02).cos() - j as f64);
        let uv: Vec<Vector> = u.iter().zip(&v).map(|(a, b)| a * alpha + b * beta).collect();

        let run = |x0: &Vector, ctrl: &[Vector]| {
            propagate_mean(&with_x0(&spec, x0.clone()), &ControlLaw::OpenLoop(ctrl.to_vec())).unwrap()
        };
        let combined = run(&(&x * alpha + &y * beta), &uv);
        let (a, b) = (run(&x, &u), run(&y, &v));
        for i in 0..=spec.n_steps {
            let expect = &a.ex[i] * alpha + &b.ex[i] * beta;
            let scale = 1.0 + expect.amax();
            prop_assert!((&combined.ex[i] - expect).amax() <= 1e-10 * scale);
        }
    }
}

#[test]
fn mean_trajectory_starts_at_x0_exactly() {
    let spec = mixed_spec(50);
    let u = open_loop(&spec, |i, _| i as f64 * 0.01);
    let traj = propagate_mean(&spec, &ControlLaw::OpenLoop(u)).unwrap();
    assert_eq!(traj.ex[0], spec.x0);
    assert_eq!(traj.ex.len(), 51);
}

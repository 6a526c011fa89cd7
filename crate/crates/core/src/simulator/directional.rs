//! Finite-difference Gâteaux derivatives of the simulated cost.
//!
//! All ensembles share the seed, so every perturbation sees the same noise.
//! The base point is simulated as a zero-amplitude perturbation so that all
//! points use the same particle mean-field closure. The scheme is then affine
//! in `ε` path by path, each path cost is an exact quadratic in `ε`, and the
//! parabola through the points recovers the derivative without truncation
//! error.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{estimate_cost, mean_field_cost, sample_std, simulate_paths_with, ControlLaw, CostEstimate, Recording, SimOptions};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::ModelSpec;

#[derive(Debug, Clone, Serialize)]
pub struct DirectionalReport {
    pub eps: Vec<f64>,
    /// `[J(base + ε v) - J(base)] / ε` for each `ε`.
    pub estimates: Vec<f64>,
    pub base_cost: CostEstimate,
    pub costs: Vec<CostEstimate>,
    /// Linear coefficient of the fitted parabola, the estimate of `⟨J'(u), v⟩`.
    pub linear: f64,
    pub linear_stderr: f64,
    /// Quadratic coefficient of the fitted parabola, the estimate of `J(0, v)`.
    pub quadratic: f64,
    pub quadratic_stderr: f64,
}

/// Least-squares weights `w` such that the coefficients of
/// `y ≈ c0 + c1 ε + c2 ε²` are `Σ_j w[j] y[j]` (one row per coefficient).
pub fn fit_weights(points: &[f64]) -> Result<[Vec<f64>; 3]> {
    let mut distinct = points.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidArgument("need at least two distinct nonzero eps values".into()));
    }
    let mut normal = Matrix3::zeros();
    for &e in points {
        let row = Vector3::new(1.0, e, e * e);
        normal += row * row.transpose();
    }
    let inv = normal
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("eps values do not determine a parabola".into()))?;
    let mut w: [Vec<f64>; 3] = Default::default();
    for (c, wc) in w.iter_mut().enumerate() {
        *wc = points
            .iter()
            .map(|&e| {
                let row = Vector3::new(1.0, e, e * e);
                (inv.row(c) * row)[0]
            })
            .collect();
    }
    Ok(w)
}

pub fn directional_derivative(
    spec: &ModelSpec,
    base: &ControlLaw,
    direction: &[Vector],
    eps_list: &[f64],
    paths: usize,
    seed: u64,
) -> Result<DirectionalReport> {
    if eps_list.iter().any(|e| !e.is_finite() || *e == 0.0) {
        return Err(Error::InvalidArgument("eps values must be finite and nonzero".into()));
    }
    let mut points = vec![0.0];
    points.extend_from_slice(eps_list);
    let weights = fit_weights(&points)?;

    let opts = SimOptions {
        recording: Recording::Summary,
        threads: None,
    };
    let mut costs = Vec::with_capacity(points.len());
    let mut path_costs = Vec::with_capacity(points.len());
    let mut field_costs = Vec::with_capacity(points.len());
    for &eps in &points {
        let law = ControlLaw::perturbed(base, direction, eps);
        let ens = simulate_paths_with(spec, &law, paths, seed, opts)?;
        costs.push(estimate_cost(spec, &ens));
        field_costs.push(mean_field_cost(spec, &ens));
        path_costs.push(ens.path_costs);
    }

    let coefficient = |c: usize| -> (f64, f64) {
        let w = &weights[c];
        let per_path: Vec<f64> = (0..paths)
            .map(|p| w.iter().zip(&path_costs).map(|(wj, pc)| wj * pc[p]).sum())
            .collect();
        let field: f64 = w.iter().zip(&field_costs).map(|(wj, f)| wj * f).sum();
        let mean = per_path.iter().sum::<f64>() / paths as f64 + field;
        (mean, sample_std(&per_path) / (paths as f64).sqrt())
    };
    let (linear, linear_stderr) = coefficient(1);
    let (quadratic, quadratic_stderr) = coefficient(2);

    let base_cost = costs[0];
    let estimates = eps_list
        .iter()
        .zip(&costs[1..])
        .map(|(e, c)| (c.mean - base_cost.mean) / e)
        .collect();
    Ok(DirectionalReport {
        eps: eps_list.to_vec(),
        estimates,
        base_cost,
        costs: costs[1..].to_vec(),
        linear,
        linear_stderr,
        quadratic,
        quadratic_stderr,
    })
}

/// Smooth open-loop direction built from three random cosine modes.
pub fn random_direction(spec: &ModelSpec, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                2.0 * rng.random::<f64>() - 1.0,
                rng.random_range(0..4) as f64,
                std::f64::consts::TAU * rng.random::<f64>(),
            )
        })
        .collect();
    (0..spec.n_steps)
        .map(|i| {
            let t = spec.time(i) / spec.horizon;
            Vector::from_fn(spec.m, |j, _| {
                modes
                    .iter()
                    .map(|(a, f, ph)| a * (std::f64::consts::PI * f * t + ph + j as f64).cos())
                    .sum()
            })
        })
        .collect()
}

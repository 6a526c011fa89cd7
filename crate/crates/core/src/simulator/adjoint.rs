//! Adjoint processes rebuilt from the Riccati decoupling, and the residual of
//! the pointwise stationarity condition along simulated paths.

use rayon::prelude::*;
use serde::Serialize;

use super::PathEnsemble;
use crate::error::{Error, Result};
use crate::linalg::kernels::{gemv_acc, gemv_t_acc};
use crate::linalg::{Mat, Vector};
use crate::model::ModelSpec;
use crate::riccati::RiccatiSolution;

/// `(p, q, r)` along one path. `p` lives on every grid node, `q` and `r`
/// on the control steps; `r[i][k]` is the jump component for atom `k`.
#[derive(Debug, Clone)]
pub struct AdjointTriple {
    pub p: Vec<Vector>,
    pub q: Vec<Vector>,
    pub r: Vec<Vec<Vector>>,
}

fn check_solution(spec: &ModelSpec, sol: &RiccatiSolution, ens: &PathEnsemble) -> Result<()> {
    if sol.p.len() != spec.n_steps + 1 || sol.pi.len() != spec.n_steps + 1 {
        return Err(Error::DimensionMismatch {
            what: "Riccati grid".into(),
            expected: format!("{} nodes", spec.n_steps + 1),
            found: format!("{}", sol.p.len()),
        });
    }
    if ens.n_steps != spec.n_steps || ens.n != spec.n || ens.m != spec.m {
        return Err(Error::DimensionMismatch {
            what: "ensemble".into(),
            expected: format!("n={} m={} steps={}", spec.n, spec.m, spec.n_steps),
            found: format!("n={} m={} steps={}", ens.n, ens.m, ens.n_steps),
        });
    }
    Ok(())
}

/// Mean-field parts of the adjoint at step `i`, evaluated at the ensemble
/// means: `E p`, `E q`, `E r_k`.
struct MeanAdjoint {
    p: Vector,
    q: Vector,
    r: Vec<Vector>,
}

fn mean_adjoint(spec: &ModelSpec, sol: &RiccatiSolution, ens: &PathEnsemble, i: usize) -> MeanAdjoint {
    let (p, pi) = (&sol.p[i], &sol.pi[i]);
    let mx = &ens.mean_x[i];
    let mean_p = pi * mx * 2.0;
    if i == spec.n_steps {
        return MeanAdjoint {
            p: mean_p,
            q: Vector::zeros(spec.n),
            r: Vec::new(),
        };
    }
    let mu = &ens.mean_u[i];
    let c_hat = spec.c.at(i) + spec.c_bar.at(i);
    let d_hat = spec.d.at(i) + spec.d_bar.at(i);
    let mean_q = p * (c_hat * mx + d_hat * mu) * 2.0;
    let mean_r = (0..spec.atoms())
        .map(|k| {
            let e_hat = spec.e[k].at(i) + spec.e_bar[k].at(i);
            let f_hat = spec.f[k].at(i) + spec.f_bar[k].at(i);
            p * (e_hat * mx + f_hat * mu) * 2.0
        })
        .collect();
    MeanAdjoint {
        p: mean_p,
        q: mean_q,
        r: mean_r,
    }
}

/// `p = 2[P(X - ÊX) + Π ÊX]`, `q = 2P[CX + C̄ÊX + Du + D̄Êu]` and
/// `r_k = 2P[E_k X + Ē_k ÊX + F_k u + F̄_k Êu]` along one recorded path, with
/// `Ê` the ensemble mean.
pub fn reconstruct_adjoint(
    spec: &ModelSpec,
    sol: &RiccatiSolution,
    ens: &PathEnsemble,
    path: usize,
) -> Result<AdjointTriple> {
    check_solution(spec, sol, ens)?;
    let steps = spec.n_steps;
    let mut out = AdjointTriple {
        p: Vec::with_capacity(steps + 1),
        q: Vec::with_capacity(steps),
        r: Vec::with_capacity(steps),
    };
    for i in 0..=steps {
        let x = ens.state(path, i)?;
        let mx = &ens.mean_x[i];
        let p = &sol.p[i];
        out.p.push((p * (&x - mx) + &sol.pi[i] * mx) * 2.0);
        if i == steps {
            break;
        }
        let u = ens.control(path, i)?;
        let mu = &ens.mean_u[i];
        let q = p * (spec.c.at(i) * &x + spec.c_bar.at(i) * mx + spec.d.at(i) * &u + spec.d_bar.at(i) * mu) * 2.0;
        out.q.push(q);
        let r = (0..spec.atoms())
            .map(|k| {
                let jump = spec.e[k].at(i) * &x
                    + spec.e_bar[k].at(i) * mx
                    + spec.f[k].at(i) * &u
                    + spec.f_bar[k].at(i) * mu;
                p * jump * 2.0
            })
            .collect();
        out.r.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityReport {
    /// Root mean square over paths and steps of the stationarity residual.
    pub rms: f64,
    /// Root mean square of `2Nu`, the natural scale of the residual.
    pub control_rms: f64,
}

impl StationarityReport {
    pub fn relative(&self) -> f64 {
        if self.control_rms > 0.0 {
            self.rms / self.control_rms
        } else {
            self.rms
        }
    }
}

/// Per-step data shared across paths.
struct StepTerms<'a> {
    p2: Mat,
    n2: Mat,
    b: &'a Mat,
    c: &'a Mat,
    d: &'a Mat,
    e: Vec<&'a Mat>,
    f: Vec<&'a Mat>,
    nu: Vec<f64>,
    mx: &'a Vector,
    mu: &'a Vector,
    mean_p: Vector,
    mean_q: Vector,
    mean_r: Vec<Vector>,
    /// `2N̄Êu + B̄ᵀÊp + D̄ᵀÊq + Σ ν_k F̄_kᵀ Ê r_k`, identical for all paths.
    field: Vec<f64>,
}

/// Time-and-ensemble RMS of
/// `2Nu + 2N̄Êu + Bᵀp + B̄ᵀÊp + Dᵀq + D̄ᵀÊq + Σ_k ν_k (F_kᵀ r_k + F̄_kᵀ Ê r_k)`.
pub fn stationarity_report(spec: &ModelSpec, sol: &RiccatiSolution, ens: &PathEnsemble) -> Result<StationarityReport> {
    check_solution(spec, sol, ens)?;
    if !ens.is_recorded() {
        return Err(Error::PathsNotRecorded);
    }
    let (n, m, steps, k) = (spec.n, spec.m, spec.n_steps, spec.atoms());
    let terms: Vec<StepTerms> = (0..steps)
        .map(|i| {
            let mean = mean_adjoint(spec, sol, ens, i);
            let mut field = vec![0.0; m];
            gemv_acc(&mut field, spec.r_bar.at(i), ens.mean_u[i].as_slice(), 2.0);
            gemv_t_acc(&mut field, spec.b_bar.at(i), mean.p.as_slice(), 1.0);
            gemv_t_acc(&mut field, spec.d_bar.at(i), mean.q.as_slice(), 1.0);
            for (j, r) in mean.r.iter().enumerate() {
                gemv_t_acc(&mut field, spec.f_bar[j].at(i), r.as_slice(), spec.jumps.nu(j));
            }
            StepTerms {
                p2: &sol.p[i] * 2.0,
                n2: spec.r.at(i) * 2.0,
                b: spec.b.at(i),
                c: spec.c.at(i),
                d: spec.d.at(i),
                e: (0..k).map(|j| spec.e[j].at(i)).collect(),
                f: (0..k).map(|j| spec.f[j].at(i)).collect(),
                nu: (0..k).map(|j| spec.jumps.nu(j)).collect(),
                mx: &ens.mean_x[i],
                mu: &ens.mean_u[i],
                mean_p: mean.p,
                mean_q: mean.q,
                mean_r: mean.r,
                field,
            }
        })
        .collect();

    let recs = ens.records.as_ref().ok_or(Error::PathsNotRecorded)?;
    let per_path: Vec<(f64, f64)> = recs
        .par_iter()
        .map(|rec| {
            let mut dx = vec![0.0; n];
            let mut du = vec![0.0; m];
            let mut inner = vec![0.0; n];
            let mut adj = vec![0.0; n];
            let mut res = vec![0.0; m];
            let mut nu_term = vec![0.0; m];
            let (mut ss_res, mut ss_ctrl) = (0.0, 0.0);
            for (i, t) in terms.iter().enumerate() {
                let x = &rec.x[i * n..(i + 1) * n];
                let u = &rec.u[i * m..(i + 1) * m];
                for j in 0..n {
                    dx[j] = x[j] - t.mx[j];
                }
                for j in 0..m {
                    du[j] = u[j] - t.mu[j];
                }
                nu_term.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(&mut nu_term, &t.n2, u, 1.0);
                res.copy_from_slice(&t.field);
                for (r, v) in res.iter_mut().zip(&nu_term) {
                    *r += v;
                }

                // p = 2P(X - ÊX) + Êp
                adj.copy_from_slice(t.mean_p.as_slice());
                gemv_acc(&mut adj, &t.p2, &dx, 1.0);
                gemv_t_acc(&mut res, t.b, &adj, 1.0);

                // q = 2P[C(X - ÊX) + D(u - Êu)] + Êq
                inner.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(&mut inner, t.c, &dx, 1.0);
                gemv_acc(&mut inner, t.d, &du, 1.0);
                adj.copy_from_slice(t.mean_q.as_slice());
                gemv_acc(&mut adj, &t.p2, &inner, 1.0);
                gemv_t_acc(&mut res, t.d, &adj, 1.0);

                for a in 0..t.e.len() {
                    inner.iter_mut().for_each(|v| *v = 0.0);
                    gemv_acc(&mut inner, t.e[a], &dx, 1.0);
                    gemv_acc(&mut inner, t.f[a], &du, 1.0);
                    adj.copy_from_slice(t.mean_r[a].as_slice());
                    gemv_acc(&mut adj, &t.p2, &inner, 1.0);
                    gemv_t_acc(&mut res, t.f[a], &adj, t.nu[a]);
                }

                ss_res += res.iter().map(|v| v * v).sum::<f64>();
                ss_ctrl += nu_term.iter().map(|v| v * v).sum::<f64>();
            }
            (ss_res, ss_ctrl)
        })
        .collect();

    let (ss_res, ss_ctrl) = per_path
        .iter()
        .fold((0.0, 0.0), |(a, b), (r, c)| (a + r, b + c));
    let count = (ens.paths * steps.max(1)) as f64;
    Ok(StationarityReport {
        rms: (ss_res / count).sqrt(),
        control_rms: (ss_ctrl / count).sqrt(),
    })
}

/// Absolute RMS stationarity residual; see [`stationarity_report`].
pub fn stationarity_residual(spec: &ModelSpec, sol: &RiccatiSolution, ens: &PathEnsemble) -> Result<f64> {
    Ok(stationarity_report(spec, sol, ens)?.rms)
}

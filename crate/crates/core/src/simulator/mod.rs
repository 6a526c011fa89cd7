//! Interacting-particle Euler scheme for the controlled mean-field jump
//! diffusion, cost estimation, adjoint reconstruction and optimality checks.
//!
//! One Brownian dimension. Per step and atom a Poisson(ν_k h) count is drawn
//! and the jump amplitude is evaluated at the pre-jump state; the
//! compensator `ν_k h · amplitude` is subtracted every step.
//!
//! Mean-field terms: a bare feedback law has a closed mean equation, which
//! is stepped with the same Euler map the particles use, so the particle
//! mean is an unbiased estimate of it. Every other law uses the synchronous
//! cross-particle average at each step.

mod adjoint;
mod directional;

use std::io::Write;

use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::kernels::{gemv_acc, quad};
use crate::linalg::{Mat, Vector};
use crate::meanflow::mean_control;
use crate::model::ModelSpec;
use crate::riccati::FeedbackLaw;
use crate::rng::{CounterRng, Purpose};

pub use adjoint::{
    reconstruct_adjoint, stationarity_report, stationarity_residual, AdjointTriple,
    StationarityReport,
};
pub use directional::{directional_derivative, fit_weights, random_direction, DirectionalReport};

#[derive(Debug, Clone)]
pub enum ControlLaw {
    /// `u = K0 (X - E X) + K1 E X`.
    Feedback(FeedbackLaw),
    /// Deterministic control, one vector per grid node.
    OpenLoop(Vec<Vector>),
    /// `base + epsilon * direction`, with a deterministic direction.
    Perturbed {
        base: Box<ControlLaw>,
        direction: Vec<Vector>,
        epsilon: f64,
    },
}

impl ControlLaw {
    pub fn perturbed(base: &ControlLaw, direction: &[Vector], epsilon: f64) -> ControlLaw {
        ControlLaw::Perturbed {
            base: Box::new(base.clone()),
            direction: direction.to_vec(),
            epsilon,
        }
    }

    /// Whether the mean-field terms come from the closed mean equation.
    pub fn has_closed_mean(&self) -> bool {
        matches!(self, ControlLaw::Feedback(_))
    }

    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        let (n, m, steps) = (spec.n, spec.m, spec.n_steps);
        let check_vectors = |what: &str, v: &[Vector]| -> Result<()> {
            if v.len() != steps && v.len() != steps + 1 {
                return Err(Error::DimensionMismatch {
                    what: what.into(),
                    expected: format!("{steps} or {} grid values", steps + 1),
                    found: format!("{}", v.len()),
                });
            }
            if let Some(bad) = v.iter().find(|x| x.len() != m) {
                return Err(Error::DimensionMismatch {
                    what: what.into(),
                    expected: format!("vectors of length {m}"),
                    found: format!("{}", bad.len()),
                });
            }
            Ok(())
        };
        match self {
            ControlLaw::Feedback(fb) => {
                for (what, gains) in [("K0", &fb.k0), ("K1", &fb.k1)] {
                    if gains.len() != steps + 1 {
                        return Err(Error::DimensionMismatch {
                            what: what.into(),
                            expected: format!("{} grid values", steps + 1),
                            found: format!("{}", gains.len()),
                        });
                    }
                    if gains.iter().any(|k| k.shape() != (m, n)) {
                        return Err(Error::DimensionMismatch {
                            what: what.into(),
                            expected: format!("{m}x{n}"),
                            found: "other".into(),
                        });
                    }
                }
                Ok(())
            }
            ControlLaw::OpenLoop(u) => check_vectors("open-loop control", u),
            ControlLaw::Perturbed {
                base, direction, ..
            } => {
                check_vectors("direction", direction)?;
                base.check_shapes(spec)
            }
        }
    }

    /// The law at step `i` as `u = gain · X + offset`, given the mean state.
    fn affine(&self, i: usize, mean_x: &Vector) -> (Option<Mat>, Vector) {
        match self {
            ControlLaw::Feedback(fb) => {
                let (k0, k1) = (&fb.k0[i], &fb.k1[i]);
                (Some(k0.clone()), (k1 - k0) * mean_x)
            }
            ControlLaw::OpenLoop(u) => (None, u[i].clone()),
            ControlLaw::Perturbed {
                base,
                direction,
                epsilon,
            } => {
                let (gain, offset) = base.affine(i, mean_x);
                (gain, offset + &direction[i] * *epsilon)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    /// Keep every state, control and jump.
    Full,
    /// Keep per-path costs, terminal states and ensemble means only.
    Summary,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub recording: Recording,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            recording: Recording::Full,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct JumpEvent {
    /// The jump falls in `(t_step, t_step+1]`.
    pub step: usize,
    pub atom: usize,
}

#[derive(Debug, Clone, Default)]
struct PathRecord {
    x: Vec<f64>,
    u: Vec<f64>,
    jumps: Vec<JumpEvent>,
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub paths: usize,
    pub n: usize,
    pub m: usize,
    pub n_steps: usize,
    pub h: f64,
    pub seed: u64,
    /// Cross-particle mean of the state, one per grid node.
    pub mean_x: Vec<Vector>,
    /// Cross-particle mean of the control, one per step.
    pub mean_u: Vec<Vector>,
    /// Mean-field values fed to the dynamics (closed mean or particle mean).
    pub field_x: Vec<Vector>,
    pub field_u: Vec<Vector>,
    /// Path-level part of the cost: running `XᵀQX + uᵀNu` plus `X_TᵀGX_T`.
    pub path_costs: Vec<f64>,
    terminal: Vec<f64>,
    records: Option<Vec<PathRecord>>,
}

impl PathEnsemble {
    pub fn is_recorded(&self) -> bool {
        self.records.is_some()
    }

    fn record(&self, path: usize) -> Result<&PathRecord> {
        let recs = self.records.as_ref().ok_or(Error::PathsNotRecorded)?;
        recs.get(path).ok_or(Error::IndexOutOfRange {
            what: "path",
            index: path,
            len: self.paths,
        })
    }

    pub fn state(&self, path: usize, step: usize) -> Result<Vector> {
        let rec = self.record(path)?;
        if step > self.n_steps {
            return Err(Error::IndexOutOfRange {
                what: "step",
                index: step,
                len: self.n_steps + 1,
            });
        }
        Ok(Vector::from_row_slice(&rec.x[step * self.n..(step + 1) * self.n]))
    }

    pub fn control(&self, path: usize, step: usize) -> Result<Vector> {
        let rec = self.record(path)?;
        if step >= self.n_steps {
            return Err(Error::IndexOutOfRange {
                what: "step",
                index: step,
                len: self.n_steps,
            });
        }
        Ok(Vector::from_row_slice(&rec.u[step * self.m..(step + 1) * self.m]))
    }

    pub fn jump_log(&self, path: usize) -> Result<&[JumpEvent]> {
        Ok(&self.record(path)?.jumps)
    }

    pub fn terminal(&self, path: usize) -> Vector {
        Vector::from_row_slice(&self.terminal[path * self.n..(path + 1) * self.n])
    }

    /// Sample standard error of the ensemble mean of state coordinate
    /// `coord` at grid node `step`.
    pub fn state_stderr(&self, step: usize, coord: usize) -> Result<f64> {
        let recs = self.records.as_ref().ok_or(Error::PathsNotRecorded)?;
        let vals: Vec<f64> = recs.iter().map(|r| r.x[step * self.n + coord]).collect();
        Ok(sample_std(&vals) / (self.paths as f64).sqrt())
    }

    /// Standard error of the ensemble mean of the terminal state coordinate.
    pub fn terminal_stderr(&self, coord: usize) -> f64 {
        let vals: Vec<f64> = (0..self.paths).map(|p| self.terminal[p * self.n + coord]).collect();
        sample_std(&vals) / (self.paths as f64).sqrt()
    }

    /// Rows `path, t, X_0.., u_0..`; the terminal node has empty controls.
    pub fn write_csv<W: Write>(&self, writer: W, max_paths: usize) -> Result<()> {
        let recs = self.records.as_ref().ok_or(Error::PathsNotRecorded)?;
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((0..self.n).map(|j| format!("X_{j}")));
        header.extend((0..self.m).map(|j| format!("u_{j}")));
        wtr.write_record(&header)?;
        for (p, rec) in recs.iter().enumerate().take(max_paths) {
            for i in 0..=self.n_steps {
                let mut row = vec![p.to_string(), format!("{}", i as f64 * self.h)];
                row.extend(rec.x[i * self.n..(i + 1) * self.n].iter().map(|v| format!("{v}")));
                if i < self.n_steps {
                    row.extend(rec.u[i * self.m..(i + 1) * self.m].iter().map(|v| format!("{v}")));
                } else {
                    row.extend((0..self.m).map(|_| String::new()));
                }
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn sample_std(vals: &[f64]) -> f64 {
    let len = vals.len();
    if len < 2 {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / len as f64;
    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (len - 1) as f64).sqrt()
}

struct Particle {
    x: Vec<f64>,
    u: Vec<f64>,
    cost: f64,
    bad: bool,
    rec: Option<PathRecord>,
}

struct Scratch {
    next: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    jump: Vec<f64>,
}

/// Per-step quantities shared by every particle.
struct StepData<'a> {
    a: &'a Mat,
    b: &'a Mat,
    c: &'a Mat,
    d: &'a Mat,
    e: Vec<&'a Mat>,
    f: Vec<&'a Mat>,
    q: &'a Mat,
    r: &'a Mat,
    drift_field: Vec<f64>,
    diffusion_field: Vec<f64>,
    jump_field: Vec<Vec<f64>>,
    poisson: Vec<Option<Poisson<f64>>>,
    nu_h: Vec<f64>,
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize, count: usize) -> Vector {
    let mut acc = Vector::zeros(dim);
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc / count as f64
}

pub fn simulate_paths(spec: &ModelSpec, law: &ControlLaw, paths: usize, seed: u64) -> Result<PathEnsemble> {
    simulate_paths_with(spec, law, paths, seed, SimOptions::default())
}

pub fn simulate_paths_with(
    spec: &ModelSpec,
    law: &ControlLaw,
    paths: usize,
    seed: u64,
    opts: SimOptions,
) -> Result<PathEnsemble> {
    if paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    spec.check_structure()?;
    law.check_shapes(spec)?;
    match opts.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            pool.install(|| run(spec, law, paths, seed, opts.recording))
        }
        None => run(spec, law, paths, seed, opts.recording),
    }
}

fn run(spec: &ModelSpec, law: &ControlLaw, paths: usize, seed: u64, recording: Recording) -> Result<PathEnsemble> {
    let (n, m, steps, k) = (spec.n, spec.m, spec.n_steps, spec.atoms());
    let h = spec.step();
    let sqrt_h = h.sqrt();
    let brownian = spec.has_brownian_noise();
    let rng = CounterRng::new(seed);
    let closed = law.has_closed_mean();

    let mut particles: Vec<Particle> = (0..paths)
        .map(|_| Particle {
            x: spec.x0.iter().copied().collect(),
            u: vec![0.0; m],
            cost: 0.0,
            bad: false,
            rec: (recording == Recording::Full).then(|| {
                let mut r = PathRecord {
                    x: Vec::with_capacity((steps + 1) * n),
                    u: Vec::with_capacity(steps * m),
                    jumps: Vec::new(),
                };
                r.x.extend(spec.x0.iter());
                r
            }),
        })
        .collect();

    let mut mean_x = Vec::with_capacity(steps + 1);
    let mut mean_u = Vec::with_capacity(steps);
    let mut field_x = Vec::with_capacity(steps + 1);
    let mut field_u = Vec::with_capacity(steps);
    let mut closure = spec.x0.clone();

    for i in 0..steps {
        let ens_x = mean_of(particles.iter().map(|p| p.x.as_slice()), n, paths);
        let mx = if closed { closure.clone() } else { ens_x.clone() };
        mean_x.push(ens_x);

        let (gain, offset) = law.affine(i, &mx);
        particles.par_iter_mut().for_each(|p| {
            p.u.copy_from_slice(offset.as_slice());
            if let Some(g) = &gain {
                gemv_acc(&mut p.u, g, &p.x, 1.0);
            }
        });
        let ens_u = mean_of(particles.iter().map(|p| p.u.as_slice()), m, paths);
        let mu = if closed {
            mean_control(law, m, i, 0.0).apply(&mx)
        } else {
            ens_u.clone()
        };
        mean_u.push(ens_u);

        let mut drift_field = vec![0.0; n];
        gemv_acc(&mut drift_field, spec.a_bar.at(i), mx.as_slice(), 1.0);
        gemv_acc(&mut drift_field, spec.b_bar.at(i), mu.as_slice(), 1.0);
        let mut diffusion_field = vec![0.0; n];
        gemv_acc(&mut diffusion_field, spec.c_bar.at(i), mx.as_slice(), 1.0);
        gemv_acc(&mut diffusion_field, spec.d_bar.at(i), mu.as_slice(), 1.0);
        let jump_field = (0..k)
            .map(|j| {
                let mut v = vec![0.0; n];
                gemv_acc(&mut v, spec.e_bar[j].at(i), mx.as_slice(), 1.0);
                gemv_acc(&mut v, spec.f_bar[j].at(i), mu.as_slice(), 1.0);
                v
            })
            .collect();
        let nu_h: Vec<f64> = (0..k).map(|j| spec.jumps.nu(j) * h).collect();
        let data = StepData {
            a: spec.a.at(i),
            b: spec.b.at(i),
            c: spec.c.at(i),
            d: spec.d.at(i),
            e: (0..k).map(|j| spec.e[j].at(i)).collect(),
            f: (0..k).map(|j| spec.f[j].at(i)).collect(),
            q: spec.q.at(i),
            r: spec.r.at(i),
            drift_field,
            diffusion_field,
            jump_field,
            poisson: nu_h.iter().map(|&l| Poisson::new(l).ok()).collect(),
            nu_h,
        };

        particles.par_iter_mut().enumerate().for_each_init(
            || Scratch {
                next: vec![0.0; n],
                drift: vec![0.0; n],
                diffusion: vec![0.0; n],
                jump: vec![0.0; n],
            },
            |s, (path, p)| advance(p, s, &data, &rng, path, i, h, sqrt_h, brownian),
        );
        if let Some(path) = particles.iter().position(|p| p.bad) {
            return Err(Error::NonFiniteState { path, step: i + 1 });
        }

        field_x.push(mx.clone());
        field_u.push(mu.clone());
        if closed {
            let a_hat = spec.a.at(i) + spec.a_bar.at(i);
            let b_hat = spec.b.at(i) + spec.b_bar.at(i);
            closure = &mx + (&a_hat * &mx + &b_hat * &mu) * h;
        }
    }

    let ens_x = mean_of(particles.iter().map(|p| p.x.as_slice()), n, paths);
    field_x.push(if closed { closure } else { ens_x.clone() });
    mean_x.push(ens_x);

    let mut path_costs = Vec::with_capacity(paths);
    let mut terminal = Vec::with_capacity(paths * n);
    let mut records = (recording == Recording::Full).then(|| Vec::with_capacity(paths));
    for p in particles {
        path_costs.push(p.cost + quad(&spec.g, &p.x));
        terminal.extend_from_slice(&p.x);
        if let (Some(recs), Some(rec)) = (records.as_mut(), p.rec) {
            recs.push(rec);
        }
    }

    Ok(PathEnsemble {
        paths,
        n,
        m,
        n_steps: steps,
        h,
        seed,
        mean_x,
        mean_u,
        field_x,
        field_u,
        path_costs,
        terminal,
        records,
    })
}

#[allow(clippy::too_many_arguments)]
fn advance(
    p: &mut Particle,
    s: &mut Scratch,
    data: &StepData<'_>,
    rng: &CounterRng,
    path: usize,
    step: usize,
    h: f64,
    sqrt_h: f64,
    brownian: bool,
) {
    p.cost += h * (quad(data.q, &p.x) + quad(data.r, &p.u));
    if let Some(rec) = p.rec.as_mut() {
        rec.u.extend_from_slice(&p.u);
    }

    s.drift.copy_from_slice(&data.drift_field);
    gemv_acc(&mut s.drift, data.a, &p.x, 1.0);
    gemv_acc(&mut s.drift, data.b, &p.u, 1.0);
    for (nx, (x, dr)) in s.next.iter_mut().zip(p.x.iter().zip(&s.drift)) {
        *nx = x + h * dr;
    }

    if brownian {
        let dw: f64 = {
            let mut r = rng.stream(path, step, Purpose::Brownian);
            let z: f64 = StandardNormal.sample(&mut r);
            z * sqrt_h
        };
        s.diffusion.copy_from_slice(&data.diffusion_field);
        gemv_acc(&mut s.diffusion, data.c, &p.x, 1.0);
        gemv_acc(&mut s.diffusion, data.d, &p.u, 1.0);
        for (nx, df) in s.next.iter_mut().zip(&s.diffusion) {
            *nx += dw * df;
        }
    }

    if !data.e.is_empty() {
        let mut r = rng.stream(path, step, Purpose::Jumps);
        for atom in 0..data.e.len() {
            let count = match &data.poisson[atom] {
                Some(dist) => dist.sample(&mut r),
                None => 0.0,
            };
            let weight = count - data.nu_h[atom];
            if weight == 0.0 {
                continue;
            }
            s.jump.copy_from_slice(&data.jump_field[atom]);
            gemv_acc(&mut s.jump, data.e[atom], &p.x, 1.0);
            gemv_acc(&mut s.jump, data.f[atom], &p.u, 1.0);
            for (nx, jv) in s.next.iter_mut().zip(&s.jump) {
                *nx += weight * jv;
            }
            if let Some(rec) = p.rec.as_mut() {
                for _ in 0..count as usize {
                    rec.jumps.push(JumpEvent { step, atom });
                }
            }
        }
    }

    p.x.copy_from_slice(&s.next);
    if p.x.iter().any(|v| !v.is_finite()) {
        p.bad = true;
    }
    if let Some(rec) = p.rec.as_mut() {
        rec.x.extend_from_slice(&p.x);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Mean-field part of the cost, evaluated at the ensemble means.
pub(crate) fn mean_field_cost(spec: &ModelSpec, ens: &PathEnsemble) -> f64 {
    let mut acc = 0.0;
    for i in 0..ens.n_steps {
        acc += ens.h
            * (quad(spec.q_bar.at(i), ens.mean_x[i].as_slice())
                + quad(spec.r_bar.at(i), ens.mean_u[i].as_slice()));
    }
    acc + quad(&spec.g_bar, ens.mean_x[ens.n_steps].as_slice())
}

/// Left-endpoint estimate of the quadratic cost with its standard error.
pub fn estimate_cost(spec: &ModelSpec, ens: &PathEnsemble) -> CostEstimate {
    let m = ens.paths as f64;
    let random = ens.path_costs.iter().sum::<f64>() / m;
    CostEstimate {
        mean: random + mean_field_cost(spec, ens),
        stderr: sample_std(&ens.path_costs) / m.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub cost_mean: f64,
    pub cost_stderr: f64,
    pub stationarity_residual: Option<f64>,
    #[serde(rename = "M")]
    pub paths: usize,
    pub h: f64,
    pub seed: u64,
}

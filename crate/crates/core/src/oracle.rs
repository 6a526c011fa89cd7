//! Exact solver for discretized instances on finite scenario trees.
//!
//! Each step branches on a binary Brownian increment `±√h` and, per atom, a
//! jump indicator with probability `ν_k h`. Controls are one vector per
//! non-terminal node. The mean-field terms average over a whole time slice,
//! so the cost is a convex quadratic in the stacked controls that does not
//! split node by node; it is minimized by one dense Cholesky solve. Gradients
//! come from a backward adjoint sweep over the tree and the Hessian is
//! assembled column by column from gradients of the homogeneous problem.
//!
//! Nothing here touches the Riccati machinery, which makes the oracle an
//! independent check of it.

use nalgebra::Cholesky;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::kernels::{gemv_acc, gemv_t_acc, quad};
use crate::linalg::{Mat, Vector};
use crate::model::ModelSpec;
use crate::riccati::{feedback_gains, optimal_value, solve_riccati_with, Convention};

/// Upper bound on `n · m · node_count`.
pub const MAX_TREE_WORK: usize = 100_000;
/// Upper bound on the number of scalar controls (the Hessian dimension).
pub const MAX_CONTROL_DIM: usize = 2_500;

/// One outcome of a single step of the noise.
#[derive(Debug, Clone)]
pub struct Branch {
    pub prob: f64,
    pub dw: f64,
    pub jumps: Vec<bool>,
}

/// Linear transition of one branch: `X⁺ = M X + M̄ m + K u + K̄ ū`.
#[derive(Debug, Clone)]
struct Transition {
    m: Mat,
    m_bar: Mat,
    k: Mat,
    k_bar: Mat,
}

#[derive(Debug, Clone)]
pub struct DiscreteLQ {
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub h: f64,
    pub x0: Vector,
    pub branches: Vec<Branch>,
    /// `transitions[t][b]` for step `t` and branch `b`.
    transitions: Vec<Vec<Transition>>,
    q: Vec<Mat>,
    q_bar: Vec<Mat>,
    r: Vec<Mat>,
    r_bar: Vec<Mat>,
    g: Mat,
    g_bar: Mat,
}

/// Optimal node-adapted controls and the minimal discrete cost.
#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    /// `controls[t]` holds the controls of level `t`, node-major.
    pub controls: Vec<Vec<Vector>>,
    pub cost: f64,
    /// Infinity norm of the cost gradient at the returned controls.
    pub gradient_norm: f64,
}

impl DiscreteSolution {
    pub fn root_control(&self) -> &Vector {
        &self.controls[0][0]
    }
}

/// Forward states, slice means and control means.
struct Forward {
    x: Vec<Vec<f64>>,
    mean_x: Vec<Vec<f64>>,
    mean_u: Vec<Vec<f64>>,
}

impl DiscreteLQ {
    pub fn branching(&self) -> usize {
        self.branches.len()
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        self.branching().pow(level as u32)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes_at(self.steps)
    }

    pub fn node_count(&self) -> usize {
        (0..=self.steps).map(|t| self.nodes_at(t)).sum()
    }

    /// Number of scalar decision variables.
    pub fn control_dim(&self) -> usize {
        self.m * (0..self.steps).map(|t| self.nodes_at(t)).sum::<usize>()
    }

    /// Probability of every node of a level.
    pub fn level_probs(&self, level: usize) -> Vec<f64> {
        let mut probs = vec![1.0];
        for _ in 0..level {
            probs = probs
                .iter()
                .flat_map(|p| self.branches.iter().map(move |b| p * b.prob))
                .collect();
        }
        probs
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.steps + 1);
        let mut acc = 0;
        for t in 0..=self.steps {
            off.push(acc);
            acc += self.m * self.nodes_at(t);
        }
        off
    }

    fn forward(&self, u: &[f64], x0: &[f64], probs: &[Vec<f64>]) -> Forward {
        let (n, m, nb) = (self.n, self.m, self.branching());
        let off = self.offsets();
        let mut x = vec![x0.to_vec()];
        let mut mean_x = Vec::with_capacity(self.steps + 1);
        let mut mean_u = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let pr = &probs[t];
            let cur = &x[t];
            let ut = &u[off[t]..off[t] + m * pr.len()];
            let mut mx = vec![0.0; n];
            let mut mu = vec![0.0; m];
            for (j, p) in pr.iter().enumerate() {
                for a in 0..n {
                    mx[a] += p * cur[j * n + a];
                }
                for a in 0..m {
                    mu[a] += p * ut[j * m + a];
                }
            }
            let mut next = vec![0.0; pr.len() * nb * n];
            for (b, tr) in self.transitions[t].iter().enumerate() {
                let mut shift = vec![0.0; n];
                gemv_acc(&mut shift, &tr.m_bar, &mx, 1.0);
                gemv_acc(&mut shift, &tr.k_bar, &mu, 1.0);
                for j in 0..pr.len() {
                    let out = &mut next[(j * nb + b) * n..(j * nb + b + 1) * n];
                    out.copy_from_slice(&shift);
                    gemv_acc(out, &tr.m, &cur[j * n..(j + 1) * n], 1.0);
                    gemv_acc(out, &tr.k, &ut[j * m..(j + 1) * m], 1.0);
                }
            }
            mean_x.push(mx);
            mean_u.push(mu);
            x.push(next);
        }
        let pr = &probs[self.steps];
        let mut mx = vec![0.0; n];
        for (j, p) in pr.iter().enumerate() {
            for a in 0..n {
                mx[a] += p * x[self.steps][j * n + a];
            }
        }
        mean_x.push(mx);
        Forward { x, mean_x, mean_u }
    }

    fn cost_of(&self, u: &[f64], x0: &[f64], probs: &[Vec<f64>]) -> f64 {
        let (n, m) = (self.n, self.m);
        let off = self.offsets();
        let fw = self.forward(u, x0, probs);
        let mut total = 0.0;
        for t in 0..self.steps {
            let mut level = 0.0;
            for (j, p) in probs[t].iter().enumerate() {
                let x = &fw.x[t][j * n..(j + 1) * n];
                let ut = &u[off[t] + j * m..off[t] + (j + 1) * m];
                level += p * (quad(&self.q[t], x) + quad(&self.r[t], ut));
            }
            total += self.h * (level + quad(&self.q_bar[t], &fw.mean_x[t]) + quad(&self.r_bar[t], &fw.mean_u[t]));
        }
        for (j, p) in probs[self.steps].iter().enumerate() {
            total += p * quad(&self.g, &fw.x[self.steps][j * n..(j + 1) * n]);
        }
        total + quad(&self.g_bar, &fw.mean_x[self.steps])
    }

    fn gradient_of(&self, u: &[f64], x0: &[f64], probs: &[Vec<f64>]) -> Vec<f64> {
        let (n, m, nb) = (self.n, self.m, self.branching());
        let off = self.offsets();
        let fw = self.forward(u, x0, probs);
        let mut grad = vec![0.0; u.len()];

        // a = (1/π) ∂J/∂X, per node of the current level.
        let leaves = &fw.x[self.steps];
        let mut a = vec![0.0; leaves.len()];
        let mut gbar = vec![0.0; n];
        gemv_acc(&mut gbar, &self.g_bar, &fw.mean_x[self.steps], 2.0);
        for j in 0..probs[self.steps].len() {
            let out = &mut a[j * n..(j + 1) * n];
            out.copy_from_slice(&gbar);
            gemv_acc(out, &self.g, &leaves[j * n..(j + 1) * n], 2.0);
        }

        for t in (0..self.steps).rev() {
            let pr = &probs[t];
            let cur = &fw.x[t];
            let ut = &u[off[t]..off[t] + m * pr.len()];
            let trs = &self.transitions[t];

            let mut g_m = vec![0.0; n];
            let mut g_u = vec![0.0; m];
            gemv_acc(&mut g_m, &self.q_bar[t], &fw.mean_x[t], 2.0 * self.h);
            gemv_acc(&mut g_u, &self.r_bar[t], &fw.mean_u[t], 2.0 * self.h);
            for (j, p) in pr.iter().enumerate() {
                for (b, tr) in trs.iter().enumerate() {
                    let w = p * self.branches[b].prob;
                    let child = &a[(j * nb + b) * n..(j * nb + b + 1) * n];
                    gemv_t_acc(&mut g_m, &tr.m_bar, child, w);
                    gemv_t_acc(&mut g_u, &tr.k_bar, child, w);
                }
            }

            let mut prev = vec![0.0; pr.len() * n];
            for (j, p) in pr.iter().enumerate() {
                let out = &mut prev[j * n..(j + 1) * n];
                out.copy_from_slice(&g_m);
                gemv_acc(out, &self.q[t], &cur[j * n..(j + 1) * n], 2.0 * self.h);
                let gu = &mut grad[off[t] + j * m..off[t] + (j + 1) * m];
                gu.copy_from_slice(&g_u);
                gemv_acc(gu, &self.r[t], &ut[j * m..(j + 1) * m], 2.0 * self.h);
                for (b, tr) in trs.iter().enumerate() {
                    let pb = self.branches[b].prob;
                    let child = &a[(j * nb + b) * n..(j * nb + b + 1) * n];
                    gemv_t_acc(out, &tr.m, child, pb);
                    gemv_t_acc(gu, &tr.k, child, pb);
                }
                gu.iter_mut().for_each(|v| *v *= p);
            }
            a = prev;
        }
        grad
    }

    fn all_probs(&self) -> Vec<Vec<f64>> {
        (0..=self.steps).map(|t| self.level_probs(t)).collect()
    }

    fn unstack(&self, u: &[f64]) -> Vec<Vec<Vector>> {
        let off = self.offsets();
        (0..self.steps)
            .map(|t| {
                (0..self.nodes_at(t))
                    .map(|j| Vector::from_row_slice(&u[off[t] + j * self.m..off[t] + (j + 1) * self.m]))
                    .collect()
            })
            .collect()
    }

    fn stack(&self, controls: &[Vec<Vector>]) -> Result<Vec<f64>> {
        let mut u = Vec::with_capacity(self.control_dim());
        if controls.len() != self.steps {
            return Err(Error::DimensionMismatch {
                what: "tree controls".into(),
                expected: format!("{} levels", self.steps),
                found: format!("{}", controls.len()),
            });
        }
        for (t, level) in controls.iter().enumerate() {
            if level.len() != self.nodes_at(t) || level.iter().any(|v| v.len() != self.m) {
                return Err(Error::DimensionMismatch {
                    what: format!("tree controls at level {t}"),
                    expected: format!("{} vectors of length {}", self.nodes_at(t), self.m),
                    found: format!("{} vectors", level.len()),
                });
            }
            for v in level {
                u.extend(v.iter());
            }
        }
        Ok(u)
    }

    /// Discrete cost of node-adapted controls.
    pub fn cost(&self, controls: &[Vec<Vector>]) -> Result<f64> {
        let u = self.stack(controls)?;
        Ok(self.cost_of(&u, self.x0.as_slice(), &self.all_probs()))
    }

    /// Gradient of the discrete cost, in the layout of the controls.
    pub fn gradient(&self, controls: &[Vec<Vector>]) -> Result<Vec<Vec<Vector>>> {
        let u = self.stack(controls)?;
        Ok(self.unstack(&self.gradient_of(&u, self.x0.as_slice(), &self.all_probs())))
    }
}

/// Scenario-tree discretization of `spec` with `steps` steps over its horizon.
pub fn build_discrete_problem(spec: &ModelSpec, steps: usize) -> Result<DiscreteLQ> {
    if steps == 0 {
        return Err(Error::InvalidArgument("oracle needs at least one step".into()));
    }
    spec.check_structure()?;
    let coarse = spec.with_steps(steps);
    let (n, m, k) = (spec.n, spec.m, spec.atoms());
    let h = coarse.step();
    for a in 0..k {
        let value = spec.jumps.nu(a) * h;
        if value >= 1.0 {
            return Err(Error::JumpProbability { atom: a, value });
        }
    }

    let dws: Vec<(f64, f64)> = if coarse.has_brownian_noise() {
        vec![(h.sqrt(), 0.5), (-h.sqrt(), 0.5)]
    } else {
        vec![(0.0, 1.0)]
    };
    let mut branches = Vec::new();
    for &(dw, pw) in &dws {
        for bits in 0..(1usize << k) {
            let jumps: Vec<bool> = (0..k).map(|a| bits >> a & 1 == 1).collect();
            let prob = jumps.iter().enumerate().fold(pw, |acc, (a, &j)| {
                let p = spec.jumps.nu(a) * h;
                acc * if j { p } else { 1.0 - p }
            });
            branches.push(Branch { prob, dw, jumps });
        }
    }

    let nb = branches.len() as f64;
    let nodes = (0..=steps).try_fold(0f64, |acc, t| {
        let v = acc + nb.powi(t as i32);
        (v * (n * m) as f64 <= MAX_TREE_WORK as f64).then_some(v)
    });
    if nodes.is_none() {
        return Err(Error::TreeTooLarge(format!(
            "{steps} steps with {} branches exceed n*m*nodes <= {MAX_TREE_WORK}",
            branches.len()
        )));
    }

    let transitions = (0..steps)
        .map(|t| {
            branches
                .iter()
                .map(|br| {
                    let mut tr = Transition {
                        m: Mat::identity(n, n) + coarse.a.at(t) * h + coarse.c.at(t) * br.dw,
                        m_bar: coarse.a_bar.at(t) * h + coarse.c_bar.at(t) * br.dw,
                        k: coarse.b.at(t) * h + coarse.d.at(t) * br.dw,
                        k_bar: coarse.b_bar.at(t) * h + coarse.d_bar.at(t) * br.dw,
                    };
                    for (a, &jump) in br.jumps.iter().enumerate() {
                        let w = if jump { 1.0 } else { 0.0 } - spec.jumps.nu(a) * h;
                        tr.m += coarse.e[a].at(t) * w;
                        tr.m_bar += coarse.e_bar[a].at(t) * w;
                        tr.k += coarse.f[a].at(t) * w;
                        tr.k_bar += coarse.f_bar[a].at(t) * w;
                    }
                    tr
                })
                .collect()
        })
        .collect();

    Ok(DiscreteLQ {
        n,
        m,
        steps,
        h,
        x0: spec.x0.clone(),
        branches,
        transitions,
        q: (0..steps).map(|t| coarse.q.at(t).clone()).collect(),
        q_bar: (0..steps).map(|t| coarse.q_bar.at(t).clone()).collect(),
        r: (0..steps).map(|t| coarse.r.at(t).clone()).collect(),
        r_bar: (0..steps).map(|t| coarse.r_bar.at(t).clone()).collect(),
        g: spec.g.clone(),
        g_bar: spec.g_bar.clone(),
    })
}

/// Exact minimizer of the discrete cost over node-adapted controls.
pub fn solve_discrete_exact(dlq: &DiscreteLQ) -> Result<DiscreteSolution> {
    let dim = dlq.control_dim();
    if dim > MAX_CONTROL_DIM {
        return Err(Error::TreeTooLarge(format!(
            "{dim} scalar controls exceed the dense limit {MAX_CONTROL_DIM}"
        )));
    }
    let probs = dlq.all_probs();
    let zero_state = vec![0.0; dlq.n];

    // Controls of a node with probability π enter the Hessian scaled by π;
    // rescale by 1/√π on both sides to keep the solve well conditioned.
    let off = dlq.offsets();
    let mut scale = vec![0.0; dim];
    for t in 0..dlq.steps {
        for (j, p) in probs[t].iter().enumerate() {
            for a in 0..dlq.m {
                scale[off[t] + j * dlq.m + a] = 1.0 / p.sqrt();
            }
        }
    }

    let mut hess = Mat::zeros(dim, dim);
    let mut e = vec![0.0; dim];
    for col in 0..dim {
        e[col] = 1.0;
        let g = dlq.gradient_of(&e, &zero_state, &probs);
        for (row, v) in g.iter().enumerate() {
            hess[(row, col)] = v * scale[row] * scale[col];
        }
        e[col] = 0.0;
    }
    let hess = (&hess + hess.transpose()) * 0.5;

    let zero = vec![0.0; dim];
    let g0 = dlq.gradient_of(&zero, dlq.x0.as_slice(), &probs);
    let rhs = Vector::from_iterator(dim, g0.iter().zip(&scale).map(|(g, s)| -g * s));
    let chol = Cholesky::new(hess).ok_or(Error::SingularHessian)?;
    let y = chol.solve(&rhs);
    let u: Vec<f64> = y.iter().zip(&scale).map(|(v, s)| v * s).collect();

    let grad = dlq.gradient_of(&u, dlq.x0.as_slice(), &probs);
    let gradient_norm = grad.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cost = dlq.cost_of(&u, dlq.x0.as_slice(), &probs);
    Ok(DiscreteSolution {
        controls: dlq.unstack(&u),
        cost,
        gradient_norm,
    })
}

/// Largest step count whose tree fits the dense solver; collapsed
/// (single-branch) trees are capped at `cap`.
pub fn max_feasible_steps(spec: &ModelSpec, cap: usize) -> Result<usize> {
    let mut best = 0;
    for steps in 1..=cap {
        match build_discrete_problem(spec, steps) {
            Ok(dlq) if dlq.control_dim() <= MAX_CONTROL_DIM => best = steps,
            Ok(_) | Err(Error::TreeTooLarge(_)) => break,
            // Too coarse for the jump intensities; finer grids may still fit.
            Err(Error::JumpProbability { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if best == 0 {
        return Err(Error::TreeTooLarge("no step count fits the dense solver".into()));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Matched {
    Normalized,
    Literal,
    Both,
    Neither,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationEntry {
    pub instance_id: String,
    /// Richardson extrapolation of the oracle minimum to `h → 0`.
    pub oracle_cost: f64,
    pub riccati_value: f64,
    pub literal_value: f64,
    pub matched: Matched,
    pub tolerance: f64,
    pub oracle_steps: [usize; 2],
    pub oracle_costs: [f64; 2],
    pub oracle_control: Vec<f64>,
    pub riccati_control: Vec<f64>,
    pub literal_control: Vec<f64>,
    pub control_tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    pub instances: Vec<CertificationEntry>,
}

impl CertificationReport {
    /// True when every instance is matched by the normalized convention.
    pub fn passed(&self) -> bool {
        self.instances
            .iter()
            .all(|e| matches!(e.matched, Matched::Normalized | Matched::Both))
    }
}

/// Absolute floor on the extrapolation tolerances.
const TOL_FLOOR: f64 = 1e-9;

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

/// Compares the oracle with both factor conventions on one instance.
///
/// Oracle minima at `s` and `2s` steps are extrapolated linearly in `h`;
/// their difference serves as the tolerance. The first control, at the root
/// where `X = E X = x₀`, is treated the same way and compared with `K1(0) x₀`.
pub fn certify_instance(id: &str, spec: &ModelSpec, max_steps: usize) -> Result<CertificationEntry> {
    let fine = max_feasible_steps(spec, max_steps)?;
    let coarse = (fine / 2).max(1);
    if coarse == fine {
        return Err(Error::TreeTooLarge(format!("instance {id} admits a single oracle step")));
    }
    let solve = |steps: usize| -> Result<DiscreteSolution> { solve_discrete_exact(&build_discrete_problem(spec, steps)?) };
    let (lo, hi) = (solve(coarse)?, solve(fine)?);
    let (s1, s2) = (coarse as f64, fine as f64);
    let extrapolate = |a: f64, b: f64| (s2 * b - s1 * a) / (s2 - s1);

    let oracle_cost = extrapolate(lo.cost, hi.cost);
    let tolerance = (hi.cost - lo.cost).abs().max(TOL_FLOOR);
    let oracle_control: Vec<f64> = lo
        .root_control()
        .iter()
        .zip(hi.root_control().iter())
        .map(|(a, b)| extrapolate(*a, *b))
        .collect();
    let control_tolerance = (hi.root_control() - lo.root_control()).amax().max(TOL_FLOOR);

    let side = |conv: Convention| -> Result<(f64, Vec<f64>)> {
        let sol = solve_riccati_with(spec, conv)?;
        let value = optimal_value(&sol, &spec.x0);
        let gains = feedback_gains(spec, &sol)?;
        let u0 = &gains.k1[0] * &spec.x0;
        Ok((value, u0.iter().copied().collect()))
    };
    let (riccati_value, riccati_control) = side(Convention::NORMALIZED)?;
    let (literal_value, literal_control) = side(Convention::LITERAL)?;

    let agrees = |value: f64, control: &[f64]| {
        within(value, oracle_cost, tolerance)
            && control
                .iter()
                .zip(&oracle_control)
                .all(|(c, o)| within(*c, *o, control_tolerance))
    };
    let matched = match (agrees(riccati_value, &riccati_control), agrees(literal_value, &literal_control)) {
        (true, true) => Matched::Both,
        (true, false) => Matched::Normalized,
        (false, true) => Matched::Literal,
        (false, false) => Matched::Neither,
    };
    Ok(CertificationEntry {
        instance_id: id.to_string(),
        oracle_cost,
        riccati_value,
        literal_value,
        matched,
        tolerance,
        oracle_steps: [coarse, fine],
        oracle_costs: [lo.cost, hi.cost],
        oracle_control,
        riccati_control,
        literal_control,
        control_tolerance,
    })
}

/// Step cap for trees that collapse to a single branch.
pub const DETERMINISTIC_STEP_CAP: usize = 256;

pub fn certify_convention(family: &[(String, ModelSpec)]) -> Result<CertificationReport> {
    let instances = family
        .iter()
        .map(|(id, spec)| certify_instance(id, spec, DETERMINISTIC_STEP_CAP))
        .collect::<Result<Vec<_>>>()?;
    Ok(CertificationReport { instances })
}

/// The standard battery: bar-free, zero-cost, mean-field-only, jump-only and
/// a mixed two-dimensional instance.
pub fn certification_battery() -> Vec<(String, ModelSpec)> {
    let s = |v: f64| Mat::from_element(1, 1, v);
    let x1 = Vector::from_element(1, 1.0);
    let steps = 1000;
    let build = |b: crate::model::ModelBuilder| b.build().expect("battery instance is valid");

    let bar_free = build(
        ModelSpec::builder(1, 1, 1.0, steps)
            .a(s(0.3))
            .b(s(1.0))
            .c(s(0.4))
            .d(s(0.2))
            .q(s(1.0))
            .r(s(1.0))
            .g(s(0.5))
            .x0(x1.clone()),
    );
    let zero_cost = build(
        ModelSpec::builder(1, 1, 1.0, steps)
            .a(s(0.5))
            .b(s(1.0))
            .c(s(0.3))
            .r(s(1.0))
            .x0(x1.clone()),
    );
    let mean_field = build(
        ModelSpec::builder(1, 1, 1.0, steps)
            .a_bar(s(1.0))
            .b(s(0.5))
            .b_bar(s(0.5))
            .q(s(0.5))
            .q_bar(s(0.5))
            .r(s(1.0))
            .r_bar(s(1.0))
            .g(s(0.5))
            .g_bar(s(0.5))
            .x0(x1.clone()),
    );
    let jump_only = build(
        ModelSpec::builder(1, 1, 1.0, steps)
            .b(s(1.0))
            .q(s(1.0))
            .r(s(1.0))
            .g(s(0.5))
            .x0(x1.clone())
            .atom("jump", 1.0, s(0.5), s(0.0), s(0.3), s(0.0)),
    );
    let mixed = build(
        ModelSpec::builder(2, 1, 1.0, steps)
            .a(Mat::from_row_slice(2, 2, &[0.0, 1.0, -0.5, 0.2]))
            .a_bar(Mat::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.1]))
            .b(Mat::from_row_slice(2, 1, &[0.0, 1.0]))
            .b_bar(Mat::from_row_slice(2, 1, &[0.3, 0.0]))
            .c(Mat::identity(2, 2) * 0.3)
            .c_bar(Mat::identity(2, 2) * 0.1)
            .d(Mat::from_row_slice(2, 1, &[0.1, 0.2]))
            .q(Mat::identity(2, 2))
            .q_bar(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.5]))
            .r(s(1.0))
            .r_bar(s(0.5))
            .g(Mat::identity(2, 2) * 0.5)
            .g_bar(Mat::identity(2, 2) * 0.2)
            .x0(Vector::from_vec(vec![1.0, -0.5]))
            .atom(
                "jump",
                0.7,
                Mat::identity(2, 2) * 0.3,
                Mat::identity(2, 2) * 0.1,
                Mat::from_row_slice(2, 1, &[0.2, 0.0]),
                Mat::from_row_slice(2, 1, &[0.0, 0.1]),
            ),
    );
    vec![
        ("bar-free".to_string(), bar_free),
        ("zero-cost".to_string(), zero_cost),
        ("mean-field".to_string(), mean_field),
        ("jump-only".to_string(), jump_only),
        ("mixed".to_string(), mixed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn noisy_scalar() -> ModelSpec {
        ModelSpec::builder(1, 1, 1.0, 10)
            .a(s(0.3))
            .a_bar(s(0.2))
            .b(s(1.0))
            .b_bar(s(0.4))
            .c(s(0.4))
            .c_bar(s(0.1))
            .d(s(0.2))
            .q(s(1.0))
            .q_bar(s(0.3))
            .r(s(1.0))
            .r_bar(s(0.5))
            .g(s(0.5))
            .g_bar(s(0.2))
            .x0(Vector::from_element(1, 1.0))
            .atom("z", 1.0, s(0.3), s(0.1), s(0.2), s(0.1))
            .build()
            .unwrap()
    }

    #[test]
    fn tree_counts() {
        let spec = ModelSpec::builder(1, 1, 1.0, 10).c(s(1.0)).r(s(1.0)).build().unwrap();
        let dlq = build_discrete_problem(&spec, 1).unwrap();
        assert_eq!(dlq.leaf_count(), 2);
        let spec = ModelSpec::builder(1, 1, 1.0, 10)
            .c(s(1.0))
            .r(s(1.0))
            .atom("z", 1.0, s(0.0), s(0.0), s(0.0), s(0.0))
            .build()
            .unwrap();
        let dlq = build_discrete_problem(&spec, 2).unwrap();
        assert_eq!(dlq.leaf_count(), 16);
        for t in 0..=2 {
            assert!((dlq.level_probs(t).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn deterministic_tree_collapses() {
        let spec = ModelSpec::builder(1, 1, 1.0, 10)
            .a(s(1.0))
            .b(s(1.0))
            .r(s(1.0))
            .build()
            .unwrap();
        let dlq = build_discrete_problem(&spec, 5).unwrap();
        assert_eq!(dlq.leaf_count(), 1);
    }

    #[test]
    fn errors() {
        let spec = ModelSpec::builder(1, 1, 1.0, 10)
            .r(s(1.0))
            .atom("z", 3.0, s(0.0), s(0.0), s(0.0), s(0.0))
            .build()
            .unwrap();
        assert!(matches!(
            build_discrete_problem(&spec, 2),
            Err(Error::JumpProbability { atom: 0, .. })
        ));
        let spec = ModelSpec::builder(1, 1, 1.0, 10).c(s(1.0)).r(s(1.0)).build().unwrap();
        assert!(matches!(build_discrete_problem(&spec, 20), Err(Error::TreeTooLarge(_))));
    }

    #[test]
    fn zero_start_zero_cost() {
        let spec = ModelSpec::builder(1, 1, 1.0, 10)
            .a(s(1.0))
            .b(s(1.0))
            .c(s(0.5))
            .r(s(1.0))
            .build()
            .unwrap();
        let sol = solve_discrete_exact(&build_discrete_problem(&spec, 3).unwrap()).unwrap();
        assert_eq!(sol.cost, 0.0);
        assert!(sol.controls.iter().flatten().all(|v| v.amax() == 0.0));
    }

    /// Adjoint gradient against central differences of the direct cost.
    #[test]
    fn gradient_matches_finite_differences() {
        let dlq = build_discrete_problem(&noisy_scalar(), 2).unwrap();
        let probs = dlq.all_probs();
        let dim = dlq.control_dim();
        let u: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.7).sin()).collect();
        let g = dlq.gradient_of(&u, dlq.x0.as_slice(), &probs);
        let step = 1e-6;
        for i in 0..dim {
            let mut up = u.clone();
            up[i] += step;
            let mut dn = u.clone();
            dn[i] -= step;
            let fd = (dlq.cost_of(&up, dlq.x0.as_slice(), &probs) - dlq.cost_of(&dn, dlq.x0.as_slice(), &probs))
                / (2.0 * step);
            assert!((fd - g[i]).abs() < 1e-7, "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn minimizer_is_stationary_and_coordinatewise_optimal() {
        let dlq = build_discrete_problem(&noisy_scalar(), 3).unwrap();
        let sol = solve_discrete_exact(&dlq).unwrap();
        assert!(sol.gradient_norm <= 1e-9, "{}", sol.gradient_norm);
        let base = dlq.cost(&sol.controls).unwrap();
        assert!((base - sol.cost).abs() < 1e-14);
        for t in 0..dlq.steps {
            for j in 0..dlq.nodes_at(t) {
                for eps in [1e-3, -1e-3] {
                    let mut c = sol.controls.clone();
                    c[t][j][0] += eps;
                    assert!(dlq.cost(&c).unwrap() > base);
                }
            }
        }
    }

    #[test]
    fn deterministic_scalar_matches_closed_form() {
        // x' = u, cost ∫ x² + u², G = 0: value tanh(1) for x₀ = 1.
        let spec = ModelSpec::builder(1, 1, 1.0, 10)
            .b(s(1.0))
            .q(s(1.0))
            .r(s(1.0))
            .x0(Vector::from_element(1, 1.0))
            .build()
            .unwrap();
        let a = solve_discrete_exact(&build_discrete_problem(&spec, 200).unwrap()).unwrap();
        let b = solve_discrete_exact(&build_discrete_problem(&spec, 400).unwrap()).unwrap();
        let extrapolated = 2.0 * b.cost - a.cost;
        assert!((extrapolated - 1f64.tanh()).abs() < 1e-5);
    }

    #[test]
    fn report_serializes() {
        let entry = CertificationEntry {
            instance_id: "x".into(),
            oracle_cost: 1.0,
            riccati_value: 1.0,
            literal_value: 2.0,
            matched: Matched::Normalized,
            tolerance: 0.1,
            oracle_steps: [1, 2],
            oracle_costs: [1.0, 1.0],
            oracle_control: vec![0.0],
            riccati_control: vec![0.0],
            literal_control: vec![0.0],
            control_tolerance: 0.1,
        };
        let v = serde_json::to_value(&entry).unwrap();
        assert_eq!(v["matched"], "normalized");
        assert_eq!(v["instance_id"], "x");
    }
}

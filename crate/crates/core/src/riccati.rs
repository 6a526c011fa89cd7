//! Backward matrix Riccati equations for the fluctuation (`P`) and mean
//! (`Π`) parts of the value function, the control-space Hessians `Σ₀`, `Σ₁`,
//! and the resulting state-feedback gains.
//!
//! The adjoint is normalized as `p = 2[P(X - E X) + Π E X]`. Under that
//! normalization both equations carry the running weights with coefficient
//! one, `Σ₁` carries `N + N̄` with coefficient one, and the optimal cost is
//! `⟨Π(0)x₀, x₀⟩`. [`Convention::LITERAL`] keeps the alternative factor
//! placement (`2Q`, `2(N + N̄)`, value `½⟨Π(0)x₀, x₀⟩`) so the two can be
//! compared against the scenario-tree oracle.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{congruence, max_abs, spd_solve, symmetrize_in_place, Mat, Vector};
use crate::model::ModelSpec;

/// Entries above this magnitude are treated as finite-time escape.
pub const BLOW_UP: f64 = 1e12;

/// Placement of the factors of two in the Riccati system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convention {
    /// Multiplier on `Q` (resp. `Q + Q̄`) in the `P` (resp. `Π`) equation.
    pub cost_scale: f64,
    /// Multiplier on `N + N̄` inside `Σ₁`.
    pub mean_control_scale: f64,
    /// Multiplier on `⟨Π(0)x₀, x₀⟩` in the optimal value.
    pub value_scale: f64,
}

impl Convention {
    pub const NORMALIZED: Convention = Convention {
        cost_scale: 1.0,
        mean_control_scale: 1.0,
        value_scale: 1.0,
    };

    /// Factors exactly as the printed Riccati system places them.
    pub const LITERAL: Convention = Convention {
        cost_scale: 2.0,
        mean_control_scale: 2.0,
        value_scale: 0.5,
    };
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Fluctuation Riccati solution at every grid node.
    pub p: Vec<Mat>,
    /// Mean Riccati solution at every grid node.
    pub pi: Vec<Mat>,
    pub h: f64,
    pub convention: Convention,
}

/// Gains of `u = K0 (X - E X) + K1 E X`; the minus signs are already included.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub k0: Vec<Mat>,
    pub k1: Vec<Mat>,
}

/// Coefficients at one grid index with the mean-field sums precomputed.
struct Snapshot<'a> {
    spec: &'a ModelSpec,
    i: usize,
    a_hat: Mat,
    b_hat: Mat,
    c_hat: Mat,
    d_hat: Mat,
    e_hat: Vec<Mat>,
    f_hat: Vec<Mat>,
}

impl<'a> Snapshot<'a> {
    fn new(spec: &'a ModelSpec, i: usize) -> Self {
        let k = spec.atoms();
        Snapshot {
            spec,
            i,
            a_hat: spec.a.at(i) + spec.a_bar.at(i),
            b_hat: spec.b.at(i) + spec.b_bar.at(i),
            c_hat: spec.c.at(i) + spec.c_bar.at(i),
            d_hat: spec.d.at(i) + spec.d_bar.at(i),
            e_hat: (0..k).map(|j| spec.e[j].at(i) + spec.e_bar[j].at(i)).collect(),
            f_hat: (0..k).map(|j| spec.f[j].at(i) + spec.f_bar[j].at(i)).collect(),
        }
    }

    fn nu(&self, k: usize) -> f64 {
        self.spec.jumps.nu(k)
    }

    fn sigma0(&self, p: &Mat) -> Mat {
        let s = self.spec;
        let i = self.i;
        let mut out = s.r.at(i) + congruence(s.d.at(i), p, s.d.at(i));
        for k in 0..s.atoms() {
            out += congruence(s.f[k].at(i), p, s.f[k].at(i)) * self.nu(k);
        }
        symmetrize_in_place(&mut out);
        out
    }

    fn sigma1(&self, p: &Mat, conv: Convention) -> Mat {
        let s = self.spec;
        let i = self.i;
        let mut out = (s.r.at(i) + s.r_bar.at(i)) * conv.mean_control_scale
            + congruence(&self.d_hat, p, &self.d_hat);
        for k in 0..s.atoms() {
            out += congruence(&self.f_hat[k], p, &self.f_hat[k]) * self.nu(k);
        }
        symmetrize_in_place(&mut out);
        out
    }

    /// `BᵀP + DᵀPC + Σ ν FᵀPE`, the m×n coupling of the fluctuation part.
    fn coupling0(&self, p: &Mat) -> Mat {
        let s = self.spec;
        let i = self.i;
        let mut out = s.b.at(i).tr_mul(p) + congruence(s.d.at(i), p, s.c.at(i));
        for k in 0..s.atoms() {
            out += congruence(s.f[k].at(i), p, s.e[k].at(i)) * self.nu(k);
        }
        out
    }

    fn coupling1(&self, p: &Mat, pi: &Mat) -> Mat {
        let s = self.spec;
        let mut out = self.b_hat.tr_mul(pi) + congruence(&self.d_hat, p, &self.c_hat);
        for k in 0..s.atoms() {
            out += congruence(&self.f_hat[k], p, &self.e_hat[k]) * self.nu(k);
        }
        out
    }

    fn rhs_p(&self, p: &Mat, conv: Convention) -> Result<Mat> {
        let s = self.spec;
        let i = self.i;
        let a = s.a.at(i);
        let c = s.c.at(i);
        let mut out = p * a + a.tr_mul(p) + congruence(c, p, c) + s.q.at(i) * conv.cost_scale;
        for k in 0..s.atoms() {
            out += congruence(s.e[k].at(i), p, s.e[k].at(i)) * self.nu(k);
        }
        let l0 = self.coupling0(p);
        let solved = spd_solve(&self.sigma0(p), &l0, "sigma0", i)?;
        out -= l0.tr_mul(&solved);
        symmetrize_in_place(&mut out);
        Ok(out)
    }

    fn rhs_pi(&self, p: &Mat, pi: &Mat, conv: Convention) -> Result<Mat> {
        let s = self.spec;
        let i = self.i;
        let mut out = pi * &self.a_hat
            + self.a_hat.tr_mul(pi)
            + congruence(&self.c_hat, p, &self.c_hat)
            + (s.q.at(i) + s.q_bar.at(i)) * conv.cost_scale;
        for k in 0..s.atoms() {
            out += congruence(&self.e_hat[k], p, &self.e_hat[k]) * self.nu(k);
        }
        let l1 = self.coupling1(p, pi);
        let solved = spd_solve(&self.sigma1(p, conv), &l1, "sigma1", i)?;
        out -= l1.tr_mul(&solved);
        symmetrize_in_place(&mut out);
        Ok(out)
    }
}

/// `Σ₀ = N + DᵀPD + Σ_k ν_k FₖᵀPFₖ` at grid index `i`.
pub fn assemble_sigma0(spec: &ModelSpec, i: usize, p: &Mat) -> Mat {
    Snapshot::new(spec, i).sigma0(p)
}

/// `Σ₁ = (N+N̄) + (D+D̄)ᵀP(D+D̄) + Σ_k ν_k (Fₖ+F̄ₖ)ᵀP(Fₖ+F̄ₖ)` at grid index `i`.
pub fn assemble_sigma1(spec: &ModelSpec, i: usize, p: &Mat) -> Mat {
    Snapshot::new(spec, i).sigma1(p, Convention::NORMALIZED)
}

/// Value of `-dP/dt` at grid index `i`.
pub fn riccati_rhs_p(spec: &ModelSpec, i: usize, p: &Mat) -> Result<Mat> {
    Snapshot::new(spec, i).rhs_p(p, Convention::NORMALIZED)
}

/// Value of `-dΠ/dt` at grid index `i`, given `P` and `Π` at that node.
pub fn riccati_rhs_pi(spec: &ModelSpec, i: usize, p: &Mat, pi: &Mat) -> Result<Mat> {
    Snapshot::new(spec, i).rhs_pi(p, pi, Convention::NORMALIZED)
}

pub fn solve_riccati(spec: &ModelSpec) -> Result<RiccatiSolution> {
    solve_riccati_with(spec, Convention::NORMALIZED)
}

/// Classical RK4 from `T` down to `0`.
///
/// On `[t_i, t_{i+1}]` every stage uses the coefficients of index `i`. `P`
/// does not depend on `Π`, so the two are stepped together and each `Π`
/// stage sees the matching `P` stage value.
pub fn solve_riccati_with(spec: &ModelSpec, conv: Convention) -> Result<RiccatiSolution> {
    spec.check_structure()?;
    let steps = spec.n_steps;
    let h = spec.step();
    let mut p = vec![Mat::zeros(spec.n, spec.n); steps + 1];
    let mut pi = p.clone();
    p[steps] = spec.g.clone();
    pi[steps] = &spec.g + &spec.g_bar;

    for i in (0..steps).rev() {
        let snap = Snapshot::new(spec, i);
        let (p1, pi1) = (&p[i + 1], &pi[i + 1]);

        let kp1 = snap.rhs_p(p1, conv)?;
        let kq1 = snap.rhs_pi(p1, pi1, conv)?;
        let p2 = p1 + &kp1 * (0.5 * h);
        let q2 = pi1 + &kq1 * (0.5 * h);
        let kp2 = snap.rhs_p(&p2, conv)?;
        let kq2 = snap.rhs_pi(&p2, &q2, conv)?;
        let p3 = p1 + &kp2 * (0.5 * h);
        let q3 = pi1 + &kq2 * (0.5 * h);
        let kp3 = snap.rhs_p(&p3, conv)?;
        let kq3 = snap.rhs_pi(&p3, &q3, conv)?;
        let p4 = p1 + &kp3 * h;
        let q4 = pi1 + &kq3 * h;
        let kp4 = snap.rhs_p(&p4, conv)?;
        let kq4 = snap.rhs_pi(&p4, &q4, conv)?;

        let mut p_new = p1 + (kp1 + kp2 * 2.0 + kp3 * 2.0 + kp4) * (h / 6.0);
        let mut pi_new = pi1 + (kq1 + kq2 * 2.0 + kq3 * 2.0 + kq4) * (h / 6.0);
        symmetrize_in_place(&mut p_new);
        symmetrize_in_place(&mut pi_new);
        if !(max_abs(&p_new) <= BLOW_UP) {
            return Err(Error::BlowUp { which: "P", index: i });
        }
        if !(max_abs(&pi_new) <= BLOW_UP) {
            return Err(Error::BlowUp { which: "Pi", index: i });
        }
        p[i] = p_new;
        pi[i] = pi_new;
    }
    Ok(RiccatiSolution {
        p,
        pi,
        h,
        convention: conv,
    })
}

/// Feedback gains at every grid node.
pub fn feedback_gains(spec: &ModelSpec, sol: &RiccatiSolution) -> Result<FeedbackLaw> {
    let nodes = sol.p.len();
    let mut k0 = Vec::with_capacity(nodes);
    let mut k1 = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let snap = Snapshot::new(spec, i);
        let (p, pi) = (&sol.p[i], &sol.pi[i]);
        k0.push(-spd_solve(&snap.sigma0(p), &snap.coupling0(p), "sigma0", i)?);
        k1.push(-spd_solve(
            &snap.sigma1(p, sol.convention),
            &snap.coupling1(p, pi),
            "sigma1",
            i,
        )?);
    }
    Ok(FeedbackLaw { k0, k1 })
}

/// Optimal cost `⟨Π(0)x₀, x₀⟩` (scaled by the solution's convention).
pub fn optimal_value(sol: &RiccatiSolution, x0: &Vector) -> f64 {
    sol.convention.value_scale * x0.dot(&(&sol.pi[0] * x0))
}

fn matrix_headers(prefix: &str, rows: usize, cols: usize, out: &mut Vec<String>) {
    for i in 0..rows {
        for j in 0..cols {
            out.push(format!("{prefix}_{i}_{j}"));
        }
    }
}

fn push_row_major(m: &Mat, out: &mut Vec<String>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(format!("{}", m[(i, j)]));
        }
    }
}

/// One row per grid node: `t`, then `P`, `Pi`, `K0`, `K1` entries row-major.
pub fn write_csv<W: Write>(
    writer: W,
    spec: &ModelSpec,
    sol: &RiccatiSolution,
    law: &FeedbackLaw,
) -> Result<()> {
    let (n, m) = (spec.n, spec.m);
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    matrix_headers("P", n, n, &mut header);
    matrix_headers("Pi", n, n, &mut header);
    matrix_headers("K0", m, n, &mut header);
    matrix_headers("K1", m, n, &mut header);
    wtr.write_record(&header)?;
    for i in 0..sol.p.len() {
        let mut row = vec![format!("{}", i as f64 * sol.h)];
        push_row_major(&sol.p[i], &mut row);
        push_row_major(&sol.pi[i], &mut row);
        push_row_major(&law.k0[i], &mut row);
        push_row_major(&law.k1[i], &mut row);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{inf_norm_diff, min_eigenvalue};

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn tanh_instance(n_steps: usize) -> ModelSpec {
        ModelSpec::builder(1, 1, 1.0, n_steps)
            .b(s(1.0))
            .r(s(1.0))
            .q(s(1.0))
            .x0(Vector::from_element(1, 1.0))
            .build()
            .unwrap()
    }

    #[test]
    fn sigma0_only_control_weight() {
        let spec = ModelSpec::builder(1, 1, 1.0, 4).r(s(1.0)).build().unwrap();
        assert_eq!(assemble_sigma0(&spec, 0, &s(7.0))[(0, 0)], 1.0);
    }

    #[test]
    fn sigma0_scalar_arithmetic() {
        let spec = ModelSpec::builder(1, 1, 1.0, 4)
            .r(s(2.0))
            .d(s(1.0))
            .atom("z", 2.0, s(0.0), s(0.0), s(1.0), s(0.0))
            .build()
            .unwrap();
        assert_eq!(assemble_sigma0(&spec, 0, &s(3.0))[(0, 0)], 11.0);
    }

    #[test]
    fn sigma1_cases() {
        let spec = ModelSpec::builder(2, 2, 1.0, 4)
            .r(Mat::identity(2, 2) * 0.5)
            .r_bar(Mat::identity(2, 2) * 0.5)
            .build()
            .unwrap();
        assert_eq!(assemble_sigma1(&spec, 0, &Mat::identity(2, 2)), Mat::identity(2, 2));

        let spec = ModelSpec::builder(1, 1, 1.0, 4)
            .r(s(1.0))
            .d(s(1.0))
            .d_bar(s(1.0))
            .build()
            .unwrap();
        assert_eq!(assemble_sigma1(&spec, 0, &s(1.0))[(0, 0)], 5.0);
    }

    #[test]
    fn rhs_zero_and_scalar_substitution() {
        let spec = ModelSpec::builder(2, 1, 1.0, 4).r(s(1.0)).build().unwrap();
        let p = Mat::identity(2, 2);
        assert_eq!(riccati_rhs_p(&spec, 0, &p).unwrap(), Mat::zeros(2, 2));
        assert_eq!(riccati_rhs_pi(&spec, 0, &p, &p).unwrap(), Mat::zeros(2, 2));

        let (b, nw, q, pv) = (0.7, 1.9, 0.4, 1.3);
        let spec = ModelSpec::builder(1, 1, 1.0, 4)
            .b(s(b))
            .r(s(nw))
            .q(s(q))
            .build()
            .unwrap();
        let rhs = riccati_rhs_p(&spec, 0, &s(pv)).unwrap()[(0, 0)];
        assert!((rhs - (q - pv * pv * b * b / nw)).abs() < 1e-14);
    }

    #[test]
    fn singular_sigma_is_reported() {
        let spec = ModelSpec::builder(1, 1, 1.0, 4).b(s(1.0)).q(s(1.0)).build().unwrap();
        assert!(matches!(
            riccati_rhs_p(&spec, 2, &s(1.0)),
            Err(Error::SingularSigma { index: 2, .. })
        ));
    }

    #[test]
    fn zero_cost_is_fixed_point() {
        let spec = ModelSpec::builder(2, 1, 1.0, 20)
            .a(Mat::from_row_slice(2, 2, &[0.1, 1.0, -1.0, 0.2]))
            .b(Mat::from_row_slice(2, 1, &[0.0, 1.0]))
            .c(Mat::identity(2, 2) * 0.3)
            .r(s(1.0))
            .build()
            .unwrap();
        let sol = solve_riccati(&spec).unwrap();
        assert!(sol.p.iter().chain(&sol.pi).all(|m| max_abs(m) == 0.0));
        assert_eq!(optimal_value(&sol, &Vector::from_vec(vec![3.0, -1.0])), 0.0);
    }

    #[test]
    fn tanh_closed_form_and_gain() {
        let spec = tanh_instance(1000);
        let sol = solve_riccati(&spec).unwrap();
        let exact = 1f64.tanh();
        assert!((sol.p[0][(0, 0)] - exact).abs() < 1e-8);
        for (i, p) in sol.p.iter().enumerate() {
            let t = spec.time(i);
            assert!((p[(0, 0)] - (1.0 - t).tanh()).abs() < 1e-8);
        }
        let law = feedback_gains(&spec, &sol).unwrap();
        assert!((law.k0[0][(0, 0)] + exact).abs() < 1e-8);
        assert!((optimal_value(&sol, &spec.x0) - exact).abs() < 1e-8);
    }

    #[test]
    fn no_control_authority_gives_zero_gains() {
        let spec = ModelSpec::builder(2, 1, 1.0, 10)
            .a(Mat::identity(2, 2))
            .q(Mat::identity(2, 2))
            .r(s(1.0))
            .g(Mat::identity(2, 2))
            .build()
            .unwrap();
        let law = feedback_gains(&spec, &solve_riccati(&spec).unwrap()).unwrap();
        assert!(law.k0.iter().chain(&law.k1).all(|k| max_abs(k) == 0.0));
    }

    #[test]
    fn mean_field_scalar_positive_and_symmetric() {
        let spec = ModelSpec::builder(1, 1, 1.0, 1000)
            .a_bar(s(1.0))
            .b(s(0.5))
            .b_bar(s(0.5))
            .q(s(0.5))
            .q_bar(s(0.5))
            .r(s(1.0))
            .g(s(0.5))
            .g_bar(s(0.5))
            .build()
            .unwrap();
        let sol = solve_riccati(&spec).unwrap();
        assert!(sol.pi.iter().all(|m| min_eigenvalue(m) > 0.0));
        assert!(inf_norm_diff(&sol.pi[1000], &s(1.0)) == 0.0);
    }

    #[test]
    fn literal_convention_on_deterministic_instance() {
        let spec = tanh_instance(1000);
        let lit = solve_riccati_with(&spec, Convention::LITERAL).unwrap();
        // dP/dt = P² - 2 backward from 0 gives P(0) = √2 tanh(√2).
        let sqrt2 = 2f64.sqrt();
        assert!((lit.p[0][(0, 0)] - sqrt2 * sqrt2.tanh()).abs() < 1e-8);
        // Without diffusion or jumps P never reaches the Π equation, and with
        // G = Ḡ = 0 the literal Π is exactly twice the normalized one.
        let norm = solve_riccati(&spec).unwrap();
        assert!((optimal_value(&lit, &spec.x0) - optimal_value(&norm, &spec.x0)).abs() < 1e-12);
    }

    #[test]
    fn literal_convention_differs_with_diffusion() {
        let spec = ModelSpec::builder(1, 1, 1.0, 1000)
            .b(s(1.0))
            .c(s(0.5))
            .r(s(1.0))
            .q(s(1.0))
            .x0(Vector::from_element(1, 1.0))
            .build()
            .unwrap();
        let lit = optimal_value(&solve_riccati_with(&spec, Convention::LITERAL).unwrap(), &spec.x0);
        let norm = optimal_value(&solve_riccati(&spec).unwrap(), &spec.x0);
        assert!((lit - norm).abs() > 5e-3, "{lit} {norm}");
    }

    #[test]
    fn csv_has_expected_header() {
        let spec = tanh_instance(4);
        let sol = solve_riccati(&spec).unwrap();
        let law = feedback_gains(&spec, &sol).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &spec, &sol, &law).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,P_0_0,Pi_0_0,K0_0_0,K1_0_0");
        assert_eq!(lines.count(), 5);
    }
}

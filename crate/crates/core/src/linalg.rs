//! Small dense kernels shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Smallest eigenvalue below which a control Hessian is treated as singular.
pub const SIGMA_TOL: f64 = 1e-10;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute entry of `a - aᵀ`.
pub fn asymmetry(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = symmetrize(m);
    s.symmetric_eigenvalues().min()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn inf_norm_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Solves `sigma * X = rhs` for symmetric positive definite `sigma`.
///
/// Rejects `sigma` whose smallest eigenvalue is below [`SIGMA_TOL`].
pub fn spd_solve(sigma: &Mat, rhs: &Mat, which: &'static str, index: usize) -> Result<Mat> {
    let min_eig = min_eigenvalue(sigma);
    if !(min_eig >= SIGMA_TOL) {
        return Err(Error::SingularSigma {
            which,
            index,
            min_eig,
        });
    }
    let chol = sigma.clone().cholesky().ok_or(Error::SingularSigma {
        which,
        index,
        min_eig,
    })?;
    Ok(chol.solve(rhs))
}

/// `aᵀ p b` without forming intermediate transposes twice.
pub fn congruence(a: &Mat, p: &Mat, b: &Mat) -> Mat {
    a.tr_mul(&(p * b))
}

pub fn quad_form(m: &Mat, x: &Vector) -> f64 {
    x.dot(&(m * x))
}

pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    Mat::from_fn(r, c, |i, j| rows[i][j])
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Slice kernels for the particle loops; matrices are column-major.
pub mod kernels {
    use super::Mat;

    /// `out += scale * a x`.
    #[inline]
    pub fn gemv_acc(out: &mut [f64], a: &Mat, x: &[f64], scale: f64) {
        let rows = a.nrows();
        let data = a.as_slice();
        for (c, xc) in x.iter().enumerate() {
            let s = scale * xc;
            if s == 0.0 {
                continue;
            }
            let col = &data[c * rows..(c + 1) * rows];
            for (o, v) in out.iter_mut().zip(col) {
                *o += v * s;
            }
        }
    }

    /// `out += scale * aᵀ x`.
    #[inline]
    pub fn gemv_t_acc(out: &mut [f64], a: &Mat, x: &[f64], scale: f64) {
        let rows = a.nrows();
        let data = a.as_slice();
        for (c, o) in out.iter_mut().enumerate() {
            let col = &data[c * rows..(c + 1) * rows];
            let dot: f64 = col.iter().zip(x).map(|(v, xv)| v * xv).sum();
            *o += scale * dot;
        }
    }

    /// `xᵀ a x`.
    #[inline]
    pub fn quad(a: &Mat, x: &[f64]) -> f64 {
        let rows = a.nrows();
        let data = a.as_slice();
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            let col = &data[c * rows..(c + 1) * rows];
            let dot: f64 = col.iter().zip(x).map(|(v, xv)| v * xv).sum();
            acc += xc * dot;
        }
        acc
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_rejects_indefinite() {
        let s = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let rhs = Mat::identity(2, 2);
        assert!(matches!(
            spd_solve(&s, &rhs, "sigma0", 3),
            Err(Error::SingularSigma { index: 3, .. })
        ));
    }

    #[test]
    fn spd_solve_inverts() {
        let s = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = spd_solve(&s, &Mat::identity(2, 2), "sigma0", 0).unwrap();
        assert!(inf_norm_diff(&(&s * &x), &Mat::identity(2, 2)) < 1e-14);
    }

    #[test]
    fn min_eigenvalue_of_diagonal() {
        let s = Mat::from_diagonal(&Vector::from_vec(vec![3.0, -0.5, 2.0]));
        assert!((min_eigenvalue(&s) + 0.5).abs() < 1e-14);
    }
}

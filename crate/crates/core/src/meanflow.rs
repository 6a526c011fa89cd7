//! Forward propagation of the deterministic mean `E[X](t)`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::ModelSpec;
use crate::simulator::ControlLaw;

#[derive(Debug, Clone)]
pub struct MeanTrajectory {
    /// `E[X](t_i)` for `i = 0..=n_steps`.
    pub ex: Vec<Vector>,
    /// `E[u](t_i)` for `i = 0..=n_steps`.
    pub eu: Vec<Vector>,
}

/// `E[u] = gain · E[X] + offset`, the mean control of a law whose mean is
/// closed (feedback, deterministic open loop and their perturbations).
pub(crate) struct MeanControl {
    pub gain: Option<Mat>,
    pub offset: Vector,
}

impl MeanControl {
    pub fn apply(&self, ex: &Vector) -> Vector {
        match &self.gain {
            Some(k) => k * ex + &self.offset,
            None => self.offset.clone(),
        }
    }
}

/// Cubic Lagrange interpolation of a node sequence at `i + theta`, with the
/// four-point stencil shifted inward near the ends.
fn interpolate(nodes: &[Mat], i: usize, theta: f64) -> Mat {
    let last = nodes.len() - 1;
    if theta == 0.0 || last == 0 {
        return nodes[i.min(last)].clone();
    }
    if last < 3 {
        let lo = &nodes[i.min(last)];
        let hi = &nodes[(i + 1).min(last)];
        return lo * (1.0 - theta) + hi * theta;
    }
    let start = i.saturating_sub(1).min(last - 3);
    let x = (i - start) as f64 + theta;
    let mut out = Mat::zeros(nodes[0].nrows(), nodes[0].ncols());
    for j in 0..4 {
        let w: f64 = (0..4)
            .filter(|&l| l != j)
            .map(|l| (x - l as f64) / (j as f64 - l as f64))
            .product();
        out += &nodes[start + j] * w;
    }
    out
}

/// Mean control on `[t_i, t_{i+1})` at fraction `theta ∈ [0, 1]` of the step.
/// Feedback gains between nodes come from cubic interpolation.
pub(crate) fn mean_control(law: &ControlLaw, m: usize, i: usize, theta: f64) -> MeanControl {
    match law {
        ControlLaw::Feedback(fb) => MeanControl {
            gain: Some(interpolate(&fb.k1, i, theta)),
            offset: Vector::zeros(m),
        },
        ControlLaw::OpenLoop(u) => MeanControl {
            gain: None,
            offset: u[i.min(u.len() - 1)].clone(),
        },
        ControlLaw::Perturbed {
            base,
            direction,
            epsilon,
        } => {
            let mut mc = mean_control(base, m, i, theta);
            mc.offset += &direction[i.min(direction.len() - 1)] * *epsilon;
            mc
        }
    }
}

/// RK4 for `dE[X]/dt = (A+Ā)E[X] + (B+B̄)E[u]` on the model grid.
pub fn propagate_mean(spec: &ModelSpec, law: &ControlLaw) -> Result<MeanTrajectory> {
    law.check_shapes(spec)?;
    let steps = spec.n_steps;
    let h = spec.step();
    let mut ex = Vec::with_capacity(steps + 1);
    ex.push(spec.x0.clone());
    for i in 0..steps {
        let a_hat = spec.a.at(i) + spec.a_bar.at(i);
        let b_hat = spec.b.at(i) + spec.b_bar.at(i);
        let start = mean_control(law, spec.m, i, 0.0);
        let mid = mean_control(law, spec.m, i, 0.5);
        let end = mean_control(law, spec.m, i, 1.0);
        let drift = |x: &Vector, mc: &MeanControl| &a_hat * x + &b_hat * mc.apply(x);

        let x = &ex[i];
        let k1 = drift(x, &start);
        let k2 = drift(&(x + &k1 * (0.5 * h)), &mid);
        let k3 = drift(&(x + &k2 * (0.5 * h)), &mid);
        let k4 = drift(&(x + &k3 * h), &end);
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                which: "mean",
                index: i,
            });
        }
        ex.push(next);
    }
    let eu = ex
        .iter()
        .enumerate()
        .map(|(i, x)| mean_control(law, spec.m, i, 0.0).apply(x))
        .collect();
    Ok(MeanTrajectory { ex, eu })
}

/// Columns `t, ex_0.., eu_0..`.
pub fn write_csv<W: Write>(writer: W, spec: &ModelSpec, traj: &MeanTrajectory) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend((0..spec.n).map(|j| format!("ex_{j}")));
    header.extend((0..spec.m).map(|j| format!("eu_{j}")));
    wtr.write_record(&header)?;
    for (i, (x, u)) in traj.ex.iter().zip(&traj.eu).enumerate() {
        let mut row = vec![format!("{}", spec.time(i))];
        row.extend(x.iter().map(|v| format!("{v}")));
        row.extend(u.iter().map(|v| format!("{v}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

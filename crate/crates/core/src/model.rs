//! Problem instances: coefficient tracks, the jump measure, ingestion and
//! validation of the standing positivity assumptions.
//!
//! Coefficients are piecewise constant on the uniform grid `t_i = i * h`:
//! the value on `[t_i, t_{i+1})` is `values[i]`. The mark space of the jump
//! measure is a finite set of weighted atoms, so every integral against the
//! intensity becomes a weighted sum over atoms.

use std::fmt;
use std::path::Path;

use log::warn;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, min_eigenvalue, symmetrize, to_rows, Mat, Vector};

/// Tolerance on the smallest eigenvalue when checking semidefiniteness.
pub const PSD_TOL: f64 = 1e-10;
/// Residual asymmetry allowed after symmetrization.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Input asymmetry above which ingestion logs a warning.
pub const ASYMMETRY_WARN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct JumpAtom {
    pub label: String,
    /// Intensity contribution of the atom, in 1/time.
    pub nu: f64,
}

/// Finite jump measure realized as weighted atoms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpMeasure {
    atoms: Vec<JumpAtom>,
}

impl JumpMeasure {
    pub fn new(atoms: Vec<JumpAtom>) -> Result<Self> {
        for (k, atom) in atoms.iter().enumerate() {
            if !atom.nu.is_finite() || atom.nu <= 0.0 {
                return Err(Error::Malformed(format!(
                    "jump atom {k} ({}) has weight {}; weights must be finite and > 0",
                    atom.label, atom.nu
                )));
            }
        }
        Ok(Self { atoms })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn nu(&self, k: usize) -> f64 {
        self.atoms[k].nu
    }

    pub fn total_intensity(&self) -> f64 {
        self.atoms.iter().map(|a| a.nu).sum()
    }
}

/// A coefficient sampled on the grid, or a constant broadcast to every node.
#[derive(Debug, Clone, PartialEq)]
pub enum Track {
    Constant(Mat),
    Grid(Vec<Mat>),
}

impl Track {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Track::Constant(Mat::zeros(rows, cols))
    }

    /// Value on `[t_i, t_{i+1})`.
    pub fn at(&self, i: usize) -> &Mat {
        match self {
            Track::Constant(m) => m,
            Track::Grid(v) => &v[i.min(v.len() - 1)],
        }
    }

    pub fn nodes(&self) -> usize {
        match self {
            Track::Constant(_) => 1,
            Track::Grid(v) => v.len(),
        }
    }

    fn matrices(&self) -> &[Mat] {
        match self {
            Track::Constant(m) => std::slice::from_ref(m),
            Track::Grid(v) => v,
        }
    }

    fn map(&self, f: impl Fn(&Mat) -> Mat) -> Track {
        match self {
            Track::Constant(m) => Track::Constant(f(m)),
            Track::Grid(v) => Track::Grid(v.iter().map(f).collect()),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.matrices().iter().all(|m| m.iter().all(|v| *v == 0.0))
    }

    fn to_json(&self) -> Value {
        match self {
            Track::Constant(m) => json!(to_rows(m)),
            Track::Grid(v) => Value::Array(v.iter().map(|m| json!(to_rows(m))).collect()),
        }
    }
}

impl From<Mat> for Track {
    fn from(m: Mat) -> Self {
        Track::Constant(m)
    }
}

/// A complete problem instance.
///
/// `r` and `r_bar` are the control weights (`N`, `Nbar` in the JSON model).
/// The jump coefficients `e`, `e_bar`, `f`, `f_bar` hold one track per atom.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub x0: Vector,
    pub delta: f64,
    pub a: Track,
    pub a_bar: Track,
    pub b: Track,
    pub b_bar: Track,
    pub c: Track,
    pub c_bar: Track,
    pub d: Track,
    pub d_bar: Track,
    pub e: Vec<Track>,
    pub e_bar: Vec<Track>,
    pub f: Vec<Track>,
    pub f_bar: Vec<Track>,
    pub q: Track,
    pub q_bar: Track,
    pub r: Track,
    pub r_bar: Track,
    pub g: Mat,
    pub g_bar: Mat,
    pub jumps: JumpMeasure,
}

impl ModelSpec {
    pub fn builder(n: usize, m: usize, horizon: f64, n_steps: usize) -> ModelBuilder {
        ModelBuilder::new(n, m, horizon, n_steps)
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.step()
    }

    pub fn atoms(&self) -> usize {
        self.jumps.len()
    }

    pub fn total_intensity(&self) -> f64 {
        total_intensity(self)
    }

    /// True when every mean-field coefficient vanishes.
    pub fn is_bar_free(&self) -> bool {
        self.a_bar.is_zero()
            && self.b_bar.is_zero()
            && self.c_bar.is_zero()
            && self.d_bar.is_zero()
            && self.e_bar.iter().all(Track::is_zero)
            && self.f_bar.iter().all(Track::is_zero)
            && self.q_bar.is_zero()
            && self.r_bar.is_zero()
            && self.g_bar.iter().all(|v| *v == 0.0)
    }

    /// True when the Brownian coefficients vanish on the whole grid.
    pub fn has_brownian_noise(&self) -> bool {
        !(self.c.is_zero() && self.c_bar.is_zero() && self.d.is_zero() && self.d_bar.is_zero())
    }

    /// Copy of the instance on a different grid; grid tracks are resampled
    /// at the nearest-left node of the original grid.
    pub fn with_steps(&self, n_steps: usize) -> ModelSpec {
        let old_h = self.step();
        let new_h = self.horizon / n_steps as f64;
        let resample = |t: &Track| match t {
            Track::Constant(_) => t.clone(),
            Track::Grid(v) => Track::Grid(
                (0..=n_steps)
                    .map(|i| {
                        let idx = ((i as f64 * new_h) / old_h + 1e-9).floor() as usize;
                        v[idx.min(v.len() - 1)].clone()
                    })
                    .collect(),
            ),
        };
        let mut out = self.clone();
        out.n_steps = n_steps;
        for t in out.tracks_mut() {
            *t = resample(t);
        }
        out
    }

    fn tracks_mut(&mut self) -> Vec<&mut Track> {
        let mut v: Vec<&mut Track> = vec![
            &mut self.a,
            &mut self.a_bar,
            &mut self.b,
            &mut self.b_bar,
            &mut self.c,
            &mut self.c_bar,
            &mut self.d,
            &mut self.d_bar,
            &mut self.q,
            &mut self.q_bar,
            &mut self.r,
            &mut self.r_bar,
        ];
        v.extend(self.e.iter_mut());
        v.extend(self.e_bar.iter_mut());
        v.extend(self.f.iter_mut());
        v.extend(self.f_bar.iter_mut());
        v
    }

    /// Every named track with its expected shape.
    fn shaped_tracks(&self) -> Vec<(String, &Track, (usize, usize))> {
        let (n, m) = (self.n, self.m);
        let mut v = vec![
            ("A".to_string(), &self.a, (n, n)),
            ("Abar".to_string(), &self.a_bar, (n, n)),
            ("B".to_string(), &self.b, (n, m)),
            ("Bbar".to_string(), &self.b_bar, (n, m)),
            ("C".to_string(), &self.c, (n, n)),
            ("Cbar".to_string(), &self.c_bar, (n, n)),
            ("D".to_string(), &self.d, (n, m)),
            ("Dbar".to_string(), &self.d_bar, (n, m)),
            ("Q".to_string(), &self.q, (n, n)),
            ("Qbar".to_string(), &self.q_bar, (n, n)),
            ("N".to_string(), &self.r, (m, m)),
            ("Nbar".to_string(), &self.r_bar, (m, m)),
        ];
        for (name, tracks, shape) in [
            ("E", &self.e, (n, n)),
            ("Ebar", &self.e_bar, (n, n)),
            ("F", &self.f, (n, m)),
            ("Fbar", &self.f_bar, (n, m)),
        ] {
            for (k, t) in tracks.iter().enumerate() {
                v.push((format!("{name}[{k}]"), t, shape));
            }
        }
        v
    }

    /// Shape and finiteness checks shared by the builder and validation.
    pub fn check_structure(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::DimensionMismatch {
                what: "dimensions".into(),
                expected: "n >= 1 and m >= 1".into(),
                found: format!("n = {}, m = {}", self.n, self.m),
            });
        }
        if self.n_steps == 0 || !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Malformed(format!(
                "need T > 0 and n_steps >= 1, got T = {}, n_steps = {}",
                self.horizon, self.n_steps
            )));
        }
        if self.x0.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "x0".into(),
                expected: format!("{}", self.n),
                found: format!("{}", self.x0.len()),
            });
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "x0".into(),
                index: 0,
            });
        }
        let k = self.jumps.len();
        for (name, tracks) in [
            ("E", &self.e),
            ("Ebar", &self.e_bar),
            ("F", &self.f),
            ("Fbar", &self.f_bar),
        ] {
            if tracks.len() != k {
                return Err(Error::DimensionMismatch {
                    what: name.into(),
                    expected: format!("{k} atoms"),
                    found: format!("{} tracks", tracks.len()),
                });
            }
        }
        for (name, track, (rows, cols)) in self.shaped_tracks() {
            if let Track::Grid(v) = track {
                if v.len() != self.n_steps + 1 {
                    return Err(Error::DimensionMismatch {
                        what: name,
                        expected: format!("{} grid values", self.n_steps + 1),
                        found: format!("{}", v.len()),
                    });
                }
            }
            for (i, mat) in track.matrices().iter().enumerate() {
                if mat.shape() != (rows, cols) {
                    return Err(Error::DimensionMismatch {
                        what: name,
                        expected: format!("{rows}x{cols}"),
                        found: format!("{}x{}", mat.nrows(), mat.ncols()),
                    });
                }
                if mat.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: name, index: i });
                }
            }
        }
        for (name, mat) in [("G", &self.g), ("Gbar", &self.g_bar)] {
            if mat.shape() != (self.n, self.n) {
                return Err(Error::DimensionMismatch {
                    what: name.into(),
                    expected: format!("{0}x{0}", self.n),
                    found: format!("{}x{}", mat.nrows(), mat.ncols()),
                });
            }
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: name.into(),
                    index: 0,
                });
            }
        }
        Ok(())
    }

    /// Replace every cost matrix by its symmetric part.
    fn symmetrize_costs(&mut self) {
        let warn_if = |name: &str, t: &Track| {
            let worst = t.matrices().iter().map(asymmetry).fold(0.0, f64::max);
            if worst > ASYMMETRY_WARN {
                warn!("{name} is asymmetric by {worst:e}; using its symmetric part");
            }
        };
        for (name, t) in [
            ("Q", &mut self.q),
            ("Qbar", &mut self.q_bar),
            ("N", &mut self.r),
            ("Nbar", &mut self.r_bar),
        ] {
            warn_if(name, t);
            *t = t.map(symmetrize);
        }
        for (name, g) in [("G", &mut self.g), ("Gbar", &mut self.g_bar)] {
            if asymmetry(g) > ASYMMETRY_WARN {
                warn!("{name} is asymmetric by {:e}; using its symmetric part", asymmetry(g));
            }
            *g = symmetrize(g);
        }
    }

    pub fn from_json_str(text: &str) -> Result<ModelSpec> {
        let v: Value = serde_json::from_str(text)?;
        parse_model(&v)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<ModelSpec> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Value {
        let atoms: Vec<Value> = self
            .jumps
            .atoms()
            .iter()
            .map(|a| json!({"label": a.label, "nu": a.nu}))
            .collect();
        let per_atom = |v: &[Track]| Value::Array(v.iter().map(Track::to_json).collect());
        json!({
            "n": self.n,
            "m": self.m,
            "T": self.horizon,
            "n_steps": self.n_steps,
            "x0": self.x0.iter().copied().collect::<Vec<_>>(),
            "delta": self.delta,
            "jump": {"atoms": atoms},
            "A": self.a.to_json(),
            "Abar": self.a_bar.to_json(),
            "B": self.b.to_json(),
            "Bbar": self.b_bar.to_json(),
            "C": self.c.to_json(),
            "Cbar": self.c_bar.to_json(),
            "D": self.d.to_json(),
            "Dbar": self.d_bar.to_json(),
            "E": per_atom(&self.e),
            "Ebar": per_atom(&self.e_bar),
            "F": per_atom(&self.f),
            "Fbar": per_atom(&self.f_bar),
            "Q": self.q.to_json(),
            "Qbar": self.q_bar.to_json(),
            "N": self.r.to_json(),
            "Nbar": self.r_bar.to_json(),
            "G": to_rows(&self.g),
            "Gbar": to_rows(&self.g_bar),
        })
    }
}

/// Builder with every coefficient defaulting to zero.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    spec: ModelSpec,
}

macro_rules! setter {
    ($name:ident) => {
        pub fn $name(mut self, value: impl Into<Track>) -> Self {
            self.spec.$name = value.into();
            self
        }
    };
}

impl ModelBuilder {
    fn new(n: usize, m: usize, horizon: f64, n_steps: usize) -> Self {
        let z = Track::zeros;
        Self {
            spec: ModelSpec {
                n,
                m,
                horizon,
                n_steps,
                x0: Vector::zeros(n),
                delta: 1.0,
                a: z(n, n),
                a_bar: z(n, n),
                b: z(n, m),
                b_bar: z(n, m),
                c: z(n, n),
                c_bar: z(n, n),
                d: z(n, m),
                d_bar: z(n, m),
                e: Vec::new(),
                e_bar: Vec::new(),
                f: Vec::new(),
                f_bar: Vec::new(),
                q: z(n, n),
                q_bar: z(n, n),
                r: z(m, m),
                r_bar: z(m, m),
                g: Mat::zeros(n, n),
                g_bar: Mat::zeros(n, n),
                jumps: JumpMeasure::none(),
            },
        }
    }

    setter!(a);
    setter!(a_bar);
    setter!(b);
    setter!(b_bar);
    setter!(c);
    setter!(c_bar);
    setter!(d);
    setter!(d_bar);
    setter!(q);
    setter!(q_bar);
    setter!(r);
    setter!(r_bar);

    pub fn g(mut self, g: Mat) -> Self {
        self.spec.g = g;
        self
    }

    pub fn g_bar(mut self, g: Mat) -> Self {
        self.spec.g_bar = g;
        self
    }

    pub fn x0(mut self, x0: Vector) -> Self {
        self.spec.x0 = x0;
        self
    }

    pub fn delta(mut self, delta: f64) -> Self {
        self.spec.delta = delta;
        self
    }

    /// Appends a jump atom together with its four amplitude coefficients.
    pub fn atom(
        mut self,
        label: &str,
        nu: f64,
        e: impl Into<Track>,
        e_bar: impl Into<Track>,
        f: impl Into<Track>,
        f_bar: impl Into<Track>,
    ) -> Self {
        let mut atoms = self.spec.jumps.atoms.clone();
        atoms.push(JumpAtom {
            label: label.to_string(),
            nu,
        });
        self.spec.jumps.atoms = atoms;
        self.spec.e.push(e.into());
        self.spec.e_bar.push(e_bar.into());
        self.spec.f.push(f.into());
        self.spec.f_bar.push(f_bar.into());
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let mut spec = self.spec;
        JumpMeasure::new(spec.jumps.atoms.clone())?;
        spec.check_structure()?;
        spec.symmetrize_costs();
        Ok(spec)
    }
}

pub fn total_intensity(spec: &ModelSpec) -> f64 {
    spec.jumps.total_intensity()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NonPositiveDelta,
    NotSymmetric,
    QNotPsd,
    QQbarNotPsd,
    GNotPsd,
    GGbarNotPsd,
    NBelowDelta,
    NNbarBelowDelta,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::NonPositiveDelta => "delta not > 0",
            ViolationKind::NotSymmetric => "cost matrix not symmetric",
            ViolationKind::QNotPsd => "Q not PSD",
            ViolationKind::QQbarNotPsd => "Q+Q̄ not PSD",
            ViolationKind::GNotPsd => "G not PSD",
            ViolationKind::GGbarNotPsd => "G+Ḡ not PSD",
            ViolationKind::NBelowDelta => "N not ⪰ δI at all t",
            ViolationKind::NNbarBelowDelta => "N+N̄ not ⪰ δI at all t",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Grid index with the smallest eigenvalue among violating nodes.
    pub index: usize,
    /// Offending eigenvalue at `index` (or the asymmetry for `NotSymmetric`).
    pub eigenvalue: f64,
    /// Number of grid nodes violating the invariant.
    pub count: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (grid index {}, value {:e}, {} node(s))",
            self.kind.label(),
            self.index,
            self.eigenvalue,
            self.count
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "model valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks the positivity assumptions node by node.
pub fn validate_model(spec: &ModelSpec) -> Result<ValidationReport> {
    spec.check_structure()?;
    let mut report = ValidationReport::default();
    if !(spec.delta > 0.0) {
        report.violations.push(Violation {
            kind: ViolationKind::NonPositiveDelta,
            index: 0,
            eigenvalue: spec.delta,
            count: 1,
        });
    }

    let nodes = spec.n_steps + 1;
    let mut worst_sym: Option<(usize, f64, usize)> = None;
    let mut note_sym = |i: usize, m: &Mat| {
        let a = asymmetry(m);
        if a > SYMMETRY_TOL {
            let e = worst_sym.get_or_insert((i, a, 0));
            e.2 += 1;
            if a > e.1 {
                e.0 = i;
                e.1 = a;
            }
        }
    };
    for i in 0..nodes {
        for t in [&spec.q, &spec.q_bar, &spec.r, &spec.r_bar] {
            note_sym(i, t.at(i));
        }
    }
    note_sym(0, &spec.g);
    note_sym(0, &spec.g_bar);
    if let Some((index, value, count)) = worst_sym {
        report.violations.push(Violation {
            kind: ViolationKind::NotSymmetric,
            index,
            eigenvalue: value,
            count,
        });
    }

    let mut check = |kind: ViolationKind, floor: f64, eig_at: &dyn Fn(usize) -> f64, nodes: usize| {
        let mut worst: Option<Violation> = None;
        for i in 0..nodes {
            let lam = eig_at(i);
            if !(lam >= floor) {
                let w = worst.get_or_insert(Violation {
                    kind,
                    index: i,
                    eigenvalue: lam,
                    count: 0,
                });
                w.count += 1;
                if lam < w.eigenvalue {
                    w.index = i;
                    w.eigenvalue = lam;
                }
            }
        }
        if let Some(w) = worst {
            report.violations.push(w);
        }
    };

    let delta_floor = spec.delta - PSD_TOL;
    check(
        ViolationKind::QNotPsd,
        -PSD_TOL,
        &|i| min_eigenvalue(spec.q.at(i)),
        nodes,
    );
    check(
        ViolationKind::QQbarNotPsd,
        -PSD_TOL,
        &|i| min_eigenvalue(&(spec.q.at(i) + spec.q_bar.at(i))),
        nodes,
    );
    check(
        ViolationKind::NBelowDelta,
        delta_floor,
        &|i| min_eigenvalue(spec.r.at(i)),
        nodes,
    );
    check(
        ViolationKind::NNbarBelowDelta,
        delta_floor,
        &|i| min_eigenvalue(&(spec.r.at(i) + spec.r_bar.at(i))),
        nodes,
    );
    check(ViolationKind::GNotPsd, -PSD_TOL, &|_| min_eigenvalue(&spec.g), 1);
    check(
        ViolationKind::GGbarNotPsd,
        -PSD_TOL,
        &|_| min_eigenvalue(&(&spec.g + &spec.g_bar)),
        1,
    );
    Ok(report)
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::Malformed(format!("missing key `{key}`")))
}

fn as_usize(v: &Value, key: &str) -> Result<usize> {
    field(v, key)?
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Malformed(format!("`{key}` must be a non-negative integer")))
}

fn as_f64(v: &Value, key: &str) -> Result<f64> {
    field(v, key)?
        .as_f64()
        .ok_or_else(|| Error::Malformed(format!("`{key}` must be a number")))
}

/// Nesting depth of the first element chain: number = 0, row = 1, matrix = 2.
fn depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map_or(0, depth),
        _ => 0,
    }
}

fn parse_matrix(v: &Value, what: &str) -> Result<Mat> {
    let rows = v
        .as_array()
        .ok_or_else(|| Error::Malformed(format!("`{what}` must be a matrix")))?;
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for row in rows {
        let row = row
            .as_array()
            .ok_or_else(|| Error::Malformed(format!("`{what}` rows must be arrays")))?;
        let parsed: Option<Vec<f64>> = row.iter().map(Value::as_f64).collect();
        data.push(parsed.ok_or_else(|| Error::Malformed(format!("`{what}` has non-numeric entries")))?);
    }
    let cols = data.first().map_or(0, Vec::len);
    if data.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            what: what.into(),
            expected: format!("rows of length {cols}"),
            found: "ragged rows".into(),
        });
    }
    Ok(Mat::from_fn(data.len(), cols, |i, j| data[i][j]))
}

fn parse_track(v: &Value, what: &str, shape: (usize, usize)) -> Result<Track> {
    if v.as_array().is_some_and(|a| a.is_empty()) {
        return Err(Error::DimensionMismatch {
            what: what.into(),
            expected: format!("{}x{} matrix", shape.0, shape.1),
            found: "empty array".into(),
        });
    }
    match depth(v) {
        2 => Ok(Track::Constant(parse_matrix(v, what)?)),
        3 => {
            let mats = v
                .as_array()
                .unwrap()
                .iter()
                .map(|m| parse_matrix(m, what))
                .collect::<Result<Vec<_>>>()?;
            Ok(Track::Grid(mats))
        }
        _ => Err(Error::Malformed(format!(
            "`{what}` must be a matrix or an array of matrices"
        ))),
    }
}

fn optional_track(v: &Value, key: &str, shape: (usize, usize)) -> Result<Track> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(Track::zeros(shape.0, shape.1)),
        Some(t) => parse_track(t, key, shape),
    }
}

fn per_atom_tracks(v: &Value, key: &str, k: usize, shape: (usize, usize)) -> Result<Vec<Track>> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(vec![Track::zeros(shape.0, shape.1); k]),
        Some(Value::Array(items)) => {
            if items.len() != k {
                return Err(Error::DimensionMismatch {
                    what: key.into(),
                    expected: format!("{k} per-atom entries"),
                    found: format!("{}", items.len()),
                });
            }
            items
                .iter()
                .enumerate()
                .map(|(i, t)| parse_track(t, &format!("{key}[{i}]"), shape))
                .collect()
        }
        Some(_) => Err(Error::Malformed(format!("`{key}` must be an array indexed by atom"))),
    }
}

fn parse_model(v: &Value) -> Result<ModelSpec> {
    let n = as_usize(v, "n")?;
    let m = as_usize(v, "m")?;
    let horizon = as_f64(v, "T")?;
    let n_steps = as_usize(v, "n_steps")?;
    let delta = as_f64(v, "delta")?;
    let x0: Vec<f64> = field(v, "x0")?
        .as_array()
        .and_then(|a| a.iter().map(Value::as_f64).collect())
        .ok_or_else(|| Error::Malformed("`x0` must be an array of numbers".into()))?;

    let atoms = match v.get("jump").and_then(|j| j.get("atoms")) {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(list)) => list
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let label = a
                    .get("label")
                    .and_then(Value::as_str)
                    .map_or_else(|| format!("theta{}", k + 1), str::to_string);
                let nu = a
                    .get("nu")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| Error::Malformed(format!("jump atom {k} needs numeric `nu`")))?;
                Ok(JumpAtom { label, nu })
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::Malformed("`jump.atoms` must be an array".into())),
    };
    let jumps = JumpMeasure::new(atoms)?;
    let k = jumps.len();

    let g = match v.get("G") {
        None | Some(Value::Null) => Mat::zeros(n, n),
        Some(x) => parse_matrix(x, "G")?,
    };
    let g_bar = match v.get("Gbar") {
        None | Some(Value::Null) => Mat::zeros(n, n),
        Some(x) => parse_matrix(x, "Gbar")?,
    };

    let mut spec = ModelSpec {
        n,
        m,
        horizon,
        n_steps,
        x0: Vector::from_vec(x0),
        delta,
        a: optional_track(v, "A", (n, n))?,
        a_bar: optional_track(v, "Abar", (n, n))?,
        b: optional_track(v, "B", (n, m))?,
        b_bar: optional_track(v, "Bbar", (n, m))?,
        c: optional_track(v, "C", (n, n))?,
        c_bar: optional_track(v, "Cbar", (n, n))?,
        d: optional_track(v, "D", (n, m))?,
        d_bar: optional_track(v, "Dbar", (n, m))?,
        e: per_atom_tracks(v, "E", k, (n, n))?,
        e_bar: per_atom_tracks(v, "Ebar", k, (n, n))?,
        f: per_atom_tracks(v, "F", k, (n, m))?,
        f_bar: per_atom_tracks(v, "Fbar", k, (n, m))?,
        q: optional_track(v, "Q", (n, n))?,
        q_bar: optional_track(v, "Qbar", (n, n))?,
        r: optional_track(v, "N", (m, m))?,
        r_bar: optional_track(v, "Nbar", (m, m))?,
        g,
        g_bar,
        jumps,
    };
    spec.check_structure()?;
    spec.symmetrize_costs();
    Ok(spec)
}

//! Regression target and candidate-term matrix for breakage identification.
//!
//! Rows are stacked pivot-major with the full time series inside each pivot
//! block: row `(i * y + j) * z + k` holds pivot `(v_i, w_j)` at time `t_k`.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmd::{ContinuityHint, LibraryAdvice, RateDependence};
use crate::griddata::{trapezoid_weights, Grid2D, SnapshotSeries};

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("need at least 2 snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("exponent set is empty")]
    EmptyExponents,
    #[error("invalid term {name}: {msg}")]
    InvalidTerm { name: String, msg: String },
    #[error("duplicate term name {0}")]
    DuplicateName(String),
    #[error("grid not compatible with theta = {theta} and interpolation is disabled")]
    IncompatibleGrid { theta: f64 },
    #[error("column {name} has non-finite entries")]
    NonFinite { name: String },
    #[error("unknown case {0}")]
    UnknownCase(u8),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, LibraryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Birth,
    Death,
}

/// Which internal coordinate the single delta pins to the parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaAxis {
    V,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum TermForm {
    /// `v^p w^q n`
    Death { p: i32, q: i32 },
    /// `int int v'^p w'^q n dv' dw'` over the parent tail
    Continuous { p: i32, q: i32 },
    /// `v'^p w'^q delta(v - v')` (axis V) or `delta(w - w')` (axis W)
    SingleDelta { axis: DeltaAxis, p: i32, q: i32 },
    /// `delta(v - theta_v v') delta(w - theta_w w')`
    ProductDelta { theta_v: f64, theta_w: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub form: TermForm,
}

fn factor(sym: &str, k: i32) -> String {
    match k.abs() {
        1 => sym.to_string(),
        a => format!("{sym}^{a}"),
    }
}

fn monomial(v: &str, w: &str, p: i32, q: i32) -> String {
    let mut num = String::new();
    let mut den = Vec::new();
    for (sym, k) in [(v, p), (w, q)] {
        if k > 0 {
            num.push_str(&factor(sym, k));
        } else if k < 0 {
            den.push(factor(sym, k));
        }
    }
    if num.is_empty() {
        num.push('1');
    }
    match den.len() {
        0 => num,
        1 => format!("{num}/{}", den[0]),
        _ => format!("{num}/({})", den.concat()),
    }
}

fn theta_str(t: f64) -> String {
    if t == 1.0 {
        String::new()
    } else if (1.0 / t - (1.0 / t).round()).abs() < 1e-12 {
        format!("/{}", (1.0 / t).round())
    } else {
        format!("{t}*")
    }
}

impl TermForm {
    pub fn side(&self) -> Side {
        match self {
            TermForm::Death { .. } => Side::Death,
            _ => Side::Birth,
        }
    }

    pub fn display_name(&self) -> String {
        match *self {
            TermForm::Death { p, q } => {
                let m = monomial("v", "w", p, q);
                format!("D({m})")
            }
            TermForm::Continuous { p, q } => format!("B({})", monomial("v'", "w'", p, q)),
            TermForm::SingleDelta { axis, p, q } => {
                let m = monomial("v'", "w'", p, q);
                let pre = if m == "1" { String::new() } else { m };
                let d = match axis {
                    DeltaAxis::V => "δ(v-v')",
                    DeltaAxis::W => "δ(w-w')",
                };
                format!("B({pre}{d})")
            }
            TermForm::ProductDelta { theta_v, theta_w } => {
                let tv = theta_str(theta_v);
                let tw = theta_str(theta_w);
                let dv = if tv.ends_with('*') {
                    format!("δ(v-{}v')", tv.trim_end_matches('*'))
                } else {
                    format!("δ(v-v'{tv})")
                };
                let dw = if tw.ends_with('*') {
                    format!("δ(w-{}w')", tw.trim_end_matches('*'))
                } else {
                    format!("δ(w-w'{tw})")
                };
                format!("B({dv}{dw})")
            }
        }
    }
}

impl TermDescriptor {
    pub fn new(form: TermForm) -> Self {
        Self {
            name: form.display_name(),
            form,
        }
    }

    pub fn side(&self) -> Side {
        self.form.side()
    }

    fn validate(&self) -> Result<()> {
        if let TermForm::ProductDelta { theta_v, theta_w } = self.form {
            for t in [theta_v, theta_w] {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(LibraryError::InvalidTerm {
                        name: self.name.clone(),
                        msg: format!("theta {t} outside (0, 1]"),
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for TermDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn check_unique(terms: &[TermDescriptor]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for t in terms {
        t.validate()?;
        if !seen.insert(t.name.as_str()) {
            return Err(LibraryError::DuplicateName(t.name.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LibraryMode {
    PreDmd,
    Continuous,
    SemiContinuous,
    Discontinuous,
}

pub fn default_exponents() -> Vec<i32> {
    (-2..=2).collect()
}

fn death_monomials(exps: &[i32]) -> Vec<TermDescriptor> {
    let mut out = Vec::new();
    for &p in exps {
        for &q in exps {
            out.push(TermDescriptor::new(TermForm::Death { p, q }));
        }
    }
    out
}

/// Birth terms first, then death terms, each in (p, q) lexicographic order.
/// `size_independent` keeps only `D(1)` on the death side.
pub fn standard_library(mode: LibraryMode, exps: &[i32], size_independent: bool) -> Result<Vec<TermDescriptor>> {
    if exps.is_empty() {
        return Err(LibraryError::EmptyExponents);
    }
    let mut birth = Vec::new();
    let death = if size_independent {
        vec![TermDescriptor::new(TermForm::Death { p: 0, q: 0 })]
    } else {
        death_monomials(exps)
    };
    match mode {
        LibraryMode::PreDmd | LibraryMode::Continuous => {
            for &p in exps {
                for &q in exps {
                    birth.push(TermDescriptor::new(TermForm::Continuous { p, q }));
                }
            }
        }
        LibraryMode::SemiContinuous => {
            for axis in [DeltaAxis::V, DeltaAxis::W] {
                for &p in exps {
                    for &q in exps {
                        birth.push(TermDescriptor::new(TermForm::SingleDelta { axis, p, q }));
                    }
                }
            }
        }
        LibraryMode::Discontinuous => {
            return Ok(vec![
                TermDescriptor::new(TermForm::ProductDelta {
                    theta_v: 0.5,
                    theta_w: 0.5,
                }),
                TermDescriptor::new(TermForm::Death { p: 0, q: 0 }),
            ]);
        }
    }
    birth.extend(death);
    Ok(birth)
}

/// Library implied by DMD advice.
pub fn advised_library(advice: &LibraryAdvice, exps: &[i32]) -> Result<Vec<TermDescriptor>> {
    let mode = match advice.continuity {
        ContinuityHint::Continuous => LibraryMode::Continuous,
        ContinuityHint::SemiContinuousCandidate => LibraryMode::SemiContinuous,
        ContinuityHint::ProductDeltaCandidate => LibraryMode::Discontinuous,
    };
    standard_library(mode, exps, advice.rate == RateDependence::Independent)
}

/// Generating terms and coefficients of the six benchmark cases.
pub fn true_terms(case_id: u8) -> Result<Vec<(TermDescriptor, f64)>> {
    use TermForm::*;
    let t = |f: TermForm, c: f64| (TermDescriptor::new(f), c);
    Ok(match case_id {
        1 => vec![t(Continuous { p: -1, q: -1 }, 4.0), t(Death { p: 0, q: 0 }, -1.0)],
        2 => vec![t(Continuous { p: 0, q: 0 }, 4.0), t(Death { p: 1, q: 1 }, -1.0)],
        3 => vec![t(Continuous { p: -1, q: -1 }, 2.0), t(Death { p: 0, q: 0 }, -1.0)],
        4 => vec![
            t(Continuous { p: -1, q: 0 }, 2.0),
            t(Continuous { p: 0, q: -1 }, 2.0),
            t(Death { p: 1, q: 0 }, -1.0),
            t(Death { p: 0, q: 1 }, -1.0),
        ],
        5 => vec![
            t(
                SingleDelta {
                    axis: DeltaAxis::V,
                    p: 1,
                    q: 0,
                },
                1.0,
            ),
            t(
                SingleDelta {
                    axis: DeltaAxis::W,
                    p: 0,
                    q: 1,
                },
                1.0,
            ),
            t(Death { p: 1, q: 1 }, -1.0),
        ],
        6 => vec![
            t(
                ProductDelta {
                    theta_v: 0.5,
                    theta_w: 0.5,
                },
                1.0,
            ),
            t(Death { p: 0, q: 0 }, -0.25),
        ],
        c => return Err(LibraryError::UnknownCase(c)),
    })
}

/// True coefficients aligned to `terms`; `None` if a generating term is missing.
pub fn true_coefficients(case_id: u8, terms: &[TermDescriptor]) -> Result<Option<Vec<f64>>> {
    let truth = true_terms(case_id)?;
    let mut xi = vec![0.0; terms.len()];
    for (d, c) in truth {
        match terms.iter().position(|t| t.form == d.form) {
            Some(k) => xi[k] = c,
            None => return Ok(None),
        }
    }
    Ok(Some(xi))
}

/// Time derivative of every pivot trajectory, stacked pivot-major.
/// Three-point formulas: central inside, one-sided at both ends, all second
/// order (exact on quadratics, also for non-uniform steps).
pub fn assemble_ndot(series: &SnapshotSeries) -> Result<DVector<f64>> {
    let z = series.len();
    if z < 2 {
        return Err(LibraryError::TooFewSnapshots(z));
    }
    let (x, y) = series.grid.shape();
    let t = &series.times;
    let stencil: Vec<[(usize, f64); 3]> = (0..z).map(|k| three_point(t, k)).collect();
    let mut out = DVector::zeros(x * y * z);
    for i in 0..x {
        for j in 0..y {
            let base = (i * y + j) * z;
            for (k, st) in stencil.iter().enumerate() {
                out[base + k] = st.iter().map(|&(m, c)| c * series.density[m][(i, j)]).sum();
            }
        }
    }
    Ok(out)
}

fn three_point(t: &[f64], k: usize) -> [(usize, f64); 3] {
    let z = t.len();
    if z == 2 {
        let c = 1.0 / (t[1] - t[0]);
        return [(0, -c), (1, c), (0, 0.0)];
    }
    let (a, b, c) = match k {
        0 => (0, 1, 2),
        _ if k == z - 1 => (z - 3, z - 2, z - 1),
        _ => (k - 1, k, k + 1),
    };
    // derivative of the Lagrange interpolant through t_a, t_b, t_c at t_k
    let s = t[k];
    let la = ((s - t[b]) + (s - t[c])) / ((t[a] - t[b]) * (t[a] - t[c]));
    let lb = ((s - t[a]) + (s - t[c])) / ((t[b] - t[a]) * (t[b] - t[c]));
    let lc = ((s - t[a]) + (s - t[b])) / ((t[c] - t[a]) * (t[c] - t[b]));
    [(a, la), (b, lb), (c, lc)]
}

/// `T[i, k]`: weight of pivot `k` in the trapezoid integral from `p_i` to the top.
fn tail_matrix(p: &[f64]) -> DMatrix<f64> {
    let n = p.len();
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        for (k, w) in trapezoid_weights(&p[i..]).into_iter().enumerate() {
            t[(i, i + k)] = w;
        }
    }
    t
}

fn powers(p: &[f64], k: i32) -> DVector<f64> {
    DVector::from_iterator(p.len(), p.iter().map(|x| x.powi(k)))
}

/// Per-snapshot field of a term, x × y.
fn term_fields(
    form: &TermForm,
    grid: &Grid2D,
    density: &[DMatrix<f64>],
    interpolate: bool,
) -> Result<Vec<DMatrix<f64>>> {
    let (v, w) = (grid.v(), grid.w());
    Ok(match *form {
        TermForm::Death { p, q } => {
            let s = powers(v, p) * powers(w, q).transpose();
            density.iter().map(|n| n.component_mul(&s)).collect()
        }
        TermForm::Continuous { p, q } => {
            let s = powers(v, p) * powers(w, q).transpose();
            let (tv, tw) = (tail_matrix(v), tail_matrix(w).transpose());
            density.iter().map(|n| &tv * n.component_mul(&s) * &tw).collect()
        }
        TermForm::SingleDelta { axis, p, q } => {
            let s = powers(v, p) * powers(w, q).transpose();
            match axis {
                DeltaAxis::V => {
                    let tw = tail_matrix(w).transpose();
                    density.iter().map(|n| n.component_mul(&s) * &tw).collect()
                }
                DeltaAxis::W => {
                    let tv = tail_matrix(v);
                    density.iter().map(|n| &tv * n.component_mul(&s)).collect()
                }
            }
        }
        TermForm::ProductDelta { theta_v, theta_w } => {
            let jac = 1.0 / (theta_v * theta_w);
            let shifts = (grid.v_axis.shift_for(theta_v), grid.w_axis.shift_for(theta_w));
            match shifts {
                (Some(dv), Some(dw)) => {
                    let (x, y) = grid.shape();
                    density
                        .iter()
                        .map(|n| {
                            DMatrix::from_fn(x, y, |i, j| {
                                if i + dv < x && j + dw < y {
                                    jac * n[(i + dv, j + dw)]
                                } else {
                                    0.0
                                }
                            })
                        })
                        .collect()
                }
                _ if interpolate => {
                    let (x, y) = grid.shape();
                    density
                        .iter()
                        .map(|n| {
                            DMatrix::from_fn(x, y, |i, j| jac * log_bilinear(grid, n, v[i] / theta_v, w[j] / theta_w))
                        })
                        .collect()
                }
                (None, _) => return Err(LibraryError::IncompatibleGrid { theta: theta_v }),
                (_, None) => return Err(LibraryError::IncompatibleGrid { theta: theta_w }),
            }
        }
    })
}

fn log_bracket(p: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = p.len();
    let top = p[n - 1];
    if x > top * (1.0 + 1e-12) || x < p[0] * (1.0 - 1e-12) {
        return None;
    }
    if n == 1 || x >= top {
        return Some((n.saturating_sub(2), if n == 1 { 0.0 } else { 1.0 }));
    }
    let k = p.partition_point(|&q| q <= x).clamp(1, n - 1) - 1;
    Some((k, (x.ln() - p[k].ln()) / (p[k + 1].ln() - p[k].ln())))
}

/// Bilinear interpolation in (ln v, ln w); zero outside the mesh.
fn log_bilinear(grid: &Grid2D, n: &DMatrix<f64>, a: f64, b: f64) -> f64 {
    let (Some((i, s)), Some((j, t))) = (log_bracket(grid.v(), a), log_bracket(grid.w(), b)) else {
        return 0.0;
    };
    let at = |di: usize, dj: usize| n.get((i + di, j + dj)).copied().unwrap_or(0.0);
    (1.0 - s) * (1.0 - t) * at(0, 0) + s * (1.0 - t) * at(1, 0) + (1.0 - s) * t * at(0, 1) + s * t * at(1, 1)
}

/// Stacked column of one term over every pivot and time.
pub fn evaluate_term(term: &TermDescriptor, series: &SnapshotSeries, interpolate: bool) -> Result<DVector<f64>> {
    let fields = term_fields(&term.form, &series.grid, &series.density, interpolate)?;
    let (x, y) = series.grid.shape();
    let z = series.len();
    let col = DVector::from_fn(x * y * z, |r, _| {
        let k = r % z;
        let ij = r / z;
        fields[k][(ij / y, ij % y)]
    });
    if col.iter().any(|v| !v.is_finite()) {
        return Err(LibraryError::NonFinite {
            name: term.name.clone(),
        });
    }
    Ok(col)
}

#[derive(Debug, Clone)]
pub struct CandidateLibrary {
    pub theta: DMatrix<f64>,
    pub terms: Vec<TermDescriptor>,
    /// (x, y, z)
    pub shape: (usize, usize, usize),
}

impl CandidateLibrary {
    pub fn build(series: &SnapshotSeries, terms: Vec<TermDescriptor>, interpolate: bool) -> Result<Self> {
        check_unique(&terms)?;
        let cols: Vec<DVector<f64>> = terms
            .par_iter()
            .map(|t| evaluate_term(t, series, interpolate))
            .collect::<Result<_>>()?;
        let (x, y) = series.grid.shape();
        let z = series.len();
        let rows = x * y * z;
        let theta = if cols.is_empty() {
            DMatrix::zeros(rows, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Ok(Self {
            theta,
            terms,
            shape: (x, y, z),
        })
    }

    pub fn ncols(&self) -> usize {
        self.terms.len()
    }

    /// Row `r` as (v index, w index, time index).
    pub fn row_index(&self, r: usize) -> (usize, usize, usize) {
        let (_, y, z) = self.shape;
        let ij = r / z;
        (ij / y, ij % y, r % z)
    }

    pub fn columns_on(&self, side: Side) -> Vec<usize> {
        (0..self.terms.len())
            .filter(|&c| self.terms[c].side() == side)
            .collect()
    }

    pub fn birth_columns(&self) -> Vec<usize> {
        self.columns_on(Side::Birth)
    }

    pub fn death_columns(&self) -> Vec<usize> {
        self.columns_on(Side::Death)
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    /// Writes `theta.csv` (header = term names) and `terms.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e: &dyn fmt::Display| LibraryError::Io {
            path: p.display().to_string(),
            msg: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        let path = dir.join("theta.csv");
        let mut wtr = csv::Writer::from_path(&path).map_err(|e| io(&path, &e))?;
        wtr.write_record(self.names()).map_err(|e| io(&path, &e))?;
        for r in 0..self.theta.nrows() {
            wtr.write_record(self.theta.row(r).iter().map(|v| format!("{v:.16e}")))
                .map_err(|e| io(&path, &e))?;
        }
        wtr.flush().map_err(|e| io(&path, &e))?;
        save_terms(&self.terms, &dir.join("terms.json"))
    }
}

pub fn save_terms(terms: &[TermDescriptor], path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(terms).expect("terms serialize");
    fs::write(path, s).map_err(|e| LibraryError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Loads a term manifest written by [`save_terms`] or by hand.
pub fn load_terms(path: &Path) -> Result<Vec<TermDescriptor>> {
    let err = |msg: String| LibraryError::Io {
        path: path.display().to_string(),
        msg,
    };
    let s = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let terms: Vec<TermDescriptor> = serde_json::from_str(&s).map_err(|e| err(e.to_string()))?;
    check_unique(&terms)?;
    Ok(terms)
}

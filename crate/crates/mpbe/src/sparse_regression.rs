//! Constrained breakage-informed sequential thresholded least squares.
//!
//! Birth contributions are kept positive and death contributions negative on
//! every retained sample row: `-Θ_B ξ_B <= -ε` and `Θ_D ξ_D <= -ε`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::library::Side;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("every data row was excluded by the magnitude filter")]
    AllRowsExcluded,
    #[error("constraint set is infeasible")]
    Infeasible,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("quadratic program failed: {0}")]
    Solver(String),
}

pub type Result<T> = std::result::Result<T, RegressionError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOptions {
    pub eps: f64,
    /// Side sums below this are treated as negligible.
    pub row_filter_threshold: f64,
    /// Fraction of data rows whose constraints are kept.
    pub subsample: Option<f64>,
    pub seed: u64,
}

impl Default for ConstraintOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            row_filter_threshold: 0.1,
            subsample: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// Data rows that take part in the regression.
    pub rows: Vec<usize>,
    /// Per kept row: whether the birth / death constraint applies.
    pub birth: Vec<bool>,
    pub death: Vec<bool>,
    pub eps: f64,
    pub threshold: f64,
}

impl ConstraintSet {
    /// No constraints on any row; cb-STLS then reduces to plain STLS.
    pub fn unconstrained(nrows: usize) -> Self {
        Self {
            rows: (0..nrows).collect(),
            birth: vec![false; nrows],
            death: vec![false; nrows],
            eps: 1e-4,
            threshold: 0.0,
        }
    }

    pub fn constraint_count(&self) -> usize {
        self.birth.iter().chain(&self.death).filter(|&&b| b).count()
    }

    /// Same rows, with side constraints kept only where `active` columns of
    /// that side still carry weight.
    pub fn restrict(&self, theta: &DMatrix<f64>, sides: &[Side], active: &[usize]) -> Self {
        let mut out = self.clone();
        for (k, &r) in self.rows.iter().enumerate() {
            let (b, d) = side_sums(theta, sides, r, active);
            out.birth[k] &= b >= self.threshold && b > 0.0;
            out.death[k] &= d >= self.threshold && d > 0.0;
        }
        out
    }
}

fn side_sums(theta: &DMatrix<f64>, sides: &[Side], r: usize, cols: &[usize]) -> (f64, f64) {
    let mut b = 0.0;
    let mut d = 0.0;
    for &c in cols {
        let a = theta[(r, c)].abs();
        match sides[c] {
            Side::Birth => b += a,
            Side::Death => d += a,
        }
    }
    (b, d)
}

/// Row filter and per-side constraint indicators over all library columns.
pub fn build_constraints(theta: &DMatrix<f64>, sides: &[Side], opts: &ConstraintOptions) -> Result<ConstraintSet> {
    if !(opts.eps > 0.0) {
        return Err(RegressionError::InvalidArgument(format!(
            "eps must be positive, got {}",
            opts.eps
        )));
    }
    if sides.len() != theta.ncols() {
        return Err(RegressionError::Shape(format!(
            "{} sides for {} columns",
            sides.len(),
            theta.ncols()
        )));
    }
    let all: Vec<usize> = (0..theta.ncols()).collect();
    let th = opts.row_filter_threshold;
    let mut set = ConstraintSet {
        rows: Vec::new(),
        birth: Vec::new(),
        death: Vec::new(),
        eps: opts.eps,
        threshold: th,
    };
    for r in 0..theta.nrows() {
        let (b, d) = side_sums(theta, sides, r, &all);
        if b < th && d < th {
            continue;
        }
        set.rows.push(r);
        set.birth.push(b >= th && b > 0.0);
        set.death.push(d >= th && d > 0.0);
    }
    if set.rows.is_empty() {
        return Err(RegressionError::AllRowsExcluded);
    }
    if let Some(frac) = opts.subsample {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(RegressionError::InvalidArgument(format!(
                "subsample fraction {frac} outside (0, 1]"
            )));
        }
        let n = set.rows.len();
        let keep = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut mask = vec![false; n];
        for k in sample(&mut rng, n, keep) {
            mask[k] = true;
        }
        for k in 0..n {
            set.birth[k] &= mask[k];
            set.death[k] &= mask[k];
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub step_tol: f64,
    pub constraint_tol: f64,
    pub max_iter: usize,
    /// When set, an infeasible constraint set is relaxed by multiplying the
    /// side-sum threshold by this factor until the fit becomes feasible.
    pub relax_factor: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            step_tol: 1e-4,
            constraint_tol: 1e-4,
            max_iter: 1000,
            relax_factor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsqSolution {
    pub coef: Vec<f64>,
    /// Relative stationarity residual of the KKT system.
    pub kkt_residual: f64,
    /// Largest constraint violation, as distance to the constraint plane in
    /// column-normalized coordinates.
    pub max_violation: f64,
    pub active_constraints: usize,
    pub iterations: usize,
    pub converged: bool,
}

const RIDGE: f64 = 1e-10;

/// Least squares over `columns` of `theta` on the set's rows, subject to the
/// set's sign constraints. Returns coefficients aligned to `columns`.
pub fn constrained_lsq(
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    columns: &[usize],
    set: &ConstraintSet,
    opts: &SolverOptions,
) -> Result<LsqSolution> {
    let n = columns.len();
    if n == 0 {
        return Err(RegressionError::InvalidArgument("no columns".into()));
    }
    if ndot.len() != theta.nrows() {
        return Err(RegressionError::Shape(format!(
            "target has {} rows, library {}",
            ndot.len(),
            theta.nrows()
        )));
    }
    let m = set.rows.len();
    let mut a = DMatrix::zeros(m + n, n);
    let mut scale = vec![1.0; n];
    for (k, &c) in columns.iter().enumerate() {
        let nrm = set.rows.iter().map(|&r| theta[(r, c)].powi(2)).sum::<f64>().sqrt();
        if nrm > 0.0 {
            scale[k] = 1.0 / nrm;
        }
        for (i, &r) in set.rows.iter().enumerate() {
            a[(i, k)] = theta[(r, c)] * scale[k];
        }
        a[(m + k, k)] = RIDGE.sqrt();
    }
    let y = DVector::from_iterator(m, set.rows.iter().map(|&r| ndot[r]));
    let aty = a.rows(0, m).transpose() * &y;

    let mut r = a.clone().qr().r();
    for i in 0..n {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
        }
    }
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| RegressionError::Solver("singular factor".into()))?;
    let mut qmat: Vec<f64> = rinv.as_slice().to_vec();
    let cvec: Vec<f64> = aty.iter().map(|v| -v).collect();

    // constraint rows in scaled coordinates, unit norm, deduplicated
    let mut amat = Vec::new();
    let mut bvec = Vec::new();
    let mut seen = HashSet::new();
    for (k, &row) in set.rows.iter().enumerate() {
        for (on, side, sign) in [(set.birth[k], Side::Birth, -1.0), (set.death[k], Side::Death, 1.0)] {
            if !on {
                continue;
            }
            let g: Vec<f64> = (0..n)
                .map(|j| {
                    if sides[columns[j]] == side {
                        sign * theta[(row, columns[j])] * scale[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn == 0.0 {
                continue;
            }
            let g: Vec<f64> = g.iter().map(|v| v / gn).collect();
            let h = -set.eps / gn;
            let key: Vec<u64> = g.iter().chain([&h]).map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                amat.extend(g);
                bvec.push(h);
            }
        }
    }
    let q = bvec.len();
    let sol = quadprog::solve_qp(&mut qmat, &cvec, &amat, &bvec, 0, true).map_err(|e| match e {
        quadprog::Error::Infeasible => RegressionError::Infeasible,
        other => RegressionError::Solver(other.to_string()),
    })?;
    let eta = DVector::from_vec(sol.sol);

    let gram = a.transpose() * &a;
    let mut grad = &gram * &eta - &aty;
    let mut max_violation: f64 = 0.0;
    for c in 0..q {
        let g = &amat[c * n..(c + 1) * n];
        let lhs: f64 = g.iter().zip(eta.iter()).map(|(a, b)| a * b).sum();
        max_violation = max_violation.max(lhs - bvec[c]);
        let mu = sol.lagr[c];
        if mu != 0.0 {
            for j in 0..n {
                grad[j] += mu * g[j];
            }
        }
    }
    let kkt_residual = grad.norm() / aty.norm().max(f64::MIN_POSITIVE);
    let coef: Vec<f64> = eta.iter().zip(&scale).map(|(e, s)| e * s).collect();
    Ok(LsqSolution {
        coef,
        kkt_residual,
        max_violation: max_violation.max(0.0),
        active_constraints: sol.iact.len(),
        iterations: sol.iter,
        converged: sol.iter <= opts.max_iter && kkt_residual <= opts.step_tol && max_violation <= opts.constraint_tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    pub xi: Vec<f64>,
    pub support: Vec<usize>,
    pub lambda: f64,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Set when thresholding removed every term or the fit was infeasible.
    pub all_zero: bool,
    pub infeasible: bool,
    pub converged: bool,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub active_constraints: usize,
    /// Side-sum threshold the constraints ended up with; above the set's own
    /// threshold only after relaxation.
    pub constraint_threshold: f64,
}

impl SparseSolution {
    fn zero(ncols: usize, lambda: f64, residual_norm: f64, iterations: usize) -> Self {
        Self {
            xi: vec![0.0; ncols],
            support: vec![],
            lambda,
            iterations,
            residual_norm,
            all_zero: true,
            infeasible: false,
            converged: true,
            kkt_residual: 0.0,
            max_violation: 0.0,
            active_constraints: 0,
            constraint_threshold: f64::NAN,
        }
    }

    /// Flagged all-zero member for an infeasible fit.
    pub fn infeasible(ncols: usize, lambda: f64) -> Self {
        Self {
            infeasible: true,
            converged: false,
            ..Self::zero(ncols, lambda, f64::NAN, 0)
        }
    }
}

fn residual_on(theta: &DMatrix<f64>, ndot: &DVector<f64>, rows: &[usize], xi: &[f64]) -> f64 {
    rows.iter()
        .map(|&r| {
            let fit: f64 = xi
                .iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(c, x)| theta[(r, c)] * x)
                .sum();
            (ndot[r] - fit).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

fn fit_relaxing(
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    active: &[usize],
    set: &mut ConstraintSet,
    opts: &SolverOptions,
) -> Result<LsqSolution> {
    loop {
        let restricted = set.restrict(theta, sides, active);
        match constrained_lsq(theta, ndot, sides, active, &restricted, opts) {
            Err(RegressionError::Infeasible) if restricted.constraint_count() > 0 => {
                let Some(f) = opts.relax_factor.filter(|f| *f > 1.0) else {
                    return Err(RegressionError::Infeasible);
                };
                set.threshold = if set.threshold > 0.0 {
                    set.threshold * f
                } else {
                    f64::MIN_POSITIVE
                };
            }
            other => return other,
        }
    }
}

/// Sequential thresholding: fit on the active columns, zero every
/// coefficient with `|ξ_k| < λ`, rebuild constraints, repeat.
pub fn cb_stls(
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    lambda: f64,
    set: &ConstraintSet,
    opts: &SolverOptions,
) -> Result<SparseSolution> {
    if !(lambda > 0.0) {
        return Err(RegressionError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let ncols = theta.ncols();
    let mut set = set.clone();
    let mut active: Vec<usize> = (0..ncols).collect();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let fit = fit_relaxing(theta, ndot, sides, &active, &mut set, opts)?;
        let keep: Vec<usize> = active
            .iter()
            .zip(&fit.coef)
            .filter(|(_, c)| c.abs() >= lambda)
            .map(|(&k, _)| k)
            .collect();
        if keep.is_empty() {
            let res = residual_on(theta, ndot, &set.rows, &vec![0.0; ncols]);
            return Ok(SparseSolution {
                constraint_threshold: set.threshold,
                ..SparseSolution::zero(ncols, lambda, res, iterations)
            });
        }
        if keep.len() == active.len() {
            let mut xi = vec![0.0; ncols];
            for (&k, &c) in active.iter().zip(&fit.coef) {
                xi[k] = c;
            }
            return Ok(SparseSolution {
                residual_norm: residual_on(theta, ndot, &set.rows, &xi),
                xi,
                support: active,
                lambda,
                iterations,
                all_zero: false,
                infeasible: false,
                converged: fit.converged,
                kkt_residual: fit.kkt_residual,
                max_violation: fit.max_violation,
                active_constraints: fit.active_constraints,
                constraint_threshold: set.threshold,
            });
        }
        active = keep;
    }
    // support still shrinking at the cap; report the last fit, unconverged
    let fit = fit_relaxing(theta, ndot, sides, &active, &mut set, opts)?;
    let mut xi = vec![0.0; ncols];
    for (&k, &c) in active.iter().zip(&fit.coef) {
        xi[k] = c;
    }
    Ok(SparseSolution {
        residual_norm: residual_on(theta, ndot, &set.rows, &xi),
        xi,
        support: active,
        lambda,
        iterations,
        all_zero: false,
        infeasible: false,
        converged: false,
        kkt_residual: fit.kkt_residual,
        max_violation: fit.max_violation,
        active_constraints: fit.active_constraints,
        constraint_threshold: set.threshold,
    })
}

/// Largest |ξ| of the constrained dense fit, for choosing a λ range.
pub fn dense_fit_max(theta: &DMatrix<f64>, ndot: &DVector<f64>, sides: &[Side], set: &ConstraintSet) -> Result<f64> {
    let all: Vec<usize> = (0..theta.ncols()).collect();
    let fit = constrained_lsq(theta, ndot, sides, &all, set, &SolverOptions::default())?;
    Ok(fit.coef.iter().fold(0.0, |m, c| m.max(c.abs())))
}

pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

//! Exact dynamic mode decomposition of snapshot series, with spectral and
//! localization diagnostics used to steer library construction.

use std::fs;
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::griddata::{write_matrix_csv, GridError, SnapshotSeries};

type C64 = Complex<f64>;

#[derive(Debug, Error)]
pub enum DmdError {
    #[error("need at least 2 snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("snapshot times are not uniformly spaced")]
    NonUniformTimes,
    #[error("rank {s} outside 1..={max}")]
    InvalidRank { s: usize, max: usize },
    #[error("snapshot matrices disagree in shape: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("data matrix has zero numerical rank")]
    ZeroRank,
    #[error("eigendecomposition of the projected operator failed: {0}")]
    Eigen(String),
    #[error("every mode fell below the amplitude floor")]
    AllModesFiltered,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DmdError>;

/// Stacks snapshots as columns: X = [n_1 .. n_{z-1}], X' = [n_2 .. n_z].
/// The field index is `i * y + j`.
pub fn snapshot_matrices(series: &SnapshotSeries) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let z = series.len();
    if z < 2 {
        return Err(DmdError::TooFewSnapshots(z));
    }
    if series.uniform_dt(1e-9).is_none() {
        return Err(DmdError::NonUniformTimes);
    }
    let full = stack(series);
    Ok((full.columns(0, z - 1).into_owned(), full.columns(1, z - 1).into_owned()))
}

fn stack(series: &SnapshotSeries) -> DMatrix<f64> {
    let (x, y) = series.grid.shape();
    DMatrix::from_fn(x * y, series.len(), |s, k| series.density[k][(s / y, s % y)])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmdResult {
    /// One column per mode, field index `i * y + j`.
    pub modes: DMatrix<C64>,
    pub discrete_eigs: Vec<C64>,
    pub continuous_eigs: Vec<C64>,
    pub amplitudes: Vec<C64>,
    pub rank: usize,
    /// Rank asked for; larger than `rank` when the data ran out of numerical rank.
    pub requested_rank: usize,
    pub energy_fraction: f64,
    pub singular_values: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
    pub shape: (usize, usize),
    /// First snapshot, kept for localization references.
    pub first: DVector<f64>,
}

/// Retained-energy share for each truncation 1..=len.
pub fn energy_profile(singular_values: &[f64]) -> Vec<f64> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    singular_values
        .iter()
        .map(|s| {
            acc += s * s;
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect()
}

fn sorted_svd(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
    let v = DMatrix::from_fn(vt.ncols(), order.len(), |i, k| vt[(order[k], i)]);
    (u, s, v)
}

/// Smallest rank reaching `target` energy if `requested` falls short.
pub fn select_rank(singular_values: &[f64], requested: usize, target: f64) -> usize {
    let prof = energy_profile(singular_values);
    let max = prof.len();
    let s = requested.clamp(1, max.max(1));
    if prof.get(s - 1).copied().unwrap_or(1.0) >= target {
        return s;
    }
    prof.iter().position(|&e| e >= target).map_or(max, |k| k + 1)
}

pub fn singular_values(series: &SnapshotSeries) -> Result<Vec<f64>> {
    let (x, _) = snapshot_matrices(series)?;
    Ok(sorted_svd(&x).1)
}

/// Exact DMD of the rank-`s` projection of A = X' X^+.
pub fn compute_dmd(
    x: &DMatrix<f64>,
    xp: &DMatrix<f64>,
    s: usize,
    dt: f64,
    t0: f64,
    shape: (usize, usize),
) -> Result<DmdResult> {
    if x.shape() != xp.shape() {
        return Err(DmdError::Shape(x.shape(), xp.shape()));
    }
    let max = x.nrows().min(x.ncols());
    if s < 1 || s > max {
        return Err(DmdError::InvalidRank { s, max });
    }
    let (u, sv, v) = sorted_svd(x);
    let tol = sv.first().copied().unwrap_or(0.0) * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    let numerical = sv.iter().take_while(|&&v| v > tol).count();
    if numerical == 0 {
        return Err(DmdError::ZeroRank);
    }
    let r = s.min(numerical);
    let ur = u.columns(0, r).into_owned();
    let vr = v.columns(0, r).into_owned();
    let sinv = DMatrix::from_diagonal(&DVector::from_iterator(r, sv[..r].iter().map(|s| 1.0 / s)));
    let xpvs = xp * &vr * &sinv;
    let atilde = ur.transpose() * &xpvs;

    let a = faer::Mat::from_fn(r, r, |i, j| atilde[(i, j)]);
    let eig = faer::linalg::solvers::Eigen::new_from_real(a.as_ref()).map_err(|e| DmdError::Eigen(format!("{e:?}")))?;
    let lam: Vec<C64> = (0..r)
        .map(|k| {
            let c = eig.S().column_vector()[k];
            C64::new(c.re, c.im)
        })
        .collect();
    let mut w = DMatrix::from_fn(r, r, |i, j| {
        let c = eig.U()[(i, j)];
        C64::new(c.re, c.im)
    });
    for mut col in w.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= C64::new(n, 0.0);
        }
    }
    let modes = xpvs.map(|v| C64::new(v, 0.0)) * w;

    let first = x.column(0).into_owned();
    let amplitudes = fit_amplitudes(&modes, &first);
    let continuous_eigs = lam.iter().map(|l| l.ln() / dt).collect();
    Ok(DmdResult {
        modes,
        discrete_eigs: lam,
        continuous_eigs,
        amplitudes,
        rank: r,
        requested_rank: s,
        energy_fraction: energy_profile(&sv)[r - 1],
        singular_values: sv,
        dt,
        t0,
        shape,
        first,
    })
}

fn fit_amplitudes(modes: &DMatrix<C64>, x0: &DVector<f64>) -> Vec<C64> {
    let rhs = x0.map(|v| C64::new(v, 0.0));
    let svd = modes.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let b = svd.solve(&rhs, smax * 1e-13).expect("u and v_t were computed");
    b.iter().copied().collect()
}

/// DMD of a uniformly sampled series at rank `s` (falls back to the
/// smallest rank with `energy_target` when `s` does not reach it).
pub fn dmd_series(series: &SnapshotSeries, s: usize, energy_target: f64) -> Result<DmdResult> {
    let (x, xp) = snapshot_matrices(series)?;
    let dt = series.uniform_dt(1e-9).ok_or(DmdError::NonUniformTimes)?;
    let sv = sorted_svd(&x).1;
    let s = select_rank(&sv, s.min(x.ncols()), energy_target);
    compute_dmd(&x, &xp, s, dt, series.times[0], series.grid.shape())
}

impl DmdResult {
    pub fn radii(&self) -> Vec<f64> {
        self.discrete_eigs.iter().map(|l| l.norm()).collect()
    }

    /// Complex rank-s field at time t.
    pub fn reconstruct_complex(&self, t: f64) -> DVector<C64> {
        let mut out = DVector::zeros(self.modes.nrows());
        for j in 0..self.rank {
            let c = (self.continuous_eigs[j] * (t - self.t0)).exp() * self.amplitudes[j];
            out.axpy(c, &self.modes.column(j), C64::new(1.0, 0.0));
        }
        out
    }

    /// Real x×y reconstruction at time t.
    pub fn reconstruct(&self, t: f64) -> DMatrix<f64> {
        let z = self.reconstruct_complex(t);
        let (x, y) = self.shape;
        DMatrix::from_fn(x, y, |i, j| z[i * y + j].re)
    }

    pub fn mode_field(&self, j: usize) -> DMatrix<C64> {
        let (x, y) = self.shape;
        DMatrix::from_fn(x, y, |i, k| self.modes[(i * y + k, j)])
    }
}

pub fn reconstruct(result: &DmdResult, t: f64) -> DMatrix<f64> {
    result.reconstruct(t)
}

/// Relative Frobenius error of the reconstruction over every snapshot.
pub fn reconstruction_error(result: &DmdResult, series: &SnapshotSeries) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, d) in series.times.iter().zip(&series.density) {
        num += (result.reconstruct(*t) - d).norm_squared();
        den += d.norm_squared();
    }
    (num / den).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    /// Modes with |b| below this share of max |b| are ignored.
    pub amp_floor: f64,
    /// Radii dispersion below this marks a size-independent rate.
    pub dispersion_threshold: f64,
    /// Localization fraction above this is dominant.
    pub dominance: f64,
    /// Aspect-ratio bin width in units of the log pivot spacing.
    pub aspect_bin: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            amp_floor: 1e-6,
            dispersion_threshold: 0.05,
            dominance: 0.5,
            aspect_bin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateDependence {
    Independent,
    Dependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuityHint {
    Continuous,
    SemiContinuousCandidate,
    ProductDeltaCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeLocalization {
    /// Energy on the outermost (largest-size) row and column relative to the
    /// outermost plus the next row and column; above 1/2 means a ridge along
    /// the parent-size edges.
    pub edge_energy_fraction: f64,
    /// Share of the mode's aspect-ratio profile (sums along log diagonals)
    /// collinear with that of the first snapshot.
    pub log_diagonal_energy_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralDiagnostics {
    pub radii: Vec<f64>,
    /// Indices of modes above the amplitude floor.
    pub kept: Vec<usize>,
    pub radii_dispersion: f64,
    pub growth_count: usize,
    pub decay_count: usize,
    pub size_dependence_flag: RateDependence,
    pub threshold: f64,
    pub mode_localization: Vec<ModeLocalization>,
    /// Amplitude-weighted means over kept modes.
    pub edge_energy_fraction: f64,
    pub log_diagonal_energy_fraction: f64,
    pub continuity_hint: ContinuityHint,
}

fn edge_fraction(e: &DMatrix<f64>) -> f64 {
    let (x, y) = e.shape();
    if x < 3 || y < 3 {
        return 0.0;
    }
    let mut outer = 0.0;
    let mut inner = 0.0;
    for j in 0..y - 2 {
        outer += e[(x - 1, j)];
        inner += e[(x - 2, j)];
    }
    for i in 0..x - 2 {
        outer += e[(i, y - 1)];
        inner += e[(i, y - 2)];
    }
    if outer + inner > 0.0 {
        outer / (outer + inner)
    } else {
        0.0
    }
}

fn aspect_profile<T>(field: &DMatrix<T>, weights: &DMatrix<f64>, bins: &DMatrix<usize>, nbins: usize) -> DVector<C64>
where
    T: Copy + Into<C64> + nalgebra::Scalar,
{
    let mut p = DVector::zeros(nbins);
    for i in 0..field.nrows() {
        for j in 0..field.ncols() {
            p[bins[(i, j)]] += field[(i, j)].into() * weights[(i, j)];
        }
    }
    p
}

/// Radii statistics, rate flag and localization fractions.
pub fn spectral_diagnostics(
    result: &DmdResult,
    grid: &crate::griddata::Grid2D,
    cfg: &DiagnosticsConfig,
) -> Result<SpectralDiagnostics> {
    let radii = result.radii();
    let amps: Vec<f64> = result.amplitudes.iter().map(|b| b.norm()).collect();
    let bmax = amps.iter().copied().fold(0.0, f64::max);
    let kept: Vec<usize> = (0..result.rank)
        .filter(|&j| bmax > 0.0 && amps[j] >= cfg.amp_floor * bmax)
        .collect();
    if kept.is_empty() {
        return Err(DmdError::AllModesFiltered);
    }
    let wsum: f64 = kept.iter().map(|&j| amps[j]).sum();
    let mean = kept.iter().map(|&j| amps[j] * radii[j]).sum::<f64>() / wsum;
    let var = kept.iter().map(|&j| amps[j] * (radii[j] - mean).powi(2)).sum::<f64>() / wsum;
    let radii_dispersion = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };

    let (x, y) = result.shape;
    let weights = grid.weight_matrix();
    let step = grid.v_axis.ratio().ln().max(grid.w_axis.ratio().ln()) * cfg.aspect_bin;
    let lv: Vec<f64> = grid.v().iter().map(|v| v.ln()).collect();
    let lw: Vec<f64> = grid.w().iter().map(|w| w.ln()).collect();
    let raw = DMatrix::from_fn(x, y, |i, j| ((lv[i] - lw[j]) / step).round() as i64);
    let lo = raw.min();
    let bins = raw.map(|b| (b - lo) as usize);
    let nbins = (raw.max() - lo) as usize + 1;
    let first = DMatrix::from_fn(x, y, |i, j| result.first[i * y + j]);
    let p0 = aspect_profile(&first, &weights, &bins, nbins);
    let p0n = p0.norm();

    let mode_localization: Vec<ModeLocalization> = (0..result.rank)
        .map(|j| {
            let f = result.mode_field(j);
            let e = f.map(|c| c.norm_sqr());
            let a = aspect_profile(&f, &weights, &bins, nbins);
            let an = a.norm();
            let diag = if an > 0.0 && p0n > 0.0 {
                (p0.dotc(&a).norm() / (p0n * an)).powi(2)
            } else {
                0.0
            };
            ModeLocalization {
                edge_energy_fraction: edge_fraction(&e),
                log_diagonal_energy_fraction: diag.min(1.0),
            }
        })
        .collect();
    let avg =
        |f: fn(&ModeLocalization) -> f64| kept.iter().map(|&j| amps[j] * f(&mode_localization[j])).sum::<f64>() / wsum;
    let edge = avg(|m| m.edge_energy_fraction);
    let diag = avg(|m| m.log_diagonal_energy_fraction);
    let continuity_hint = if diag > cfg.dominance {
        ContinuityHint::ProductDeltaCandidate
    } else if edge > cfg.dominance {
        ContinuityHint::SemiContinuousCandidate
    } else {
        ContinuityHint::Continuous
    };
    Ok(SpectralDiagnostics {
        growth_count: kept.iter().filter(|&&j| radii[j] > 1.0).count(),
        decay_count: kept.iter().filter(|&&j| radii[j] < 1.0).count(),
        size_dependence_flag: if radii_dispersion < cfg.dispersion_threshold {
            RateDependence::Independent
        } else {
            RateDependence::Dependent
        },
        threshold: cfg.dispersion_threshold,
        radii,
        kept,
        radii_dispersion,
        mode_localization,
        edge_energy_fraction: edge,
        log_diagonal_energy_fraction: diag,
        continuity_hint,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuousTraces {
    pub times: Vec<f64>,
    /// `traces[(j, k)] = Re exp(Omega_j (t_k - t0))`
    pub traces: DMatrix<f64>,
    pub note: String,
}

pub fn continuous_time_dynamics(result: &DmdResult, times: &[f64]) -> ContinuousTraces {
    let traces = DMatrix::from_fn(result.rank, times.len(), |j, k| {
        (result.continuous_eigs[j] * (times[k] - result.t0)).exp().re
    });
    ContinuousTraces {
        times: times.to_vec(),
        traces,
        note: "a mode with negative entries paired with a negative trace contributes positively".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryAdvice {
    pub rate: RateDependence,
    pub continuity: ContinuityHint,
    pub radii_dispersion: f64,
    pub edge_energy_fraction: f64,
    pub log_diagonal_energy_fraction: f64,
    pub dispersion_threshold: f64,
    pub dominance: f64,
}

impl From<&SpectralDiagnostics> for LibraryAdvice {
    fn from(d: &SpectralDiagnostics) -> Self {
        Self {
            rate: d.size_dependence_flag,
            continuity: d.continuity_hint,
            radii_dispersion: d.radii_dispersion,
            edge_energy_fraction: d.edge_energy_fraction,
            log_diagonal_energy_fraction: d.log_diagonal_energy_fraction,
            dispersion_threshold: d.threshold,
            dominance: 0.5,
        }
    }
}

/// Writes `mode_<j>.csv`, `eigenvalues.csv`, `traces.csv`, `diagnostics.json`
/// and `dmd_advice.json` into `dir`.
pub fn dmd_report(
    result: &DmdResult,
    diag: &SpectralDiagnostics,
    cfg: &DiagnosticsConfig,
    times: &[f64],
    dir: &Path,
) -> Result<LibraryAdvice> {
    fs::create_dir_all(dir)?;
    for j in 0..result.rank {
        write_matrix_csv(&dir.join(format!("mode_{j}.csv")), &result.mode_field(j).map(|c| c.re))?;
    }
    let mut eig = String::from("j,re_lambda,im_lambda,radius,re_omega,im_omega,abs_b\n");
    for j in 0..result.rank {
        let (l, o, b) = (result.discrete_eigs[j], result.continuous_eigs[j], result.amplitudes[j]);
        eig.push_str(&format!(
            "{j},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            l.re,
            l.im,
            l.norm(),
            o.re,
            o.im,
            b.norm()
        ));
    }
    fs::write(dir.join("eigenvalues.csv"), eig)?;
    let tr = continuous_time_dynamics(result, times);
    let mut s = String::from("t");
    for j in 0..result.rank {
        s.push_str(&format!(",mode_{j}"));
    }
    s.push('\n');
    for (k, t) in times.iter().enumerate() {
        s.push_str(&format!("{t:.16e}"));
        for j in 0..result.rank {
            s.push_str(&format!(",{:.16e}", tr.traces[(j, k)]));
        }
        s.push('\n');
    }
    fs::write(dir.join("traces.csv"), s)?;
    let summary = serde_json::json!({
        "rank": result.rank,
        "requested_rank": result.requested_rank,
        "energy_fraction": result.energy_fraction,
        "dt": result.dt,
        "radii_dispersion": diag.radii_dispersion,
        "growth_count": diag.growth_count,
        "decay_count": diag.decay_count,
        "kept_modes": diag.kept,
        "mode_localization": diag.mode_localization,
        "trace_note": tr.note,
        "config": cfg,
    });
    fs::write(
        dir.join("diagnostics.json"),
        serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    let mut advice = LibraryAdvice::from(diag);
    advice.dominance = cfg.dominance;
    fs::write(
        dir.join("dmd_advice.json"),
        serde_json::to_string_pretty(&advice).expect("json"),
    )?;
    Ok(advice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::griddata::{make_grid, Grid2D, SeriesMeta, Spacing};
    use proptest::prelude::*;

    fn grid(m: usize) -> Grid2D {
        Grid2D::square(make_grid(0.1, 5.0, m, Spacing::GeometricByCount).unwrap())
    }

    fn series_from(fields: Vec<DMatrix<f64>>, dt: f64) -> SnapshotSeries {
        let m = fields[0].nrows();
        let times = (0..fields.len()).map(|k| k as f64 * dt).collect();
        SnapshotSeries::new(grid(m), times, fields, SeriesMeta::default()).unwrap()
    }

    fn pattern(m: usize, a: f64) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| ((i as f64 + 1.0) * a + j as f64).sin() + 1.5)
    }

    #[test]
    fn matrix_shapes() {
        let s = series_from(vec![pattern(5, 0.3); 2], 0.1);
        let (x, xp) = snapshot_matrices(&s).unwrap();
        assert_eq!((x.shape(), xp.shape()), ((25, 1), (25, 1)));
        let s = series_from(vec![pattern(25, 0.3); 25], 0.1);
        let (x, xp) = snapshot_matrices(&s).unwrap();
        assert_eq!(x.shape(), (625, 24));
        assert_eq!(x, xp);
        let mut bad = s.clone();
        bad.times[3] += 0.01;
        assert!(matches!(snapshot_matrices(&bad), Err(DmdError::NonUniformTimes)));
    }

    #[test]
    fn steady_data_gives_unit_eigs() {
        let fields: Vec<DMatrix<f64>> = (0..6)
            .map(|k| if k % 2 == 0 { pattern(6, 0.7) } else { pattern(6, 1.9) })
            .collect();
        let s = series_from(fields.clone(), 0.5);
        let (x, _) = snapshot_matrices(&s).unwrap();
        let r = compute_dmd(&x, &x, 2, 0.5, 0.0, (6, 6)).unwrap();
        for l in &r.discrete_eigs {
            assert!((l - C64::new(1.0, 0.0)).norm() < 1e-10);
        }
        assert!((r.reconstruct(0.0) - &fields[0]).amax() < 1e-9);

        let constant = series_from(vec![pattern(6, 0.7); 6], 0.5);
        let r = dmd_series(&constant, 1, 0.99).unwrap();
        assert!((r.discrete_eigs[0].re - 1.0).abs() < 1e-12);
        assert!((r.reconstruct(2.0) - &constant.density[0]).amax() < 1e-10);
    }

    #[test]
    fn rank_one_decay() {
        let u = pattern(5, 0.4);
        let fields: Vec<DMatrix<f64>> = (0..8).map(|k| &u * 0.8f64.powi(k)).collect();
        let s = series_from(fields.clone(), 0.1);
        let r = dmd_series(&s, 1, 0.99).unwrap();
        assert_eq!(r.rank, 1);
        assert!((r.discrete_eigs[0] - C64::new(0.8, 0.0)).norm() < 1e-12);
        assert!((r.energy_fraction - 1.0).abs() < 1e-12);
        for (k, f) in fields.iter().enumerate() {
            assert!((r.reconstruct(k as f64 * 0.1) - f).amax() < 1e-10 * f.amax());
        }
        // requesting more than the data supports flags instead of inventing modes
        let (x, xp) = snapshot_matrices(&s).unwrap();
        let over = compute_dmd(&x, &xp, 4, 0.1, 0.0, (5, 5)).unwrap();
        assert_eq!((over.rank, over.requested_rank), (1, 4));
    }

    #[test]
    fn generator_eigs_recovered() {
        // n_{k+1} = A n_k with A diagonalizable in a 3-dim invariant subspace
        let m = 4;
        let d = m * m;
        let basis = DMatrix::from_fn(d, 3, |i, j| ((i * (j + 2)) as f64 * 0.37).cos());
        let lam = [0.9f64, 1.05, 0.5];
        let coef = [1.0, 0.7, -0.4];
        let fields: Vec<DMatrix<f64>> = (0..10)
            .map(|k| {
                let v = (0..3).fold(DVector::zeros(d), |acc, j| {
                    acc + basis.column(j) * (coef[j] * lam[j].powi(k))
                });
                DMatrix::from_fn(m, m, |i, j| v[i * m + j])
            })
            .collect();
        let s = series_from(fields, 0.2);
        let r = dmd_series(&s, 3, 0.0).unwrap();
        let mut got: Vec<f64> = r.discrete_eigs.iter().map(|l| l.re).collect();
        got.sort_by(f64::total_cmp);
        for (g, e) in got.iter().zip([0.5, 0.9, 1.05]) {
            assert!((g - e).abs() < 1e-8, "{got:?}");
        }
        for l in &r.discrete_eigs {
            assert!(l.im.abs() < 1e-8);
        }
    }

    #[test]
    fn traces_by_hand() {
        let u = pattern(4, 0.4);
        let s = series_from((0..5).map(|k| &u * 0.5f64.powi(k)).collect(), 0.1);
        let r = dmd_series(&s, 1, 0.99).unwrap();
        assert!((r.continuous_eigs[0].re - 0.5f64.ln() / 0.1).abs() < 1e-9);
        assert!((r.continuous_eigs[0].re + 6.9315).abs() < 1e-4);
        let tr = continuous_time_dynamics(&r, &[0.0, 0.1, 0.2, 0.3]);
        for k in 1..4 {
            assert!(tr.traces[(0, k)] < tr.traces[(0, k - 1)]);
        }
        let steady = series_from(vec![u.clone(); 3], 0.1);
        let r = dmd_series(&steady, 1, 0.99).unwrap();
        let tr = continuous_time_dynamics(&r, &[0.0, 1.0, 7.0]);
        assert!(tr.traces.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn single_mode_dispersion_zero() {
        let u = pattern(5, 0.4);
        let s = series_from((0..5).map(|k| &u * 0.9f64.powi(k)).collect(), 0.1);
        let r = dmd_series(&s, 1, 0.99).unwrap();
        let d = spectral_diagnostics(&r, &s.grid, &DiagnosticsConfig::default()).unwrap();
        assert_eq!(d.radii_dispersion, 0.0);
        assert_eq!(d.size_dependence_flag, RateDependence::Independent);
    }

    #[test]
    fn rank_selection_falls_back() {
        let sv = [10.0, 1.0, 0.5, 0.1];
        assert_eq!(select_rank(&sv, 1, 0.99), 2);
        assert_eq!(select_rank(&sv, 3, 0.99), 3);
        assert_eq!(select_rank(&sv, 10, 0.99), 4);
    }

    proptest! {
        #[test]
        fn energy_nondecreasing(vals in proptest::collection::vec(0.0f64..10.0, 1..12)) {
            let mut sv = vals.clone();
            sv.sort_by(|a, b| b.total_cmp(a));
            let e = energy_profile(&sv);
            prop_assert!(e.windows(2).all(|w| w[1] >= w[0] - 1e-15));
            prop_assert!(e.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }

        #[test]
        fn conjugate_closure_and_real_reconstruction(seed in 0u64..500) {
            let m = 4;
            let d = m * m;
            let phase = 0.3 + (seed % 17) as f64 * 0.05;
            let fields: Vec<DMatrix<f64>> = (0..12).map(|k| {
                let t = k as f64;
                DMatrix::from_fn(m, m, |i, j| {
                    let x = (i * m + j) as f64 / d as f64;
                    0.95f64.powf(t) * ((phase * t).cos() * x + (phase * t).sin() * (1.0 - x * x))
                        + 1.02f64.powf(t) * (x + 0.1)
                })
            }).collect();
            let s = series_from(fields, 0.1);
            let r = dmd_series(&s, 3, 0.0).unwrap();
            for l in &r.discrete_eigs {
                let closes = r.discrete_eigs.iter().any(|o| (o - l.conj()).norm() < 1e-8);
                prop_assert!(closes);
            }
            for t in [0.0, 0.35, 1.1] {
                let z = r.reconstruct_complex(t);
                let mag = z.iter().map(|c| c.norm()).fold(0.0, f64::max);
                let im = z.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
                prop_assert!(im <= 1e-8 * mag);
            }
            let radii = r.radii();
            for (j, o) in r.continuous_eigs.iter().enumerate() {
                prop_assert_eq!(o.re < 0.0, radii[j] < 1.0);
            }
        }
    }
}

//! Two-dimensional fixed-pivot discretization of the pure-breakage balance
//! and its time integration.
//!
//! Counts `N_ij = n(v_i, w_j) * quad_v[i] * quad_w[j]` are the state. Fragments
//! are sent to the surrounding pivots with tensor-product hat weights, which
//! preserve number, v, w and vw of every packet lying inside the mesh.

use nalgebra::{DMatrix, DVector};
use ode_solvers::{Dopri5, OutputType, System};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::griddata::{make_grid, Grid2D, GridError, SeriesMeta, SnapshotSeries, Spacing};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("unknown case id {0}; expected 1..=6")]
    UnknownCase(u8),
    #[error("inadmissible kernel: {0}")]
    Kernel(String),
    #[error("product-delta ratio {theta} does not map pivots onto pivots; enable interpolation")]
    IncompatibleGrid { theta: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("integration failed on [{t0}, {t1}]: {msg}")]
    Integration { t0: f64, t1: f64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// `coef * v^p * w^q`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub p: i32,
    pub q: i32,
}

impl Monomial {
    pub fn new(coef: f64, p: i32, q: i32) -> Self {
        Self { coef, p, q }
    }

    pub fn eval(&self, v: f64, w: f64) -> f64 {
        self.coef * v.powi(self.p) * w.powi(self.q)
    }
}

fn eval_sum(terms: &[Monomial], v: f64, w: f64) -> f64 {
    terms.iter().map(|m| m.eval(v, w)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum Stoichiometric {
    /// Daughters uniform on [0, v'] x [0, w'] with density `sum c v'^p w'^q`.
    ContinuousPowerLaw { terms: Vec<Monomial> },
    /// `[v' delta(v - v') + w' delta(w - w')] / (v' w')`
    SingleDeltaSum,
    /// `c delta(v - theta_v v') delta(w - theta_w w')`
    ProductDelta { c: f64, theta_v: f64, theta_w: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub stoichiometric: Stoichiometric,
    pub rate: Vec<Monomial>,
}

impl KernelSpec {
    pub fn new(stoichiometric: Stoichiometric, rate: Vec<Monomial>) -> Result<Self> {
        if let Stoichiometric::ProductDelta { c, theta_v, theta_w } = stoichiometric {
            for t in [theta_v, theta_w] {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(SolverError::Kernel(format!("ratio {t} outside (0, 1]")));
                }
            }
            if !(c > 1.0 && c.is_finite()) {
                return Err(SolverError::Kernel(format!("fragment count {c} must exceed 1")));
            }
        }
        if rate.iter().any(|m| !m.coef.is_finite()) {
            return Err(SolverError::Kernel("non-finite rate coefficient".into()));
        }
        Ok(Self { stoichiometric, rate })
    }

    /// Fragments per breakage event of parent (v', w').
    pub fn fragment_count(&self, vp: f64, wp: f64) -> f64 {
        match &self.stoichiometric {
            Stoichiometric::ContinuousPowerLaw { terms } => terms.iter().map(|m| m.eval(vp, wp) * vp * wp).sum(),
            Stoichiometric::SingleDeltaSum => 2.0,
            Stoichiometric::ProductDelta { c, .. } => *c,
        }
    }

    pub fn rate_at(&self, v: f64, w: f64) -> f64 {
        eval_sum(&self.rate, v, w)
    }

    fn check_on(&self, grid: &Grid2D) -> Result<()> {
        for &v in grid.v() {
            for &w in grid.w() {
                let nu = self.fragment_count(v, w);
                if !(nu.is_finite() && nu > 1.0) {
                    return Err(SolverError::Kernel(format!(
                        "fragment count {nu} at parent ({v}, {w}) must be finite and > 1"
                    )));
                }
                let g = self.rate_at(v, w);
                if !(g.is_finite() && g >= 0.0) {
                    return Err(SolverError::Kernel(format!(
                        "rate {g} at ({v}, {w}) must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Kernels of the six benchmark cases.
pub fn case_kernels(case_id: u8) -> Result<KernelSpec> {
    use Stoichiometric::*;
    let m = Monomial::new;
    let (s, rate) = match case_id {
        1 => (
            ContinuousPowerLaw {
                terms: vec![m(4.0, -1, -1)],
            },
            vec![m(1.0, 0, 0)],
        ),
        2 => (
            ContinuousPowerLaw {
                terms: vec![m(4.0, -1, -1)],
            },
            vec![m(1.0, 1, 1)],
        ),
        3 => (
            ContinuousPowerLaw {
                terms: vec![m(2.0, -1, -1)],
            },
            vec![m(1.0, 0, 0)],
        ),
        4 => (
            ContinuousPowerLaw {
                terms: vec![m(2.0, -1, -1)],
            },
            vec![m(1.0, 1, 0), m(1.0, 0, 1)],
        ),
        5 => (SingleDeltaSum, vec![m(1.0, 1, 1)]),
        6 => (
            ProductDelta {
                c: 4.0,
                theta_v: 0.5,
                theta_w: 0.5,
            },
            vec![m(0.25, 0, 0)],
        ),
        other => return Err(SolverError::UnknownCase(other)),
    };
    KernelSpec::new(s, rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Fragments below the smallest pivot leave the system.
    #[default]
    Drop,
    /// Fragments below the smallest pivot are counted at the edge pivot.
    AssignToEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    /// All particles at the top pivot pair.
    Monodisperse,
    /// `16 v w / (v0^2 w0^2) exp(-2 (v / v0 + w / w0))`
    Polydisperse { v0: f64, w0: f64 },
}

pub fn initial_condition(kind: InitialCondition, grid: &Grid2D, n0: f64) -> Result<DMatrix<f64>> {
    if !(n0 >= 0.0 && n0.is_finite()) {
        return Err(SolverError::InvalidInput(format!("N0 must be >= 0, got {n0}")));
    }
    let (x, y) = grid.shape();
    Ok(match kind {
        InitialCondition::Monodisperse => {
            let mut d = DMatrix::zeros(x, y);
            d[(x - 1, y - 1)] = n0 / grid.cell_weight(x - 1, y - 1);
            d
        }
        InitialCondition::Polydisperse { v0, w0 } => DMatrix::from_fn(x, y, |i, j| {
            let (v, w) = (grid.v()[i], grid.w()[j]);
            n0 * 16.0 * v * w / (v0 * v0 * w0 * w0) * (-2.0 * (v / v0 + w / w0)).exp()
        }),
    })
}

/// `H[i, k] = integral of hat_i over [0, p_k]`: share of a uniform daughter
/// spread on [0, p_k] that lands on pivot i.
pub fn hat_matrix(p: &[f64], policy: BoundaryPolicy) -> DMatrix<f64> {
    let n = p.len();
    DMatrix::from_fn(n, n, |i, k| {
        if i > k {
            return 0.0;
        }
        let left = if i == 0 {
            match policy {
                BoundaryPolicy::Drop => 0.0,
                BoundaryPolicy::AssignToEdge => p[0],
            }
        } else {
            0.5 * (p[i] - p[i - 1])
        };
        let right = if i < k { 0.5 * (p[i + 1] - p[i]) } else { 0.0 };
        left + right
    })
}

/// Bilinear split of a point packet at (v, w) onto surrounding pivots.
/// Preserves the packet's number and its v, w, vw moments when it lies inside
/// the mesh. Returns (i, j, weight) triples.
pub fn redistribute_packet(grid: &Grid2D, v: f64, w: f64, policy: BoundaryPolicy) -> Vec<(usize, usize, f64)> {
    let sv = split_1d(grid.v(), v, policy);
    let sw = split_1d(grid.w(), w, policy);
    let mut out = Vec::with_capacity(4);
    for &(i, a) in &sv {
        for &(j, b) in &sw {
            if a * b != 0.0 {
                out.push((i, j, a * b));
            }
        }
    }
    out
}

fn split_1d(p: &[f64], x: f64, policy: BoundaryPolicy) -> Vec<(usize, f64)> {
    let n = p.len();
    if x < p[0] {
        return match policy {
            BoundaryPolicy::Drop => vec![],
            BoundaryPolicy::AssignToEdge => vec![(0, 1.0)],
        };
    }
    if x >= p[n - 1] {
        return vec![(n - 1, 1.0)];
    }
    let k = p.partition_point(|&q| q <= x) - 1;
    let t = (x - p[k]) / (p[k + 1] - p[k]);
    vec![(k, 1.0 - t), (k + 1, t)]
}

#[derive(Debug, Clone)]
enum Birth {
    /// `B = Hv (b o Gamma o N) Hw^T`
    Continuous { b: DMatrix<f64> },
    /// `B = (Gamma N / W) Hw^T + Hv (Gamma N / V)`
    SingleDelta,
    /// Explicit packet list: (target flat index, source flat index, weight)
    Packets { links: Vec<(usize, usize, f64)> },
}

/// Linear map from pivot counts to their time derivatives.
#[derive(Debug, Clone)]
pub struct DiscreteBreakageOperator {
    pub grid: Grid2D,
    pub kernel: KernelSpec,
    pub policy: BoundaryPolicy,
    gamma: DMatrix<f64>,
    hv: DMatrix<f64>,
    hw: DMatrix<f64>,
    birth: Birth,
}

pub fn build_operator(
    kernel: &KernelSpec,
    grid: &Grid2D,
    policy: BoundaryPolicy,
    interpolate: bool,
) -> Result<DiscreteBreakageOperator> {
    kernel.check_on(grid)?;
    let (x, y) = grid.shape();
    let (v, w) = (grid.v(), grid.w());
    let gamma = DMatrix::from_fn(x, y, |i, j| kernel.rate_at(v[i], w[j]));
    let hv = hat_matrix(v, policy);
    let hw = hat_matrix(w, policy);
    let birth = match &kernel.stoichiometric {
        Stoichiometric::ContinuousPowerLaw { terms } => Birth::Continuous {
            b: DMatrix::from_fn(x, y, |i, j| eval_sum(terms, v[i], w[j])),
        },
        Stoichiometric::SingleDeltaSum => Birth::SingleDelta,
        Stoichiometric::ProductDelta { c, theta_v, theta_w } => {
            let shifts = (grid.v_axis.shift_for(*theta_v), grid.w_axis.shift_for(*theta_w));
            let mut links = Vec::new();
            for k in 0..x {
                for l in 0..y {
                    let src = k * y + l;
                    match shifts {
                        (Some(dv), Some(dw)) => {
                            let ti = exact_target(k, dv, policy);
                            let tj = exact_target(l, dw, policy);
                            if let (Some(i), Some(j)) = (ti, tj) {
                                links.push((i * y + j, src, *c));
                            }
                        }
                        _ if interpolate => {
                            for (i, j, a) in redistribute_packet(grid, theta_v * v[k], theta_w * w[l], policy) {
                                links.push((i * y + j, src, c * a));
                            }
                        }
                        _ => {
                            let theta = if shifts.0.is_none() { *theta_v } else { *theta_w };
                            return Err(SolverError::IncompatibleGrid { theta });
                        }
                    }
                }
            }
            Birth::Packets { links }
        }
    };
    Ok(DiscreteBreakageOperator {
        grid: grid.clone(),
        kernel: kernel.clone(),
        policy,
        gamma,
        hv,
        hw,
        birth,
    })
}

fn exact_target(k: usize, d: usize, policy: BoundaryPolicy) -> Option<usize> {
    if k >= d {
        Some(k - d)
    } else {
        match policy {
            BoundaryPolicy::Drop => None,
            BoundaryPolicy::AssignToEdge => Some(0),
        }
    }
}

impl DiscreteBreakageOperator {
    pub fn dim(&self) -> usize {
        let (x, y) = self.grid.shape();
        x * y
    }

    /// Breakage rate at the pivots.
    pub fn rates(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// dN/dt for counts N laid out as an x×y matrix.
    pub fn apply(&self, n: &DMatrix<f64>) -> DMatrix<f64> {
        let (x, y) = self.grid.shape();
        let gn = self.gamma.component_mul(n);
        let mut out = match &self.birth {
            Birth::Continuous { b } => &self.hv * b.component_mul(&gn) * self.hw.transpose(),
            Birth::SingleDelta => {
                let (v, w) = (self.grid.v(), self.grid.w());
                let by_w = DMatrix::from_fn(x, y, |i, j| gn[(i, j)] / w[j]);
                let by_v = DMatrix::from_fn(x, y, |i, j| gn[(i, j)] / v[i]);
                by_w * self.hw.transpose() + &self.hv * by_v
            }
            Birth::Packets { links } => {
                let mut out = DMatrix::zeros(x, y);
                for &(t, s, a) in links {
                    out[(t / y, t % y)] += a * gn[(s / y, s % y)];
                }
                out
            }
        };
        out -= gn;
        out
    }

    /// Dense (xy)×(xy) matrix with stacked index `i * y + j`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let (x, y) = self.grid.shape();
        let d = x * y;
        let mut m = DMatrix::zeros(d, d);
        let mut e = DMatrix::zeros(x, y);
        for s in 0..d {
            e[(s / y, s % y)] = 1.0;
            let col = self.apply(&e);
            e[(s / y, s % y)] = 0.0;
            for t in 0..d {
                m[(t, s)] = col[(t / y, t % y)];
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backend {
    /// Adaptive Dormand-Prince 5(4).
    Dopri5 { rel_tol: f64 },
    /// Dense matrix exponential per output interval.
    Expm,
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Dopri5 { rel_tol: 1e-8 }
    }
}

struct Rhs<'a> {
    op: &'a DiscreteBreakageOperator,
}

impl System<f64, DVector<f64>> for Rhs<'_> {
    fn system(&self, _t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let (x, w) = self.op.grid.shape();
        // DVector is column-major; the x×y state is stored row-major.
        let n = DMatrix::from_row_slice(x, w, y.as_slice());
        let d = self.op.apply(&n);
        for i in 0..x {
            for j in 0..w {
                dy[i * w + j] = d[(i, j)];
            }
        }
    }
}

fn to_flat(m: &DMatrix<f64>) -> DVector<f64> {
    let (x, y) = m.shape();
    DVector::from_fn(x * y, |s, _| m[(s / y, s % y)])
}

fn from_flat(v: &DVector<f64>, x: usize, y: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(x, y, v.as_slice())
}

/// Integrates dN/dt = M N from an initial density; returns densities at `times`.
pub fn simulate(
    op: &DiscreteBreakageOperator,
    ic: &DMatrix<f64>,
    times: &[f64],
    backend: Backend,
) -> Result<SnapshotSeries> {
    let grid = &op.grid;
    let (x, y) = grid.shape();
    if ic.shape() != (x, y) {
        return Err(SolverError::InvalidInput(format!(
            "initial field {:?} does not match grid {:?}",
            ic.shape(),
            (x, y)
        )));
    }
    if ic.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(SolverError::InvalidInput(
            "initial field must be finite and >= 0".into(),
        ));
    }
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SolverError::InvalidInput("times must be strictly increasing".into()));
    }
    let wm = grid.weight_matrix();
    let mut state = to_flat(&ic.component_mul(&wm));
    let scale = state.amax();
    let mut counts = vec![state.clone()];
    if scale > 0.0 {
        match backend {
            Backend::Dopri5 { rel_tol } => {
                let atol = rel_tol * 1e-6 * scale;
                for win in times.windows(2) {
                    let (t0, t1) = (win[0], win[1]);
                    let mut stepper = Dopri5::from_param(
                        Rhs { op },
                        t0,
                        t1,
                        t1 - t0,
                        state.clone(),
                        rel_tol,
                        atol,
                        0.9,
                        0.04,
                        0.2,
                        10.0,
                        t1 - t0,
                        0.0,
                        1_000_000,
                        1000,
                        OutputType::Sparse,
                    );
                    let fail = |msg: String| SolverError::Integration { t0, t1, msg };
                    let stats = stepper.integrate().map_err(|e| fail(e.to_string()))?;
                    let (xs, ys) = stepper.results().get();
                    match (xs.last(), ys.last()) {
                        (Some(&tl), Some(yl)) if (tl - t1).abs() <= 1e-9 * t1.abs().max(1.0) => {
                            state = yl.clone();
                        }
                        _ => {
                            return Err(fail(format!(
                                "stopped short of the interval end after {} accepted / {} rejected steps",
                                stats.accepted_steps, stats.rejected_steps
                            )))
                        }
                    }
                    counts.push(state.clone());
                }
            }
            Backend::Expm => {
                let m = op.matrix();
                let mut cached: Option<(f64, DMatrix<f64>)> = None;
                for win in times.windows(2) {
                    let h = win[1] - win[0];
                    let reuse = matches!(&cached, Some((hc, _)) if (hc - h).abs() <= 1e-12 * h);
                    if !reuse {
                        cached = Some((h, (&m * h).exp()));
                    }
                    state = &cached.as_ref().unwrap().1 * &state;
                    counts.push(state.clone());
                }
            }
        }
    } else {
        counts = vec![state.clone(); times.len()];
    }
    let density = counts
        .iter()
        .map(|c| {
            let mut d = from_flat(c, x, y).component_div(&wm);
            let floor = 1e-12 * d.amax();
            d.apply(|v| {
                if *v < 0.0 && *v >= -floor {
                    *v = 0.0
                }
            });
            d
        })
        .collect();
    let mut meta = SeriesMeta::default();
    meta.params.insert(
        "policy".into(),
        serde_json::to_value(op.policy).expect("policy serializes"),
    );
    meta.params.insert(
        "backend".into(),
        serde_json::to_value(backend).expect("backend serializes"),
    );
    Ok(SnapshotSeries::new(grid.clone(), times.to_vec(), density, meta)?)
}

/// M_pq(t_k) by tensor trapezoid.
pub fn moment(series: &SnapshotSeries, p: i32, q: i32) -> Vec<f64> {
    series.moment(p, q)
}

/// Writes `t,M00,M10,M01,M11` per snapshot.
pub fn write_moment_report(series: &SnapshotSeries, path: &std::path::Path) -> Result<()> {
    let cols = [(0, 0), (1, 0), (0, 1), (1, 1)].map(|(p, q)| series.moment(p, q));
    let mut s = String::from("t,M00,M10,M01,M11\n");
    for (k, t) in series.times.iter().enumerate() {
        s.push_str(&format!("{t:.16e}"));
        for c in &cols {
            s.push_str(&format!(",{:.16e}", c[k]));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Mesh, initial condition and time window used for a benchmark case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSetup {
    pub case_id: u8,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub spacing: Spacing,
    pub ic: InitialCondition,
    pub n0: f64,
    pub t_end: f64,
    /// Extra pivots simulated below the output mesh, then discarded.
    pub guard: usize,
    pub policy: BoundaryPolicy,
    pub backend: Backend,
}

impl CaseSetup {
    pub fn standard(case_id: u8) -> Result<Self> {
        case_kernels(case_id)?;
        Ok(if case_id == 6 {
            Self {
                case_id,
                lower: 1e-4,
                upper: 5.0,
                count: 15,
                spacing: Spacing::GeometricRatio { ratio: 2.0 },
                ic: InitialCondition::Polydisperse { v0: 1.0, w0: 1.0 },
                n0: 1.0,
                t_end: 1.0,
                guard: 5,
                policy: BoundaryPolicy::Drop,
                backend: Backend::default(),
            }
        } else {
            Self {
                case_id,
                lower: 0.1,
                upper: 5.0,
                count: 25,
                spacing: Spacing::GeometricByCount,
                ic: InitialCondition::Monodisperse,
                n0: 1.0,
                t_end: 5.0,
                guard: 5,
                policy: BoundaryPolicy::Drop,
                backend: Backend::default(),
            }
        })
    }

    pub fn output_grid(&self) -> Result<Grid2D> {
        Ok(Grid2D::square(make_grid(
            self.lower,
            self.upper,
            self.count,
            self.spacing,
        )?))
    }

    pub fn uniform_times(&self, count: usize) -> Result<Vec<f64>> {
        if count < 2 {
            return Err(SolverError::InvalidInput(format!(
                "need at least 2 timepoints, got {count}"
            )));
        }
        Ok((0..count).map(|k| self.t_end * k as f64 / (count - 1) as f64).collect())
    }
}

/// Simulates a benchmark case at `times` and returns densities on the output mesh.
pub fn generate_case(setup: &CaseSetup, times: &[f64]) -> Result<SnapshotSeries> {
    let kernel = case_kernels(setup.case_id)?;
    let out_grid = setup.output_grid()?;
    let sim_grid = Grid2D::new(
        out_grid.v_axis.extend_below(setup.guard),
        out_grid.w_axis.extend_below(setup.guard),
    );
    let op = build_operator(&kernel, &sim_grid, setup.policy, false)?;
    // the monodisperse spike keeps its count: the top cell weight is unchanged by the guard band
    let ic = initial_condition(setup.ic, &sim_grid, setup.n0)?;
    let full = simulate(&op, &ic, times, setup.backend)?;
    let g = setup.guard;
    let (x, y) = out_grid.shape();
    let density = full
        .density
        .iter()
        .map(|d| d.view((g, g), (x, y)).into_owned())
        .collect();
    let mut meta = full.meta;
    meta.case_id = Some(setup.case_id);
    meta.params
        .insert("setup".into(), serde_json::to_value(setup).expect("setup serializes"));
    Ok(SnapshotSeries::new(out_grid, times.to_vec(), density, meta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn case_grid() -> Grid2D {
        CaseSetup::standard(1).unwrap().output_grid().unwrap()
    }

    fn ratio2_grid() -> Grid2D {
        CaseSetup::standard(6).unwrap().output_grid().unwrap()
    }

    #[test]
    fn table_kernels() {
        let k1 = case_kernels(1).unwrap();
        assert_eq!(k1.fragment_count(0.7, 3.0), 4.0);
        assert_eq!(k1.rate_at(0.7, 3.0), 1.0);
        let k4 = case_kernels(4).unwrap();
        assert_eq!(k4.rate_at(2.0, 3.0), 5.0);
        assert_eq!(k4.fragment_count(2.0, 3.0), 2.0);
        let k6 = case_kernels(6).unwrap();
        assert_eq!(
            k6.stoichiometric,
            Stoichiometric::ProductDelta {
                c: 4.0,
                theta_v: 0.5,
                theta_w: 0.5
            }
        );
        assert_eq!(k6.rate_at(1.0, 1.0), 0.25);
        assert!(matches!(case_kernels(7), Err(SolverError::UnknownCase(7))));
        assert!(KernelSpec::new(
            Stoichiometric::ProductDelta {
                c: 4.0,
                theta_v: 1.5,
                theta_w: 0.5
            },
            vec![]
        )
        .is_err());
    }

    #[test]
    fn initial_conditions() {
        let g = case_grid();
        let zero = initial_condition(InitialCondition::Monodisperse, &g, 0.0).unwrap();
        assert_eq!(zero.amax(), 0.0);
        let mono = initial_condition(InitialCondition::Monodisperse, &g, 1.0).unwrap();
        assert!((g.integrate(&mono, 0, 0) - 1.0).abs() < 1e-14);
        assert!((g.integrate(&mono, 1, 1) - 25.0).abs() < 1e-12);
        assert!(initial_condition(InitialCondition::Monodisperse, &g, -1.0).is_err());
    }

    #[test]
    fn polydisperse_moments_on_fine_wide_mesh() {
        let axis = make_grid(1e-4, 40.0, 400, Spacing::GeometricByCount).unwrap();
        let g = Grid2D::square(axis);
        let ic = initial_condition(InitialCondition::Polydisperse { v0: 1.0, w0: 1.0 }, &g, 1.0).unwrap();
        assert!((g.integrate(&ic, 0, 0) - 1.0).abs() < 0.02);
        assert!((g.integrate(&ic, 1, 1) - 1.0).abs() < 0.02);
    }

    #[test]
    fn hat_columns_conserve_number_and_mass() {
        let p = case_grid().v().to_vec();
        let h = hat_matrix(&p, BoundaryPolicy::Drop);
        for k in 0..p.len() {
            let n: f64 = (0..p.len()).map(|i| h[(i, k)]).sum();
            let m: f64 = (0..p.len()).map(|i| h[(i, k)] * p[i]).sum();
            assert!((n - (p[k] - p[0])).abs() < 1e-13);
            assert!((m - 0.5 * (p[k] * p[k] - p[0] * p[0])).abs() < 1e-12);
        }
        let h = hat_matrix(&p, BoundaryPolicy::AssignToEdge);
        for k in 0..p.len() {
            let n: f64 = (0..p.len()).map(|i| h[(i, k)]).sum();
            assert!((n - p[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn product_delta_is_index_shift() {
        let g = ratio2_grid();
        let op = build_operator(&case_kernels(6).unwrap(), &g, BoundaryPolicy::Drop, false).unwrap();
        let m = op.matrix();
        let y = 15;
        for t in 0..m.nrows() {
            for s in 0..m.ncols() {
                if t == s || m[(t, s)] == 0.0 {
                    continue;
                }
                let (i, j, k, l) = (t / y, t % y, s / y, s % y);
                assert_eq!((k, l), (i + 1, j + 1));
                assert!((m[(t, s)] - 1.0).abs() < 1e-15);
            }
        }
        let off = Grid2D::square(make_grid(0.1, 5.0, 15, Spacing::GeometricByCount).unwrap());
        assert!(matches!(
            build_operator(&case_kernels(6).unwrap(), &off, BoundaryPolicy::Drop, false),
            Err(SolverError::IncompatibleGrid { .. })
        ));
        assert!(build_operator(&case_kernels(6).unwrap(), &off, BoundaryPolicy::Drop, true).is_ok());
    }

    #[test]
    fn metzler_and_death_diagonal() {
        for case in 1..=6 {
            let g = if case == 6 { ratio2_grid() } else { case_grid() };
            let k = case_kernels(case).unwrap();
            let op = build_operator(&k, &g, BoundaryPolicy::Drop, false).unwrap();
            let m = op.matrix();
            let y = g.shape().1;
            for t in 0..m.nrows() {
                for s in 0..m.ncols() {
                    if t != s {
                        assert!(m[(t, s)] >= 0.0, "case {case}: M[{t},{s}] = {}", m[(t, s)]);
                    }
                }
                assert!(m[(t, t)] <= 0.0, "case {case}: diagonal {t} = {}", m[(t, t)]);
            }
            // death contribution: the diagonal without self-birth equals -Gamma
            let (i, j) = (3, 4);
            let gamma = k.rate_at(g.v()[i], g.w()[j]);
            let self_birth = op.apply(&{
                let mut e = DMatrix::zeros(g.shape().0, y);
                e[(i, j)] = 1.0;
                e
            })[(i, j)]
                + gamma;
            assert!((m[(i * y + j, i * y + j)] - (self_birth - gamma)).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_policy_column_sums_are_net_production() {
        for case in 1..=6 {
            let g = if case == 6 { ratio2_grid() } else { case_grid() };
            let k = case_kernels(case).unwrap();
            let op = build_operator(&k, &g, BoundaryPolicy::AssignToEdge, false).unwrap();
            let m = op.matrix();
            let y = g.shape().1;
            for s in 0..m.ncols() {
                let (v, w) = (g.v()[s / y], g.w()[s % y]);
                let col: f64 = m.column(s).sum();
                let expect = (k.fragment_count(v, w) - 1.0) * k.rate_at(v, w);
                assert!((col - expect).abs() < 1e-10 * expect.abs().max(1.0), "case {case}");
            }
        }
    }

    #[test]
    fn zero_rate_gives_zero_operator() {
        let k = KernelSpec::new(
            Stoichiometric::ContinuousPowerLaw {
                terms: vec![Monomial::new(4.0, -1, -1)],
            },
            vec![Monomial::new(0.0, 0, 0)],
        )
        .unwrap();
        let op = build_operator(&k, &case_grid(), BoundaryPolicy::Drop, false).unwrap();
        assert_eq!(op.matrix().amax(), 0.0);
    }

    #[test]
    fn zero_ic_zero_series() {
        let g = case_grid();
        let op = build_operator(&case_kernels(1).unwrap(), &g, BoundaryPolicy::Drop, false).unwrap();
        let s = simulate(&op, &DMatrix::zeros(25, 25), &[0.0, 0.5, 1.0], Backend::default()).unwrap();
        assert!(s.density.iter().all(|d| d.amax() == 0.0));
    }

    #[test]
    fn backends_agree_and_tolerance_insensitive() {
        let setup = CaseSetup::standard(4).unwrap();
        let times = setup.uniform_times(6).unwrap();
        let a = generate_case(&setup, &times).unwrap();
        let b = generate_case(
            &CaseSetup {
                backend: Backend::Expm,
                ..setup.clone()
            },
            &times,
        )
        .unwrap();
        let c = generate_case(
            &CaseSetup {
                backend: Backend::Dopri5 { rel_tol: 1e-10 },
                ..setup.clone()
            },
            &times,
        )
        .unwrap();
        for k in 0..times.len() {
            let scale = b.density[k].amax();
            assert!((&a.density[k] - &b.density[k]).amax() < 1e-6 * scale);
            assert!((&a.density[k] - &c.density[k]).amax() < 1e-6 * scale);
        }
    }

    #[test]
    fn superposition() {
        let g = case_grid();
        let op = build_operator(&case_kernels(2).unwrap(), &g, BoundaryPolicy::Drop, false).unwrap();
        let ic1 = initial_condition(InitialCondition::Monodisperse, &g, 1.0).unwrap();
        let ic2 = initial_condition(InitialCondition::Polydisperse { v0: 1.0, w0: 1.0 }, &g, 1.0).unwrap();
        let t = [0.0, 0.5, 1.0];
        let s1 = simulate(&op, &ic1, &t, Backend::Dopri5 { rel_tol: 1e-10 }).unwrap();
        let s2 = simulate(&op, &ic2, &t, Backend::Dopri5 { rel_tol: 1e-10 }).unwrap();
        let mix = &ic1 * 2.0 + &ic2 * 3.0;
        let s = simulate(&op, &mix, &t, Backend::Dopri5 { rel_tol: 1e-10 }).unwrap();
        for k in 0..3 {
            let lin = &s1.density[k] * 2.0 + &s2.density[k] * 3.0;
            assert!((&s.density[k] - &lin).amax() <= 1e-6 * lin.amax());
        }
    }

    #[test]
    fn case6_moments_are_exact_products() {
        let setup = CaseSetup::standard(6).unwrap();
        let times = setup.uniform_times(5).unwrap();
        let op = build_operator(
            &case_kernels(6).unwrap(),
            &setup.output_grid().unwrap(),
            BoundaryPolicy::AssignToEdge,
            false,
        )
        .unwrap();
        let g = setup.output_grid().unwrap();
        let ic = initial_condition(setup.ic, &g, 1.0).unwrap();
        let s = simulate(&op, &ic, &times, Backend::default()).unwrap();
        let m00 = moment(&s, 0, 0);
        for (t, m) in times.iter().zip(&m00) {
            assert!((m / m00[0] - (0.75 * t).exp()).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn packet_split_preserves_moments(v in 0.1f64..5.0, w in 0.1f64..5.0) {
            let g = case_grid();
            let parts = redistribute_packet(&g, v, w, BoundaryPolicy::Drop);
            let mut mom = [0.0; 4];
            for (i, j, a) in parts {
                let (pv, pw) = (g.v()[i], g.w()[j]);
                mom[0] += a;
                mom[1] += a * pv;
                mom[2] += a * pw;
                mom[3] += a * pv * pw;
            }
            prop_assert!((mom[0] - 1.0).abs() < 1e-12);
            prop_assert!((mom[1] - v).abs() < 1e-12 * v.max(1.0));
            prop_assert!((mom[2] - w).abs() < 1e-12 * w.max(1.0));
            prop_assert!((mom[3] - v * w).abs() < 1e-11 * (v * w).max(1.0));
        }

        #[test]
        fn counts_stay_nonnegative(case in 1u8..=5, n0 in 0.1f64..10.0) {
            let setup = CaseSetup { n0, guard: 0, ..CaseSetup::standard(case).unwrap() };
            let s = generate_case(&setup, &[0.0, 0.7, 1.5]).unwrap();
            for d in &s.density {
                prop_assert!(d.min() >= -1e-12 * d.amax());
            }
        }
    }
}

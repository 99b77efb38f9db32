//! Pivot meshes, snapshot storage, noise injection, temporal subsampling and
//! the on-disk snapshot format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain violation: smallest pivot {smallest:e} lies below the lower edge {lower:e}")]
    DomainViolation { smallest: f64, lower: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parse error in {file} at line {line}, field {field}: {msg}")]
    Parse {
        file: String,
        line: u64,
        field: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Spacing {
    GeometricByCount,
    GeometricRatio { ratio: f64 },
}

/// Ordered positive pivots along one internal coordinate.
///
/// `lower_edge`/`upper_edge` are the quadrature limits (first and last pivot).
/// `admissible_lower` keeps the requested domain floor, which for
/// ratio-anchored meshes may sit below the smallest pivot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pivots: Vec<f64>,
    spacing: Spacing,
    lower_edge: f64,
    upper_edge: f64,
    admissible_lower: f64,
}

pub fn make_grid(lower: f64, upper: f64, count: usize, spacing: Spacing) -> Result<Grid1D> {
    if !(lower > 0.0 && upper > lower && upper.is_finite()) {
        return Err(GridError::InvalidArgument(format!(
            "need 0 < lower < upper, got lower={lower}, upper={upper}"
        )));
    }
    if count < 2 {
        return Err(GridError::InvalidArgument(format!(
            "need at least 2 pivots, got {count}"
        )));
    }
    let pivots = match spacing {
        Spacing::GeometricByCount => {
            let step = (upper / lower).ln() / (count - 1) as f64;
            let mut p: Vec<f64> = (0..count).map(|i| lower * (step * i as f64).exp()).collect();
            p[0] = lower;
            p[count - 1] = upper;
            p
        }
        Spacing::GeometricRatio { ratio } => {
            if !(ratio > 1.0 && ratio.is_finite()) {
                return Err(GridError::InvalidArgument(format!("ratio must exceed 1, got {ratio}")));
            }
            let mut p = vec![0.0; count];
            p[count - 1] = upper;
            for i in (0..count - 1).rev() {
                p[i] = p[i + 1] / ratio;
            }
            if p[0] < lower {
                return Err(GridError::DomainViolation { smallest: p[0], lower });
            }
            p
        }
    };
    Ok(Grid1D {
        lower_edge: pivots[0],
        upper_edge: pivots[count - 1],
        pivots,
        spacing,
        admissible_lower: lower,
    })
}

impl Grid1D {
    /// Builds a grid from explicit pivots, checking the spacing claim.
    pub fn from_pivots(pivots: Vec<f64>, spacing: Spacing, admissible_lower: f64) -> Result<Self> {
        if pivots.len() < 2 {
            return Err(GridError::InvalidArgument("need at least 2 pivots".into()));
        }
        if pivots[0] <= 0.0 || pivots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GridError::InvalidArgument(
                "pivots must be positive and strictly increasing".into(),
            ));
        }
        let r0 = pivots[1] / pivots[0];
        let expected = match spacing {
            Spacing::GeometricByCount => r0,
            Spacing::GeometricRatio { ratio } => ratio,
        };
        if pivots.windows(2).any(|w| ((w[1] / w[0]) / expected - 1.0).abs() > 1e-9) {
            return Err(GridError::InvalidArgument("pivot ratios are not constant".into()));
        }
        let n = pivots.len();
        Ok(Self {
            lower_edge: pivots[0],
            upper_edge: pivots[n - 1],
            admissible_lower: admissible_lower.min(pivots[0]),
            pivots,
            spacing,
        })
    }

    pub fn pivots(&self) -> &[f64] {
        &self.pivots
    }

    pub fn len(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivots.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn lower_edge(&self) -> f64 {
        self.lower_edge
    }

    pub fn upper_edge(&self) -> f64 {
        self.upper_edge
    }

    pub fn admissible_lower(&self) -> f64 {
        self.admissible_lower
    }

    /// Mean geometric ratio between neighbouring pivots.
    pub fn ratio(&self) -> f64 {
        (self.upper_edge / self.lower_edge).powf(1.0 / (self.len() - 1) as f64)
    }

    /// Trapezoid weights on the (non-uniform) pivots.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        trapezoid_weights(&self.pivots)
    }

    /// Same ratio, `extra` additional pivots below the current smallest one.
    pub fn extend_below(&self, extra: usize) -> Grid1D {
        let r = match self.spacing {
            Spacing::GeometricRatio { ratio } => ratio,
            Spacing::GeometricByCount => self.ratio(),
        };
        let mut p = Vec::with_capacity(self.len() + extra);
        for k in (1..=extra).rev() {
            p.push(self.pivots[0] / r.powi(k as i32));
        }
        p.extend_from_slice(&self.pivots);
        Grid1D {
            lower_edge: p[0],
            upper_edge: self.upper_edge,
            admissible_lower: self.admissible_lower.min(p[0]),
            pivots: p,
            spacing: self.spacing,
        }
    }

    /// Index offset `d` such that `pivot[i] / theta == pivot[i + d]`, if the
    /// grid is ratio-anchored with a compatible ratio.
    pub fn shift_for(&self, theta: f64) -> Option<usize> {
        if theta == 1.0 {
            return Some(0);
        }
        let ratio = match self.spacing {
            Spacing::GeometricRatio { ratio } => ratio,
            Spacing::GeometricByCount => self.ratio(),
        };
        let d = (1.0 / theta).ln() / ratio.ln();
        let k = d.round();
        if k >= 1.0 && (d - k).abs() < 1e-9 {
            Some(k as usize)
        } else {
            None
        }
    }
}

pub fn trapezoid_weights(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = 0.5 * (p[i + 1] - p[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Tensor-product mesh over the two internal coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub v_axis: Grid1D,
    pub w_axis: Grid1D,
    quad_v: Vec<f64>,
    quad_w: Vec<f64>,
}

impl Grid2D {
    pub fn new(v_axis: Grid1D, w_axis: Grid1D) -> Self {
        let quad_v = v_axis.trapezoid_weights();
        let quad_w = w_axis.trapezoid_weights();
        Self {
            v_axis,
            w_axis,
            quad_v,
            quad_w,
        }
    }

    pub fn square(axis: Grid1D) -> Self {
        Self::new(axis.clone(), axis)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.v_axis.len(), self.w_axis.len())
    }

    pub fn v(&self) -> &[f64] {
        self.v_axis.pivots()
    }

    pub fn w(&self) -> &[f64] {
        self.w_axis.pivots()
    }

    pub fn quad_v(&self) -> &[f64] {
        &self.quad_v
    }

    pub fn quad_w(&self) -> &[f64] {
        &self.quad_w
    }

    /// Quadrature weight of cell (i, j).
    pub fn cell_weight(&self, i: usize, j: usize) -> f64 {
        self.quad_v[i] * self.quad_w[j]
    }

    /// Cell weights as an x×y matrix.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let (x, y) = self.shape();
        DMatrix::from_fn(x, y, |i, j| self.cell_weight(i, j))
    }

    /// Tensor trapezoid of v^p w^q f over the mesh.
    pub fn integrate(&self, f: &DMatrix<f64>, p: i32, q: i32) -> f64 {
        let (v, w) = (self.v(), self.w());
        let mut s = 0.0;
        for i in 0..v.len() {
            let vp = v[i].powi(p) * self.quad_v[i];
            for j in 0..w.len() {
                s += vp * w[j].powi(q) * self.quad_w[j] * f[(i, j)];
            }
        }
        s
    }

    /// Hash-friendly fingerprint of the pivots.
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        for p in self.v().iter().chain(self.w()) {
            s.push_str(&format!("{:.16e};", p));
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub case_id: Option<u8>,
    pub seed: Option<u64>,
    pub noise_level: f64,
    /// Standard deviation actually used for the added noise.
    pub noise_sigma: f64,
    pub params: BTreeMap<String, serde_json::Value>,
}

/// Number density n(v_i, w_j, t_k) on a mesh, one x×y matrix per time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    pub grid: Grid2D,
    pub times: Vec<f64>,
    pub density: Vec<DMatrix<f64>>,
    pub meta: SeriesMeta,
}

impl SnapshotSeries {
    pub fn new(grid: Grid2D, times: Vec<f64>, density: Vec<DMatrix<f64>>, meta: SeriesMeta) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GridError::InvalidArgument(
                "times must be non-empty and strictly increasing".into(),
            ));
        }
        if density.len() != times.len() {
            return Err(GridError::DimensionMismatch(format!(
                "{} density slices for {} times",
                density.len(),
                times.len()
            )));
        }
        let shape = grid.shape();
        if let Some(d) = density.iter().find(|d| d.shape() != shape) {
            return Err(GridError::DimensionMismatch(format!(
                "density slice {:?} does not match grid {:?}",
                d.shape(),
                shape
            )));
        }
        Ok(Self {
            grid,
            times,
            density,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Time step if the samples are uniform to relative `tol`.
    pub fn uniform_dt(&self, tol: f64) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let dt = (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64;
        self.times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= tol * dt)
            .then_some(dt)
    }

    pub fn moment(&self, p: i32, q: i32) -> Vec<f64> {
        self.density.iter().map(|d| self.grid.integrate(d, p, q)).collect()
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.density.iter().flat_map(|d| d.iter().copied())
    }
}

/// Gaussian noise with sigma = level × population std of the whole clean tensor.
pub fn add_noise(series: &SnapshotSeries, level: f64, seed: u64) -> Result<SnapshotSeries> {
    if !(level >= 0.0) {
        return Err(GridError::InvalidArgument(format!(
            "noise level must be >= 0, got {level}"
        )));
    }
    let mut out = series.clone();
    if level == 0.0 {
        return Ok(out);
    }
    let count = series.values().count() as f64;
    let mean = series.values().sum::<f64>() / count;
    let var = series.values().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
    let sigma = level * var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal =
        Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| GridError::InvalidArgument(e.to_string()))?;
    for d in out.density.iter_mut() {
        for x in d.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    out.meta.noise_level = level;
    out.meta.noise_sigma = sigma;
    out.meta.seed = Some(seed);
    out.meta.params.insert(
        "noise_scale".into(),
        serde_json::json!("level * population std of clean tensor"),
    );
    Ok(out)
}

/// Keeps `k` snapshots uniformly spaced by index, endpoints included.
pub fn subsample_time(series: &SnapshotSeries, k: usize) -> Result<SnapshotSeries> {
    let z = series.len();
    if k < 2 || k > z {
        return Err(GridError::InvalidArgument(format!("need 2 <= k <= {z}, got {k}")));
    }
    let idx: Vec<usize> = (0..k)
        .map(|i| ((i * (z - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect();
    let mut out = series.clone();
    out.times = idx.iter().map(|&i| series.times[i]).collect();
    out.density = idx.iter().map(|&i| series.density[i].clone()).collect();
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    shape: [usize; 3],
    v_spacing: Spacing,
    w_spacing: Spacing,
    v_admissible_lower: f64,
    w_admissible_lower: f64,
    #[serde(flatten)]
    meta: SeriesMeta,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GridError + '_ {
    move |source| GridError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt(x: f64) -> String {
    format!("{:.16e}", x)
}

fn write_column(path: &Path, values: &[f64]) -> Result<()> {
    let mut s = String::new();
    for v in values {
        s.push_str(&fmt(*v));
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut s = String::with_capacity(m.len() * 24);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt(m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GridError::Parse {
            file: file.clone(),
            line: 0,
            field: 0,
            msg: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| GridError::Parse {
            file: file.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            field: 0,
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec
            .iter()
            .enumerate()
            .map(|(f, s)| {
                s.parse::<f64>().map_err(|e| GridError::Parse {
                    file: file.clone(),
                    line,
                    field: f + 1,
                    msg: format!("{e}: {s:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GridError::Parse {
            file,
            line: 1,
            field: 0,
            msg: "file is empty".into(),
        });
    }
    Ok(rows)
}

fn read_column(path: &Path) -> Result<Vec<f64>> {
    let rows = read_rows(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() == 1 {
                Ok(r[0])
            } else {
                Err(GridError::Parse {
                    file: path.display().to_string(),
                    line: i as u64 + 1,
                    field: r.len(),
                    msg: "expected one value per line".into(),
                })
            }
        })
        .collect()
}

pub fn read_matrix_csv(path: &Path, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    let rows = read_rows(path)?;
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(GridError::DimensionMismatch(format!(
            "{} holds {} rows (widths {:?}), expected {}x{}",
            path.display(),
            rows.len(),
            rows.iter().map(|r| r.len()).collect::<std::collections::BTreeSet<_>>(),
            nrows,
            ncols
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Writes `grid_v.csv`, `grid_w.csv`, `times.csv`, `density_t<k>.csv`, `meta.json`.
pub fn write_series(series: &SnapshotSeries, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_column(&dir.join("grid_v.csv"), series.grid.v())?;
    write_column(&dir.join("grid_w.csv"), series.grid.w())?;
    write_column(&dir.join("times.csv"), &series.times)?;
    for (k, d) in series.density.iter().enumerate() {
        write_matrix_csv(&dir.join(format!("density_t{k}.csv")), d)?;
    }
    let (x, y) = series.grid.shape();
    let meta = MetaFile {
        shape: [x, y, series.len()],
        v_spacing: series.grid.v_axis.spacing(),
        w_spacing: series.grid.w_axis.spacing(),
        v_admissible_lower: series.grid.v_axis.admissible_lower(),
        w_admissible_lower: series.grid.w_axis.admissible_lower(),
        meta: series.meta.clone(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_series(dir: &Path) -> Result<SnapshotSeries> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|e| GridError::Parse {
        file: path.display().to_string(),
        line: e.line() as u64,
        field: e.column(),
        msg: e.to_string(),
    })?;
    let v = read_column(&dir.join("grid_v.csv"))?;
    let w = read_column(&dir.join("grid_w.csv"))?;
    let times = read_column(&dir.join("times.csv"))?;
    let [x, y, z] = meta.shape;
    if v.len() != x || w.len() != y || times.len() != z {
        return Err(GridError::DimensionMismatch(format!(
            "meta.json declares {x}x{y}x{z}, files hold {}x{}x{}",
            v.len(),
            w.len(),
            times.len()
        )));
    }
    let grid = Grid2D::new(
        Grid1D::from_pivots(v, meta.v_spacing, meta.v_admissible_lower)?,
        Grid1D::from_pivots(w, meta.w_spacing, meta.w_admissible_lower)?,
    );
    let density = (0..z)
        .map(|k| read_matrix_csv(&dir.join(format!("density_t{k}.csv")), x, y))
        .collect::<Result<Vec<_>>>()?;
    SnapshotSeries::new(grid, times, density, meta.meta)
}

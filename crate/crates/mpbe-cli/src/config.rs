//! Pipeline configuration, stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use mpbe::ensemble::Aggregation;
use mpbe::library::default_exponents;
use mpbe::selection_metrics::CostWeights;
use mpbe::sparse_regression::default_lambda_grid;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds noise and bootstrap resampling.
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub dmd: DmdConfig,
    pub library: LibraryConfig,
    pub regression: RegressionConfig,
    pub ensemble: EnsembleConfig,
    pub selection: SelectionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Benchmark case 1..=6. Required unless `input` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<u8>,
    /// Directory holding a snapshot file set to load instead of simulating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    pub timepoints: usize,
    pub noise: f64,
}

/// Overrides of the case mesh; the spacing family stays the case's own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DmdSource {
    /// Noise-free simulation of the case at `snapshots` uniform times.
    Clean,
    /// The data being identified, noise included.
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmdConfig {
    pub rank: usize,
    pub energy_target: f64,
    pub snapshots: usize,
    pub source: DmdSource,
    pub dispersion_threshold: f64,
    pub dominance: f64,
    pub aspect_bin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LibraryChoice {
    PreDmd,
    Advice,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryConfig {
    pub mode: LibraryChoice,
    pub exponents: Vec<i32>,
    /// `terms.json` manifest for explicit mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<PathBuf>,
    /// `dmd_advice.json` that replaces the computed advice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advice: Option<PathBuf>,
    pub interpolate: bool,
    pub export_theta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub lambda_grid: Vec<f64>,
    pub eps: f64,
    pub row_filter_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint_subsample: Option<f64>,
    pub step_tol: f64,
    pub constraint_tol: f64,
    pub max_iter: usize,
    /// Threshold growth factor applied when the constraint set is infeasible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relax_factor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ensembling {
    /// Single cb-STLS fit per λ on all rows.
    None,
    Bagging,
    Bragging,
}

impl Ensembling {
    pub fn aggregation(self) -> Option<Aggregation> {
        match self {
            Ensembling::None => None,
            Ensembling::Bagging => Some(Aggregation::Bagging),
            Ensembling::Bragging => Some(Aggregation::Bragging),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub aggregate: Ensembling,
    pub bootstraps: usize,
    pub ip_min: f64,
    pub cov_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub weights: CostWeights,
    /// Fraction of rows withheld from fitting and used for scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub cases: Vec<u8>,
    pub timepoints: Vec<usize>,
    pub noise: Vec<f64>,
    pub ensembling: Vec<Ensembling>,
    pub libraries: Vec<LibraryChoice>,
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            data: DataConfig {
                case: Some(1),
                input: None,
                grid: None,
                t_end: None,
                timepoints: 10,
                noise: 0.0,
            },
            dmd: DmdConfig {
                rank: 10,
                energy_target: 0.99,
                snapshots: 25,
                source: DmdSource::Clean,
                dispersion_threshold: 0.05,
                dominance: 0.5,
                aspect_bin: 1.0,
            },
            library: LibraryConfig {
                mode: LibraryChoice::Advice,
                exponents: default_exponents(),
                terms: None,
                advice: None,
                interpolate: false,
                export_theta: false,
            },
            regression: RegressionConfig {
                lambda_grid: default_lambda_grid(),
                eps: 1e-4,
                row_filter_threshold: 0.1,
                constraint_subsample: None,
                step_tol: 1e-4,
                constraint_tol: 1e-4,
                max_iter: 1000,
                relax_factor: Some(4.0),
            },
            ensemble: EnsembleConfig {
                aggregate: Ensembling::Bagging,
                bootstraps: 100,
                ip_min: 0.65,
                cov_max: 1.0,
            },
            selection: SelectionConfig {
                weights: CostWeights::default(),
                holdout: None,
            },
            sweep: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn finite_pos(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be a positive finite number, got {x}")))
    }
}

fn fraction(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in (0, 1), got {x}")))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| CliError::io(path, e))
    }

    /// SHA-256 of the canonical TOML, hex encoded. The output directory is
    /// excluded so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bootstrap_seed(&self) -> u64 {
        // keep the resampling stream apart from the noise stream
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(invalid("seed must fit a signed 64-bit integer"));
        }
        let d = &self.data;
        match (d.case, &d.input) {
            (None, None) => return Err(invalid("data needs a case or an input directory")),
            (Some(c), _) if !(1..=6).contains(&c) => return Err(invalid(format!("case must be 1..=6, got {c}"))),
            _ => {}
        }
        if d.input.is_none() && d.timepoints < 3 {
            return Err(invalid(format!("timepoints must be at least 3, got {}", d.timepoints)));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(invalid(format!("noise must be >= 0, got {}", d.noise)));
        }
        if let Some(t) = d.t_end {
            finite_pos("t_end", t)?;
        }
        if let Some(g) = &d.grid {
            finite_pos("grid.lower", g.lower)?;
            if !(g.upper > g.lower && g.upper.is_finite()) {
                return Err(invalid("grid.upper must exceed grid.lower"));
            }
            if g.count < 2 {
                return Err(invalid("grid.count must be at least 2"));
            }
        }
        let m = &self.dmd;
        if m.rank == 0 {
            return Err(invalid("dmd.rank must be positive"));
        }
        if !(m.energy_target > 0.0 && m.energy_target <= 1.0) {
            return Err(invalid("dmd.energy_target must lie in (0, 1]"));
        }
        if m.snapshots < 3 {
            return Err(invalid("dmd.snapshots must be at least 3"));
        }
        if m.source == DmdSource::Clean && d.case.is_none() {
            return Err(invalid("dmd.source = clean needs a benchmark case"));
        }
        finite_pos("dmd.dispersion_threshold", m.dispersion_threshold)?;
        fraction("dmd.dominance", m.dominance)?;
        finite_pos("dmd.aspect_bin", m.aspect_bin)?;
        let l = &self.library;
        if l.exponents.is_empty() {
            return Err(invalid("library.exponents is empty"));
        }
        if l.mode == LibraryChoice::Explicit && l.terms.is_none() {
            return Err(invalid("library.mode = explicit needs library.terms"));
        }
        let r = &self.regression;
        if r.lambda_grid.is_empty() {
            return Err(invalid("regression.lambda_grid is empty"));
        }
        for &x in &r.lambda_grid {
            finite_pos("lambda", x)?;
        }
        finite_pos("regression.eps", r.eps)?;
        if !(r.row_filter_threshold >= 0.0 && r.row_filter_threshold.is_finite()) {
            return Err(invalid("regression.row_filter_threshold must be >= 0"));
        }
        if let Some(f) = r.constraint_subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid("regression.constraint_subsample must lie in (0, 1]"));
            }
        }
        finite_pos("regression.step_tol", r.step_tol)?;
        finite_pos("regression.constraint_tol", r.constraint_tol)?;
        if r.max_iter == 0 {
            return Err(invalid("regression.max_iter must be positive"));
        }
        if let Some(f) = r.relax_factor {
            if !(f > 1.0 && f.is_finite()) {
                return Err(invalid("regression.relax_factor must exceed 1"));
            }
        }
        let e = &self.ensemble;
        if e.aggregate != Ensembling::None && e.bootstraps == 0 {
            return Err(invalid("ensemble.bootstraps must be positive"));
        }
        if !(0.0..=1.0).contains(&e.ip_min) {
            return Err(invalid("ensemble.ip_min must lie in [0, 1]"));
        }
        if !(e.cov_max >= 0.0) {
            return Err(invalid("ensemble.cov_max must be >= 0"));
        }
        let w = &self.selection.weights;
        for (name, x) in [("fit", w.fit), ("sparsity", w.sparsity), ("structure", w.structure)] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(invalid(format!("selection.weights.{name} must be >= 0")));
            }
        }
        if let Some(h) = self.selection.holdout {
            fraction("selection.holdout", h)?;
        }
        if let Some(s) = &self.sweep {
            if s.cases.is_empty()
                || s.timepoints.is_empty()
                || s.noise.is_empty()
                || s.ensembling.is_empty()
                || s.libraries.is_empty()
                || s.seeds.is_empty()
            {
                return Err(invalid("every sweep axis needs at least one value"));
            }
            if s.seeds.iter().any(|&x| i64::try_from(x).is_err()) {
                return Err(invalid("sweep seeds must fit a signed 64-bit integer"));
            }
            if s.cases.iter().any(|c| !(1..=6).contains(c)) {
                return Err(invalid("sweep cases must be 1..=6"));
            }
            if s.timepoints.iter().any(|&t| t < 3) {
                return Err(invalid("sweep timepoints must be at least 3"));
            }
            if s.noise.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(invalid("sweep noise levels must be >= 0"));
            }
            if s.libraries.contains(&LibraryChoice::Explicit) && l.terms.is_none() {
                return Err(invalid("explicit sweep library needs library.terms"));
            }
        }
        Ok(())
    }
}

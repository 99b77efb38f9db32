//! Grid of pipeline runs scored against the benchmark truth.

use std::collections::HashMap;
use std::path::Path;

use mpbe::dmd::LibraryAdvice;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{seal, write_text};
use crate::config::{DmdSource, Ensembling, LibraryChoice, PipelineConfig, SweepAxes};
use crate::error::{CliError, Result};
use crate::pipeline::{dmd_input, execute, observed_series, run_dmd};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub case: u8,
    pub timepoints: usize,
    pub noise: f64,
    pub ensembling: Ensembling,
    pub library: LibraryChoice,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub cell: Cell,
    pub noise_seed: u64,
    pub bootstrap_seed: u64,
    pub status: String,
    pub library_size: Option<usize>,
    pub truth_in_library: Option<bool>,
    pub lambda: Option<f64>,
    pub nnz: Option<usize>,
    pub success_rate: Option<f64>,
    pub coefficient_error: Option<f64>,
    pub cbstls_seconds: Option<f64>,
    pub model: String,
}

pub fn cells(axes: &SweepAxes) -> Vec<Cell> {
    let mut out = Vec::new();
    for &case in &axes.cases {
        for &library in &axes.libraries {
            for &timepoints in &axes.timepoints {
                for &noise in &axes.noise {
                    for &ensembling in &axes.ensembling {
                        for &seed in &axes.seeds {
                            out.push(Cell {
                                case,
                                timepoints,
                                noise,
                                ensembling,
                                library,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn cell_config(base: &PipelineConfig, cell: &Cell) -> PipelineConfig {
    let mut cfg = base.clone();
    cfg.sweep = None;
    cfg.seed = cell.seed;
    cfg.data.case = Some(cell.case);
    cfg.data.input = None;
    cfg.data.timepoints = cell.timepoints;
    cfg.data.noise = cell.noise;
    cfg.ensemble.aggregate = cell.ensembling;
    cfg.library.mode = cell.library;
    cfg
}

/// Advice per case from clean data; cells share it since it does not depend
/// on noise, sampling or seed.
fn clean_advice(base: &PipelineConfig, cases: &[u8]) -> Result<HashMap<u8, LibraryAdvice>> {
    let mut out = HashMap::new();
    for &c in cases {
        let mut cfg = base.clone();
        cfg.data.case = Some(c);
        cfg.data.input = None;
        cfg.data.noise = 0.0;
        let input = dmd_input(&cfg, &observed_series(&cfg)?)?;
        out.insert(c, run_dmd(&cfg, &input, None)?.advice);
    }
    Ok(out)
}

fn run_cell(base: &PipelineConfig, cell: &Cell, advice: &HashMap<u8, LibraryAdvice>) -> CellResult {
    let cfg = cell_config(base, cell);
    let mut res = CellResult {
        cell: cell.clone(),
        noise_seed: cfg.seed,
        bootstrap_seed: cfg.bootstrap_seed(),
        status: "ok".into(),
        library_size: None,
        truth_in_library: None,
        lambda: None,
        nnz: None,
        success_rate: None,
        coefficient_error: None,
        cbstls_seconds: None,
        model: String::new(),
    };
    let given = (cfg.library.mode == LibraryChoice::Advice && cfg.library.advice.is_none())
        .then(|| advice.get(&cell.case).cloned())
        .flatten();
    match execute(&cfg, given, None) {
        Ok(run) => {
            let s = run.summary;
            res.library_size = Some(s.library_size);
            res.truth_in_library = s.truth_in_library;
            res.lambda = s.selected_lambda;
            res.nnz = run.report.as_ref().map(|r| r.terms.len());
            res.success_rate = s.success_rate;
            res.coefficient_error = s.coefficient_error;
            res.cbstls_seconds = Some(s.seconds.cbstls);
            res.model = s
                .model
                .iter()
                .map(|t| format!("{}={:.6}", t.name, t.coefficient))
                .collect::<Vec<_>>()
                .join(" ");
            if let Some(msg) = s.no_model {
                res.status = format!("no-model: {msg}");
            } else if s.truth_in_library == Some(false) {
                res.status = "truth-not-in-library".into();
            }
        }
        Err(e) => res.status = format!("error: {e}"),
    }
    res
}

/// Runs every cell. Cells run one after another unless `parallel_cells`,
/// so the reported cb-STLS wall times are not inflated by contention.
pub fn run_sweep(base: &PipelineConfig, axes: &SweepAxes, parallel_cells: bool) -> Result<Vec<CellResult>> {
    let mut probe = base.clone();
    probe.sweep = Some(axes.clone());
    probe.validate()?;
    let needs_advice = axes.libraries.contains(&LibraryChoice::Advice)
        && base.library.advice.is_none()
        && base.dmd.source == DmdSource::Clean;
    let advice = if needs_advice {
        clean_advice(base, &axes.cases)?
    } else {
        HashMap::new()
    };
    let all = cells(axes);
    Ok(if parallel_cells {
        all.par_iter().map(|c| run_cell(base, c, &advice)).collect()
    } else {
        all.iter().map(|c| run_cell(base, c, &advice)).collect()
    })
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

fn kebab<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn write_sweep_csv(path: &Path, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    w.write_record([
        "case",
        "timepoints",
        "noise",
        "ensembling",
        "library",
        "seed",
        "noise_seed",
        "bootstrap_seed",
        "status",
        "library_size",
        "truth_in_library",
        "lambda",
        "nnz",
        "success_rate",
        "coefficient_error",
        "cbstls_seconds",
        "model",
    ])
    .map_err(io)?;
    for r in results {
        let c = &r.cell;
        w.write_record([
            c.case.to_string(),
            c.timepoints.to_string(),
            c.noise.to_string(),
            kebab(&c.ensembling),
            kebab(&c.library),
            c.seed.to_string(),
            r.noise_seed.to_string(),
            r.bootstrap_seed.to_string(),
            r.status.clone(),
            opt(&r.library_size),
            opt(&r.truth_in_library),
            opt(&r.lambda),
            opt(&r.nnz),
            opt(&r.success_rate),
            opt(&r.coefficient_error),
            r.cbstls_seconds.map(|s| format!("{s:.6}")).unwrap_or_default(),
            r.model.clone(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    write_text(path, &String::from_utf8(bytes).expect("utf8"))
}

pub fn write_sweep(dir: &Path, base: &PipelineConfig, axes: &SweepAxes, results: &[CellResult]) -> Result<()> {
    let mut cfg = base.clone();
    cfg.sweep = Some(axes.clone());
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    cfg.save(&dir.join("config.toml"))?;
    write_sweep_csv(&dir.join("sweep.csv"), results)?;
    seal(dir, &cfg.hash())
}

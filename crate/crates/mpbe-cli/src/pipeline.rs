//! generate → noise → DMD advice → library → per-λ identification → screening.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mpbe::dmd::{
    dmd_report, dmd_series, spectral_diagnostics, DiagnosticsConfig, DmdResult, LibraryAdvice, SpectralDiagnostics,
};
use mpbe::ensemble::{aggregate, bootstrap_fit, BootstrapOptions, EnsembleResult};
use mpbe::forward_solver::{generate_case, write_moment_report, CaseSetup};
use mpbe::griddata::{add_noise, read_series, write_series, SnapshotSeries, Spacing};
use mpbe::library::{
    advised_library, assemble_ndot, load_terms, save_terms, standard_library, true_coefficients, CandidateLibrary,
    LibraryMode, Side, TermDescriptor,
};
use mpbe::selection_metrics::{
    coefficient_error, model_cost, select_model, success_rate, support_of, Candidate, CostWeights, ModelReport,
    ModelScore, ReportTerm, Selected,
};
use mpbe::sparse_regression::{
    build_constraints, cb_stls, ConstraintOptions, RegressionError, SolverOptions, SparseSolution,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{grid_hash, read_json, seal, write_json, write_text};
use crate::config::{DmdSource, LibraryChoice, PipelineConfig};
use crate::error::{CliError, Result, Stage, StageExt};

/// The case mesh and window with any config overrides applied.
pub fn case_setup(cfg: &PipelineConfig) -> Result<Option<CaseSetup>> {
    let Some(case) = cfg.data.case else {
        return Ok(None);
    };
    let mut setup = CaseSetup::standard(case).stage(Stage::Generate)?;
    if let Some(g) = &cfg.data.grid {
        setup.lower = g.lower;
        setup.upper = g.upper;
        setup.count = g.count;
        if let Spacing::GeometricRatio { .. } = setup.spacing {
            setup.spacing = Spacing::GeometricByCount;
        }
    }
    if let Some(t) = cfg.data.t_end {
        setup.t_end = t;
    }
    Ok(Some(setup))
}

fn clean_series(setup: &CaseSetup, count: usize) -> Result<SnapshotSeries> {
    let times = setup.uniform_times(count).stage(Stage::Generate)?;
    generate_case(setup, &times).stage(Stage::Generate)
}

/// Data to identify from: loaded or simulated, then noised.
pub fn observed_series(cfg: &PipelineConfig) -> Result<SnapshotSeries> {
    let clean = match &cfg.data.input {
        Some(dir) => read_series(dir).stage(Stage::Generate)?,
        None => {
            let setup = case_setup(cfg)?.expect("validated: case present");
            clean_series(&setup, cfg.data.timepoints)?
        }
    };
    add_noise(&clean, cfg.data.noise, cfg.seed).stage(Stage::Generate)
}

pub fn write_data(series: &SnapshotSeries, dir: &Path, hash: &str) -> Result<()> {
    write_series(series, dir).stage(Stage::Generate)?;
    write_moment_report(series, &dir.join("moments.csv")).stage(Stage::Generate)?;
    seal(dir, hash)
}

pub struct DmdOutcome {
    pub result: DmdResult,
    pub diagnostics: SpectralDiagnostics,
    pub advice: LibraryAdvice,
}

pub fn diagnostics_config(cfg: &PipelineConfig) -> DiagnosticsConfig {
    DiagnosticsConfig {
        dispersion_threshold: cfg.dmd.dispersion_threshold,
        dominance: cfg.dmd.dominance,
        aspect_bin: cfg.dmd.aspect_bin,
        ..Default::default()
    }
}

/// Series the DMD step looks at.
pub fn dmd_input(cfg: &PipelineConfig, observed: &SnapshotSeries) -> Result<SnapshotSeries> {
    match cfg.dmd.source {
        DmdSource::Observed => Ok(observed.clone()),
        DmdSource::Clean => {
            let setup = case_setup(cfg)?.expect("validated: clean source has a case");
            clean_series(&setup, cfg.dmd.snapshots)
        }
    }
}

pub fn run_dmd(cfg: &PipelineConfig, series: &SnapshotSeries, dir: Option<&Path>) -> Result<DmdOutcome> {
    let dcfg = diagnostics_config(cfg);
    let result = dmd_series(series, cfg.dmd.rank, cfg.dmd.energy_target).stage(Stage::Dmd)?;
    let diagnostics = spectral_diagnostics(&result, &series.grid, &dcfg).stage(Stage::Dmd)?;
    let mut advice = LibraryAdvice::from(&diagnostics);
    advice.dominance = cfg.dmd.dominance;
    if let Some(dir) = dir {
        dmd_report(&result, &diagnostics, &dcfg, &series.times, dir).stage(Stage::Dmd)?;
    }
    Ok(DmdOutcome {
        result,
        diagnostics,
        advice,
    })
}

pub fn load_advice(path: &Path) -> Result<LibraryAdvice> {
    read_json(path)
}

pub fn library_terms(cfg: &PipelineConfig, advice: Option<&LibraryAdvice>) -> Result<Vec<TermDescriptor>> {
    let exps = &cfg.library.exponents;
    match cfg.library.mode {
        LibraryChoice::PreDmd => standard_library(LibraryMode::PreDmd, exps, false).stage(Stage::Library),
        LibraryChoice::Advice => {
            let advice = advice.ok_or_else(|| CliError::Config("advice-driven library without advice".into()))?;
            advised_library(advice, exps).stage(Stage::Library)
        }
        LibraryChoice::Explicit => {
            let path = cfg.library.terms.as_ref().expect("validated: explicit terms path");
            load_terms(path).stage(Stage::Library)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaFit {
    pub lambda: f64,
    pub xi: Vec<f64>,
    #[serde(skip)]
    pub ensemble: Option<EnsembleResult>,
    #[serde(skip)]
    pub direct: Option<SparseSolution>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub fits: Vec<LambdaFit>,
    pub selected: std::result::Result<Selected, String>,
    /// Wall time spent inside cb-STLS (all λ, all replicates).
    pub cbstls_seconds: f64,
    pub holdout_rows: Option<Vec<usize>>,
}

fn split_rows(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5_4a32_d192_ed03);
    let mut hold = rand::seq::index::sample(&mut rng, n, k).into_vec();
    hold.sort_unstable();
    let mut mask = vec![false; n];
    for &r in &hold {
        mask[r] = true;
    }
    ((0..n).filter(|&r| !mask[r]).collect(), hold)
}

pub fn constraint_options(cfg: &PipelineConfig) -> ConstraintOptions {
    ConstraintOptions {
        eps: cfg.regression.eps,
        row_filter_threshold: cfg.regression.row_filter_threshold,
        subsample: cfg.regression.constraint_subsample,
        seed: cfg.seed,
    }
}

pub fn solver_options(cfg: &PipelineConfig) -> SolverOptions {
    SolverOptions {
        step_tol: cfg.regression.step_tol,
        constraint_tol: cfg.regression.constraint_tol,
        max_iter: cfg.regression.max_iter,
        relax_factor: cfg.regression.relax_factor,
    }
}

pub fn identify(
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    cfg: &PipelineConfig,
) -> Result<Identification> {
    let (fit_theta, fit_ndot, holdout_rows) = match cfg.selection.holdout {
        Some(frac) => {
            let (fit, hold) = split_rows(theta.nrows(), frac, cfg.seed);
            (theta.select_rows(&fit), ndot.select_rows(&fit), Some(hold))
        }
        None => (theta.clone(), ndot.clone(), None),
    };
    let copts = constraint_options(cfg);
    let sopts = solver_options(cfg);
    let mut fits = Vec::with_capacity(cfg.regression.lambda_grid.len());
    let mut seconds = 0.0;
    for &lambda in &cfg.regression.lambda_grid {
        let ncols = theta.ncols();
        let start = Instant::now();
        let fit = match cfg.ensemble.aggregate.aggregation() {
            None => {
                let set = build_constraints(&fit_theta, sides, &copts).stage(Stage::Identify)?;
                match cb_stls(&fit_theta, &fit_ndot, sides, lambda, &set, &sopts) {
                    Ok(sol) => LambdaFit {
                        lambda,
                        xi: sol.xi.clone(),
                        ensemble: None,
                        direct: Some(sol),
                        failure: None,
                    },
                    Err(e @ RegressionError::Infeasible) => LambdaFit {
                        lambda,
                        xi: vec![0.0; ncols],
                        ensemble: None,
                        direct: None,
                        failure: Some(e.to_string()),
                    },
                    Err(e) => return Err(e).stage(Stage::Identify),
                }
            }
            Some(mode) => {
                let opts = BootstrapOptions {
                    replicates: cfg.ensemble.bootstraps,
                    master_seed: cfg.bootstrap_seed(),
                    resample: true,
                    constraints: copts,
                    solver: sopts,
                };
                let members = bootstrap_fit(&fit_theta, &fit_ndot, sides, lambda, &opts).stage(Stage::Identify)?;
                let agg =
                    aggregate(&members, mode, cfg.ensemble.ip_min, cfg.ensemble.cov_max).stage(Stage::Identify)?;
                LambdaFit {
                    lambda,
                    xi: agg.aggregate.clone(),
                    failure: (agg.infeasible_members == agg.replicates)
                        .then(|| "every replicate infeasible".to_string()),
                    ensemble: Some(agg),
                    direct: None,
                }
            }
        };
        seconds += start.elapsed().as_secs_f64();
        fits.push(fit);
    }
    let pool: Vec<Candidate> = fits
        .iter()
        .map(|f| Candidate {
            lambda: f.lambda,
            xi: f.xi.clone(),
        })
        .collect();
    let selected = select_model(
        &pool,
        theta,
        ndot,
        sides,
        &cfg.selection.weights,
        holdout_rows.as_deref(),
    )
    .map_err(|e| e.to_string());
    Ok(Identification {
        fits,
        selected,
        cbstls_seconds: seconds,
        holdout_rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthScore {
    pub success_rate: f64,
    pub coefficient_error: f64,
}

/// Success rate and E_c of `xi` against a benchmark case, `None` when the
/// generating terms are not all in the library.
pub fn score_against_truth(case: u8, terms: &[TermDescriptor], xi: &[f64]) -> Result<Option<TruthScore>> {
    let Some(truth) = true_coefficients(case, terms).stage(Stage::Evaluate)? else {
        return Ok(None);
    };
    Ok(Some(TruthScore {
        success_rate: success_rate(&support_of(&truth), &support_of(xi), terms.len()),
        coefficient_error: coefficient_error(&truth, xi).stage(Stage::Evaluate)?,
    }))
}

pub fn model_report(
    cfg: &PipelineConfig,
    grid_hash: &str,
    terms: &[TermDescriptor],
    case: Option<u8>,
    selected: &Selected,
) -> Result<ModelReport> {
    let truth = match case {
        Some(c) => Some(score_against_truth(c, terms, &selected.xi)?),
        None => None,
    };
    Ok(ModelReport {
        config_hash: cfg.hash(),
        grid_hash: grid_hash.to_string(),
        lambda: selected.lambda,
        terms: support_of(&selected.xi)
            .into_iter()
            .map(|k| ReportTerm {
                name: terms[k].name.clone(),
                coefficient: selected.xi[k],
            })
            .collect(),
        score: selected.score.clone(),
        weights: cfg.selection.weights,
        library_size: terms.len(),
        coefficient_error: truth.as_ref().and_then(|t| t.as_ref().map(|t| t.coefficient_error)),
        success_rate: truth.as_ref().and_then(|t| t.as_ref().map(|t| t.success_rate)),
        truth_in_library: truth.as_ref().map(|t| t.is_some()),
    })
}

fn lambda_tag(lambda: f64) -> String {
    format!("{lambda}").replace('.', "p")
}

/// Per-λ ensemble summaries, candidate table and (if any) the model report.
pub fn write_identification(
    dir: &Path,
    cfg: &PipelineConfig,
    lib: &CandidateLibrary,
    ident: &Identification,
    report: Option<&ModelReport>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let names = lib.names();
    let mut table = String::from("lambda,nnz,valid,rss,cost,failure,infeasible_members\n");
    let screened: BTreeMap<usize, &ModelScore> = match &ident.selected {
        Ok(s) => s.screened.iter().map(|(i, sc)| (*i, sc)).collect(),
        Err(_) => BTreeMap::new(),
    };
    for (i, f) in ident.fits.iter().enumerate() {
        if let Some(e) = &f.ensemble {
            let path = dir.join(format!("ensemble_lambda_{}.csv", lambda_tag(f.lambda)));
            e.write_summary(&names, &path).stage(Stage::Identify)?;
        }
        let (nnz, valid, rss, cost) = match screened.get(&i) {
            Some(s) => (
                s.nnz.to_string(),
                s.valid.to_string(),
                format!("{:.10e}", s.rss),
                format!("{:.10e}", s.total),
            ),
            None => ("0".into(), "false".into(), String::new(), String::new()),
        };
        table.push_str(&format!(
            "{},{nnz},{valid},{rss},{cost},{},{}\n",
            f.lambda,
            f.failure.as_deref().unwrap_or(""),
            f.ensemble.as_ref().map(|e| e.infeasible_members).unwrap_or(0)
        ));
    }
    write_text(&dir.join("candidates.csv"), &table)?;
    if let Some(r) = report {
        write_json(&dir.join("model_report.json"), r, &cfg.hash())?;
    }
    seal(dir, &cfg.hash())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTimes {
    pub generate: f64,
    pub dmd: f64,
    pub library: f64,
    pub cbstls: f64,
    pub screening: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub case: Option<u8>,
    pub grid_hash: String,
    pub library_mode: LibraryChoice,
    pub library_size: usize,
    pub advice: Option<LibraryAdvice>,
    pub selected_lambda: Option<f64>,
    pub model: Vec<ReportTerm>,
    pub success_rate: Option<f64>,
    pub coefficient_error: Option<f64>,
    pub truth_in_library: Option<bool>,
    pub no_model: Option<String>,
    pub seconds: StageTimes,
}

/// Everything a run produces in memory; `run_pipeline` writes it out.
pub struct RunResult {
    pub series: SnapshotSeries,
    pub dmd: Option<DmdOutcome>,
    pub library: CandidateLibrary,
    pub identification: Identification,
    pub report: Option<ModelReport>,
    pub summary: PipelineSummary,
}

/// Runs every stage in memory. `advice` short-cuts the DMD stage.
pub fn execute(cfg: &PipelineConfig, advice: Option<LibraryAdvice>, dmd_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let t = Instant::now();
    let series = observed_series(cfg)?;
    let t_generate = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let file_advice = match &cfg.library.advice {
        Some(p) => Some(load_advice(p)?),
        None => None,
    };
    let mut dmd = None;
    let advice = match (advice, file_advice) {
        (_, Some(a)) => Some(a),
        (Some(a), None) => Some(a),
        (None, None) if cfg.library.mode == LibraryChoice::Advice || dmd_dir.is_some() => {
            let input = dmd_input(cfg, &series)?;
            let out = run_dmd(cfg, &input, dmd_dir)?;
            let a = out.advice.clone();
            dmd = Some(out);
            Some(a)
        }
        _ => None,
    };
    let t_dmd = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let terms = library_terms(cfg, advice.as_ref())?;
    let library = CandidateLibrary::build(&series, terms, cfg.library.interpolate).stage(Stage::Library)?;
    let ndot = assemble_ndot(&series).stage(Stage::Library)?;
    let t_library = t.elapsed().as_secs_f64();

    let sides: Vec<Side> = library.terms.iter().map(|t| t.side()).collect();
    let t = Instant::now();
    let identification = identify(&library.theta, &ndot, &sides, cfg)?;
    let t_screen = (t.elapsed().as_secs_f64() - identification.cbstls_seconds).max(0.0);

    let case = cfg.data.case.or(series.meta.case_id);
    let ghash = grid_hash(&series.grid);
    let report = match &identification.selected {
        Ok(sel) => Some(model_report(cfg, &ghash, &library.terms, case, sel)?),
        Err(_) => None,
    };
    let truth_in_library = match case {
        Some(c) => Some(true_coefficients(c, &library.terms).stage(Stage::Evaluate)?.is_some()),
        None => None,
    };
    let summary = PipelineSummary {
        case,
        grid_hash: ghash,
        library_mode: cfg.library.mode,
        library_size: library.ncols(),
        advice: advice.clone(),
        selected_lambda: report.as_ref().map(|r| r.lambda),
        model: report.as_ref().map(|r| r.terms.clone()).unwrap_or_default(),
        success_rate: report.as_ref().and_then(|r| r.success_rate),
        coefficient_error: report.as_ref().and_then(|r| r.coefficient_error),
        truth_in_library,
        no_model: identification.selected.as_ref().err().cloned(),
        seconds: StageTimes {
            generate: t_generate,
            dmd: t_dmd,
            library: t_library,
            cbstls: identification.cbstls_seconds,
            screening: t_screen,
        },
    };
    Ok(RunResult {
        series,
        dmd,
        library,
        identification,
        report,
        summary,
    })
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn dmd(&self) -> PathBuf {
        self.root.join("dmd")
    }
    pub fn library(&self) -> PathBuf {
        self.root.join("library")
    }
    pub fn identify(&self) -> PathBuf {
        self.root.join("identify")
    }
}

pub fn write_library(dir: &Path, cfg: &PipelineConfig, lib: &CandidateLibrary) -> Result<()> {
    if cfg.library.export_theta {
        lib.export(dir).stage(Stage::Library)?;
    } else {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        save_terms(&lib.terms, &dir.join("terms.json")).stage(Stage::Library)?;
    }
    seal(dir, &cfg.hash())
}

/// Full pipeline with artifacts under `cfg.output`. A run that screens no
/// model still writes its artifacts, then reports `NoModel`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output);
    let hash = cfg.hash();
    std::fs::create_dir_all(&layout.root).map_err(|e| CliError::io(&layout.root, e))?;
    cfg.save(&layout.root.join("config.toml"))?;
    let dmd_dir = layout.dmd();
    let run = execute(cfg, None, Some(&dmd_dir))?;
    if dmd_dir.exists() {
        seal(&dmd_dir, &hash)?;
    }
    write_data(&run.series, &layout.data(), &hash)?;
    write_library(&layout.library(), cfg, &run.library)?;
    write_identification(
        &layout.identify(),
        cfg,
        &run.library,
        &run.identification,
        run.report.as_ref(),
    )?;
    write_json(&layout.root.join("summary.json"), &run.summary, &hash)?;
    match &run.summary.no_model {
        Some(msg) => Err(CliError::NoModel(msg.clone())),
        None => Ok(run.summary),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub report_config_hash: String,
    pub grid_hash: String,
    pub score: ModelScore,
    pub success_rate: Option<f64>,
    pub coefficient_error: Option<f64>,
    pub truth_in_library: Option<bool>,
}

/// Re-scores a reported model on a snapshot set over the same mesh.
pub fn evaluate(
    report_path: &Path,
    terms_path: &Path,
    data_dir: &Path,
    case: Option<u8>,
    weights: Option<CostWeights>,
    interpolate: bool,
) -> Result<Evaluation> {
    let report: ModelReport = read_json(report_path)?;
    let series = read_series(data_dir).stage(Stage::Evaluate)?;
    let data_hash = grid_hash(&series.grid);
    if data_hash != report.grid_hash {
        return Err(CliError::GridMismatch {
            report: report.grid_hash,
            data: data_hash,
        });
    }
    let terms = load_terms(terms_path).stage(Stage::Evaluate)?;
    let mut xi = vec![0.0; terms.len()];
    for rt in &report.terms {
        let k = terms
            .iter()
            .position(|t| t.name == rt.name)
            .ok_or_else(|| CliError::Parse {
                path: terms_path.display().to_string(),
                msg: format!("reported term {} is not in the library", rt.name),
            })?;
        xi[k] = rt.coefficient;
    }
    let lib = CandidateLibrary::build(&series, terms, interpolate).stage(Stage::Evaluate)?;
    let ndot = assemble_ndot(&series).stage(Stage::Evaluate)?;
    let sides: Vec<Side> = lib.terms.iter().map(|t| t.side()).collect();
    let w = weights.unwrap_or(report.weights);
    let score = model_cost(&xi, &lib.theta, &ndot, &sides, &w, None).stage(Stage::Evaluate)?;
    let case = case.or(series.meta.case_id);
    let truth = match case {
        Some(c) => Some(score_against_truth(c, &lib.terms, &xi)?),
        None => None,
    };
    Ok(Evaluation {
        report_config_hash: report.config_hash,
        grid_hash: data_hash,
        score,
        success_rate: truth.as_ref().and_then(|t| t.as_ref().map(|t| t.success_rate)),
        coefficient_error: truth.as_ref().and_then(|t| t.as_ref().map(|t| t.coefficient_error)),
        truth_in_library: truth.map(|t| t.is_some()),
    })
}

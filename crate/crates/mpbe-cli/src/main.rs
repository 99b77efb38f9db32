use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpbe_cli::artifacts::{seal, write_json};
use mpbe_cli::config::{DmdSource, Ensembling, LibraryChoice, PipelineConfig, SweepAxes};
use mpbe_cli::error::{CliError, Result};
use mpbe_cli::pipeline::{
    evaluate, execute, observed_series, run_dmd, run_pipeline, write_data, write_identification, write_library, Layout,
};
use mpbe_cli::sweep::{run_sweep, write_sweep};

#[derive(Parser)]
#[command(
    name = "mpbe",
    version,
    about = "Identify two-dimensional breakage population balances from snapshot data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregateArg {
    None,
    Bagging,
    Bragging,
}

impl From<AggregateArg> for Ensembling {
    fn from(a: AggregateArg) -> Self {
        match a {
            AggregateArg::None => Ensembling::None,
            AggregateArg::Bagging => Ensembling::Bagging,
            AggregateArg::Bragging => Ensembling::Bragging,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LibraryArg {
    PreDmd,
    Advice,
    Explicit,
}

impl From<LibraryArg> for LibraryChoice {
    fn from(a: LibraryArg) -> Self {
        match a {
            LibraryArg::PreDmd => LibraryChoice::PreDmd,
            LibraryArg::Advice => LibraryChoice::Advice,
            LibraryArg::Explicit => LibraryChoice::Explicit,
        }
    }
}

/// Flags layered over the config file (or the defaults).
#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    case: Option<u8>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    timepoints: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    bootstraps: Option<usize>,
    #[arg(long, value_enum)]
    aggregate: Option<AggregateArg>,
    #[arg(long)]
    ip_min: Option<f64>,
    #[arg(long)]
    cov_max: Option<f64>,
    #[arg(long, value_enum)]
    library: Option<LibraryArg>,
    /// Snapshot directory to load instead of simulating.
    #[arg(long)]
    data: Option<PathBuf>,
    /// dmd_advice.json overriding the computed advice.
    #[arg(long)]
    advice: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(x) = self.seed {
            c.seed = x;
        }
        if let Some(x) = &self.out {
            c.output = x.clone();
        }
        if let Some(x) = self.case {
            c.data.case = Some(x);
        }
        if let Some(x) = self.noise {
            c.data.noise = x;
        }
        if let Some(x) = self.timepoints {
            c.data.timepoints = x;
        }
        if let Some(x) = self.rank {
            c.dmd.rank = x;
        }
        if let Some(x) = &self.lambda_grid {
            c.regression.lambda_grid = x.clone();
        }
        if let Some(x) = self.bootstraps {
            c.ensemble.bootstraps = x;
        }
        if let Some(x) = self.aggregate {
            c.ensemble.aggregate = x.into();
        }
        if let Some(x) = self.ip_min {
            c.ensemble.ip_min = x;
        }
        if let Some(x) = self.cov_max {
            c.ensemble.cov_max = x;
        }
        if let Some(x) = self.library {
            c.library.mode = x.into();
        }
        if let Some(x) = &self.data {
            c.data.input = Some(x.clone());
            if c.data.case.is_none() {
                c.dmd.source = DmdSource::Observed;
            }
        }
        if let Some(x) = &self.advice {
            c.library.advice = Some(x.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate (or load), add noise, write the snapshot set and moment report.
    Generate(Common),
    /// DMD modes, eigenvalues, traces, diagnostics and library advice.
    DmdReport(Common),
    /// Build the library and run per-λ identification plus screening.
    Identify(Common),
    /// Re-score a model report on a snapshot set over the same mesh.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        terms: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        case: Option<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of cells and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        cases: Option<Vec<u8>>,
        #[arg(long, value_delimiter = ',')]
        timepoints_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        noise_levels: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', value_enum)]
        ensembling: Option<Vec<AggregateArg>>,
        #[arg(long, value_delimiter = ',', value_enum)]
        libraries: Option<Vec<LibraryArg>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        parallel_cells: bool,
    },
    /// Every stage, artifacts under --out.
    Pipeline(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.config()?;
            let series = observed_series(&cfg)?;
            let dir = Layout::new(&cfg.output).data();
            write_data(&series, &dir, &cfg.hash())?;
            eprintln!("wrote {}", dir.display());
        }
        Command::DmdReport(common) => {
            let cfg = common.config()?;
            let observed = observed_series(&cfg)?;
            let input = mpbe_cli::pipeline::dmd_input(&cfg, &observed)?;
            let dir = Layout::new(&cfg.output).dmd();
            let out = run_dmd(&cfg, &input, Some(&dir))?;
            seal(&dir, &cfg.hash())?;
            println!("{}", serde_json::to_string_pretty(&out.advice).expect("json"));
        }
        Command::Identify(common) => {
            let cfg = common.config()?;
            let layout = Layout::new(&cfg.output);
            let dmd_dir = layout.dmd();
            let needs_dmd = cfg.library.mode == LibraryChoice::Advice && cfg.library.advice.is_none();
            let run = execute(&cfg, None, needs_dmd.then_some(dmd_dir.as_path()))?;
            if needs_dmd {
                seal(&dmd_dir, &cfg.hash())?;
            }
            write_library(&layout.library(), &cfg, &run.library)?;
            write_identification(
                &layout.identify(),
                &cfg,
                &run.library,
                &run.identification,
                run.report.as_ref(),
            )?;
            match (&run.report, &run.summary.no_model) {
                (Some(r), _) => println!("{}", serde_json::to_string_pretty(r).expect("json")),
                (None, Some(msg)) => return Err(CliError::NoModel(msg.clone())),
                (None, None) => unreachable!("selection yields a report or an error"),
            }
        }
        Command::Evaluate {
            report,
            terms,
            data,
            case,
            out,
        } => {
            let ev = evaluate(&report, &terms, &data, case, None, false)?;
            let dir = out.unwrap_or_else(|| report.parent().map(PathBuf::from).unwrap_or_default());
            write_json(&dir.join("evaluation.json"), &ev, &ev.report_config_hash)?;
            println!("{}", serde_json::to_string_pretty(&ev).expect("json"));
        }
        Command::Sweep {
            common,
            cases,
            timepoints_list,
            noise_levels,
            ensembling,
            libraries,
            seeds,
            parallel_cells,
        } => {
            let cfg = common.config()?;
            let mut axes = cfg.sweep.clone().unwrap_or_else(|| SweepAxes {
                cases: vec![cfg.data.case.unwrap_or(1)],
                timepoints: vec![cfg.data.timepoints],
                noise: vec![cfg.data.noise],
                ensembling: vec![cfg.ensemble.aggregate],
                libraries: vec![cfg.library.mode],
                seeds: vec![cfg.seed],
            });
            if let Some(x) = cases {
                axes.cases = x;
            }
            if let Some(x) = timepoints_list {
                axes.timepoints = x;
            }
            if let Some(x) = noise_levels {
                axes.noise = x;
            }
            if let Some(x) = ensembling {
                axes.ensembling = x.into_iter().map(Into::into).collect();
            }
            if let Some(x) = libraries {
                axes.libraries = x.into_iter().map(Into::into).collect();
            }
            if let Some(x) = seeds {
                axes.seeds = x;
            }
            let results = run_sweep(&cfg, &axes, parallel_cells)?;
            write_sweep(&cfg.output, &cfg, &axes, &results)?;
            let show = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
            for r in &results {
                eprintln!(
                    "case {} tp {} noise {} {} {} seed {}: {} success {} E_c {}",
                    r.cell.case,
                    r.cell.timepoints,
                    r.cell.noise,
                    serde_json::to_value(r.cell.ensembling).unwrap().as_str().unwrap_or(""),
                    serde_json::to_value(r.cell.library).unwrap().as_str().unwrap_or(""),
                    r.cell.seed,
                    r.status,
                    show(r.success_rate),
                    show(r.coefficient_error)
                );
            }
        }
        Command::Pipeline(common) => {
            let cfg = common.config()?;
            let summary = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

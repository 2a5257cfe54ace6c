use std::collections::HashMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dtr_core::plasmode::{Confounding, SimConfig, ORACLE_PATIENTS, ORACLE_SEED};

use crate::commands::{self, IndividualizeRequest};
use crate::config::{parse_axis, parse_grid, Config, InferConfig};
use crate::error::{CliError, CliResult, EXIT_OK};
use crate::state::StateFile;

#[derive(Debug, Parser)]
#[command(
    name = "dtr",
    version,
    about = "Optimal dynamic treatment regimes: grid search, MSMs and GP emulation"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-stage CD4 dataset.
    Simulate(SimulateArgs),
    /// Monte Carlo value surface of the simulator and its maximizer.
    Oracle(OracleArgs),
    /// Bayesian MSM or grid-search IPW/DR analysis.
    Analyze(AnalyzeArgs),
    /// Gaussian-process emulation of the value surface.
    #[command(subcommand)]
    Gp(GpCommand),
    /// Posterior probability of treatment along a covariate grid.
    Individualize(IndividualizeArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Config file; its [simulate] section gives the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_treated: Option<usize>,
    #[arg(long)]
    pub n_control: Option<usize>,
    /// Assign treatment by CD4-dependent logistic models instead of randomizing.
    #[arg(long)]
    pub confounded: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 5.0)]
    pub step: f64,
    #[arg(long, default_value_t = ORACLE_PATIENTS)]
    pub patients: usize,
    #[arg(long, default_value_t = ORACLE_SEED)]
    pub oracle_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides [output] dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum GpCommand {
    /// Fit the GP to estimator values at the design points.
    Design {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Add expected-improvement points to a saved state.
    Sequence {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        state: Option<PathBuf>,
        /// Where to write the extended state (default: overwrite --state).
        #[arg(long)]
        out_state: Option<PathBuf>,
        #[arg(long)]
        additional: Option<usize>,
        /// Convergence report CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Bootstrap and sample-path posterior of the optimum.
    Infer(InferArgs),
    /// Posterior mean of the emulator on a grid.
    Postmean {
        #[arg(long)]
        state: PathBuf,
        /// One `lo:hi:step` per index coordinate.
        #[arg(long, num_args = 1.., required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence report of a saved state.
    Report {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Config with [gp] settings; not needed when --state is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Design state whose setup and initial design are reused.
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long)]
    pub boot_start: Option<u64>,
    #[arg(long)]
    pub boot_end: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, num_args = 1..)]
    pub path_grid: Option<Vec<String>>,
    #[arg(long)]
    pub additional: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndividualizeArgs {
    /// Config whose [regime] section defines the rules.
    #[arg(long)]
    pub config: PathBuf,
    /// CSV of posterior optima with one column per index name.
    #[arg(long)]
    pub posterior: PathBuf,
    /// 1-based decision stage.
    #[arg(long)]
    pub stage: usize,
    /// Covariate grid `lo:hi:step`.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub covariate: Option<String>,
    /// Values of other rule inputs, as `name=value`.
    #[arg(long = "fix", value_parser = parse_assignment)]
    pub fixed: Vec<(String, f64)>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("`{s}` is not name=value"))?;
    let v = v
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

fn sim_config(args: &SimArgs) -> CliResult<SimConfig> {
    let mut cfg = match &args.config {
        Some(p) => Config::from_path(p)?.simulate.unwrap_or_default(),
        None => SimConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_treated {
        cfg.n_treated = n;
    }
    if let Some(n) = args.n_control {
        cfg.n_control = n;
    }
    if args.confounded && cfg.confounding.is_none() {
        cfg.confounding = Some(Confounding::default());
    }
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn fmt_point(p: &[f64]) -> String {
    let parts: Vec<String> = p.iter().map(|v| format!("{v:.2}")).collect();
    format!("({})", parts.join(", "))
}

fn state_arg(state: Option<PathBuf>, cfg: Option<&Config>) -> CliResult<PathBuf> {
    state
        .or_else(|| cfg.map(commands::default_state_path))
        .ok_or_else(|| CliError::Config("Required: --state (or a config naming gp.state)".into()))
}

fn infer(args: InferArgs) -> CliResult<()> {
    let cfg = args.config.as_deref().map(Config::from_path).transpose()?;
    let (setup, estimator, settings, design) = match (&args.state, &cfg) {
        (Some(s), _) => {
            let st = StateFile::load(s)?;
            (st.setup, st.estimator, st.emulation.settings, st.design)
        }
        (None, Some(c)) => {
            let p = c.gp_plan()?;
            (p.setup, p.estimator, p.settings, p.design)
        }
        (None, None) => return Err(CliError::Config("Required: --config or --state".into())),
    };
    let base = cfg
        .as_ref()
        .and_then(|c| c.gp.as_ref())
        .and_then(|g| g.infer.clone())
        .unwrap_or_default();
    let merged = InferConfig {
        boot_start: args.boot_start.or(base.boot_start),
        boot_end: args.boot_end.or(base.boot_end),
        paths: args.paths.or(base.paths),
        path_grid: args.path_grid.or(base.path_grid),
        additional: args.additional.or(base.additional).or(cfg
            .as_ref()
            .and_then(|c| c.gp.as_ref())
            .and_then(|g| g.additional)),
        seed: args.seed.or(base.seed),
    };
    let holder = Config {
        gp: Some(crate::config::GpConfig {
            infer: Some(merged),
            ..Default::default()
        }),
        ..Default::default()
    };
    let opts = holder.infer_options(&settings.names)?;
    let post = commands::gp_infer(&setup, estimator, &settings, &design, &opts, &args.out)?;
    let med = |j| dtr_core::posterior::quantile(&post.column(j), 0.5);
    let d = settings.names.len();
    println!(
        "{} rows; median optimum {} value {:.2}; {} failed bootstraps",
        post.rows.len(),
        fmt_point(&(0..d).map(med).collect::<Vec<_>>()),
        med(d),
        post.failed.len()
    );
    Ok(())
}

fn gp(cmd: GpCommand) -> CliResult<()> {
    match cmd {
        GpCommand::Design { config, state } => {
            let cfg = Config::from_path(&config)?;
            let path = state.unwrap_or_else(|| commands::default_state_path(&cfg));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)
                    .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            }
            let st = commands::gp_design(&cfg, &path)?;
            let (x, y) = st.emulation.optimum();
            println!(
                "design of {} points; x_max {} y_max {y:.2}; state {}",
                st.emulation.len(),
                fmt_point(&x),
                path.display()
            );
        }
        GpCommand::Sequence {
            config,
            state,
            out_state,
            additional,
            report,
        } => {
            let cfg = config.as_deref().map(Config::from_path).transpose()?;
            let path = state_arg(state, cfg.as_ref())?;
            let additional = additional
                .or(cfg
                    .as_ref()
                    .and_then(|c| c.gp.as_ref())
                    .and_then(|g| g.additional))
                .ok_or_else(|| {
                    CliError::Config("Required: --additional (or gp.additional)".into())
                })?;
            let out = out_state.unwrap_or_else(|| path.clone());
            let st = commands::gp_sequence(&path, additional, &out, report.as_deref())?;
            let (x, y) = st.emulation.optimum();
            println!(
                "{} points; x_max {} y_max {y:.2}; state {}",
                st.emulation.len(),
                fmt_point(&x),
                out.display()
            );
        }
        GpCommand::Infer(args) => infer(args)?,
        GpCommand::Postmean { state, grid, out } => {
            let st = StateFile::load(&state)?;
            let g = parse_grid(&st.emulation.settings.names, &grid, "--grid")?;
            let means = commands::gp_postmean(&state, &g, &out)?;
            println!("{} grid points written to {}", means.len(), out.display());
        }
        GpCommand::Report { state, out } => commands::gp_report(&state, &out)?,
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => {
            let cfg = sim_config(&a.sim)?;
            let data = commands::simulate(&cfg, &a.out)?;
            println!("{} patients written to {}", data.n(), a.out.display());
        }
        Command::Oracle(a) => {
            let cfg = sim_config(&a.sim)?;
            let s = commands::oracle(&cfg, a.step, a.patients, a.oracle_seed, &a.out)?;
            let (x, v) = s.argmax();
            println!("argmax {} value {v:.4}", fmt_point(&x));
        }
        Command::Analyze(a) => {
            let cfg = Config::from_path(&a.config)?;
            let dir = a.out_dir.unwrap_or_else(|| cfg.output_dir());
            let out = commands::analyze(&cfg, &dir)?;
            for s in &out.optimum_summary {
                println!(
                    "{}: median {:.2} (95% {:.2}, {:.2})",
                    s.label, s.median, s.lower, s.upper
                );
            }
            println!("results in {}", dir.display());
        }
        Command::Gp(g) => gp(g)?,
        Command::Individualize(a) => {
            let cfg = Config::from_path(&a.config)?;
            let family = cfg.setup()?.family()?;
            let optima = commands::read_optima(&a.posterior, family.psi_names())?;
            let req = IndividualizeRequest {
                family: &family,
                stage: a.stage,
                covariate: a.covariate,
                grid: parse_axis(&a.grid)?,
                fixed: a.fixed.into_iter().collect::<HashMap<_, _>>(),
            };
            let rows = commands::individualize(&optima, &req, &a.out)?;
            println!("{} grid values written to {}", rows.len(), a.out.display());
        }
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

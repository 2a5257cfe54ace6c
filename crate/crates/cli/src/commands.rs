//! Subcommand implementations. Each returns its results as well as writing
//! them, so tests can drive the pipeline without spawning processes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use dtr_core::causal::{seq, Estimator, Grid, ValueModels, ValueSurface};
use dtr_core::dsl::RegimeFamily;
use dtr_core::emucontrol::{
    convergence_report, design_fit, fit_infer, post_mean_grid, sequence_fit, write_report,
    EmulationSettings, OptimumPosterior,
};
use dtr_core::plasmode::{self, OracleSurface, SimConfig, CD4_RANGE};
use dtr_core::posterior::{
    grid_optima, msm_optima, quantile, run_bayes, write_optima, write_summary, ColumnSummary,
    DrawPlan, Optimum, PosteriorMatrix, Target,
};
use dtr_core::tabular::{emit_csv, format_f64, Dataset};

use crate::config::{Aim, Config, InferOptions, Loaded, Setup};
use crate::error::{CliError, CliResult};
use crate::state::StateFile;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(|v| {
            if v.is_nan() {
                "NA".to_string()
            } else {
                format_f64(*v)
            }
        }))
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn simulate(cfg: &SimConfig, out: &Path) -> CliResult<Dataset> {
    let data = plasmode::simulate(cfg)?;
    emit_csv(&data, out)?;
    Ok(data)
}

pub fn oracle(
    cfg: &SimConfig,
    step: f64,
    patients: usize,
    seed: u64,
    out: &Path,
) -> CliResult<OracleSurface> {
    if !(step > 0.0) {
        return Err(CliError::Config("oracle grid step must be positive".into()));
    }
    let axis = seq(CD4_RANGE.0, CD4_RANGE.1, step)?;
    let surface = plasmode::oracle(cfg, &axis, &axis, patients, seed)?;
    let header: Vec<String> = surface
        .grid
        .names
        .iter()
        .cloned()
        .chain(["value".to_string()])
        .collect();
    let rows: Vec<Vec<f64>> = surface
        .grid
        .points
        .iter()
        .zip(&surface.values)
        .map(|(p, v)| p.iter().copied().chain([*v]).collect())
        .collect();
    write_table(out, &header, &rows)?;
    Ok(surface)
}

pub struct AnalyzeOutput {
    pub posterior: PosteriorMatrix,
    pub optima: Vec<Optimum>,
    pub names: Vec<String>,
    /// Median and 95% interval of each index coordinate and the value.
    pub optimum_summary: Vec<ColumnSummary>,
}

pub fn summarize_optima(optima: &[Optimum], names: &[String]) -> Vec<ColumnSummary> {
    let columns: Vec<(String, Vec<f64>)> = names
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), optima.iter().map(|o| o.psi[j]).collect()))
        .chain([(
            "value".to_string(),
            optima.iter().map(|o| o.value).collect(),
        )])
        .collect();
    columns
        .into_iter()
        .map(|(label, v)| ColumnSummary {
            available: v.iter().filter(|x| !x.is_nan()).count(),
            median: quantile(&v, 0.5),
            lower: quantile(&v, 0.025),
            upper: quantile(&v, 0.975),
            label,
        })
        .collect()
}

pub fn analyze(cfg: &Config, out_dir: &Path) -> CliResult<AnalyzeOutput> {
    let plan = cfg.analyze_plan()?;
    let Loaded { data, family, .. } = plan.setup.load()?;
    let draw_plan = DrawPlan {
        bayes: plan.bayes,
        draws: plan.draws,
        base_seed: plan.seed,
    };
    let (target, optima_of): (Target, Box<dyn Fn(&PosteriorMatrix) -> Vec<Optimum>>) =
        match plan.aim {
            Aim::Msm { spec, treatment } => {
                let s = spec.clone();
                let (lo, hi) = (family.lower().to_vec(), family.upper().to_vec());
                (
                    Target::Msm { spec, treatment },
                    Box::new(move |pm| msm_optima(pm, &s, &lo, &hi)),
                )
            }
            Aim::Grid { grid, models } => {
                let g = grid.clone();
                (
                    Target::Grid { grid, models },
                    Box::new(move |pm| grid_optima(pm, &g)),
                )
            }
        };
    let posterior = run_bayes(&data, &family, &target, draw_plan)?;
    let optima = optima_of(&posterior);
    let names = family.psi_names().to_vec();
    ensure_dir(out_dir)?;
    posterior.write_csv(out_dir.join("posterior.csv"))?;
    posterior.write_summary(out_dir.join("summary.csv"))?;
    write_optima(&optima, &names, out_dir.join("optima.csv"))?;
    let optimum_summary = summarize_optima(&optima, &names);
    write_summary(&optimum_summary, out_dir.join("optima_summary.csv"))?;
    Ok(AnalyzeOutput {
        posterior,
        optima,
        names,
        optimum_summary,
    })
}

fn value_models(estimator: Estimator, loaded: &Loaded) -> ValueModels {
    ValueModels {
        estimator,
        treatment: loaded.treatment.clone(),
        outcome: loaded.outcome.clone(),
        weight_cap: None,
    }
}

fn equal_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn gp_design(cfg: &Config, state_path: &Path) -> CliResult<StateFile> {
    let plan = cfg.gp_plan()?;
    let loaded = plan.setup.load()?;
    let models = value_models(plan.estimator, &loaded);
    let surface = ValueSurface::new(
        &loaded.data,
        &loaded.family,
        &models,
        equal_weights(loaded.data.n()),
    )?;
    let emulation = design_fit(&surface, &plan.design, plan.settings, None)?;
    let state = StateFile::new(plan.setup, plan.estimator, emulation);
    state.save(state_path)?;
    Ok(state)
}

pub fn gp_sequence(
    state_path: &Path,
    additional: usize,
    out_state: &Path,
    report: Option<&Path>,
) -> CliResult<StateFile> {
    if additional == 0 {
        return Err(CliError::Config("additional must be at least 1".into()));
    }
    let mut state = StateFile::load(state_path)?;
    let loaded = state.setup.load()?;
    let models = value_models(state.estimator, &loaded);
    let surface = ValueSurface::new(
        &loaded.data,
        &loaded.family,
        &models,
        equal_weights(loaded.data.n()),
    )?;
    state.emulation = sequence_fit(&state.emulation, &surface, additional)?;
    state.save(out_state)?;
    if let Some(r) = report {
        write_report(
            &convergence_report(&state.emulation),
            &state.emulation.settings.names,
            r,
        )?;
    }
    Ok(state)
}

pub fn gp_report(state_path: &Path, out: &Path) -> CliResult<()> {
    let state = StateFile::load(state_path)?;
    write_report(
        &convergence_report(&state.emulation),
        &state.emulation.settings.names,
        out,
    )?;
    Ok(())
}

pub fn gp_infer(
    setup: &Setup,
    estimator: Estimator,
    settings: &EmulationSettings,
    design: &[Vec<f64>],
    opts: &InferOptions,
    out: &Path,
) -> CliResult<OptimumPosterior> {
    let loaded = setup.load()?;
    let models = value_models(estimator, &loaded);
    let posterior = fit_infer(
        &loaded.data,
        &loaded.family,
        &models,
        design,
        settings,
        &opts.path_grid,
        &opts.plan,
    )?;
    posterior.write_csv(out)?;
    Ok(posterior)
}

pub fn gp_postmean(state_path: &Path, grid: &Grid, out: &Path) -> CliResult<Vec<f64>> {
    let state = StateFile::load(state_path)?;
    let means = post_mean_grid(&state.emulation, grid)?;
    let header: Vec<String> = grid
        .names
        .iter()
        .cloned()
        .chain(["mean".to_string()])
        .collect();
    let rows: Vec<Vec<f64>> = grid
        .points
        .iter()
        .zip(&means)
        .map(|(p, m)| p.iter().copied().chain([*m]).collect())
        .collect();
    write_table(out, &header, &rows)?;
    Ok(means)
}

/// Reads posterior optima (any CSV with one column per index name).
pub fn read_optima(path: &Path, names: &[String]) -> CliResult<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| CliError::Config(format!("{}: no column `{n}`", path.display())))
        })
        .collect::<CliResult<_>>()?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let psi = idx
            .iter()
            .map(|&j| {
                let cell = rec.get(j).unwrap_or("").trim();
                if cell == "NA" {
                    Ok(f64::NAN)
                } else {
                    cell.parse::<f64>().map_err(|_| {
                        CliError::Config(format!(
                            "{} row {}: `{cell}` is not a number",
                            path.display(),
                            row + 1
                        ))
                    })
                }
            })
            .collect::<CliResult<Vec<f64>>>()?;
        out.push(psi);
    }
    Ok(out)
}

pub struct IndividualizeRequest<'a> {
    pub family: &'a RegimeFamily,
    /// 1-based stage.
    pub stage: usize,
    /// Covariate varied along the grid; defaults to the rule's only non-index identifier.
    pub covariate: Option<String>,
    pub grid: Vec<f64>,
    pub fixed: HashMap<String, f64>,
}

pub fn individualize(
    optima: &[Vec<f64>],
    req: &IndividualizeRequest,
    out: &Path,
) -> CliResult<Vec<(f64, f64)>> {
    let k = req.family.stages();
    if req.stage == 0 || req.stage > k {
        return Err(CliError::Config(format!(
            "stage {} out of range 1..={k}",
            req.stage
        )));
    }
    let rule = req.family.rule(req.stage - 1);
    let free: Vec<String> = rule
        .identifiers()
        .into_iter()
        .map(str::to_string)
        .filter(|v| !req.family.psi_names().contains(v) && !req.fixed.contains_key(v))
        .collect();
    let covariate = match &req.covariate {
        Some(c) => c.clone(),
        None if free.len() == 1 => free[0].clone(),
        None => {
            return Err(CliError::Config(format!(
                "stage {} rule `{rule}` needs --covariate among {free:?}",
                req.stage
            )))
        }
    };
    if let Some(other) = free.iter().find(|v| **v != covariate) {
        return Err(CliError::Config(format!(
            "rule `{rule}` also needs a value for `{other}` (use --fix)"
        )));
    }
    let mut rows = Vec::with_capacity(req.grid.len());
    for &x in &req.grid {
        let mut env = req.fixed.clone();
        env.insert(covariate.clone(), x);
        let p = dtr_core::posterior::individualized_prob(optima, req.family, req.stage - 1, &env)?;
        rows.push((x, p));
    }
    let table: Vec<Vec<f64>> = rows.iter().map(|(x, p)| vec![*x, *p]).collect();
    write_table(out, &[covariate, "probability".to_string()], &table)?;
    Ok(rows)
}

pub fn default_state_path(cfg: &Config) -> PathBuf {
    cfg.state_path()
        .unwrap_or_else(|| cfg.output_dir().join("gp_state.json"))
}

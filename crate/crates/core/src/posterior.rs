//! Bayesian bootstrap over the value estimators, frequentist point
//! estimates, posterior optima and individualized treatment probabilities.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::causal::{
    enforce_grid, fit_propensities, msm_argmax, msm_fit_with, validate_msm, Grid, MsmSpec,
    ValueModels, ValueSurface,
};
use crate::dsl::{eval_rule, ModelFormula, RegimeFamily};
use crate::error::{Error, Result};
use crate::tabular::{format_f64, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletDraw {
    pub pi: Vec<f64>,
    pub draw_id: u64,
    pub seed: u64,
}

/// Flat Dirichlet weights: `n` standard exponentials over their sum.
pub fn dirichlet_draw(n: usize, seed: u64) -> DirichletDraw {
    let mut rng = crate::rng::rng(seed);
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = e.iter().sum();
    DirichletDraw {
        pi: e.into_iter().map(|v| v / total).collect(),
        draw_id: 0,
        seed,
    }
}

/// Sample quantile of sorted data by linear interpolation between order
/// statistics (R's default, type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile ignoring NaN entries; NaN when nothing remains.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingCell {
    pub row: usize,
    pub column: usize,
    pub reason: String,
}

/// Posterior draws in rows; missing cells are NaN with a recorded reason.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub labels: Vec<String>,
    pub draws: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
    pub missing: Vec<MissingCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSummary {
    pub label: String,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub available: usize,
}

impl PosteriorMatrix {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn summary(&self) -> Vec<ColumnSummary> {
        (0..self.labels.len())
            .map(|j| {
                let col = self.column(j);
                ColumnSummary {
                    label: self.labels[j].clone(),
                    median: quantile(&col, 0.5),
                    lower: quantile(&col, 0.025),
                    upper: quantile(&col, 0.975),
                    available: col.iter().filter(|v| !v.is_nan()).count(),
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows = Vec::with_capacity(self.rows.len() + 1);
        rows.push(
            std::iter::once("draw".to_string())
                .chain(self.labels.iter().cloned())
                .collect(),
        );
        for (b, r) in self.draws.iter().zip(&self.rows) {
            rows.push(
                std::iter::once(b.to_string())
                    .chain(r.iter().map(|v| cell(*v)))
                    .collect(),
            );
        }
        write_rows(path.as_ref(), &rows)
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        write_summary(&self.summary(), path)
    }
}

pub fn write_summary(summary: &[ColumnSummary], path: impl AsRef<Path>) -> Result<()> {
    let mut rows = vec![["column", "median", "q2.5", "q97.5", "available"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for s in summary {
        rows.push(vec![
            s.label.clone(),
            cell(s.median),
            cell(s.lower),
            cell(s.upper),
            s.available.to_string(),
        ]);
    }
    write_rows(path.as_ref(), &rows)
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format_f64(v)
    }
}

pub(crate) fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(io)
}

/// What each posterior draw computes.
#[derive(Debug, Clone)]
pub enum Target {
    /// Structural model coefficients.
    Msm {
        spec: MsmSpec,
        treatment: Vec<ModelFormula>,
    },
    /// Value estimates at every grid point.
    Grid { grid: Grid, models: ValueModels },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawPlan {
    pub bayes: bool,
    pub draws: usize,
    pub base_seed: u64,
}

impl DrawPlan {
    pub fn frequentist() -> Self {
        Self {
            bayes: false,
            draws: 1,
            base_seed: 0,
        }
    }

    /// Row `b` (1-based) is generated from `seed(b) = base_seed + b`.
    pub fn weights(&self, n: usize, b: u64) -> DirichletDraw {
        if self.bayes {
            let seed = self.base_seed.wrapping_add(b);
            DirichletDraw {
                draw_id: b,
                ..dirichlet_draw(n, seed)
            }
        } else {
            DirichletDraw {
                pi: vec![1.0 / n as f64; n],
                draw_id: b,
                seed: self.base_seed,
            }
        }
    }
}

fn labels(target: &Target) -> Vec<String> {
    match target {
        Target::Msm { spec, .. } => spec.formula.column_labels(),
        Target::Grid { grid, .. } => grid.labels(),
    }
}

pub fn run_bayes(
    data: &Dataset,
    family: &RegimeFamily,
    target: &Target,
    plan: DrawPlan,
) -> Result<PosteriorMatrix> {
    if plan.draws == 0 {
        return Err(Error::Invalid(
            "at least one posterior draw is required".into(),
        ));
    }
    let draws = if plan.bayes { plan.draws } else { 1 };
    let regime = family.compile(data)?;
    let grid = match target {
        Target::Msm { spec, .. } => {
            validate_msm(data, family, spec)?;
            &spec.grid
        }
        Target::Grid { grid, .. } => {
            family.check_names(&grid.names)?;
            grid
        }
    };
    let enf = enforce_grid(&regime, grid)?;
    let labels = labels(target);
    let width = labels.len();
    let ids: Vec<u64> = (1..=draws as u64).collect();
    let results: Vec<(Vec<f64>, Vec<(usize, String)>)> =
        ids.par_iter()
            .map(|&b| {
                let pi = plan.weights(data.n(), b).pi;
                let row: Result<Vec<Result<f64>>> = match target {
                    Target::Msm { spec, treatment } => fit_propensities(data, treatment, &pi)
                        .and_then(|pf| msm_fit_with(data, spec, &enf, &pf, &pi))
                        .map(|beta| beta.iter().map(|v| Ok(*v)).collect()),
                    Target::Grid { models, grid } => ValueSurface::new(data, family, models, pi)
                        .map(|s| s.value_grid(grid, &enf)),
                };
                match row {
                    Ok(cells) => {
                        let mut values = Vec::with_capacity(width);
                        let mut reasons = Vec::new();
                        for (j, c) in cells.into_iter().enumerate() {
                            match c {
                                Ok(v) => values.push(v),
                                Err(e) => {
                                    values.push(f64::NAN);
                                    reasons.push((j, e.to_string()));
                                }
                            }
                        }
                        (values, reasons)
                    }
                    Err(e) => {
                        log::warn!("posterior draw {b} failed: {e}");
                        let msg = e.to_string();
                        (
                            vec![f64::NAN; width],
                            (0..width).map(|j| (j, msg.clone())).collect(),
                        )
                    }
                }
            })
            .collect();
    let mut rows = Vec::with_capacity(draws);
    let mut missing = Vec::new();
    for (r, (values, reasons)) in results.into_iter().enumerate() {
        missing.extend(reasons.into_iter().map(|(column, reason)| MissingCell {
            row: r,
            column,
            reason,
        }));
        rows.push(values);
    }
    let pm = PosteriorMatrix {
        labels,
        draws: ids,
        rows,
        missing,
    };
    if let Some(j) = (0..width).find(|&j| pm.rows.iter().all(|r| r[j].is_nan())) {
        let reason = pm
            .missing
            .iter()
            .find(|m| m.column == j)
            .map(|m| m.reason.clone())
            .unwrap_or_default();
        return Err(Error::Invalid(format!(
            "every draw failed for column `{}`: {reason}",
            pm.labels[j]
        )));
    }
    Ok(pm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub draw: u64,
    pub psi: Vec<f64>,
    pub value: f64,
}

/// Per-draw argmax over grid columns, ties to the lowest index. Draws with
/// no available cell yield NaN coordinates.
pub fn grid_optima(pm: &PosteriorMatrix, grid: &Grid) -> Vec<Optimum> {
    pm.rows
        .iter()
        .zip(&pm.draws)
        .map(|(row, &draw)| {
            let mut best: Option<usize> = None;
            for (j, v) in row.iter().enumerate() {
                if !v.is_nan() && best.is_none_or(|b| *v > row[b]) {
                    best = Some(j);
                }
            }
            match best {
                Some(j) => Optimum {
                    draw,
                    psi: grid.points[j].clone(),
                    value: row[j],
                },
                None => Optimum {
                    draw,
                    psi: vec![f64::NAN; grid.names.len()],
                    value: f64::NAN,
                },
            }
        })
        .collect()
}

/// Per-draw maximizer of the fitted structural model.
pub fn msm_optima(
    pm: &PosteriorMatrix,
    spec: &MsmSpec,
    lower: &[f64],
    upper: &[f64],
) -> Vec<Optimum> {
    pm.rows
        .iter()
        .zip(&pm.draws)
        .map(|(row, &draw)| {
            if row.iter().any(|v| v.is_nan()) {
                return Optimum {
                    draw,
                    psi: vec![f64::NAN; lower.len()],
                    value: f64::NAN,
                };
            }
            let (psi, value) = msm_argmax(spec, &DVector::from_row_slice(row), lower, upper);
            Optimum { draw, psi, value }
        })
        .collect()
}

pub fn write_optima(optima: &[Optimum], names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut rows = vec![std::iter::once("draw".to_string())
        .chain(names.iter().cloned())
        .chain(std::iter::once("value".to_string()))
        .collect::<Vec<_>>()];
    for o in optima {
        rows.push(
            std::iter::once(o.draw.to_string())
                .chain(o.psi.iter().map(|v| cell(*v)))
                .chain(std::iter::once(cell(o.value)))
                .collect(),
        );
    }
    write_rows(path.as_ref(), &rows)
}

/// Share of posterior optima under which the stage rule treats a patient
/// with covariates `x_new`.
pub fn individualized_prob(
    optima: &[Vec<f64>],
    family: &RegimeFamily,
    stage: usize,
    x_new: &HashMap<String, f64>,
) -> Result<f64> {
    if stage >= family.stages() {
        return Err(Error::Invalid(format!(
            "stage {} out of range 1..={}",
            stage + 1,
            family.stages()
        )));
    }
    let rule = family.rule(stage);
    let usable: Vec<&Vec<f64>> = optima
        .iter()
        .filter(|p| p.iter().all(|v| !v.is_nan()))
        .collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no usable posterior optima".into()));
    }
    let mut treated = 0usize;
    for p in &usable {
        let psi: HashMap<String, f64> = family
            .psi_names()
            .iter()
            .cloned()
            .zip(p.iter().copied())
            .collect();
        treated += eval_rule(rule, x_new, &psi)? as usize;
    }
    Ok(treated as f64 / usable.len() as f64)
}

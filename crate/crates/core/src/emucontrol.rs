//! Emulation of a value surface: a GP fit to estimator values at a design,
//! sequential expected-improvement sampling, and bootstrap plus sample-path
//! uncertainty for the optimum.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::causal::{Grid, ValueModels, ValueSurface};
use crate::dsl::RegimeFamily;
use crate::error::{Error, Result};
use crate::gp::{fit_hyperparams, maximize_ei, GpFit, GpOptions, GpParams};
use crate::posterior::{dirichlet_draw, write_rows};
use crate::rng::{derive, rng};
use crate::tabular::{format_f64, Dataset};

/// Anything that returns a (possibly noisy) value estimate at `psi`.
pub trait ValueOracle: Sync {
    fn value(&self, psi: &[f64]) -> Result<f64>;
}

impl ValueOracle for ValueSurface<'_> {
    fn value(&self, psi: &[f64]) -> Result<f64> {
        ValueSurface::value(self, psi)
    }
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> ValueOracle for F {
    fn value(&self, psi: &[f64]) -> Result<f64> {
        self(psi)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmulationSettings {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub gp: GpOptions,
    /// Objective evaluations spent maximizing EI at each step.
    pub ei_budget: usize,
    pub seed: u64,
}

impl EmulationSettings {
    fn validate(&self) -> Result<()> {
        let d = self.names.len();
        if d == 0 || self.lower.len() != d || self.upper.len() != d {
            return Err(Error::Invalid(
                "domain box must have one (lower, upper) pair per index name".into(),
            ));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite())
        {
            return Err(Error::Invalid(
                "domain box needs finite lower < upper in every dimension".into(),
            ));
        }
        if self.ei_budget < 20 {
            return Err(Error::Invalid(
                "EI search budget must be at least 20 evaluations".into(),
            ));
        }
        self.gp.validate(d)
    }

    fn inside(&self, p: &[f64]) -> bool {
        p.len() == self.lower.len()
            && p.iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((x, l), u)| l <= x && x <= u)
    }

    fn gp_at(&self, step: u64) -> GpOptions {
        GpOptions {
            seed: derive(self.seed, step),
            ..self.gp.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmulationState {
    pub settings: EmulationSettings,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// The first `n_design` points are the initial design.
    pub n_design: usize,
    /// EI at each sequentially sampled point.
    pub ei_history: Vec<f64>,
    /// Bootstrap draw the values were computed under; `None` for equal weights.
    pub draw: Option<u64>,
    pub noisy: GpParams,
    pub interpolated: GpParams,
}

impl EmulationState {
    pub fn dim(&self) -> usize {
        self.settings.names.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn noisy_fit(&self) -> Result<GpFit> {
        GpFit::from_params(self.noisy.clone())
    }

    pub fn interpolated_fit(&self) -> Result<GpFit> {
        GpFit::from_params(self.interpolated.clone())
    }

    /// Best visited point by re-interpolated response; ties to the earliest.
    pub fn optimum(&self) -> (Vec<f64>, f64) {
        let r = &self.interpolated.responses;
        let mut best = 0;
        for (i, v) in r.iter().enumerate() {
            if *v > r[best] {
                best = i;
            }
        }
        (self.points[best].clone(), r[best])
    }

    fn check(&self) -> Result<()> {
        self.settings.validate()?;
        let m = self.points.len();
        if self.values.len() != m
            || self.noisy.design.len() != m
            || self.interpolated.design.len() != m
            || self.n_design > m
            || self.ei_history.len() != m - self.n_design
        {
            return Err(Error::Invalid(
                "emulation state arrays are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

fn refit(points: &[Vec<f64>], values: &[f64], opts: &GpOptions) -> Result<(GpParams, GpParams)> {
    let noisy = fit_hyperparams(points, values, opts, false)?;
    let interp = noisy.reinterpolate(opts)?;
    Ok((noisy.params().clone(), interp.params().clone()))
}

fn describe(p: &[f64]) -> String {
    let parts: Vec<String> = p.iter().map(|v| format_f64(*v)).collect();
    format!("({})", parts.join(", "))
}

pub fn design_fit(
    oracle: &dyn ValueOracle,
    design: &[Vec<f64>],
    settings: EmulationSettings,
    draw: Option<u64>,
) -> Result<EmulationState> {
    settings.validate()?;
    let d = settings.names.len();
    if design.len() < d + 2 {
        return Err(Error::Invalid(format!(
            "a {d}-dimensional design needs at least {} points, got {}",
            d + 2,
            design.len()
        )));
    }
    if let Some(p) = design.iter().find(|p| !settings.inside(p)) {
        return Err(Error::Invalid(format!(
            "design point {} lies outside the domain box",
            describe(p)
        )));
    }
    let values: Vec<f64> = design
        .par_iter()
        .map(|p| {
            oracle
                .value(p)
                .map_err(|e| e.with_context(format!("value at design point {}", describe(p))))
        })
        .collect::<Result<_>>()?;
    let (noisy, interpolated) = refit(design, &values, &settings.gp_at(0))?;
    Ok(EmulationState {
        settings,
        points: design.to_vec(),
        values,
        n_design: design.len(),
        ei_history: Vec::new(),
        draw,
        noisy,
        interpolated,
    })
}

const GUARD_CANDIDATES: usize = 64;

fn min_distance(p: &[f64], points: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|q| {
            q.iter()
                .zip(p)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Extends the state by `additional` EI-selected points. Step seeds depend
/// only on the global step index, so runs compose.
pub fn sequence_fit(
    state: &EmulationState,
    oracle: &dyn ValueOracle,
    additional: usize,
) -> Result<EmulationState> {
    if additional == 0 {
        return Err(Error::Invalid(
            "at least one additional point is required".into(),
        ));
    }
    state.check()?;
    let mut s = state.clone();
    let st = &state.settings;
    let diag = st
        .lower
        .iter()
        .zip(&st.upper)
        .map(|(l, u)| (u - l).powi(2))
        .sum::<f64>()
        .sqrt();
    for _ in 0..additional {
        let step = (s.points.len() - s.n_design + 1) as u64;
        let seed = derive(st.seed, step);
        let interp = s.interpolated_fit()?;
        let (mut x, mut ei) = maximize_ei(&interp, &st.lower, &st.upper, st.ei_budget, seed);
        if min_distance(&x, &s.points) <= 1e-6 * diag {
            let mut r = rng(derive(seed, 1));
            let mut best = (Vec::new(), f64::NEG_INFINITY);
            for _ in 0..GUARD_CANDIDATES {
                let c: Vec<f64> = st
                    .lower
                    .iter()
                    .zip(&st.upper)
                    .map(|(l, u)| l + r.random::<f64>() * (u - l))
                    .collect();
                let dist = min_distance(&c, &s.points);
                if dist > best.1 {
                    best = (c, dist);
                }
            }
            log::info!(
                "step {step}: EI optimum {} duplicates a visited point; using {}",
                describe(&x),
                describe(&best.0)
            );
            x = best.0;
            let vmax = interp
                .responses()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            ei = crate::gp::expected_improvement(&interp, &x, vmax);
        }
        let y = oracle
            .value(&x)
            .map_err(|e| e.with_context(format!("sequential step {step} at {}", describe(&x))))?;
        s.points.push(x);
        s.values.push(y);
        s.ei_history.push(ei.max(0.0));
        let (noisy, interpolated) = refit(&s.points, &s.values, &st.gp_at(step))
            .map_err(|e| e.with_context(format!("sequential step {step}")))?;
        s.noisy = noisy;
        s.interpolated = interpolated;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub order: usize,
    pub psi: Vec<f64>,
    pub value: f64,
    pub ei: Option<f64>,
}

/// Visited points in sampling order, design points first.
pub fn convergence_report(state: &EmulationState) -> Vec<ReportRow> {
    state
        .points
        .iter()
        .zip(&state.values)
        .enumerate()
        .map(|(i, (p, v))| ReportRow {
            order: i + 1,
            psi: p.clone(),
            value: *v,
            ei: i.checked_sub(state.n_design).map(|j| state.ei_history[j]),
        })
        .collect()
}

pub fn write_report(rows: &[ReportRow], names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut out = vec![std::iter::once("step".to_string())
        .chain(names.iter().cloned())
        .chain(["value".to_string(), "ei".to_string()])
        .collect::<Vec<_>>()];
    for r in rows {
        let mut line = vec![r.order.to_string()];
        line.extend(r.psi.iter().map(|v| format_f64(*v)));
        line.push(format_f64(r.value));
        line.push(r.ei.map(format_f64).unwrap_or_default());
        out.push(line);
    }
    write_rows(path.as_ref(), &out)
}

/// Posterior mean of the noisy fit at `x`.
pub fn post_mean(state: &EmulationState, x: &[f64]) -> Result<f64> {
    Ok(state.noisy_fit()?.predict(x).mean)
}

pub fn post_mean_grid(state: &EmulationState, grid: &Grid) -> Result<Vec<f64>> {
    let fit = state.noisy_fit()?;
    Ok(grid.points.iter().map(|p| fit.predict(p).mean).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimumDraw {
    pub boot: u64,
    pub path: usize,
    pub psi: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimumPosterior {
    pub names: Vec<String>,
    pub rows: Vec<OptimumDraw>,
    /// Bootstraps that failed, with the reason.
    pub failed: Vec<(u64, String)>,
}

impl OptimumPosterior {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| if j < r.psi.len() { r.psi[j] } else { r.value })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = vec![self
            .names
            .iter()
            .cloned()
            .chain(std::iter::once("value".to_string()))
            .collect::<Vec<_>>()];
        for r in &self.rows {
            let mut line: Vec<String> = r.psi.iter().map(|v| format_f64(*v)).collect();
            line.push(format_f64(r.value));
            out.push(line);
        }
        write_rows(path.as_ref(), &out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferPlan {
    pub boot_start: u64,
    pub boot_end: u64,
    pub paths: usize,
    pub additional: usize,
    /// Dirichlet weights for bootstrap `b` use seed `base_seed + b`.
    pub base_seed: u64,
}

pub const MAX_FAILED_SHARE: f64 = 0.2;

/// One bootstrap: reweight, emulate from the original design, then take the
/// argmax of each sample path over `path_grid` (ties to the lowest index).
fn infer_one(
    data: &Dataset,
    family: &RegimeFamily,
    models: &ValueModels,
    design: &[Vec<f64>],
    settings: &EmulationSettings,
    path_grid: &Grid,
    plan: &InferPlan,
    b: u64,
) -> Result<Vec<OptimumDraw>> {
    let seed = plan.base_seed.wrapping_add(b);
    let pi = dirichlet_draw(data.n(), seed).pi;
    let surface = ValueSurface::new(data, family, models, pi)?;
    let settings = EmulationSettings {
        seed: derive(seed, 1 << 32),
        ..settings.clone()
    };
    let mut state = design_fit(&surface, design, settings, Some(b))?;
    if plan.additional > 0 {
        state = sequence_fit(&state, &surface, plan.additional)?;
    }
    let paths = state.noisy_fit()?.sample_paths(
        &path_grid.points,
        plan.paths,
        derive(seed, (1 << 32) + 1),
    )?;
    Ok((0..plan.paths)
        .map(|k| {
            let row = paths.row(k);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            OptimumDraw {
                boot: b,
                path: k + 1,
                psi: path_grid.points[best].clone(),
                value: row[best],
            }
        })
        .collect())
}

pub fn fit_infer(
    data: &Dataset,
    family: &RegimeFamily,
    models: &ValueModels,
    design: &[Vec<f64>],
    settings: &EmulationSettings,
    path_grid: &Grid,
    plan: &InferPlan,
) -> Result<OptimumPosterior> {
    if plan.boot_start > plan.boot_end || plan.paths == 0 {
        return Err(Error::Invalid(
            "need boot_start <= boot_end and at least one path".into(),
        ));
    }
    settings.validate()?;
    family.check_names(&path_grid.names)?;
    if let Some(p) = path_grid.points.iter().find(|p| !settings.inside(p)) {
        return Err(Error::Invalid(format!(
            "path grid point {} lies outside the domain box",
            describe(p)
        )));
    }
    let boots: Vec<u64> = (plan.boot_start..=plan.boot_end).collect();
    let results: Vec<(u64, Result<Vec<OptimumDraw>>)> = boots
        .par_iter()
        .map(|&b| {
            (
                b,
                infer_one(data, family, models, design, settings, path_grid, plan, b),
            )
        })
        .collect();
    let mut rows = Vec::with_capacity(boots.len() * plan.paths);
    let mut failed = Vec::new();
    for (b, r) in results {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(e) => {
                log::warn!("bootstrap {b} failed: {e}");
                failed.push((b, e.to_string()));
            }
        }
    }
    if failed.len() as f64 > MAX_FAILED_SHARE * boots.len() as f64 {
        return Err(Error::NonConvergence(format!(
            "{} of {} bootstraps failed; first: bootstrap {}: {}",
            failed.len(),
            boots.len(),
            failed[0].0,
            failed[0].1
        )));
    }
    Ok(OptimumPosterior {
        names: settings.names.clone(),
        rows,
        failed,
    })
}

//! The analysis configuration file and its validation.
//!
//! Every section is optional at parse time; each command checks the fields
//! it needs and reports the first violated rule before doing any work.

use std::path::{Path, PathBuf};

use dtr_core::causal::{seq, Estimator, Grid, Method, MsmSpec, ValueModels, WeightKind};
use dtr_core::dsl::{parse_formula, ModelFormula, RegimeFamily};
use dtr_core::emucontrol::{EmulationSettings, InferPlan};
use dtr_core::gp::{GpOptions, Kernel, PriorSpec};
use dtr_core::plasmode::SimConfig;
use dtr_core::tabular::{load_csv, Dataset};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: Option<DataConfig>,
    pub models: Option<ModelsConfig>,
    pub regime: Option<RegimeConfig>,
    pub analyze: Option<AnalyzeConfig>,
    pub gp: Option<GpConfig>,
    pub simulate: Option<SimConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub id: Option<String>,
    pub outcome: Option<String>,
    pub treatments: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub treatment: Option<Vec<String>>,
    pub outcome: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub rules: Option<Vec<String>>,
    pub psi: Option<Vec<String>>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Structural model formula; selects the MSM aim.
    pub msm: Option<String>,
    /// One `lo:hi:step` axis per index coordinate.
    pub grid: Option<Vec<String>>,
    pub bayes: Option<bool>,
    pub dr: Option<bool>,
    pub normalized: Option<bool>,
    pub draws: Option<usize>,
    pub seed: Option<u64>,
    pub weight_cap: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PriorConfig {
    /// `prior = "elicit"` derives log-normal priors from the domain box.
    Rule(String),
    Explicit {
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    pub kernel: Option<Kernel>,
    pub n_starts: Option<usize>,
    pub theta_lower: Option<Vec<f64>>,
    pub theta_upper: Option<Vec<f64>>,
    pub prior: Option<PriorConfig>,
    pub design: Option<Vec<String>>,
    pub dr: Option<bool>,
    pub normalized: Option<bool>,
    pub ei_budget: Option<usize>,
    pub seed: Option<u64>,
    pub state: Option<PathBuf>,
    pub additional: Option<usize>,
    pub infer: Option<InferConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub boot_start: Option<u64>,
    pub boot_end: Option<u64>,
    pub paths: Option<usize>,
    pub path_grid: Option<Vec<String>>,
    pub additional: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

fn required<'a, T>(v: &'a Option<T>, key: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Config(format!("Required: {key}")))
}

/// Parses `lo:hi:step`, or a single number for a one-point axis.
pub fn parse_axis(spec: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| CliError::Config(format!("grid axis `{spec}`: `{s}` is not a number")))
    };
    match parts.as_slice() {
        [v] => Ok(vec![num(v)?]),
        [lo, hi, step] => seq(num(lo)?, num(hi)?, num(step)?)
            .map_err(|e| CliError::Config(format!("grid axis `{spec}`: {e}"))),
        _ => Err(CliError::Config(format!(
            "grid axis `{spec}` must be `lo:hi:step`"
        ))),
    }
}

pub fn parse_grid(names: &[String], axes: &[String], key: &str) -> CliResult<Grid> {
    if axes.len() != names.len() {
        return Err(CliError::Config(format!(
            "{key} has {} axes for {} index coordinates",
            axes.len(),
            names.len()
        )));
    }
    let axes = axes
        .iter()
        .map(|a| parse_axis(a))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Grid::product(names.to_vec(), &axes)?)
}

/// Data, models and regime family shared by every analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub data: PathBuf,
    pub id: String,
    pub outcome: String,
    pub treatments: Vec<String>,
    pub treatment_models: Vec<String>,
    pub outcome_models: Option<Vec<String>>,
    pub rules: Vec<String>,
    pub psi: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub struct Loaded {
    pub data: Dataset,
    pub family: RegimeFamily,
    pub treatment: Vec<ModelFormula>,
    pub outcome: Option<Vec<ModelFormula>>,
}

fn formulas(list: &[String], what: &str) -> CliResult<Vec<ModelFormula>> {
    list.iter()
        .map(|f| parse_formula(f).map_err(|e| CliError::Config(format!("{what}: {e}"))))
        .collect()
}

impl Setup {
    pub fn family(&self) -> CliResult<RegimeFamily> {
        let rules: Vec<&str> = self.rules.iter().map(String::as_str).collect();
        let psi: Vec<&str> = self.psi.iter().map(String::as_str).collect();
        RegimeFamily::from_strings(&rules, &psi, &self.lower, &self.upper)
            .map_err(|e| CliError::Config(format!("regime: {e}")))
    }

    pub fn load(&self) -> CliResult<Loaded> {
        let family = self.family()?;
        let treatment = formulas(&self.treatment_models, "models.treatment")?;
        let outcome = self
            .outcome_models
            .as_ref()
            .map(|o| formulas(o, "models.outcome"))
            .transpose()?;
        let treat: Vec<&str> = self.treatments.iter().map(String::as_str).collect();
        let data = load_csv(&self.data, &self.id, &treat, &self.outcome)?;
        family
            .validate(&data)
            .map_err(|e| CliError::Config(format!("regime: {e}")))?;
        Ok(Loaded {
            data,
            family,
            treatment,
            outcome,
        })
    }
}

pub enum Aim {
    Msm {
        spec: MsmSpec,
        treatment: Vec<ModelFormula>,
    },
    Grid {
        grid: Grid,
        models: ValueModels,
    },
}

pub struct AnalyzePlan {
    pub setup: Setup,
    pub aim: Aim,
    pub bayes: bool,
    pub draws: usize,
    pub seed: u64,
}

pub struct GpPlan {
    pub setup: Setup,
    pub estimator: Estimator,
    pub settings: EmulationSettings,
    pub design: Vec<Vec<f64>>,
    pub additional: Option<usize>,
}

pub struct InferOptions {
    pub plan: InferPlan,
    pub path_grid: Grid,
}

pub fn estimator(dr: bool, normalized: bool) -> Estimator {
    Estimator {
        method: if dr { Method::Dr } else { Method::Ipw },
        weights: if normalized {
            WeightKind::Normalized
        } else {
            WeightKind::Raw
        },
    }
}

pub const DEFAULT_DRAWS: usize = 100;
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_EI_BUDGET: usize = 2000;

impl Config {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(self.output.dir.as_deref().unwrap_or(Path::new(".")))
    }

    pub fn setup(&self) -> CliResult<Setup> {
        let none_data = DataConfig::default();
        let none_models = ModelsConfig::default();
        let none_regime = RegimeConfig::default();
        let d = self.data.as_ref().unwrap_or(&none_data);
        let m = self.models.as_ref().unwrap_or(&none_models);
        let r = self.regime.as_ref().unwrap_or(&none_regime);
        let treatments = required(&d.treatments, "data.treatments")?.clone();
        let treatment_models = required(&m.treatment, "models.treatment")?.clone();
        if treatment_models.len() != treatments.len() {
            return Err(CliError::Config(format!(
                "models.treatment needs one formula per treatment ({}), got {}",
                treatments.len(),
                treatment_models.len()
            )));
        }
        if let Some(o) = &m.outcome {
            if o.len() != treatments.len() {
                return Err(CliError::Config(format!(
                    "models.outcome needs one formula per treatment ({}), got {}",
                    treatments.len(),
                    o.len()
                )));
            }
        }
        Ok(Setup {
            data: self.resolve(required(&d.path, "data.path")?),
            id: required(&d.id, "data.id")?.clone(),
            outcome: required(&d.outcome, "data.outcome")?.clone(),
            treatments,
            treatment_models,
            outcome_models: m.outcome.clone(),
            rules: required(&r.rules, "regime.rules")?.clone(),
            psi: required(&r.psi, "regime.psi")?.clone(),
            lower: required(&r.lower, "regime.lower")?.clone(),
            upper: required(&r.upper, "regime.upper")?.clone(),
        })
    }

    pub fn analyze_plan(&self) -> CliResult<AnalyzePlan> {
        let a = required(&self.analyze, "[analyze] section")?;
        let setup = self.setup()?;
        if a.draws == Some(0) {
            return Err(CliError::Config("analyze.draws must be at least 1".into()));
        }
        if let Some(c) = a.weight_cap {
            if !(c > 0.0 && c <= 1.0) {
                return Err(CliError::Config(
                    "analyze.weight_cap must be a quantile in (0, 1]".into(),
                ));
            }
        }
        let grid = parse_grid(
            &setup.psi,
            required(&a.grid, "analyze.grid")?,
            "analyze.grid",
        )?;
        let treatment = formulas(&setup.treatment_models, "models.treatment")?;
        let aim = if let Some(msm) = &a.msm {
            if a.normalized.is_some() {
                return Err(CliError::Config(
                    "MSM aim: Unavailable: Normalized (remove analyze.normalized)".into(),
                ));
            }
            if a.dr == Some(true) {
                return Err(CliError::Config(
                    "MSM aim: Unavailable: DR (remove analyze.dr)".into(),
                ));
            }
            if a.weight_cap.is_some() {
                return Err(CliError::Config("MSM aim: Unavailable: weight_cap".into()));
            }
            if setup.outcome_models.is_some() {
                log::warn!("models.outcome is not used by the MSM aim");
            }
            let formula =
                parse_formula(msm).map_err(|e| CliError::Config(format!("analyze.msm: {e}")))?;
            if formula.response != setup.outcome {
                return Err(CliError::Config(format!(
                    "analyze.msm: response must be the outcome `{}`",
                    setup.outcome
                )));
            }
            Aim::Msm {
                spec: MsmSpec::new(formula, grid),
                treatment,
            }
        } else {
            let dr = a.dr.unwrap_or(false);
            if dr && setup.outcome_models.is_none() {
                return Err(CliError::Config(
                    "DR aim: Required: models.outcome when analyze.dr = true".into(),
                ));
            }
            let outcome = match (&setup.outcome_models, dr) {
                (Some(o), true) => Some(formulas(o, "models.outcome")?),
                _ => None,
            };
            Aim::Grid {
                grid,
                models: ValueModels {
                    estimator: estimator(dr, a.normalized.unwrap_or(false)),
                    treatment,
                    outcome,
                    weight_cap: a.weight_cap,
                },
            }
        };
        Ok(AnalyzePlan {
            setup,
            aim,
            bayes: a.bayes.unwrap_or(true),
            draws: a.draws.unwrap_or(DEFAULT_DRAWS),
            seed: a.seed.unwrap_or(DEFAULT_SEED),
        })
    }

    pub fn gp_plan(&self) -> CliResult<GpPlan> {
        let g = required(&self.gp, "[gp] section")?;
        let setup = self.setup()?;
        let d = setup.psi.len();
        let dr = g.dr.unwrap_or(false);
        if dr && setup.outcome_models.is_none() {
            return Err(CliError::Config(
                "GP with DR: Required: models.outcome when gp.dr = true".into(),
            ));
        }
        let kernel = *required(&g.kernel, "gp.kernel")?;
        let n_starts = *required(&g.n_starts, "gp.n_starts")?;
        let theta_lower = required(&g.theta_lower, "gp.theta_lower")?.clone();
        let theta_upper = required(&g.theta_upper, "gp.theta_upper")?.clone();
        let prior = match &g.prior {
            None => None,
            Some(PriorConfig::Rule(r)) if r == "elicit" => {
                let (mu, sigma): (Vec<f64>, Vec<f64>) = setup
                    .lower
                    .iter()
                    .zip(&setup.upper)
                    .map(|(l, u)| PriorSpec::elicit(kernel, u - l))
                    .unzip();
                Some(PriorSpec { mu, sigma })
            }
            Some(PriorConfig::Rule(r)) => {
                return Err(CliError::Config(format!(
                    "gp.prior must be \"elicit\" or {{ mu = [...], sigma = [...] }}, got \"{r}\""
                )))
            }
            Some(PriorConfig::Explicit { mu, sigma }) => Some(PriorSpec {
                mu: mu.clone(),
                sigma: sigma.clone(),
            }),
        };
        let settings = EmulationSettings {
            names: setup.psi.clone(),
            lower: setup.lower.clone(),
            upper: setup.upper.clone(),
            gp: GpOptions {
                kernel,
                theta_lower,
                theta_upper,
                n_starts,
                prior,
                seed: 0,
            },
            ei_budget: g.ei_budget.unwrap_or(DEFAULT_EI_BUDGET),
            seed: g.seed.unwrap_or(DEFAULT_SEED),
        };
        let design = parse_grid(&setup.psi, required(&g.design, "gp.design")?, "gp.design")?.points;
        if design.len() < d + 2 {
            return Err(CliError::Config(format!(
                "gp.design has {} points; at least {} are needed in {d} dimensions",
                design.len(),
                d + 2
            )));
        }
        Ok(GpPlan {
            estimator: estimator(dr, g.normalized.unwrap_or(true)),
            setup,
            settings,
            design,
            additional: g.additional,
        })
    }

    pub fn state_path(&self) -> Option<PathBuf> {
        self.gp
            .as_ref()
            .and_then(|g| g.state.as_ref())
            .map(|p| self.resolve(p))
    }

    pub fn infer_options(&self, names: &[String]) -> CliResult<InferOptions> {
        let none = InferConfig::default();
        let i = self
            .gp
            .as_ref()
            .and_then(|g| g.infer.as_ref())
            .unwrap_or(&none);
        let additional = match i.additional.or(self.gp.as_ref().and_then(|g| g.additional)) {
            Some(a) => a,
            None => return Err(CliError::Config("Required: gp.infer.additional".into())),
        };
        let plan = InferPlan {
            boot_start: *required(&i.boot_start, "gp.infer.boot_start")?,
            boot_end: *required(&i.boot_end, "gp.infer.boot_end")?,
            paths: *required(&i.paths, "gp.infer.paths")?,
            additional,
            base_seed: i.seed.unwrap_or(DEFAULT_SEED),
        };
        if plan.boot_start > plan.boot_end || plan.paths == 0 {
            return Err(CliError::Config(
                "gp.infer needs boot_start <= boot_end and paths >= 1".into(),
            ));
        }
        let path_grid = parse_grid(
            names,
            required(&i.path_grid, "gp.infer.path_grid")?,
            "gp.infer.path_grid",
        )?;
        Ok(InferOptions { plan, path_grid })
    }
}

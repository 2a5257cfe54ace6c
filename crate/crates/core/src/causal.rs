//! Adherence, inverse probability weights and the three value estimators:
//! IPW, doubly robust, and the dynamic marginal structural model.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dsl::{
    model_matrix, CompiledRegime, Enforcement, ModelFormula, RegimeFamily, Term, PSEUDO_OUTCOME,
};
use crate::error::{Error, Result};
use crate::regress::{label_rank_error, logistic_irls, wls, WlsSolver};
use crate::tabular::{Columns, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ipw,
    Dr,
}

/// A point estimator of the value of one regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Estimator {
    pub method: Method,
    pub weights: WeightKind,
}

impl Estimator {
    pub const IPW_NORMALIZED: Estimator = Estimator {
        method: Method::Ipw,
        weights: WeightKind::Normalized,
    };
    pub const IPW_RAW: Estimator = Estimator {
        method: Method::Ipw,
        weights: WeightKind::Raw,
    };
    pub const DR_RAW: Estimator = Estimator {
        method: Method::Dr,
        weights: WeightKind::Raw,
    };
    pub const DR_NORMALIZED: Estimator = Estimator {
        method: Method::Dr,
        weights: WeightKind::Normalized,
    };
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = match self.method {
            Method::Ipw => "ipw",
            Method::Dr => "dr",
        };
        let w = match self.weights {
            WeightKind::Raw => "raw",
            WeightKind::Normalized => "normalized",
        };
        write!(f, "{m}-{w}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub value: f64,
    pub estimator: Estimator,
    pub psi: Vec<f64>,
    /// Bootstrap draw index, `None` for frequentist estimates.
    pub draw: Option<u64>,
}

/// Index points of a grid search, in evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub names: Vec<String>,
    pub points: Vec<Vec<f64>>,
}

/// `lo, lo + step, ...` up to `hi` inclusive.
pub fn seq(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Invalid(format!("bad sequence {lo}:{hi}:{step}")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| lo + k as f64 * step).collect())
}

impl Grid {
    pub fn new(names: Vec<String>, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("empty grid".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != names.len()) {
            return Err(Error::Invalid(format!(
                "grid point {p:?} does not have {} coordinates",
                names.len()
            )));
        }
        Ok(Self { names, points })
    }

    /// Cartesian product with the first coordinate varying fastest.
    pub fn product(names: Vec<String>, axes: &[Vec<f64>]) -> Result<Self> {
        if axes.len() != names.len() || axes.iter().any(Vec::is_empty) {
            return Err(Error::Invalid(
                "each grid coordinate needs a nonempty axis".into(),
            ));
        }
        let total: usize = axes.iter().map(Vec::len).product();
        let mut points = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut p = Vec::with_capacity(axes.len());
            for axis in axes {
                p.push(axis[idx % axis.len()]);
                idx /= axis.len();
            }
            points.push(p);
        }
        Self::new(names, points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Column labels such as `psi1=335;psi2=320`.
    pub fn labels(&self) -> Vec<String> {
        self.points
            .iter()
            .map(|p| {
                self.names
                    .iter()
                    .zip(p)
                    .map(|(n, v)| format!("{n}={v}"))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .collect()
    }
}

/// Whether patient `i` followed the regime at `psi` through `stage`
/// (0-based).
pub fn adheres(
    data: &Dataset,
    family: &RegimeFamily,
    psi: &[f64],
    i: usize,
    stage: usize,
) -> Result<bool> {
    let enf = family.compile(data)?.enforce(psi)?;
    Ok(enf.adherent[stage][i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub coefficients: Vec<DVector<f64>>,
    /// `received[k][i]`: fitted probability of the treatment patient `i`
    /// actually received at stage `k`.
    pub received: Vec<Vec<f64>>,
}

impl PropensityFit {
    /// Wraps known probabilities of treatment (`P(z_k = 1)`) per stage.
    pub fn known(data: &Dataset, p_treat: &[Vec<f64>]) -> Result<Self> {
        if p_treat.len() != data.stages() {
            return Err(Error::Invalid(
                "one probability vector per stage is required".into(),
            ));
        }
        let mut received = Vec::with_capacity(p_treat.len());
        for (k, p) in p_treat.iter().enumerate() {
            if p.len() != data.n() || p.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(Error::Invalid(format!(
                    "stage {} probabilities must lie in (0,1)",
                    k + 1
                )));
            }
            received.push(
                data.treatment(k)
                    .iter()
                    .zip(p)
                    .map(|(&z, &p)| if z == 1.0 { p } else { 1.0 - p })
                    .collect(),
            );
        }
        Ok(Self {
            coefficients: Vec::new(),
            received,
        })
    }
}

pub fn fit_propensities(
    data: &Dataset,
    formulas: &[ModelFormula],
    pi: &[f64],
) -> Result<PropensityFit> {
    if formulas.len() != data.stages() {
        return Err(Error::Invalid(format!(
            "{} treatment models for {} stages",
            formulas.len(),
            data.stages()
        )));
    }
    let names = data.treatment_names();
    let mut coefficients = Vec::with_capacity(formulas.len());
    let mut received = Vec::with_capacity(formulas.len());
    for (k, f) in formulas.iter().enumerate() {
        if f.response != names[k] {
            return Err(Error::Formula {
                formula: f.to_string(),
                message: format!(
                    "stage {} treatment model must have response `{}`",
                    k + 1,
                    names[k]
                ),
            });
        }
        let ctx = || format!("treatment model for `{}`", names[k]);
        let x = model_matrix(f, data).map_err(|e| e.with_context(ctx()))?;
        let z = data.treatment(k);
        let fit = logistic_irls(&x, z, pi)
            .map_err(|e| label_rank_error(e, &f.column_labels()).with_context(ctx()))?;
        received.push(
            z.iter()
                .zip(fit.fitted.iter())
                .map(|(&z, &mu)| if z == 1.0 { mu } else { 1.0 - mu })
                .collect(),
        );
        coefficients.push(fit.coefficients);
    }
    Ok(PropensityFit {
        coefficients,
        received,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub psi: Vec<f64>,
    pub kind: WeightKind,
    /// `stage[k][i]`: cumulative weight through stage `k` (0-based). For the
    /// normalized kind each stage sums to one.
    pub stage: Vec<Vec<f64>>,
}

impl WeightVector {
    pub fn last(&self) -> &[f64] {
        self.stage.last().expect("at least one stage")
    }
}

/// Truncates each stage's positive weights at their `q`-quantile.
fn cap_weights(stage: &mut [f64], q: f64) {
    let mut positive: Vec<f64> = stage.iter().copied().filter(|w| *w > 0.0).collect();
    if positive.is_empty() {
        return;
    }
    positive.sort_by(f64::total_cmp);
    let cap = crate::posterior::quantile_sorted(&positive, q);
    for w in stage.iter_mut() {
        *w = w.min(cap);
    }
}

/// Stage-cumulative weights from precomputed adherence.
pub fn weights_from(
    enf: &Enforcement,
    pf: &PropensityFit,
    pi: &[f64],
    psi: &[f64],
    kind: WeightKind,
    cap_quantile: Option<f64>,
) -> Result<WeightVector> {
    let k_total = enf.adherent.len();
    let n = pi.len();
    let mut stage = Vec::with_capacity(k_total);
    let mut denom = vec![1.0; n];
    for k in 0..k_total {
        let mut w = vec![0.0; n];
        for i in 0..n {
            denom[i] *= pf.received[k][i];
            if enf.adherent[k][i] {
                w[i] = 1.0 / denom[i];
            }
        }
        if let Some(q) = cap_quantile {
            cap_weights(&mut w, q);
        }
        let total: f64 = w.iter().zip(pi).map(|(a, b)| a * b).sum();
        if !(total > 0.0) {
            return Err(Error::Positivity {
                psi: psi.to_vec(),
                stage: k + 1,
            });
        }
        if kind == WeightKind::Normalized {
            for (wi, p) in w.iter_mut().zip(pi) {
                *wi = *wi * p / total;
            }
        }
        stage.push(w);
    }
    Ok(WeightVector {
        psi: psi.to_vec(),
        kind,
        stage,
    })
}

pub fn ipw_weights(
    data: &Dataset,
    family: &RegimeFamily,
    psi: &[f64],
    pf: &PropensityFit,
    kind: WeightKind,
    pi: &[f64],
) -> Result<WeightVector> {
    let enf = family.compile(data)?.enforce(psi)?;
    weights_from(&enf, pf, pi, psi, kind, None)
}

fn ipw_sum(y: &[f64], wv: &WeightVector, pi: &[f64]) -> f64 {
    let w = wv.last();
    match wv.kind {
        WeightKind::Raw => (0..y.len()).map(|i| pi[i] * w[i] * y[i]).sum(),
        WeightKind::Normalized => (0..y.len()).map(|i| w[i] * y[i]).sum(),
    }
}

pub fn value_ipw(data: &Dataset, wv: &WeightVector, pi: &[f64]) -> ValueEstimate {
    ValueEstimate {
        value: ipw_sum(data.outcome(), wv, pi),
        estimator: Estimator {
            method: Method::Ipw,
            weights: wv.kind,
        },
        psi: wv.psi.clone(),
        draw: None,
    }
}

fn dr_sum(y: &[f64], wv: &WeightVector, phi: &[Vec<f64>], pi: &[f64]) -> f64 {
    let k_total = phi.len();
    let scale = |i: usize| match wv.kind {
        WeightKind::Raw => pi[i],
        WeightKind::Normalized => 1.0,
    };
    let mut total = 0.0;
    for i in 0..y.len() {
        let s = scale(i);
        let mut term = pi[i] * phi[0][i];
        for k in 1..k_total {
            term += s * wv.stage[k - 1][i] * (phi[k][i] - phi[k - 1][i]);
        }
        term += s * wv.stage[k_total - 1][i] * (y[i] - phi[k_total - 1][i]);
        total += term;
    }
    total
}

pub fn value_dr(data: &Dataset, wv: &WeightVector, dr: &DrRecursion, pi: &[f64]) -> ValueEstimate {
    ValueEstimate {
        value: dr_sum(data.outcome(), wv, &dr.phi, pi),
        estimator: Estimator {
            method: Method::Dr,
            weights: wv.kind,
        },
        psi: wv.psi.clone(),
        draw: None,
    }
}

#[derive(Debug, Clone, Copy)]
enum Src<'a> {
    Column(&'a [f64]),
    Treatment(usize, &'a [f64]),
}

#[derive(Debug, Clone, Copy)]
enum CTerm<'a> {
    Main(Src<'a>),
    Product(Src<'a>, Src<'a>),
    Square(Src<'a>),
}

/// A formula's right-hand side bound to dataset columns, able to predict
/// with some treatment columns replaced.
#[derive(Debug, Clone)]
struct LinearPredictor<'a> {
    terms: Vec<CTerm<'a>>,
}

impl<'a> LinearPredictor<'a> {
    fn new(formula: &ModelFormula, data: &'a Dataset) -> Result<Self> {
        let treatments = data.treatment_names();
        let src = |name: &str| -> Result<Src<'a>> {
            if let Some(k) = treatments.iter().position(|t| *t == name) {
                Ok(Src::Treatment(k, data.treatment(k)))
            } else {
                data.column(name)
                    .map(Src::Column)
                    .ok_or_else(|| Error::MissingColumn(name.to_string()))
            }
        };
        let terms = formula
            .terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Term::Main(a) => CTerm::Main(src(a)?),
                    Term::Interaction(a, b) => CTerm::Product(src(a)?, src(b)?),
                    Term::Square(a) => CTerm::Square(src(a)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { terms })
    }

    /// `X beta` with treatment `k` read from `overrides[k]` when given.
    fn predict(&self, beta: &DVector<f64>, overrides: &[Option<&'a [f64]>], n: usize) -> Vec<f64> {
        let col = |s: &Src<'a>| -> &'a [f64] {
            match *s {
                Src::Column(c) => c,
                Src::Treatment(k, observed) => {
                    overrides.get(k).copied().flatten().unwrap_or(observed)
                }
            }
        };
        let mut acc = vec![beta[0]; n];
        for (j, t) in self.terms.iter().enumerate() {
            let b = beta[j + 1];
            match t {
                CTerm::Main(a) => {
                    for (o, x) in acc.iter_mut().zip(col(a)) {
                        *o += b * x;
                    }
                }
                CTerm::Product(a, c) => {
                    for ((o, x), y) in acc.iter_mut().zip(col(a)).zip(col(c)) {
                        *o += b * x * y;
                    }
                }
                CTerm::Square(a) => {
                    for (o, x) in acc.iter_mut().zip(col(a)) {
                        *o += b * x * x;
                    }
                }
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrRecursion {
    /// Stage outcome-model coefficients; stage `k < K` depends on psi.
    pub coefficients: Vec<DVector<f64>>,
    /// Pseudo-outcomes: predictions with only that stage's treatment set by
    /// the regime.
    pub delta: Vec<Vec<f64>>,
    /// Predictions with every treatment up to that stage set by the regime.
    pub phi: Vec<Vec<f64>>,
}

fn check_outcome_formulas(data: &Dataset, formulas: &[ModelFormula]) -> Result<()> {
    let k_total = data.stages();
    if formulas.len() != k_total {
        return Err(Error::Invalid(format!(
            "{} outcome models for {k_total} stages",
            formulas.len()
        )));
    }
    for (k, f) in formulas.iter().enumerate() {
        let expected = if k + 1 == k_total {
            data.outcome_name()
        } else {
            PSEUDO_OUTCOME
        };
        if f.response != expected {
            return Err(Error::Formula {
                formula: f.to_string(),
                message: format!(
                    "stage {} outcome model must have response `{expected}`",
                    k + 1
                ),
            });
        }
        if f.uses(data.outcome_name()) || f.uses(PSEUDO_OUTCOME) {
            return Err(Error::Formula {
                formula: f.to_string(),
                message: "the response cannot appear as a regressor".into(),
            });
        }
        let later = data.treatment_names()[k + 1..]
            .iter()
            .find(|t| f.uses(t))
            .map(|t| t.to_string());
        if let Some(t) = later {
            return Err(Error::Formula {
                formula: f.to_string(),
                message: format!("stage {} model uses later treatment `{t}`", k + 1),
            });
        }
    }
    Ok(())
}

/// Outcome models prepared for one weight vector pi: the last stage's fit
/// and the factorized designs of the earlier stages.
struct DrModels<'a> {
    n: usize,
    predictors: Vec<LinearPredictor<'a>>,
    solvers: Vec<Option<WlsSolver>>,
    beta_last: DVector<f64>,
}

impl<'a> DrModels<'a> {
    fn new(data: &'a Dataset, formulas: &[ModelFormula], pi: &[f64]) -> Result<Self> {
        check_outcome_formulas(data, formulas)?;
        let k_total = formulas.len();
        let mut predictors = Vec::with_capacity(k_total);
        let mut solvers = Vec::with_capacity(k_total);
        let mut beta_last = None;
        for (k, f) in formulas.iter().enumerate() {
            let ctx = || format!("stage {} outcome model", k + 1);
            predictors.push(LinearPredictor::new(f, data).map_err(|e| e.with_context(ctx()))?);
            let x = model_matrix(f, data).map_err(|e| e.with_context(ctx()))?;
            let labels = f.column_labels();
            if k + 1 == k_total {
                let fit = wls(&x, data.outcome(), pi)
                    .map_err(|e| label_rank_error(e, &labels).with_context(ctx()))?;
                beta_last = Some(fit.coefficients);
                solvers.push(None);
            } else {
                solvers
                    .push(Some(WlsSolver::new(&x, pi).map_err(|e| {
                        label_rank_error(e, &labels).with_context(ctx())
                    })?));
            }
        }
        Ok(Self {
            n: data.n(),
            predictors,
            solvers,
            beta_last: beta_last.expect("at least one stage"),
        })
    }

    fn recursion(&self, enf: &Enforcement) -> DrRecursion {
        let k_total = self.predictors.len();
        let mut coefficients = vec![DVector::zeros(0); k_total];
        let mut delta = vec![Vec::new(); k_total];
        let mut phi = vec![Vec::new(); k_total];
        coefficients[k_total - 1] = self.beta_last.clone();
        for k in (0..k_total).rev() {
            if k + 1 < k_total {
                let solver = self.solvers[k].as_ref().expect("solver for earlier stages");
                coefficients[k] = solver.solve(&delta[k + 1]);
            }
            let beta = &coefficients[k];
            let mut only_k: Vec<Option<&[f64]>> = vec![None; k_total];
            only_k[k] = Some(&enf.treat[k]);
            delta[k] = self.predictors[k].predict(beta, &only_k, self.n);
            let through_k: Vec<Option<&[f64]>> = (0..k_total)
                .map(|j| (j <= k).then(|| enf.treat[j].as_slice()))
                .collect();
            phi[k] = self.predictors[k].predict(beta, &through_k, self.n);
        }
        DrRecursion {
            coefficients,
            delta,
            phi,
        }
    }
}

pub fn fit_dr_recursion(
    data: &Dataset,
    family: &RegimeFamily,
    psi: &[f64],
    outcome_formulas: &[ModelFormula],
    pi: &[f64],
) -> Result<DrRecursion> {
    let enf = family.compile(data)?.enforce(psi)?;
    Ok(DrModels::new(data, outcome_formulas, pi)?.recursion(&enf))
}

/// Model formulas and options defining a value estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModels {
    pub estimator: Estimator,
    pub treatment: Vec<ModelFormula>,
    /// Required for the doubly robust estimator.
    pub outcome: Option<Vec<ModelFormula>>,
    /// Optional truncation of weights at this quantile.
    pub weight_cap: Option<f64>,
}

/// Everything that depends on the Dirichlet weights but not on psi:
/// propensity fits and outcome-model factorizations.
pub struct ValueSurface<'a> {
    data: &'a Dataset,
    regime: CompiledRegime<'a>,
    models: &'a ValueModels,
    pi: Vec<f64>,
    pf: PropensityFit,
    dr: Option<DrModels<'a>>,
}

impl<'a> ValueSurface<'a> {
    pub fn new(
        data: &'a Dataset,
        family: &RegimeFamily,
        models: &'a ValueModels,
        pi: Vec<f64>,
    ) -> Result<Self> {
        let pf = fit_propensities(data, &models.treatment, &pi)?;
        Self::with_propensities(data, family, models, pi, pf)
    }

    pub fn with_propensities(
        data: &'a Dataset,
        family: &RegimeFamily,
        models: &'a ValueModels,
        pi: Vec<f64>,
        pf: PropensityFit,
    ) -> Result<Self> {
        if pi.len() != data.n() {
            return Err(Error::Invalid(format!(
                "{} weights for {} patients",
                pi.len(),
                data.n()
            )));
        }
        let regime = family.compile(data)?;
        let dr = match models.estimator.method {
            Method::Ipw => None,
            Method::Dr => {
                let formulas = models.outcome.as_ref().ok_or_else(|| {
                    Error::Invalid("the doubly robust estimator needs outcome models".into())
                })?;
                Some(DrModels::new(data, formulas, &pi)?)
            }
        };
        Ok(Self {
            data,
            regime,
            models,
            pi,
            pf,
            dr,
        })
    }

    pub fn regime(&self) -> &CompiledRegime<'a> {
        &self.regime
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn propensities(&self) -> &PropensityFit {
        &self.pf
    }

    pub fn value(&self, psi: &[f64]) -> Result<f64> {
        let enf = self.regime.enforce(psi)?;
        self.value_with(psi, &enf)
    }

    /// The estimate at `psi`, given the regime's enforcement there.
    pub fn value_with(&self, psi: &[f64], enf: &Enforcement) -> Result<f64> {
        let wv = weights_from(
            enf,
            &self.pf,
            &self.pi,
            psi,
            self.models.estimator.weights,
            self.models.weight_cap,
        )?;
        let y = self.data.outcome();
        Ok(match &self.dr {
            None => ipw_sum(y, &wv, &self.pi),
            Some(dr) => dr_sum(y, &wv, &dr.recursion(enf).phi, &self.pi),
        })
    }

    /// Estimates over a grid whose enforcements were computed beforehand.
    pub fn value_grid(&self, grid: &Grid, enf: &[Enforcement]) -> Vec<Result<f64>> {
        grid.points
            .par_iter()
            .zip(enf.par_iter())
            .map(|(psi, e)| self.value_with(psi, e))
            .collect()
    }
}

/// Regime enforcement at every grid point; independent of the weights, so
/// it can be shared by all bootstrap draws.
pub fn enforce_grid(regime: &CompiledRegime<'_>, grid: &Grid) -> Result<Vec<Enforcement>> {
    grid.points.par_iter().map(|p| regime.enforce(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsmSpec {
    pub formula: ModelFormula,
    pub grid: Grid,
    pub coefficients: Option<DVector<f64>>,
}

impl MsmSpec {
    pub fn new(formula: ModelFormula, grid: Grid) -> Self {
        Self {
            formula,
            grid,
            coefficients: None,
        }
    }

    /// `h(beta, psi)`.
    pub fn predict(&self, beta: &DVector<f64>, psi: &[f64]) -> f64 {
        let names = &self.grid.names;
        let get = |name: &str| {
            psi[names
                .iter()
                .position(|n| n == name)
                .expect("validated index name")]
        };
        beta[0]
            + self
                .formula
                .terms
                .iter()
                .enumerate()
                .map(|(j, t)| beta[j + 1] * t.value(get))
                .sum::<f64>()
    }
}

fn check_msm(data: &Dataset, family: &RegimeFamily, spec: &MsmSpec) -> Result<()> {
    family.check_names(&spec.grid.names)?;
    if spec.formula.response != data.outcome_name() {
        return Err(Error::Formula {
            formula: spec.formula.to_string(),
            message: format!(
                "the structural model must have response `{}`",
                data.outcome_name()
            ),
        });
    }
    if let Some(v) = spec
        .formula
        .variables()
        .into_iter()
        .find(|v| !spec.grid.names.iter().any(|n| n == v))
    {
        return Err(Error::Formula {
            formula: spec.formula.to_string(),
            message: format!("`{v}` is not a regime index coordinate"),
        });
    }
    Ok(())
}

/// Fits the structural model by weighted least squares over the
/// regime-augmented rows. Since every design row depends only on its grid
/// point, the rows of one grid point are pooled into a single row carrying
/// their total weight and weighted mean outcome; the solution is identical.
pub fn msm_fit_with(
    data: &Dataset,
    spec: &MsmSpec,
    enf: &[Enforcement],
    pf: &PropensityFit,
    pi: &[f64],
) -> Result<DVector<f64>> {
    let y = data.outcome();
    let k_last = data.stages() - 1;
    let mut pooled_w = Vec::with_capacity(spec.grid.len());
    let mut pooled_y = Vec::with_capacity(spec.grid.len());
    for e in enf {
        let (mut sw, mut swy) = (0.0, 0.0);
        for i in 0..data.n() {
            if e.adherent[k_last][i] {
                let w = pi[i] / (0..=k_last).map(|k| pf.received[k][i]).product::<f64>();
                sw += w;
                swy += w * y[i];
            }
        }
        pooled_w.push(sw);
        pooled_y.push(if sw > 0.0 { swy / sw } else { 0.0 });
    }
    if pooled_w.iter().all(|&w| w == 0.0) {
        return Err(Error::Positivity {
            psi: spec.grid.points[0].clone(),
            stage: data.stages(),
        }
        .with_context("no patient adheres to any grid regime"));
    }
    let mut frame = crate::tabular::Frame::new(spec.grid.len());
    for (d, name) in spec.grid.names.iter().enumerate() {
        frame.set(name, spec.grid.points.iter().map(|p| p[d]).collect());
    }
    let x = model_matrix(&spec.formula, &frame)?;
    let fit = wls(&x, &pooled_y, &pooled_w)
        .map_err(|e| label_rank_error(e, &spec.formula.column_labels()))?;
    Ok(fit.coefficients)
}

pub fn msm_fit(
    data: &Dataset,
    family: &RegimeFamily,
    spec: &MsmSpec,
    pf: &PropensityFit,
    pi: &[f64],
) -> Result<MsmSpec> {
    check_msm(data, family, spec)?;
    let regime = family.compile(data)?;
    let enf = enforce_grid(&regime, &spec.grid)?;
    let beta = msm_fit_with(data, spec, &enf, pf, pi)?;
    Ok(MsmSpec {
        coefficients: Some(beta),
        ..spec.clone()
    })
}

pub fn validate_msm(data: &Dataset, family: &RegimeFamily, spec: &MsmSpec) -> Result<()> {
    check_msm(data, family, spec)
}

/// Cap on dense-grid evaluations when the structural model is not a
/// concave quadratic.
const DENSE_BUDGET: usize = 4_000_000;

/// `h = c + b'psi + psi' A psi` when every term has degree at most two.
fn quadratic_form(
    spec: &MsmSpec,
    beta: &DVector<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>, bool)> {
    let names = &spec.grid.names;
    let d = names.len();
    let idx = |n: &str| names.iter().position(|x| x == n);
    let mut b = DVector::zeros(d);
    let mut a = DMatrix::zeros(d, d);
    let mut has_cross = false;
    for (j, t) in spec.formula.terms.iter().enumerate() {
        let c = beta[j + 1];
        match t {
            Term::Main(v) => b[idx(v)?] += c,
            Term::Square(v) => {
                let i = idx(v)?;
                a[(i, i)] += c;
            }
            Term::Interaction(u, v) => {
                let (i, k) = (idx(u)?, idx(v)?);
                a[(i, k)] += c / 2.0;
                a[(k, i)] += c / 2.0;
                has_cross = true;
            }
        }
    }
    Some((b, a, has_cross))
}

/// Maximizer of the fitted structural model over the box.
pub fn msm_argmax(
    spec: &MsmSpec,
    beta: &DVector<f64>,
    lower: &[f64],
    upper: &[f64],
) -> (Vec<f64>, f64) {
    if let Some((b, a, has_cross)) = quadratic_form(spec, beta) {
        if let Some(chol) = (-&a).cholesky() {
            // -A positive definite: h is strictly concave
            let stationary = chol.solve(&b) * 0.5;
            let inside = stationary
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(p, (lo, hi))| lo <= p && p <= hi);
            // without cross terms the problem separates, so clipping each
            // coordinate gives the constrained maximum
            if inside || !has_cross {
                let psi: Vec<f64> = stationary
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(p, (lo, hi))| p.clamp(*lo, *hi))
                    .collect();
                let value = spec.predict(beta, &psi);
                return (psi, value);
            }
        }
    }
    dense_argmax(|p| spec.predict(beta, p), lower, upper)
}

/// Grid maximization at 1/500 of each side (coarser in high dimension),
/// ties to the lexicographically smallest point.
pub fn dense_argmax(f: impl Fn(&[f64]) -> f64, lower: &[f64], upper: &[f64]) -> (Vec<f64>, f64) {
    let d = lower.len();
    let mut steps = 500usize;
    while d > 0
        && (steps + 1)
            .checked_pow(d as u32)
            .is_none_or(|t| t > DENSE_BUDGET)
    {
        steps -= 1;
    }
    let axis = |k: usize, j: usize| {
        if j == steps {
            upper[k]
        } else {
            lower[k] + (upper[k] - lower[k]) * j as f64 / steps as f64
        }
    };
    let total = (steps + 1).pow(d as u32);
    let mut best = (vec![0.0; d], f64::NEG_INFINITY);
    let mut p = vec![0.0; d];
    for mut idx in 0..total {
        // last coordinate varies fastest, so visiting order is lexicographic
        for k in (0..d).rev() {
            p[k] = axis(k, idx % (steps + 1));
            idx /= steps + 1;
        }
        let v = f(&p);
        if v > best.1 {
            best = (p.clone(), v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_formula;
    use approx::assert_abs_diff_eq;

    fn two_stage(z1: &[f64], z2: &[f64], y: &[f64], x: &[f64]) -> Dataset {
        let n = y.len();
        Dataset::new(
            "id",
            (0..n).map(|i| i.to_string()).collect(),
            vec![
                ("x".into(), x.to_vec()),
                ("z1".into(), z1.to_vec()),
                ("z2".into(), z2.to_vec()),
                ("y".into(), y.to_vec()),
            ],
            &["z1", "z2"],
            "y",
        )
        .unwrap()
    }

    fn threshold_family() -> RegimeFamily {
        RegimeFamily::from_strings(
            &["x>=psi1", "x>=psi2"],
            &["psi1", "psi2"],
            &[0.0, 0.0],
            &[10.0, 10.0],
        )
        .unwrap()
    }

    #[test]
    fn adherence_examples() {
        let d = two_stage(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 2.0], &[350.0, 350.0]);
        let fam = RegimeFamily::from_strings(
            &["x>=psi1", "x>=psi2"],
            &["psi1", "psi2"],
            &[200.0; 2],
            &[500.0; 2],
        )
        .unwrap();
        assert!(adheres(&d, &fam, &[335.0, 300.0], 0, 0).unwrap());
        assert!(!adheres(&d, &fam, &[335.0, 300.0], 1, 0).unwrap());
        // follows stage 1, stage 2 rule says treat but z2 = 0
        assert!(!adheres(&d, &fam, &[335.0, 300.0], 0, 1).unwrap());
    }

    #[test]
    fn hand_example_raw_and_normalized() {
        // patients 0 and 1 follow (1,1); 2 and 3 do not
        let d = two_stage(
            &[1.0, 1.0, 0.0, 1.0],
            &[1.0, 1.0, 1.0, 0.0],
            &[10.0, 20.0, 30.0, 40.0],
            &[5.0; 4],
        );
        let pf = PropensityFit::known(&d, &[vec![0.5; 4], vec![0.5; 4]]).unwrap();
        let pi = vec![0.25; 4];
        let fam = threshold_family();
        let psi = [1.0, 1.0];
        let raw = ipw_weights(&d, &fam, &psi, &pf, WeightKind::Raw, &pi).unwrap();
        assert_eq!(raw.last(), &[4.0, 4.0, 0.0, 0.0]);
        assert_abs_diff_eq!(value_ipw(&d, &raw, &pi).value, 30.0, epsilon = 1e-12);
        let norm = ipw_weights(&d, &fam, &psi, &pf, WeightKind::Normalized, &pi).unwrap();
        assert_eq!(norm.last(), &[0.5, 0.5, 0.0, 0.0]);
        assert_abs_diff_eq!(value_ipw(&d, &norm, &pi).value, 15.0, epsilon = 1e-12);
    }

    #[test]
    fn positivity_error_names_stage() {
        let d = two_stage(
            &[0.0, 0.0, 1.0],
            &[0.0, 1.0, 0.0],
            &[1.0, 2.0, 3.0],
            &[5.0; 3],
        );
        let pf = PropensityFit::known(&d, &[vec![0.5; 3], vec![0.5; 3]]).unwrap();
        let err = ipw_weights(
            &d,
            &threshold_family(),
            &[1.0, 1.0],
            &pf,
            WeightKind::Raw,
            &[1.0 / 3.0; 3],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Positivity { stage: 2, .. }));
    }

    #[test]
    fn degenerate_pi_surfaces_single_class() {
        let d = two_stage(
            &[0.0, 1.0, 0.0, 1.0],
            &[0.0, 1.0, 1.0, 0.0],
            &[1.0; 4],
            &[1.0, 2.0, 3.0, 4.0],
        );
        let f = vec![
            parse_formula("z1~1").unwrap(),
            parse_formula("z2~1").unwrap(),
        ];
        let err = fit_propensities(&d, &f, &[1.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(
            matches!(err, Error::Context { ref source, .. } if matches!(**source, Error::SingleClass))
        );
    }

    #[test]
    fn msm_argmax_examples() {
        let grid = Grid::new(vec!["psi1".into()], vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let spec = MsmSpec::new(parse_formula("y~psi1+I(psi1^2)").unwrap(), grid);
        let (p, v) = msm_argmax(
            &spec,
            &DVector::from_vec(vec![0.0, 4.0, -2.0]),
            &[-5.0],
            &[5.0],
        );
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
        let (p, _) = msm_argmax(
            &spec,
            &DVector::from_vec(vec![0.0, 1.0, 2.0]),
            &[-5.0],
            &[5.0],
        );
        assert_eq!(p, vec![5.0]);
    }

    #[test]
    fn dense_argmax_ties_go_lexicographically_first() {
        let (p, v) = dense_argmax(|_| 1.0, &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn grid_product_first_coordinate_fastest() {
        let g = Grid::product(
            vec!["a".into(), "b".into()],
            &[vec![1.0, 2.0], vec![10.0, 20.0]],
        )
        .unwrap();
        assert_eq!(
            g.points,
            vec![
                vec![1.0, 10.0],
                vec![2.0, 10.0],
                vec![1.0, 20.0],
                vec![2.0, 20.0]
            ]
        );
        assert_eq!(seq(200.0, 500.0, 15.0).unwrap().len(), 21);
        assert_eq!(seq(200.0, 500.0, 5.0).unwrap().last(), Some(&500.0));
    }
}

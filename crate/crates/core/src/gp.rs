//! Gaussian-process regression with product Matérn kernels, a trend and
//! variance profiled out of the likelihood, expected improvement, and joint
//! posterior sample paths.
//!
//! The covariance of the responses is `v C` with
//! `C = alpha R + (1 - alpha) I`, where `R` is the correlation matrix of the
//! design, `v` the total variance and `alpha` the signal share of it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::optim::{differential_evolution, nelder_mead, EvolutionOptions, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Kernel {
    #[serde(rename = "matern3_2")]
    Matern32,
    #[serde(rename = "matern5_2")]
    Matern52,
}

impl Kernel {
    /// One-dimensional correlation at distance `dist` with lengthscale `theta`.
    #[inline]
    pub fn correlation1(self, dist: f64, theta: f64) -> f64 {
        let r = dist.abs() / theta;
        match self {
            Kernel::Matern32 => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            Kernel::Matern52 => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
            }
        }
    }

    pub fn correlation(self, a: &[f64], b: &[f64], theta: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(theta)
            .map(|((x, y), t)| self.correlation1(x - y, *t))
            .product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: Kernel,
    pub theta: Vec<f64>,
    pub sigma2_f: f64,
}

pub fn kernel_eval(a: &[f64], b: &[f64], spec: &KernelSpec) -> f64 {
    spec.sigma2_f * spec.kind.correlation(a, b, &spec.theta)
}

/// Independent log-normal priors on the lengthscales.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriorSpec {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

const Z95: f64 = 1.644_853_626_951_472_2;

impl PriorSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.mu.len() != dim || self.sigma.len() != dim {
            return Err(Error::Invalid(format!(
                "prior needs {dim} (mu, sigma) pairs"
            )));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || self.mu.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Invalid(
                "prior sigma must be positive and mu finite".into(),
            ));
        }
        Ok(())
    }

    /// Sum of log-normal log densities at `theta`.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(t, (m, s))| {
                -(t.ln() - m).powi(2) / (2.0 * s * s)
                    - (t * s * (2.0 * std::f64::consts::PI).sqrt()).ln()
            })
            .sum()
    }

    /// Log-normal parameters such that a step of a tenth of `range` has
    /// correlation 0.05 at the 5th percentile lengthscale and 0.95 at the
    /// 95th.
    pub fn elicit(kind: Kernel, range: f64) -> (f64, f64) {
        let step = 0.1 * range;
        let solve = |target: f64| {
            // correlation increases with theta; bisect in log theta
            let (mut lo, mut hi) = ((step * 1e-6).ln(), (step * 1e6).ln());
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if kind.correlation1(step, mid.exp()) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (l05, l95) = (solve(0.05), solve(0.95));
        (0.5 * (l05 + l95), (l95 - l05) / (2.0 * Z95))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpOptions {
    pub kernel: Kernel,
    pub theta_lower: Vec<f64>,
    pub theta_upper: Vec<f64>,
    pub n_starts: usize,
    pub prior: Option<PriorSpec>,
    pub seed: u64,
}

impl GpOptions {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.theta_lower.len() != dim || self.theta_upper.len() != dim {
            return Err(Error::Invalid(format!(
                "lengthscale bounds need {dim} entries"
            )));
        }
        for (l, u) in self.theta_lower.iter().zip(&self.theta_upper) {
            if !(*l > 0.0 && l < u && u.is_finite()) {
                return Err(Error::Invalid(format!(
                    "lengthscale bounds [{l}, {u}] must satisfy 0 < lower < upper"
                )));
            }
        }
        if self.n_starts == 0 {
            return Err(Error::Invalid(
                "at least one optimizer start is required".into(),
            ));
        }
        if let Some(p) = &self.prior {
            p.validate(dim)?;
        }
        Ok(())
    }
}

const JITTER_BASE: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of `c + jitter I`, with the jitter escalated tenfold from
/// `1e-8 trace/m` up to `1e-4 trace/m`.
fn factorize(c: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let m = c.nrows();
    let scale = (c.trace() / m as f64).max(f64::MIN_POSITIVE);
    let mut rel = JITTER_BASE;
    while rel <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = rel * scale;
        let mut cj = c.clone();
        for i in 0..m {
            cj[(i, i)] += jitter;
        }
        if let Some(ch) = cj.cholesky() {
            if ch
                .l_dirty()
                .diagonal()
                .iter()
                .all(|d| *d > 0.0 && d.is_finite())
            {
                return Ok((ch, jitter));
            }
        }
        rel *= 10.0;
    }
    Err(Error::Conditioning(format!(
        "{m}x{m} covariance not positive definite even with relative jitter {JITTER_MAX:e}"
    )))
}

fn correlation_matrix(kind: Kernel, design: &[Vec<f64>], theta: &[f64]) -> DMatrix<f64> {
    let m = design.len();
    let mut r = DMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = kind.correlation(&design[i], &design[j], theta);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// Trend, variance and factorization at fixed `(theta, alpha)`.
struct Profile {
    mu0: f64,
    v: f64,
    nll: f64,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    weights: DVector<f64>,
}

fn profile(
    kind: Kernel,
    design: &[Vec<f64>],
    responses: &[f64],
    theta: &[f64],
    alpha: f64,
) -> Result<Profile> {
    let m = design.len();
    let mut c = correlation_matrix(kind, design, theta) * alpha;
    for i in 0..m {
        c[(i, i)] += 1.0 - alpha;
    }
    let (chol, jitter) = factorize(&c)?;
    let ones = DVector::from_element(m, 1.0);
    let y = DVector::from_column_slice(responses);
    let ci_one = chol.solve(&ones);
    let mu0 = ci_one.dot(&y) / ci_one.dot(&ones);
    let resid = y.add_scalar(-mu0);
    let weights = chol.solve(&resid);
    let v = (resid.dot(&weights) / m as f64).max(0.0);
    let log_det = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let nll = 0.5 * m as f64 * v.max(1e-300).ln() + 0.5 * log_det;
    Ok(Profile {
        mu0,
        v,
        nll,
        chol,
        jitter,
        weights,
    })
}

/// Negative log-likelihood with trend and total variance profiled out,
/// `(m/2) ln v + (1/2) ln det C`, minus the log prior when one is given.
pub fn concentrated_nll(
    theta: &[f64],
    alpha: f64,
    design: &[Vec<f64>],
    responses: &[f64],
    kind: Kernel,
    prior: Option<&PriorSpec>,
) -> Result<f64> {
    check_data(design, responses)?;
    let p = profile(kind, design, responses, theta, alpha)?;
    Ok(p.nll - prior.map_or(0.0, |pr| pr.log_density(theta)))
}

fn check_data(design: &[Vec<f64>], responses: &[f64]) -> Result<()> {
    if design.len() < 2 {
        return Err(Error::Invalid(
            "a Gaussian process needs at least 2 design points".into(),
        ));
    }
    if design.len() != responses.len() {
        return Err(Error::Invalid(format!(
            "{} design points but {} responses",
            design.len(),
            responses.len()
        )));
    }
    let d = design[0].len();
    if d == 0 || design.iter().any(|p| p.len() != d) {
        return Err(Error::Invalid(
            "design points must share a positive dimension".into(),
        ));
    }
    if responses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("responses must be finite".into()));
    }
    Ok(())
}

/// The fitted model's hyperparameters; enough to rebuild the fit exactly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpParams {
    pub kernel: Kernel,
    pub design: Vec<Vec<f64>>,
    pub responses: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: f64,
    pub noise_free: bool,
}

#[derive(Debug, Clone)]
pub struct GpFit {
    params: GpParams,
    mu0: f64,
    v: f64,
    objective: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    /// Variance of the latent value surface.
    pub var_f: f64,
    /// Variance of a new noisy estimate at the point.
    pub var_v: f64,
}

impl GpFit {
    pub fn from_params(params: GpParams) -> Result<Self> {
        check_data(&params.design, &params.responses)?;
        if !(0.0..=1.0).contains(&params.alpha) || (params.noise_free && params.alpha != 1.0) {
            return Err(Error::Invalid(format!(
                "invalid signal share alpha = {}",
                params.alpha
            )));
        }
        if params.theta.len() != params.design[0].len() || params.theta.iter().any(|t| !(*t > 0.0))
        {
            return Err(Error::Invalid(
                "lengthscales must be positive, one per dimension".into(),
            ));
        }
        let p = profile(
            params.kernel,
            &params.design,
            &params.responses,
            &params.theta,
            params.alpha,
        )?;
        Ok(Self {
            params,
            mu0: p.mu0,
            v: p.v,
            objective: p.nll,
            jitter: p.jitter,
            chol: p.chol,
            weights: p.weights,
        })
    }

    pub fn params(&self) -> &GpParams {
        &self.params
    }

    pub fn design(&self) -> &[Vec<f64>] {
        &self.params.design
    }

    pub fn responses(&self) -> &[f64] {
        &self.params.responses
    }

    pub fn theta(&self) -> &[f64] {
        &self.params.theta
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }

    pub fn kernel(&self) -> Kernel {
        self.params.kernel
    }

    pub fn is_noise_free(&self) -> bool {
        self.params.noise_free
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    /// Total variance `sigma_f^2 + gamma^2`.
    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn sigma2_f(&self) -> f64 {
        self.v * self.params.alpha
    }

    pub fn noise_variance(&self) -> f64 {
        self.v * (1.0 - self.params.alpha)
    }

    /// Concentrated negative log-likelihood (without prior) at the fit.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn exact_match(&self, x: &[f64]) -> Option<usize> {
        self.params.design.iter().position(|p| p.as_slice() == x)
    }

    /// Cross-correlations to the design. In noise-free fits the jitter is
    /// part of the signal, so an exact design match carries it too and the
    /// fit interpolates exactly.
    fn cross(&self, x: &[f64]) -> DVector<f64> {
        let mut r = DVector::from_iterator(
            self.params.design.len(),
            self.params
                .design
                .iter()
                .map(|p| self.params.kernel.correlation(x, p, &self.params.theta)),
        );
        if self.params.noise_free {
            if let Some(i) = self.exact_match(x) {
                r[i] += self.jitter;
            }
        }
        r
    }

    pub fn predict(&self, x: &[f64]) -> Prediction {
        let alpha = self.params.alpha;
        let r = self.cross(x);
        let mean = self.mu0 + alpha * r.dot(&self.weights);
        let var_f = if self.params.noise_free && self.exact_match(x).is_some() {
            0.0
        } else {
            let s = self
                .chol
                .l_dirty()
                .solve_lower_triangular(&r)
                .expect("nonsingular factor");
            (self.v * alpha * (1.0 - alpha * s.norm_squared())).max(0.0)
        };
        Prediction {
            mean,
            var_f,
            var_v: var_f + self.noise_variance(),
        }
    }

    /// Noise-free refit through this fit's posterior means at the design.
    pub fn reinterpolate(&self, opts: &GpOptions) -> Result<GpFit> {
        if self.params.noise_free {
            return Ok(self.clone());
        }
        let means: Vec<f64> = self
            .params
            .design
            .iter()
            .map(|x| self.predict(x).mean)
            .collect();
        fit_hyperparams(&self.params.design, &means, opts, true)
    }

    /// Joint posterior draws of the latent surface at `grid`, one row per path.
    pub fn sample_paths(
        &self,
        grid: &[Vec<f64>],
        n_paths: usize,
        seed: u64,
    ) -> Result<DMatrix<f64>> {
        sample_paths(self, grid, n_paths, seed)
    }
}

/// Multi-start bounded Nelder-Mead over `(log theta, alpha)`, or over
/// `log theta` alone with `alpha = 1` when `noise_free`.
pub fn fit_hyperparams(
    design: &[Vec<f64>],
    responses: &[f64],
    opts: &GpOptions,
    noise_free: bool,
) -> Result<GpFit> {
    check_data(design, responses)?;
    let d = design[0].len();
    opts.validate(d)?;
    let mut lower: Vec<f64> = opts.theta_lower.iter().map(|t| t.ln()).collect();
    let mut upper: Vec<f64> = opts.theta_upper.iter().map(|t| t.ln()).collect();
    if !noise_free {
        lower.push(0.0);
        upper.push(1.0);
    }
    let mut rng = crate::rng::rng(opts.seed);
    let starts: Vec<Vec<f64>> = (0..opts.n_starts)
        .map(|_| {
            lower
                .iter()
                .zip(&upper)
                .map(|(l, u)| l + rng.random::<f64>() * (u - l))
                .collect()
        })
        .collect();
    let objective = |x: &[f64]| -> f64 {
        let theta: Vec<f64> = x[..d].iter().map(|v| v.exp()).collect();
        let alpha = if noise_free { 1.0 } else { x[d] };
        concentrated_nll(
            &theta,
            alpha,
            design,
            responses,
            opts.kernel,
            opts.prior.as_ref(),
        )
        .unwrap_or(f64::INFINITY)
    };
    let nm = NelderMeadOptions {
        max_evals: 400 * (lower.len() + 1),
        ftol: 1e-12,
        xtol: 1e-8,
        step: 0.15,
    };
    let results: Vec<(f64, Vec<f64>)> = starts
        .par_iter()
        .map(|s| {
            let m = nelder_mead(objective, s, &lower, &upper, nm);
            (m.f, m.x)
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, (f, _)) in results.iter().enumerate() {
        if f.is_finite() && best.is_none_or(|b| *f < results[b].0) {
            best = Some(i);
        }
    }
    let Some(b) = best else {
        return Err(Error::Conditioning(
            "no optimizer start produced a factorizable covariance".into(),
        ));
    };
    let x = &results[b].1;
    GpFit::from_params(GpParams {
        kernel: opts.kernel,
        design: design.to_vec(),
        responses: responses.to_vec(),
        theta: x[..d].iter().map(|v| v.exp()).collect(),
        alpha: if noise_free { 1.0 } else { x[d] },
        noise_free,
    })
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Expected improvement over `v_max`; zero where the surface is known.
pub fn expected_improvement(fit: &GpFit, x: &[f64], v_max: f64) -> f64 {
    let p = fit.predict(x);
    ei_from(p.mean, p.var_f.sqrt(), v_max)
}

pub fn ei_from(mean: f64, sd: f64, v_max: f64) -> f64 {
    if !(sd > 0.0) {
        return 0.0;
    }
    let n = std_normal();
    let u = (mean - v_max) / sd;
    ((mean - v_max) * n.cdf(u) + sd * n.pdf(u)).max(0.0)
}

/// Global search of expected improvement: differential evolution with
/// most of the budget, then a Nelder-Mead polish from the best point.
pub fn maximize_ei(
    fit: &GpFit,
    lower: &[f64],
    upper: &[f64],
    budget: usize,
    seed: u64,
) -> (Vec<f64>, f64) {
    let v_max = fit
        .responses()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let neg = |x: &[f64]| -expected_improvement(fit, x, v_max);
    let mut rng = crate::rng::rng(seed);
    let global_budget = (budget * 4 / 5).max(10 * lower.len() + 1);
    let de = differential_evolution(
        neg,
        lower,
        upper,
        EvolutionOptions {
            budget: global_budget,
            ..Default::default()
        },
        &mut rng,
    );
    let polish = nelder_mead(
        neg,
        &de.x,
        lower,
        upper,
        NelderMeadOptions {
            max_evals: budget.saturating_sub(de.evals).max(50),
            step: 0.02,
            ..Default::default()
        },
    );
    let (x, f) = if polish.f < de.f {
        (polish.x, polish.f)
    } else {
        (de.x, de.f)
    };
    (x, -f)
}

pub const MAX_PATH_GRID: usize = 2000;

pub fn sample_paths(
    fit: &GpFit,
    grid: &[Vec<f64>],
    n_paths: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let q = grid.len();
    if q == 0 || q > MAX_PATH_GRID {
        return Err(Error::Invalid(format!(
            "path grid has {q} points; 1..={MAX_PATH_GRID} are supported, use a coarser grid"
        )));
    }
    let alpha = fit.alpha();
    let s2 = fit.sigma2_f();
    let m = fit.design().len();
    let mut cross = DMatrix::zeros(m, q);
    let mut mean = DVector::zeros(q);
    for (j, x) in grid.iter().enumerate() {
        let r = fit.cross(x);
        mean[j] = fit.mu0 + alpha * r.dot(&fit.weights);
        cross.set_column(j, &r);
    }
    let v = fit
        .chol
        .l_dirty()
        .solve_lower_triangular(&cross)
        .expect("nonsingular factor");
    let mut cov = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..=i {
            let prior = fit
                .params
                .kernel
                .correlation(&grid[i], &grid[j], fit.theta());
            let c = s2 * (prior - alpha * v.column(i).dot(&v.column(j)));
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    if fit.is_noise_free() {
        // design points are known exactly
        for (j, x) in grid.iter().enumerate() {
            if fit.exact_match(x).is_some() {
                for i in 0..q {
                    cov[(i, j)] = 0.0;
                    cov[(j, i)] = 0.0;
                }
            }
        }
    }
    let scale = (cov.trace() / q as f64)
        .max(1e-10 * s2)
        .max(f64::MIN_POSITIVE);
    let mut rel = JITTER_BASE;
    let chol = loop {
        let mut cj = cov.clone();
        for i in 0..q {
            cj[(i, i)] += rel * scale;
        }
        if let Some(ch) = cj.cholesky() {
            break ch;
        }
        rel *= 10.0;
        if rel > JITTER_MAX * (1.0 + 1e-12) {
            return Err(Error::Conditioning(format!(
                "posterior covariance on {q} grid points is not positive definite; use a coarser grid"
            )));
        }
    };
    let l = chol.l();
    let mut rng = crate::rng::rng(seed);
    let mut out = DMatrix::zeros(n_paths, q);
    for k in 0..n_paths {
        let z = DVector::from_iterator(
            q,
            (0..q).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)),
        );
        let path = &mean + &l * z;
        out.set_row(k, &path.transpose());
    }
    Ok(out)
}

//! Plasmode data generator with a known optimal two-stage regime, and the
//! Monte Carlo oracle for its value surface.
//!
//! Outcome law, with `c0` the baseline CD4 count and `c20` the week-20 count:
//!
//! ```text
//! y = max(0, 0.2 (5 c0 + 6 sex + (9 c0 - 3000) z1 + (9 c20 - 3000) z2))
//! ```
//!
//! Treating is beneficial exactly when the stage's CD4 count exceeds
//! 3000/9, so the optimal thresholds are (333.3, 333.3) whatever the
//! covariate distribution, provided treatment does not change `c20`.
//!
//! Covariate laws (fixed):
//!
//! | column   | law                                              |
//! |----------|--------------------------------------------------|
//! | karnof   | 70/80/90/100 with probabilities .05/.20/.40/.35  |
//! | race     | Bernoulli(0.29)                                  |
//! | gender   | Bernoulli(0.5)                                   |
//! | symptom  | Bernoulli(0.17)                                  |
//! | str2     | Bernoulli(0.59)                                  |
//! | wtkg     | Normal(75, 13) clamped to [40, 160], 0.1 kg      |
//! | cd4.0    | Uniform(200, 500)                                |
//! | cd4.20   | clamp(cd4.0 + drift z1 + Normal(0, sd), 200, 500) |

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::causal::Grid;
use crate::error::{Error, Result};
use crate::regress::logistic;
use crate::tabular::Dataset;

pub const ID: &str = "pidnum";
pub const OUTCOME: &str = "cd4.outcome";
pub const TREATMENTS: [&str; 2] = ["z1", "z2"];
pub const RULES: [&str; 2] = ["cd4.0>=psi1", "cd4.20>=psi2"];
pub const PSI_NAMES: [&str; 2] = ["psi1", "psi2"];
pub const CD4_RANGE: (f64, f64) = (200.0, 500.0);
/// The optimal threshold at both stages.
pub const OPTIMAL_THRESHOLD: f64 = 3000.0 / 9.0;

/// Seed of the oracle's synthetic population.
pub const ORACLE_SEED: u64 = 0x5EED_0AC1E;
pub const ORACLE_PATIENTS: usize = 1_000_000;
/// Oracle value at the step-5 grid optimum under the default simulator
/// settings, computed by [`oracle`] with [`ORACLE_PATIENTS`] patients and
/// [`ORACLE_SEED`].
pub const ORACLE_OPTIMUM_VALUE: f64 = 517.4742759823015;

/// Logistic treatment assignment `P(z_k = 1) = logistic(a_k + b_k cd4_k)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Confounding {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl Default for Confounding {
    fn default() -> Self {
        Self {
            a1: -6.67,
            b1: 0.02,
            a2: -6.67,
            b2: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Stage-1 arm sizes under randomization; their sum is the sample size
    /// in either mode.
    pub n_treated: usize,
    pub n_control: usize,
    pub seed: u64,
    pub confounding: Option<Confounding>,
    /// Shift of the week-20 CD4 count caused by stage-1 treatment.
    pub cd4_drift: f64,
    pub cd4_noise_sd: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_treated: 524,
            n_control: 522,
            seed: 1,
            confounding: None,
            cd4_drift: 0.0,
            cd4_noise_sd: 15.0,
        }
    }
}

impl SimConfig {
    pub fn n(&self) -> usize {
        self.n_treated + self.n_control
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_treated < 2 || self.n_control < 2 {
            return Err(Error::Invalid("each arm needs at least 2 patients".into()));
        }
        if !(self.cd4_noise_sd >= 0.0
            && self.cd4_noise_sd.is_finite()
            && self.cd4_drift.is_finite())
        {
            return Err(Error::Invalid(
                "CD4 drift and noise must be finite, noise nonnegative".into(),
            ));
        }
        Ok(())
    }
}

pub fn outcome(cd4_0: f64, sex: f64, z1: f64, cd4_20: f64, z2: f64) -> f64 {
    (0.2 * (5.0 * cd4_0 + 6.0 * sex + (-3000.0 + 9.0 * cd4_0) * z1 + (-3000.0 + 9.0 * cd4_20) * z2))
        .max(0.0)
}

fn week20(cd4_0: f64, z1: f64, eps: f64, cfg: &SimConfig) -> f64 {
    (cd4_0 + cfg.cd4_drift * z1 + eps).clamp(CD4_RANGE.0, CD4_RANGE.1)
}

fn bernoulli(rng: &mut impl rand::Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n();
    let mut rng = crate::rng::rng(cfg.seed);
    let weight = Normal::new(75.0f64, 13.0).expect("valid normal");
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 11];
    let mut arms: Vec<f64> = std::iter::repeat_n(1.0, cfg.n_treated)
        .chain(std::iter::repeat_n(0.0, cfg.n_control))
        .collect();
    arms.shuffle(&mut rng);
    for &arm in &arms {
        let u: f64 = rng.random();
        let karnof = match u {
            u if u < 0.05 => 70.0,
            u if u < 0.25 => 80.0,
            u if u < 0.65 => 90.0,
            _ => 100.0,
        };
        let race = bernoulli(&mut rng, 0.29);
        let gender = bernoulli(&mut rng, 0.5);
        let symptom = bernoulli(&mut rng, 0.17);
        let str2 = bernoulli(&mut rng, 0.59);
        let wtkg = (weight.sample(&mut rng).clamp(40.0, 160.0) * 10.0).round() / 10.0;
        let cd4_0 = rng.random_range(CD4_RANGE.0..CD4_RANGE.1);
        let eps = cfg.cd4_noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z1 = match cfg.confounding {
            None => arm,
            Some(c) => (u1 < logistic(c.a1 + c.b1 * cd4_0)) as u8 as f64,
        };
        let cd4_20 = week20(cd4_0, z1, eps, cfg);
        let z2 = match cfg.confounding {
            None => (u2 < 0.5) as u8 as f64,
            Some(c) => (u2 < logistic(c.a2 + c.b2 * cd4_20)) as u8 as f64,
        };
        let y = outcome(cd4_0, gender, z1, cd4_20, z2);
        for (col, v) in cols.iter_mut().zip([
            karnof, race, gender, symptom, str2, wtkg, cd4_0, z1, cd4_20, z2, y,
        ]) {
            col.push(v);
        }
    }
    let names = [
        "karnof", "race", "gender", "symptom", "str2", "wtkg", "cd4.0", "z1", "cd4.20", "z2",
        OUTCOME,
    ];
    Dataset::new(
        ID,
        (1..=n).map(|i| i.to_string()).collect(),
        names.iter().map(|s| s.to_string()).zip(cols).collect(),
        &TREATMENTS,
        OUTCOME,
    )
}

/// The assignment probabilities `P(z_k = 1)` that generated `data`.
pub fn true_treatment_probabilities(data: &Dataset, cfg: &SimConfig) -> Result<Vec<Vec<f64>>> {
    let col = |name: &str| data.column_at(data.column_index(name).expect("simulator column"));
    let stage = |x: &[f64], a: f64, b: f64| x.iter().map(|v| logistic(a + b * v)).collect();
    Ok(match cfg.confounding {
        None => {
            let share = cfg.n_treated as f64 / cfg.n() as f64;
            vec![vec![share; data.n()], vec![0.5; data.n()]]
        }
        Some(c) => vec![
            stage(col("cd4.0"), c.a1, c.b1),
            stage(col("cd4.20"), c.a2, c.b2),
        ],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSurface {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl OracleSurface {
    /// Maximizing grid point, ties to the lowest index.
    pub fn argmax(&self) -> (Vec<f64>, f64) {
        let mut best = 0;
        for (j, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = j;
            }
        }
        (self.grid.points[best].clone(), self.values[best])
    }
}

struct Population {
    cd4_0: Vec<f64>,
    sex: Vec<f64>,
    eps: Vec<f64>,
}

fn population(cfg: &SimConfig, patients: usize, seed: u64) -> Population {
    let mut rng = crate::rng::rng(seed);
    let mut p = Population {
        cd4_0: Vec::with_capacity(patients),
        sex: Vec::with_capacity(patients),
        eps: Vec::with_capacity(patients),
    };
    for _ in 0..patients {
        p.cd4_0.push(rng.random_range(CD4_RANGE.0..CD4_RANGE.1));
        p.sex.push(bernoulli(&mut rng, 0.5));
        p.eps
            .push(cfg.cd4_noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    }
    p
}

/// Mean outcome when the whole synthetic population follows the
/// threshold regime at every `(psi1, psi2)` of the product grid.
/// Common random numbers are used across regimes.
pub fn oracle(
    cfg: &SimConfig,
    axis1: &[f64],
    axis2: &[f64],
    patients: usize,
    seed: u64,
) -> Result<OracleSurface> {
    cfg.validate()?;
    if patients == 0 || axis1.is_empty() || axis2.is_empty() {
        return Err(Error::Invalid(
            "oracle needs patients and nonempty axes".into(),
        ));
    }
    let mut sorted2 = axis2.to_vec();
    sorted2.sort_by(f64::total_cmp);
    if sorted2 != axis2 {
        return Err(Error::Invalid("oracle axes must be increasing".into()));
    }
    let pop = population(cfg, patients, seed);
    // columns[j1][j2]
    let columns: Vec<Vec<f64>> = axis1
        .par_iter()
        .map(|&psi1| {
            let mut base = 0.0;
            // bump[p]: extra outcome for patients treated at stage 2 under
            // exactly the first p thresholds of axis2
            let mut bump = vec![0.0; axis2.len() + 1];
            for i in 0..patients {
                let c0 = pop.cd4_0[i];
                let z1 = (c0 >= psi1) as u8 as f64;
                let c20 = week20(c0, z1, pop.eps[i], cfg);
                let untreated = outcome(c0, pop.sex[i], z1, c20, 0.0);
                let treated = outcome(c0, pop.sex[i], z1, c20, 1.0);
                base += untreated;
                bump[axis2.partition_point(|t| *t <= c20)] += treated - untreated;
            }
            let mut out = vec![0.0; axis2.len()];
            let mut tail = 0.0;
            for j in (0..axis2.len()).rev() {
                tail += bump[j + 1];
                out[j] = (base + tail) / patients as f64;
            }
            out
        })
        .collect();
    let grid = Grid::product(
        PSI_NAMES.iter().map(|s| s.to_string()).collect(),
        &[axis1.to_vec(), axis2.to_vec()],
    )?;
    let values = grid
        .points
        .iter()
        .enumerate()
        .map(|(idx, _)| columns[idx % axis1.len()][idx / axis1.len()])
        .collect();
    Ok(OracleSurface { grid, values })
}

/// Oracle value of a single regime.
pub fn oracle_value(cfg: &SimConfig, psi: [f64; 2], patients: usize, seed: u64) -> Result<f64> {
    Ok(oracle(cfg, &[psi[0]], &[psi[1]], patients, seed)?.values[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_law_examples() {
        assert!((outcome(400.0, 1.0, 1.0, 400.0, 0.0) - 521.2).abs() < 1e-9);
        assert_eq!(outcome(0.0, 0.0, 0.0, 0.0, 0.0), 0.0);
        assert!((outcome(300.0, 0.0, 1.0, 300.0, 1.0) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn randomized_arms_have_fixed_sizes() {
        let d = simulate(&SimConfig::default()).unwrap();
        assert_eq!(d.n(), 1046);
        assert_eq!(d.treatment(0).iter().sum::<f64>(), 524.0);
        let c0 = d.column_at(d.column_index("cd4.0").unwrap());
        assert!(c0.iter().all(|v| (200.0..500.0).contains(v)));
    }

    #[test]
    fn simulation_is_seeded() {
        let cfg = SimConfig::default();
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let other = SimConfig {
            seed: 2,
            ..cfg.clone()
        };
        assert_ne!(simulate(&cfg).unwrap(), simulate(&other).unwrap());
    }

    #[test]
    fn oracle_matches_direct_average() {
        let cfg = SimConfig::default();
        let axis = [250.0, 333.0, 420.0];
        let surf = oracle(&cfg, &axis, &axis, 2000, 9).unwrap();
        let pop = population(&cfg, 2000, 9);
        for (p, v) in surf.grid.points.iter().zip(&surf.values) {
            let direct: f64 = (0..2000)
                .map(|i| {
                    let c0 = pop.cd4_0[i];
                    let z1 = (c0 >= p[0]) as u8 as f64;
                    let c20 = week20(c0, z1, pop.eps[i], &cfg);
                    let z2 = (c20 >= p[1]) as u8 as f64;
                    outcome(c0, pop.sex[i], z1, c20, z2)
                })
                .sum::<f64>()
                / 2000.0;
            assert!((direct - v).abs() < 1e-9, "{p:?}: {direct} vs {v}");
        }
    }

    #[test]
    fn oracle_ignores_assignment_mechanism() {
        let axis = [300.0, 335.0];
        let a = oracle(&SimConfig::default(), &axis, &axis, 5000, 3).unwrap();
        let conf = SimConfig {
            confounding: Some(Confounding::default()),
            ..SimConfig::default()
        };
        let b = oracle(&conf, &axis, &axis, 5000, 3).unwrap();
        assert_eq!(a, b);
    }
}

//! Box-constrained derivative-free minimizers: Nelder-Mead for local
//! search and differential evolution for global search.

use rand::Rng as _;

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// Best objective value after each iteration; never increases.
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// NaN objective values rank as +inf.
fn sane(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the simplex spread in objective falls below this.
    pub ftol: f64,
    /// Stop when every vertex is within this of the best (box-relative).
    pub xtol: f64,
    /// Initial simplex edge as a fraction of each box side.
    pub step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            ftol: 1e-10,
            xtol: 1e-9,
            step: 0.1,
        }
    }
}

/// Nelder-Mead with every trial point projected onto the box.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: NelderMeadOptions,
) -> Minimum {
    let d = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sane(f(x))
    };
    let width: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
    let mut start = x0.to_vec();
    project(&mut start, lower, upper);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let f0 = eval(&start, &mut evals);
    simplex.push((start.clone(), f0));
    for k in 0..d {
        let mut p = start.clone();
        let h = opts.step * width[k];
        // step inward when the start sits on the upper face
        p[k] = if p[k] + h <= upper[k] {
            p[k] + h
        } else {
            p[k] - h
        };
        project(&mut p, lower, upper);
        let fp = eval(&p, &mut evals);
        simplex.push((p, fp));
    }
    let mut trace = Vec::new();
    let by_value = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| a.1.total_cmp(&b.1);
    while evals < opts.max_evals {
        simplex.sort_by(by_value);
        trace.push(simplex[0].1);
        let spread = simplex[d].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(p, _)| {
                p.iter()
                    .zip(&simplex[0].0)
                    .zip(&width)
                    .map(|((a, b), w)| (a - b).abs() / w.max(1e-300))
            })
            .fold(0.0, f64::max);
        let flat = spread.is_finite() && spread <= opts.ftol * (1.0 + simplex[0].1.abs());
        if size <= opts.xtol || (flat && size <= 1e-4) {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|(p, _)| p[k]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[d].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut p, lower, upper);
            p
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = best
                        .iter()
                        .zip(&v.0)
                        .map(|(b, x)| b + 0.5 * (x - b))
                        .collect();
                    project(&mut p, lower, upper);
                    let fp = eval(&p, &mut evals);
                    *v = (p, fp);
                }
            }
        }
    }
    simplex.sort_by(by_value);
    trace.push(simplex[0].1);
    let (x, f) = simplex.swap_remove(0);
    Minimum { x, f, evals, trace }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionOptions {
    /// Population size per dimension.
    pub pop_per_dim: usize,
    pub mutation: f64,
    pub crossover: f64,
    /// Total objective evaluations.
    pub budget: usize,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        Self {
            pop_per_dim: 10,
            mutation: 0.8,
            crossover: 0.9,
            budget: 2000,
        }
    }
}

/// DE/rand/1/bin over the box.
pub fn differential_evolution(
    mut f: impl FnMut(&[f64]) -> f64,
    lower: &[f64],
    upper: &[f64],
    opts: EvolutionOptions,
    rng: &mut Rng,
) -> Minimum {
    let d = lower.len();
    let np = (opts.pop_per_dim * d).max(4);
    let mut evals = 0;
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| {
            (0..d)
                .map(|k| lower[k] + rng.random::<f64>() * (upper[k] - lower[k]))
                .collect()
        })
        .collect();
    let mut fit: Vec<f64> = pop
        .iter()
        .map(|p| {
            evals += 1;
            sane(f(p))
        })
        .collect();
    let best_of = |fit: &[f64]| {
        let mut b = 0;
        for (i, v) in fit.iter().enumerate() {
            if *v < fit[b] {
                b = i;
            }
        }
        b
    };
    let mut trace = vec![fit[best_of(&fit)]];
    'outer: while evals < opts.budget {
        for i in 0..np {
            if evals >= opts.budget {
                break 'outer;
            }
            let mut pick = || loop {
                let j = rng.random_range(0..np);
                if j != i {
                    return j;
                }
            };
            let (a, b, c) = loop {
                let (a, b, c) = (pick(), pick(), pick());
                if a != b && b != c && a != c {
                    break (a, b, c);
                }
            };
            let forced = rng.random_range(0..d);
            let mut trial = pop[i].clone();
            for k in 0..d {
                if k == forced || rng.random::<f64>() < opts.crossover {
                    let v = pop[a][k] + opts.mutation * (pop[b][k] - pop[c][k]);
                    // reflect back into the box, falling back to a uniform draw
                    trial[k] = if v < lower[k] || v > upper[k] {
                        lower[k] + rng.random::<f64>() * (upper[k] - lower[k])
                    } else {
                        v
                    };
                }
            }
            let ft = sane(f(&trial));
            evals += 1;
            if ft <= fit[i] {
                pop[i] = trial;
                fit[i] = ft;
            }
        }
        trace.push(fit[best_of(&fit)]);
    }
    let b = best_of(&fit);
    Minimum {
        x: pop.swap_remove(b),
        f: fit[b],
        evals,
        trace,
    }
}

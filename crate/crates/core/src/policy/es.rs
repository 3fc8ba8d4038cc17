//! Antithetic evolution strategies with centered-rank fitness shaping.

use crate::error::{invalid, Result};
use crate::numerics::{normal, RngStream};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EsConfig {
    /// Perturbations per iteration; even when antithetic.
    pub population: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    pub antithetic: bool,
    pub rank_normalize: bool,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            population: 32,
            sigma: 0.05,
            learning_rate: 0.03,
            antithetic: true,
            rank_normalize: true,
            iterations: 50,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return invalid(format!("population must be >= 2, got {}", self.population));
        }
        if self.antithetic && self.population % 2 != 0 {
            return invalid(format!(
                "antithetic sampling needs an even population, got {}",
                self.population
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return invalid(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }
}

/// Ranks mapped to `[-0.5, 0.5]`, ties sharing their mean rank.
pub fn centered_ranks<T: Real>(f: &[T]) -> Vec<T> {
    let n = f.len();
    if n < 2 {
        return vec![T::zero(); n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![T::zero(); n];
    let denom = T::from_usize_lossy(n - 1);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && f[idx[j + 1]] == f[idx[i]] {
            j += 1;
        }
        let rank = T::from_usize_lossy(i + j) / T::lit(2.0);
        for &k in &idx[i..=j] {
            out[k] = rank / denom - T::lit(0.5);
        }
        i = j + 1;
    }
    out
}

/// Result of one ES iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct EsStep<T> {
    pub params: Vec<T>,
    pub gradient: Vec<T>,
    /// Mean and max raw objective over the perturbed population.
    pub mean_fitness: T,
    pub max_fitness: T,
}

/// One ascent step on `objective` around `theta`; perturbations come from
/// stream `iteration` of `cfg.seed`.
pub fn es_step<T: Real, F: FnMut(&[T]) -> Result<T>>(
    mut objective: F,
    theta: &[T],
    cfg: &EsConfig,
    iteration: u64,
) -> Result<EsStep<T>> {
    cfg.validate()?;
    let dim = theta.len();
    let mut rng = RngStream::new(cfg.seed, iteration).generator();
    let draws = if cfg.antithetic {
        cfg.population / 2
    } else {
        cfg.population
    };
    let sigma = T::lit(cfg.sigma);
    let mut eps: Vec<Vec<T>> = Vec::with_capacity(cfg.population);
    for _ in 0..draws {
        let e: Vec<T> = (0..dim).map(|_| normal(&mut rng)).collect();
        if cfg.antithetic {
            eps.push(e.iter().map(|&x| -x).collect());
        }
        eps.push(e);
    }
    let mut fitness = Vec::with_capacity(eps.len());
    let mut probe = vec![T::zero(); dim];
    for e in &eps {
        for ((p, &t), &x) in probe.iter_mut().zip(theta).zip(e) {
            *p = t + sigma * x;
        }
        let f = objective(&probe)?;
        if !f.is_finite() {
            return Err(crate::IapError::Degenerate(format!(
                "objective returned {f}"
            )));
        }
        fitness.push(f);
    }
    let n = T::from_usize_lossy(fitness.len());
    let mean_fitness = fitness.iter().copied().sum::<T>() / n;
    let max_fitness = fitness.iter().copied().fold(T::neg_infinity(), T::max);
    let weights = if cfg.rank_normalize {
        centered_ranks(&fitness)
    } else {
        fitness.iter().map(|&f| f - mean_fitness).collect()
    };
    let mut gradient = vec![T::zero(); dim];
    for (w, e) in weights.iter().zip(&eps) {
        for (g, &x) in gradient.iter_mut().zip(e) {
            *g += *w * x;
        }
    }
    let scale = T::one() / (sigma * n);
    let lr = T::lit(cfg.learning_rate);
    let mut params = theta.to_vec();
    for (p, g) in params.iter_mut().zip(gradient.iter_mut()) {
        *g *= scale;
        *p += lr * *g;
    }
    Ok(EsStep {
        params,
        gradient,
        mean_fitness,
        max_fitness,
    })
}

/// Runs `cfg.iterations` steps from `theta0`, reporting each.
pub fn es_optimize<T: Real, F: FnMut(&[T]) -> Result<T>>(
    mut objective: F,
    theta0: &[T],
    cfg: &EsConfig,
    mut on_step: impl FnMut(u64, &EsStep<T>),
) -> Result<Vec<T>> {
    let mut theta = theta0.to_vec();
    for it in 0..cfg.iterations as u64 {
        let step = es_step(&mut objective, &theta, cfg, it)?;
        on_step(it, &step);
        theta = step.params;
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_ranks_basics() {
        assert_eq!(centered_ranks(&[3.0, 1.0, 2.0]), vec![0.5, -0.5, 0.0]);
        assert_eq!(centered_ranks(&[1.0, 1.0]), vec![0.0, 0.0]);
        let r = centered_ranks(&[5.0, 2.0, 2.0, 9.0]);
        assert!((r.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        let odd = EsConfig {
            population: 5,
            ..EsConfig::default()
        };
        assert!(odd.validate().is_err());
        assert!(EsConfig {
            antithetic: false,
            ..odd
        }
        .validate()
        .is_ok());
        assert!(EsConfig {
            sigma: 0.0,
            ..EsConfig::default()
        }
        .validate()
        .is_err());
        assert!(es_step(|_: &[f64]| Ok(0.0), &[1.0], &odd, 0).is_err());
    }

    #[test]
    fn quadratic_converges_and_is_reproducible() {
        let cfg = EsConfig {
            population: 64,
            sigma: 0.1,
            learning_rate: 0.05,
            iterations: 200,
            ..EsConfig::default()
        };
        let f = |t: &[f64]| Ok(-t.iter().map(|x| x * x).sum::<f64>());
        let mut trace_a = Vec::new();
        let a = es_optimize(f, &[5.0, 5.0], &cfg, |_, s| trace_a.push(s.params.clone())).unwrap();
        let mut trace_b = Vec::new();
        es_optimize(f, &[5.0, 5.0], &cfg, |_, s| trace_b.push(s.params.clone())).unwrap();
        assert_eq!(trace_a, trace_b);
        assert!(a.iter().map(|x| x * x).sum::<f64>().sqrt() < 0.5, "{a:?}");
    }
}

//! ES training and evaluation of toy-task policies.

use std::time::Instant;

use super::es::{es_step, EsConfig};
use super::{run_episode, EnvConfig, Policy, PolicyGenome, TextureSet, ToyVisionEnv};
use crate::error::{invalid, Result};
use crate::numerics::RngStream;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: EnvConfig,
    /// Episodes averaged per fitness evaluation, shared by the population.
    pub episodes: usize,
    pub es: EsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            episodes: 4,
            es: EsConfig::default(),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRow {
    pub iter: u64,
    pub mean_return: f64,
    pub max_return: f64,
    pub wallclock_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub genome: PolicyGenome<T>,
    pub log: Vec<TrainLogRow>,
}

/// Mean return of `genome` over `episodes` episodes from `seed`.
pub fn evaluate<T: Real>(
    policy: &Policy<T>,
    genome: &PolicyGenome<T>,
    env: EnvConfig,
    textures: TextureSet,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return invalid("need at least one episode");
    }
    let bound = policy.bind(genome)?;
    let mut e = ToyVisionEnv::new(EnvConfig { textures, ..env })?;
    let mut total = 0.0;
    for i in 0..episodes as u64 {
        let mut rng = RngStream::new(seed, i).generator();
        e.reset(&mut rng)?;
        total += run_episode(&mut e, &bound, &mut rng)?;
    }
    Ok(total / episodes as f64)
}

/// Trains from a seeded initialization on training textures.
pub fn train_policy<T: Real>(
    policy: &Policy<T>,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome<T>> {
    cfg.es.validate()?;
    let start = Instant::now();
    let mut genome = PolicyGenome::init(
        policy.layout().clone(),
        &RngStream::new(cfg.es.seed, u64::MAX),
    )?;
    let mut log = Vec::with_capacity(cfg.es.iterations);
    for it in 0..cfg.es.iterations as u64 {
        let episode_seed = RngStream::new(cfg.es.seed, it).substream(0xe915).stream();
        let objective = |theta: &[T]| {
            let g = genome.with_params(theta.to_vec())?;
            Ok(T::lit(evaluate(
                policy,
                &g,
                cfg.env,
                TextureSet::Train,
                cfg.episodes,
                episode_seed,
            )?))
        };
        let step = es_step(objective, genome.params(), &cfg.es, it)?;
        genome = genome.with_params(step.params)?;
        let row = TrainLogRow {
            iter: it,
            mean_return: step.mean_fitness.to_f64_lossy(),
            max_return: step.max_fitness.to_f64_lossy(),
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_iter(&row);
        log.push(row);
    }
    Ok(TrainOutcome { genome, log })
}

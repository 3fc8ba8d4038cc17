//! One function per subcommand; each writes a CSV to `out`.

use std::fs::File;
use std::io::{BufWriter, Write};

use iap_core::attention::{AttentionMode, BRUTE_FORCE_CAP};
use iap_core::diversity::{
    diversity_det, head_gram, head_outputs, joint_loss, log_diversity, multi_head_attention, DiversitySign,
    GramKernel, HeadSet,
};
use iap_core::flow::{permutation_order, sort_with_flow, SortingOptions};
use iap_core::numerics::gaussian_matrix;
use iap_core::policy::{
    evaluate, read_checkpoint, toy_policy_config, train_policy, write_checkpoint, EnvConfig, EsConfig, Policy,
    PolicyGenome, TextureSet, TrainConfig,
};
use iap_core::{IapError, RngStream};
use rand::Rng;

use crate::config::{Command, RunConfig};
use crate::experiments::{bench_point, median, scene_queries_keys, score_agreement, BenchRecord};
use crate::output::CsvWriter;
use crate::CliError;

/// Seed of the random feature projections inside trained policies, fixed
/// so that checkpoints stay loadable under any run seed.
pub const POLICY_FEATURE_SEED: u64 = 0;

pub fn run(cfg: &RunConfig, out: impl Write) -> Result<(), CliError> {
    match cfg.command {
        Command::Bench => bench(cfg, out),
        Command::Accuracy => accuracy(cfg, out),
        Command::Train => train(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Diversity => diversity(cfg, out),
        Command::Flow => flow(cfg, out),
    }
}

/// Runs `cfg` writing to `cfg.out` or stdout.
pub fn run_to_destination(cfg: &RunConfig) -> Result<(), CliError> {
    match &cfg.out {
        Some(path) => run(cfg, BufWriter::new(File::create(path)?)),
        None => run(cfg, std::io::stdout().lock()),
    }
}

pub fn bench(cfg: &RunConfig, out: impl Write) -> Result<(), CliError> {
    if cfg.lengths.is_empty() {
        return Err(IapError::InvalidArgument("empty L list".into()).into());
    }
    let mut w = CsvWriter::new(out, BenchRecord::HEADER, &cfg.describe())?;
    for &len in &cfg.lengths {
        for &kernel in &cfg.kernels {
            for rec in bench_point(len, kernel, cfg.m, cfg.d_qk, cfg.d_v, cfg.repeats, cfg.seed, cfg.brute_force_cap)? {
                w.row(&rec.csv_row())?;
            }
        }
    }
    w.finish()?;
    Ok(())
}

pub const ACCURACY_HEADER: &str = "m,kernel,L,overlap,score_max_abs_err,mse";

pub fn accuracy(cfg: &RunConfig, out: impl Write) -> Result<(), CliError> {
    let grid = cfg.image_size / 4;
    let len = grid * grid;
    let cap = cfg.brute_force_cap.min(BRUTE_FORCE_CAP);
    if len > cap {
        return Err(IapError::ResourceGuard(format!("exact oracle over L = {len} exceeds the cap {cap}")).into());
    }
    if cfg.top_l > len {
        return Err(CliError::Config(format!("top_l = {} exceeds L = {len}", cfg.top_l)));
    }
    let mut w = CsvWriter::new(out, ACCURACY_HEADER, &cfg.describe())?;
    let inputs: Vec<_> = (0..cfg.trials as u64)
        .map(|t| scene_queries_keys(cfg.image_size, cfg.d_qk, cfg.seed.wrapping_add(t)))
        .collect::<Result<_, _>>()?;
    for &kernel in &cfg.kernels {
        for &m in &cfg.m_list {
            let (mut ov, mut err, mut mse) = (Vec::new(), Vec::new(), Vec::new());
            for (t, (q, k)) in inputs.iter().enumerate() {
                let a = score_agreement(q, k, kernel, m, cfg.top_l, RngStream::new(cfg.seed, t as u64), cap)?;
                ov.push(a.overlap);
                err.push(a.max_abs_err);
                mse.push(a.mse);
            }
            w.row(&format!(
                "{m},{},{len},{},{:.6e},{:.6e}",
                kernel.name(),
                median(ov),
                median(err),
                median(mse)
            ))?;
        }
    }
    w.finish()?;
    Ok(())
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        env: EnvConfig {
            size: cfg.view_size,
            horizon: cfg.horizon,
            ..EnvConfig::default()
        },
        episodes: cfg.episodes,
        es: EsConfig {
            population: cfg.population,
            sigma: cfg.sigma,
            learning_rate: cfg.learning_rate,
            iterations: cfg.iterations,
            seed,
            ..EsConfig::default()
        },
    }
}

fn toy_policy(cfg: &RunConfig, patch_size: usize) -> Result<Policy<f64>, CliError> {
    if cfg.view_size % patch_size != 0 {
        return Err(CliError::Config(format!(
            "patch size {patch_size} does not tile a {0}x{0} view",
            cfg.view_size
        )));
    }
    Ok(Policy::new(toy_policy_config(cfg.view_size, patch_size, cfg.l, POLICY_FEATURE_SEED)?)?)
}

pub const TRAIN_LOG_HEADER: &str = "iter,mean_return,max_return,wallclock_ms";
pub const ABLATION_HEADER: &str = "patch_size,params,train_return,test_return,checksum";

/// Trains one policy (log to `out`, genome to `checkpoint`), or with
/// `patch_sizes` set, one policy per size with a summary row each.
pub fn train(cfg: &RunConfig, out: impl Write) -> Result<(), CliError> {
    let env = train_config(cfg, cfg.seed).env;
    if !cfg.patch_sizes.is_empty() {
        let mut w = CsvWriter::new(out, ABLATION_HEADER, &cfg.describe())?;
        for &p in &cfg.patch_sizes {
            let policy = toy_policy(cfg, p)?;
            let outcome = train_policy(&policy, &train_config(cfg, cfg.seed), |_| {})?;
            let eval_seed = cfg.seed.wrapping_add(0xe7a1);
            let tr = evaluate(&policy, &outcome.genome, env, TextureSet::Train, cfg.eval_episodes, eval_seed)?;
            let te = evaluate(&policy, &outcome.genome, env, TextureSet::Test, cfg.eval_episodes, eval_seed)?;
            w.row(&format!(
                "{p},{},{tr:.6},{te:.6},{:016x}",
                policy.layout().total(),
                outcome.genome.checksum()
            ))?;
        }
        w.finish()?;
        return Ok(());
    }
    let policy = toy_policy(cfg, cfg.patch_size)?;
    let mut w = CsvWriter::new(out, TRAIN_LOG_HEADER, &cfg.describe())?;
    let mut io_err = None;
    let outcome = train_policy(&policy, &train_config(cfg, cfg.seed), |r| {
        if io_err.is_none() {
            io_err = w
                .row(&format!("{},{:.6},{:.6},{:.1}", r.iter, r.mean_return, r.max_return, r.wallclock_ms))
                .err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.finish()?;
    if let Some(path) = &cfg.checkpoint {
        write_checkpoint(&outcome.genome, BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

pub const EVAL_HEADER: &str = "checksum,episodes,train_return,test_return";

pub fn eval(cfg: &RunConfig, out: impl Write) -> Result<(), CliError> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| CliError::Config("missing required key(s): checkpoint".into()))?;
    let file = File::open(path).map_err(|e| IapError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let genome: PolicyGenome<f64> = read_checkpoint(std::io::BufReader::new(file))?;
    let policy = toy_policy(cfg, cfg.patch_size)?;
    let env = train_config(cfg, cfg.seed).env;
    let tr = evaluate(&policy, &genome, env, TextureSet::Train, cfg.eval_episodes, cfg.seed)?;
    let te = evaluate(&policy, &genome, env, TextureSet::Test, cfg.eval_episodes, cfg.seed)?;
    let mut w = CsvWriter::new(out, EVAL_HEADER, &cfg.describe())?;
    w.row(&format!("{:016x},{},{tr:.6},{te:.6}", genome.checksum(), cfg.eval_episodes))?;
    w.finish()?;
    Ok(())
}

pub const DIVERSITY_HEADER: &str = "lambda,task_loss,det,logdet,joint_loss";

/// Loss sweep over `lambdas` for a toy multi-head layer on random tokens.
pub fn diversity(cfg: &RunConfig, out: impl Write) -> Result<(), CliError> {
    const TOKENS: usize = 16;
    let s = RngStream::new(cfg.seed, 0xd17);
    let mut heads = HeadSet::random(cfg.heads, cfg.d_v, cfg.d_qk, cfg.d_v, cfg.d_v, &s.substream(0))?;
    if cfg.duplicate_head {
        let mut hs = heads.heads().to_vec();
        hs[1] = hs[0].clone();
        heads = HeadSet::new(hs, heads.w_o().clone())?;
    }
    let x = gaussian_matrix::<f64>(TOKENS, cfg.d_v, &s.substream(1))?;
    let target = gaussian_matrix::<f64>(TOKENS, cfg.d_v, &s.substream(2))?;
    let y = multi_head_attention(&x, &x, &heads)?;
    let task = y.sub(&target)?.frobenius().powi(2) / TOKENS as f64;
    let gram = head_gram(&head_outputs(&x, &x, &heads)?, GramKernel::Rbf(None))?;
    let det = diversity_det(&gram)?;
    let logdet = log_diversity(&gram)?;
    let mut w = CsvWriter::new(out, DIVERSITY_HEADER, &cfg.describe())?;
    for &lambda in &cfg.lambdas {
        let joint = joint_loss(task, &gram, lambda, DiversitySign::Encourage)?;
        w.row(&format!("{lambda},{task:.12e},{det:.12e},{logdet:.12e},{joint:.12e}"))?;
    }
    w.finish()?;
    Ok(())
}

pub const FLOW_HEADER: &str = "instance,n,steps,matched,status";

/// Sorting-flow runs on random score vectors against argsort.
pub fn flow(cfg: &RunConfig, out: impl Write) -> Result<(), CliError> {
    let mut w = CsvWriter::new(out, FLOW_HEADER, &cfg.describe())?;
    for i in 0..cfg.instances {
        let mut rng = RngStream::new(cfg.seed, i as u64).generator();
        let scores: Vec<f64> = (0..cfg.n).map(|_| rng.random()).collect();
        let mut want: Vec<usize> = (0..cfg.n).collect();
        want.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        match sort_with_flow(&scores, cfg.budget, SortingOptions::default()) {
            Ok(run) => {
                let matched = permutation_order(&run.permutation) == want;
                w.row(&format!("{i},{},{},{matched},converged", cfg.n, run.steps))?;
            }
            Err(IapError::Convergence(_)) => w.row(&format!("{i},{},{},false,not_converged", cfg.n, cfg.budget))?,
            Err(e) => return Err(e.into()),
        }
    }
    w.finish()?;
    Ok(())
}

/// Masking and compression differ only in the controller input width.
pub fn mode_input_widths(cfg: &RunConfig) -> Result<(usize, usize), CliError> {
    let mut c = toy_policy_config::<f64>(cfg.view_size, cfg.patch_size, cfg.l, POLICY_FEATURE_SEED)?;
    let compress = c.controller_input()?;
    c.attention.mode = AttentionMode::RankMask;
    Ok((compress, c.controller_input()?))
}

//! Flat `key=value` run configuration, one pair per line, `#` comments.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    Bench,
    Accuracy,
    Train,
    Eval,
    Diversity,
    Flow,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Bench,
        Command::Accuracy,
        Command::Train,
        Command::Eval,
        Command::Diversity,
        Command::Flow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Bench => "bench",
            Command::Accuracy => "accuracy",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Diversity => "diversity",
            Command::Flow => "flow",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kernel named in a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelChoice {
    Positive,
    Trig,
    Relu,
}

impl KernelChoice {
    pub fn name(self) -> &'static str {
        match self {
            KernelChoice::Positive => "positive",
            KernelChoice::Trig => "trig",
            KernelChoice::Relu => "relu",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "positive" => Some(KernelChoice::Positive),
            "trig" => Some(KernelChoice::Trig),
            "relu" => Some(KernelChoice::Relu),
            _ => None,
        }
    }
}

/// Settings for every command; each command reads its own subset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub out: Option<PathBuf>,
    // bench
    pub lengths: Vec<usize>,
    pub kernels: Vec<KernelChoice>,
    pub m: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub repeats: usize,
    pub brute_force_cap: usize,
    // accuracy
    pub m_list: Vec<usize>,
    pub image_size: usize,
    pub top_l: usize,
    pub trials: usize,
    // train / eval
    pub view_size: usize,
    pub patch_size: usize,
    pub patch_sizes: Vec<usize>,
    pub l: usize,
    pub population: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub eval_episodes: usize,
    pub checkpoint: Option<PathBuf>,
    // diversity
    pub lambdas: Vec<f64>,
    pub heads: usize,
    pub duplicate_head: bool,
    // flow
    pub n: usize,
    pub instances: usize,
    pub budget: usize,
    /// Pairs as read, for echoing into outputs.
    pub entries: Vec<(String, String)>,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        let accuracy = command == Command::Accuracy;
        Self {
            command,
            seed: 0,
            out: None,
            lengths: vec![529, 4096, 19200],
            kernels: if accuracy {
                vec![KernelChoice::Positive, KernelChoice::Trig, KernelChoice::Relu]
            } else {
                vec![KernelChoice::Positive, KernelChoice::Relu]
            },
            m: 64,
            d_qk: if accuracy { 4 } else { 16 },
            d_v: 16,
            repeats: 5,
            brute_force_cap: iap_core::attention::BRUTE_FORCE_CAP,
            m_list: vec![8, 15, 16, 32, 64, 128],
            image_size: 100,
            top_l: 5,
            trials: 20,
            view_size: 16,
            patch_size: 4,
            patch_sizes: Vec::new(),
            l: 2,
            population: 32,
            sigma: 0.1,
            learning_rate: 0.03,
            iterations: 120,
            episodes: 4,
            horizon: 20,
            eval_episodes: 20,
            checkpoint: None,
            lambdas: vec![0.0, 0.01, 0.1, 1.0],
            heads: 2,
            duplicate_head: false,
            n: 6,
            instances: 20,
            budget: 50_000,
            entries: Vec::new(),
        }
    }

    /// `key=value;...` rendering of the parsed pairs plus overrides.
    pub fn describe(&self) -> String {
        let mut parts: Vec<String> = vec![format!("command={}", self.command), format!("seed={}", self.seed)];
        parts.extend(
            self.entries
                .iter()
                .filter(|(k, _)| k != "seed" && k != "out")
                .map(|(k, v)| format!("{k}={v}")),
        );
        parts.join(";")
    }
}

fn keys_for(command: Command) -> &'static [&'static str] {
    match command {
        Command::Bench => &["lengths", "kernels", "m", "d_qk", "d_v", "repeats", "brute_force_cap"],
        Command::Accuracy => &["m_list", "kernels", "image_size", "d_qk", "top_l", "trials", "brute_force_cap"],
        Command::Train => &[
            "view_size",
            "patch_size",
            "patch_sizes",
            "l",
            "population",
            "sigma",
            "learning_rate",
            "iterations",
            "episodes",
            "horizon",
            "eval_episodes",
            "checkpoint",
        ],
        Command::Eval => &["view_size", "patch_size", "l", "horizon", "eval_episodes", "checkpoint"],
        Command::Diversity => &["lambdas", "heads", "duplicate_head", "d_qk", "d_v"],
        Command::Flow => &["n", "instances", "budget"],
    }
}

fn required_for(command: Command) -> &'static [&'static str] {
    match command {
        Command::Eval => &["checkpoint"],
        _ => &[],
    }
}

fn err(line: usize, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("line {line}: {msg}"))
}

fn list<T>(line: usize, key: &str, v: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| err(line, format!("bad item {s:?} in {key}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(err(line, format!("{key} is empty")));
    }
    Ok(items)
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| err(line, format!("{key}={v:?} is not a valid number")))
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(err(line, format!("{key}={v:?} is not a boolean"))),
    }
}

/// Strict parse of `text` for `command`.
pub fn parse_config_str(text: &str, command: Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::defaults(command);
    let allowed = keys_for(command);
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(err(line, format!("empty key or value in {content:?}")));
        }
        if seen.iter().any(|k| k == key) {
            return Err(err(line, format!("duplicate key {key}")));
        }
        if key != "seed" && key != "out" && !allowed.contains(&key) {
            return Err(err(line, format!("unknown key {key} for {command}")));
        }
        let usize_list = |v: &str| list(line, key, v, |s| s.parse::<usize>().ok());
        match key {
            "seed" => cfg.seed = num(line, key, value)?,
            "out" => cfg.out = Some(PathBuf::from(value)),
            "lengths" => cfg.lengths = usize_list(value)?,
            "kernels" => cfg.kernels = list(line, key, value, KernelChoice::parse)?,
            "m" => cfg.m = num(line, key, value)?,
            "d_qk" => cfg.d_qk = num(line, key, value)?,
            "d_v" => cfg.d_v = num(line, key, value)?,
            "repeats" => cfg.repeats = num(line, key, value)?,
            "brute_force_cap" => cfg.brute_force_cap = num(line, key, value)?,
            "m_list" => cfg.m_list = usize_list(value)?,
            "image_size" => cfg.image_size = num(line, key, value)?,
            "top_l" => cfg.top_l = num(line, key, value)?,
            "trials" => cfg.trials = num(line, key, value)?,
            "view_size" => cfg.view_size = num(line, key, value)?,
            "patch_size" => cfg.patch_size = num(line, key, value)?,
            "patch_sizes" => cfg.patch_sizes = usize_list(value)?,
            "l" => cfg.l = num(line, key, value)?,
            "population" => cfg.population = num(line, key, value)?,
            "sigma" => cfg.sigma = num(line, key, value)?,
            "learning_rate" => cfg.learning_rate = num(line, key, value)?,
            "iterations" => cfg.iterations = num(line, key, value)?,
            "episodes" => cfg.episodes = num(line, key, value)?,
            "horizon" => cfg.horizon = num(line, key, value)?,
            "eval_episodes" => cfg.eval_episodes = num(line, key, value)?,
            "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
            "lambdas" => cfg.lambdas = list(line, key, value, |s| s.parse::<f64>().ok().filter(|x| x.is_finite()))?,
            "heads" => cfg.heads = num(line, key, value)?,
            "duplicate_head" => cfg.duplicate_head = flag(line, key, value)?,
            "n" => cfg.n = num(line, key, value)?,
            "instances" => cfg.instances = num(line, key, value)?,
            "budget" => cfg.budget = num(line, key, value)?,
            _ => unreachable!("key table and match agree"),
        }
        seen.push(key.to_string());
        cfg.entries.push((key.to_string(), value.to_string()));
    }
    let missing: Vec<&str> = required_for(command)
        .iter()
        .copied()
        .filter(|k| !seen.iter().any(|s| s == k))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!("missing required key(s): {}", missing.join(", "))));
    }
    validate(&cfg)?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, command: Command) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text, command)
}

/// Range checks shared by file and override paths.
pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let bad = |msg: String| Err(CliError::Config(msg));
    if cfg.repeats < 5 {
        return bad(format!("repeats must be >= 5, got {}", cfg.repeats));
    }
    if cfg.lengths.iter().any(|&l| l == 0) || cfg.m == 0 || cfg.d_qk == 0 || cfg.d_v == 0 {
        return bad("lengths, m, d_qk and d_v must be positive".into());
    }
    if cfg.m_list.iter().any(|&m| m == 0) || cfg.top_l == 0 || cfg.trials == 0 {
        return bad("m_list, top_l and trials must be positive".into());
    }
    if cfg.patch_size == 0 || cfg.patch_sizes.iter().any(|&p| p == 0) || cfg.l == 0 {
        return bad("patch sizes and l must be positive".into());
    }
    if !(cfg.sigma > 0.0) || !(cfg.learning_rate > 0.0) {
        return bad("sigma and learning_rate must be positive".into());
    }
    if cfg.episodes == 0 || cfg.eval_episodes == 0 || cfg.horizon == 0 || cfg.heads < 2 || cfg.n == 0 {
        return bad("episodes, horizon and n must be positive; heads >= 2".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let c = parse_config_str("# train\npatch_size=4\nl = 3 # inline\n", Command::Train).unwrap();
        assert_eq!((c.patch_size, c.l), (4, 3));
        let e = parse_config_str("patch_size=4\nunknown_key=1\n", Command::Train).unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("unknown_key"));
        let e = parse_config_str("patch_size\n", Command::Train).unwrap_err();
        assert!(e.to_string().contains("line 1"));
        let e = parse_config_str("view_size=16\n", Command::Eval).unwrap_err();
        assert!(e.to_string().contains("checkpoint"));
        assert!(parse_config_str("patch_size=four\n", Command::Train).is_err());
        assert!(parse_config_str("m=4\n", Command::Flow).is_err());
        assert!(parse_config_str("repeats=3\n", Command::Bench).is_err());
        let c = parse_config_str("lengths=10, 20\nkernels=relu\n", Command::Bench).unwrap();
        assert_eq!(c.lengths, vec![10, 20]);
        assert_eq!(c.kernels, vec![KernelChoice::Relu]);
        assert!(c.describe().contains("lengths=10, 20"));
    }
}

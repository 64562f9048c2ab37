//! Strict experiment configuration: a versioned `key = value` text format,
//! command-line overrides, and per-scenario defaults.
//!
//! Every run resolves to one [`Resolved`] record: scenario defaults first,
//! then config-file entries, then the `--scenario`/`--seed` flags, then
//! `--override` pairs (last repetition wins). Unknown keys and malformed
//! values are rejected with their line, never ignored: a config that parses
//! is a config whose every entry took effect.

use std::fmt;

/// Required first non-blank line of every config file.
pub const CONFIG_HEADER: &str = "decrl-config v1";

/// The experiments the runner knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Maze demo, one attacker sharing the whole backdoor.
    MazeSbpa,
    /// Maze demo, two attackers sharing orthogonal backdoor components.
    MazeCbpa,
    /// Maze demo with no attacker, as the reference run.
    MazeBenign,
    /// Open-grid run with three cooperating attackers and an always-on
    /// trigger, for clean-vs-triggered return comparison.
    GridworldCbpa,
    /// Direct perturbation-bound audit of a fixed smooth policy.
    BoundVerify,
    /// Value-of-aggregate versus mean-of-values gap table.
    AggregationEquiv,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::MazeSbpa,
        Scenario::MazeCbpa,
        Scenario::MazeBenign,
        Scenario::GridworldCbpa,
        Scenario::BoundVerify,
        Scenario::AggregationEquiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::MazeSbpa => "maze-sbpa",
            Scenario::MazeCbpa => "maze-cbpa",
            Scenario::MazeBenign => "maze-benign",
            Scenario::GridworldCbpa => "gridworld-cbpa",
            Scenario::BoundVerify => "bound-verify",
            Scenario::AggregationEquiv => "aggregation-equiv",
        }
    }

    pub fn from_name(name: &str) -> Option<Scenario> {
        Scenario::ALL.iter().copied().find(|s| s.name() == name)
    }

    fn valid_names() -> String {
        Scenario::ALL
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a config file or override may set, fully typed.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    /// Number of participating agents (attackers included).
    pub agents: usize,
    /// Training-and-sharing rounds.
    pub rounds: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub max_episode_len: usize,
    pub encoding_dim: usize,
    /// Smoothing temperature as a fraction of the minimum anchor spacing.
    pub tau_fraction: f64,
    pub eval_episodes: usize,
    pub eval_max_steps: usize,
    /// Probe states for the divergence metric; 0 disables it.
    pub covertness_states: usize,
    /// Clean trajectories fed to the per-round bound check; 0 disables it.
    pub bound_histories: usize,
    pub parallel: bool,
    /// Trigger magnitude as a multiple of the minimum anchor spacing.
    pub magnitude_fraction: f64,
    /// Gate threshold as a fraction of a component's full magnitude.
    pub gate_fraction: f64,
    /// Gate bandwidth as a fraction of a component's full magnitude.
    pub gate_bandwidth_fraction: f64,
    /// Occupancy samples used to estimate the clean-state second moment.
    pub subspace_samples: usize,
    /// bound-verify: independent sub-seeded audit passes.
    pub bound_seeds: usize,
    /// bound-verify: clean trajectories sampled per pass.
    pub bound_trajectories: usize,
    /// bound-verify: trajectory length cap.
    pub bound_max_len: usize,
    /// bound-verify: number of trigger components.
    pub bound_components: usize,
    /// bound-verify: total agent count the decomposition is scaled for.
    pub bound_agents: usize,
    /// aggregation-equiv: one-decision cross cases (gap asserted).
    pub equiv_bandit: usize,
    /// aggregation-equiv: exogenous-drift chain cases (gap asserted).
    pub equiv_drift: usize,
    /// aggregation-equiv: open-grid cases (gap reported only).
    pub equiv_general: usize,
}

/// A fully resolved run request.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub scenario: Scenario,
    pub settings: Settings,
}

impl Resolved {
    /// Canonical `key = value` dump, sorted by key: the manifest's config
    /// section and the byte-level identity of the run's inputs.
    pub fn dump(&self) -> String {
        let s = &self.settings;
        let mut pairs: Vec<(&str, String)> = vec![
            ("scenario", self.scenario.name().to_string()),
            ("seed", s.seed.to_string()),
            ("agents", s.agents.to_string()),
            ("rounds", s.rounds.to_string()),
            ("train_steps", s.train_steps.to_string()),
            ("lr", s.lr.to_string()),
            ("epsilon", s.epsilon.to_string()),
            ("max_episode_len", s.max_episode_len.to_string()),
            ("encoding_dim", s.encoding_dim.to_string()),
            ("tau_fraction", s.tau_fraction.to_string()),
            ("eval_episodes", s.eval_episodes.to_string()),
            ("eval_max_steps", s.eval_max_steps.to_string()),
            ("covertness_states", s.covertness_states.to_string()),
            ("bound_histories", s.bound_histories.to_string()),
            ("parallel", s.parallel.to_string()),
            ("magnitude_fraction", s.magnitude_fraction.to_string()),
            ("gate_fraction", s.gate_fraction.to_string()),
            ("gate_bandwidth_fraction", s.gate_bandwidth_fraction.to_string()),
            ("subspace_samples", s.subspace_samples.to_string()),
            ("bound_seeds", s.bound_seeds.to_string()),
            ("bound_trajectories", s.bound_trajectories.to_string()),
            ("bound_max_len", s.bound_max_len.to_string()),
            ("bound_components", s.bound_components.to_string()),
            ("bound_agents", s.bound_agents.to_string()),
            ("equiv_bandit", s.equiv_bandit.to_string()),
            ("equiv_drift", s.equiv_drift.to_string()),
            ("equiv_general", s.equiv_general.to_string()),
        ];
        pairs.sort_by_key(|(k, _)| *k);
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line 1: expected header '{CONFIG_HEADER}', found '{found}'")]
    Header { found: String },
    #[error("line {line}: expected 'key = value', found '{text}'")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key '{key}' set twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("override '{arg}': {msg}")]
    Override { arg: String, msg: String },
    #[error("no scenario selected: pass --scenario or set 'scenario' in the config file")]
    NoScenario,
    #[error("unknown scenario '{name}' (valid: {valid})")]
    UnknownScenario { name: String, valid: String },
    #[error("{0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn unknown_scenario(name: &str) -> ConfigError {
        ConfigError::UnknownScenario { name: name.to_string(), valid: Scenario::valid_names() }
    }
}

/// How a key's value string must parse.
#[derive(Debug, Clone, Copy)]
enum Kind {
    ScenarioName,
    U64,
    /// usize, at least 1.
    Count,
    /// usize, 0 allowed.
    Count0,
    Float,
    Bool,
}

const KEYS: &[(&str, Kind)] = &[
    ("scenario", Kind::ScenarioName),
    ("seed", Kind::U64),
    ("agents", Kind::Count),
    ("rounds", Kind::Count),
    ("train_steps", Kind::Count),
    ("lr", Kind::Float),
    ("epsilon", Kind::Float),
    ("max_episode_len", Kind::Count),
    ("encoding_dim", Kind::Count),
    ("tau_fraction", Kind::Float),
    ("eval_episodes", Kind::Count),
    ("eval_max_steps", Kind::Count),
    ("covertness_states", Kind::Count0),
    ("bound_histories", Kind::Count0),
    ("parallel", Kind::Bool),
    ("magnitude_fraction", Kind::Float),
    ("gate_fraction", Kind::Float),
    ("gate_bandwidth_fraction", Kind::Float),
    ("subspace_samples", Kind::Count),
    ("bound_seeds", Kind::Count),
    ("bound_trajectories", Kind::Count),
    ("bound_max_len", Kind::Count),
    ("bound_components", Kind::Count),
    ("bound_agents", Kind::Count),
    ("equiv_bandit", Kind::Count0),
    ("equiv_drift", Kind::Count0),
    ("equiv_general", Kind::Count0),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, kind)| *kind)
}

/// Check a value string against its key's kind; returns a message on failure.
fn check_value(key: &str, value: &str, kind: Kind) -> Result<(), String> {
    match kind {
        Kind::ScenarioName => match Scenario::from_name(value) {
            Some(_) => Ok(()),
            None => Err(format!("unknown scenario '{value}' (valid: {})", Scenario::valid_names())),
        },
        Kind::U64 => value
            .parse::<u64>()
            .map(|_| ())
            .map_err(|_| format!("expected an unsigned integer, found '{value}'")),
        Kind::Count => match value.parse::<usize>() {
            Ok(0) => Err(format!("'{key}' must be at least 1")),
            Ok(_) => Ok(()),
            Err(_) => Err(format!("expected a positive integer, found '{value}'")),
        },
        Kind::Count0 => value
            .parse::<usize>()
            .map(|_| ())
            .map_err(|_| format!("expected a non-negative integer, found '{value}'")),
        Kind::Float => match value.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            Ok(_) => Err("expected a finite number".to_string()),
            Err(_) => Err(format!("expected a number, found '{value}'")),
        },
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(format!("expected 'true' or 'false', found '{value}'")),
        },
    }
}

/// Parse a config file body into validated `(key, value)` pairs, in file
/// order. Requires the versioned header as the first non-blank line; `#`
/// starts a comment line; duplicate keys are rejected.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim().to_string(),
            None => break String::new(),
        }
    };
    if header != CONFIG_HEADER {
        return Err(ConfigError::Header { found: header });
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1; // 1-based, counting from the top of the file
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let (key, value) = match text.split_once('=') {
            Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
            None => return Err(ConfigError::Syntax { line, text: text.to_string() }),
        };
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax { line, text: text.to_string() });
        }
        let kind = kind_of(&key).ok_or(ConfigError::UnknownKey { line, key: key.clone() })?;
        check_value(&key, &value, kind)
            .map_err(|msg| ConfigError::BadValue { line, key: key.clone(), msg })?;
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::DuplicateKey { line, key });
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Parse one `--override KEY=VALUE` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), ConfigError> {
    let reject = |msg: String| ConfigError::Override { arg: arg.to_string(), msg };
    let (key, value) = match arg.split_once('=') {
        Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
        None => return Err(reject("expected KEY=VALUE".to_string())),
    };
    if key.is_empty() || value.is_empty() {
        return Err(reject("expected KEY=VALUE".to_string()));
    }
    let kind = kind_of(&key).ok_or_else(|| reject(format!("unknown key '{key}'")))?;
    check_value(&key, &value, kind).map_err(reject)?;
    Ok((key, value))
}

/// Parse a value already vetted by [`check_value`].
fn must<T: std::str::FromStr>(key: &str, value: &str) -> T {
    value
        .parse()
        .unwrap_or_else(|_| panic!("pre-validated value '{value}' for '{key}' failed to parse"))
}

impl Settings {
    /// Apply one pre-validated key/value pair.
    fn apply(&mut self, key: &str, value: &str) {
        match key {
            "scenario" => {} // handled during scenario selection
            "seed" => self.seed = must(key, value),
            "agents" => self.agents = must(key, value),
            "rounds" => self.rounds = must(key, value),
            "train_steps" => self.train_steps = must(key, value),
            "lr" => self.lr = must(key, value),
            "epsilon" => self.epsilon = must(key, value),
            "max_episode_len" => self.max_episode_len = must(key, value),
            "encoding_dim" => self.encoding_dim = must(key, value),
            "tau_fraction" => self.tau_fraction = must(key, value),
            "eval_episodes" => self.eval_episodes = must(key, value),
            "eval_max_steps" => self.eval_max_steps = must(key, value),
            "covertness_states" => self.covertness_states = must(key, value),
            "bound_histories" => self.bound_histories = must(key, value),
            "parallel" => self.parallel = value == "true",
            "magnitude_fraction" => self.magnitude_fraction = must(key, value),
            "gate_fraction" => self.gate_fraction = must(key, value),
            "gate_bandwidth_fraction" => self.gate_bandwidth_fraction = must(key, value),
            "subspace_samples" => self.subspace_samples = must(key, value),
            "bound_seeds" => self.bound_seeds = must(key, value),
            "bound_trajectories" => self.bound_trajectories = must(key, value),
            "bound_max_len" => self.bound_max_len = must(key, value),
            "bound_components" => self.bound_components = must(key, value),
            "bound_agents" => self.bound_agents = must(key, value),
            "equiv_bandit" => self.equiv_bandit = must(key, value),
            "equiv_drift" => self.equiv_drift = must(key, value),
            "equiv_general" => self.equiv_general = must(key, value),
            other => panic!("pre-validated key '{other}' missing from apply"),
        }
    }

    /// Cross-field checks that single-value parsing cannot see.
    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return bad(format!("lr must be in (0, 1], got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if !(self.tau_fraction > 0.0) {
            return bad(format!("tau_fraction must be positive, got {}", self.tau_fraction));
        }
        if !(self.magnitude_fraction > 0.0) {
            return bad(format!(
                "magnitude_fraction must be positive, got {}",
                self.magnitude_fraction
            ));
        }
        if !(self.gate_fraction > 0.0 && self.gate_fraction < 1.0) {
            return bad(format!("gate_fraction must be in (0, 1), got {}", self.gate_fraction));
        }
        if !(self.gate_bandwidth_fraction > 0.0) {
            return bad(format!(
                "gate_bandwidth_fraction must be positive, got {}",
                self.gate_bandwidth_fraction
            ));
        }
        if self.bound_components > self.bound_agents {
            return bad(format!(
                "bound_components ({}) cannot exceed bound_agents ({})",
                self.bound_components, self.bound_agents
            ));
        }
        if self.bound_max_len < 2 {
            return bad(format!("bound_max_len must be at least 2, got {}", self.bound_max_len));
        }
        if self.equiv_bandit + self.equiv_drift + self.equiv_general == 0 {
            return bad("all equiv_* case counts are zero".to_string());
        }
        Ok(())
    }
}

/// Merge every configuration source into one run request.
///
/// Precedence, lowest to highest: scenario defaults, config-file pairs,
/// `--scenario`/`--seed` flags, `--override` pairs in argument order.
/// The scenario itself must come from the file or the flag.
pub fn resolve(
    file_pairs: &[(String, String)],
    flag_scenario: Option<&str>,
    flag_seed: Option<u64>,
    overrides: &[(String, String)],
) -> Result<Resolved, ConfigError> {
    let from_pairs = |pairs: &[(String, String)]| {
        pairs.iter().rev().find(|(k, _)| k == "scenario").map(|(_, v)| v.clone())
    };
    let name = from_pairs(overrides)
        .or_else(|| flag_scenario.map(str::to_string))
        .or_else(|| from_pairs(file_pairs))
        .ok_or(ConfigError::NoScenario)?;
    let scenario = Scenario::from_name(&name).ok_or_else(|| ConfigError::unknown_scenario(&name))?;

    let mut settings = crate::scenario::default_settings(scenario);
    for (k, v) in file_pairs {
        settings.apply(k, v);
    }
    if let Some(seed) = flag_seed {
        settings.seed = seed;
    }
    for (k, v) in overrides {
        settings.apply(k, v);
    }
    settings.validate()?;
    Ok(Resolved { scenario, settings })
}

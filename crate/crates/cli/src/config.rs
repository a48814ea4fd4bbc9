//! Run configuration, seed resolution and run manifests.
//!
//! Config files use the sectioned `key = value` format of game
//! definitions with sections `[run]`, `[train]`, `[rollout]`, `[explain]`
//! and `[eval]`. Overrides are flat `key=value` pairs; a key may be
//! qualified as `section.key` and otherwise resolves to the section that
//! owns it.

use std::collections::BTreeMap;
use std::path::Path;

use hexplain::defn::parse_sections;
use hexplain::engine::{builtin_source, load_game, GameSpec};
use hexplain::trainer::TrainConfig;
use hexplain::trajstore::corpus_hash;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    /// Trajectories per corpus.
    pub n: usize,
    pub max_steps: u32,
    /// Entities per immediate explanation.
    pub explain_k: usize,
    /// Recency window for explained entities.
    pub window: u32,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self {
            n: 300,
            max_steps: 100,
            explain_k: 3,
            window: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSettings {
    /// Bayesian filter threshold.
    pub p: f64,
    /// Action-model cut; `None` keeps every ranked action.
    pub k: Option<usize>,
    pub critic_percentile: f64,
    /// Weight of the global action frequencies in the action model.
    pub smoothing: f64,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            p: 0.5,
            k: Some(20),
            critic_percentile: 0.9,
            smoothing: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub rollout: RolloutSettings,
    pub explain: ExplainSettings,
    pub eval: EvalSettings,
}

const SECTIONS: [&str; 5] = ["run", "train", "rollout", "explain", "eval"];

fn bad(key: &str, value: &str) -> CliError {
    CliError::Usage(format!("bad value `{value}` for `{key}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| bad(key, value))
}

/// Parses a top-k value; `none` and `all` disable the cut.
pub fn parse_k(value: &str) -> Result<Option<usize>, CliError> {
    match value.trim() {
        "none" | "all" => Ok(None),
        v => num("k", v).map(Some),
    }
}

fn owner(key: &str) -> &'static str {
    match key {
        "seed" => "run",
        "n" | "max_steps" | "explain_k" | "window" => "rollout",
        "p" | "k" | "critic_percentile" | "smoothing" => "explain",
        "episodes" => "eval",
        _ => "train",
    }
}

impl RunConfig {
    /// Applies one setting. `key` may be `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim();
        let (section, name) = match key.split_once('.') {
            Some((s, k)) => (s, k),
            None => (owner(key), key),
        };
        if !SECTIONS.contains(&section) {
            return Err(CliError::Usage(format!("unknown section `{section}`")));
        }
        let unknown = || CliError::Usage(format!("unknown setting `{key}`"));
        match (section, name) {
            ("run", "seed") => self.seed = num(key, value)?,
            ("rollout", "n") => self.rollout.n = num(key, value)?,
            ("rollout", "max_steps") => self.rollout.max_steps = num(key, value)?,
            ("rollout", "explain_k") => self.rollout.explain_k = num(key, value)?,
            ("rollout", "window") => self.rollout.window = num(key, value)?,
            ("explain", "p") => self.explain.p = num(key, value)?,
            ("explain", "k") => self.explain.k = parse_k(value)?,
            ("explain", "critic_percentile") => self.explain.critic_percentile = num(key, value)?,
            ("explain", "smoothing") => self.explain.smoothing = num(key, value)?,
            ("eval", "episodes") => self.eval.episodes = num(key, value)?,
            ("train", "seed") => self.seed = num(key, value)?,
            ("train", name) => self.train.set(name, value).map_err(|e| CliError::Usage(e.to_string()))?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Applies every entry of a config file.
    pub fn apply_file(&mut self, text: &str, path: &Path) -> Result<(), CliError> {
        let at = |line: usize, msg: String| CliError::Usage(format!("{}:{line}: {msg}", path.display()));
        let sections = parse_sections(text).map_err(|e| at(e.line, e.message))?;
        for s in sections {
            if !SECTIONS.contains(&s.kind.as_str()) || s.name.is_some() {
                return Err(at(s.line, format!("unknown section `{}`", s.kind)));
            }
            for e in &s.entries {
                self.set(&format!("{}.{}", s.kind, e.key), &e.value)
                    .map_err(|err| at(e.line, err.to_string()))?;
            }
        }
        Ok(())
    }

    /// Checks ranges and copies the run seed into the trainer settings.
    pub fn finish(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let e = &self.explain;
        if !(0.0..=1.0).contains(&e.critic_percentile) || e.smoothing < 0.0 || e.p.is_nan() {
            return Err(CliError::Usage(
                "explain settings need p set, critic_percentile in [0, 1] and smoothing >= 0".into(),
            ));
        }
        if self.rollout.max_steps == 0 || self.eval.episodes == 0 {
            return Err(CliError::Usage("max_steps and episodes must be positive".into()));
        }
        Ok(self)
    }
}

/// Where the run seed came from, lowest to highest precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Default,
    Env,
    ConfigFile,
    Override,
    Flag,
    Manifest,
}

/// Settings shared by every subcommand.
pub struct Sources<'a> {
    pub env_seed: Option<&'a str>,
    pub config_file: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed_flag: Option<u64>,
}

/// Builds the effective configuration: defaults, then `HEXPLAIN_SEED`,
/// then the config file, then overrides, then `--seed`. `extra` applies
/// subcommand flags after the overrides.
pub fn resolve(
    src: &Sources,
    extra: impl FnOnce(&mut RunConfig) -> Result<(), CliError>,
) -> Result<(RunConfig, SeedSource), CliError> {
    let mut config = RunConfig::default();
    let mut source = SeedSource::Default;
    if let Some(v) = src.env_seed {
        config.seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("HEXPLAIN_SEED must be an unsigned integer, got `{v}`")))?;
        source = SeedSource::Env;
    }
    if let Some(path) = src.config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config file `{}`: {e}", path.display())))?;
        config.apply_file(&text, path)?;
        if text_sets_seed(&text) {
            source = SeedSource::ConfigFile;
        }
    }
    for o in src.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
        config.set(k, v)?;
        if k.trim().rsplit('.').next() == Some("seed") {
            source = SeedSource::Override;
        }
    }
    extra(&mut config)?;
    if let Some(s) = src.seed_flag {
        config.seed = s;
        source = SeedSource::Flag;
    }
    Ok((config.finish()?, source))
}

fn text_sets_seed(text: &str) -> bool {
    parse_sections(text)
        .map(|ss| ss.iter().any(|s| s.get("seed").is_some()))
        .unwrap_or(false)
}

/// A game together with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub id: String,
    /// `builtin` or the definition file path.
    pub origin: String,
    pub sha256: String,
    pub definition: String,
}

impl GameRecord {
    /// A built-in id, otherwise a definition file path.
    pub fn resolve(name: &str) -> Result<Self, CliError> {
        let (origin, definition) = match builtin_source(name) {
            Some(src) => ("builtin".to_string(), src.to_string()),
            None => {
                let text = std::fs::read_to_string(name)
                    .map_err(|e| CliError::Usage(format!("cannot read game file `{name}`: {e}")))?;
                (name.to_string(), text)
            }
        };
        let spec = load_game(&definition).map_err(|e| CliError::Usage(format!("game `{name}`: {e}")))?;
        Ok(Self {
            id: spec.game_id,
            origin,
            sha256: corpus_hash(&definition),
            definition,
        })
    }

    pub fn spec(&self) -> Result<GameSpec, CliError> {
        load_game(&self.definition).map_err(|e| CliError::Usage(format!("game `{}`: {e}", self.id)))
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub game: Option<GameRecord>,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], config: &RunConfig, seed_source: SeedSource) -> Self {
        Self {
            tool: "hexplain".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: argv.to_vec(),
            seed: config.seed,
            seed_source,
            game: None,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifests serialize");
        crate::write_file(path, format!("{text}\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest `{}`: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest `{}`: {e}", path.display())))
    }
}

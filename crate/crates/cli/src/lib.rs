//! The `hexplain` command line: train, roll out, explain, evaluate and
//! play. [`run`] is the whole program behind an argument list and explicit
//! streams so it can be driven in-process.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error
//! (including missing files), 3 training divergence.

pub mod config;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hexplain::engine::GameSpec;
use hexplain::kgstate::KgTracker;
use hexplain::policy::{ExplainConfig, Policy};
use hexplain::temporal::{build_stats, explain, find_goal, ActionModel, PipelineParams};
use hexplain::trainer::{curve_csv, train_with, TrainError};
use hexplain::trajstore::{
    checkpoint_id, collect_rollouts, corpus_hash, deserialize, serialize, RolloutConfig, Trajectory,
};
use serde_json::json;
use thiserror::Error;

use config::{resolve, GameRecord, Manifest, RunConfig, SeedSource, Sources};

/// A failed command; see [`CliError::exit_code`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hexplain", version, about = "Train, roll out and explain a knowledge-graph text-game agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file with [run], [train], [rollout], [explain] and [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Setting override, e.g. `--set gamma=0.95` or `--set explain.k=none`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; defaults to HEXPLAIN_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    JsonLines,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write checkpoints, the learning curve and a manifest.
    Train {
        /// Built-in game id or game definition file.
        #[arg(long, required_unless_present = "manifest")]
        game: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Repeat the run recorded in a manifest.
        #[arg(long, conflicts_with_all = ["game", "steps", "config", "overrides", "seed"])]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample trajectories with immediate explanations from a checkpoint.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Game to play; defaults to the one stored in the checkpoint.
        #[arg(long)]
        game: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "corpus.traj")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Explain a step of a trajectory in a corpus.
    Explain {
        #[arg(long)]
        corpus: PathBuf,
        /// Trajectory index in the corpus.
        #[arg(long, default_value_t = 0)]
        trajectory: usize,
        /// Step index or `goal`.
        #[arg(long, default_value = "goal")]
        step: String,
        /// With `--step goal`, the rewarded action to explain.
        #[arg(long)]
        goal_action: Option<String>,
        /// Game for the grammar; defaults to the corpus game id.
        #[arg(long)]
        game: Option<String>,
        /// Print the per-step immediate explanations instead.
        #[arg(long)]
        immediate_only: bool,
        #[arg(long)]
        p: Option<f64>,
        /// Action-model cut, or `none`.
        #[arg(long)]
        k: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint over sampled episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        game: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Write a manifest with the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Play a game from the terminal.
    Play {
        #[arg(long)]
        game: String,
        /// Print the knowledge graph after every step.
        #[arg(long)]
        show_kg: bool,
    },
}

/// Streams a command reads and writes.
pub struct Io<'a> {
    pub input: &'a mut dyn BufRead,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

/// Runs the program and returns its exit code. `env_seed` is the value of
/// `HEXPLAIN_SEED`.
pub fn run<I, T>(args: I, env_seed: Option<&str>, io: &mut Io) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(io.err, "{}", e.render());
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv, env_seed, io) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e}");
            e.exit_code()
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create `{}`: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::Io(format!("cannot write output: {e}"))
}

fn sources<'a>(common: &'a Common, env_seed: Option<&'a str>) -> Sources<'a> {
    Sources {
        env_seed,
        config_file: common.config.as_deref(),
        overrides: &common.overrides,
        seed_flag: common.seed,
    }
}

fn dispatch(command: Command, argv: &[String], env_seed: Option<&str>, io: &mut Io) -> Result<(), CliError> {
    match command {
        Command::Train {
            game,
            steps,
            out,
            manifest,
            common,
        } => {
            let (config, source, game) = match manifest {
                Some(path) => {
                    let m = Manifest::read(&path)?;
                    if m.command != "train" {
                        return Err(CliError::Usage(format!("`{}` is not a train manifest", path.display())));
                    }
                    let game = m.game.ok_or_else(|| CliError::Usage("manifest has no game".into()))?;
                    (m.config.finish()?, SeedSource::Manifest, game)
                }
                None => {
                    let game = GameRecord::resolve(game.as_deref().expect("clap requires --game"))?;
                    let (config, source) = resolve(&sources(&common, env_seed), |c| {
                        if let Some(s) = steps {
                            c.train.total_steps = s;
                        }
                        Ok(())
                    })?;
                    (config, source, game)
                }
            };
            cmd_train(&game, &config, source, &out, argv, io)
        }
        Command::Rollout {
            checkpoint,
            game,
            n,
            out,
            common,
        } => {
            let (config, source) = resolve(&sources(&common, env_seed), |c| {
                if let Some(n) = n {
                    c.rollout.n = n;
                }
                Ok(())
            })?;
            cmd_rollout(&checkpoint, game.as_deref(), &config, source, &out, argv, io)
        }
        Command::Explain {
            corpus,
            trajectory,
            step,
            goal_action,
            game,
            immediate_only,
            p,
            k,
            format,
            out,
            common,
        } => {
            let (config, source) = resolve(&sources(&common, env_seed), |c| {
                if let Some(p) = p {
                    c.explain.p = p;
                }
                if let Some(k) = &k {
                    c.explain.k = config::parse_k(k)?;
                }
                Ok(())
            })?;
            let query = ExplainQuery {
                corpus: &corpus,
                trajectory,
                step: &step,
                goal_action: goal_action.as_deref(),
                game: game.as_deref(),
                immediate_only,
                format,
                out: out.as_deref(),
            };
            cmd_explain(&query, &config, source, argv, io)
        }
        Command::Eval {
            checkpoint,
            game,
            episodes,
            out,
            common,
        } => {
            let (config, source) = resolve(&sources(&common, env_seed), |c| {
                if let Some(e) = episodes {
                    c.eval.episodes = e;
                }
                Ok(())
            })?;
            cmd_eval(&checkpoint, game.as_deref(), &config, source, out.as_deref(), argv, io)
        }
        Command::Play { game, show_kg } => cmd_play(&GameRecord::resolve(&game)?.spec()?, show_kg, io),
    }
}

fn checkpoint_extra(game: &GameRecord, config: &RunConfig, step: u64) -> serde_json::Value {
    json!({ "game": game, "seed": config.seed, "step": step })
}

/// Trains and writes `checkpoint.ckpt`, `curve.csv`, `manifest.json` and,
/// if enabled, `checkpoints/step-N.ckpt` under `out`.
pub fn cmd_train(
    game: &GameRecord,
    config: &RunConfig,
    source: SeedSource,
    out: &Path,
    argv: &[String],
    io: &mut Io,
) -> Result<(), CliError> {
    let spec = game.spec()?;
    let mut manifest = Manifest::new("train", argv, config, source);
    manifest.game = Some(game.clone());
    let mut write_error = None;
    let mut on_checkpoint = |step: u64, policy: &Policy| {
        let path = out.join("checkpoints").join(format!("step-{step:08}.ckpt"));
        if let Err(e) = write_file(&path, &policy.to_checkpoint(checkpoint_extra(game, config, step))) {
            write_error.get_or_insert(e);
        }
    };
    let result = train_with(&spec, &config.train, None, &mut on_checkpoint);
    if let Some(e) = write_error {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Divergence { update, report }) => {
            let path = out.join("divergence.json");
            write_file(&path, report.as_bytes())?;
            manifest.outputs.insert("divergence".into(), path.display().to_string());
            manifest.summary = json!({ "diverged_at_update": update });
            manifest.write(&out.join("manifest.json"))?;
            return Err(CliError::Divergence(format!("update {update}; details in {}", path.display())));
        }
        Err(TrainError::Config(e)) => return Err(CliError::Usage(e.to_string())),
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let ckpt = outcome.policy.to_checkpoint(checkpoint_extra(game, config, outcome.steps));
    let curve = curve_csv(&outcome.curve);
    let ckpt_path = out.join("checkpoint.ckpt");
    let curve_path = out.join("curve.csv");
    write_file(&ckpt_path, &ckpt)?;
    write_file(&curve_path, curve.as_bytes())?;
    let final_mean = outcome.curve.last().map(|c| c.episode_score_mean100);
    manifest.outputs.insert("checkpoint".into(), ckpt_path.display().to_string());
    manifest.outputs.insert("checkpoint_id".into(), checkpoint_id(&ckpt));
    manifest.outputs.insert("curve".into(), curve_path.display().to_string());
    manifest.outputs.insert("curve_sha256".into(), corpus_hash(&curve));
    manifest.summary = json!({
        "steps": outcome.steps,
        "updates": outcome.updates,
        "episodes": outcome.episodes,
        "max_score_seen": outcome.max_score_seen,
        "reached_max_at": outcome.reached_at,
        "final_mean100": final_mean,
        "max_score": spec.max_score,
    });
    manifest.write(&out.join("manifest.json"))?;
    let w = &mut io.out;
    writeln!(w, "game {} seed {}", spec.game_id, config.seed).map_err(out_err)?;
    writeln!(
        w,
        "steps {} updates {} episodes {}",
        outcome.steps, outcome.updates, outcome.episodes
    )
    .map_err(out_err)?;
    let mean = final_mean.map_or("n/a".to_string(), |m| format!("{m:.2}"));
    writeln!(w, "final mean-100 score {mean}; max score seen {}/{}", outcome.max_score_seen, spec.max_score)
        .map_err(out_err)?;
    if let Some(at) = outcome.reached_at {
        writeln!(w, "reached max score at step {at}").map_err(out_err)?;
    }
    writeln!(w, "wrote {}", out.display()).map_err(out_err)?;
    Ok(())
}

/// A checkpoint and the game it plays.
fn load_checkpoint(path: &Path, game: Option<&str>) -> Result<(Policy, GameRecord, String), CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read checkpoint `{}`: {e}", path.display())))?;
    let (policy, extra) = Policy::from_checkpoint(&bytes)
        .map_err(|e| CliError::Usage(format!("checkpoint `{}`: {e}", path.display())))?;
    let game = match game {
        Some(g) => GameRecord::resolve(g)?,
        None => serde_json::from_value(extra.get("game").cloned().unwrap_or_default()).map_err(|_| {
            CliError::Usage(format!("checkpoint `{}` names no game; pass --game", path.display()))
        })?,
    };
    Ok((policy, game, checkpoint_id(&bytes)))
}

fn rollout_config(config: &RunConfig) -> RolloutConfig {
    RolloutConfig {
        max_steps: config.rollout.max_steps,
        explain: ExplainConfig {
            k: config.rollout.explain_k,
            window: config.rollout.window,
        },
    }
}

fn sample(
    policy: &Policy,
    spec: &GameSpec,
    ckpt_id: &str,
    n: usize,
    config: &RunConfig,
) -> Result<Vec<Trajectory>, CliError> {
    collect_rollouts(policy, spec, ckpt_id, n, config.seed, rollout_config(config))
        .map_err(|e| CliError::Usage(format!("checkpoint does not fit the game: {e}")))
}

/// Writes `n` trajectories to `out` and a manifest beside it.
pub fn cmd_rollout(
    checkpoint: &Path,
    game: Option<&str>,
    config: &RunConfig,
    source: SeedSource,
    out: &Path,
    argv: &[String],
    io: &mut Io,
) -> Result<(), CliError> {
    let (policy, game, ckpt_id) = load_checkpoint(checkpoint, game)?;
    let spec = game.spec()?;
    let corpus = sample(&policy, &spec, &ckpt_id, config.rollout.n, config)?;
    let text = serialize(&corpus);
    write_file(out, text.as_bytes())?;
    let mean = corpus.iter().map(|t| t.final_score as f64).sum::<f64>() / corpus.len().max(1) as f64;
    let mut manifest = Manifest::new("rollout", argv, config, source);
    manifest.game = Some(game);
    manifest.inputs.insert("checkpoint".into(), checkpoint.display().to_string());
    manifest.inputs.insert("checkpoint_id".into(), ckpt_id);
    manifest.outputs.insert("corpus".into(), out.display().to_string());
    manifest.outputs.insert("corpus_sha256".into(), corpus_hash(&text));
    manifest.summary = json!({ "trajectories": corpus.len(), "mean_final_score": mean });
    manifest.write(&sibling(out, "manifest.json"))?;
    writeln!(io.out, "wrote {} trajectories to {} (mean score {mean:.2})", corpus.len(), out.display())
        .map_err(out_err)?;
    Ok(())
}

/// `path` with `.suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}

pub struct ExplainQuery<'a> {
    pub corpus: &'a Path,
    pub trajectory: usize,
    /// Step index or `goal`.
    pub step: &'a str,
    pub goal_action: Option<&'a str>,
    pub game: Option<&'a str>,
    pub immediate_only: bool,
    pub format: Format,
    pub out: Option<&'a Path>,
}

/// Per-step immediate explanations, one indented line per distinct fact.
pub fn immediate_report(traj: &Trajectory, only: Option<usize>) -> String {
    let mut out = String::new();
    for s in traj.steps.iter().filter(|s| only.is_none_or(|o| o == s.step as usize)) {
        out.push_str(&format!("Step {} ({}): {}\n", s.step, s.location, s.action));
        if s.immediate_explanation.is_empty() {
            out.push_str("  (no salient facts)\n");
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in s.immediate_explanation.iter().filter(|e| seen.insert(e.as_str())) {
            out.push_str(&format!("  {e}\n"));
        }
    }
    out
}

pub fn cmd_explain(
    q: &ExplainQuery,
    config: &RunConfig,
    source: SeedSource,
    argv: &[String],
    io: &mut Io,
) -> Result<(), CliError> {
    let path = q.corpus;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read corpus `{}`: {e}", path.display())))?;
    let corpus = deserialize(&text).map_err(|e| CliError::Usage(format!("corpus `{}`: {e}", path.display())))?;
    let traj = corpus.get(q.trajectory).ok_or_else(|| {
        CliError::Usage(format!("trajectory {} out of range (corpus has {})", q.trajectory, corpus.len()))
    })?;
    let step = match q.step {
        "goal" => None,
        s => {
            let i: usize = s
                .parse()
                .map_err(|_| CliError::Usage(format!("step must be an index or `goal`, got `{s}`")))?;
            if i >= traj.steps.len() {
                return Err(CliError::Usage(format!(
                    "step {i} out of range (trajectory has {} steps)",
                    traj.steps.len()
                )));
            }
            Some(i)
        }
    };
    let report = if q.immediate_only {
        immediate_report(traj, step)
    } else {
        let game = match q.game {
            Some(g) => GameRecord::resolve(g)?,
            None => GameRecord::resolve(&traj.game_id)
                .map_err(|_| CliError::Usage(format!("unknown game `{}`; pass --game", traj.game_id)))?,
        };
        let spec = game.spec()?;
        let goal = match step {
            Some(i) => i,
            None => find_goal(traj, q.goal_action).ok_or_else(|| match q.goal_action {
                Some(a) => CliError::Usage(format!("no rewarded `{a}` step in trajectory {}", q.trajectory)),
                None => CliError::Usage(format!("trajectory {} has no rewarded step", q.trajectory)),
            })?,
        };
        let stats = build_stats(&corpus);
        let model = ActionModel::train(&corpus, &spec.grammar, config.explain.smoothing);
        let params = PipelineParams {
            p: config.explain.p,
            k: config.explain.k,
            critic_percentile: config.explain.critic_percentile,
        };
        let mut e = explain(&stats, &model, &spec.grammar, traj, goal, &params);
        e.trajectory = Some(q.trajectory);
        e.params = Some(params);
        match q.format {
            Format::Text => e.render(),
            Format::JsonLines => e.to_json_lines(),
        }
    };
    match q.out {
        Some(out) => {
            write_file(out, report.as_bytes())?;
            let mut manifest = Manifest::new("explain", argv, config, source);
            manifest.inputs.insert("corpus".into(), path.display().to_string());
            manifest.inputs.insert("corpus_sha256".into(), corpus_hash(&text));
            manifest.outputs.insert("report".into(), out.display().to_string());
            manifest.write(&sibling(out, "manifest.json"))?;
        }
        None => io.out.write_all(report.as_bytes()).map_err(out_err)?,
    }
    Ok(())
}

/// Mean and best final score over sampled episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    pub max: i64,
    pub max_score: i64,
}

impl EvalReport {
    pub fn render(&self, game: &str) -> String {
        let pct = |v: f64| 100.0 * v / self.max_score.max(1) as f64;
        format!(
            "game {game}\nepisodes {}\nEps. {:.2} ({:.1}% of {})\nMax {} ({:.1}% of {})\n",
            self.episodes,
            self.mean,
            pct(self.mean),
            self.max_score,
            self.max,
            pct(self.max as f64),
            self.max_score
        )
    }
}

/// Episode `i` samples actions with seed `config.seed + i`.
pub fn evaluate(policy: &Policy, spec: &GameSpec, config: &RunConfig) -> Result<EvalReport, CliError> {
    let runs = sample(policy, spec, "eval", config.eval.episodes, config)?;
    let scores: Vec<i64> = runs.iter().map(|t| t.final_score).collect();
    Ok(EvalReport {
        episodes: scores.len(),
        mean: scores.iter().sum::<i64>() as f64 / scores.len() as f64,
        max: scores.iter().copied().max().unwrap_or(0),
        max_score: spec.max_score,
    })
}

pub fn cmd_eval(
    checkpoint: &Path,
    game: Option<&str>,
    config: &RunConfig,
    source: SeedSource,
    out: Option<&Path>,
    argv: &[String],
    io: &mut Io,
) -> Result<(), CliError> {
    let (policy, game, ckpt_id) = load_checkpoint(checkpoint, game)?;
    let spec = game.spec()?;
    let report = evaluate(&policy, &spec, config)?;
    io.out.write_all(report.render(&spec.game_id).as_bytes()).map_err(out_err)?;
    if let Some(out) = out {
        let mut manifest = Manifest::new("eval", argv, config, source);
        manifest.game = Some(game);
        manifest.inputs.insert("checkpoint".into(), checkpoint.display().to_string());
        manifest.inputs.insert("checkpoint_id".into(), ckpt_id);
        manifest.summary = json!({
            "episodes": report.episodes,
            "mean": report.mean,
            "max": report.max,
            "max_score": report.max_score,
        });
        manifest.write(out)?;
    }
    Ok(())
}

/// Read-eval loop over `io.input`; ends on `quit`, end of input or the end
/// of the game.
pub fn cmd_play(spec: &GameSpec, show_kg: bool, io: &mut Io) -> Result<(), CliError> {
    let (mut state, obs) = spec.reset(0);
    let mut tracker = KgTracker::new(spec);
    tracker.observe(&obs, 0);
    let w = &mut io.out;
    writeln!(w, "{}\n\n{}", obs.desc, obs.feedback).map_err(out_err)?;
    let show = |w: &mut dyn Write, tracker: &KgTracker| -> Result<(), CliError> {
        if show_kg {
            writeln!(w, "[kg]").map_err(out_err)?;
            for t in tracker.graph().iter() {
                writeln!(w, "  {}", t.to_tsv()).map_err(out_err)?;
            }
        }
        Ok(())
    };
    show(*w, &tracker)?;
    let mut last_desc = obs.desc;
    let mut t = 0u32;
    loop {
        write!(w, "> ").map_err(out_err)?;
        w.flush().map_err(out_err)?;
        let mut line = String::new();
        let read = io.input.read_line(&mut line).map_err(|e| CliError::Io(format!("cannot read input: {e}")))?;
        let action = line.trim();
        if read == 0 || action.eq_ignore_ascii_case("quit") {
            writeln!(w).map_err(out_err)?;
            return Ok(());
        }
        if action.is_empty() {
            continue;
        }
        let (next, obs, done) = spec.step(&state, action);
        t += 1;
        tracker.observe(&obs, t);
        writeln!(w, "{}", obs.feedback).map_err(out_err)?;
        if obs.desc != last_desc {
            writeln!(w, "\n{}", obs.desc).map_err(out_err)?;
            last_desc = obs.desc.clone();
        }
        if obs.reward != 0 {
            writeln!(w, "[score {}/{}]", obs.total_score, spec.max_score).map_err(out_err)?;
        }
        show(*w, &tracker)?;
        state = next;
        if done {
            let cause = spec
                .terminal_cause(&state)
                .map_or("over".to_string(), |c| format!("{c:?}").to_lowercase());
            writeln!(w, "Game {cause}. Final score {}/{}.", state.score, spec.max_score).map_err(out_err)?;
            return Ok(());
        }
    }
}

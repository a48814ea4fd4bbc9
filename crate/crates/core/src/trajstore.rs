//! Trajectory records, the `.traj` line format, and test-time rollouts.
//!
//! A corpus is UTF-8 JSON lines. The first line is a header carrying the
//! schema version. Each trajectory is one `trajectory` line followed by
//! one `step` line per step. Graph triples are tab-separated strings.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{ShapeMismatch, Tape};
use crate::engine::{GameSpec, Observation, TerminalCause};
use crate::grammar::Grammar;
use crate::kgstate::{triple_to_text, KgTracker, Plurality, Triple};
use crate::policy::{immediate_explanation, valid_entities, Carry, Decode, ExplainConfig, Noise, Policy, StepInput};

pub const SCHEMA: &str = "hexplain-traj";
pub const SCHEMA_VERSION: u32 = 1;

/// The four text fields of an observation.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObservationText {
    pub desc: String,
    pub feedback: String,
    pub inventory: String,
    pub prev_action: String,
}

impl From<&Observation> for ObservationText {
    fn from(o: &Observation) -> Self {
        Self {
            desc: o.desc.clone(),
            feedback: o.feedback.clone(),
            inventory: o.inventory_text.clone(),
            prev_action: o.prev_action.clone(),
        }
    }
}

/// One decision: what the agent saw and believed, what it did and why,
/// and what followed. `game_score` and `reward` are after the action;
/// `location` is the room the action was taken in.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u32,
    pub observation: ObservationText,
    pub kg_triples: Vec<Triple>,
    pub action: String,
    pub immediate_explanation: Vec<String>,
    pub game_score: i64,
    pub reward: i64,
    pub critic_value: f64,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub game_id: String,
    pub seed: u64,
    pub checkpoint: String,
    pub steps: Vec<StepRecord>,
    pub final_score: i64,
    pub terminal: TerminalCause,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct SchemaError {
    /// One-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvariantViolation {
    #[error("step {index} has index {found}")]
    StepIndex { index: usize, found: u32 },
    #[error("final score {final_score} differs from last step score {last}")]
    FinalScore { final_score: i64, last: i64 },
    #[error("step {step}: explanation `{text}` is not a triple of the step's graph")]
    Explanation { step: u32, text: String },
    #[error("step {step}: action `{action}` does not parse")]
    Action { step: u32, action: String },
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed {} ({} steps, score {}, {:?})",
            self.game_id,
            self.seed,
            self.steps.len(),
            self.final_score,
            self.terminal
        )
    }
}

/// Checks the record invariants of one trajectory.
pub fn validate(traj: &Trajectory, grammar: &Grammar, plurality: &Plurality) -> Result<(), InvariantViolation> {
    for (i, s) in traj.steps.iter().enumerate() {
        if s.step as usize != i {
            return Err(InvariantViolation::StepIndex { index: i, found: s.step });
        }
        let texts: BTreeSet<String> = s.kg_triples.iter().map(|t| triple_to_text(t, plurality)).collect();
        if let Some(bad) = s.immediate_explanation.iter().find(|e| !texts.contains(*e)) {
            return Err(InvariantViolation::Explanation {
                step: s.step,
                text: bad.clone(),
            });
        }
        if grammar.parse_action(&s.action).is_none() {
            return Err(InvariantViolation::Action {
                step: s.step,
                action: s.action.clone(),
            });
        }
    }
    let last = traj.steps.last().map_or(0, |s| s.game_score);
    if traj.final_score != last {
        return Err(InvariantViolation::FinalScore {
            final_score: traj.final_score,
            last,
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Header {
        schema: String,
        version: u32,
    },
    Trajectory {
        id: usize,
        game_id: String,
        seed: u64,
        checkpoint: String,
        final_score: i64,
        terminal: TerminalCause,
        steps: usize,
    },
    Step {
        trajectory: usize,
        step: u32,
        desc: String,
        feedback: String,
        inventory: String,
        prev_action: String,
        kg: Vec<String>,
        action: String,
        explanation: Vec<String>,
        game_score: i64,
        reward: i64,
        critic_value: f64,
        location: String,
    },
}

fn push_line(out: &mut String, line: &Line) {
    out.push_str(&serde_json::to_string(line).expect("records serialize"));
    out.push('\n');
}

pub fn serialize(trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    push_line(
        &mut out,
        &Line::Header {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
        },
    );
    for (id, t) in trajectories.iter().enumerate() {
        push_line(
            &mut out,
            &Line::Trajectory {
                id,
                game_id: t.game_id.clone(),
                seed: t.seed,
                checkpoint: t.checkpoint.clone(),
                final_score: t.final_score,
                terminal: t.terminal,
                steps: t.steps.len(),
            },
        );
        for s in &t.steps {
            push_line(
                &mut out,
                &Line::Step {
                    trajectory: id,
                    step: s.step,
                    desc: s.observation.desc.clone(),
                    feedback: s.observation.feedback.clone(),
                    inventory: s.observation.inventory.clone(),
                    prev_action: s.observation.prev_action.clone(),
                    kg: s.kg_triples.iter().map(Triple::to_tsv).collect(),
                    action: s.action.clone(),
                    explanation: s.immediate_explanation.clone(),
                    game_score: s.game_score,
                    reward: s.reward,
                    critic_value: s.critic_value,
                    location: s.location.clone(),
                },
            );
        }
    }
    out
}

pub fn deserialize(text: &str) -> Result<Vec<Trajectory>, SchemaError> {
    let err = |line: usize, message: String| SchemaError { line, message };
    let mut out: Vec<Trajectory> = Vec::new();
    // Steps still expected for the open trajectory.
    let mut pending = 0usize;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        let parsed: Line = serde_json::from_str(raw).map_err(|e| err(n, format!("malformed record: {e}")))?;
        match parsed {
            Line::Header { schema, version } => {
                if n != 1 {
                    return Err(err(n, "header after the first line".into()));
                }
                if schema != SCHEMA || version != SCHEMA_VERSION {
                    return Err(err(n, format!("unsupported schema {schema} v{version}")));
                }
            }
            _ if n == 1 => return Err(err(n, "missing header".into())),
            Line::Trajectory {
                id,
                game_id,
                seed,
                checkpoint,
                final_score,
                terminal,
                steps,
            } => {
                if pending > 0 {
                    return Err(err(n, format!("previous trajectory is missing {pending} step(s)")));
                }
                if id != out.len() {
                    return Err(err(n, format!("expected trajectory {}, found {id}", out.len())));
                }
                pending = steps;
                out.push(Trajectory {
                    game_id,
                    seed,
                    checkpoint,
                    steps: Vec::with_capacity(steps),
                    final_score,
                    terminal,
                });
            }
            Line::Step {
                trajectory,
                step,
                desc,
                feedback,
                inventory,
                prev_action,
                kg,
                action,
                explanation,
                game_score,
                reward,
                critic_value,
                location,
            } => {
                if pending == 0 || trajectory + 1 != out.len() {
                    return Err(err(n, format!("unexpected step for trajectory {trajectory}")));
                }
                let t = out.last_mut().expect("checked above");
                if step as usize != t.steps.len() {
                    return Err(err(n, format!("expected step {}, found {step}", t.steps.len())));
                }
                let kg_triples = kg
                    .iter()
                    .map(|s| Triple::from_tsv(s))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| err(n, format!("bad triple: {e}")))?;
                t.steps.push(StepRecord {
                    step,
                    observation: ObservationText {
                        desc,
                        feedback,
                        inventory,
                        prev_action,
                    },
                    kg_triples,
                    action,
                    immediate_explanation: explanation,
                    game_score,
                    reward,
                    critic_value,
                    location,
                });
                pending -= 1;
            }
        }
    }
    if last_line == 0 {
        return Err(err(1, "empty corpus".into()));
    }
    if pending > 0 {
        return Err(err(last_line, format!("trajectory is missing {pending} step(s)")));
    }
    Ok(out)
}

/// Lower-case hex SHA-256 of the corpus text.
pub fn corpus_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// Short identifier of a checkpoint: the first 16 hex digits of its
/// SHA-256.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))[..16].to_string()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutConfig {
    pub max_steps: u32,
    pub explain: ExplainConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_steps: 100,
            explain: ExplainConfig::default(),
        }
    }
}

/// `n` sampled episodes from the frozen policy. Trajectory `i` uses seed
/// `seed + i` for action sampling, so each is reproducible on its own.
pub fn collect_rollouts(
    policy: &Policy,
    spec: &GameSpec,
    checkpoint: &str,
    n: usize,
    seed: u64,
    config: RolloutConfig,
) -> Result<Vec<Trajectory>, ShapeMismatch> {
    (0..n)
        .map(|i| rollout(policy, spec, checkpoint, seed.wrapping_add(i as u64), config))
        .collect()
}

/// One sampled episode with per-step immediate explanations.
pub fn rollout(
    policy: &Policy,
    spec: &GameSpec,
    checkpoint: &str,
    seed: u64,
    config: RolloutConfig,
) -> Result<Trajectory, ShapeMismatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plurality = Plurality::for_game(spec);
    let (mut state, mut obs) = spec.reset(seed);
    let mut tracker = KgTracker::new(spec);
    tracker.observe(&obs, 0);
    let mut carry = Carry::zeros(policy.config.d_text);
    let mut steps = Vec::new();
    let mut terminal = TerminalCause::Truncation;
    for t in 0..config.max_steps {
        let graph = tracker.graph();
        let mut tape = Tape::new(&policy.store);
        let input = StepInput {
            obs: &obs,
            carry: &carry,
            graph,
        };
        let out = policy.forward(&mut tape, input, Noise::none(), Decode::Sample(&mut rng))?;
        let valid = valid_entities(graph, &obs, t, config.explain.window);
        let explanation = immediate_explanation(&out.trace, graph, &valid, &plurality, config.explain.k);
        let location = state.room.clone();
        let (next, next_obs, done) = spec.step(&state, &out.action);
        steps.push(StepRecord {
            step: t,
            observation: ObservationText::from(&obs),
            kg_triples: graph.iter().cloned().collect(),
            action: out.action,
            immediate_explanation: explanation.into_iter().map(|e| e.text).collect(),
            game_score: next.score,
            reward: next_obs.reward,
            critic_value: out.trace.value,
            location,
        });
        carry = out.carry;
        state = next;
        obs = next_obs;
        tracker.observe(&obs, t + 1);
        if done {
            terminal = spec.terminal_cause(&state).unwrap_or(TerminalCause::Goal);
            break;
        }
    }
    Ok(Trajectory {
        game_id: spec.game_id.clone(),
        seed,
        checkpoint: checkpoint.to_string(),
        final_score: state.score,
        steps,
        terminal,
    })
}

//! Shared fixtures: engine-backed synthetic trajectory corpora.
#![allow(dead_code)]

use hexplain::engine::{GameSpec, TerminalCause};
use hexplain::kgstate::{triple_to_text, KgTracker, Plurality};
use hexplain::policy::PolicyConfig;
use hexplain::trajstore::{ObservationText, StepRecord, Trajectory};
use rand::seq::IteratorRandom;
use rand::Rng;

pub fn small() -> PolicyConfig {
    PolicyConfig {
        d_text: 8,
        d_emb: 6,
        d_sub: 4,
        heads: 2,
        ..PolicyConfig::default()
    }
}

/// Plays `actions` (stopping early at a terminal state) and records the
/// trajectory. The stored critic value is the discounted reward to go
/// (γ = 0.9) and each step is explained by its first triple mentioning
/// an object of the action, if any.
pub fn record_episode(spec: &GameSpec, actions: &[String], seed: u64) -> Trajectory {
    let plurality = Plurality::for_game(spec);
    let (mut state, mut obs) = spec.reset(0);
    let mut tracker = KgTracker::new(spec);
    tracker.observe(&obs, 0);
    let mut steps = Vec::new();
    let mut terminal = TerminalCause::Truncation;
    for (t, a) in actions.iter().enumerate() {
        let graph = tracker.graph();
        let words: Vec<&str> = a.split_whitespace().skip(1).collect();
        let explanation: Vec<String> = graph
            .iter()
            .find(|x| words.contains(&x.subject.as_str()))
            .map(|x| triple_to_text(x, &plurality))
            .into_iter()
            .collect();
        let location = state.room.clone();
        let (next, next_obs, done) = spec.step(&state, a);
        steps.push(StepRecord {
            step: t as u32,
            observation: ObservationText::from(&obs),
            kg_triples: graph.iter().cloned().collect(),
            action: a.clone(),
            immediate_explanation: explanation,
            game_score: next.score,
            reward: next_obs.reward,
            critic_value: 0.0,
            location,
        });
        state = next;
        obs = next_obs;
        tracker.observe(&obs, t as u32 + 1);
        if done {
            terminal = spec.terminal_cause(&state).unwrap_or(TerminalCause::Goal);
            break;
        }
    }
    let mut to_go = 0.0;
    for s in steps.iter_mut().rev() {
        to_go = s.reward as f64 + 0.9 * to_go;
        s.critic_value = to_go;
    }
    Trajectory {
        game_id: spec.game_id.clone(),
        seed,
        checkpoint: "synthetic".into(),
        final_score: state.score,
        steps,
        terminal,
    }
}

/// Eggtree runs of the chain climb tree -> take egg -> open egg after a
/// randomized detour: an optional look, a walk to the path (optionally
/// taking the leaves) and back. The detour varies every key before the
/// chain while the chain's own keys stay fixed.
pub fn eggtree_corpus(spec: &GameSpec, n: usize, rng: &mut impl Rng) -> Vec<Trajectory> {
    (0..n)
        .map(|i| {
            let mut a: Vec<String> = Vec::new();
            if rng.gen_bool(0.5) {
                a.push("look".into());
            }
            a.push("go east".into());
            if rng.gen_bool(0.5) {
                a.push("take leaves".into());
            }
            a.extend(["go west", "climb tree", "take egg", "open egg"].map(String::from));
            record_episode(spec, &a, i as u64)
        })
        .collect()
}

/// Noisy walkthrough play: with probability `noise` (or whenever the next
/// walkthrough action is not currently valid) a uniformly random valid
/// action is taken, otherwise the next walkthrough action. Runs stop at a
/// terminal state or after `max_steps`.
pub fn noisy_walkthrough(spec: &GameSpec, max_steps: usize, noise: f64, seed: u64, rng: &mut impl Rng) -> Trajectory {
    let (mut state, _) = spec.reset(0);
    let mut next = 0;
    let mut actions = Vec::new();
    for _ in 0..max_steps {
        let valid = spec.valid_actions(&state);
        let planned = spec.walkthrough.get(next).filter(|a| valid.contains(*a));
        let action = match planned {
            Some(a) if !rng.gen_bool(noise) => a.clone(),
            _ => match valid.iter().choose(rng) {
                Some(a) => a.clone(),
                None => "look".to_string(),
            },
        };
        if spec.walkthrough.get(next) == Some(&action) {
            next += 1;
        }
        let (s, _, done) = spec.step(&state, &action);
        state = s;
        actions.push(action);
        if done {
            break;
        }
    }
    record_episode(spec, &actions, seed)
}

pub fn noisy_corpus(spec: &GameSpec, n: usize, max_steps: usize, noise: f64, rng: &mut impl Rng) -> Vec<Trajectory> {
    (0..n).map(|i| noisy_walkthrough(spec, max_steps, noise, i as u64, rng)).collect()
}

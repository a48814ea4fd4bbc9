//! Temporally extended explanations: which earlier steps of a trajectory
//! a goal step depended on, found by a Bayesian state filter, an action
//! model filter and a semantic filter.

mod lm;
mod report;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::DIRECTIONS;
use crate::grammar::{canonicalize, Grammar};
use crate::kgstate::canonical_entity;
use crate::trajstore::{StepRecord, Trajectory};

pub use lm::{ActionGenerator, ActionModel};
pub use report::{parse_json_lines, parse_report, synthesize, ExplainedStep, ReportError, TemporalExplanation};

/// Identity of a game step for counting: a digest of the normalized
/// description and feedback, plus the canonical action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepKey {
    pub observation: String,
    pub action: String,
}

impl StepKey {
    pub fn new(desc: &str, feedback: &str, action: &str) -> Self {
        let text = format!("{}\n{}", canonicalize(desc), canonicalize(feedback));
        let digest = Sha256::digest(text.as_bytes());
        Self {
            observation: digest[..8].iter().map(|b| format!("{b:02x}")).collect(),
            action: canonicalize(action),
        }
    }

    pub fn of(step: &StepRecord) -> Self {
        Self::new(&step.observation.desc, &step.observation.feedback, &step.action)
    }

    fn is_empty(&self) -> bool {
        self.action.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("step `{0:?}` never occurs in the corpus")]
pub struct UnseenStep(pub StepKey);

/// Per-trajectory deduplicated counts: `C(A)` is the number of
/// trajectories containing `A`; `C(A∩B)` the number in which some
/// occurrence of `A` precedes some occurrence of `B`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BayesStats {
    keys: Vec<StepKey>,
    index: HashMap<StepKey, u32>,
    single: Vec<u32>,
    pair: HashMap<(u32, u32), u32>,
    pub trajectories: u32,
}

impl BayesStats {
    pub fn id(&self, key: &StepKey) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn keys(&self) -> &[StepKey] {
        &self.keys
    }

    pub fn count(&self, key: &StepKey) -> u32 {
        self.id(key).map_or(0, |i| self.single[i as usize])
    }

    /// `C(A∩B)`: trajectories where `a` precedes `b`.
    pub fn count_pair(&self, a: &StepKey, b: &StepKey) -> u32 {
        match (self.id(a), self.id(b)) {
            (Some(i), Some(j)) => self.pair.get(&(i, j)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    fn intern(&mut self, key: StepKey) -> u32 {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.keys.len() as u32;
        self.index.insert(key.clone(), i);
        self.keys.push(key);
        self.single.push(0);
        i
    }

    /// Folds one trajectory into the counts.
    pub fn add(&mut self, traj: &Trajectory) {
        // First and last position of each key in this trajectory.
        let mut span: Vec<(u32, usize, usize)> = Vec::new();
        let mut at: HashMap<u32, usize> = HashMap::new();
        for (pos, step) in traj.steps.iter().enumerate() {
            let key = StepKey::of(step);
            if key.is_empty() {
                continue;
            }
            let id = self.intern(key);
            match at.get(&id) {
                Some(&k) => span[k].2 = pos,
                None => {
                    at.insert(id, span.len());
                    span.push((id, pos, pos));
                }
            }
        }
        for &(id, _, _) in &span {
            self.single[id as usize] += 1;
        }
        for &(a, first_a, _) in &span {
            for &(b, _, last_b) in &span {
                if first_a < last_b {
                    *self.pair.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
        self.trajectories += 1;
    }

    /// Sums counts of another corpus into this one.
    pub fn merge(&mut self, other: &BayesStats) {
        let ids: Vec<u32> = other.keys.iter().map(|k| self.intern(k.clone())).collect();
        for (i, &c) in other.single.iter().enumerate() {
            self.single[ids[i] as usize] += c;
        }
        for (&(a, b), &c) in &other.pair {
            *self.pair.entry((ids[a as usize], ids[b as usize])).or_insert(0) += c;
        }
        self.trajectories += other.trajectories;
    }
}

pub fn build_stats(trajectories: &[Trajectory]) -> BayesStats {
    let mut stats = BayesStats::default();
    for t in trajectories {
        stats.add(t);
    }
    stats
}

/// `P(A|B) = C(A∩B) / C(B)`.
pub fn conditional_prob(stats: &BayesStats, a: &StepKey, b: &StepKey) -> Result<f64, UnseenStep> {
    let cb = stats.count(b);
    if cb == 0 {
        return Err(UnseenStep(b.clone()));
    }
    Ok(f64::from(stats.count_pair(a, b)) / f64::from(cb))
}

/// Works backwards from `goal`: an earlier step `A` joins when
/// `P(A|B) > p` for a selected step `B` after it (the goal seeds the
/// selection), until nothing changes. Returns indices in trajectory
/// order, excluding the goal.
pub fn bayes_filter(stats: &BayesStats, traj: &Trajectory, goal: usize, p: f64) -> Vec<usize> {
    let keys: Vec<StepKey> = traj.steps.iter().map(StepKey::of).collect();
    let mut selected = vec![false; goal];
    let mut frontier = vec![goal];
    while let Some(b) = frontier.pop() {
        for a in 0..b {
            if selected[a] {
                continue;
            }
            if conditional_prob(stats, &keys[a], &keys[b]).is_ok_and(|pr| pr > p) {
                selected[a] = true;
                frontier.push(a);
            }
        }
    }
    (0..goal).filter(|&i| selected[i]).collect()
}

/// Keeps each `B ∈ x1` whose action is among the generator's top `k`
/// for the prompt `(o_A, a_A, o_B)`. `k = None` keeps every action the
/// generator can rank.
pub fn lm_filter(model: &dyn ActionGenerator, traj: &Trajectory, a: usize, x1: &[usize], k: Option<usize>) -> Vec<usize> {
    let sa = &traj.steps[a];
    x1.iter()
        .copied()
        .filter(|&b| {
            let sb = &traj.steps[b];
            let top = model.top_k(&sa.observation, &sa.action, &sb.observation, k);
            let target = canonicalize(&sb.action);
            top.contains(&target)
        })
        .collect()
}

/// Entity words of an action: its filled blanks, without directions.
pub fn action_entities(grammar: &Grammar, action: &str) -> BTreeSet<String> {
    grammar
        .parse_action(action)
        .map(|p| p.fillers)
        .unwrap_or_default()
        .iter()
        .map(|f| canonical_entity(f))
        .filter(|e| !e.is_empty() && !DIRECTIONS.contains(&e.as_str()))
        .collect()
}

/// Entities of the triples first present at step `t`, without the player.
pub fn added_entities(traj: &Trajectory, t: usize) -> BTreeSet<String> {
    let prev: BTreeSet<_> = if t == 0 {
        BTreeSet::new()
    } else {
        traj.steps[t - 1].kg_triples.iter().collect()
    };
    traj.steps[t]
        .kg_triples
        .iter()
        .filter(|x| !prev.contains(x))
        .flat_map(|x| [x.subject.clone(), x.object.clone()])
        .filter(|e| e != "player")
        .collect()
}

/// Nearest-rank `q` quantile of `|critic value|` over the trajectory.
pub fn critic_quantile(traj: &Trajectory, q: f64) -> f64 {
    let mut v: Vec<f64> = traj.steps.iter().map(|s| s.critic_value.abs()).collect();
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let rank = (q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Which semantic rules keep `b` for the query step `a`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMatch {
    pub shared_action_entity: bool,
    pub shared_graph_entity: bool,
    pub same_location: bool,
    pub salient: bool,
}

impl SemanticMatch {
    pub fn any(&self) -> bool {
        self.shared_action_entity || self.shared_graph_entity || self.same_location || self.salient
    }
}

pub fn semantic_match(grammar: &Grammar, traj: &Trajectory, a: usize, b: usize, threshold: f64) -> SemanticMatch {
    let (sa, sb) = (&traj.steps[a], &traj.steps[b]);
    // A step occurs where it was taken and where it led.
    let rooms = |i: usize| {
        let here = traj.steps[i].location.as_str();
        let next = traj.steps.get(i + 1).map_or(here, |s| s.location.as_str());
        [here, next]
    };
    let (ra, rb) = (rooms(a), rooms(b));
    SemanticMatch {
        shared_action_entity: !action_entities(grammar, &sa.action).is_disjoint(&action_entities(grammar, &sb.action)),
        shared_graph_entity: !added_entities(traj, a).is_disjoint(&added_entities(traj, b)),
        same_location: rb.iter().any(|r| ra.contains(r)),
        salient: sb.reward != 0 || sb.critic_value.abs() >= threshold,
    }
}

/// Keeps each `B ∈ x2` that shares an action entity or a newly added
/// graph entity with `A`, shares a room with `A` (a step occurs both
/// where it was taken and where it led), or is rewarded or has a high
/// absolute critic value (at or above the `critic_percentile` quantile
/// of the trajectory).
pub fn semantic_filter(grammar: &Grammar, x2: &[usize], a: usize, traj: &Trajectory, critic_percentile: f64) -> Vec<usize> {
    let threshold = critic_quantile(traj, critic_percentile);
    x2.iter().copied().filter(|&b| semantic_match(grammar, traj, a, b, threshold).any()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub p: f64,
    /// `None` disables the action-model cut.
    pub k: Option<usize>,
    pub critic_percentile: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            p: 0.5,
            k: Some(20),
            critic_percentile: 0.9,
        }
    }
}

/// The three filter stages for one goal step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filtered {
    pub x: Vec<usize>,
    pub x1: Vec<usize>,
    pub x2: Vec<usize>,
    pub x3: Vec<usize>,
}

pub fn run_filters(
    stats: &BayesStats,
    model: &dyn ActionGenerator,
    grammar: &Grammar,
    traj: &Trajectory,
    goal: usize,
    params: &PipelineParams,
) -> Filtered {
    let x: Vec<usize> = (0..goal).collect();
    let x1 = bayes_filter(stats, traj, goal, params.p);
    let x2 = lm_filter(model, traj, goal, &x1, params.k);
    let x3 = semantic_filter(grammar, &x2, goal, traj, params.critic_percentile);
    Filtered { x, x1, x2, x3 }
}

/// Full pipeline: filters then synthesis.
pub fn explain(
    stats: &BayesStats,
    model: &dyn ActionGenerator,
    grammar: &Grammar,
    traj: &Trajectory,
    goal: usize,
    params: &PipelineParams,
) -> TemporalExplanation {
    let f = run_filters(stats, model, grammar, traj, goal, params);
    let mut e = synthesize(stats, goal, &f.x3, traj);
    e.sizes = [f.x.len(), f.x1.len(), f.x2.len(), f.x3.len()];
    e.params = Some(*params);
    e
}

/// First step whose action is `action` (canonical form) and that earned
/// reward; with `action = None`, the last rewarded step.
pub fn find_goal(traj: &Trajectory, action: Option<&str>) -> Option<usize> {
    match action {
        Some(a) => {
            let a = canonicalize(a);
            traj.steps.iter().position(|s| s.reward > 0 && canonicalize(&s.action) == a)
        }
        None => traj.steps.iter().rposition(|s| s.reward > 0),
    }
}

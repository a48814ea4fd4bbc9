//! Action model for the second filter: given the query step's
//! observation and action and a candidate's observation, rank the actions
//! likely to be taken at the candidate.

use std::collections::{BTreeMap, HashMap};

use crate::grammar::{canonicalize, Grammar};
use crate::trajstore::{ObservationText, Trajectory};

/// Anything that ranks next actions for a prompt `(o_A, a_A, o_B)`.
pub trait ActionGenerator {
    /// At most `k` distinct canonical actions, best first; `None` means
    /// every action the generator can rank.
    fn top_k(&self, o_a: &ObservationText, a_a: &str, o_b: &ObservationText, k: Option<usize>) -> Vec<String>;
}

/// Smoothed conditional frequency table keyed on (location of the
/// candidate observation, template of the query action), trained on
/// consecutive steps `(o_t, a_t, o_{t+1}) -> a_{t+1}`. Scores are
/// context counts plus `smoothing` times the global relative frequency;
/// unseen contexts fall back to the global frequencies alone.
#[derive(Debug, Clone)]
pub struct ActionModel {
    grammar: Grammar,
    smoothing: f64,
    table: HashMap<(String, String), BTreeMap<String, u32>>,
    global: BTreeMap<String, u32>,
    total: u32,
}

/// Room title: the first line of the description, lower-cased.
pub(super) fn location_of(obs: &ObservationText) -> String {
    obs.desc.lines().next().unwrap_or("").trim().to_lowercase()
}

impl ActionModel {
    pub fn train(corpus: &[Trajectory], grammar: &Grammar, smoothing: f64) -> Self {
        let mut model = Self {
            grammar: grammar.clone(),
            smoothing,
            table: HashMap::new(),
            global: BTreeMap::new(),
            total: 0,
        };
        for traj in corpus {
            for s in &traj.steps {
                *model.global.entry(canonicalize(&s.action)).or_insert(0) += 1;
                model.total += 1;
            }
            for w in traj.steps.windows(2) {
                let ctx = (location_of(&w[1].observation), model.template_of(&w[0].action));
                *model.table.entry(ctx).or_default().entry(canonicalize(&w[1].action)).or_insert(0) += 1;
            }
        }
        model
    }

    pub fn template_of(&self, action: &str) -> String {
        match self.grammar.parse_action(action) {
            Some(p) => p.template,
            None => canonicalize(action).split(' ').next().unwrap_or("").to_string(),
        }
    }

    /// Distinct actions seen in training.
    pub fn vocabulary_size(&self) -> usize {
        self.global.len()
    }

    /// Scores of every rankable action for the context.
    pub fn scores(&self, location: &str, template: &str) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        let ctx = self.table.get(&(location.to_string(), template.to_string()));
        if let Some(counts) = ctx {
            for (a, &c) in counts {
                out.insert(a.clone(), f64::from(c));
            }
        }
        let weight = if ctx.is_some() { self.smoothing } else { 1.0 };
        if weight > 0.0 && self.total > 0 {
            for (a, &c) in &self.global {
                *out.entry(a.clone()).or_insert(0.0) += weight * f64::from(c) / f64::from(self.total);
            }
        }
        out.retain(|_, s| *s > 0.0);
        out
    }
}

impl ActionGenerator for ActionModel {
    fn top_k(&self, _o_a: &ObservationText, a_a: &str, o_b: &ObservationText, k: Option<usize>) -> Vec<String> {
        let scores = self.scores(&location_of(o_b), &self.template_of(a_a));
        let mut ranked: Vec<(String, f64)> = scores.into_iter().collect();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        ranked.into_iter().take(k.unwrap_or(usize::MAX)).map(|(a, _)| a).collect()
    }
}

//! Immediate explanations: the most attended graph facts of one step.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::forward::ForwardTrace;
use super::tokenize;
use crate::engine::Observation;
use crate::kgstate::{triple_to_text, Category, KnowledgeGraph, Plurality, Triple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainConfig {
    /// Number of entities to explain.
    pub k: usize,
    /// An entity is recent if one of its triples was added within this
    /// many steps.
    pub window: u32,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { k: 3, window: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedNode {
    pub category: Category,
    pub entity: String,
    pub saliency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationItem {
    pub triple: Triple,
    pub saliency: f64,
    pub text: String,
}

impl fmt::Display for ExplanationItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {:.6} | {}", self.triple, self.saliency, self.text)
    }
}

/// Every node of every sub-graph, by decreasing `|α′|`, then category
/// order, then entity.
pub fn rank_nodes(trace: &ForwardTrace) -> Vec<RankedNode> {
    let mut nodes: Vec<RankedNode> = trace
        .subgraphs
        .iter()
        .flat_map(|s| {
            s.nodes.iter().zip(&s.saliency).map(|(e, &a)| RankedNode {
                category: s.category,
                entity: e.clone(),
                saliency: a,
            })
        })
        .collect();
    nodes.sort_by(|a, b| {
        b.saliency
            .abs()
            .partial_cmp(&a.saliency.abs())
            .unwrap_or(Ordering::Equal)
            .then(a.category.index().cmp(&b.category.index()))
            .then_with(|| a.entity.cmp(&b.entity))
    });
    nodes
}

/// Entities with a triple added in the last `window` steps or whose words
/// all appear in the observation.
pub fn valid_entities(graph: &KnowledgeGraph, obs: &Observation, step: u32, window: u32) -> BTreeSet<String> {
    let words: BTreeSet<String> = [&obs.desc, &obs.feedback, &obs.inventory_text]
        .iter()
        .flat_map(|t| tokenize(t))
        .collect();
    let mut valid = BTreeSet::new();
    for t in graph.iter() {
        if graph.step_added(t).is_some_and(|s| s + window >= step) {
            valid.insert(t.subject.clone());
            valid.insert(t.object.clone());
        }
    }
    for e in graph.entities() {
        let toks = tokenize(&e);
        if !toks.is_empty() && toks.iter().all(|w| words.contains(w)) {
            valid.insert(e);
        }
    }
    valid
}

/// The top-`k` valid entities by `|α′|`, each explained by its incident
/// triple (within the node's sub-graph) whose other end is most salient.
pub fn immediate_explanation(
    trace: &ForwardTrace,
    graph: &KnowledgeGraph,
    valid: &BTreeSet<String>,
    plurality: &Plurality,
    k: usize,
) -> Vec<ExplanationItem> {
    let mut chosen = BTreeSet::new();
    let mut out = Vec::new();
    for node in rank_nodes(trace) {
        if out.len() >= k {
            break;
        }
        if !valid.contains(&node.entity) || chosen.contains(&node.entity) {
            continue;
        }
        let sub = &trace.subgraphs[node.category.index()];
        let best = graph
            .incident(&node.entity)
            .filter(|t| t.category == node.category)
            .map(|t| {
                let other = sub.saliency_of(t.other_end(&node.entity)).unwrap_or(0.0);
                (t, other)
            })
            .fold(None::<(&Triple, f64)>, |best, (t, s)| match best {
                Some((_, b)) if b.abs() >= s.abs() => best,
                _ => Some((t, s)),
            });
        if let Some((triple, _)) = best {
            chosen.insert(node.entity.clone());
            out.push(ExplanationItem {
                triple: triple.clone(),
                saliency: node.saliency,
                text: triple_to_text(triple, plurality),
            });
        }
    }
    out
}

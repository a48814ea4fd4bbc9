//! Synthesis and rendering of temporal explanations.
//!
//! The text report is a machine-readable JSON header line (prefixed with
//! `# `), a `---` separator, then prose: one line per selected step and a
//! closing goal line. The json-lines form carries the same content as a
//! header record followed by one record per block.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{conditional_prob, BayesStats, PipelineParams, StepKey};
use crate::trajstore::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedStep {
    pub step: usize,
    pub action: String,
    pub location: String,
    pub because: Vec<String>,
    /// The later selected step (or the goal) this one is most needed for.
    pub needed_for: usize,
    pub needed_for_action: String,
    /// `P(this | needed_for)`.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalExplanation {
    pub trajectory: Option<usize>,
    pub goal: usize,
    pub goal_action: String,
    pub goal_location: String,
    pub steps: Vec<ExplainedStep>,
    /// `|X|, |X1|, |X2|, |X3|`.
    pub sizes: [usize; 4],
    pub params: Option<PipelineParams>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: prose does not match the header")]
    ProseMismatch { line: usize },
}

/// One block per selected step, in trajectory order, each linked to the
/// later selected step or goal `B` maximizing `P(step | B)` (earliest on
/// ties).
pub fn synthesize(stats: &BayesStats, goal: usize, x3: &[usize], traj: &Trajectory) -> TemporalExplanation {
    let mut selected: Vec<usize> = x3.iter().copied().filter(|&i| i < goal).collect();
    selected.sort_unstable();
    selected.dedup();
    let keys: Vec<StepKey> = traj.steps.iter().map(StepKey::of).collect();
    let steps = selected
        .iter()
        .map(|&i| {
            let mut best = (goal, f64::NEG_INFINITY);
            for &j in selected.iter().filter(|&&j| j > i).chain(std::iter::once(&goal)) {
                let p = conditional_prob(stats, &keys[i], &keys[j]).unwrap_or(0.0);
                if p > best.1 || (p == best.1 && j < best.0) {
                    best = (j, p);
                }
            }
            let s = &traj.steps[i];
            ExplainedStep {
                step: i,
                action: s.action.clone(),
                location: s.location.clone(),
                because: s.immediate_explanation.clone(),
                needed_for: best.0,
                needed_for_action: traj.steps[best.0].action.clone(),
                probability: best.1,
            }
        })
        .collect();
    let g = &traj.steps[goal];
    TemporalExplanation {
        trajectory: None,
        goal,
        goal_action: g.action.clone(),
        goal_location: g.location.clone(),
        steps,
        sizes: [goal, selected.len(), selected.len(), selected.len()],
        params: None,
    }
}

impl TemporalExplanation {
    pub fn selected(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.step).collect()
    }

    pub fn selected_actions(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.action.as_str()).collect()
    }

    /// The prose lines.
    pub fn prose(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .steps
            .iter()
            .map(|s| {
                let because = if s.because.is_empty() {
                    "no salient facts".to_string()
                } else {
                    s.because.join(", ")
                };
                format!(
                    "Step {} ({}): {} - because {}; needed for: {} (step {})",
                    s.step, s.location, s.action, because, s.needed_for_action, s.needed_for
                )
            })
            .collect();
        out.push(format!("Goal: step {} ({}): {}", self.goal, self.goal_location, self.goal_action));
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let header = serde_json::to_string(self).expect("explanations serialize");
        let _ = writeln!(out, "# {header}");
        out.push_str("---\n");
        for line in self.prose() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn to_json_lines(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            record: &'static str,
            trajectory: Option<usize>,
            goal: usize,
            goal_action: &'a str,
            goal_location: &'a str,
            selected: Vec<usize>,
            sizes: [usize; 4],
            params: Option<PipelineParams>,
        }
        #[derive(Serialize)]
        struct Block<'a> {
            record: &'static str,
            #[serde(flatten)]
            step: &'a ExplainedStep,
            text: &'a str,
        }
        let mut out = String::new();
        let header = Header {
            record: "header",
            trajectory: self.trajectory,
            goal: self.goal,
            goal_action: &self.goal_action,
            goal_location: &self.goal_location,
            selected: self.selected(),
            sizes: self.sizes,
            params: self.params,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        let prose = self.prose();
        for (s, text) in self.steps.iter().zip(&prose) {
            let block = Block {
                record: "step",
                step: s,
                text,
            };
            out.push_str(&serde_json::to_string(&block).expect("block serializes"));
            out.push('\n');
        }
        out
    }
}

fn malformed(line: usize, message: impl Into<String>) -> ReportError {
    ReportError::Malformed {
        line,
        message: message.into(),
    }
}

/// Parses a rendered report and checks that its prose matches the header.
pub fn parse_report(text: &str) -> Result<TemporalExplanation, ReportError> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| malformed(1, "empty report"))?;
    let json = first.strip_prefix("# ").ok_or_else(|| malformed(1, "missing header"))?;
    let e: TemporalExplanation = serde_json::from_str(json).map_err(|err| malformed(1, err.to_string()))?;
    if lines.next() != Some("---") {
        return Err(malformed(2, "missing separator"));
    }
    let prose = e.prose();
    let rest: Vec<&str> = lines.collect();
    for (i, expected) in prose.iter().enumerate() {
        if rest.get(i) != Some(&expected.as_str()) {
            return Err(ReportError::ProseMismatch { line: i + 3 });
        }
    }
    if rest.len() != prose.len() {
        return Err(ReportError::ProseMismatch { line: prose.len() + 3 });
    }
    Ok(e)
}

/// Parses the json-lines form.
pub fn parse_json_lines(text: &str) -> Result<TemporalExplanation, ReportError> {
    #[derive(Deserialize)]
    struct Header {
        record: String,
        trajectory: Option<usize>,
        goal: usize,
        goal_action: String,
        goal_location: String,
        selected: Vec<usize>,
        sizes: [usize; 4],
        params: Option<PipelineParams>,
    }
    #[derive(Deserialize)]
    struct Block {
        record: String,
        #[serde(flatten)]
        step: ExplainedStep,
        text: String,
    }
    let mut lines = text.lines();
    let h: Header = serde_json::from_str(lines.next().ok_or_else(|| malformed(1, "empty report"))?)
        .map_err(|err| malformed(1, err.to_string()))?;
    if h.record != "header" {
        return Err(malformed(1, "missing header"));
    }
    let mut steps = Vec::new();
    let mut texts = Vec::new();
    for (i, raw) in lines.enumerate() {
        let b: Block = serde_json::from_str(raw).map_err(|err| malformed(i + 2, err.to_string()))?;
        if b.record != "step" {
            return Err(malformed(i + 2, "expected a step record"));
        }
        steps.push(b.step);
        texts.push(b.text);
    }
    let e = TemporalExplanation {
        trajectory: h.trajectory,
        goal: h.goal,
        goal_action: h.goal_action,
        goal_location: h.goal_location,
        steps,
        sizes: h.sizes,
        params: h.params,
    };
    if e.selected() != h.selected {
        return Err(malformed(1, "selected steps do not match the blocks"));
    }
    for (i, (t, p)) in texts.iter().zip(e.prose()).enumerate() {
        if *t != p {
            return Err(ReportError::ProseMismatch { line: i + 2 });
        }
    }
    Ok(e)
}

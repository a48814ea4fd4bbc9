//! Template action space.
//!
//! An action template is a verb group followed by up to two blanks, with an
//! optional preposition group between them, e.g. `take/carry __` or
//! `throw/discard/put __ against/on/down __`. Actions are built by filling
//! the blanks with vocabulary words and are recognized again by
//! [`Grammar::parse_action`].

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Placeholder token used in template patterns.
pub const BLANK: &str = "__";

/// Words dropped before parsing.
const ARTICLES: [&str; 3] = ["the", "a", "an"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("template `{template}` expects {expected} filler(s), got {got}")]
    Arity {
        template: String,
        expected: usize,
        got: usize,
    },
    #[error("`{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("invalid template `{id}`: {reason}")]
    InvalidTemplate { id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Literal(Vec<String>),
    Blank,
}

/// A verb phrase with up to two blanks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionTemplate {
    pub id: String,
    pub verb_aliases: Vec<String>,
    /// Preposition aliases; empty when the template has no preposition.
    pub preposition: Vec<String>,
    pub blanks: usize,
    /// Canonical pattern with `__` placeholders, e.g. `unlock __ with __`.
    pub surface_pattern: String,
    parts: Vec<Part>,
}

impl ActionTemplate {
    /// Parses a pattern such as `throw/discard/put __ against/on/down __`.
    pub fn parse(id: &str, pattern: &str) -> Result<Self, GrammarError> {
        let invalid = |reason: &str| GrammarError::InvalidTemplate {
            id: id.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = Vec::new();
        for group in pattern.split_whitespace() {
            if group == BLANK {
                parts.push(Part::Blank);
            } else {
                let aliases: Vec<String> = group
                    .split('/')
                    .map(|a| a.trim().to_lowercase())
                    .filter(|a| !a.is_empty())
                    .collect();
                if aliases.is_empty() || aliases.iter().any(|a| a.contains(BLANK)) {
                    return Err(invalid("malformed alias group"));
                }
                parts.push(Part::Literal(aliases));
            }
        }
        let verb_aliases = match parts.first() {
            Some(Part::Literal(aliases)) => aliases.clone(),
            _ => return Err(invalid("pattern must start with a verb group")),
        };
        let blanks = parts.iter().filter(|p| matches!(p, Part::Blank)).count();
        if blanks > 2 {
            return Err(invalid("templates contain at most two blanks"));
        }
        let literal_groups: Vec<&Vec<String>> = parts
            .iter()
            .filter_map(|p| match p {
                Part::Literal(a) => Some(a),
                Part::Blank => None,
            })
            .collect();
        if literal_groups.len() > 2 {
            return Err(invalid("at most one preposition group is allowed"));
        }
        if parts.windows(2).any(|w| w[0] == Part::Blank && w[1] == Part::Blank) {
            return Err(invalid("adjacent blanks are ambiguous"));
        }
        let preposition = literal_groups.get(1).map(|g| (*g).clone()).unwrap_or_default();
        let surface_pattern = parts
            .iter()
            .map(|p| match p {
                Part::Literal(a) => a[0].as_str(),
                Part::Blank => BLANK,
            })
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Self {
            id: id.to_string(),
            verb_aliases,
            preposition,
            blanks,
            surface_pattern,
            parts,
        })
    }

    fn literal_tokens(&self) -> usize {
        self.parts.len() - self.blanks
    }

    /// Renders the canonical text for a filler tuple without checking it.
    fn render(&self, fillers: &[String]) -> String {
        let mut fill = fillers.iter();
        self.parts
            .iter()
            .map(|p| match p {
                Part::Literal(a) => a[0].clone(),
                Part::Blank => fill.next().cloned().unwrap_or_default(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Matches normalized tokens against this template, returning fillers.
    fn matches(&self, tokens: &[&str], vocabulary: &BTreeSet<String>) -> Option<Vec<String>> {
        if tokens.len() != self.parts.len() {
            return None;
        }
        let mut fillers = Vec::with_capacity(self.blanks);
        for (part, tok) in self.parts.iter().zip(tokens) {
            match part {
                Part::Literal(aliases) => {
                    if !aliases.iter().any(|a| a == tok) {
                        return None;
                    }
                }
                Part::Blank => {
                    if !vocabulary.contains(*tok) {
                        return None;
                    }
                    fillers.push((*tok).to_string());
                }
            }
        }
        Some(fillers)
    }
}

/// A template with its blanks filled.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionInstance {
    pub template: String,
    pub fillers: Vec<String>,
    pub canonical_text: String,
}

impl fmt::Display for ActionInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text)
    }
}

/// Lower-cases and collapses whitespace.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Upper bound `T * V^max_blanks` on the number of template actions.
pub fn action_space_size(template_count: u64, vocab_size: u64, max_blanks: u32) -> u128 {
    u128::from(template_count) * u128::from(vocab_size).pow(max_blanks)
}

/// Templates plus the filler vocabulary of one game.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Grammar {
    pub templates: Vec<ActionTemplate>,
    pub vocabulary: BTreeSet<String>,
}

impl Grammar {
    pub fn new(templates: Vec<ActionTemplate>, vocabulary: BTreeSet<String>) -> Self {
        Self {
            templates,
            vocabulary,
        }
    }

    pub fn template(&self, id: &str) -> Option<&ActionTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn max_blanks(&self) -> usize {
        self.templates.iter().map(|t| t.blanks).max().unwrap_or(0)
    }

    pub fn fill_template(
        &self,
        template: &ActionTemplate,
        fillers: &[String],
    ) -> Result<ActionInstance, GrammarError> {
        fill_template(template, fillers, &self.vocabulary)
    }

    /// Recognizes `text` as an instance of one of the templates.
    ///
    /// When several templates match, the one with more literal tokens wins,
    /// then the lexicographically smallest id.
    pub fn parse_action(&self, text: &str) -> Option<ActionInstance> {
        parse_action(text, &self.templates, &self.vocabulary)
    }

    /// Every template instance over the vocabulary, in template order.
    pub fn enumerate(&self) -> impl Iterator<Item = ActionInstance> + '_ {
        let words: Vec<String> = self.vocabulary.iter().cloned().collect();
        self.templates.iter().flat_map(move |t| {
            let words = words.clone();
            fills(t.blanks, &words)
                .into_iter()
                .map(move |f| ActionInstance {
                    template: t.id.clone(),
                    canonical_text: t.render(&f),
                    fillers: f,
                })
        })
    }
}

fn fills(blanks: usize, words: &[String]) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for _ in 0..blanks {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                words.iter().map(move |w| {
                    let mut next = prefix.clone();
                    next.push(w.clone());
                    next
                })
            })
            .collect();
    }
    out
}

pub fn fill_template(
    template: &ActionTemplate,
    fillers: &[String],
    vocabulary: &BTreeSet<String>,
) -> Result<ActionInstance, GrammarError> {
    if fillers.len() != template.blanks {
        return Err(GrammarError::Arity {
            template: template.id.clone(),
            expected: template.blanks,
            got: fillers.len(),
        });
    }
    let fillers: Vec<String> = fillers.iter().map(|w| w.trim().to_lowercase()).collect();
    if let Some(bad) = fillers.iter().find(|w| !vocabulary.contains(*w)) {
        return Err(GrammarError::UnknownWord(bad.clone()));
    }
    Ok(ActionInstance {
        template: template.id.clone(),
        canonical_text: template.render(&fillers),
        fillers,
    })
}

pub fn parse_action(
    text: &str,
    templates: &[ActionTemplate],
    vocabulary: &BTreeSet<String>,
) -> Option<ActionInstance> {
    let normalized = canonicalize(text);
    let tokens: Vec<&str> = normalized
        .split(' ')
        .filter(|t| !t.is_empty() && !ARTICLES.contains(t))
        .collect();
    if tokens.is_empty() {
        return None;
    }
    templates
        .iter()
        .filter_map(|t| t.matches(&tokens, vocabulary).map(|f| (t, f)))
        .min_by(|(a, _), (b, _)| {
            b.literal_tokens()
                .cmp(&a.literal_tokens())
                .then_with(|| a.id.cmp(&b.id))
        })
        .map(|(t, fillers)| ActionInstance {
            template: t.id.clone(),
            canonical_text: t.render(&fillers),
            fillers,
        })
}

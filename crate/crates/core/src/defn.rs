//! Line-oriented sectioned text format shared by game definitions and run
//! configuration files.
//!
//! ```text
//! # comment
//! [room field]
//! desc = You are in an open field.
//! exits = east:house, north:garden
//! ```
//!
//! A header is `[kind]` or `[kind name]`. Entries are `key = value`; keys
//! may repeat. Blank lines and lines starting with `#` are ignored.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            column,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kind: String,
    pub name: Option<String>,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    /// Last value for `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }
}

pub fn parse_sections(text: &str) -> Result<Vec<Section>, ParseError> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let indent = raw.len() - raw.trim_start().len();
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let inner = rest.strip_suffix(']').ok_or_else(|| {
                ParseError::new(line_no, indent + line.len() + 1, "expected `]` to close section header")
            })?;
            let mut words = inner.split_whitespace();
            let kind = words
                .next()
                .ok_or_else(|| ParseError::new(line_no, indent + 2, "empty section header"))?
                .to_lowercase();
            let name = words.next().map(str::to_string);
            if words.next().is_some() {
                return Err(ParseError::new(line_no, indent + 1, "section header takes at most one name"));
            }
            sections.push(Section {
                kind,
                name,
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let eq = line
            .find('=')
            .ok_or_else(|| ParseError::new(line_no, indent + 1, "expected `key = value`"))?;
        let key = line[..eq].trim();
        if key.is_empty() {
            return Err(ParseError::new(line_no, indent + 1, "missing key before `=`"));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| ParseError::new(line_no, indent + 1, "entry outside of any section"))?;
        section.entries.push(Entry {
            key: key.to_lowercase(),
            value: line[eq + 1..].trim().to_string(),
            line: line_no,
        });
    }
    if sections.is_empty() {
        return Err(ParseError::new(1, 1, "no sections found"));
    }
    Ok(sections)
}

/// Splits a comma-separated list, dropping empty items.
pub fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_bool(value: &str) -> Option<bool> {
    match value.trim().to_lowercase().as_str() {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

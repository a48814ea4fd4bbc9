//! Game definitions: types, loading and validation.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use thiserror::Error;

use crate::defn::{parse_bool, parse_sections, split_list, Entry, ParseError, Section};
use crate::grammar::{ActionTemplate, Grammar};

use super::{EnvState, DIRECTIONS};

/// Upper bound on states visited while computing the reachable score.
const MAX_SEARCH_STATES: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("validation error: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> LoadError {
    LoadError::Validation(msg.into())
}

fn at(entry: &Entry, msg: impl Into<String>) -> LoadError {
    LoadError::Parse(ParseError::new(entry.line, 1, msg))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoomDef {
    pub id: String,
    /// Static description; `{word}` marks an interactable noun.
    pub description: String,
    pub exits: BTreeMap<String, String>,
    pub dark: bool,
}

impl RoomDef {
    pub fn title(&self) -> String {
        let mut chars = self.id.chars();
        match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    }

    /// Description with the markup braces removed.
    pub fn plain_description(&self) -> String {
        self.description.replace(['{', '}'], "")
    }

    /// Words enclosed in `{}` markup.
    pub fn marked_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = self.description.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) => {
                    out.push(after[..close].trim().to_lowercase());
                    rest = &after[close + 1..];
                }
                None => break,
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Room(String),
    Player,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectDef {
    /// Canonical noun; also the head noun of `name`.
    pub id: String,
    pub name: String,
    pub location: Location,
    pub attributes: BTreeSet<String>,
    pub portable: bool,
    pub openable: bool,
    pub locked: bool,
    /// Objects that unlock this one.
    pub keys: Vec<String>,
    /// Room reached by climbing this object.
    pub climb: Option<String>,
    /// Opening requires holding the object.
    pub needs_held: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Event {
    Enter(String),
    Take(String),
    Drop(String),
    Open(String),
    Unlock(String),
    Climb(String),
}

impl Event {
    fn parse(text: &str) -> Option<Self> {
        let (kind, arg) = text.split_once(':')?;
        let arg = arg.trim().to_lowercase();
        Some(match kind.trim() {
            "enter" => Event::Enter(arg),
            "take" => Event::Take(arg),
            "drop" => Event::Drop(arg),
            "open" => Event::Open(arg),
            "unlock" => Event::Unlock(arg),
            "climb" => Event::Climb(arg),
            _ => return None,
        })
    }

    fn argument(&self) -> &str {
        match self {
            Event::Enter(a)
            | Event::Take(a)
            | Event::Drop(a)
            | Event::Open(a)
            | Event::Unlock(a)
            | Event::Climb(a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Holding(String),
}

impl Condition {
    pub fn holds(&self, state: &EnvState) -> bool {
        match self {
            Condition::Holding(obj) => state.inventory.contains(obj),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardRule {
    pub id: String,
    pub trigger: Event,
    pub points: i64,
    pub once: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hazard {
    pub id: String,
    pub trigger: Event,
    pub unless: Option<Condition>,
    pub message: String,
    /// Score change applied on death (zero or negative).
    pub points: i64,
}

/// A validated, playable game.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameSpec {
    pub game_id: String,
    pub start_room: String,
    pub intro: String,
    pub rooms: Vec<RoomDef>,
    pub objects: Vec<ObjectDef>,
    pub grammar: Grammar,
    pub reward_rules: Vec<RewardRule>,
    pub hazards: Vec<Hazard>,
    pub goal_description: String,
    pub max_score: i64,
    pub plural_overrides: BTreeMap<String, bool>,
    pub walkthrough: Vec<String>,
}

impl GameSpec {
    pub fn room(&self, id: &str) -> Option<&RoomDef> {
        self.rooms.iter().find(|r| r.id == id)
    }

    pub fn object(&self, id: &str) -> Option<&ObjectDef> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn templates(&self) -> &[ActionTemplate] {
        &self.grammar.templates
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.grammar.vocabulary
    }

    /// Number agreement for a noun: the `[vocab]` overrides, else a
    /// trailing "s".
    pub fn is_plural(&self, word: &str) -> bool {
        self.plural_overrides
            .get(word)
            .copied()
            .unwrap_or_else(|| word.ends_with('s'))
    }
}

/// Parses and validates a game definition.
pub fn load_game(definition_text: &str) -> Result<GameSpec, LoadError> {
    let sections = parse_sections(definition_text)?;
    let mut game: Option<&Section> = None;
    let mut rooms = Vec::new();
    let mut objects = Vec::new();
    let mut reward_rules = Vec::new();
    let mut hazards = Vec::new();
    let mut templates = Vec::new();
    let mut vocabulary = BTreeSet::new();
    let mut plural_overrides = BTreeMap::new();
    let mut walkthrough = Vec::new();

    for section in &sections {
        let name = || {
            section.name.clone().ok_or_else(|| {
                LoadError::Parse(ParseError::new(
                    section.line,
                    2,
                    format!("[{}] section needs a name", section.kind),
                ))
            })
        };
        match section.kind.as_str() {
            "game" => {
                if game.is_some() {
                    return Err(LoadError::Parse(ParseError::new(section.line, 1, "duplicate [game] section")));
                }
                game = Some(section);
            }
            "room" => rooms.push(parse_room(name()?.to_lowercase(), section)?),
            "object" => objects.push(parse_object(name()?.to_lowercase(), section)?),
            "reward" => {
                let id = section
                    .name
                    .clone()
                    .unwrap_or_else(|| format!("reward{}", reward_rules.len() + 1));
                reward_rules.push(parse_reward(id, section)?);
            }
            "hazard" => {
                let id = section
                    .name
                    .clone()
                    .unwrap_or_else(|| format!("hazard{}", hazards.len() + 1));
                hazards.push(parse_hazard(id, section)?);
            }
            "templates" => {
                for e in &section.entries {
                    let t = ActionTemplate::parse(&e.key, &e.value).map_err(|err| at(e, err.to_string()))?;
                    templates.push(t);
                }
            }
            "vocab" => {
                for e in &section.entries {
                    let words = split_list(&e.value).into_iter().map(|w| w.to_lowercase());
                    match e.key.as_str() {
                        "words" => vocabulary.extend(words),
                        "plural" => plural_overrides.extend(words.map(|w| (w, true))),
                        "singular" => plural_overrides.extend(words.map(|w| (w, false))),
                        other => return Err(at(e, format!("unknown vocab key `{other}`"))),
                    }
                }
            }
            "walkthrough" => {
                walkthrough.extend(section.get_all("do").map(|e| e.value.clone()));
            }
            other => {
                return Err(LoadError::Parse(ParseError::new(
                    section.line,
                    2,
                    format!("unknown section kind `{other}`"),
                )))
            }
        }
    }

    let game = game.ok_or_else(|| invalid("missing [game] section"))?;
    let game_id = game.get("id").ok_or_else(|| invalid("[game] needs an id"))?.to_string();
    let start_room = game
        .get("start")
        .map(str::to_lowercase)
        .or_else(|| rooms.first().map(|r: &RoomDef| r.id.clone()))
        .ok_or_else(|| invalid("game has no rooms"))?;
    let declared_max = match game.entry("max_score") {
        Some(e) => Some(e.value.parse::<i64>().map_err(|_| at(e, "max_score must be an integer"))?),
        None => None,
    };

    let mut spec = GameSpec {
        game_id,
        start_room,
        intro: game.get("intro").unwrap_or("").to_string(),
        rooms,
        objects,
        grammar: Grammar::new(templates, vocabulary),
        reward_rules,
        hazards,
        goal_description: game.get("goal").unwrap_or("").to_string(),
        max_score: 0,
        plural_overrides,
        walkthrough,
    };
    validate(&spec)?;
    spec.max_score = reachable_once_points(&spec)?;
    if let Some(declared) = declared_max {
        if declared != spec.max_score {
            return Err(invalid(format!(
                "declared max_score {declared} differs from the reachable total {}",
                spec.max_score
            )));
        }
    }
    Ok(spec)
}

fn parse_room(id: String, section: &Section) -> Result<RoomDef, LoadError> {
    let mut exits = BTreeMap::new();
    if let Some(e) = section.entry("exits") {
        for item in split_list(&e.value) {
            let (dir, target) = item
                .split_once(':')
                .ok_or_else(|| at(e, format!("exit `{item}` must be `direction:room`")))?;
            exits.insert(dir.trim().to_lowercase(), target.trim().to_lowercase());
        }
    }
    Ok(RoomDef {
        id,
        description: section.get("desc").unwrap_or("").to_string(),
        exits,
        dark: flag(section, "dark")?,
    })
}

fn flag(section: &Section, key: &str) -> Result<bool, LoadError> {
    match section.entry(key) {
        Some(e) => parse_bool(&e.value).ok_or_else(|| at(e, format!("`{key}` must be true or false"))),
        None => Ok(false),
    }
}

fn parse_object(id: String, section: &Section) -> Result<ObjectDef, LoadError> {
    let location = match section.get("location").map(str::to_lowercase) {
        Some(l) if l == "player" => Location::Player,
        Some(l) => Location::Room(l),
        None => return Err(invalid(format!("object `{id}` has no location"))),
    };
    Ok(ObjectDef {
        name: section.get("name").map(str::to_string).unwrap_or_else(|| id.clone()),
        location,
        attributes: section
            .get("attributes")
            .map(split_list)
            .unwrap_or_default()
            .into_iter()
            .map(|a| a.to_lowercase())
            .collect(),
        portable: flag(section, "portable")?,
        openable: flag(section, "openable")?,
        locked: flag(section, "locked")?,
        keys: section
            .get("keys")
            .map(split_list)
            .unwrap_or_default()
            .into_iter()
            .map(|k| k.to_lowercase())
            .collect(),
        climb: section.get("climb").map(str::to_lowercase),
        needs_held: flag(section, "needs_held")?,
        id,
    })
}

fn parse_event(section: &Section, key: &str) -> Result<Event, LoadError> {
    let e = section
        .entry(key)
        .ok_or_else(|| LoadError::Parse(ParseError::new(section.line, 1, format!("missing `{key}`"))))?;
    Event::parse(&e.value).ok_or_else(|| at(e, format!("unrecognized event `{}`", e.value)))
}

fn parse_points(section: &Section) -> Result<i64, LoadError> {
    match section.entry("points") {
        Some(e) => e.value.parse().map_err(|_| at(e, "points must be an integer")),
        None => Ok(0),
    }
}

fn parse_reward(id: String, section: &Section) -> Result<RewardRule, LoadError> {
    Ok(RewardRule {
        trigger: parse_event(section, "trigger")?,
        points: parse_points(section)?,
        once: match section.entry("once") {
            Some(e) => parse_bool(&e.value).ok_or_else(|| at(e, "`once` must be true or false"))?,
            None => true,
        },
        id,
    })
}

fn parse_hazard(id: String, section: &Section) -> Result<Hazard, LoadError> {
    let unless = match section.entry("unless") {
        Some(e) => {
            let (kind, arg) = e
                .value
                .split_once(':')
                .ok_or_else(|| at(e, "condition must be `holding:<object>`"))?;
            if kind.trim() != "holding" {
                return Err(at(e, format!("unknown condition `{}`", kind.trim())));
            }
            Some(Condition::Holding(arg.trim().to_lowercase()))
        }
        None => None,
    };
    Ok(Hazard {
        trigger: parse_event(section, "trigger")?,
        unless,
        message: section.get("message").unwrap_or("You have died.").to_string(),
        points: parse_points(section)?,
        id,
    })
}

fn validate(spec: &GameSpec) -> Result<(), LoadError> {
    let room_ids: HashSet<&str> = spec.rooms.iter().map(|r| r.id.as_str()).collect();
    let object_ids: HashSet<&str> = spec.objects.iter().map(|o| o.id.as_str()).collect();
    if room_ids.len() != spec.rooms.len() {
        return Err(invalid("duplicate room id"));
    }
    if object_ids.len() != spec.objects.len() {
        return Err(invalid("duplicate object id"));
    }
    if !room_ids.contains(spec.start_room.as_str()) {
        return Err(invalid(format!("start room `{}` is not defined", spec.start_room)));
    }
    if spec.grammar.templates.is_empty() {
        return Err(invalid("no action templates"));
    }
    for room in &spec.rooms {
        for (dir, target) in &room.exits {
            if !DIRECTIONS.contains(&dir.as_str()) {
                return Err(invalid(format!("room `{}` has unknown direction `{dir}`", room.id)));
            }
            if !room_ids.contains(target.as_str()) {
                return Err(invalid(format!(
                    "exit {dir} of room `{}` names undefined room `{target}`",
                    room.id
                )));
            }
            if !spec.grammar.vocabulary.contains(dir) {
                return Err(invalid(format!("direction `{dir}` is missing from the vocabulary")));
            }
        }
        for word in room.marked_words() {
            if !spec.grammar.vocabulary.contains(&word) {
                return Err(invalid(format!(
                    "marked word `{word}` in room `{}` is missing from the vocabulary",
                    room.id
                )));
            }
        }
    }
    for obj in &spec.objects {
        if let Location::Room(r) = &obj.location {
            if !room_ids.contains(r.as_str()) {
                return Err(invalid(format!("object `{}` starts in undefined room `{r}`", obj.id)));
            }
        }
        let head = obj.name.split_whitespace().last().unwrap_or("").to_lowercase();
        if head != obj.id {
            return Err(invalid(format!(
                "object `{}` must be named by its head noun (name `{}`)",
                obj.id, obj.name
            )));
        }
        if !spec.grammar.vocabulary.contains(&obj.id) {
            return Err(invalid(format!("object `{}` is missing from the vocabulary", obj.id)));
        }
        if let Some(target) = &obj.climb {
            if !room_ids.contains(target.as_str()) {
                return Err(invalid(format!("object `{}` climbs to undefined room `{target}`", obj.id)));
            }
        }
        for k in &obj.keys {
            if !object_ids.contains(k.as_str()) {
                return Err(invalid(format!("object `{}` names undefined key `{k}`", obj.id)));
            }
        }
    }
    for (id, trigger) in spec
        .reward_rules
        .iter()
        .map(|r| (&r.id, &r.trigger))
        .chain(spec.hazards.iter().map(|h| (&h.id, &h.trigger)))
    {
        let arg = trigger.argument();
        let known = match trigger {
            Event::Enter(_) => room_ids.contains(arg),
            _ => object_ids.contains(arg),
        };
        if !known {
            return Err(invalid(format!("rule `{id}` refers to unknown `{arg}`")));
        }
    }
    for rule in &spec.reward_rules {
        if !rule.once {
            return Err(invalid(format!(
                "reward `{}` is repeatable; only once-rules keep the score bounded",
                rule.id
            )));
        }
    }
    if spec.hazards.iter().any(|h| h.points > 0) {
        return Err(invalid("hazard points must not be positive"));
    }
    Ok(())
}

/// Sum of points over once-rules that fire in some reachable state.
fn reachable_once_points(spec: &GameSpec) -> Result<i64, LoadError> {
    let (start, _) = spec.reset(0);
    let mut seen: HashSet<EnvState> = HashSet::new();
    let mut queue = VecDeque::new();
    let mut fired: BTreeSet<String> = BTreeSet::new();
    seen.insert(start.search_key());
    queue.push_back(start);
    while let Some(state) = queue.pop_front() {
        if seen.len() > MAX_SEARCH_STATES {
            return Err(invalid("state space too large to verify max_score"));
        }
        fired.extend(state.fired_rewards.iter().cloned());
        if state.done {
            continue;
        }
        for action in spec.valid_actions(&state) {
            let (next, _, _) = spec.step(&state, &action);
            if seen.insert(next.search_key()) {
                queue.push_back(next);
            }
        }
    }
    Ok(spec
        .reward_rules
        .iter()
        .filter(|r| fired.contains(&r.id))
        .map(|r| r.points)
        .sum())
}

//! Deterministic miniature interactive-fiction engine.
//!
//! A [`GameSpec`] is loaded from the sectioned definition format (see
//! `games/FORMAT.md`). The engine is a pure transition function: [`GameSpec::step`]
//! maps a state and an action string to the next state and its observation.
//! Failed or unparseable actions consume a step and leave the world unchanged.

mod spec;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::grammar::{canonicalize, ActionInstance};

pub use spec::{
    load_game, Condition, Event, GameSpec, Hazard, LoadError, Location, ObjectDef, RewardRule, RoomDef,
};

/// Direction words recognized as exits.
pub const DIRECTIONS: [&str; 6] = ["north", "south", "east", "west", "up", "down"];

/// Feedback for input that matches no template.
pub const GENERIC_FAILURE: &str = "I don't understand that.";

pub const EMPTY_HANDED: &str = "You are empty-handed.";

/// Fixed phrases the engine can emit, independent of any game.
const ENGINE_PHRASES: &[&str] = &[
    "You look around.",
    GENERIC_FAILURE,
    "You can't go that way.",
    "You already have that.",
    "That's fixed in place.",
    "Taken.",
    "You don't see that here.",
    "Dropped.",
    "You aren't carrying that.",
    "Done.",
    "You can't do that.",
    "That can't be opened.",
    "It's already open.",
    "You need to be holding it.",
    "The is now open. The is locked. The is now unlocked.",
    "It isn't locked.",
    "That doesn't work.",
    "You climb the",
    "You can't climb that.",
    "Nothing happens.",
    "The game is over.",
    "*** You have died *** *** You have won ***",
    "You are carrying: a an some",
    EMPTY_HANDED,
    "You can see here.",
    "It is pitch black.",
    "You go",
];

const BUILTIN_GAMES: [(&str, &str); 3] = [
    ("lanternquest", include_str!("../../games/lanternquest.game")),
    ("eggtree", include_str!("../../games/eggtree.game")),
    ("twokeys", include_str!("../../games/twokeys.game")),
];

pub fn builtin_ids() -> impl Iterator<Item = &'static str> {
    BUILTIN_GAMES.iter().map(|(id, _)| *id)
}

pub fn builtin_source(id: &str) -> Option<&'static str> {
    BUILTIN_GAMES.iter().find(|(g, _)| *g == id).map(|(_, src)| *src)
}

/// Loads one of the bundled games. Each is parsed and verified once per
/// process.
pub fn load_builtin(id: &str) -> Option<GameSpec> {
    static CACHE: OnceLock<Mutex<BTreeMap<String, GameSpec>>> = OnceLock::new();
    let source = builtin_source(id)?;
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(spec) = cache.lock().expect("builtin cache poisoned").get(id) {
        return Some(spec.clone());
    }
    let spec = load_game(source).expect("bundled game definitions are valid");
    cache
        .lock()
        .expect("builtin cache poisoned")
        .insert(id.to_string(), spec.clone());
    Some(spec)
}

/// Mutable world state. Objects are either held (`inventory`) or placed
/// (`object_locations`), never both.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub room: String,
    pub inventory: BTreeSet<String>,
    pub object_locations: BTreeMap<String, String>,
    pub opened: BTreeSet<String>,
    pub unlocked: BTreeSet<String>,
    pub fired_rewards: BTreeSet<String>,
    pub score: i64,
    pub step_index: u32,
    pub done: bool,
    pub death: bool,
    pub won: bool,
}

impl EnvState {
    /// The state with bookkeeping that does not affect dynamics cleared.
    pub(crate) fn search_key(&self) -> EnvState {
        EnvState {
            step_index: 0,
            ..self.clone()
        }
    }

    fn same_world(&self, other: &EnvState) -> bool {
        let a = EnvState { step_index: 0, ..self.clone() };
        a == EnvState { step_index: 0, ..other.clone() }
    }

    pub fn holds(&self, obj: &str) -> bool {
        self.inventory.contains(obj)
    }

    fn is_here(&self, obj: &str) -> bool {
        self.object_locations.get(obj).is_some_and(|r| *r == self.room)
    }

    fn accessible(&self, obj: &str) -> bool {
        self.holds(obj) || self.is_here(obj)
    }
}

/// The four-part textual observation plus reward signals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub desc: String,
    pub feedback: String,
    pub inventory_text: String,
    pub prev_action: String,
    pub reward: i64,
    pub total_score: i64,
}

struct Transition {
    state: EnvState,
    feedback: String,
    prev_action: String,
    reward: i64,
}

/// Why an episode ended. The engine itself only reports goal and death;
/// truncation is decided by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalCause {
    Goal,
    Death,
    Truncation,
}

impl GameSpec {
    /// Initial state. The engine has no stochastic content, so `seed` does
    /// not influence the result.
    pub fn reset(&self, _seed: u64) -> (EnvState, Observation) {
        let mut state = EnvState {
            room: self.start_room.clone(),
            inventory: BTreeSet::new(),
            object_locations: BTreeMap::new(),
            opened: BTreeSet::new(),
            unlocked: BTreeSet::new(),
            fired_rewards: BTreeSet::new(),
            score: 0,
            step_index: 0,
            done: false,
            death: false,
            won: false,
        };
        for obj in &self.objects {
            match &obj.location {
                Location::Player => {
                    state.inventory.insert(obj.id.clone());
                }
                Location::Room(r) => {
                    state.object_locations.insert(obj.id.clone(), r.clone());
                }
            }
        }
        let feedback = if self.intro.is_empty() {
            "You look around.".to_string()
        } else {
            self.intro.clone()
        };
        let obs = self.observe(&state, feedback, "look".to_string(), 0);
        (state, obs)
    }

    /// Applies `action` to `state`.
    pub fn step(&self, state: &EnvState, action: &str) -> (EnvState, Observation, bool) {
        let t = self.transition(state, action);
        let obs = self.observe(&t.state, t.feedback, t.prev_action, t.reward);
        let done = t.state.done;
        (t.state, obs, done)
    }

    /// The state transition without rendering the observation.
    fn transition(&self, state: &EnvState, action: &str) -> Transition {
        if state.done {
            return Transition {
                state: state.clone(),
                feedback: "The game is over.".to_string(),
                prev_action: canonicalize(action),
                reward: 0,
            };
        }
        let mut next = state.clone();
        next.step_index += 1;
        let (feedback, prev_action, events) = match self.grammar.parse_action(action) {
            None => (GENERIC_FAILURE.to_string(), canonicalize(action), Vec::new()),
            Some(inst) => {
                let (fb, events) = self.apply(&mut next, &inst);
                (fb, inst.canonical_text, events)
            }
        };

        let mut messages = vec![feedback];
        let mut reward = 0;
        for event in &events {
            if let Some(h) = self
                .hazards
                .iter()
                .find(|h| h.trigger == *event && !h.unless.as_ref().is_some_and(|c| c.holds(&next)))
            {
                messages.push(h.message.clone());
                messages.push("*** You have died ***".to_string());
                reward += h.points;
                next.death = true;
                next.done = true;
                break;
            }
        }
        if !next.death {
            for event in &events {
                for rule in self.reward_rules.iter().filter(|r| r.trigger == *event) {
                    if rule.once && next.fired_rewards.contains(&rule.id) {
                        continue;
                    }
                    next.fired_rewards.insert(rule.id.clone());
                    reward += rule.points;
                }
            }
        }
        next.score += reward;
        if !next.done && self.max_score > 0 && next.score >= self.max_score {
            next.won = true;
            next.done = true;
            messages.push("*** You have won ***".to_string());
        }
        Transition {
            state: next,
            feedback: messages.join(" "),
            prev_action,
            reward,
        }
    }

    /// Applies a parsed action, returning feedback and the events it caused.
    fn apply(&self, s: &mut EnvState, inst: &ActionInstance) -> (String, Vec<Event>) {
        let arg = |i: usize| inst.fillers.get(i).map(String::as_str).unwrap_or("");
        let obj = |i: usize| self.object(arg(i));
        match inst.template.as_str() {
            "look" => ("You look around.".into(), vec![]),
            "inventory" => (self.inventory_text(s), vec![]),
            "go" => {
                let dir = arg(0);
                match self.room(&s.room).and_then(|r| r.exits.get(dir)) {
                    Some(target) => {
                        s.room = target.clone();
                        (format!("You go {dir}."), vec![Event::Enter(target.clone())])
                    }
                    None => ("You can't go that way.".into(), vec![]),
                }
            }
            "take" => match obj(0) {
                Some(o) if s.holds(&o.id) => ("You already have that.".into(), vec![]),
                Some(o) if s.is_here(&o.id) => {
                    if !o.portable {
                        return ("That's fixed in place.".into(), vec![]);
                    }
                    s.object_locations.remove(&o.id);
                    s.inventory.insert(o.id.clone());
                    ("Taken.".into(), vec![Event::Take(o.id.clone())])
                }
                _ => ("You don't see that here.".into(), vec![]),
            },
            "drop" => match obj(0) {
                Some(o) if s.holds(&o.id) => {
                    s.inventory.remove(&o.id);
                    s.object_locations.insert(o.id.clone(), s.room.clone());
                    ("Dropped.".into(), vec![Event::Drop(o.id.clone())])
                }
                _ => ("You aren't carrying that.".into(), vec![]),
            },
            "put" | "throw" => match (obj(0), obj(1)) {
                (Some(o), Some(target)) if s.holds(&o.id) && s.accessible(&target.id) && o.id != target.id => {
                    s.inventory.remove(&o.id);
                    s.object_locations.insert(o.id.clone(), s.room.clone());
                    ("Done.".into(), vec![Event::Drop(o.id.clone())])
                }
                _ => ("You can't do that.".into(), vec![]),
            },
            "open" => match obj(0) {
                Some(o) if s.accessible(&o.id) => {
                    if !o.openable {
                        return ("That can't be opened.".into(), vec![]);
                    }
                    if s.opened.contains(&o.id) {
                        return ("It's already open.".into(), vec![]);
                    }
                    if o.needs_held && !s.holds(&o.id) {
                        return ("You need to be holding it.".into(), vec![]);
                    }
                    let mut events = Vec::new();
                    if o.locked && !s.unlocked.contains(&o.id) {
                        match o.keys.iter().find(|k| s.holds(k)) {
                            Some(_) => {
                                s.unlocked.insert(o.id.clone());
                                events.push(Event::Unlock(o.id.clone()));
                            }
                            None => return (format!("The {} is locked.", o.id), vec![]),
                        }
                    }
                    s.opened.insert(o.id.clone());
                    events.push(Event::Open(o.id.clone()));
                    (format!("The {} is now open.", o.id), events)
                }
                _ => ("You don't see that here.".into(), vec![]),
            },
            "unlock" => match (obj(0), obj(1)) {
                (Some(o), Some(tool)) if s.accessible(&o.id) => {
                    if !o.locked || s.unlocked.contains(&o.id) {
                        return ("It isn't locked.".into(), vec![]);
                    }
                    if !s.holds(&tool.id) || !o.keys.contains(&tool.id) {
                        return ("That doesn't work.".into(), vec![]);
                    }
                    s.unlocked.insert(o.id.clone());
                    (format!("The {} is now unlocked.", o.id), vec![Event::Unlock(o.id.clone())])
                }
                _ => ("You don't see that here.".into(), vec![]),
            },
            "climb" => match obj(0) {
                Some(o) if s.accessible(&o.id) => match &o.climb {
                    Some(target) => {
                        s.room = target.clone();
                        (
                            format!("You climb the {}.", o.id),
                            vec![Event::Climb(o.id.clone()), Event::Enter(target.clone())],
                        )
                    }
                    None => ("You can't climb that.".into(), vec![]),
                },
                _ => ("You don't see that here.".into(), vec![]),
            },
            _ => ("Nothing happens.".into(), vec![]),
        }
    }

    /// All actions that change the world or fire a reward, plus movement
    /// along existing exits. Empty once the episode is over.
    pub fn valid_actions(&self, state: &EnvState) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if state.done {
            return out;
        }
        // Only accessible objects and direction words can change the world,
        // so the candidate fillers are restricted to those.
        let mut words: Vec<String> = self
            .objects
            .iter()
            .filter(|o| state.accessible(&o.id))
            .map(|o| o.id.clone())
            .collect();
        words.extend(
            DIRECTIONS
                .iter()
                .filter(|d| self.grammar.vocabulary.contains(**d))
                .map(|d| d.to_string()),
        );
        for template in &self.grammar.templates {
            let mut fills: Vec<Vec<String>> = vec![Vec::new()];
            for _ in 0..template.blanks {
                fills = fills
                    .into_iter()
                    .flat_map(|p| {
                        words.iter().map(move |w| {
                            let mut n = p.clone();
                            n.push(w.clone());
                            n
                        })
                    })
                    .collect();
            }
            for f in fills {
                let Ok(inst) = self.grammar.fill_template(template, &f) else {
                    continue;
                };
                if self.changes_world(state, &inst.canonical_text) {
                    out.insert(inst.canonical_text);
                }
            }
        }
        out
    }

    /// Whether applying `action` changes the state or fires a reward.
    pub fn changes_world(&self, state: &EnvState, action: &str) -> bool {
        let t = self.transition(state, action);
        t.reward != 0 || !t.state.same_world(state)
    }

    pub fn inventory_text(&self, state: &EnvState) -> String {
        let held: Vec<String> = self
            .objects
            .iter()
            .filter(|o| state.holds(&o.id))
            .map(|o| format!("{} {}", self.article(o), o.name))
            .collect();
        if held.is_empty() {
            EMPTY_HANDED.to_string()
        } else {
            format!("You are carrying: {}.", held.join(", "))
        }
    }

    fn has_light(&self, state: &EnvState) -> bool {
        self.objects
            .iter()
            .any(|o| o.attributes.contains("light") && state.holds(&o.id))
    }

    /// Title line, static text and the visible objects of the current room.
    pub fn room_description(&self, state: &EnvState) -> String {
        let Some(room) = self.room(&state.room) else {
            return String::new();
        };
        if room.dark && !self.has_light(state) {
            return format!("{}\nIt is pitch black.", room.title());
        }
        let marked = room.marked_words();
        let mut lines = vec![room.title(), room.plain_description()];
        for o in &self.objects {
            if state.is_here(&o.id) && !marked.contains(&o.id) {
                lines.push(format!("You can see {} {} here.", self.article(o), o.name));
            }
        }
        lines.retain(|l| !l.is_empty());
        lines.join("\n")
    }

    fn observe(&self, state: &EnvState, feedback: String, prev_action: String, reward: i64) -> Observation {
        Observation {
            desc: self.room_description(state),
            feedback,
            inventory_text: self.inventory_text(state),
            prev_action,
            reward,
            total_score: state.score,
        }
    }

    fn article(&self, obj: &ObjectDef) -> &'static str {
        if self.is_plural(&obj.id) {
            return "some";
        }
        match obj.name.chars().next() {
            Some(c) if "aeiouAEIOU".contains(c) => "an",
            _ => "a",
        }
    }

    /// Every fixed string the engine can show for this game: engine
    /// phrases, room titles and descriptions, object names, messages and
    /// action words.
    pub fn text_corpus(&self) -> Vec<String> {
        let mut out: Vec<String> = ENGINE_PHRASES.iter().map(|s| s.to_string()).collect();
        out.extend([self.intro.clone(), self.goal_description.clone()]);
        for r in &self.rooms {
            out.push(r.title());
            out.push(r.plain_description());
        }
        out.extend(self.objects.iter().map(|o| o.name.clone()));
        out.extend(self.objects.iter().flat_map(|o| o.attributes.iter().cloned()));
        out.extend(self.hazards.iter().map(|h| h.message.clone()));
        for t in &self.grammar.templates {
            out.extend(t.verb_aliases.iter().cloned());
            out.extend(t.preposition.iter().cloned());
        }
        out.extend(self.grammar.vocabulary.iter().cloned());
        out
    }

    pub fn terminal_cause(&self, state: &EnvState) -> Option<TerminalCause> {
        match (state.done, state.death) {
            (true, true) => Some(TerminalCause::Death),
            (true, false) => Some(TerminalCause::Goal),
            _ => None,
        }
    }
}

//! Knowledge-graph belief state: triples, extraction from observations,
//! incremental updates, the four sub-graph views and triple rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::engine::{GameSpec, Observation, DIRECTIONS, EMPTY_HANDED};

pub const PLAYER: &str = "player";
pub const INTERACTABLE: &str = "interactable";

/// Sub-graph of a triple; the declaration order is the canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Atr,
    Inv,
    Obj,
    Loc,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Atr, Category::Inv, Category::Obj, Category::Loc];

    /// The category implied by a relation, if the relation is known.
    pub fn of(subject: &str, relation: &str) -> Option<Category> {
        match relation {
            "is" => Some(Category::Atr),
            "has" if subject == PLAYER => Some(Category::Inv),
            "in" => Some(Category::Obj),
            r if DIRECTIONS.contains(&r) => Some(Category::Loc),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Atr => "atr",
            Category::Inv => "inv",
            Category::Obj => "obj",
            Category::Loc => "loc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atr" => Ok(Category::Atr),
            "inv" => Ok(Category::Inv),
            "obj" => Ok(Category::Obj),
            "loc" => Ok(Category::Loc),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub category: Category,
}

impl Triple {
    /// Builds a triple, deriving its category. Returns `None` for relations
    /// outside the four sub-graphs.
    pub fn new(subject: &str, relation: &str, object: &str) -> Option<Triple> {
        let category = Category::of(subject, relation)?;
        Some(Triple {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
            category,
        })
    }

    pub fn other_end(&self, entity: &str) -> &str {
        if self.subject == entity {
            &self.object
        } else {
            &self.subject
        }
    }

    pub fn touches(&self, entity: &str) -> bool {
        self.subject == entity || self.object == entity
    }

    /// Tab-separated `subject relation object category`.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.subject,
            self.relation,
            self.object,
            self.category.as_str()
        )
    }

    pub fn from_tsv(line: &str) -> Result<Triple, String> {
        let parts: Vec<&str> = line.split('\t').collect();
        let [s, r, o, c] = parts[..] else {
            return Err(format!("expected 4 tab-separated fields, got {}", parts.len()));
        };
        let category: Category = c.parse()?;
        let t = Triple::new(s, r, o).ok_or_else(|| format!("unknown relation `{r}`"))?;
        if t.category != category {
            return Err(format!("category `{c}` does not match relation `{r}`"));
        }
        Ok(t)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "⟨{}, {}, {}⟩", self.subject, self.relation, self.object)
    }
}

/// Head noun of a noun phrase, lower-cased and stripped of punctuation.
pub fn canonical_entity(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .last()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Number agreement used when rendering triples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Plurality {
    overrides: BTreeMap<String, bool>,
}

impl Plurality {
    pub fn new(overrides: BTreeMap<String, bool>) -> Self {
        Self { overrides }
    }

    pub fn for_game(spec: &GameSpec) -> Self {
        Self::new(spec.plural_overrides.clone())
    }

    pub fn is_plural(&self, word: &str) -> bool {
        self.overrides
            .get(word)
            .copied()
            .unwrap_or_else(|| word.ends_with('s'))
    }

    fn copula(&self, word: &str) -> &'static str {
        if self.is_plural(word) {
            "are"
        } else {
            "is"
        }
    }
}

/// Renders a triple with the sub-graph templates.
pub fn triple_to_text(t: &Triple, plurality: &Plurality) -> String {
    let be = plurality.copula(&t.subject);
    match t.category {
        Category::Atr => format!("{} {be} {}", t.subject, t.object),
        Category::Inv => format!("I have {}", t.object),
        Category::Obj => format!("{} {be} in {}", t.subject, t.object),
        Category::Loc => format!("{} {be} in the {} of {}", t.subject, t.relation, t.object),
    }
}

/// The cumulative belief graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    step_added: BTreeMap<Triple, u32>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_triples(triples: impl IntoIterator<Item = Triple>, step: u32) -> Self {
        let mut g = Self::new();
        for t in triples {
            g.step_added.insert(t.clone(), step);
            g.triples.insert(t);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn step_added(&self, t: &Triple) -> Option<u32> {
        self.step_added.get(t).copied()
    }

    /// Entities in sorted order.
    pub fn entities(&self) -> BTreeSet<String> {
        self.triples
            .iter()
            .flat_map(|t| [t.subject.clone(), t.object.clone()])
            .collect()
    }

    /// Entity to incident triples.
    pub fn entity_index(&self) -> BTreeMap<&str, Vec<&Triple>> {
        let mut index: BTreeMap<&str, Vec<&Triple>> = BTreeMap::new();
        for t in &self.triples {
            index.entry(t.subject.as_str()).or_default().push(t);
            if t.object != t.subject {
                index.entry(t.object.as_str()).or_default().push(t);
            }
        }
        index
    }

    pub fn incident<'a>(&'a self, entity: &'a str) -> impl Iterator<Item = &'a Triple> + 'a {
        self.triples.iter().filter(move |t| t.touches(entity))
    }

    /// Set union without retraction; a triple keeps its earliest step.
    pub fn union_with(&mut self, other: &KnowledgeGraph) {
        for t in &other.triples {
            if self.triples.insert(t.clone()) {
                let s = other.step_added.get(t).copied().unwrap_or(0);
                self.step_added.insert(t.clone(), s);
            }
        }
    }

    fn remove(&mut self, t: &Triple) {
        self.triples.remove(t);
        self.step_added.remove(t);
    }

    fn retract_where(&mut self, pred: impl Fn(&Triple) -> bool) {
        let doomed: Vec<Triple> = self.triples.iter().filter(|t| pred(t)).cloned().collect();
        for t in &doomed {
            self.remove(t);
        }
    }

    /// Restriction to one category.
    pub fn view(&self, category: Category) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for t in self.triples.iter().filter(|t| t.category == category) {
            g.triples.insert(t.clone());
            if let Some(s) = self.step_added.get(t) {
                g.step_added.insert(t.clone(), *s);
            }
        }
        g
    }
}

/// Unions `new_triples` into `prev` after applying the retraction rules.
///
/// Object locations are functional: asserting that the player has `x`
/// retracts every `x in *`, and asserting `x in r` retracts `player has x`
/// and every other `x in *`. This covers take and drop. An object becoming
/// open or unlocked retracts its `locked` attribute.
pub fn update_graph(prev: &KnowledgeGraph, new_triples: &BTreeSet<Triple>, step: u32) -> KnowledgeGraph {
    let mut g = prev.clone();
    for t in new_triples {
        if g.contains(t) {
            continue;
        }
        match t.category {
            Category::Inv => {
                let x = &t.object;
                g.retract_where(|u| u.category == Category::Obj && u.subject == *x);
            }
            Category::Obj => {
                let x = &t.subject;
                g.retract_where(|u| {
                    (u.category == Category::Inv && u.object == *x)
                        || (u.category == Category::Obj && u.subject == *x && u.object != t.object)
                });
            }
            Category::Atr if t.object == "open" || t.object == "unlocked" => {
                g.retract_where(|u| u.category == Category::Atr && u.subject == t.subject && u.object == "locked");
            }
            _ => {}
        }
        g.triples.insert(t.clone());
        g.step_added.insert(t.clone(), step);
    }
    g
}

/// The four category views.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubGraphs {
    pub atr: KnowledgeGraph,
    pub inv: KnowledgeGraph,
    pub obj: KnowledgeGraph,
    pub loc: KnowledgeGraph,
}

impl SubGraphs {
    pub const COUNT: usize = 4;

    pub fn get(&self, c: Category) -> &KnowledgeGraph {
        match c {
            Category::Atr => &self.atr,
            Category::Inv => &self.inv,
            Category::Obj => &self.obj,
            Category::Loc => &self.loc,
        }
    }

    /// Views in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (Category, &KnowledgeGraph)> {
        Category::ALL.into_iter().map(move |c| (c, self.get(c)))
    }

    pub fn total_len(&self) -> usize {
        self.iter().map(|(_, g)| g.len()).sum()
    }
}

pub fn partition(g: &KnowledgeGraph) -> SubGraphs {
    SubGraphs {
        atr: g.view(Category::Atr),
        inv: g.view(Category::Inv),
        obj: g.view(Category::Obj),
        loc: g.view(Category::Loc),
    }
}

/// Turns an observation into triples. Implementations must be deterministic.
pub trait TripleExtractor {
    /// `current_room` is the room entity the player occupied before the
    /// action that produced `obs`.
    fn extract(&self, obs: &Observation, current_room: &str) -> BTreeSet<Triple>;
}

/// Rule-based extractor keyed on a game's object and room lexicon.
#[derive(Debug, Clone)]
pub struct RuleExtractor {
    objects: BTreeSet<String>,
    rooms: BTreeSet<String>,
}

impl RuleExtractor {
    pub fn new(objects: BTreeSet<String>, rooms: BTreeSet<String>) -> Self {
        Self { objects, rooms }
    }

    pub fn for_game(spec: &GameSpec) -> Self {
        Self::new(
            spec.objects.iter().map(|o| o.id.clone()).collect(),
            spec.rooms.iter().map(|r| r.id.clone()).collect(),
        )
    }

    /// Room entity named by the first line of a description.
    pub fn room_of(&self, desc: &str) -> Option<String> {
        let title = desc.lines().next()?.trim().to_lowercase();
        (!title.is_empty()).then_some(title)
    }

    fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
    }

    /// Object entities listed in an inventory text.
    pub fn inventory_items(&self, text: &str) -> BTreeSet<String> {
        let Some((_, list)) = text.split_once(':') else {
            return BTreeSet::new();
        };
        list.split(',')
            .map(canonical_entity)
            .filter(|w| self.objects.contains(w))
            .collect()
    }
}

impl TripleExtractor for RuleExtractor {
    fn extract(&self, obs: &Observation, current_room: &str) -> BTreeSet<Triple> {
        let mut out = BTreeSet::new();
        let mut add = |s: &str, r: &str, o: &str| {
            if let Some(t) = Triple::new(s, r, o) {
                out.insert(t);
            }
        };
        let room = self.room_of(&obs.desc);
        if let Some(room) = &room {
            let body = obs.desc.split_once('\n').map(|(_, b)| b).unwrap_or("");
            for w in Self::words(body) {
                if self.objects.contains(&w) {
                    add(&w, "is", INTERACTABLE);
                    add(&w, "in", room);
                }
            }
        }
        if obs.inventory_text != EMPTY_HANDED {
            for item in self.inventory_items(&obs.inventory_text) {
                add(PLAYER, "has", &item);
            }
        }
        for sentence in obs.feedback.split_inclusive('.') {
            let words: Vec<&str> = sentence.trim().trim_end_matches('.').split_whitespace().collect();
            let (x, y) = match words[..] {
                ["The", x, "is", "now", y] | ["The", x, "is", y] => (x.to_lowercase(), y.to_lowercase()),
                _ => continue,
            };
            if self.objects.contains(&x) {
                add(&x, "is", &y);
            }
        }
        if let (Some(dir), Some(new_room)) = (obs.prev_action.strip_prefix("go "), &room) {
            let moved = obs.feedback.starts_with("You go ");
            if moved && new_room != current_room && self.rooms.contains(current_room) && self.rooms.contains(new_room) {
                add(new_room, dir, current_room);
            }
        }
        out
    }
}

/// Extraction plus graph maintenance for one episode.
#[derive(Debug, Clone)]
pub struct KgTracker {
    extractor: RuleExtractor,
    graph: KnowledgeGraph,
    room: String,
}

impl KgTracker {
    pub fn new(spec: &GameSpec) -> Self {
        Self {
            extractor: RuleExtractor::for_game(spec),
            graph: KnowledgeGraph::new(),
            room: spec.start_room.clone(),
        }
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    /// Current room entity as last observed.
    pub fn room(&self) -> &str {
        &self.room
    }

    /// Folds one observation into the graph and returns the triples it
    /// produced.
    pub fn observe(&mut self, obs: &Observation, step: u32) -> BTreeSet<Triple> {
        let triples = self.extractor.extract(obs, &self.room);
        self.graph = update_graph(&self.graph, &triples, step);
        if let Some(room) = self.extractor.room_of(&obs.desc) {
            self.room = room;
        }
        triples
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::load_builtin;

    fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::new(s, r, o).unwrap()
    }

    #[test]
    fn categories_follow_relations() {
        assert_eq!(t("egg", "is", "interactable").category, Category::Atr);
        assert_eq!(t("player", "has", "lamp").category, Category::Inv);
        assert_eq!(t("tree", "in", "forest").category, Category::Obj);
        assert_eq!(t("forest", "north", "house").category, Category::Loc);
        assert!(Triple::new("egg", "has", "lamp").is_none());
        assert!(Triple::new("egg", "near", "lamp").is_none());
    }

    #[test]
    fn renders_templates() {
        let p = Plurality::default();
        assert_eq!(triple_to_text(&t("egg", "is", "interactable"), &p), "egg is interactable");
        assert_eq!(triple_to_text(&t("trees", "is", "interactable"), &p), "trees are interactable");
        assert_eq!(triple_to_text(&t("player", "has", "eggs"), &p), "I have eggs");
        assert_eq!(triple_to_text(&t("egg", "in", "forest"), &p), "egg is in forest");
        assert_eq!(triple_to_text(&t("trees", "in", "forest"), &p), "trees are in forest");
        assert_eq!(
            triple_to_text(&t("forest", "north", "house"), &p),
            "forest is in the north of house"
        );
        let p = Plurality::new([("glass".to_string(), false)].into());
        assert_eq!(triple_to_text(&t("glass", "is", "interactable"), &p), "glass is interactable");
    }

    #[test]
    fn extracts_inventory() {
        let spec = load_builtin("lanternquest").unwrap();
        let x = RuleExtractor::for_game(&spec);
        let obs = Observation {
            desc: String::new(),
            feedback: String::new(),
            inventory_text: "You are carrying: a brass lamp".into(),
            prev_action: String::new(),
            reward: 0,
            total_score: 0,
        };
        assert_eq!(x.extract(&obs, "field"), BTreeSet::from([t("player", "has", "lamp")]));
        let empty = Observation {
            inventory_text: EMPTY_HANDED.into(),
            ..obs
        };
        assert!(x.extract(&empty, "field").is_empty());
    }

    #[test]
    fn extracts_from_eggtree_treetop() {
        let spec = load_builtin("eggtree").unwrap();
        let (s, _) = spec.reset(0);
        let (_, obs, _) = spec.step(&s, "climb tree");
        let got = RuleExtractor::for_game(&spec).extract(&obs, "forest");
        assert!(got.contains(&t("egg", "is", "interactable")));
        assert!(got.contains(&t("egg", "in", "treetop")));
        assert!(got.contains(&t("nest", "in", "treetop")));
        assert!(got.iter().all(|t| t.category != Category::Loc));
    }

    #[test]
    fn movement_adds_location_triple() {
        let spec = load_builtin("lanternquest").unwrap();
        let (s, _) = spec.reset(0);
        let (_, obs, _) = spec.step(&s, "go east");
        let got = RuleExtractor::for_game(&spec).extract(&obs, "field");
        assert!(got.contains(&t("house", "east", "field")));
        assert!(got.contains(&t("lamp", "in", "house")));
    }

    #[test]
    fn update_records_steps_and_is_idempotent() {
        let g = update_graph(&KnowledgeGraph::new(), &BTreeSet::from([t("tree", "in", "forest")]), 0);
        assert_eq!(g.len(), 1);
        assert_eq!(g.step_added(&t("tree", "in", "forest")), Some(0));
        let again = update_graph(&g, &BTreeSet::from([t("tree", "in", "forest")]), 5);
        assert_eq!(again, g);
    }

    #[test]
    fn take_and_drop_retract() {
        let g = KnowledgeGraph::from_triples([t("egg", "in", "treetop"), t("egg", "is", "interactable")], 0);
        let held = update_graph(&g, &BTreeSet::from([t("player", "has", "egg")]), 1);
        assert!(!held.contains(&t("egg", "in", "treetop")));
        assert!(held.contains(&t("player", "has", "egg")));
        let dropped = update_graph(&held, &BTreeSet::from([t("egg", "in", "forest")]), 2);
        assert!(!dropped.contains(&t("player", "has", "egg")));
        assert!(dropped.contains(&t("egg", "in", "forest")));
        assert!(dropped.contains(&t("egg", "is", "interactable")));
    }

    #[test]
    fn partition_sizes() {
        let g = KnowledgeGraph::from_triples([t("egg", "is", "interactable"), t("player", "has", "lamp")], 0);
        let p = partition(&g);
        assert_eq!((p.atr.len(), p.inv.len(), p.obj.len(), p.loc.len()), (1, 1, 0, 0));
        let e = partition(&KnowledgeGraph::new());
        assert_eq!(e.total_len(), 0);
    }

    #[test]
    fn tsv_round_trip() {
        let x = t("forest", "north", "house");
        assert_eq!(x.to_tsv(), "forest\tnorth\thouse\tloc");
        assert_eq!(Triple::from_tsv(&x.to_tsv()).unwrap(), x);
        assert!(Triple::from_tsv("forest\tnorth\thouse\tatr").is_err());
        assert!(Triple::from_tsv("forest\tnorth").is_err());
    }
}

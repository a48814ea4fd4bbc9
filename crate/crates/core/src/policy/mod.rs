//! The attention policy: observation encoder, full-graph and sub-graph
//! attention encoders, the text/graph fusion attention, hierarchical graph
//! attention, the chained template/object decoders, the critic, and
//! immediate explanations read off the attention weights.

mod explain;
mod forward;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::autodiff::checkpoint::{self, CheckpointError};
use crate::autodiff::{GatParams, Gru, Linear, ParamId, ParamStore, ShapeMismatch, Tensor};
use crate::engine::{GameSpec, DIRECTIONS};
use crate::grammar::{ActionTemplate, Grammar};
use crate::kgstate::{Category, INTERACTABLE, PLAYER};

pub use explain::{immediate_explanation, rank_nodes, valid_entities, ExplainConfig, ExplanationItem, RankedNode};
pub use forward::{ActionChoice, Decode, ForwardTrace, Noise, StepInput, StepOutput, SubGraphTrace};

/// Number of observation components: description, feedback, inventory,
/// previous action.
pub const COMPONENTS: usize = 4;

pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Text encoder hidden size and decoder hidden size.
    pub d_text: usize,
    /// Word embedding size.
    pub d_emb: usize,
    /// Graph attention embedding size.
    pub d_sub: usize,
    /// Attention heads per graph encoder and in the hierarchical attention.
    pub heads: usize,
    /// Dropout on graph attention logits during training.
    pub graph_dropout: f64,
    /// Probability of hiding an allowed object word during training.
    pub mask_dropout: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_text: 100,
            d_emb: 50,
            d_sub: 25,
            heads: 4,
            graph_dropout: 0.2,
            mask_dropout: 0.1,
        }
    }
}

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word index for observation text and graph entities. Index 0 is the
/// unknown word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TextVocab {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self {
            words: vec![UNK.to_string()],
            index: BTreeMap::from([(UNK.to_string(), 0)]),
        };
        for w in words {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn for_game(spec: &GameSpec) -> Self {
        let mut words = BTreeSet::new();
        for text in spec.text_corpus() {
            words.extend(tokenize(&text));
        }
        words.extend(spec.rooms.iter().map(|r| r.id.clone()));
        words.extend([PLAYER, INTERACTABLE, "open", "locked", "unlocked", "look"].map(String::from));
        words.extend(DIRECTIONS.map(String::from));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Parameter handles, grouped in named blocks (the first segment of each
/// parameter name).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub embed: ParamId,
    pub text_gru: Gru,
    pub graph_gat: GatParams,
    pub graph_proj: Linear,
    pub w_o: ParamId,
    /// `W_g`, `b_g`.
    pub w_g: Linear,
    /// `W_l`, `b_l`.
    pub w_l: Linear,
    pub q_proj: Linear,
    pub sub_gats: Vec<GatParams>,
    /// `W_g′`.
    pub w_gp: ParamId,
    /// `W_q`, `b_q`.
    pub w_q: Linear,
    /// `W_H` (`heads x d_sub`), `b_H`.
    pub w_h: Linear,
    pub template_gru: Gru,
    pub template_out: Linear,
    pub template_embed: ParamId,
    pub object_gru: Gru,
    pub object_proj: Linear,
    pub critic_hidden: Linear,
    pub critic_out: Linear,
}

impl PolicyParams {
    fn new(
        store: &mut ParamStore,
        c: &PolicyConfig,
        vocab_len: usize,
        templates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (dt, de, ds, m) = (c.d_text, c.d_emb, c.d_sub, c.heads);
        let embed = store.add("text.embed", Tensor::uniform(vocab_len, de, 0.5, rng));
        let text_gru = Gru::new(store, "text.gru", de, dt, rng);
        let graph_gat = GatParams::new(store, "graph.gat", de, ds, m, rng);
        let graph_proj = Linear::new(store, "graph.proj", ds, dt, rng);
        let k = 1.0 / (dt as f64).sqrt();
        let w_o = store.add("fuse.w_o", Tensor::uniform(dt, dt, k, rng));
        let w_g = Linear::new(store, "fuse.w_g", dt, dt, rng);
        let w_l = Linear::new(store, "fuse.w_l", dt, dt, rng);
        let q_proj = Linear::new(store, "fuse.q_proj", dt, ds, rng);
        let sub_gats = Category::ALL
            .iter()
            .map(|cat| GatParams::new(store, &format!("sub.{}", cat.as_str()), de, ds, m, rng))
            .collect();
        let ks = 1.0 / (ds as f64).sqrt();
        let w_gp = store.add("hier.w_gp", Tensor::uniform(ds, ds, ks, rng));
        let w_q = Linear::new(store, "hier.w_q", ds, ds, rng);
        let w_h = Linear::new(store, "hier.w_h", ds, m, rng);
        let template_gru = Gru::new(store, "decoder.template_gru", ds, dt, rng);
        let template_out = Linear::new(store, "decoder.template_out", dt, templates, rng);
        let template_embed = store.add("decoder.template_embed", Tensor::uniform(templates, de, 0.5, rng));
        let object_gru = Gru::new(store, "decoder.object_gru", ds + de, dt, rng);
        let object_proj = Linear::new(store, "decoder.object_proj", dt, de, rng);
        let critic_hidden = Linear::new(store, "critic.hidden", ds, dt, rng);
        let critic_out = Linear::new(store, "critic.out", dt, 1, rng);
        Self {
            embed,
            text_gru,
            graph_gat,
            graph_proj,
            w_o,
            w_g,
            w_l,
            q_proj,
            sub_gats,
            w_gp,
            w_q,
            w_h,
            template_gru,
            template_out,
            template_embed,
            object_gru,
            object_proj,
            critic_hidden,
            critic_out,
        }
    }
}

/// Recurrent state carried between steps of an episode: the previous
/// encoder state of each observation component (`d_text x 4`).
#[derive(Debug, Clone, PartialEq)]
pub struct Carry(pub Tensor);

impl Carry {
    pub fn zeros(d_text: usize) -> Self {
        Carry(Tensor::zeros(d_text, COMPONENTS))
    }

    pub fn column(&self, i: usize) -> Tensor {
        Tensor::column(self.0.col(i))
    }
}

/// The policy network with its parameters and lookup tables.
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub vocab: TextVocab,
    pub grammar: Grammar,
    /// Words that can fill template blanks, in vocabulary order.
    pub object_words: Vec<String>,
    object_tokens: Vec<usize>,
    pub store: ParamStore,
    pub params: PolicyParams,
}

impl Policy {
    pub fn new(spec: &GameSpec, config: PolicyConfig, seed: u64) -> Self {
        Self::from_tables(config, TextVocab::for_game(spec), spec.grammar.clone(), seed)
    }

    pub fn from_tables(config: PolicyConfig, vocab: TextVocab, grammar: Grammar, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let object_words: Vec<String> = grammar.vocabulary.iter().cloned().collect();
        let object_tokens = object_words.iter().map(|w| vocab.id(w)).collect();
        let mut store = ParamStore::new();
        let params = PolicyParams::new(&mut store, &config, vocab.len(), grammar.templates.len(), &mut rng);
        Self {
            config,
            vocab,
            grammar,
            object_words,
            object_tokens,
            store,
            params,
        }
    }

    pub fn template_count(&self) -> usize {
        self.grammar.templates.len()
    }

    pub fn object_index(&self, word: &str) -> Option<usize> {
        self.object_words.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }

    /// Template and filler indices of an action string.
    pub fn choice_for(&self, action: &str) -> Option<ActionChoice> {
        let inst = self.grammar.parse_action(action)?;
        let template = self.grammar.templates.iter().position(|t| t.id == inst.template)?;
        let objects = inst
            .fillers
            .iter()
            .map(|w| self.object_index(w))
            .collect::<Option<Vec<_>>>()?;
        Some(ActionChoice { template, objects })
    }

    pub fn action_text(&self, choice: &ActionChoice) -> String {
        let t = &self.grammar.templates[choice.template];
        let fillers: Vec<String> = choice.objects.iter().map(|&o| self.object_words[o].clone()).collect();
        self.grammar
            .fill_template(t, &fillers)
            .map(|i| i.canonical_text)
            .unwrap_or_else(|_| t.id.clone())
    }

    /// Serializes parameters together with everything needed to rebuild
    /// the network.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Vec<u8> {
        let templates: Vec<(String, String)> = self
            .grammar
            .templates
            .iter()
            .map(|t| (t.id.clone(), t.surface_pattern.clone()))
            .collect();
        let meta = json!({
            "kind": "policy",
            "config": self.config,
            "vocab": self.vocab.words()[1..],
            "templates": templates,
            "object_words": self.object_words,
            "extra": extra,
        });
        checkpoint::encode(&self.store, &meta)
    }

    /// Rebuilds a policy from [`Policy::to_checkpoint`] output; returns the
    /// caller's `extra` metadata alongside.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, serde_json::Value), PolicyError> {
        let (store, meta) = checkpoint::decode(bytes)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| PolicyError::Meta(format!("missing `{k}`")));
        let bad = |e: serde_json::Error| PolicyError::Meta(e.to_string());
        let config: PolicyConfig = serde_json::from_value(field("config")?).map_err(bad)?;
        let words: Vec<String> = serde_json::from_value(field("vocab")?).map_err(bad)?;
        let templates: Vec<(String, String)> = serde_json::from_value(field("templates")?).map_err(bad)?;
        let object_words: Vec<String> = serde_json::from_value(field("object_words")?).map_err(bad)?;
        let templates = templates
            .iter()
            .map(|(id, pattern)| ActionTemplate::parse(id, pattern))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| PolicyError::Meta(e.to_string()))?;
        let grammar = Grammar::new(templates, object_words.into_iter().collect());
        let mut policy = Policy::from_tables(config, TextVocab::new(words), grammar, 0);
        if policy.store.len() != store.len() {
            return Err(PolicyError::Meta("parameter count does not match the configuration".into()));
        }
        for (id, name, t) in store.iter() {
            let target = policy
                .store
                .id(name)
                .ok_or_else(|| PolicyError::Meta(format!("unexpected parameter `{name}`")))?;
            if policy.store.get(target).shape() != t.shape() || target != id {
                return Err(PolicyError::Meta(format!("parameter `{name}` has the wrong shape or position")));
            }
            *policy.store.get_mut(target) = t.clone();
        }
        Ok((policy, meta.get("extra").cloned().unwrap_or_default()))
    }

    /// Parameter block of a parameter name (`text`, `graph`, `fuse`, `sub`,
    /// `hier`, `decoder`, `critic`).
    pub fn block_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }
}

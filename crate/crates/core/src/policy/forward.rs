//! Forward pass of the policy network.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, Carry, Policy, COMPONENTS};
use crate::autodiff::{gat_forward, Axis, ShapeMismatch, Tape, Tensor, Var};
use crate::engine::{Observation, DIRECTIONS};
use crate::kgstate::{partition, Category, KnowledgeGraph, SubGraphs};

/// Node names, node features and edges.
type GraphInputs = (Vec<String>, Var, Vec<(usize, usize)>);

/// A decoded action as template and filler indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionChoice {
    pub template: usize,
    pub objects: Vec<usize>,
}

/// How the decoders pick the action.
pub enum Decode<'r> {
    Sample(&'r mut ChaCha8Rng),
    Greedy,
    /// Scores a known action. A filler hidden by the object mask is added
    /// back to the mask so its log-probability stays finite.
    Given(&'r ActionChoice),
}

/// Seeds for the training-time noise; `None` disables that noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Noise {
    pub graph: Option<u64>,
    pub mask: Option<u64>,
}

impl Noise {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn training(seed: u64) -> Self {
        Self {
            graph: Some(seed),
            mask: Some(seed ^ 0x9E37_79B9_7F4A_7C15),
        }
    }
}

pub struct StepInput<'a> {
    pub obs: &'a Observation,
    pub carry: &'a Carry,
    pub graph: &'a KnowledgeGraph,
}

/// Attention record of one sub-graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGraphTrace {
    pub category: Category,
    /// Node entities in sorted order.
    pub nodes: Vec<String>,
    /// `g′`: `n x d_sub`.
    pub embeddings: Tensor,
    /// `h_H`: `d_sub x n`.
    pub h_h: Tensor,
    /// `α_Hierarchical`: `n x m`, each column sums to one.
    pub attention: Tensor,
    /// `α′`: per-node sum over heads.
    pub saliency: Vec<f64>,
}

impl SubGraphTrace {
    fn empty(category: Category, d_sub: usize, heads: usize) -> Self {
        Self {
            category,
            nodes: Vec::new(),
            embeddings: Tensor::zeros(0, d_sub),
            h_h: Tensor::zeros(d_sub, 0),
            attention: Tensor::zeros(0, heads),
            saliency: Vec::new(),
        }
    }

    pub fn saliency_of(&self, entity: &str) -> Option<f64> {
        let i = self.nodes.binary_search_by(|n| n.as_str().cmp(entity)).ok()?;
        Some(self.saliency[i])
    }
}

/// Activations and attention weights of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `d_text x c`.
    pub o_t: Tensor,
    pub g_t: Tensor,
    /// `d_text x c`.
    pub h_lstm: Tensor,
    /// `d_text x c`, each row sums to one.
    pub alpha_lstm: Tensor,
    pub q_raw: Tensor,
    pub q_t: Tensor,
    /// One entry per category in `Category::ALL` order.
    pub subgraphs: Vec<SubGraphTrace>,
    pub v_t: Tensor,
    pub template_probs: Vec<f64>,
    /// One distribution per filled blank.
    pub object_probs: Vec<Vec<f64>>,
    pub object_mask: Vec<bool>,
    pub value: f64,
}

/// Everything produced by [`Policy::forward`].
pub struct StepOutput {
    pub trace: ForwardTrace,
    pub carry: Carry,
    pub choice: ActionChoice,
    pub action: String,
    pub template_log_prob: Var,
    /// Sum of the filler log-probabilities; `None` for templates without
    /// blanks.
    pub object_log_prob: Option<Var>,
    pub value: Var,
    v: Var,
    h_template: Var,
    template_logp: Var,
    object_table: Var,
    mask: Vec<bool>,
}

fn pick_index(probs: &[f64], decode: &mut Decode) -> usize {
    match decode {
        Decode::Sample(rng) => match WeightedIndex::new(probs) {
            Ok(d) => d.sample(&mut **rng),
            Err(_) => argmax(probs),
        },
        _ => argmax(probs),
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Policy {
    fn entity_token(&self, entity: &str) -> usize {
        match self.vocab.id(entity) {
            0 => tokenize(entity).last().map_or(0, |w| self.vocab.id(w)),
            id => id,
        }
    }

    /// Runs the shared text GRU over each observation component from its
    /// carried state. Returns `o_t` (`d_text x c`) and the next carry.
    pub fn encode_observation(&self, tape: &mut Tape, obs: &Observation, carry: &Carry) -> Result<(Var, Carry), ShapeMismatch> {
        let parts = [&obs.desc, &obs.feedback, &obs.inventory_text, &obs.prev_action];
        let table = tape.param(self.params.embed);
        let mut cols = Vec::with_capacity(COMPONENTS);
        for (i, text) in parts.iter().enumerate() {
            let h0 = tape.constant(carry.column(i));
            let ids = self.vocab.encode(text);
            let h = if ids.is_empty() {
                h0
            } else {
                let xs = tape.embed(table, &ids)?;
                self.params.text_gru.run(tape, xs, h0)?
            };
            cols.push(h);
        }
        let o = tape.concat(&cols, Axis::Cols)?;
        let next = Carry(tape.value(o).clone());
        Ok((o, next))
    }

    /// Node features (`n x d_emb`) and both-direction edges of a graph.
    fn graph_inputs(&self, tape: &mut Tape, graph: &KnowledgeGraph) -> Result<GraphInputs, ShapeMismatch> {
        let nodes: Vec<String> = graph.entities().into_iter().collect();
        let index: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut edges = Vec::with_capacity(2 * graph.len());
        for t in graph.iter() {
            let (s, o) = (index[t.subject.as_str()], index[t.object.as_str()]);
            edges.push((s, o));
            edges.push((o, s));
        }
        let ids: Vec<usize> = nodes.iter().map(|n| self.entity_token(n)).collect();
        let table = tape.param(self.params.embed);
        let x = tape.embed(table, &ids)?;
        let x = tape.transpose(x);
        Ok((nodes, x, edges))
    }

    /// Full-graph GAT, mean-pooled over nodes and projected to `d_text`.
    pub fn encode_graph(&self, tape: &mut Tape, graph: &KnowledgeGraph, dropout_seed: Option<u64>) -> Result<Var, ShapeMismatch> {
        let proj = self.params.graph_proj;
        if graph.is_empty() {
            let zero = tape.constant(Tensor::zeros(self.config.d_sub, 1));
            return proj.forward(tape, zero);
        }
        let (nodes, x, edges) = self.graph_inputs(tape, graph)?;
        let dropout = dropout_seed.map(|s| (self.config.graph_dropout, s));
        let out = gat_forward(tape, &self.params.graph_gat, x, &edges, dropout)?;
        let pooled = tape.sum(out.embeddings, Axis::Rows);
        let pooled = tape.scale(pooled, 1.0 / nodes.len() as f64);
        let pooled = tape.transpose(pooled);
        proj.forward(tape, pooled)
    }

    /// Text/graph attention. Returns `(h_LSTM, α_LSTM, q_raw)`.
    pub fn fuse_text_graph(&self, tape: &mut Tape, o: Var, g: Var) -> Result<(Var, Var, Var), ShapeMismatch> {
        let w_o = tape.param(self.params.w_o);
        let wo = tape.matmul(w_o, o)?;
        let wg = self.params.w_g.forward(tape, g)?;
        let h = tape.add_col(wo, wg)?;
        let h = tape.tanh(h);
        let scores = tape.param(self.params.w_l.w);
        let scores = tape.matmul(scores, h)?;
        let b_l = tape.param(self.params.w_l.b);
        let scores = tape.add_col(scores, b_l)?;
        let alpha = tape.softmax(scores, Axis::Cols);
        let weighted = tape.mul(alpha, o)?;
        let summed = tape.sum(weighted, Axis::Cols);
        let q_raw = tape.add(g, summed)?;
        Ok((h, alpha, q_raw))
    }

    /// `q_t`: the projection of `q_raw` into the graph embedding space.
    pub fn project_query(&self, tape: &mut Tape, q_raw: Var) -> Result<Var, ShapeMismatch> {
        self.params.q_proj.forward(tape, q_raw)
    }

    /// Sub-graph GATs followed by query-conditioned attention over each
    /// sub-graph's nodes. Returns `v_t` and one trace per sub-graph.
    pub fn hierarchical_attend(
        &self,
        tape: &mut Tape,
        q: Var,
        subgraphs: &SubGraphs,
        dropout_seed: Option<u64>,
    ) -> Result<(Var, Vec<SubGraphTrace>), ShapeMismatch> {
        let (d_sub, m) = (self.config.d_sub, self.config.heads);
        let query = self.params.w_q.forward(tape, q)?;
        let mut v = q;
        let mut traces = Vec::with_capacity(Category::ALL.len());
        for (k, (category, graph)) in subgraphs.iter().enumerate() {
            if graph.is_empty() {
                traces.push(SubGraphTrace::empty(category, d_sub, m));
                continue;
            }
            let (nodes, x, edges) = self.graph_inputs(tape, graph)?;
            let dropout = dropout_seed.map(|s| (self.config.graph_dropout, s.wrapping_add(1_000 * (k as u64 + 1))));
            let out = gat_forward(tape, &self.params.sub_gats[k], x, &edges, dropout)?;
            let gt = tape.transpose(out.embeddings);
            let w_gp = tape.param(self.params.w_gp);
            let proj = tape.matmul(w_gp, gt)?;
            let h_h = tape.add_col(proj, query)?;
            let h_h = tape.tanh(h_h);
            let w_h = tape.param(self.params.w_h.w);
            let scores = tape.matmul(w_h, h_h)?;
            let b_h = tape.param(self.params.w_h.b);
            let scores = tape.add_col(scores, b_h)?;
            let alpha = tape.softmax(scores, Axis::Cols);
            let alpha_t = tape.transpose(alpha);
            let mixed = tape.matmul(gt, alpha_t)?;
            let u = tape.sum(mixed, Axis::Cols);
            let u = tape.scale(u, 1.0 / m as f64);
            v = tape.add(v, u)?;
            let attention = tape.value(alpha_t).clone();
            let saliency = (0..attention.rows()).map(|r| attention.row(r).iter().sum()).collect();
            traces.push(SubGraphTrace {
                category,
                nodes,
                embeddings: tape.value(out.embeddings).clone(),
                h_h: tape.value(h_h).clone(),
                attention,
                saliency,
            });
        }
        Ok((v, traces))
    }

    pub fn critic_value(&self, tape: &mut Tape, v: Var) -> Result<Var, ShapeMismatch> {
        let h = self.params.critic_hidden.forward(tape, v)?;
        let h = tape.tanh(h);
        self.params.critic_out.forward(tape, h)
    }

    /// Object words allowed by the graph: its entities plus directions.
    /// With a seed, each allowed word is hidden with the mask dropout rate
    /// unless that would hide every word.
    pub fn object_mask(&self, graph: &KnowledgeGraph, seed: Option<u64>) -> Vec<bool> {
        let entities = graph.entities();
        let mask: Vec<bool> = self
            .object_words
            .iter()
            .map(|w| entities.contains(w) || DIRECTIONS.contains(&w.as_str()))
            .collect();
        let Some(seed) = seed else { return mask };
        let rate = self.config.mask_dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dropped: Vec<bool> = mask.iter().map(|&m| m && rng.gen::<f64>() >= rate).collect();
        if dropped.iter().any(|&m| m) {
            dropped
        } else {
            mask
        }
    }

    /// Filler log-probabilities for the next blank: one object GRU step
    /// from `h` with input `[v; prev]`.
    fn object_step(&self, tape: &mut Tape, v: Var, prev: Var, h: Var, table: Var, mask: &[bool]) -> Result<(Var, Var), ShapeMismatch> {
        let x = tape.concat(&[v, prev], Axis::Rows)?;
        let h = self.params.object_gru.step(tape, x, h)?;
        let p = self.params.object_proj.forward(tape, h)?;
        let logits = tape.matmul(table, p)?;
        let logp = tape.log_softmax(logits, Some(mask.to_vec()), Axis::Rows)?;
        Ok((h, logp))
    }

    fn template_embedding(&self, tape: &mut Tape, template: usize) -> Result<Var, ShapeMismatch> {
        let t = tape.param(self.params.template_embed);
        tape.embed(t, &[template])
    }

    fn object_embedding(&self, tape: &mut Tape, object: usize) -> Result<Var, ShapeMismatch> {
        let t = tape.param(self.params.embed);
        tape.embed(t, &[self.object_tokens[object]])
    }

    /// One full step: encoders, attention, decoders and critic.
    pub fn forward(&self, tape: &mut Tape, input: StepInput, noise: Noise, mut decode: Decode) -> Result<StepOutput, ShapeMismatch> {
        let (o, carry) = self.encode_observation(tape, input.obs, input.carry)?;
        let g = self.encode_graph(tape, input.graph, noise.graph)?;
        let (h_lstm, alpha_lstm, q_raw) = self.fuse_text_graph(tape, o, g)?;
        let q = self.project_query(tape, q_raw)?;
        let subgraphs = partition(input.graph);
        let sub_seed = noise.graph.map(|s| s.wrapping_add(1));
        let (v, traces) = self.hierarchical_attend(tape, q, &subgraphs, sub_seed)?;
        let value = self.critic_value(tape, v)?;

        let mut mask = self.object_mask(input.graph, noise.mask);
        if !mask.iter().any(|&m| m) {
            log::warn!("no graph entity is a filler word; decoding objects unmasked");
            mask = vec![true; mask.len()];
        }
        if let Decode::Given(choice) = &decode {
            for &o in &choice.objects {
                mask[o] = true;
            }
        }

        let h0 = tape.constant(Tensor::zeros(self.config.d_text, 1));
        let h_template = self.params.template_gru.step(tape, v, h0)?;
        let logits = self.params.template_out.forward(tape, h_template)?;
        let template_logp = tape.log_softmax(logits, None, Axis::Rows)?;
        let template_probs: Vec<f64> = tape.value(template_logp).data().iter().map(|x| x.exp()).collect();
        let template = match &decode {
            Decode::Given(c) => c.template,
            _ => pick_index(&template_probs, &mut decode),
        };
        let template_log_prob = tape.pick(template_logp, template, 0);

        let table = tape.param(self.params.embed);
        let table = tape.embed(table, &self.object_tokens)?;
        let object_table = tape.transpose(table);
        let blanks = self.grammar.templates[template].blanks;
        let mut objects = Vec::with_capacity(blanks);
        let mut object_probs = Vec::with_capacity(blanks);
        let mut object_log_prob = None;
        let mut prev = self.template_embedding(tape, template)?;
        let mut h = h_template;
        for b in 0..blanks {
            let (h_next, logp) = self.object_step(tape, v, prev, h, object_table, &mask)?;
            h = h_next;
            let probs: Vec<f64> = tape
                .value(logp)
                .data()
                .iter()
                .zip(&mask)
                .map(|(x, &m)| if m { x.exp() } else { 0.0 })
                .collect();
            let o = match &decode {
                Decode::Given(c) => c.objects[b],
                _ => pick_index(&probs, &mut decode),
            };
            let lp = tape.pick(logp, o, 0);
            object_log_prob = Some(match object_log_prob {
                None => lp,
                Some(acc) => tape.add(acc, lp)?,
            });
            objects.push(o);
            object_probs.push(probs);
            prev = self.object_embedding(tape, o)?;
        }

        let choice = ActionChoice { template, objects };
        let trace = ForwardTrace {
            o_t: tape.value(o).clone(),
            g_t: tape.value(g).clone(),
            h_lstm: tape.value(h_lstm).clone(),
            alpha_lstm: tape.value(alpha_lstm).clone(),
            q_raw: tape.value(q_raw).clone(),
            q_t: tape.value(q).clone(),
            subgraphs: traces,
            v_t: tape.value(v).clone(),
            template_probs,
            object_probs,
            object_mask: mask.clone(),
            value: tape.value(value).item(),
        };
        Ok(StepOutput {
            trace,
            carry,
            action: self.action_text(&choice),
            choice,
            template_log_prob,
            object_log_prob,
            value,
            v,
            h_template,
            template_logp,
            object_table,
            mask,
        })
    }

    /// Log-probability of each choice under the decoders of `out`, sharing
    /// decoder steps between choices with a common prefix. Choices with a
    /// masked filler have probability zero and are skipped; the returned
    /// indices say which were kept.
    pub fn choice_log_probs(&self, tape: &mut Tape, out: &StepOutput, choices: &[ActionChoice]) -> Result<(Vec<usize>, Vec<Var>), ShapeMismatch> {
        let mut first: BTreeMap<usize, (Var, Var)> = BTreeMap::new();
        let mut second: BTreeMap<(usize, usize), Var> = BTreeMap::new();
        let mut kept = Vec::new();
        let mut logps = Vec::new();
        let templates = self.template_count();
        for (i, c) in choices.iter().enumerate() {
            let arity_ok = c.template < templates && self.grammar.templates[c.template].blanks == c.objects.len();
            if !arity_ok || c.objects.len() > 2 || c.objects.iter().any(|&o| o >= out.mask.len() || !out.mask[o]) {
                continue;
            }
            let mut lp = tape.pick(out.template_logp, c.template, 0);
            if let Some(&o1) = c.objects.first() {
                let (h1, logp1) = match first.get(&c.template) {
                    Some(&hit) => hit,
                    None => {
                        let prev = self.template_embedding(tape, c.template)?;
                        let hit = self.object_step(tape, out.v, prev, out.h_template, out.object_table, &out.mask)?;
                        first.insert(c.template, hit);
                        hit
                    }
                };
                let p1 = tape.pick(logp1, o1, 0);
                lp = tape.add(lp, p1)?;
                if let Some(&o2) = c.objects.get(1) {
                    let logp2 = match second.get(&(c.template, o1)) {
                        Some(&hit) => hit,
                        None => {
                            let prev = self.object_embedding(tape, o1)?;
                            let (_, hit) = self.object_step(tape, out.v, prev, h1, out.object_table, &out.mask)?;
                            second.insert((c.template, o1), hit);
                            hit
                        }
                    };
                    let p2 = tape.pick(logp2, o2, 0);
                    lp = tape.add(lp, p2)?;
                }
            }
            kept.push(i);
            logps.push(lp);
        }
        Ok((kept, logps))
    }

    /// Cross-entropy of the template decoder against the valid templates,
    /// and the summed cross-entropy of each object decoding step (teacher
    /// forced along the decoded action) against the fillers valid for that
    /// slot. Targets are uniform over the valid set; `None` when a set is
    /// empty.
    pub fn supervised_losses(&self, tape: &mut Tape, out: &StepOutput, valid: &[ActionChoice]) -> Result<(Option<Var>, Option<Var>), ShapeMismatch> {
        let templates: BTreeSet<usize> = valid.iter().map(|c| c.template).filter(|&t| t < self.template_count()).collect();
        let template_ce = self.uniform_ce(tape, out.template_logp, &templates);

        let chosen = &out.choice;
        let mut object_ce: Option<Var> = None;
        let mut prev = self.template_embedding(tape, chosen.template)?;
        let mut h = out.h_template;
        for (slot, &o) in chosen.objects.iter().enumerate() {
            let fits = |c: &&ActionChoice| c.objects.len() > slot && c.objects[..slot] == chosen.objects[..slot];
            let mut targets: BTreeSet<usize> =
                valid.iter().filter(|c| c.template == chosen.template).filter(fits).map(|c| c.objects[slot]).collect();
            if targets.is_empty() {
                targets = valid.iter().filter(|c| c.objects.len() > slot).map(|c| c.objects[slot]).collect();
            }
            targets.retain(|&t| t < out.mask.len() && out.mask[t]);
            let (h_next, logp) = self.object_step(tape, out.v, prev, h, out.object_table, &out.mask)?;
            if let Some(ce) = self.uniform_ce(tape, logp, &targets) {
                object_ce = Some(match object_ce {
                    None => ce,
                    Some(acc) => tape.add(acc, ce)?,
                });
            }
            h = h_next;
            prev = self.object_embedding(tape, o)?;
        }
        Ok((template_ce, object_ce))
    }

    fn uniform_ce(&self, tape: &mut Tape, logp: Var, targets: &BTreeSet<usize>) -> Option<Var> {
        let mut acc: Option<Var> = None;
        for &t in targets {
            let lp = tape.pick(logp, t, 0);
            acc = Some(match acc {
                None => lp,
                Some(a) => tape.add(a, lp).expect("scalars"),
            });
        }
        acc.map(|a| tape.scale(a, -1.0 / targets.len() as f64))
    }

    /// Entropy of the policy renormalized over the valid actions; `None`
    /// when no valid action has nonzero probability.
    pub fn valid_action_entropy(&self, tape: &mut Tape, out: &StepOutput, valid: &[ActionChoice]) -> Result<Option<Var>, ShapeMismatch> {
        let unique: Vec<ActionChoice> = valid.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let (_, logps) = self.choice_log_probs(tape, out, &unique)?;
        if logps.is_empty() {
            return Ok(None);
        }
        let l = tape.concat(&logps, Axis::Rows)?;
        let p = tape.softmax(l, Axis::Rows);
        let lp = tape.log_softmax(l, None, Axis::Rows)?;
        let plp = tape.mul(p, lp)?;
        let s = tape.sum_all(plp);
        Ok(Some(tape.scale(s, -1.0)))
    }
}

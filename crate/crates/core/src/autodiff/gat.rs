//! Single-layer multi-head graph attention.

use rand::Rng;

use super::{Axis, ParamId, ParamStore, ShapeMismatch, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatHead {
    /// `d_in x d_out` projection.
    pub w: ParamId,
    /// `d_out x 1` source-side attention vector.
    pub a_src: ParamId,
    /// `d_out x 1` target-side attention vector.
    pub a_dst: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub heads: Vec<GatHead>,
    pub slope: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl GatParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1, "a GAT layer needs at least one head");
        let kw = (6.0 / (d_in + d_out) as f64).sqrt();
        let ka = (6.0 / (d_out + 1) as f64).sqrt();
        let heads = (0..heads)
            .map(|h| GatHead {
                w: store.add(format!("{name}.h{h}.w"), Tensor::uniform(d_in, d_out, kw, rng)),
                a_src: store.add(format!("{name}.h{h}.a_src"), Tensor::uniform(d_out, 1, ka, rng)),
                a_dst: store.add(format!("{name}.h{h}.a_dst"), Tensor::uniform(d_out, 1, ka, rng)),
            })
            .collect();
        Self {
            heads,
            slope: LEAKY_SLOPE,
            d_in,
            d_out,
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

#[derive(Debug, Clone)]
pub struct GatOutput {
    /// `n x d_out` node embeddings.
    pub embeddings: Var,
    /// `n x m`; column `h` is each node's mean received attention under head `h`.
    pub head_attention: Tensor,
    /// Per-head `n x n` attention, row `i` normalized over `i`'s in-neighbors.
    pub attention: Vec<Tensor>,
}

/// Attention mask with self-loops; `edges` are `(source, target)` pairs.
pub fn adjacency_mask(n: usize, edges: &[(usize, usize)]) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
    }
    for &(src, dst) in edges {
        mask[dst * n + src] = true;
    }
    mask
}

/// `tanh(mean_h A_h · X W_h)` with `A_h[i][j] = softmax_j(leaky(a_src·z_i + a_dst·z_j))`
/// over `j ∈ N(i) ∪ {i}`. `dropout` is `(rate, seed)` on the attention logits.
pub fn gat_forward(
    tape: &mut Tape,
    params: &GatParams,
    x: Var,
    edges: &[(usize, usize)],
    dropout: Option<(f64, u64)>,
) -> Result<GatOutput, ShapeMismatch> {
    let (n, d_in) = tape.shape(x);
    if d_in != params.d_in {
        return Err(ShapeMismatch {
            op: "gat_forward",
            left: (n, d_in),
            right: (params.d_in, params.d_out),
        });
    }
    if let Some(&(s, d)) = edges.iter().find(|(s, d)| *s >= n || *d >= n) {
        return Err(ShapeMismatch {
            op: "gat_forward edge",
            left: (n, n),
            right: (s, d),
        });
    }
    let mask = adjacency_mask(n, edges);
    let m = params.heads.len();
    let mut head_attention = Tensor::zeros(n, m);
    let mut attention = Vec::with_capacity(m);
    let mut mixed = Vec::with_capacity(m);
    for (h, head) in params.heads.iter().enumerate() {
        let w = tape.param(head.w);
        let z = tape.matmul(x, w)?;
        let a_src = tape.param(head.a_src);
        let a_dst = tape.param(head.a_dst);
        let s = tape.matmul(z, a_src)?;
        let d = tape.matmul(z, a_dst)?;
        let d = tape.transpose(d);
        let e = tape.outer_sum(s, d)?;
        let e = tape.leaky_relu(e, params.slope);
        let e = match dropout {
            Some((rate, seed)) => tape.dropout(e, rate, seed.wrapping_add(h as u64)),
            None => e,
        };
        let a = tape.masked_softmax(e, mask.clone(), Axis::Cols)?;
        let av = tape.value(a).clone();
        for j in 0..n {
            let received: f64 = (0..n).map(|i| av.get(i, j)).sum();
            head_attention.set(j, h, received / n as f64);
        }
        attention.push(av);
        mixed.push(tape.matmul(a, z)?);
    }
    let mut acc = mixed[0];
    for &part in &mixed[1..] {
        acc = tape.add(acc, part)?;
    }
    let mean = tape.scale(acc, 1.0 / m as f64);
    Ok(GatOutput {
        embeddings: tape.tanh(mean),
        head_attention,
        attention,
    })
}

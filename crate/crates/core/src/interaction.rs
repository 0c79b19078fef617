//! Leader/spacing key-value encoding and the cross-attention block that
//! produces the denoiser condition `c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Gru, LayerNorm, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionConfig {
    pub embed: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Hidden size of each per-stream GRU.
    pub stream_hidden: usize,
    pub stream_layers: usize,
    /// Feed the speed difference as a fourth key/value stream.
    pub include_dv: bool,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self { embed: 50, heads: 5, ffn: 100, stream_hidden: 50, stream_layers: 1, include_dv: false }
    }
}

#[derive(Clone, Debug)]
struct Stream {
    gru: Gru,
    out: Linear,
}

/// Per-stream GRU encoders followed by a learned channel pooling.
#[derive(Clone, Debug)]
pub struct KvEncoder {
    streams: Vec<Stream>,
    pool: Linear,
    widths: Vec<usize>,
}

/// Leader-side inputs for a batch, each `[B, T_his, width]`.
#[derive(Clone, Copy, Debug)]
pub struct LeaderInputs {
    pub x_lea: Var,
    pub v_lea: Var,
    pub dx: Var,
    pub dv: Option<Var>,
}

impl KvEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &InteractionConfig, dim: usize, rng: &mut impl Rng) -> Self {
        let mut widths = vec![dim, 1, dim];
        if config.include_dv {
            widths.push(1);
        }
        let streams = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Stream {
                gru: Gru::new(store, &format!("{name}.s{i}.gru"), w, config.stream_hidden, config.stream_layers, rng),
                out: Linear::new(store, &format!("{name}.s{i}.out"), config.stream_hidden, config.embed, rng),
            })
            .collect();
        let pool = Linear::new(store, &format!("{name}.pool"), widths.len() * config.embed, config.embed, rng);
        Self { streams, pool, widths }
    }

    /// Returns the shared key/value sequence `[B, T_his, embed]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &LeaderInputs) -> Result<Var> {
        let mut vars = vec![inputs.x_lea, inputs.v_lea, inputs.dx];
        if self.widths.len() == 4 {
            vars.push(inputs.dv.ok_or_else(|| Error::Shape("speed-difference stream enabled but not supplied".into()))?);
        }
        let lead = g.shape(vars[0])[..2].to_vec();
        for (v, &w) in vars.iter().zip(&self.widths) {
            let s = g.shape(*v);
            if s.len() != 3 || s[..2] != lead[..] || s[2] != w {
                return Err(Error::Shape(format!("leader stream expected [{}, {}, {w}], got {s:?}", lead[0], lead[1])));
            }
        }
        let encoded: Vec<Var> = vars
            .iter()
            .zip(&self.streams)
            .map(|(&v, s)| {
                let h = s.gru.forward(g, store, v);
                s.out.forward(g, store, h)
            })
            .collect();
        let cat = g.concat(&encoded, 2);
        Ok(self.pool.forward(g, store, cat))
    }
}

/// Multi-head cross-attention followed by a feed-forward sublayer, each with
/// a residual connection and layer normalization.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
    pub embed: usize,
}

/// Graph handles produced by [`CrossAttention::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Pooled condition `[B, embed]`.
    pub c: Var,
    /// Block output before time pooling `[B, T, embed]`.
    pub sequence: Var,
    /// `query + W_out(heads)` before the first normalization.
    pub residual_sum: Var,
    /// Attention weights `[B * heads, T_q, T_k]`.
    pub weights: Var,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, embed: usize, heads: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && embed % heads == 0, "embed {embed} not divisible by {heads} heads");
        Self {
            w_q: Linear::no_bias(store, &format!("{name}.w_q"), embed, embed, rng),
            w_k: Linear::no_bias(store, &format!("{name}.w_k"), embed, embed, rng),
            w_v: Linear::no_bias(store, &format!("{name}.w_v"), embed, embed, rng),
            w_out: Linear::no_bias(store, &format!("{name}.w_out"), embed, embed, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), embed),
            ff1: Linear::new(store, &format!("{name}.ff1"), embed, ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, embed, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), embed),
            heads,
            embed,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var, transpose: bool) -> Var {
        let (nb, t) = (g.shape(x)[0], g.shape(x)[1]);
        let dk = self.embed / self.heads;
        let x = g.reshape(x, &[nb, t, self.heads, dk]);
        if transpose {
            let x = g.permute(x, &[0, 2, 3, 1]);
            g.reshape(x, &[nb * self.heads, dk, t])
        } else {
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[nb * self.heads, t, dk])
        }
    }

    /// `query [B, Tq, E]`, `keys`/`values [B, Tk, E]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, keys: Var, values: Var) -> Result<AttentionOutput> {
        let (sq, sk, sv) = (g.shape(query).to_vec(), g.shape(keys).to_vec(), g.shape(values).to_vec());
        if sq.len() != 3 || sq[2] != self.embed || sk != sv || sk.len() != 3 || sk[0] != sq[0] || sk[2] != self.embed {
            return Err(Error::Shape(format!("cross attention got query {sq:?}, keys {sk:?}, values {sv:?}")));
        }
        let (nb, tq) = (sq[0], sq[1]);
        let dk = self.embed / self.heads;
        let q = self.w_q.forward(g, store, query);
        let k = self.w_k.forward(g, store, keys);
        let v = self.w_v.forward(g, store, values);
        let qh = self.split_heads(g, q, false);
        let kt = self.split_heads(g, k, true);
        let vh = self.split_heads(g, v, false);
        let scores = g.bmm(qh, kt);
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = g.softmax(scores);
        let heads = g.bmm(weights, vh);
        let heads = g.reshape(heads, &[nb, self.heads, tq, dk]);
        let heads = g.permute(heads, &[0, 2, 1, 3]);
        let heads = g.reshape(heads, &[nb, tq, self.embed]);
        let mha = self.w_out.forward(g, store, heads);
        let residual_sum = g.add(query, mha);
        let z1 = self.norm1.forward(g, store, residual_sum);
        let f = self.ff1.forward(g, store, z1);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f);
        let z2 = g.add(z1, f);
        let sequence = self.norm2.forward(g, store, z2);
        let c = g.mean_axis(sequence, 1);
        Ok(AttentionOutput { c, sequence, residual_sum, weights })
    }
}

/// The full interaction model: query projection, key/value encoding and
/// cross-attention.
#[derive(Clone, Debug)]
pub struct InteractionBlock {
    pub query: Linear,
    pub kv: KvEncoder,
    pub attention: CrossAttention,
}

impl InteractionBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: &InteractionConfig, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, config.embed, rng),
            kv: KvEncoder::new(store, &format!("{name}.kv"), config, dim, rng),
            attention: CrossAttention::new(store, &format!("{name}.attn"), config.embed, config.heads, config.ffn, rng),
        }
    }

    /// `z_fol_his [B, T, D]` plus leader inputs to the condition `[B, embed]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z_fol_his: Var, leader: &LeaderInputs) -> Result<AttentionOutput> {
        let q = self.query.forward(g, store, z_fol_his);
        let kv = self.kv.forward(g, store, leader)?;
        self.attention.forward(g, store, q, kv, kv)
    }
}

/// Replacement for the interaction block that maps the concatenated
/// follower encoding and leader features through one linear layer and
/// averages over time.
#[derive(Clone, Debug)]
pub struct LinearInteraction {
    pub map: Linear,
}

impl LinearInteraction {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, embed: usize, rng: &mut impl Rng) -> Self {
        Self { map: Linear::new(store, &format!("{name}.map"), in_dim, embed, rng) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z_fol_his: Var, leader: &LeaderInputs) -> Var {
        let mut parts = vec![z_fol_his, leader.x_lea, leader.v_lea, leader.dx];
        parts.extend(leader.dv);
        let cat = g.concat(&parts, 2);
        let y = self.map.forward(g, store, cat);
        g.mean_axis(y, 1)
    }
}

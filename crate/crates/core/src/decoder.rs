//! Two-part causal text decoder.
//!
//! Unimodal layers (causal self-attention + feed-forward) encode the caption
//! alone; the row at the last real token is the sentence vector used by the
//! contrastive loss. Multimodal layers add cross-attention to the image
//! grid `E_cap` and end in a vocabulary projection, optionally tied to the
//! token embedding table.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Mat;
use crate::vocab::{END, PAD, START, UNK};

/// Fixed sinusoidal table: `pos[p, 2i] = sin(p / 10000^(2i/D))`,
/// `pos[p, 2i+1] = cos(p / 10000^(2i/D))`.
pub fn sinusoidal_table(max_len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(max_len, d);
    for p in 0..max_len {
        for i in (0..d).step_by(2) {
            let freq = libm::pow(10000.0, i as f64 / d as f64);
            let angle = p as f64 / freq;
            m.set(p, i, libm::sin(angle));
            if i + 1 < d {
                m.set(p, i + 1, libm::cos(angle));
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct UnimodalLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl UnimodalLayer {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.self_attn.forward(g, x, x, true);
        let y = g.add(x, y);
        let x = self.norm1.forward(g, y);
        let y = self.ffn.forward(g, x);
        let y = g.add(x, y);
        self.norm2.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct MultimodalLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl MultimodalLayer {
    fn forward(&self, g: &mut Graph, x: Var, image: Var) -> Var {
        let y = self.self_attn.forward(g, x, x, true);
        let y = g.add(x, y);
        let x = self.norm1.forward(g, y);
        let y = self.cross_attn.forward(g, x, image, false);
        let y = g.add(x, y);
        let x = self.norm2.forward(g, y);
        let y = self.ffn.forward(g, x);
        let y = g.add(x, y);
        self.norm3.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub enum OutputHead {
    /// Logits are `X * Emb^T + bias`; the embedding table is the only weight.
    Tied { bias: ParamId },
    Untied(Linear),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub positional: Mat,
    pub unimodal: Vec<UnimodalLayer>,
    pub multimodal: Vec<MultimodalLayer>,
    pub head: OutputHead,
    vocab_size: usize,
    d_model: usize,
}

/// Graph handles for one decoded sequence.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub s_seq: Var,
    pub s_end: Var,
    pub logits: Var,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope("decoder");
        let d = cfg.d_model;
        let embedding = s.normal("embedding", cfg.vocab_size, d, 1.0 / libm::sqrt(d as f64), false);
        let unimodal = (0..cfg.uni_layers)
            .map(|i| {
                let mut l = s.scope(&alloc::format!("unimodal{i}"));
                UnimodalLayer {
                    self_attn: MultiHeadAttention::new(&mut l, "self_attn", d, cfg.heads),
                    norm1: LayerNorm::new(&mut l, "norm1", d),
                    ffn: FeedForward::new(&mut l, "ffn", d, cfg.ffn_dim),
                    norm2: LayerNorm::new(&mut l, "norm2", d),
                }
            })
            .collect();
        let multimodal = (0..cfg.multi_layers)
            .map(|i| {
                let mut l = s.scope(&alloc::format!("multimodal{i}"));
                MultimodalLayer {
                    self_attn: MultiHeadAttention::new(&mut l, "self_attn", d, cfg.heads),
                    norm1: LayerNorm::new(&mut l, "norm1", d),
                    cross_attn: MultiHeadAttention::new(&mut l, "cross_attn", d, cfg.heads),
                    norm2: LayerNorm::new(&mut l, "norm2", d),
                    ffn: FeedForward::new(&mut l, "ffn", d, cfg.ffn_dim),
                    norm3: LayerNorm::new(&mut l, "norm3", d),
                }
            })
            .collect();
        let head = if cfg.tie_embeddings {
            OutputHead::Tied {
                bias: s.zeros("output.bias", 1, cfg.vocab_size),
            }
        } else {
            OutputHead::Untied(Linear::new(&mut s, "output", d, cfg.vocab_size))
        };
        Self {
            embedding,
            positional: sinusoidal_table(cfg.max_len, d),
            unimodal,
            multimodal,
            head,
            vocab_size: cfg.vocab_size,
            d_model: d,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    /// `E = emb(ids) + pos[0..n]`.
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.max_len() {
            return Err(Error::Index(alloc::format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.max_len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Index(alloc::format!(
                "token id {bad} >= vocabulary size {}",
                self.vocab_size
            )));
        }
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let table = g.param(self.embedding);
        let emb = g.gather(table, &idx);
        let n = ids.len();
        let pos = Mat::from_vec(n, self.d_model, self.positional.data()[..n * self.d_model].to_vec())?;
        let pos = g.input(pos);
        Ok(g.add(emb, pos))
    }

    /// Returns `(S_seq, S_end)` with `S_end` the row at `length - 1`.
    pub fn unimodal_forward(&self, g: &mut Graph, embedded: Var, length: usize) -> Result<(Var, Var)> {
        let n = g.shape(embedded).0;
        if length == 0 || length > n {
            return Err(Error::Index(alloc::format!(
                "sequence length {length} outside 1..={n}"
            )));
        }
        let mut x = embedded;
        for layer in &self.unimodal {
            x = layer.forward(g, x);
        }
        let end = g.slice_rows(x, length - 1, 1);
        Ok((x, end))
    }

    /// Causal multimodal layers over `S_seq` with cross-attention to the
    /// flattened image grid, followed by the vocabulary projection.
    pub fn multimodal_forward(&self, g: &mut Graph, s_seq: Var, e_cap: Var) -> Result<Var> {
        if g.shape(s_seq).1 != self.d_model || g.shape(e_cap).1 != self.d_model {
            return Err(Error::shape("decoder inputs must have D channels"));
        }
        let mut x = s_seq;
        for layer in &self.multimodal {
            x = layer.forward(g, x, e_cap);
        }
        Ok(match &self.head {
            OutputHead::Tied { bias } => {
                let table = g.param(self.embedding);
                let logits = g.matmul_nt(x, table);
                let b = g.param(*bias);
                g.add_row(logits, b)
            }
            OutputHead::Untied(lin) => lin.forward(g, x),
        })
    }

    /// Full decoder pass over `ids` (which may carry trailing padding).
    pub fn forward(&self, g: &mut Graph, ids: &[u32], length: usize, e_cap: Var) -> Result<DecoderVars> {
        let e = self.embed_tokens(g, ids)?;
        let (s_seq, s_end) = self.unimodal_forward(g, e, length)?;
        let logits = self.multimodal_forward(g, s_seq, e_cap)?;
        Ok(DecoderVars {
            s_seq,
            s_end,
            logits,
        })
    }

    /// Sentence vector of an encoded caption (no image needed).
    pub fn text_embedding(&self, store: &ParamStore, ids: &[u32], length: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let e = self.embed_tokens(&mut g, &ids[..length])?;
        let (_, end) = self.unimodal_forward(&mut g, e, length)?;
        Ok(g.value(end).data().to_vec())
    }

    /// Greedy decoding from the start token. Returns the body tokens (no
    /// start, no end); stops at the end token or when `max_len` tokens,
    /// counting start and end, would be exceeded.
    pub fn generate(&self, store: &ParamStore, e_cap: &Mat, max_len: usize) -> Result<Vec<u32>> {
        let max_len = max_len.min(self.max_len());
        let mut ids = alloc::vec![START];
        while ids.len() + 1 < max_len {
            let mut g = Graph::new(store);
            let img = g.input(e_cap.clone());
            let vars = self.forward(&mut g, &ids, ids.len(), img)?;
            let logits = g.value(vars.logits);
            let last = logits.row(ids.len() - 1);
            let mut best = END;
            let mut best_val = f64::NEG_INFINITY;
            for (t, &v) in last.iter().enumerate() {
                let t = t as u32;
                if t == PAD || t == START || t == UNK {
                    continue;
                }
                if v > best_val {
                    best_val = v;
                    best = t;
                }
            }
            if best == END {
                break;
            }
            ids.push(best);
        }
        ids.remove(0);
        Ok(ids)
    }
}

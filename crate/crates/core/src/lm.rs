//! Interleaved text/image sequences and the causal decoder.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusedNode, FusedVisionTokens};
use crate::layers::{Attention, FeedForward, Linear, Norm};
use crate::numerics::{AttnMask, Graph, Group, Init, Matrix, NodeId, ParamId, ParamStore, Real};
use crate::positional::{assign_for_segments, PeTables};

pub const EOS: usize = 0;
pub const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub max_text_len: usize,
    pub ffn: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            vocab: 256,
            max_len: 4608,
            max_text_len: 64,
            ffn: 128,
        }
    }
}

impl DecoderConfig {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut need = |ok: bool, field: &str, msg: &str| {
            if !ok {
                out.push((format!("decoder.{field}"), msg.to_string()));
            }
        };
        need(self.d_model > 0, "d_model", "must be positive");
        need(self.layers > 0, "layers", "must be at least 1");
        need(
            self.heads > 0 && self.d_model % self.heads.max(1) == 0,
            "heads",
            "must be positive and divide d_model",
        );
        need(self.vocab > PAD, "vocab", "must hold the reserved ids");
        need(self.max_len > 0, "max_len", "must be positive");
        need(self.max_text_len > 0, "max_text_len", "must be positive");
        need(self.ffn > 0, "ffn", "must be positive");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRole {
    Prompt,
    Answer,
}

/// What produced a sequence position.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Prompt,
    Expert(String),
    Answer,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Prompt => f.write_str("prompt-text"),
            Source::Expert(e) => write!(f, "expert:{e}"),
            Source::Answer => f.write_str("answer-text"),
        }
    }
}

/// One piece of the interleaved input; `I` is the image payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment<I> {
    Text { tokens: Vec<usize>, role: TextRole },
    Image(I),
}

impl<I> Segment<I> {
    pub fn prompt(tokens: Vec<usize>) -> Self {
        Segment::Text {
            tokens,
            role: TextRole::Prompt,
        }
    }

    pub fn answer(tokens: Vec<usize>) -> Self {
        Segment::Text {
            tokens,
            role: TextRole::Answer,
        }
    }
}

/// Loads eager image tokens into `g` as inputs.
pub fn segments_into_graph<T: Real>(
    g: &mut Graph<T>,
    segments: &[Segment<FusedVisionTokens<T>>],
) -> Result<Vec<Segment<FusedNode>>> {
    segments
        .iter()
        .map(|s| {
            Ok(match s {
                Segment::Text { tokens, role } => Segment::Text {
                    tokens: tokens.clone(),
                    role: *role,
                },
                Segment::Image(v) => Segment::Image(FusedNode {
                    node: g.input(v.tokens.clone())?,
                    segments: v.segments.clone(),
                }),
            })
        })
        .collect()
}

/// An embedded sequence recorded in a graph.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub embedded: NodeId,
    pub sources: Vec<Source>,
    /// Token id at text positions, `None` at vision positions.
    pub tokens: Vec<Option<usize>>,
    /// Positions hidden from every attention row.
    pub blocked: Vec<bool>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Maximal runs of equal source as `(source, start, len)`.
    pub fn spans(&self) -> Vec<(Source, usize, usize)> {
        let mut out: Vec<(Source, usize, usize)> = Vec::new();
        for (i, s) in self.sources.iter().enumerate() {
            match out.last_mut() {
                Some((last, _, len)) if last == s => *len += 1,
                _ => out.push((s.clone(), i, 1)),
            }
        }
        out
    }

    pub fn mask(&self) -> AttnMask {
        if self.blocked.iter().any(|&b| b) {
            AttnMask::CausalBlocked(self.blocked.clone())
        } else {
            AttnMask::Causal
        }
    }

    /// Hides every position produced by the named experts.
    pub fn block_experts(&mut self, experts: &BTreeSet<String>) {
        for (b, s) in self.blocked.iter_mut().zip(&self.sources) {
            if let Source::Expert(e) = s {
                if experts.contains(e) {
                    *b = true;
                }
            }
        }
    }

    /// Next-token targets: position `t` is trained to emit token `t+1` when
    /// that token is answer text.
    pub fn answer_targets(&self) -> Vec<(usize, usize)> {
        (0..self.len().saturating_sub(1))
            .filter(|&t| self.sources[t + 1] == Source::Answer)
            .filter_map(|t| self.tokens[t + 1].map(|tok| (t, tok)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

/// Token embedding, `K` pre-norm decoder layers and the output head, all in
/// group `lm`.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    norm: Norm,
    head: Linear,
}

/// Logits plus the attention node of each layer.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub logits: NodeId,
    pub attention: Vec<NodeId>,
}

impl Decoder {
    pub fn new<T: Real>(config: &DecoderConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        if let Some((path, msg)) = config.violations().into_iter().next() {
            return Err(Error::Sequence(format!("{path}: {msg}")));
        }
        let d = config.d_model;
        let embed = store.init(seed, "lm.embed", Group::Lm, config.vocab, d, Init::Normal(1.0))?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("lm.l{l}");
            layers.push(DecoderLayer {
                attn_norm: Norm::new(store, seed, &format!("{p}.attn_norm"), Group::Lm, d)?,
                attn: Attention::new(store, seed, &format!("{p}.attn"), Group::Lm, d, config.heads)?,
                ff_norm: Norm::new(store, seed, &format!("{p}.ff_norm"), Group::Lm, d)?,
                ff: FeedForward::new(store, seed, &format!("{p}.ff"), Group::Lm, d, config.ffn)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            norm: Norm::new(store, seed, "lm.norm", Group::Lm, d)?,
            head: Linear::new(store, seed, "lm.head", Group::Lm, d, config.vocab, true)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    /// Embeds `segments` in order. Text positions count only preceding text
    /// tokens, so vision spans never shift the text position table.
    pub fn assemble<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pe: &PeTables,
        segments: &[Segment<FusedNode>],
    ) -> Result<ModelInput> {
        let d = self.config.d_model;
        let mut parts = Vec::new();
        let mut sources = Vec::new();
        let mut tokens = Vec::new();
        let mut text_pos = 0usize;
        let max_text = pe.max_text_len(store);
        for seg in segments {
            match seg {
                Segment::Text { tokens: ids, role } => {
                    if ids.is_empty() {
                        continue;
                    }
                    if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
                        return Err(Error::Sequence(format!(
                            "token {bad} outside vocabulary of {}",
                            self.config.vocab
                        )));
                    }
                    if text_pos + ids.len() > max_text {
                        return Err(Error::Overflow {
                            length: text_pos + ids.len(),
                            max: max_text,
                            budget: "text position table".into(),
                        });
                    }
                    let positions: Vec<usize> = (text_pos..text_pos + ids.len()).collect();
                    text_pos += ids.len();
                    let table = g.param(store, self.embed);
                    let e = g.gather_rows(table, ids)?;
                    let p = pe.text_node(g, store, &positions)?;
                    parts.push(g.add(e, p)?);
                    let source = match role {
                        TextRole::Prompt => Source::Prompt,
                        TextRole::Answer => Source::Answer,
                    };
                    sources.extend(std::iter::repeat(source).take(ids.len()));
                    tokens.extend(ids.iter().map(|&t| Some(t)));
                }
                Segment::Image(fused) => {
                    let (n, w) = g.value(fused.node).shape();
                    if w != d {
                        return Err(Error::shape(
                            "assemble_sequence",
                            format!("image tokens of width {w}, decoder width {d}"),
                        ));
                    }
                    let covered: usize = fused.segments.iter().map(|s| s.len).sum();
                    if covered != n {
                        return Err(Error::Sequence(format!(
                            "segment map covers {covered} of {n} image tokens"
                        )));
                    }
                    let assignment = assign_for_segments(pe.scheme, &fused.segments)?;
                    let p = pe.embed_node(g, store, &assignment)?;
                    parts.push(g.add(fused.node, p)?);
                    for s in &fused.segments {
                        sources.extend(std::iter::repeat(Source::Expert(s.expert.clone())).take(s.len));
                    }
                    tokens.extend(std::iter::repeat(None).take(n));
                }
            }
        }
        if parts.is_empty() {
            return Err(Error::EmptySequence);
        }
        let embedded = g.concat_rows(&parts)?;
        Ok(ModelInput {
            embedded,
            blocked: vec![false; sources.len()],
            sources,
            tokens,
        })
    }

    /// Final hidden states `L × d_model` and each layer's attention node.
    pub fn hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &ModelInput,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if input.len() > self.config.max_len {
            return Err(Error::Overflow {
                length: input.len(),
                max: self.config.max_len,
                budget: "decoder max_len".into(),
            });
        }
        let mask = input.mask();
        let mut x = input.embedded;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.attn_norm.forward(g, store, x)?;
            let (a, weights) = layer.attn.forward(g, store, h, h, mask.clone())?;
            attention.push(weights);
            x = g.add(x, a)?;
            let h = layer.ff_norm.forward(g, store, x)?;
            let f = layer.ff.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        Ok((self.norm.forward(g, store, x)?, attention))
    }

    /// Logits for the given rows of a hidden-state node.
    pub fn logits_at<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        hidden: NodeId,
        rows: &[usize],
    ) -> Result<NodeId> {
        let h = g.gather_rows(hidden, rows)?;
        self.head.forward(g, store, h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &ModelInput) -> Result<DecoderOutput> {
        let (h, attention) = self.hidden(g, store, input)?;
        let logits = self.head.forward(g, store, h)?;
        Ok(DecoderOutput { logits, attention })
    }
}

/// Eager decoder pass over eager segments: `(logits, per-layer per-head weights)`.
pub fn decoder_forward<T: Real>(
    decoder: &Decoder,
    store: &ParamStore<T>,
    pe: &PeTables,
    segments: &[Segment<FusedVisionTokens<T>>],
    masked: &BTreeSet<String>,
) -> Result<(Matrix<T>, Vec<Vec<Matrix<T>>>)> {
    let mut g = Graph::new();
    let segs = segments_into_graph(&mut g, segments)?;
    let mut input = decoder.assemble(&mut g, store, pe, &segs)?;
    input.block_experts(masked);
    let out = decoder.forward(&mut g, store, &input)?;
    let maps = out
        .attention
        .iter()
        .map(|&a| g.attention_weights(a).map(<[_]>::to_vec).unwrap_or_default())
        .collect();
    Ok((g.value(out.logits).clone(), maps))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: appends argmax tokens as answer text until EOS or
/// `max_new` tokens. `masked` experts are hidden from attention throughout.
pub fn generate_greedy<T: Real>(
    decoder: &Decoder,
    store: &ParamStore<T>,
    pe: &PeTables,
    prompt: &[Segment<FusedVisionTokens<T>>],
    masked: &BTreeSet<String>,
    max_new: usize,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(Error::Sequence("max_new must be at least 1".into()));
    }
    let mut generated = Vec::new();
    while generated.len() < max_new {
        let mut g = Graph::new();
        let mut segs = segments_into_graph(&mut g, prompt)?;
        if !generated.is_empty() {
            segs.push(Segment::answer(generated.clone()));
        }
        let mut input = decoder.assemble(&mut g, store, pe, &segs)?;
        input.block_experts(masked);
        let (h, _) = decoder.hidden(&mut g, store, &input)?;
        let logits = decoder.logits_at(&mut g, store, h, &[input.len() - 1])?;
        let next = argmax(g.value(logits).row(0));
        generated.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(generated)
}

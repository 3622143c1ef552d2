//! The split transformer.
//!
//! Each block is `x + MHA(RMSNorm(x))` followed by `x + FFN(RMSNorm(x))`,
//! where the FFN is SwiGLU: `down(silu(gate(b)) ⊙ up(b))`. The first
//! `split_point` blocks form the client submodel, the rest plus the output
//! projection form the server submodel. Learned position embeddings are
//! added at the input of block 0, on whichever side of the split it lives.

pub mod checkpoint;
pub mod tokenizer;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Precision, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tokenizer::{Tokenizer, PAD_ID, UNK_ID};
pub use train::{toy_train, TrainConfig, TrainReport};

/// RMSNorm stabilizer; small enough that unit-gain outputs have RMS 1 to ~1e-12.
pub const RMS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub split_point: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: the flattened client Jacobian is at most 16·32 = 512.
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden_dim: 32,
            num_blocks: 6,
            split_point: 1,
            num_heads: 4,
            ffn_dim: 64,
            max_seq_len: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.hidden_dim == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return fail("hidden_dim, ffn_dim and max_seq_len must be positive");
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be positive");
        }
        if self.split_point >= self.num_blocks {
            return fail("split_point must be in [0, num_blocks)");
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail("num_heads must divide hidden_dim");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Sub-layer kinds inside a block, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    #[serde(rename = "rmsnorm-1")]
    RmsNorm1,
    QueryProj,
    KeyProj,
    ValueProj,
    OutputProj,
    #[serde(rename = "rmsnorm-2")]
    RmsNorm2,
    UpProj,
    GateProj,
    Activation,
    DownProj,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::RmsNorm1,
        LayerKind::QueryProj,
        LayerKind::KeyProj,
        LayerKind::ValueProj,
        LayerKind::OutputProj,
        LayerKind::RmsNorm2,
        LayerKind::UpProj,
        LayerKind::GateProj,
        LayerKind::Activation,
        LayerKind::DownProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::RmsNorm1 => "rmsnorm-1",
            LayerKind::QueryProj => "query-proj",
            LayerKind::KeyProj => "key-proj",
            LayerKind::ValueProj => "value-proj",
            LayerKind::OutputProj => "output-proj",
            LayerKind::RmsNorm2 => "rmsnorm-2",
            LayerKind::UpProj => "up-proj",
            LayerKind::GateProj => "gate-proj",
            LayerKind::Activation => "activation",
            LayerKind::DownProj => "down-proj",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }

    /// Up, gate and down projections cannot act as identity; bypassing any
    /// of them removes the whole FFN branch.
    pub fn is_rectangular(self) -> bool {
        matches!(self, LayerKind::UpProj | LayerKind::GateProj | LayerKind::DownProj)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidLayer(format!("unknown layer kind {s:?}")))
    }
}

/// One sub-layer of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerRef {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerRef {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind)
    }
}

impl FromStr for LayerRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidLayer(format!("expected block<N>.<kind>, got {s:?}"));
        let (b, k) = s.split_once('.').ok_or_else(bad)?;
        let block = b.strip_prefix("block").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(Self {
            block,
            kind: k.parse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_norm: Tensor,
    pub w_up: Tensor,
    pub w_gate: Tensor,
    pub w_down: Tensor,
    bypass: u16,
}

impl Block {
    fn init(d: usize, f: usize, rng: &mut Rng) -> Result<Self> {
        let scale = 1.0 / (d as f64).sqrt();
        let mut mat = |r: usize, c: usize| -> Result<Tensor> {
            Ok(Tensor::matrix(r, c, rng.normals(r * c))?.scale(scale))
        };
        Ok(Self {
            attn_norm: Tensor::full(&[d], 1.0),
            w_q: mat(d, d)?,
            w_k: mat(d, d)?,
            w_v: mat(d, d)?,
            w_o: mat(d, d)?,
            ffn_norm: Tensor::full(&[d], 1.0),
            w_up: mat(d, f)?,
            w_gate: mat(d, f)?,
            w_down: mat(f, d)?,
            bypass: 0,
        })
    }

    pub fn is_bypassed(&self, kind: LayerKind) -> bool {
        self.bypass & kind.bit() != 0
    }

    pub fn bypass_mask(&self) -> u16 {
        self.bypass
    }

    pub(crate) fn set_bypass_mask(&mut self, mask: u16) {
        self.bypass = mask;
    }

    fn ffn_removed(&self) -> bool {
        [LayerKind::UpProj, LayerKind::GateProj, LayerKind::DownProj]
            .iter()
            .any(|k| self.is_bypassed(*k))
    }

    pub(crate) fn named_tensors(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ffn_norm", &self.ffn_norm),
            ("w_up", &self.w_up),
            ("w_gate", &self.w_gate),
            ("w_down", &self.w_down),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ffn_norm,
            &mut self.w_up,
            &mut self.w_gate,
            &mut self.w_down,
        ]
    }

    pub fn weight(&self, kind: LayerKind) -> &Tensor {
        match kind {
            LayerKind::RmsNorm1 => &self.attn_norm,
            LayerKind::QueryProj => &self.w_q,
            LayerKind::KeyProj => &self.w_k,
            LayerKind::ValueProj => &self.w_v,
            LayerKind::OutputProj => &self.w_o,
            LayerKind::RmsNorm2 => &self.ffn_norm,
            LayerKind::UpProj => &self.w_up,
            LayerKind::GateProj => &self.w_gate,
            // The activation has no weights; its gate input comes from w_gate.
            LayerKind::Activation => &self.w_gate,
            LayerKind::DownProj => &self.w_down,
        }
    }
}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars {
    attn_norm: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ffn_norm: Var,
    w_up: Var,
    w_gate: Var,
    w_down: Var,
}

impl BlockVars {
    fn borrowed<'a>(tape: &mut GradTape<'a>, b: &'a Block) -> Self {
        Self {
            attn_norm: tape.constant_ref(&b.attn_norm),
            w_q: tape.constant_ref(&b.w_q),
            w_k: tape.constant_ref(&b.w_k),
            w_v: tape.constant_ref(&b.w_v),
            w_o: tape.constant_ref(&b.w_o),
            ffn_norm: tape.constant_ref(&b.ffn_norm),
            w_up: tape.constant_ref(&b.w_up),
            w_gate: tape.constant_ref(&b.w_gate),
            w_down: tape.constant_ref(&b.w_down),
        }
    }

    fn trainable(tape: &mut GradTape<'_>, b: &Block) -> Self {
        Self {
            attn_norm: tape.leaf(b.attn_norm.clone()),
            w_q: tape.leaf(b.w_q.clone()),
            w_k: tape.leaf(b.w_k.clone()),
            w_v: tape.leaf(b.w_v.clone()),
            w_o: tape.leaf(b.w_o.clone()),
            ffn_norm: tape.leaf(b.ffn_norm.clone()),
            w_up: tape.leaf(b.w_up.clone()),
            w_gate: tape.leaf(b.w_gate.clone()),
            w_down: tape.leaf(b.w_down.clone()),
        }
    }

    fn all(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ffn_norm,
            self.w_up,
            self.w_gate,
            self.w_down,
        ]
    }
}

/// Inputs and outputs of every sub-layer observed during one block pass.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    pub entries: Vec<(LayerKind, Tensor, Tensor)>,
}

impl BlockTrace {
    pub fn input(&self, kind: LayerKind) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.0 == kind).map(|e| &e.1)
    }

    pub fn output(&self, kind: LayerKind) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.0 == kind).map(|e| &e.2)
    }
}

fn block_forward(
    tape: &mut GradTape<'_>,
    p: &BlockVars,
    block: &Block,
    heads: usize,
    x: Var,
    mut trace: Option<&mut BlockTrace>,
) -> Result<Var> {
    let mut note = |tape: &GradTape<'_>, kind: LayerKind, i: Var, o: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.entries.push((kind, tape.value(i).clone(), tape.value(o).clone()));
        }
    };
    let by = |k: LayerKind| block.is_bypassed(k);

    let a = if by(LayerKind::RmsNorm1) {
        x
    } else {
        tape.rms_norm(x, p.attn_norm, RMS_EPS)?
    };
    note(tape, LayerKind::RmsNorm1, x, a);
    let proj = |tape: &mut GradTape<'_>, kind: LayerKind, input: Var, w: Var| -> Result<Var> {
        let out = if by(kind) { input } else { tape.matmul(input, w)? };
        Ok(out)
    };
    let q = proj(tape, LayerKind::QueryProj, a, p.w_q)?;
    let k = proj(tape, LayerKind::KeyProj, a, p.w_k)?;
    let v = proj(tape, LayerKind::ValueProj, a, p.w_v)?;
    note(tape, LayerKind::QueryProj, a, q);
    note(tape, LayerKind::KeyProj, a, k);
    note(tape, LayerKind::ValueProj, a, v);

    let d = tape.value(x).cols();
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut head_out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, inv_sqrt)?;
        let pr = tape.causal_softmax(s)?;
        head_out.push(tape.matmul(pr, vh)?);
    }
    let o = if heads == 1 {
        head_out[0]
    } else {
        tape.concat_cols(&head_out)?
    };
    let attn = proj(tape, LayerKind::OutputProj, o, p.w_o)?;
    note(tape, LayerKind::OutputProj, o, attn);
    let x1 = tape.add(x, attn)?;

    let b = if by(LayerKind::RmsNorm2) {
        x1
    } else {
        tape.rms_norm(x1, p.ffn_norm, RMS_EPS)?
    };
    note(tape, LayerKind::RmsNorm2, x1, b);
    if block.ffn_removed() {
        return Ok(x1);
    }
    let u = tape.matmul(b, p.w_up)?;
    note(tape, LayerKind::UpProj, b, u);
    let g = tape.matmul(b, p.w_gate)?;
    note(tape, LayerKind::GateProj, b, g);
    let s = if by(LayerKind::Activation) { g } else { tape.silu(g)? };
    note(tape, LayerKind::Activation, g, s);
    let f = tape.mul(s, u)?;
    let dn = tape.matmul(f, p.w_down)?;
    note(tape, LayerKind::DownProj, f, dn);
    tape.add(x1, dn)
}

/// Client submodel, server submodel, embedding table and output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    config: ModelConfig,
    pub embedding: Tensor,
    pub positions: Tensor,
    pub blocks: Vec<Block>,
    pub unembed: Tensor,
}

impl SplitModel {
    /// Scaled-Gaussian initialization (std `1/√D`), unit RMSNorm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (v, d, f) = (config.vocab_size, config.hidden_dim, config.ffn_dim);
        let scale = 1.0 / (d as f64).sqrt();
        let embedding = Tensor::matrix(v, d, rng.normals(v * d))?.scale(scale);
        let positions =
            Tensor::matrix(config.max_seq_len, d, rng.normals(config.max_seq_len * d))?.scale(scale);
        let blocks = (0..config.num_blocks)
            .map(|_| Block::init(d, f, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let unembed = Tensor::matrix(d, v, rng.normals(d * v))?.scale(scale);
        Ok(Self {
            config,
            embedding,
            positions,
            blocks,
            unembed,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        embedding: Tensor,
        positions: Tensor,
        blocks: Vec<Block>,
        unembed: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let (v, d, f, l) = (config.vocab_size, config.hidden_dim, config.ffn_dim, config.max_seq_len);
        let check = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        check("embedding", &embedding, &[v, d])?;
        check("positions", &positions, &[l, d])?;
        check("unembed", &unembed, &[d, v])?;
        if blocks.len() != config.num_blocks {
            return Err(Error::Checkpoint(format!(
                "{} blocks, expected {}",
                blocks.len(),
                config.num_blocks
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            let shapes: [&[usize]; 9] = [&[d], &[d, d], &[d, d], &[d, d], &[d, d], &[d], &[d, f], &[d, f], &[f, d]];
            for ((name, t), shape) in b.named_tensors().iter().zip(shapes) {
                check(&format!("blocks.{i}.{name}"), t, shape)?;
            }
        }
        Ok(Self {
            config,
            embedding,
            positions,
            blocks,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn split_point(&self) -> usize {
        self.config.split_point
    }

    pub fn client_blocks(&self) -> &[Block] {
        &self.blocks[..self.config.split_point]
    }

    pub fn server_blocks(&self) -> &[Block] {
        &self.blocks[self.config.split_point..]
    }

    /// Same weights, different cut layer.
    pub fn with_split(&self, split_point: usize) -> Result<Self> {
        let mut m = self.clone();
        m.config.split_point = split_point;
        m.config.validate()?;
        Ok(m)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_hidden(&self, h: &Tensor, op: &'static str) -> Result<()> {
        let d = self.config.hidden_dim;
        if h.rank() != 2 || h.cols() != d || h.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected L×{d}, got {:?}", h.shape()),
            });
        }
        if h.rows() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: h.rows(),
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Row `j` of the result is row `ids[j]` of the embedding table.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let d = self.config.hidden_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.embedding.row(id));
        }
        Tensor::matrix(ids.len(), d, data)
    }

    fn add_positions<'a>(&'a self, tape: &mut GradTape<'a>, h: Var, pos: Var) -> Result<Var> {
        let l = tape.value(h).rows();
        let ids: Vec<usize> = (0..l).collect();
        let p = tape.row_select(pos, &ids)?;
        tape.add(h, p)
    }

    fn run_blocks<'a>(
        &'a self,
        tape: &mut GradTape<'a>,
        range: std::ops::Range<usize>,
        mut h: Var,
    ) -> Result<Var> {
        if range.start == 0 && !range.is_empty() {
            let pos = tape.constant_ref(&self.positions);
            h = self.add_positions(tape, h, pos)?;
        }
        for b in &self.blocks[range] {
            let vars = BlockVars::borrowed(tape, b);
            h = block_forward(tape, &vars, b, self.config.num_heads, h, None)?;
        }
        Ok(h)
    }

    /// Client submodel on a tape: `h0 ↦ h_{Q1}`; identity when `Q1 = 0`.
    pub fn client_forward_on<'a>(&'a self, tape: &mut GradTape<'a>, h0: Var) -> Result<Var> {
        self.check_hidden(tape.value(h0), "client_forward")?;
        self.run_blocks(tape, 0..self.config.split_point, h0)
    }

    pub fn client_forward(&self, h0: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let x = tape.constant(h0.clone());
        let y = self.client_forward_on(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Server submodel: remaining blocks then the output projection, giving L×V logits.
    pub fn server_forward(&self, h: &Tensor) -> Result<Tensor> {
        self.check_hidden(h, "server_forward")?;
        let mut tape = GradTape::new();
        let x = tape.constant(h.clone());
        let y = self.run_blocks(&mut tape, self.config.split_point..self.config.num_blocks, x)?;
        let w = tape.constant_ref(&self.unembed);
        let logits = tape.matmul(y, w)?;
        Ok(tape.value(logits).clone())
    }

    /// Unsplit reference forward from token ids to logits.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let h0 = self.embed(ids)?;
        let mut tape = GradTape::new();
        let x = tape.constant(h0);
        let y = self.run_blocks(&mut tape, 0..self.config.num_blocks, x)?;
        let w = tape.constant_ref(&self.unembed);
        let logits = tape.matmul(y, w)?;
        Ok(tape.value(logits).clone())
    }

    /// Runs every block on `ids` and records each sub-layer's input and output.
    pub fn trace(&self, ids: &[usize]) -> Result<Vec<BlockTrace>> {
        let h0 = self.embed(ids)?;
        self.trace_hidden(&h0, self.config.num_blocks)
    }

    /// Traces the first `blocks` blocks starting from `h0`.
    pub fn trace_hidden(&self, h0: &Tensor, blocks: usize) -> Result<Vec<BlockTrace>> {
        self.check_hidden(h0, "trace")?;
        let mut tape = GradTape::new();
        let mut h = tape.constant(h0.clone());
        let pos = tape.constant_ref(&self.positions);
        h = self.add_positions(&mut tape, h, pos)?;
        let mut traces = Vec::with_capacity(blocks);
        for b in &self.blocks[..blocks.min(self.config.num_blocks)] {
            let vars = BlockVars::borrowed(&mut tape, b);
            let mut t = BlockTrace::default();
            h = block_forward(&mut tape, &vars, b, self.config.num_heads, h, Some(&mut t))?;
            traces.push(t);
        }
        Ok(traces)
    }

    fn check_layer(&self, layer: LayerRef) -> Result<&Block> {
        self.blocks.get(layer.block).ok_or_else(|| {
            Error::InvalidLayer(format!(
                "block {} out of range (model has {})",
                layer.block, self.config.num_blocks
            ))
        })
    }

    /// Input width of a sub-layer.
    pub fn layer_input_dim(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::Activation | LayerKind::DownProj => self.config.ffn_dim,
            _ => self.config.hidden_dim,
        }
    }

    pub fn layer_output_dim(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::UpProj | LayerKind::GateProj | LayerKind::Activation => self.config.ffn_dim,
            _ => self.config.hidden_dim,
        }
    }

    /// Applies exactly one sub-layer on a tape.
    pub fn layer_forward_on<'a>(&'a self, tape: &mut GradTape<'a>, layer: LayerRef, z: Var) -> Result<Var> {
        let block = self.check_layer(layer)?;
        let want = self.layer_input_dim(layer.kind);
        let zv = tape.value(z);
        if zv.rank() != 2 || zv.cols() != want {
            return Err(Error::ShapeMismatch {
                op: "layer_forward",
                detail: format!("{layer} expects L×{want}, got {:?}", zv.shape()),
            });
        }
        if block.is_bypassed(layer.kind) {
            return Ok(z);
        }
        match layer.kind {
            LayerKind::RmsNorm1 | LayerKind::RmsNorm2 => {
                let g = tape.constant_ref(block.weight(layer.kind));
                tape.rms_norm(z, g, RMS_EPS)
            }
            LayerKind::Activation => tape.silu(z),
            kind => {
                let w = tape.constant_ref(block.weight(kind));
                tape.matmul(z, w)
            }
        }
    }

    pub fn layer_forward(&self, layer: LayerRef, z: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let x = tape.constant(z.clone());
        let y = self.layer_forward_on(&mut tape, layer, x)?;
        Ok(tape.value(y).clone())
    }

    /// A copy of the model with `layer` acting as identity.
    ///
    /// Rectangular FFN projections cannot be identity maps; bypassing one
    /// of them zeroes the FFN branch so only the residual passes through.
    pub fn bypass(&self, layer: LayerRef) -> Result<Self> {
        self.check_layer(layer)?;
        if layer.block >= self.config.split_point {
            return Err(Error::InvalidLayer(format!(
                "{layer} is not in the client submodel (split point {})",
                self.config.split_point
            )));
        }
        let mut m = self.clone();
        let b = &mut m.blocks[layer.block];
        b.bypass |= layer.kind.bit();
        Ok(m)
    }

    /// Every sub-layer of the client submodel.
    pub fn client_layers(&self) -> Vec<LayerRef> {
        (0..self.config.split_point)
            .flat_map(|b| LayerKind::ALL.into_iter().map(move |k| LayerRef::new(b, k)))
            .collect()
    }

    pub(crate) fn param_count(&self) -> usize {
        3 + 9 * self.blocks.len()
    }

    /// Mutable parameters in the fixed order used by [`ModelVars`].
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding, &mut self.positions, &mut self.unembed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }
}

/// Trainable tape handles for every model parameter.
pub(crate) struct ModelVars {
    embedding: Var,
    positions: Var,
    unembed: Var,
    blocks: Vec<BlockVars>,
}

impl ModelVars {
    pub(crate) fn trainable(tape: &mut GradTape<'_>, m: &SplitModel) -> Self {
        Self {
            embedding: tape.leaf(m.embedding.clone()),
            positions: tape.leaf(m.positions.clone()),
            unembed: tape.leaf(m.unembed.clone()),
            blocks: m.blocks.iter().map(|b| BlockVars::trainable(tape, b)).collect(),
        }
    }

    pub(crate) fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding, self.positions, self.unembed];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out
    }

    /// Full-model logits with gradients flowing to every parameter.
    pub(crate) fn logits(&self, tape: &mut GradTape<'_>, m: &SplitModel, ids: &[usize]) -> Result<Var> {
        m.check_ids(ids)?;
        let mut h = tape.row_select(self.embedding, ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let p = tape.row_select(self.positions, &pos_ids)?;
        h = tape.add(h, p)?;
        for (b, vars) in m.blocks.iter().zip(&self.blocks) {
            h = block_forward(tape, vars, b, m.config.num_heads, h, None)?;
        }
        tape.matmul(h, self.unembed)
    }
}

/// Index of the largest logit in the last row.
pub fn greedy_next(logits: &Tensor) -> usize {
    let row = logits.row(logits.rows() - 1);
    argmax(row)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;

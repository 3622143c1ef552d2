//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SPLK"
//! version    u16      currently 1
//! nfields    u16
//! field      u8 name length, name bytes (ASCII), u64 value      × nfields
//! ntensors   u32
//! tensor     u16 name length, name bytes, u8 rank, u32 × rank dims,
//!            u8 dtype (0 = f64, 1 = f32), raw little-endian values × ntensors
//! ```
//!
//! Config fields: `vocab_size`, `hidden_dim`, `num_blocks`, `split_point`,
//! `num_heads`, `ffn_dim`, `max_seq_len`, `seed`, `position_embedding`
//! (1 = learned additive) and one `block<i>_bypass` bitmask per block.
//! Tensors: `embedding`, `positions`, `unembed`, then `blocks.<i>.<name>`
//! for `attn_norm w_q w_k w_v w_o ffn_norm w_up w_gate w_down`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Block, ModelConfig, SplitModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPLK";
pub const CHECKPOINT_VERSION: u16 = 1;
const POSITION_LEARNED: u64 = 1;

/// Storage precision of tensor payloads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Compact 32-bit storage; values are widened back to f64 on load.
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor, precision: Precision) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(precision.tag());
    match precision {
        Precision::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        Precision::F32 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
}

/// Serializes a model to bytes.
pub fn encode_checkpoint(model: &SplitModel, precision: Precision) -> Vec<u8> {
    let c = model.config();
    let mut fields: Vec<(String, u64)> = vec![
        ("vocab_size".into(), c.vocab_size as u64),
        ("hidden_dim".into(), c.hidden_dim as u64),
        ("num_blocks".into(), c.num_blocks as u64),
        ("split_point".into(), c.split_point as u64),
        ("num_heads".into(), c.num_heads as u64),
        ("ffn_dim".into(), c.ffn_dim as u64),
        ("max_seq_len".into(), c.max_seq_len as u64),
        ("seed".into(), c.seed),
        ("position_embedding".into(), POSITION_LEARNED),
    ];
    for (i, b) in model.blocks.iter().enumerate() {
        fields.push((format!("block{i}_bypass"), b.bypass_mask() as u64));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(fields.len() as u16).to_le_bytes());
    for (name, value) in &fields {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&value.to_le_bytes());
    }

    let mut tensors: Vec<(String, &Tensor)> = vec![
        ("embedding".into(), &model.embedding),
        ("positions".into(), &model.positions),
        ("unembed".into(), &model.unembed),
    ];
    for (i, b) in model.blocks.iter().enumerate() {
        for (name, t) in b.named_tensors() {
            tensors.push((format!("blocks.{i}.{name}"), t));
        }
    }
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_tensor(&mut buf, &name, t, precision);
    }
    buf
}

pub fn save_checkpoint(model: &SplitModel, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
    fs::write(path, encode_checkpoint(model, precision))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SplitModel> {
    decode_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not valid UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SplitModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let nfields = r.u16()?;
    let mut fields = HashMap::new();
    for _ in 0..nfields {
        let len = r.u8()? as usize;
        let name = r.name(len)?;
        fields.insert(name, r.u64()?);
    }
    let field = |name: &str| -> Result<u64> {
        fields
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing config field {name}")))
    };
    if field("position_embedding")? != POSITION_LEARNED {
        return Err(Error::Checkpoint("unsupported position embedding".into()));
    }
    let config = ModelConfig {
        vocab_size: field("vocab_size")? as usize,
        hidden_dim: field("hidden_dim")? as usize,
        num_blocks: field("num_blocks")? as usize,
        split_point: field("split_point")? as usize,
        num_heads: field("num_heads")? as usize,
        ffn_dim: field("ffn_dim")? as usize,
        max_seq_len: field("max_seq_len")? as usize,
        seed: field("seed")?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;

    let ntensors = r.u32()?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..ntensors {
        let len = r.u16()? as usize;
        let name = r.name(len)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let data: Vec<f64> = match r.u8()? {
            0 => r
                .take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            1 => r
                .take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            tag => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {tag}"))),
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }

    let mut take = |name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let embedding = take("embedding")?;
    let positions = take("positions")?;
    let unembed = take("unembed")?;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        let mut t = |n: &str| take(&format!("blocks.{i}.{n}"));
        let mut b = Block {
            attn_norm: t("attn_norm")?,
            w_q: t("w_q")?,
            w_k: t("w_k")?,
            w_v: t("w_v")?,
            w_o: t("w_o")?,
            ffn_norm: t("ffn_norm")?,
            w_up: t("w_up")?,
            w_gate: t("w_gate")?,
            w_down: t("w_down")?,
            bypass: 0,
        };
        b.set_bypass_mask(field(&format!("block{i}_bypass")).unwrap_or(0) as u16);
        blocks.push(b);
    }
    SplitModel::from_parts(config, embedding, positions, blocks, unembed)
}

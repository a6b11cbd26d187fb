//! Versioned binary checkpoint.
//!
//! Layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `PTFM` |
//! | 4     | format version (u32) |
//! | 4     | architecture tag (u32) |
//! | 20    | embed_dim, hidden_dim, num_layers, max_seq_len, num_items (u32 each) |
//! | 8·P   | parameters in declaration order (f64 each) |

use std::path::Path;

use super::{expected_param_count, layout, Arch, ModelConfig, SeqModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTFM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Encoded size of any checkpoint for this configuration.
pub fn encoded_len(cfg: &ModelConfig) -> usize {
    HEADER_LEN + 8 * expected_param_count(cfg)
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Codec(format!("{name} = {v} does not fit in u32")))
}

pub fn encode(model: &SeqModel) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(encoded_len(cfg));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.arch.tag().to_le_bytes());
    for (name, v) in [
        ("embed_dim", cfg.embed_dim),
        ("hidden_dim", cfg.hidden_dim),
        ("num_layers", cfg.num_layers),
        ("max_seq_len", cfg.max_seq_len),
        ("num_items", cfg.num_items),
    ] {
        out.extend_from_slice(&u32_field(name, v)?.to_le_bytes());
    }
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SeqModel> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Codec(format!(
            "checkpoint truncated at {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Codec("bad checkpoint magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != VERSION {
        return Err(Error::Codec(format!(
            "unsupported checkpoint version {}",
            word(1)
        )));
    }
    let cfg = ModelConfig {
        arch: Arch::from_tag(word(2))?,
        embed_dim: word(3) as usize,
        hidden_dim: word(4) as usize,
        num_layers: word(5) as usize,
        max_seq_len: word(6) as usize,
        num_items: word(7) as usize,
    };
    cfg.validate()?;
    if bytes.len() != encoded_len(&cfg) {
        return Err(Error::Codec(format!(
            "checkpoint has {} bytes, configuration needs {}",
            bytes.len(),
            encoded_len(&cfg)
        )));
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params = layout(&cfg)
        .into_iter()
        .map(|spec| {
            let data: Vec<f64> = floats.by_ref().take(spec.numel()).collect();
            Tensor::new(spec.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    SeqModel::from_params(cfg, params, 0)
}

pub fn save(model: &SeqModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SeqModel> {
    decode(&std::fs::read(path)?)
}

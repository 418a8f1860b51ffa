//! `.tara` adapter files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 0..4       | magic `TARA`                             |
//! | 4..8       | u32 format version (1)                   |
//! | 8..12      | u32 header length `h`                    |
//! | 12..12+h   | UTF-8 JSON header                        |
//! | rest       | f64 blocks in the order of `header.blocks` |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterTargets, FactorId, InitMode, LayerAdapter, LoraAdapter, Projection};
use crate::attention::{LowRank, MaskPolicy};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::text::ConceptBinding;

pub const ADAPTER_MAGIC: &[u8; 4] = b"TARA";
pub const ADAPTER_VERSION: u32 = 1;
const PREFIX: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    concept: ConceptBinding,
    rank: usize,
    layers: Vec<usize>,
    mask_policy: MaskPolicy,
    init_mode: InitMode,
    targets: AdapterTargets,
    d_model: usize,
    d_text: usize,
    blocks: Vec<BlockInfo>,
}

pub fn encode_adapter(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    let factors = adapter.factors();
    let header = Header {
        concept: adapter.concept.clone(),
        rank: adapter.rank,
        layers: adapter.layers.iter().map(|l| l.layer).collect(),
        mask_policy: adapter.mask_policy,
        init_mode: adapter.init_mode,
        targets: adapter.targets,
        d_model: adapter.d_model,
        d_text: adapter.d_text,
        blocks: factors
            .iter()
            .map(|(id, m)| BlockInfo {
                name: id.name(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + factors.iter().map(|(_, m)| m.len() * 8).sum::<usize>());
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &factors {
        out.extend_from_slice(&m.to_le_bytes());
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| format_err(bytes.len(), "truncated prefix"))?;
    Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
}

pub fn decode_adapter(bytes: &[u8]) -> Result<LoraAdapter> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if let Some(i) = (0..4).find(|&i| bytes[i] != ADAPTER_MAGIC[i]) {
        return Err(format_err(i, "bad magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != ADAPTER_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_end = PREFIX
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(bytes.len(), "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| format_err(PREFIX + e.column().saturating_sub(1), format!("header: {e}")))?;

    // Expected block list derived from the header's own description.
    let projections: &[Projection] = match header.targets {
        AdapterTargets::KeyValue => &[Projection::Key, Projection::Value],
        AdapterTargets::AllProjections => &[Projection::Key, Projection::Value, Projection::Query, Projection::Output],
    };
    let mut expected = Vec::new();
    for &layer in &header.layers {
        for &p in projections {
            let in_dim = match p {
                Projection::Key | Projection::Value => header.d_text,
                Projection::Query | Projection::Output => header.d_model,
            };
            expected.push((FactorId { layer, projection: p, is_a: true }, header.rank, in_dim));
            expected.push((FactorId { layer, projection: p, is_a: false }, header.d_model, header.rank));
        }
    }
    if expected.len() != header.blocks.len()
        || expected
            .iter()
            .zip(&header.blocks)
            .any(|((id, r, c), b)| b.name != id.name() || b.rows != *r || b.cols != *c)
    {
        return Err(format_err(PREFIX, "block table inconsistent with declared shapes"));
    }
    if header.rank == 0 {
        return Err(format_err(PREFIX, "rank must be >= 1"));
    }

    let mut offset = header_end;
    let mut factors = Vec::with_capacity(expected.len());
    for (id, rows, cols) in &expected {
        let n = rows * cols * 8;
        let end = offset + n;
        if end > bytes.len() {
            return Err(format_err(bytes.len(), format!("truncated block {}", id.name())));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_vec(*rows, *cols, data)
            .map_err(|_| format_err(offset, format!("non-finite value in block {}", id.name())))?;
        factors.push(m);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format_err(offset, "trailing bytes"));
    }

    let mut it = factors.into_iter();
    let mut layers = Vec::with_capacity(header.layers.len());
    let next_pair = |it: &mut std::vec::IntoIter<Matrix>| -> Result<LowRank> {
        let a = it.next().expect("counted");
        let b = it.next().expect("counted");
        LowRank::new(a, b)
    };
    for &layer in &header.layers {
        let key = next_pair(&mut it)?;
        let value = next_pair(&mut it)?;
        let (query, output) = match header.targets {
            AdapterTargets::KeyValue => (None, None),
            AdapterTargets::AllProjections => (Some(next_pair(&mut it)?), Some(next_pair(&mut it)?)),
        };
        layers.push(LayerAdapter {
            layer,
            key,
            value,
            query,
            output,
        });
    }
    let concept = ConceptBinding::new(header.concept.name, header.concept.rare, header.concept.class)
        .map_err(|e| format_err(PREFIX, e.to_string()))?;
    Ok(LoraAdapter {
        concept,
        rank: header.rank,
        d_model: header.d_model,
        d_text: header.d_text,
        layers,
        mask_policy: header.mask_policy,
        init_mode: header.init_mode,
        targets: header.targets,
    })
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    let bytes = encode_adapter(adapter)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter(&bytes)
}

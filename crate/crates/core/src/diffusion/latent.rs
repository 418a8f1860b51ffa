//! Latent matrices on disk: a small binary file plus a JSON sidecar.
//!
//! Binary layout: magic `FMAT`, u32 version, u32 rows, u32 cols, then
//! `rows * cols` f64 values in row-major order, all little-endian.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"FMAT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Data,
    Noised { t: usize },
    Generated { seed: u64, steps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Matrix,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rows: usize,
    cols: usize,
    provenance: Provenance,
    checksum: String,
}

/// Sidecar path for a latent file: `sample.fmat` -> `sample.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl LatentSample {
    pub fn new(z: Matrix, provenance: Provenance) -> Result<Self> {
        if !z.is_finite() {
            return Err(Error::NonFinite("latent sample"));
        }
        Ok(LatentSample { z, provenance })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.z.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.z.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.z.cols() as u32).to_le_bytes());
        out.extend_from_slice(&self.z.to_le_bytes());
        out
    }

    pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
        let err = |offset: usize, reason: &str| Error::Format {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 16 {
            return Err(err(bytes.len(), "truncated latent header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(err(0, "bad latent magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != VERSION {
            return Err(err(4, "unsupported latent version"));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let body = &bytes[16..];
        if body.len() != rows * cols * 8 {
            return Err(err(bytes.len().min(16 + rows * cols * 8), "latent body length mismatch"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Writes `path` and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let side = Sidecar {
            rows: self.z.rows(),
            cols: self.z.cols(),
            provenance: self.provenance.clone(),
            checksum: format!("{:016x}", self.z.checksum()),
        };
        let side_path = sidecar_path(path);
        let text = serde_json::to_string_pretty(&side)?;
        std::fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let z = Self::decode_matrix(&bytes)?;
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        if (side.rows, side.cols) != z.shape() {
            return Err(Error::Shape {
                op: "latent_sidecar",
                left: (side.rows, side.cols),
                right: z.shape(),
            });
        }
        LatentSample::new(z, side.provenance)
    }
}

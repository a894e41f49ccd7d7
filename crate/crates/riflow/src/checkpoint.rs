//! Model checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RIFM" | version u8 | arch 5 x u32 | mode len u16 + utf8
//! | seed u64 | parameter blobs... | content hash u64
//! ```
//!
//! The architecture quintet is `(in_channels, couplings_per_stage,
//! hidden_width, height, width)`. Each parameter blob is `name_len u16 +
//! name + ndim u8 + dims u32... + values f64`; blobs run until the final
//! 8 bytes, which hold a truncated SHA-256 of everything before them.
//! Loading verifies that hash first, then requires the blobs to cover the
//! architecture's parameter set exactly — no extras, no gaps.
//!
//! The training mode and seed are provenance: they record how the weights
//! were produced but do not affect inference. The model fingerprint
//! embedded in compressed streams hashes only the model-defining sections
//! (architecture + parameters), so it is derivable from a live model
//! without a checkpoint file.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::flow::{FlowArch, FlowModel};

/// Magic bytes of a model checkpoint.
pub const MAGIC: [u8; 4] = *b"RIFM";
/// Current checkpoint version.
pub const VERSION: u8 = 1;

/// A deserialized checkpoint: the model plus its training provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FlowModel,
    /// Training mode that produced the weights (e.g. `clean`).
    pub mode: String,
    /// Seed the producing run was launched with.
    pub seed: u64,
}

/// Serializes a model with its training provenance.
pub fn save(model: &FlowModel, mode: &str, seed: u64) -> Vec<u8> {
    let arch = model.arch();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    for v in [
        arch.in_channels,
        arch.couplings_per_stage,
        arch.hidden_width,
        arch.height,
        arch.width,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(mode.len() as u16).to_le_bytes());
    out.extend_from_slice(mode.as_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for (name, values) in model.named_params() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(values.shape().len() as u8);
        for d in values.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

/// Byte-cursor with offset-carrying errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                what: format!("checkpoint truncated reading {what}"),
                offset: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("sized")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("sized")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("sized")))
    }
}

/// Parses and verifies a checkpoint.
pub fn load(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 1 + 20 + 2 + 8 + 8 {
        return Err(Error::Parse {
            what: "checkpoint shorter than its fixed sections".to_string(),
            offset: bytes.len(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format {
            what: format!("bad checkpoint magic {:02x?}", &bytes[0..4]),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::VersionMismatch {
            found: bytes[4],
            supported: VERSION,
        });
    }
    // Verify integrity before trusting any variable-length structure.
    let body_end = bytes.len() - 8;
    let found = u64::from_le_bytes(bytes[body_end..].try_into().expect("sized"));
    let digest = Sha256::digest(&bytes[..body_end]);
    let expected = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    if found != expected {
        return Err(Error::HashMismatch { expected, found });
    }

    let mut cur = Cursor { bytes: &bytes[..body_end], pos: 5 };
    let in_channels = cur.u32("architecture")? as usize;
    let couplings_per_stage = cur.u32("architecture")? as usize;
    let hidden_width = cur.u32("architecture")? as usize;
    let height = cur.u32("architecture")? as usize;
    let width = cur.u32("architecture")? as usize;
    let arch = FlowArch {
        in_channels,
        height,
        width,
        couplings_per_stage,
        hidden_width,
    };
    arch.validate()?;
    let mode_len = cur.u16("mode length")? as usize;
    let mode = std::str::from_utf8(cur.take(mode_len, "mode string")?)
        .map_err(|_| Error::Format {
            what: "training mode is not valid UTF-8".to_string(),
        })?
        .to_string();
    let seed = cur.u64("seed")?;

    let mut blobs: HashMap<String, Array> = HashMap::new();
    while cur.pos < body_end {
        let name_len = cur.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "parameter name")?)
            .map_err(|_| Error::Format {
                what: "parameter name is not valid UTF-8".to_string(),
            })?
            .to_string();
        let ndim = cur.take(1, "parameter rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("parameter dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
            .collect();
        if blobs.insert(name.clone(), Array::new(shape, data)?).is_some() {
            return Err(Error::Format {
                what: format!("duplicate parameter {name}"),
            });
        }
    }

    // Rebuild the architecture's parameter set and fill it exactly.
    let mut model = FlowModel::new(arch, 0)?;
    for (name, slot) in model.params_mut() {
        let values = blobs.remove(&name).ok_or_else(|| Error::Format {
            what: format!("checkpoint is missing parameter {name}"),
        })?;
        if values.shape() != slot.shape() {
            return Err(Error::Format {
                what: format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    values.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = Arc::new(values);
    }
    if let Some(name) = blobs.keys().next() {
        return Err(Error::Format {
            what: format!("checkpoint carries unknown parameter {name}"),
        });
    }
    Ok(Checkpoint { model, mode, seed })
}

/// Writes a checkpoint to disk.
pub fn save_file(path: impl AsRef<Path>, model: &FlowModel, mode: &str, seed: u64) -> Result<()> {
    std::fs::write(path, save(model, mode, seed))?;
    Ok(())
}

/// Reads a checkpoint from disk.
pub fn load_file(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load(&std::fs::read(path)?)
}

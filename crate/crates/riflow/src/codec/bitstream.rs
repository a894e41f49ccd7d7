//! Container format for compressed tensors.
//!
//! Fixed 30-byte header followed by the payload:
//!
//! ```text
//! offset  size  field
//!      0     4  magic  "RIFL"
//!      4     1  format version (currently 1)
//!      5     1  payload mode: 0 = entropy-coded, 1 = raw passthrough
//!      6    12  tensor shape (C, H, W) as little-endian u32
//!     18     8  model fingerprint, little-endian u64
//!     26     4  payload length in bytes, little-endian u32
//!     30     -  payload
//! ```
//!
//! Coded payloads hold the entropy coder's word stream; raw payloads hold
//! the original 8-bit pixels. The fingerprint ties a coded stream to the
//! exact model that produced it — decoding with anything else is refused.

use crate::error::{Error, Result};

/// Magic bytes identifying a compressed-tensor stream.
pub const MAGIC: [u8; 4] = *b"RIFL";
/// Current format version.
pub const VERSION: u8 = 1;
/// Bytes before the payload begins.
pub const HEADER_LEN: usize = 30;

/// How the payload encodes the tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    /// Entropy-coded latents.
    Coded,
    /// Verbatim 8-bit pixels (used when coding would expand).
    Raw,
}

impl PayloadMode {
    fn to_byte(self) -> u8 {
        match self {
            PayloadMode::Coded => 0,
            PayloadMode::Raw => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(PayloadMode::Coded),
            1 => Ok(PayloadMode::Raw),
            other => Err(Error::Format {
                what: format!("unknown payload mode byte {other}"),
            }),
        }
    }
}

/// A parsed (or to-be-serialized) compressed stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub mode: PayloadMode,
    /// Tensor shape `(C, H, W)`.
    pub shape: [u32; 3],
    /// Fingerprint of the producing model.
    pub fingerprint: u64,
    pub payload: Vec<u8>,
}

impl Bitstream {
    /// Serializes header plus payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.mode.to_byte());
        for d in self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and validates a serialized stream, including that the payload
    /// length matches the header's claim exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Parse {
                what: "compressed stream truncated inside the header".to_string(),
                offset: bytes.len(),
            });
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format {
                what: format!("bad magic {:02x?}, not a compressed-tensor stream", &bytes[0..4]),
            });
        }
        if bytes[4] != VERSION {
            return Err(Error::VersionMismatch {
                found: bytes[4],
                supported: VERSION,
            });
        }
        let mode = PayloadMode::from_byte(bytes[5])?;
        let mut shape = [0u32; 3];
        for (i, d) in shape.iter_mut().enumerate() {
            let at = 6 + 4 * i;
            *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("sliced in bounds"));
        }
        let fingerprint = u64::from_le_bytes(bytes[18..26].try_into().expect("sliced in bounds"));
        let payload_len = u32::from_le_bytes(bytes[26..30].try_into().expect("sliced in bounds")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < payload_len {
            return Err(Error::Parse {
                what: format!("payload claims {payload_len} bytes but only {} remain", body.len()),
                offset: bytes.len(),
            });
        }
        if body.len() > payload_len {
            return Err(Error::Format {
                what: format!(
                    "{} trailing bytes after the declared payload",
                    body.len() - payload_len
                ),
            });
        }
        Ok(Bitstream {
            mode,
            shape,
            fingerprint,
            payload: body.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            mode: PayloadMode::Coded,
            shape: [3, 16, 16],
            fingerprint: 0xDEAD_BEEF_0123_4567,
            payload: vec![1, 2, 3, 4, 5, 6, 7, 8],
        }
    }

    #[test]
    fn header_is_exactly_thirty_bytes_and_roundtrips() {
        let bs = sample();
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
    }

    #[test]
    fn corrupted_magic_and_version_are_distinct_errors() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::Format { .. })));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Bitstream::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, supported: 1 })
        ));
        let mut bytes = sample().to_bytes();
        bytes[5] = 7;
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_and_trailing_garbage_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 10, HEADER_LEN - 1, HEADER_LEN + 3] {
            assert!(
                Bitstream::from_bytes(&bytes[..cut]).is_err(),
                "truncation at {cut} must fail"
            );
        }
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(Bitstream::from_bytes(&extended).is_err());
    }
}

//! Range asymmetric numeral system coder.
//!
//! 64-bit state renormalized in 32-bit words over a 12-bit probability
//! scale. The coder is last-in-first-out: the encoder must emit symbols in
//! the reverse of decode order, and the decoder consumes the word stream
//! from its end. Alongside distribution-coded symbols the state can carry
//! raw 16-bit payloads (used for escape-coded out-of-window values), which
//! interleave with symbols in the same LIFO discipline.
//!
//! The encoder starts from a fixed lower bound `L = 1 << 31`; the decoder
//! must land on exactly that state with every word consumed, which catches
//! most stream corruptions for free.

use crate::error::{domain_err, Error, Result};

/// Bits of the probability scale; frequencies sum to `1 << PROB_BITS`.
pub const PROB_BITS: u32 = 12;
/// Total frequency mass of every coding table.
pub const PROB_SCALE: u32 = 1 << PROB_BITS;

/// Lower bound of the normalized state interval `[L, L << 32)`.
const STATE_LOWER: u64 = 1 << 31;

/// Streaming encoder. Call [`RansEncoder::finish`] to flush the state.
#[derive(Debug)]
pub struct RansEncoder {
    state: u64,
    words: Vec<u32>,
}

impl Default for RansEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RansEncoder {
    pub fn new() -> Self {
        RansEncoder {
            state: STATE_LOWER,
            words: Vec::new(),
        }
    }

    /// Encodes one symbol occupying `[start, start + freq)` of the scale.
    ///
    /// `freq` must be positive and the interval must fit in the scale; both
    /// are table invariants upheld by the quantizer, so violations are
    /// programming errors and panic via debug assertions.
    pub fn put(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0, "zero-frequency symbol");
        debug_assert!(start + freq <= PROB_SCALE, "interval exceeds scale");
        // One check suffices: after a renorm the state is < 2^31, far below
        // any threshold (they are at least 2^51 for freq >= 1).
        let x_max = ((STATE_LOWER >> PROB_BITS) << 32) * freq as u64;
        if self.state >= x_max {
            self.words.push(self.state as u32);
            self.state >>= 32;
        }
        let f = freq as u64;
        self.state = (self.state / f) * PROB_SCALE as u64 + (self.state % f) + start as u64;
    }

    /// Pushes 16 literal bits into the state (escape payload).
    pub fn put_raw16(&mut self, bits: u16) {
        if self.state >= (STATE_LOWER >> 16) << 32 {
            self.words.push(self.state as u32);
            self.state >>= 32;
        }
        self.state = (self.state << 16) | bits as u64;
    }

    /// Flushes the final state as two words (low half first) and returns the
    /// complete stream.
    pub fn finish(mut self) -> Vec<u32> {
        self.words.push(self.state as u32);
        self.words.push((self.state >> 32) as u32);
        self.words
    }
}

/// Streaming decoder over an encoded word slice.
#[derive(Debug)]
pub struct RansDecoder<'a> {
    state: u64,
    words: &'a [u32],
    /// Number of words not yet consumed (the decoder walks backwards).
    remaining: usize,
}

impl<'a> RansDecoder<'a> {
    /// Rebuilds the flushed state from the end of the stream.
    pub fn new(words: &'a [u32]) -> Result<Self> {
        if words.len() < 2 {
            return Err(Error::Format {
                what: format!("coded stream needs at least 2 words, got {}", words.len()),
            });
        }
        let mut dec = RansDecoder {
            state: 0,
            words,
            remaining: words.len(),
        };
        let hi = dec.pop()? as u64;
        let lo = dec.pop()? as u64;
        dec.state = (hi << 32) | lo;
        if dec.state < STATE_LOWER {
            return Err(Error::Format {
                what: "coded stream state below normalization bound".to_string(),
            });
        }
        Ok(dec)
    }

    fn pop(&mut self) -> Result<u32> {
        if self.remaining == 0 {
            return Err(Error::Format {
                what: "coded stream exhausted mid-decode".to_string(),
            });
        }
        self.remaining -= 1;
        Ok(self.words[self.remaining])
    }

    /// Slot of the next symbol in `[0, PROB_SCALE)`. Does not advance.
    pub fn peek(&self) -> u32 {
        (self.state & (PROB_SCALE as u64 - 1)) as u32
    }

    /// Consumes the symbol previously identified via [`RansDecoder::peek`].
    pub fn advance(&mut self, start: u32, freq: u32) -> Result<()> {
        debug_assert!(freq > 0, "zero-frequency symbol");
        let slot = self.state & (PROB_SCALE as u64 - 1);
        self.state = freq as u64 * (self.state >> PROB_BITS) + slot - start as u64;
        if self.state < STATE_LOWER {
            self.state = (self.state << 32) | self.pop()? as u64;
        }
        Ok(())
    }

    /// Pops 16 literal bits (inverse of [`RansEncoder::put_raw16`]).
    pub fn take_raw16(&mut self) -> Result<u16> {
        let bits = (self.state & 0xFFFF) as u16;
        self.state >>= 16;
        if self.state < STATE_LOWER {
            self.state = (self.state << 32) | self.pop()? as u64;
        }
        Ok(bits)
    }

    /// Verifies the decode consumed exactly the encoded content: every word
    /// read and the state back at its initial bound.
    pub fn finish(self) -> Result<()> {
        if self.remaining != 0 {
            return Err(Error::Format {
                what: format!("coded stream has {} unconsumed words", self.remaining),
            });
        }
        if self.state != STATE_LOWER {
            return Err(Error::Format {
                what: "coded stream did not return to its initial state".to_string(),
            });
        }
        Ok(())
    }
}

/// Serializes an encoded word stream little-endian.
pub fn words_to_bytes(words: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 4);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

/// Parses a little-endian byte payload back into words.
pub fn bytes_to_words(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(domain_err(
            "bytes_to_words",
            format!("payload length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunked by 4")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_symbol_costs_only_the_flush() {
        // A symbol with the full scale carries zero information: the state
        // never moves, so any count of them flushes to exactly two words.
        let mut enc = RansEncoder::new();
        for _ in 0..10_000 {
            enc.put(0, PROB_SCALE);
        }
        let words = enc.finish();
        assert_eq!(words.len(), 2, "expected an 8-byte payload");
        let mut dec = RansDecoder::new(&words).unwrap();
        for _ in 0..10_000 {
            assert!(dec.peek() < PROB_SCALE);
            dec.advance(0, PROB_SCALE).unwrap();
        }
        dec.finish().unwrap();
    }

    #[test]
    fn uniform_bytes_code_at_close_to_eight_bits_each() {
        // 256 symbols at frequency 16 each: exactly 8 bits of entropy per
        // symbol, so 10,000 symbols should land within a percent (plus
        // flush slack) of 10,000 bytes.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let symbols: Vec<u32> = (0..10_000).map(|_| rng.gen_range(0..256u32)).collect();
        let mut enc = RansEncoder::new();
        for &s in symbols.iter().rev() {
            enc.put(s * 16, 16);
        }
        let words = enc.finish();
        let bytes = words.len() * 4;
        assert!(
            bytes as f64 <= 10_000.0 * 1.01 + 16.0,
            "uniform stream took {bytes} bytes"
        );
        assert!(bytes >= 10_000, "uniform stream cannot beat its entropy, got {bytes}");
        let mut dec = RansDecoder::new(&words).unwrap();
        for &s in &symbols {
            let slot = dec.peek();
            assert_eq!(slot / 16, s);
            dec.advance(s * 16, 16).unwrap();
        }
        dec.finish().unwrap();
    }

    #[test]
    fn raw_bits_interleave_with_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items: Vec<(u32, u16)> = (0..5_000)
            .map(|_| (rng.gen_range(0..16u32), rng.gen::<u16>()))
            .collect();
        // Decode order is (symbol, raw); encode order is its full reverse.
        let mut enc = RansEncoder::new();
        for &(sym, raw) in items.iter().rev() {
            enc.put_raw16(raw);
            enc.put(sym * 256, 256);
        }
        let words = enc.finish();
        let mut dec = RansDecoder::new(&words).unwrap();
        for &(sym, raw) in &items {
            assert_eq!(dec.peek() / 256, sym);
            dec.advance(sym * 256, 256).unwrap();
            assert_eq!(dec.take_raw16().unwrap(), raw);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn skewed_distribution_roundtrips_and_beats_uniform_coding() {
        // 90% mass on symbol 0: ~0.6 bits per symbol.
        let freqs = [3686u32, 205, 205]; // sums to 4096
        let starts = [0u32, 3686, 3891];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let symbols: Vec<usize> = (0..20_000)
            .map(|_| {
                let r = rng.gen_range(0..4096u32);
                starts.iter().rposition(|&s| s <= r).unwrap()
            })
            .collect();
        let mut enc = RansEncoder::new();
        for &s in symbols.iter().rev() {
            enc.put(starts[s], freqs[s]);
        }
        let words = enc.finish();
        assert!(words.len() * 32 < 20_000, "skewed stream should beat 1 bit/symbol");
        let mut dec = RansDecoder::new(&words).unwrap();
        for &s in &symbols {
            let slot = dec.peek();
            let idx = starts.iter().rposition(|&st| st <= slot).unwrap();
            assert_eq!(idx, s);
            dec.advance(starts[idx], freqs[idx]).unwrap();
        }
        dec.finish().unwrap();
    }

    #[test]
    fn trailing_or_missing_words_are_rejected() {
        let mut enc = RansEncoder::new();
        for s in 0..100u32 {
            enc.put((s % 16) * 256, 256);
        }
        let mut words = enc.finish();
        // Trailing garbage: decode completes but finish() sees the extra word.
        words.insert(0, 0xDEAD_BEEF);
        let mut dec = RansDecoder::new(&words).unwrap();
        for _ in 0..100 {
            let slot = dec.peek();
            dec.advance((slot / 256) * 256, 256).unwrap();
        }
        assert!(dec.finish().is_err());
        // Truncation: the stream runs dry or the state lands off its bound.
        words.remove(0);
        words.remove(0);
        let outcome = RansDecoder::new(&words).and_then(|mut dec| {
            for _ in 0..100 {
                let slot = dec.peek();
                dec.advance((slot / 256) * 256, 256)?;
            }
            dec.finish()
        });
        assert!(outcome.is_err(), "truncated stream must not decode cleanly");
    }

    #[test]
    fn byte_serialization_roundtrips() {
        let words = vec![1u32, 0xFFFF_FFFF, 0x1234_5678];
        let bytes = words_to_bytes(&words);
        assert_eq!(bytes.len(), 12);
        assert_eq!(bytes_to_words(&bytes).unwrap(), words);
        assert!(bytes_to_words(&bytes[..7]).is_err());
    }
}

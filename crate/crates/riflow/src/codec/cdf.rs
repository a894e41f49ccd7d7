//! Quantized coding tables for discretized-logistic conditionals.
//!
//! Each latent position gets its own table built from the predicted
//! `(mu, s)`: a window of consecutive integer values around the location
//! plus a final escape slot for everything outside it. Window
//! probabilities are quantized to a fixed 12-bit scale by largest
//! remainder with a floor of one, so every representable value keeps a
//! nonzero frequency and the table always sums exactly to the scale.
//!
//! Escaped values are coded as the escape slot followed by their 16-bit
//! two's-complement representation; the translation clamp inside the flow
//! guarantees genuine latents always fit.

use crate::array::sigmoid_scalar;
use crate::codec::rans::{RansDecoder, RansEncoder, PROB_SCALE};
use crate::error::{domain_err, Result};

/// Inclusive bound of escape-codable values.
const VALUE_MIN: i64 = i16::MIN as i64;
const VALUE_MAX: i64 = i16::MAX as i64;

/// Widest admissible window: one slot of the scale is reserved for escape.
const MAX_WINDOW: i64 = (PROB_SCALE - 1) as i64;

/// Half-width of the window in scale units (`16 s` each side).
const WINDOW_SIGMAS: f64 = 16.0;

/// A frequency table over `window ∪ {escape}` summing to [`PROB_SCALE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    /// Value of the first in-window slot; slots `0..n-1` map to
    /// `lo..lo+n-1` and slot `n-1` is the escape.
    lo: i64,
    freqs: Vec<u32>,
    starts: Vec<u32>,
}

impl QuantizedCdf {
    /// Builds the table for a discretized logistic with location `mu` and
    /// scale `s`.
    pub fn build(mu: f64, s: f64) -> Result<Self> {
        if !mu.is_finite() || !s.is_finite() || s <= 0.0 {
            return Err(domain_err(
                "quantized_cdf",
                format!("conditional (mu={mu}, s={s}) is not a valid logistic"),
            ));
        }
        let half = WINDOW_SIGMAS * s;
        let mut lo = ((mu - half).floor() as i64).max(VALUE_MIN);
        let mut hi = ((mu + half).ceil() as i64).min(VALUE_MAX);
        if lo > hi {
            // The entire window sits outside the representable range; every
            // value escape-codes.
            return Self::from_frequencies(0, vec![PROB_SCALE]);
        }
        if hi - lo + 1 > MAX_WINDOW {
            // Re-centre a maximal window on the location.
            let c = (mu.round() as i64).clamp(lo, hi);
            lo = (c - MAX_WINDOW / 2).max(lo);
            if lo + MAX_WINDOW - 1 > hi {
                lo = hi - (MAX_WINDOW - 1);
            }
            hi = lo + MAX_WINDOW - 1;
        }
        // Window probabilities as CDF differences; whatever mass the window
        // misses funds the escape slot.
        let n = (hi - lo + 1) as usize;
        let mut probs = Vec::with_capacity(n + 1);
        let mut prev = sigmoid_scalar((lo as f64 - 0.5 - mu) / s);
        let first = prev;
        for k in lo..=hi {
            let upper = sigmoid_scalar((k as f64 + 0.5 - mu) / s);
            probs.push((upper - prev).max(0.0));
            prev = upper;
        }
        let escape = (1.0 - (prev - first)).max(0.0);
        probs.push(escape);
        let freqs = quantize_frequencies(&probs, PROB_SCALE);
        Self::from_frequencies(lo, freqs)
    }

    /// Assembles a table from explicit frequencies (the last entry is the
    /// escape slot). They must all be positive and sum to [`PROB_SCALE`].
    pub fn from_frequencies(lo: i64, freqs: Vec<u32>) -> Result<Self> {
        if freqs.is_empty() || freqs.len() as i64 > MAX_WINDOW + 1 {
            return Err(domain_err(
                "quantized_cdf",
                format!("table needs 1..={} slots, got {}", MAX_WINDOW + 1, freqs.len()),
            ));
        }
        if freqs.iter().any(|&f| f == 0) {
            return Err(domain_err("quantized_cdf", "every slot needs nonzero frequency"));
        }
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        if total != PROB_SCALE as u64 {
            return Err(domain_err(
                "quantized_cdf",
                format!("frequencies sum to {total}, expected {PROB_SCALE}"),
            ));
        }
        let mut starts = Vec::with_capacity(freqs.len());
        let mut acc = 0u32;
        for &f in &freqs {
            starts.push(acc);
            acc += f;
        }
        Ok(QuantizedCdf { lo, freqs, starts })
    }

    /// Inclusive window `(lo, hi)`; `lo > hi` means escape-only.
    pub fn window(&self) -> (i64, i64) {
        (self.lo, self.lo + self.freqs.len() as i64 - 2)
    }

    fn escape_index(&self) -> usize {
        self.freqs.len() - 1
    }

    /// Frequency of the escape slot.
    pub fn escape_freq(&self) -> u32 {
        self.freqs[self.escape_index()]
    }

    /// Frequency assigned to integer value `v`, if it is inside the window.
    pub fn freq_of_value(&self, v: i64) -> Option<u32> {
        let (lo, hi) = self.window();
        if v >= lo && v <= hi {
            Some(self.freqs[(v - lo) as usize])
        } else {
            None
        }
    }

    /// Encodes `v`, escape-coding it when outside the window. Remember the
    /// coder is LIFO: callers encode values in reverse decode order.
    pub fn encode_value(&self, enc: &mut RansEncoder, v: i64) -> Result<()> {
        let (lo, hi) = self.window();
        if v >= lo && v <= hi {
            let idx = (v - lo) as usize;
            enc.put(self.starts[idx], self.freqs[idx]);
            return Ok(());
        }
        if !(VALUE_MIN..=VALUE_MAX).contains(&v) {
            return Err(domain_err(
                "encode_value",
                format!("value {v} exceeds the 16-bit escape range"),
            ));
        }
        // The decoder sees the escape symbol first, then the raw bits; the
        // encoder therefore pushes them in the opposite order.
        enc.put_raw16(v as i16 as u16);
        let e = self.escape_index();
        enc.put(self.starts[e], self.freqs[e]);
        Ok(())
    }

    /// Decodes the next value coded under this table.
    pub fn decode_value(&self, dec: &mut RansDecoder) -> Result<i64> {
        let slot = dec.peek();
        let idx = self.starts.partition_point(|&s| s <= slot) - 1;
        dec.advance(self.starts[idx], self.freqs[idx])?;
        if idx == self.escape_index() {
            let bits = dec.take_raw16()?;
            Ok(bits as i16 as i64)
        } else {
            Ok(self.lo + idx as i64)
        }
    }
}

/// Quantizes a probability vector to integer frequencies summing exactly to
/// `total`, each at least 1, by largest remainder. Ties break toward lower
/// indices, so the result is fully deterministic. `probs` holds relative
/// masses (they are renormalized); non-finite or non-positive mass falls
/// back to uniform.
///
/// The floor is built in from the start: every slot is pre-funded with one
/// unit and the remaining budget is apportioned by largest remainder. That
/// discounts all probabilities by the same uniform factor instead of carving
/// the floor mass out of the distribution's head, which would concentrate
/// the rate loss exactly where symbols actually occur.
pub fn quantize_frequencies(probs: &[f64], total: u32) -> Vec<u32> {
    assert!(!probs.is_empty(), "cannot quantize an empty table");
    assert!(
        probs.len() as u64 <= total as u64,
        "{} slots cannot each hold mass out of {total}",
        probs.len()
    );
    let n = probs.len();
    let budget = (total as u64 - n as u64) as f64;
    let mass: f64 = probs.iter().map(|&p| p.max(0.0)).sum();
    let scaled: Vec<f64> = if mass > 0.0 && mass.is_finite() {
        probs.iter().map(|&p| p.max(0.0) / mass * budget).collect()
    } else {
        vec![budget / n as f64; n]
    };
    let mut extra: Vec<u32> = scaled.iter().map(|&t| t.floor() as u32).collect();
    let mut assigned: i64 = extra.iter().map(|&f| f as i64).sum();
    // Hand out the remainder mass one unit at a time, largest fraction
    // first (index order on ties).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
    });
    let mut cursor = 0;
    while assigned < budget as i64 {
        extra[order[cursor % n]] += 1;
        assigned += 1;
        cursor += 1;
    }
    // Floating error can overshoot by a unit or two; reclaim from the
    // largest slots.
    while assigned > budget as i64 {
        let victim = largest_slot(&extra);
        debug_assert!(extra[victim] > 0, "cannot reclaim from an empty budget");
        extra[victim] -= 1;
        assigned -= 1;
    }
    extra.iter().map(|&f| f + 1).collect()
}

/// Index of the maximal frequency, lowest index on ties.
fn largest_slot(freqs: &[u32]) -> usize {
    let mut best = 0;
    for (i, &f) in freqs.iter().enumerate() {
        if f > freqs[best] {
            best = i;
        }
    }
    best
}

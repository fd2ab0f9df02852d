//! 32-bit renormalizing range coder with carry propagation.
//!
//! The encoder keeps a 33-bit `low`, a 32-bit `range`, and a one-byte cache
//! plus a run of pending `0xFF` bytes so that a carry out of `low` can be
//! pushed into bytes already produced. Symbols are coded against cumulative
//! frequencies summing to `1 << FREQ_BITS`.
//!
//! The stream omits the always-zero first byte and any trailing zero bytes;
//! the decoder reads zeros past the end. The final value is chosen inside
//! the last interval with as many trailing zero bits as possible, so the
//! flush usually costs at most one or two bytes.

use crate::error::{MdcError, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const TOP: u32 = 1 << 24;

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { low: 0, range: u32::MAX, cache: 0, pending: 1, out: Vec::new() }
    }

    /// Codes the sub-interval `[start, start + size)` of `FREQ_TOTAL`.
    pub fn encode(&mut self, start: u32, size: u32) {
        debug_assert!(size > 0 && start + size <= FREQ_TOTAL);
        let r = self.range >> FREQ_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        let hi = self.low + self.range as u64 - 1;
        for bits in (0..=32).rev() {
            let mask = (1u64 << bits) - 1;
            let v = (self.low + mask) & !mask;
            if v <= hi {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        let mut out = self.out;
        debug_assert_eq!(out.first(), Some(&0));
        out.remove(0);
        while out.last() == Some(&0) {
            out.pop();
        }
        out
    }
}

pub struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
    r: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Decoder { input, pos: 0, range: u32::MAX, code: 0, r: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Position of the next symbol within `FREQ_TOTAL`.
    pub fn target(&mut self) -> Result<u32> {
        self.r = self.range >> FREQ_BITS;
        let v = self.code / self.r;
        if v >= FREQ_TOTAL {
            return Err(MdcError::corrupt("range decoder left the coding interval"));
        }
        Ok(v)
    }

    /// Consumes the interval found for the last [`Decoder::target`].
    pub fn consume(&mut self, start: u32, size: u32) {
        self.code -= self.r * start;
        self.range = self.r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }
}

/// Integer frequencies from a distribution: every symbol gets at least 1,
/// the remainder of `FREQ_TOTAL` goes to the most probable symbol.
pub fn quantize_frequencies(probs: &[f64], freqs: &mut [u32]) {
    let l = probs.len() as u32;
    debug_assert!(l >= 2 && l < FREQ_TOTAL / 2);
    let norm: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    let scale = if norm > 0.0 { (FREQ_TOTAL - l) as f64 / norm } else { 0.0 };
    let mut total = 0u32;
    let mut best = 0;
    for (j, (&p, f)) in probs.iter().zip(freqs.iter_mut()).enumerate() {
        *f = 1 + (p.max(0.0) * scale).floor().min((FREQ_TOTAL - l) as f64) as u32;
        total += *f;
        if p > probs[best] {
            best = j;
        }
    }
    // Σ floor(x_i) <= Σ x_i, up to one unit of float rounding in the scale
    if total > FREQ_TOTAL {
        freqs[best] -= total - FREQ_TOTAL;
    } else {
        freqs[best] += FREQ_TOTAL - total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cumulative(freqs: &[u32]) -> Vec<u32> {
        let mut c = vec![0];
        for f in freqs {
            c.push(c.last().unwrap() + f);
        }
        c
    }

    fn roundtrip(freqs: &[u32], symbols: &[usize]) -> (Vec<u8>, Vec<usize>) {
        let cum = cumulative(freqs);
        let mut enc = Encoder::new();
        for &s in symbols {
            enc.encode(cum[s], freqs[s]);
        }
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes);
        let mut out = Vec::new();
        for _ in symbols {
            let t = dec.target().unwrap();
            let s = cum.partition_point(|&c| c <= t) - 1;
            dec.consume(cum[s], freqs[s]);
            out.push(s);
        }
        (bytes, out)
    }

    #[test]
    fn frequencies_fill_the_total() {
        let mut f = [0u32; 4];
        quantize_frequencies(&[0.5, 0.25, 0.25, 0.0], &mut f);
        assert_eq!(f.iter().sum::<u32>(), FREQ_TOTAL);
        assert!(f.iter().all(|&v| v >= 1));
        quantize_frequencies(&[1.0, 1.0, 1.0, 1.0], &mut f);
        assert_eq!(f.iter().sum::<u32>(), FREQ_TOTAL);
    }

    #[test]
    fn uniform_stream_costs_its_entropy() {
        let freqs = [FREQ_TOTAL / 8; 8];
        let symbols: Vec<usize> = (0..32).map(|i| (i * 5 + 3) % 8).collect();
        let (bytes, back) = roundtrip(&freqs, &symbols);
        assert_eq!(back, symbols);
        assert!(bytes.len() <= 13, "{} bytes", bytes.len());
    }

    #[test]
    fn carries_propagate_through_ff_runs() {
        // a skewed model walking the top of the interval produces long 0xFF runs
        let freqs = [1, FREQ_TOTAL - 2, 1];
        let symbols: Vec<usize> = (0..4000).map(|i| if i % 997 == 0 { 0 } else if i % 13 == 0 { 2 } else { 1 }).collect();
        let (_, back) = roundtrip(&freqs, &symbols);
        assert_eq!(back, symbols);
    }

    proptest! {
        #[test]
        fn random_streams_round_trip(
            raw in prop::collection::vec(1u32..1000, 2..12),
            picks in prop::collection::vec(0usize..1000, 0..400),
        ) {
            let total: u32 = raw.iter().sum();
            let mut freqs: Vec<u32> = raw.iter().map(|&f| (f as u64 * (FREQ_TOTAL as u64 - raw.len() as u64) / total as u64) as u32 + 1).collect();
            let s: u32 = freqs.iter().sum();
            freqs[0] += FREQ_TOTAL - s;
            let symbols: Vec<usize> = picks.iter().map(|p| p % freqs.len()).collect();
            let (bytes, back) = roundtrip(&freqs, &symbols);
            prop_assert_eq!(back, symbols.clone());
            let ideal: f64 = symbols.iter().map(|&s| -(freqs[s] as f64 / FREQ_TOTAL as f64).log2()).sum();
            prop_assert!((bytes.len() * 8) as f64 <= ideal + 24.0, "{} bytes for {ideal} bits", bytes.len());
        }
    }
}

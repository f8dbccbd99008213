//! Carry-propagating range coder with 16-bit frequency totals.
//!
//! The encoder keeps a 33-bit `low` (in a u64) and a 32-bit `range`. A
//! symbol with cumulative frequency `start` and frequency `size` out of
//! `2^16` narrows the interval to `low += r·start, range = r·size` with
//! `r = range >> 16`. Whenever `range < 2^24` one byte is shifted out.
//! Carries are resolved through a cached byte plus a run of pending `0xFF`
//! bytes. `docs/bitstream.md` is the normative description.

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes `[start, start+size)` out of `2^total_bits`.
    pub fn encode(&mut self, start: u32, size: u32, total_bits: u32) {
        debug_assert!(size > 0 && start + size <= 1 << total_bits);
        let r = self.range >> total_bits;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_freq(&mut self, start: u32, size: u32) {
        self.encode(start, size, PROB_BITS);
    }

    /// Equiprobable bits, most significant first.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        for i in (0..nbits).rev() {
            self.encode((value >> i) & 1, 1, 1);
        }
    }

    /// Flushes the interval and returns the bytes. The first emitted byte
    /// is always zero and is dropped.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            data,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes consumed beyond the end of the payload. A valid stream never
    /// needs more than the flushed tail.
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.data.len())
    }

    /// Returns the cumulative value of the next symbol under a
    /// `2^total_bits` model; must be followed by [`Self::consume`].
    pub fn peek(&mut self, total_bits: u32) -> u32 {
        let r = self.range >> total_bits;
        (self.code / r).min((1 << total_bits) - 1)
    }

    pub fn consume(&mut self, start: u32, size: u32, total_bits: u32) {
        let r = self.range >> total_bits;
        self.code = self.code.wrapping_sub(r * start);
        self.range = r * size;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    pub fn peek_freq(&mut self) -> u32 {
        self.peek(PROB_BITS)
    }

    pub fn consume_freq(&mut self, start: u32, size: u32) {
        self.consume(start, size, PROB_BITS);
    }

    pub fn decode_bits(&mut self, nbits: u32) -> u32 {
        let mut v = 0;
        for _ in 0..nbits {
            let b = self.peek(1);
            self.consume(b, 1, 1);
            v = (v << 1) | b;
        }
        v
    }
}

/// Cumulative frequency table over `n` symbols summing to `2^16`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantises probabilities: every symbol gets `1 + floor(p·(2^16 - n))`
    /// and the remainder goes to the most probable symbol (lowest index on
    /// ties).
    pub fn from_probs(p: &[f64]) -> Self {
        let n = p.len();
        assert!(n >= 1 && n < PROB_TOTAL as usize / 2, "table size {n}");
        let budget = (PROB_TOTAL as usize - n) as f64;
        let mut freq: Vec<u32> = p
            .iter()
            .map(|&pi| 1 + (pi.clamp(0.0, 1.0) * budget).floor() as u32)
            .collect();
        let total: u32 = freq.iter().sum();
        let mut best = 0;
        for i in 1..n {
            if p[i] > p[best] {
                best = i;
            }
        }
        freq[best] += PROB_TOTAL - total;
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        for f in freq {
            cum.push(cum.last().unwrap() + f);
        }
        FreqTable { cum }
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, i: usize) -> u32 {
        self.cum[i + 1] - self.cum[i]
    }

    pub fn encode(&self, enc: &mut RangeEncoder, i: usize) {
        enc.encode_freq(self.cum[i], self.freq(i));
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> usize {
        let v = dec.peek_freq();
        // Last index whose cumulative start is <= v.
        let i = self.cum.partition_point(|&c| c <= v) - 1;
        let i = i.min(self.len() - 1);
        dec.consume_freq(self.cum[i], self.freq(i));
        i
    }
}

/// Sign plus order-0 Exp-Golomb code of `|v|`, as equiprobable bits.
pub fn encode_escape(enc: &mut RangeEncoder, v: i32) {
    enc.encode_bits((v < 0) as u32, 1);
    let m = v.unsigned_abs() + 1;
    let nb = 32 - m.leading_zeros();
    enc.encode_bits(0, nb - 1);
    enc.encode_bits(m, nb);
}

pub fn decode_escape(dec: &mut RangeDecoder<'_>) -> Option<i32> {
    let neg = dec.decode_bits(1) == 1;
    let mut zeros = 0;
    while dec.decode_bits(1) == 0 {
        zeros += 1;
        if zeros > 31 {
            return None;
        }
    }
    let rest = dec.decode_bits(zeros);
    let m = (1u64 << zeros) | rest as u64;
    let mag = i32::try_from(m - 1).ok()?;
    Some(if neg { -mag } else { mag })
}

/// Bits spent by [`encode_escape`] on `v`.
pub fn escape_bits(v: i32) -> u32 {
    let m = v.unsigned_abs() + 1;
    1 + 2 * (32 - m.leading_zeros()) - 1
}

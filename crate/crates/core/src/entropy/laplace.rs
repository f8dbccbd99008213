//! Discretised Laplace coding of integer symbols.

use bvc_tensor::kernels::laplace_bin_mass;

use super::range::{decode_escape, encode_escape, escape_bits, FreqTable, RangeDecoder, RangeEncoder};

/// Smallest admissible scale.
pub const SCALE_MIN: f32 = 0.01;
/// Symbols outside `[-SUPPORT, SUPPORT]` are always escape coded.
pub const SUPPORT: i32 = 255;
/// Probability floor used by the rate estimate.
pub const P_FLOOR: f64 = 1.0 / 65536.0;

/// The coded window of one Laplace distribution: symbols `lo..=hi` plus a
/// trailing escape entry.
pub struct LaplaceWindow {
    pub lo: i32,
    pub hi: i32,
    pub table: FreqTable,
}

impl LaplaceWindow {
    pub fn new(mu: f32, b: f32) -> Self {
        let b = (b.max(SCALE_MIN)) as f64;
        let mu = (mu as f64).clamp(-(SUPPORT as f64), SUPPORT as f64);
        let reach = 20.0 * b + 1.0;
        let lo = ((mu - reach).floor() as i32).max(-SUPPORT);
        let hi = ((mu + reach).ceil() as i32).min(SUPPORT);
        let mut p: Vec<f64> = (lo..=hi).map(|s| laplace_bin_mass(s as f64, mu, b)).collect();
        let inside: f64 = p.iter().sum();
        p.push((1.0 - inside).max(0.0));
        LaplaceWindow {
            lo,
            hi,
            table: FreqTable::from_probs(&p),
        }
    }

    fn escape_index(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn encode(&self, enc: &mut RangeEncoder, s: i32) {
        if s >= self.lo && s <= self.hi {
            self.table.encode(enc, (s - self.lo) as usize);
        } else {
            self.table.encode(enc, self.escape_index());
            encode_escape(enc, s);
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Option<i32> {
        let i = self.table.decode(dec);
        if i == self.escape_index() {
            decode_escape(dec)
        } else {
            Some(self.lo + i as i32)
        }
    }

    /// Exact cost in bits of coding `s` with this window (ignoring coder
    /// termination).
    pub fn cost(&self, s: i32) -> f64 {
        let t = super::range::PROB_TOTAL as f64;
        if s >= self.lo && s <= self.hi {
            -(self.table.freq((s - self.lo) as usize) as f64 / t).log2()
        } else {
            -(self.table.freq(self.escape_index()) as f64 / t).log2() + escape_bits(s) as f64
        }
    }
}

/// Rate estimate of one symbol: `-log2 max(P, 2^-16)` with the continuous
/// bin mass, matching the training objective.
pub fn estimate_bits(s: i32, mu: f32, b: f32) -> f64 {
    let p = laplace_bin_mass(s as f64, mu as f64, b.max(SCALE_MIN) as f64);
    -p.max(P_FLOOR).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_with_escapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cases: Vec<(i32, f32, f32)> = (0..20000)
            .map(|_| {
                let mu = rng.gen_range(-300.0f32..300.0);
                let b = rng.gen_range(0.0f32..30.0);
                let s = if rng.gen_bool(0.9) {
                    (mu + rng.gen_range(-3.0f32..3.0) * b).round() as i32
                } else {
                    rng.gen_range(-5000..5000)
                };
                (s, mu, b)
            })
            .collect();
        let mut enc = RangeEncoder::new();
        for &(s, mu, b) in &cases {
            LaplaceWindow::new(mu, b).encode(&mut enc, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &(s, mu, b) in &cases {
            assert_eq!(LaplaceWindow::new(mu, b).decode(&mut dec), Some(s));
        }
    }

    #[test]
    fn cdf_is_monotone() {
        for &(mu, b) in &[(0.0f32, 1.0f32), (3.3, 0.2), (-10.0, 7.0)] {
            let mut acc = 0.0;
            for s in -60..60 {
                let next = acc + laplace_bin_mass(s as f64, mu as f64, b as f64);
                assert!(next >= acc);
                acc = next;
            }
        }
    }

    #[test]
    fn integer_mu_shift_shifts_costs() {
        let a = LaplaceWindow::new(0.25, 1.75);
        let b = LaplaceWindow::new(5.25, 1.75);
        for s in -10..10 {
            assert_eq!(a.cost(s), b.cost(s + 5));
        }
    }
}

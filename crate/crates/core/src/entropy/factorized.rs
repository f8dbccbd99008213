//! Per-channel learned cumulative model for hyper latents.
//!
//! Each channel owns a small monotone network `R → R` (widths 1-3-3-3-1,
//! softplus-positive matrices, tanh gates bounded by the same argument)
//! whose sigmoid is a CDF. A symbol's probability is the CDF difference
//! across its unit bin.

use bvc_tensor::{ParamId, ParamStore, Tensor, Var};

use super::range::{decode_escape, encode_escape, FreqTable, RangeDecoder, RangeEncoder};
use super::laplace::P_FLOOR;
use crate::nn::Fwd;

const WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
/// Symbols coded through the table; the rest are escaped.
pub const TABLE_RADIUS: i32 = 64;

pub struct Factorized {
    channels: usize,
    mats: Vec<ParamId>,
    biases: Vec<ParamId>,
    gates: Vec<ParamId>,
}

impl Factorized {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let init_scale: f64 = 10.0;
        let layers = WIDTHS.len() - 1;
        let scale = init_scale.powf(1.0 / layers as f64);
        let mut mats = Vec::new();
        let mut biases = Vec::new();
        let mut gates = Vec::new();
        for i in 0..layers {
            let (fin, fout) = (WIDTHS[i], WIDTHS[i + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln() as f32;
            mats.push(store.add_const(format!("{name}.m{i}"), &[channels, fout, fin], init));
            let b = Tensor::rand_uniform(&[channels, fout, 1], -0.5, 0.5, store.rng());
            biases.push(store.add(format!("{name}.b{i}"), b));
            if i + 1 < layers {
                gates.push(store.add_const(format!("{name}.g{i}"), &[channels, fout, 1], 0.0));
            }
        }
        Factorized {
            channels,
            mats,
            biases,
            gates,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// CDF logits of `x: [C, 1, N]`, one network per channel.
    pub fn logits<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Var<'a> {
        let mut h = x;
        for i in 0..self.mats.len() {
            h = f.p(self.mats[i]).softplus().bmm(h) + f.p(self.biases[i]);
            if i < self.gates.len() {
                h = h + f.p(self.gates[i]).tanh() * h.tanh();
            }
        }
        h
    }

    /// Differentiable bits `-log2 max(P, 2^-16)` of `z: [C,H,W]`, summed.
    pub fn bits<'a>(&self, f: &Fwd<'a>, z: Var<'a>) -> Var<'a> {
        let (c, h, w) = z.dims3();
        let x = z.reshape(&[c, 1, h * w]);
        let up = self.logits(f, x.add_scalar(0.5));
        let lo = self.logits(f, x.add_scalar(-0.5));
        // Evaluate in the tail nearer zero to avoid 1 - 1 cancellation.
        let sign = up.value().add(&lo.value()).map(|s| if s > 0.0 { -1.0 } else { 1.0 });
        let s = f.c(sign);
        let p = ((up * s).sigmoid() - (lo * s).sigmoid()).abs();
        p.lower_bound(P_FLOOR as f32).ln().sum().scale(-std::f32::consts::LOG2_E)
    }

    /// Per-channel probabilities of symbols `-R..=R` and the escape mass.
    pub fn tables(&self, f: &Fwd<'_>) -> Vec<(Vec<f64>, FreqTable)> {
        let r = TABLE_RADIUS;
        let edges: Vec<f32> = (-r..=r + 1).map(|k| k as f32 - 0.5).collect();
        let n = edges.len();
        let x = Tensor::from_fn(&[self.channels, 1, n], |i| edges[i % n]);
        let l = self.logits(f, f.c(x)).value();
        (0..self.channels)
            .map(|c| {
                let row = &l.data()[c * n..(c + 1) * n];
                let mut p: Vec<f64> = (0..n - 1)
                    .map(|k| {
                        let (a, b) = (row[k] as f64, row[k + 1] as f64);
                        let s = if a + b > 0.0 { -1.0 } else { 1.0 };
                        (sigmoid(s * b) - sigmoid(s * a)).abs()
                    })
                    .collect();
                let inside: f64 = p.iter().sum();
                p.push((1.0 - inside).max(0.0));
                let table = FreqTable::from_probs(&p);
                (p, table)
            })
            .collect()
    }

    /// Codes integer symbols `z: [C,H,W]`; returns the payload and the
    /// rate estimate in bits.
    pub fn encode(&self, f: &Fwd<'_>, z: &Tensor) -> (Vec<u8>, f64) {
        let (c, h, w) = z.dims3();
        let tables = self.tables(f);
        let mut enc = RangeEncoder::new();
        let mut est = 0.0;
        for ch in 0..c {
            let (p, t) = &tables[ch];
            for &v in &z.data()[ch * h * w..(ch + 1) * h * w] {
                let s = v as i32;
                if (-TABLE_RADIUS..=TABLE_RADIUS).contains(&s) {
                    let i = (s + TABLE_RADIUS) as usize;
                    t.encode(&mut enc, i);
                    est += -p[i].max(P_FLOOR).log2();
                } else {
                    t.encode(&mut enc, t.len() - 1);
                    encode_escape(&mut enc, s);
                    est += -P_FLOOR.log2();
                }
            }
        }
        (enc.finish(), est)
    }

    pub fn decode(&self, f: &Fwd<'_>, bytes: &[u8], shape: [usize; 3]) -> Option<Tensor> {
        let [c, h, w] = shape;
        let tables = self.tables(f);
        let mut dec = RangeDecoder::new(bytes);
        let mut out = Vec::with_capacity(c * h * w);
        for (_, t) in tables.iter().take(c) {
            for _ in 0..h * w {
                let i = t.decode(&mut dec);
                let s = if i == t.len() - 1 {
                    decode_escape(&mut dec)?
                } else {
                    i as i32 - TABLE_RADIUS
                };
                out.push(s as f32);
            }
        }
        Some(Tensor::new(&[c, h, w], out))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use bvc_tensor::Tape;

    #[test]
    fn tables_are_distributions_and_roundtrip() {
        let mut s = ParamStore::new(2);
        let fz = Factorized::new(&mut s, "fz", 3);
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &s);
        for (p, _) in fz.tables(&f) {
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        let z = Tensor::from_fn(&[3, 4, 5], |i| ((i * 7) % 11) as f32 - 5.0 + if i == 17 { 300.0 } else { 0.0 });
        let (bytes, est) = fz.encode(&f, &z);
        assert!(est > 0.0);
        assert_eq!(fz.decode(&f, &bytes, [3, 4, 5]).unwrap(), z);
    }

    #[test]
    fn zero_latent_bits_match_closed_form() {
        let mut s = ParamStore::new(4);
        let fz = Factorized::new(&mut s, "fz", 2);
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &s);
        let z = Tensor::zeros(&[2, 3, 3]);
        let bits = fz.bits(&f, f.c(z.clone())).item() as f64;
        let (p, _) = &fz.tables(&f)[0];
        let (q, _) = &fz.tables(&f)[1];
        let r = TABLE_RADIUS as usize;
        let expect = -9.0 * (p[r].log2() + q[r].log2());
        assert!((bits - expect).abs() < 1e-3 * expect.max(1.0), "{bits} vs {expect}");
        let (_, est) = fz.encode(&f, &z);
        assert!((est - expect).abs() < 1e-9);
    }
}

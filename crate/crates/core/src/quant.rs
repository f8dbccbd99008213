//! Learned quantisation steps and the quantiser used on both sides of the
//! entropy coder.

use bvc_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::BASE_LAMBDAS;
use crate::error::{invalid, Result};
use crate::nn::Fwd;

/// Largest symbol magnitude the coder accepts; the quantiser clamps to it.
pub const MAX_SYMBOL: f32 = 32767.0;

/// Integer symbols of a scaled latent. Adding `0.0` folds `-0.0` into
/// `+0.0` so encoder-side symbols match decoded ones bit for bit.
pub fn to_symbols(t: &Tensor) -> Tensor {
    t.map(|v| v.round().clamp(-MAX_SYMBOL, MAX_SYMBOL) + 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Train,
    Eval,
}

/// Per-channel steps for the four base rate points, stored as logarithms.
/// Fractional rate indices interpolate the logarithms linearly.
#[derive(Clone, Debug)]
pub struct QuantBank {
    log_q: ParamId,
    channels: usize,
}

impl QuantBank {
    /// Steps start at `base · (λ0 / λr)^½` so that higher rate points
    /// quantise more finely before any training.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, base: f32) -> Self {
        let mut v = Vec::with_capacity(4 * channels);
        for lam in BASE_LAMBDAS {
            let q = base as f64 * (BASE_LAMBDAS[0] / lam).sqrt();
            v.extend(std::iter::repeat(q.ln() as f32).take(channels));
        }
        let log_q = store.add(name, Tensor::new(&[4, channels], v));
        QuantBank { log_q, channels }
    }

    pub fn id(&self) -> ParamId {
        self.log_q
    }

    /// Step tensor of shape `[C,1,1]` for `rate_idx ∈ [0, 3]`.
    pub fn step<'a>(&self, f: &Fwd<'a>, rate_idx: f64) -> Result<Var<'a>> {
        check_rate(rate_idx)?;
        let i0 = (rate_idx.floor() as usize).min(2);
        let t = (rate_idx - i0 as f64) as f32;
        let bank = f.p(self.log_q);
        let lo = bank.narrow(i0, 1);
        let log = if t == 0.0 {
            lo
        } else if t == 1.0 {
            bank.narrow(i0 + 1, 1)
        } else {
            lo.scale(1.0 - t) + bank.narrow(i0 + 1, 1).scale(t)
        };
        Ok(log.exp().reshape(&[self.channels, 1, 1]))
    }
}

pub fn check_rate(rate_idx: f64) -> Result<()> {
    if !(0.0..=3.0).contains(&rate_idx) {
        return Err(invalid(format!("rate_idx {rate_idx} outside [0, 3]")));
    }
    Ok(())
}

/// `round(v/q)·q` in eval mode; in train mode straight-through rounding.
pub fn apply_quant(values: &Tensor, q: f32, mode: QuantMode) -> Result<Tensor> {
    if q <= 0.0 || !q.is_finite() {
        return Err(invalid(format!("quantisation step {q} must be positive")));
    }
    Ok(match mode {
        QuantMode::Eval | QuantMode::Train => values.map(move |v| (v / q).round().clamp(-MAX_SYMBOL, MAX_SYMBOL) * q),
    })
}

/// Quantises an already scaled latent. Returns `(symbols, rate_input)`:
/// the symbols feed reconstruction (straight-through in training) and the
/// rate input feeds the likelihood (uniform noise in training).
pub fn quantize<'a, R: Rng>(y: Var<'a>, mode: QuantMode, rng: &mut R) -> (Var<'a>, Var<'a>) {
    match mode {
        QuantMode::Eval => {
            let s = to_symbols(&y.value());
            let s = y.tape().constant(s);
            (s, s)
        }
        QuantMode::Train => {
            let noise = Tensor::from_fn(&y.shape(), |_| rng.gen_range(-0.5f32..0.5));
            (y.round_st(), y + y.tape().constant(noise))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bvc_tensor::Tape;

    #[test]
    fn rounding_definition() {
        let v = Tensor::new(&[3], vec![0.0, 2.4, -1.6]);
        let q = apply_quant(&v, 1.0, QuantMode::Eval).unwrap();
        assert_eq!(q.data(), &[0.0, 2.0, -2.0]);
        assert_eq!(apply_quant(&Tensor::zeros(&[2]), 0.37, QuantMode::Eval).unwrap().max_abs(), 0.0);
        assert!(apply_quant(&v, 0.0, QuantMode::Eval).is_err());
    }

    #[test]
    fn steps_interpolate_log_linearly() {
        let mut s = ParamStore::new(0);
        let bank = QuantBank::new(&mut s, "q", 2, 1.0);
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &s);
        let q0 = bank.step(&f, 0.0).unwrap().value().data()[0] as f64;
        let q1 = bank.step(&f, 1.0).unwrap().value().data()[0] as f64;
        let qh = bank.step(&f, 0.5).unwrap().value().data()[0] as f64;
        assert!((qh - (q0 * q1).sqrt()).abs() < 1e-5);
        assert!(q1 < q0);
        assert!(bank.step(&f, 3.5).is_err());
        assert!(bank.step(&f, 3.0).is_ok());
    }
}

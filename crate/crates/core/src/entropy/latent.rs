//! Hyperprior plus four-group quadtree spatial context for a quantised
//! latent, with an optional extra prior (the temporal prior for contextual
//! latents).
//!
//! Positions are split by their 2×2 phase into groups coded in the order
//! (even, even), (odd, odd), (even, odd), (odd, even). Group `k` is modelled
//! from the hyperprior, the extra prior and the symbols of groups `< k`.

use bvc_tensor::{concat, ParamStore, Tensor, Var};
use rand::Rng;

use super::factorized::Factorized;
use super::laplace::{estimate_bits, LaplaceWindow, P_FLOOR, SCALE_MIN};
use super::range::{RangeDecoder, RangeEncoder};
use crate::error::{corrupt, Result};
use crate::nn::{half, Conv, Fwd, Subpel, LEAKY};
use crate::quant::{quantize, QuantMode};

pub const GROUPS: usize = 4;

pub fn group_of(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 1,
        (0, 1) => 2,
        _ => 3,
    }
}

/// `[1,H,W]` indicator of positions whose group satisfies `pred`.
pub fn group_mask(h: usize, w: usize, pred: impl Fn(usize) -> bool) -> Tensor {
    Tensor::from_fn(&[1, h, w], |i| pred(group_of(i / w, i % w)) as u8 as f32)
}

pub struct LatentPrior {
    channels: usize,
    hyper_channels: usize,
    h_enc1: Conv,
    h_enc2: Conv,
    h_dec1: Subpel,
    h_dec2: Conv,
    fz: Factorized,
    common: Conv,
    ctx: Vec<Conv>,
    out: Vec<Conv>,
}

/// Training-time result of modelling one latent.
pub struct PriorOutput<'a> {
    /// Quantised symbols used for reconstruction (straight-through in training).
    pub symbols: Var<'a>,
    pub bits_latent: Var<'a>,
    pub bits_hyper: Var<'a>,
}

/// Entropy-coded payloads of one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentChunks {
    pub hyper: Vec<u8>,
    pub latent: Vec<u8>,
    pub est_hyper_bits: f64,
    pub est_latent_bits: f64,
}

impl LatentPrior {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hyper: usize, head: usize, extra: usize) -> Self {
        LatentPrior {
            channels,
            hyper_channels: hyper,
            h_enc1: Conv::new(store, &format!("{name}.henc1"), channels, hyper, 3, 1),
            h_enc2: Conv::new(store, &format!("{name}.henc2"), hyper, hyper, 3, 2),
            h_dec1: Subpel::new(store, &format!("{name}.hdec1"), hyper, head, 2),
            h_dec2: Conv::new(store, &format!("{name}.hdec2"), head, head, 3, 1),
            fz: Factorized::new(store, &format!("{name}.fz"), hyper),
            common: Conv::new(store, &format!("{name}.common"), head + extra, head, 1, 1),
            ctx: (1..GROUPS)
                .map(|k| Conv::new(store, &format!("{name}.ctx{k}"), channels, head, 3, 1))
                .collect(),
            out: (0..GROUPS)
                .map(|k| {
                    let cin = if k == 0 { head } else { 2 * head };
                    Conv::with_gain(store, &format!("{name}.out{k}"), cin, 2 * channels, 1, 1, 0.5)
                })
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn hyper_analysis<'a>(&self, f: &Fwd<'a>, y: Var<'a>) -> Var<'a> {
        self.h_enc2.f(f, self.h_enc1.f(f, y).leaky_relu(LEAKY))
    }

    /// Shared prior features from the quantised hyper latent.
    fn common<'a>(&self, f: &Fwd<'a>, z_hat: Var<'a>, extra: Option<Var<'a>>, h: usize, w: usize) -> Var<'a> {
        let hd = self.h_dec1.f(f, z_hat).leaky_relu(LEAKY).crop(h, w);
        let hd = self.h_dec2.f(f, hd).leaky_relu(LEAKY);
        let x = match extra {
            Some(e) => concat(&[hd, e]),
            None => hd,
        };
        self.common.f(f, x).leaky_relu(LEAKY)
    }

    /// Laplace parameters `(mu, b)` for group `k` given symbols in which
    /// every position of groups `>= k` is zero.
    fn group_params<'a>(&self, f: &Fwd<'a>, common: Var<'a>, known: Var<'a>, k: usize) -> (Var<'a>, Var<'a>) {
        let x = if k == 0 {
            common
        } else {
            concat(&[common, self.ctx[k - 1].f(f, known).leaky_relu(LEAKY)])
        };
        let p = self.out[k].f(f, x);
        let c = self.channels;
        (p.narrow(0, c), p.narrow(c, c).softplus().lower_bound(SCALE_MIN))
    }

    /// Models a scaled (not yet rounded) latent for training or analysis.
    pub fn forward<'a, R: Rng>(
        &self,
        f: &Fwd<'a>,
        y: Var<'a>,
        extra: Option<Var<'a>>,
        mode: QuantMode,
        rng: &mut R,
    ) -> PriorOutput<'a> {
        let (_, h, w) = y.dims3();
        let z = self.hyper_analysis(f, y);
        let (z_hat, z_rate) = quantize(z, mode, rng);
        let bits_hyper = self.fz.bits(f, z_rate);
        let common = self.common(f, z_hat, extra, h, w);
        let (y_hat, y_rate) = quantize(y, mode, rng);
        let mut bits = None;
        for k in 0..GROUPS {
            let known = y_hat * f.c(group_mask(h, w, |g| g < k));
            let (mu, b) = self.group_params(f, common, known, k);
            let gb = (y_rate.laplace_bits(mu, b, P_FLOOR) * f.c(group_mask(h, w, |g| g == k))).sum();
            bits = Some(match bits {
                None => gb,
                Some(acc) => acc + gb,
            });
        }
        PriorOutput {
            symbols: y_hat,
            bits_latent: bits.unwrap(),
            bits_hyper,
        }
    }

    /// Entropy codes integer symbols `y_sym` (the encoder's rounded scaled
    /// latent). `y_scaled` is the unrounded latent the hyper analysis sees.
    pub fn encode(&self, f: &Fwd<'_>, y_scaled: &Tensor, y_sym: &Tensor, extra: Option<Var<'_>>) -> LatentChunks {
        let z = self.hyper_analysis(f, f.c(y_scaled.clone())).value();
        let z_sym = crate::quant::to_symbols(&z);
        let (hyper, est_hyper_bits) = self.fz.encode(f, &z_sym);
        let (_, h, w) = y_sym.dims3();
        let common = self.common(f, f.c(z_sym), extra, h, w);
        let mut enc = RangeEncoder::new();
        let mut est = 0.0;
        for k in 0..GROUPS {
            let known = f.c(known_symbols(y_sym, k));
            let (mu, b) = self.group_params(f, common, known, k);
            let (mu, b) = (mu.value(), b.value());
            for i in group_positions(y_sym, k) {
                let (s, m, bb) = (y_sym.data()[i] as i32, mu.data()[i], b.data()[i]);
                LaplaceWindow::new(m, bb).encode(&mut enc, s);
                est += estimate_bits(s, m, bb);
            }
        }
        LatentChunks {
            hyper,
            latent: enc.finish(),
            est_hyper_bits,
            est_latent_bits: est,
        }
    }

    /// Inverse of [`Self::encode`] for a latent of spatial size `h × w`.
    pub fn decode(&self, f: &Fwd<'_>, hyper: &[u8], latent: &[u8], h: usize, w: usize, extra: Option<Var<'_>>) -> Result<Tensor> {
        let z_sym = self
            .fz
            .decode(f, hyper, [self.hyper_channels, half(h), half(w)])
            .ok_or_else(|| corrupt(None, "bad escape in hyper latent"))?;
        let common = self.common(f, f.c(z_sym), extra, h, w);
        let c = self.channels;
        let mut y = vec![0.0f32; c * h * w];
        let mut dec = RangeDecoder::new(latent);
        for k in 0..GROUPS {
            let known = f.c(known_symbols(&Tensor::new(&[c, h, w], y.clone()), k));
            let (mu, b) = self.group_params(f, common, known, k);
            let (mu, b) = (mu.value(), b.value());
            let shape = [c, h, w];
            for i in group_positions_shape(shape, k) {
                let s = LaplaceWindow::new(mu.data()[i], b.data()[i])
                    .decode(&mut dec)
                    .ok_or_else(|| corrupt(None, "bad escape in latent"))?;
                y[i] = s as f32;
            }
        }
        Ok(Tensor::new(&[c, h, w], y))
    }
}

/// Symbols of groups `< k`, zero elsewhere. Encoder and decoder build the
/// context input through this one function.
pub fn known_symbols(y: &Tensor, k: usize) -> Tensor {
    let (_, h, w) = y.dims3();
    let hw = h * w;
    Tensor::from_fn(y.shape(), |i| {
        let p = i % hw;
        if group_of(p / w, p % w) < k {
            y.data()[i]
        } else {
            0.0
        }
    })
}

/// Flat indices of group `k`, channel-major then raster order.
fn group_positions(t: &Tensor, k: usize) -> impl Iterator<Item = usize> {
    let (c, h, w) = t.dims3();
    group_positions_shape([c, h, w], k)
}

fn group_positions_shape(shape: [usize; 3], k: usize) -> impl Iterator<Item = usize> {
    let [c, h, w] = shape;
    (0..c).flat_map(move |ch| {
        (0..h * w)
            .filter(move |&p| group_of(p / w, p % w) == k)
            .map(move |p| ch * h * w + p)
    })
}

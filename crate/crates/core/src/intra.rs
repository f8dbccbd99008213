//! Hyperprior image codec for I-frames. Latents sit at 1/8 resolution.

use bvc_tensor::{ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::entropy::LatentPrior;
use crate::nn::{Conv, Fwd, ResBlock, Subpel, LEAKY};
use crate::quant::QuantBank;

/// Spatial downsampling factor of the I-frame latent.
pub const INTRA_STRIDE: usize = 8;

pub struct IntraCodec {
    enc: [Conv; 3],
    enc_res: [ResBlock; 2],
    dec: [Subpel; 3],
    dec_res: [ResBlock; 2],
    out: Conv,
    pub q_enc: QuantBank,
    pub q_dec: QuantBank,
    pub prior: LatentPrior,
}

impl IntraCodec {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let (m, c) = (cfg.i_mid, cfg.c_i);
        let out = Conv::new(store, "intra.out", m, 3, 3, 1);
        store.set_value(out.bias_id(), Tensor::full(&[3], 0.5));
        IntraCodec {
            enc: [
                Conv::new(store, "intra.enc0", 3, m, 3, 2),
                Conv::new(store, "intra.enc1", m, m, 3, 2),
                Conv::new(store, "intra.enc2", m, c, 3, 2),
            ],
            enc_res: [ResBlock::new(store, "intra.eres0", m), ResBlock::new(store, "intra.eres1", m)],
            dec: [
                Subpel::new(store, "intra.dec0", c, m, 2),
                Subpel::new(store, "intra.dec1", m, m, 2),
                Subpel::new(store, "intra.dec2", m, m, 2),
            ],
            dec_res: [ResBlock::new(store, "intra.dres0", m), ResBlock::new(store, "intra.dres1", m)],
            out,
            q_enc: QuantBank::new(store, "intra.q_enc", c, 0.1),
            q_dec: QuantBank::new(store, "intra.q_dec", c, 0.1),
            prior: LatentPrior::new(store, "intra.prior", c, cfg.c_z, cfg.head_ch, 0),
        }
    }

    pub fn analysis<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Var<'a> {
        let mut e = self.enc[0].f(f, x).leaky_relu(LEAKY);
        e = self.enc_res[0].f(f, e);
        e = self.enc[1].f(f, e).leaky_relu(LEAKY);
        e = self.enc_res[1].f(f, e);
        self.enc[2].f(f, e)
    }

    pub fn synthesis<'a>(&self, f: &Fwd<'a>, y_hat: Var<'a>) -> Var<'a> {
        let mut d = self.dec[0].f(f, y_hat).leaky_relu(LEAKY);
        d = self.dec_res[0].f(f, d);
        d = self.dec[1].f(f, d).leaky_relu(LEAKY);
        d = self.dec_res[1].f(f, d);
        d = self.dec[2].f(f, d).leaky_relu(LEAKY);
        self.out.f(f, d).clamp_st(0.0, 1.0)
    }
}

//! Conditional frame coding: the six temporal contexts enter the analysis
//! and synthesis transforms by channel concatenation at matching
//! resolutions. The synthesis output after the two U-blocks is the
//! reference feature handed to later frames.

use bvc_tensor::{concat, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::context::Contexts;
use crate::entropy::{LatentPrior, TemporalPrior};
use crate::error::{invalid, Result};
use crate::nn::{Conv, Fwd, ResBlock, Subpel, UBlock, LEAKY};
use crate::quant::QuantBank;

pub struct ContextualCodec {
    enc0: Conv,
    res0: ResBlock,
    enc1: Conv,
    res1: ResBlock,
    enc2: Conv,
    enc3: Conv,
    dec0: Subpel,
    dec1: Subpel,
    dfuse2: Conv,
    dres2: ResBlock,
    dec2: Subpel,
    dfuse1: Conv,
    dec3: Subpel,
    dfuse0: Conv,
    u1: UBlock,
    u2: UBlock,
    out: Conv,
    pub q_enc: QuantBank,
    pub q_dec: QuantBank,
    pub prior: LatentPrior,
    pub temporal: TemporalPrior,
}

fn check_res(x: Var<'_>, c: Var<'_>, what: &str) -> Result<()> {
    let (_, h, w) = x.dims3();
    let (_, ch, cw) = c.dims3();
    if (h, w) != (ch, cw) {
        return Err(invalid(format!("{what}: context {ch}x{cw} vs stage {h}x{w}")));
    }
    Ok(())
}

impl ContextualCodec {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let (c, mid) = (cfg.c_ref, cfg.y_mid);
        let out = Conv::new(store, "y.out", c, 3, 3, 1);
        store.set_value(out.bias_id(), Tensor::full(&[3], 0.5));
        ContextualCodec {
            enc0: Conv::new(store, "y.enc0", 3 + 2 * c, mid, 3, 2),
            res0: ResBlock::new(store, "y.res0", mid),
            enc1: Conv::new(store, "y.enc1", mid + 2 * c, mid, 3, 2),
            res1: ResBlock::new(store, "y.res1", mid),
            enc2: Conv::new(store, "y.enc2", mid + 2 * c, mid, 3, 2),
            enc3: Conv::new(store, "y.enc3", mid, cfg.c_y, 3, 2),
            dec0: Subpel::new(store, "y.dec0", cfg.c_y, mid, 2),
            dec1: Subpel::new(store, "y.dec1", mid, mid, 2),
            dfuse2: Conv::new(store, "y.dfuse2", mid + 2 * c, mid, 3, 1),
            dres2: ResBlock::new(store, "y.dres2", mid),
            dec2: Subpel::new(store, "y.dec2", mid, mid, 2),
            dfuse1: Conv::new(store, "y.dfuse1", mid + 2 * c, mid, 3, 1),
            dec3: Subpel::new(store, "y.dec3", mid, c, 2),
            dfuse0: Conv::new(store, "y.dfuse0", 3 * c, c, 3, 1),
            u1: UBlock::new(store, "y.u1", c),
            u2: UBlock::new(store, "y.u2", c),
            out,
            q_enc: QuantBank::new(store, "y.q_enc", cfg.c_y, 1.0),
            q_dec: QuantBank::new(store, "y.q_dec", cfg.c_y, 1.0),
            prior: LatentPrior::new(store, "y.prior", cfg.c_y, cfg.c_z, cfg.head_ch, cfg.c_y),
            temporal: TemporalPrior::new(store, "y.tprior", c, cfg.c_y),
        }
    }

    /// Unscaled latent `[C_y, H/16, W/16]` of frame `x: [3,H,W]`.
    pub fn analysis<'a>(&self, f: &Fwd<'a>, x: Var<'a>, cf: &Contexts<'a>, cb: &Contexts<'a>) -> Result<Var<'a>> {
        check_res(x, cf.c0, "encoder input")?;
        check_res(x, cb.c0, "encoder input")?;
        let e = self.enc0.f(f, concat(&[x, cf.c0, cb.c0])).leaky_relu(LEAKY);
        let e = self.res0.f(f, e);
        check_res(e, cf.c1, "encoder H/2")?;
        let e = self.enc1.f(f, concat(&[e, cf.c1, cb.c1])).leaky_relu(LEAKY);
        let e = self.res1.f(f, e);
        check_res(e, cf.c2, "encoder H/4")?;
        let e = self.enc2.f(f, concat(&[e, cf.c2, cb.c2])).leaky_relu(LEAKY);
        Ok(self.enc3.f(f, e))
    }

    /// Returns `(x_hat, F_hat)` from the dequantised latent.
    pub fn synthesis<'a>(&self, f: &Fwd<'a>, y_hat: Var<'a>, cf: &Contexts<'a>, cb: &Contexts<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let d = self.dec0.f(f, y_hat).leaky_relu(LEAKY);
        let d = self.dec1.f(f, d).leaky_relu(LEAKY);
        check_res(d, cf.c2, "decoder H/4")?;
        let d = self.dfuse2.f(f, concat(&[d, cf.c2, cb.c2])).leaky_relu(LEAKY);
        let d = self.dres2.f(f, d);
        let d = self.dec2.f(f, d).leaky_relu(LEAKY);
        check_res(d, cf.c1, "decoder H/2")?;
        let d = self.dfuse1.f(f, concat(&[d, cf.c1, cb.c1])).leaky_relu(LEAKY);
        let d = self.dec3.f(f, d).leaky_relu(LEAKY);
        check_res(d, cf.c0, "decoder H")?;
        let d = self.dfuse0.f(f, concat(&[d, cf.c0, cb.c0]));
        let feat = self.u2.f(f, self.u1.f(f, d));
        let x_hat = self.out.f(f, feat.leaky_relu(LEAKY)).clamp_st(0.0, 1.0);
        Ok((x_hat, feat))
    }
}

//! Joint coding of the two motion vector differences.
//!
//! The analysis transform runs to H/4, where a motion fusion adaptor (MFA)
//! chosen by the reference case mixes in the motion-difference contexts of
//! B-frame references, then continues to H/16. The synthesis transform
//! mirrors this with its own four adaptors and splits into one head per
//! direction. The feature entering each head's final sub-pixel layer is the
//! context this frame leaves for its successors.

use bvc_tensor::{concat, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::entropy::LatentPrior;
use crate::error::{invalid, Result};
use crate::gop::RefCase;
use crate::nn::{Conv, DepthBlock, Fwd, Subpel, LEAKY};
use crate::quant::QuantBank;

/// Features `(M_f, M_b)` at quarter resolution left by a decoded B-frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionDiffContext {
    pub m_f: Tensor,
    pub m_b: Tensor,
}

pub struct MotionCodec {
    enc1: Conv,
    enc2: Conv,
    mfa_enc: Vec<DepthBlock>,
    enc3: Conv,
    enc4: Conv,
    dec1: Subpel,
    dec2: Subpel,
    mfa_dec: Vec<DepthBlock>,
    head_f: Conv,
    head_b: Conv,
    out_f: Subpel,
    out_b: Subpel,
    pub q_enc: QuantBank,
    pub q_dec: QuantBank,
    pub prior: LatentPrior,
    c_mc: usize,
}

/// Result of the synthesis transform.
pub struct MotionRecon<'a> {
    pub rhat_tf: Var<'a>,
    pub rhat_tb: Var<'a>,
    pub m_f: Var<'a>,
    pub m_b: Var<'a>,
}

impl MotionCodec {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let mid = cfg.mv_mid;
        let mfa = |store: &mut ParamStore, side: &str| -> Vec<DepthBlock> {
            RefCase::ALL
                .iter()
                .map(|c| {
                    // Context inputs start muted.
                    let b = DepthBlock::new(store, &format!("mv.{side}.mfa{}", c.index()), mid + 2 * c.b_refs() * cfg.c_mc, mid);
                    b.mute_inputs_from(store, mid);
                    b
                })
                .collect()
        };
        MotionCodec {
            enc1: Conv::new(store, "mv.enc1", 4, mid, 3, 2),
            enc2: Conv::new(store, "mv.enc2", mid, mid, 3, 2),
            mfa_enc: mfa(store, "enc"),
            enc3: Conv::new(store, "mv.enc3", mid, mid, 3, 2),
            enc4: Conv::new(store, "mv.enc4", mid, cfg.c_m, 3, 2),
            dec1: Subpel::new(store, "mv.dec1", cfg.c_m, mid, 2),
            dec2: Subpel::new(store, "mv.dec2", mid, mid, 2),
            mfa_dec: mfa(store, "dec"),
            head_f: Conv::new(store, "mv.head_f", mid, cfg.c_mc, 3, 1),
            head_b: Conv::new(store, "mv.head_b", mid, cfg.c_mc, 3, 1),
            out_f: Subpel::zeros(store, "mv.out_f", cfg.c_mc, 2, 4),
            out_b: Subpel::zeros(store, "mv.out_b", cfg.c_mc, 2, 4),
            q_enc: QuantBank::new(store, "mv.q_enc", cfg.c_m, 0.5),
            q_dec: QuantBank::new(store, "mv.q_dec", cfg.c_m, 0.5),
            prior: LatentPrior::new(store, "mv.prior", cfg.c_m, cfg.c_z, cfg.head_ch, 0),
            c_mc: cfg.c_mc,
        }
    }

    /// Orders the available reference contexts as the adaptor of `case`
    /// expects them: forward reference `(M_f, M_b)` then backward reference.
    pub fn context_list<'a>(
        &self,
        case: RefCase,
        fwd: Option<(Var<'a>, Var<'a>)>,
        bwd: Option<(Var<'a>, Var<'a>)>,
    ) -> Result<Vec<Var<'a>>> {
        if fwd.is_some() != case.fwd_is_b() || bwd.is_some() != case.bwd_is_b() {
            return Err(invalid(format!("motion contexts do not match reference case {case}")));
        }
        let mut v = Vec::new();
        for (a, b) in fwd.into_iter().chain(bwd) {
            if a.dims3().0 != self.c_mc || b.dims3().0 != self.c_mc {
                return Err(invalid("motion context channel count mismatch"));
            }
            v.push(a);
            v.push(b);
        }
        Ok(v)
    }

    fn fuse<'a>(f: &Fwd<'a>, mfa: &DepthBlock, x: Var<'a>, ctxs: &[Var<'a>]) -> Result<Var<'a>> {
        let (_, h, w) = x.dims3();
        for c in ctxs {
            let (_, ch, cw) = c.dims3();
            if (ch, cw) != (h, w) {
                return Err(invalid(format!("motion context {ch}x{cw} at fusion stage {h}x{w}")));
            }
        }
        let mut parts = vec![x];
        parts.extend_from_slice(ctxs);
        Ok(mfa.f(f, concat(&parts)))
    }

    /// `r`: channel-concatenated MVDs `[4,H,W]`, `H,W` multiples of 16.
    pub fn analysis<'a>(&self, f: &Fwd<'a>, r: Var<'a>, ctxs: &[Var<'a>], case: RefCase) -> Result<Var<'a>> {
        if ctxs.len() != 2 * case.b_refs() {
            return Err(invalid(format!("case {case} needs {} motion contexts", 2 * case.b_refs())));
        }
        let x = self.enc1.f(f, r).leaky_relu(LEAKY);
        let x = self.enc2.f(f, x).leaky_relu(LEAKY);
        let x = Self::fuse(f, &self.mfa_enc[case.index()], x, ctxs)?;
        let x = self.enc3.f(f, x).leaky_relu(LEAKY);
        Ok(self.enc4.f(f, x))
    }

    /// `m_hat`: dequantised latent.
    pub fn synthesis<'a>(&self, f: &Fwd<'a>, m_hat: Var<'a>, ctxs: &[Var<'a>], case: RefCase) -> Result<MotionRecon<'a>> {
        if ctxs.len() != 2 * case.b_refs() {
            return Err(invalid(format!("case {case} needs {} motion contexts", 2 * case.b_refs())));
        }
        let x = self.dec1.f(f, m_hat).leaky_relu(LEAKY);
        let x = self.dec2.f(f, x).leaky_relu(LEAKY);
        let x = Self::fuse(f, &self.mfa_dec[case.index()], x, ctxs)?.leaky_relu(LEAKY);
        let m_f = self.head_f.f(f, x);
        let m_b = self.head_b.f(f, x);
        Ok(MotionRecon {
            rhat_tf: self.out_f.f(f, m_f.leaky_relu(LEAKY)),
            rhat_tb: self.out_b.f(f, m_b.leaky_relu(LEAKY)),
            m_f,
            m_b,
        })
    }
}

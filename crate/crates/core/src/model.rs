//! The assembled codec and the per-frame passes shared by training, the
//! encoder and the decoder.
//!
//! Everything the decoder computes is derived from decoded symbols and
//! decoded references through the functions in this file, and the encoder
//! reconstructs through the very same functions. That is what keeps the two
//! sides bitwise identical.

use std::io::{Read, Write};
use std::path::Path;

use bvc_tensor::{concat, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::{KvFile, ModelConfig};
use crate::context::{ContextMiner, Contexts};
use crate::contextual::ContextualCodec;
use crate::entropy::LatentChunks;
use crate::error::{invalid, CodecError, Result};
use crate::gop::RefCase;
use crate::intra::{IntraCodec, INTRA_STRIDE};
use crate::motion::{make_predictions_var, FlowEstimator};
use crate::motion_codec::{MotionCodec, MotionDiffContext};
use crate::nn::{DepthBlock, Fwd};
use crate::quant::{to_symbols, QuantMode};

/// Training-only network that blends the two motion-compensated
/// predictions with a per-pixel mask.
pub struct MaskNet {
    b1: DepthBlock,
    b2: DepthBlock,
}

impl MaskNet {
    pub fn new(store: &mut ParamStore, c: usize) -> Self {
        MaskNet {
            b1: DepthBlock::new(store, "mask.b1", 6, c),
            b2: DepthBlock::new(store, "mask.b2", c, 1),
        }
    }

    pub fn mask<'a>(&self, f: &Fwd<'a>, xf: Var<'a>, xb: Var<'a>) -> Var<'a> {
        self.b2.f(f, self.b1.f(f, concat(&[xf, xb]))).sigmoid()
    }

    /// `m·x_f + (1-m)·x_b` with the learned mask.
    pub fn merge<'a>(&self, f: &Fwd<'a>, xf: Var<'a>, xb: Var<'a>) -> Var<'a> {
        merge_with_mask(self.mask(f, xf, xb), xf, xb)
    }
}

pub fn merge_with_mask<'a>(m: Var<'a>, xf: Var<'a>, xb: Var<'a>) -> Var<'a> {
    xb + m * (xf - xb)
}

/// Parameter-name prefixes of the trainable groups.
pub const INTER_PREFIXES: [&str; 3] = ["flow.", "mv.", "mask."];
pub const RECON_PREFIXES: [&str; 2] = ["ctx.", "y."];
pub const INTRA_PREFIX: &str = "intra.";

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub flow: FlowEstimator,
    pub mv: MotionCodec,
    pub ctx: ContextMiner,
    pub y: ContextualCodec,
    pub intra: IntraCodec,
    pub mask: MaskNet,
}

/// What a reference contributes, as graph values.
#[derive(Clone, Copy)]
pub struct RefView<'a> {
    pub x_hat: Var<'a>,
    pub feature: Var<'a>,
    pub motion_ctx: Option<(Var<'a>, Var<'a>)>,
    pub y_sym: Option<Var<'a>>,
}

impl RefView<'_> {
    pub fn is_b(&self) -> bool {
        self.y_sym.is_some()
    }
}

/// Geometry and coding parameters of one B-frame.
#[derive(Clone, Copy, Debug)]
pub struct BFrameSpec {
    pub d_f: usize,
    pub d_b: usize,
    pub layer: usize,
    pub case: RefCase,
    pub rate_idx: f64,
}

/// Reconstruction state a B-frame leaves behind.
#[derive(Clone, Debug)]
pub struct BRecon {
    pub x_hat: Tensor,
    pub f_hat: Tensor,
    pub motion_ctx: MotionDiffContext,
    pub y_sym: Tensor,
    pub vhat_tf: Tensor,
    pub vhat_tb: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BChunks {
    pub motion: LatentChunks,
    pub contextual: LatentChunks,
}

/// Differentiable quantities of one training pass over a B-frame.
pub struct BTrainOut<'a> {
    pub x_hat: Var<'a>,
    pub f_hat: Var<'a>,
    pub m_f: Var<'a>,
    pub m_b: Var<'a>,
    pub y_sym: Var<'a>,
    pub vhat_tf: Var<'a>,
    pub vhat_tb: Var<'a>,
    /// Distortion of the mask-merged motion-compensated prediction.
    pub d_m: Var<'a>,
    pub d_y: Var<'a>,
    pub bits_m: Var<'a>,
    pub bits_y: Var<'a>,
    /// Per-direction prediction distortions (diagnostics).
    pub d_pred_f: f64,
    pub d_pred_b: f64,
}

/// Options for [`Model::b_forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct BTrainOptions {
    /// Replace the motion-difference contexts of B references with zeros.
    pub zero_motion_contexts: bool,
    /// Cut the graph between the motion path and the reconstruction path.
    pub detach_motion: bool,
}

pub struct IntraTrainOut<'a> {
    pub x_hat: Var<'a>,
    pub d: Var<'a>,
    pub bits: Var<'a>,
}

fn dims_ok(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 3 || x.shape()[0] != 3 {
        return Err(invalid(format!("frame must be [3,H,W], got {:?}", x.shape())));
    }
    let (_, h, w) = x.dims3();
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(invalid(format!("frame {h}x{w} is not padded to a multiple of 16")));
    }
    Ok((h, w))
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new(seed);
        let flow = FlowEstimator::new(&mut store, cfg.flow_ch);
        let mv = MotionCodec::new(&mut store, &cfg);
        let ctx = ContextMiner::new(&mut store, &cfg);
        let y = ContextualCodec::new(&mut store, &cfg);
        let intra = IntraCodec::new(&mut store, &cfg);
        let mask = MaskNet::new(&mut store, cfg.c_ref);
        Model {
            cfg,
            store,
            flow,
            mv,
            ctx,
            y,
            intra,
            mask,
        }
    }

    /// CRC-32 over every parameter name and value; stored in bitstreams so a
    /// decoder refuses streams produced by different weights.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for id in self.store.ids() {
            h.update(self.store.name(id).as_bytes());
            for v in self.store.value(id).data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let cfg = crate::config::CodecConfig {
            model: self.cfg.clone(),
            ..Default::default()
        };
        let text = cfg.to_kv_string();
        w.write_all(b"BVCM")?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        self.store.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"BVCM" {
            return Err(CodecError::Config(format!("{}: not a model checkpoint", path.display())));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| CodecError::Config("checkpoint header is not utf-8".into()))?;
        let cfg = crate::config::CodecConfig::from_kv(&KvFile::parse(&text)?)?;
        let mut model = Model::new(cfg.model, 0);
        model.store.read_from(&mut r)?;
        Ok(model)
    }

    // ---- I-frames ----

    pub fn intra_forward<'a, R: Rng>(&self, f: &Fwd<'a>, x: Var<'a>, rate_idx: f64, mode: QuantMode, rng: &mut R) -> Result<IntraTrainOut<'a>> {
        let q_enc = self.intra.q_enc.step(f, rate_idx)?;
        let q_dec = self.intra.q_dec.step(f, rate_idx)?;
        let y = self.intra.analysis(f, x).div(q_enc);
        let p = self.intra.prior.forward(f, y, None, mode, rng);
        let x_hat = self.intra.synthesis(f, p.symbols.mul(q_dec));
        Ok(IntraTrainOut {
            x_hat,
            d: x_hat.mse(x),
            bits: p.bits_latent + p.bits_hyper,
        })
    }

    fn intra_recon(&self, f: &Fwd<'_>, y_sym: &Tensor, rate_idx: f64) -> Result<Tensor> {
        let q_dec = self.intra.q_dec.step(f, rate_idx)?;
        Ok(self.intra.synthesis(f, f.c(y_sym.clone()).mul(q_dec)).value())
    }

    /// The reconstruction [`Self::intra_encode`] would produce, without
    /// running the entropy coder.
    pub fn intra_reconstruct(&self, x: &Tensor, rate_idx: f64) -> Result<Tensor> {
        dims_ok(x)?;
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &self.store);
        let q_enc = self.intra.q_enc.step(&f, rate_idx)?;
        let y = self.intra.analysis(&f, f.c(x.clone())).div(q_enc).value();
        self.intra_recon(&f, &to_symbols(&y), rate_idx)
    }

    /// Codes a padded frame; returns the chunks and the reconstruction.
    pub fn intra_encode(&self, x: &Tensor, rate_idx: f64) -> Result<(LatentChunks, Tensor)> {
        dims_ok(x)?;
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &self.store);
        let q_enc = self.intra.q_enc.step(&f, rate_idx)?;
        let y = self.intra.analysis(&f, f.c(x.clone())).div(q_enc).value();
        let y_sym = to_symbols(&y);
        let chunks = self.intra.prior.encode(&f, &y, &y_sym, None);
        let x_hat = self.intra_recon(&f, &y_sym, rate_idx)?;
        Ok((chunks, x_hat))
    }

    pub fn intra_decode(&self, hyper: &[u8], latent: &[u8], h: usize, w: usize, rate_idx: f64) -> Result<Tensor> {
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &self.store);
        let y_sym = self.intra.prior.decode(&f, hyper, latent, h / INTRA_STRIDE, w / INTRA_STRIDE, None)?;
        self.intra_recon(&f, &y_sym, rate_idx)
    }

    /// Reference feature of a reconstructed I-frame.
    pub fn lift(&self, x_hat: &Tensor) -> Tensor {
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &self.store);
        self.ctx.lift_iframe(&f, f.c(x_hat.clone())).value()
    }

    // ---- B-frames: shared pieces ----

    /// Motion predictions from flows estimated between the two references.
    pub fn predictions<'a>(&self, f: &Fwd<'a>, fref: &RefView<'a>, bref: &RefView<'a>, s: &BFrameSpec) -> Result<(Var<'a>, Var<'a>)> {
        let v_bf = self.flow.estimate(f, bref.x_hat, fref.x_hat)?;
        let v_fb = self.flow.estimate(f, fref.x_hat, bref.x_hat)?;
        make_predictions_var(v_bf, v_fb, s.d_f, s.d_b)
    }

    fn motion_contexts<'a>(&self, fref: &RefView<'a>, bref: &RefView<'a>, s: &BFrameSpec, zero: bool) -> Result<Vec<Var<'a>>> {
        let z = |c: Option<(Var<'a>, Var<'a>)>| {
            c.map(|(a, b)| {
                if zero {
                    let t = a.tape();
                    (t.constant(Tensor::zeros(&a.shape())), t.constant(Tensor::zeros(&b.shape())))
                } else {
                    (a, b)
                }
            })
        };
        self.mv.context_list(s.case, z(fref.motion_ctx), z(bref.motion_ctx))
    }

    fn check_refs(&self, fref: &RefView<'_>, bref: &RefView<'_>, s: &BFrameSpec) -> Result<()> {
        if fref.is_b() != s.case.fwd_is_b() || bref.is_b() != s.case.bwd_is_b() {
            return Err(invalid(format!("references do not match case {}", s.case)));
        }
        Ok(())
    }

    fn contexts<'a>(&self, f: &Fwd<'a>, fref: &RefView<'a>, bref: &RefView<'a>, vf: Var<'a>, vb: Var<'a>, layer: usize) -> Result<(Contexts<'a>, Contexts<'a>)> {
        Ok((self.ctx.mine(f, fref.feature, vf, layer)?, self.ctx.mine(f, bref.feature, vb, layer)?))
    }

    fn temporal_prior<'a>(&self, f: &Fwd<'a>, cf: &Contexts<'a>, cb: &Contexts<'a>, fref: &RefView<'a>, bref: &RefView<'a>, s: &BFrameSpec, hw: (usize, usize)) -> Result<Var<'a>> {
        self.y.temporal.forward(f, cf.c2, cb.c2, fref.y_sym, bref.y_sym, s.case, hw)
    }

    // ---- B-frames: training ----

    /// One differentiable pass over a B-frame.
    #[allow(clippy::too_many_arguments)]
    pub fn b_forward<'a, R: Rng>(
        &self,
        f: &Fwd<'a>,
        x: Var<'a>,
        fref: &RefView<'a>,
        bref: &RefView<'a>,
        s: &BFrameSpec,
        mode: QuantMode,
        opts: BTrainOptions,
        rng: &mut R,
    ) -> Result<BTrainOut<'a>> {
        self.check_refs(fref, bref, s)?;
        let (_, h, w) = x.dims3();
        let v_tf = self.flow.estimate(f, x, fref.x_hat)?;
        let v_tb = self.flow.estimate(f, x, bref.x_hat)?;
        let (pred_tf, pred_tb) = self.predictions(f, fref, bref, s)?;
        let r = concat(&[v_tf - pred_tf, v_tb - pred_tb]);
        let mctx = self.motion_contexts(fref, bref, s, opts.zero_motion_contexts)?;
        let q_enc = self.mv.q_enc.step(f, s.rate_idx)?;
        let q_dec = self.mv.q_dec.step(f, s.rate_idx)?;
        let m = self.mv.analysis(f, r, &mctx, s.case)?.div(q_enc);
        let pm = self.mv.prior.forward(f, m, None, mode, rng);
        let rec = self.mv.synthesis(f, pm.symbols.mul(q_dec), &mctx, s.case)?;
        let vhat_tf = rec.rhat_tf + pred_tf;
        let vhat_tb = rec.rhat_tb + pred_tb;
        let xf = fref.x_hat.warp(vhat_tf);
        let xb = bref.x_hat.warp(vhat_tb);
        let d_pred_f = xf.value().sub(&x.value()).map(|v| v * v).mean();
        let d_pred_b = xb.value().sub(&x.value()).map(|v| v * v).mean();
        let d_m = self.mask.merge(f, xf, xb).mse(x);

        let (vf, vb) = if opts.detach_motion {
            (vhat_tf.detach(), vhat_tb.detach())
        } else {
            (vhat_tf, vhat_tb)
        };
        let (cf, cb) = self.contexts(f, fref, bref, vf, vb, s.layer)?;
        let q_enc_y = self.y.q_enc.step(f, s.rate_idx)?;
        let q_dec_y = self.y.q_dec.step(f, s.rate_idx)?;
        let y = self.y.analysis(f, x, &cf, &cb)?.div(q_enc_y);
        let tp = self.temporal_prior(f, &cf, &cb, fref, bref, s, (h / 16, w / 16))?;
        let py = self.y.prior.forward(f, y, Some(tp), mode, rng);
        let (x_hat, f_hat) = self.y.synthesis(f, py.symbols.mul(q_dec_y), &cf, &cb)?;
        Ok(BTrainOut {
            x_hat,
            f_hat,
            m_f: rec.m_f,
            m_b: rec.m_b,
            y_sym: py.symbols,
            vhat_tf,
            vhat_tb,
            d_m,
            d_y: x_hat.mse(x),
            bits_m: pm.bits_latent + pm.bits_hyper,
            bits_y: py.bits_latent + py.bits_hyper,
            d_pred_f,
            d_pred_b,
        })
    }

    // ---- B-frames: coding ----

    fn motion_recon<'a>(&self, f: &Fwd<'a>, m_sym: &Tensor, mctx: &[Var<'a>], preds: (Var<'a>, Var<'a>), s: &BFrameSpec) -> Result<(Var<'a>, Var<'a>, MotionDiffContext)> {
        let q_dec = self.mv.q_dec.step(f, s.rate_idx)?;
        let rec = self.mv.synthesis(f, f.c(m_sym.clone()).mul(q_dec), mctx, s.case)?;
        let ctx = MotionDiffContext {
            m_f: rec.m_f.value(),
            m_b: rec.m_b.value(),
        };
        Ok((rec.rhat_tf + preds.0, rec.rhat_tb + preds.1, ctx))
    }

    fn frame_recon<'a>(&self, f: &Fwd<'a>, y_sym: &Tensor, cf: &Contexts<'a>, cb: &Contexts<'a>, s: &BFrameSpec) -> Result<(Tensor, Tensor)> {
        let q_dec = self.y.q_dec.step(f, s.rate_idx)?;
        let (x_hat, f_hat) = self.y.synthesis(f, f.c(y_sym.clone()).mul(q_dec), cf, cb)?;
        Ok((x_hat.value(), f_hat.value()))
    }

    /// Codes a padded B-frame against decoded references.
    pub fn b_encode<'a>(&self, f: &Fwd<'a>, x: &Tensor, fref: &RefView<'a>, bref: &RefView<'a>, s: &BFrameSpec) -> Result<(BChunks, BRecon)> {
        self.b_encode_ablated(f, x, fref, bref, s, false)
    }

    /// [`Self::b_encode`] with the option of zeroing the motion-difference
    /// contexts of B-frame references. Zeroed streams are for measuring
    /// bits only; the decoder always uses the real contexts.
    pub fn b_encode_ablated<'a>(
        &self,
        f: &Fwd<'a>,
        x: &Tensor,
        fref: &RefView<'a>,
        bref: &RefView<'a>,
        s: &BFrameSpec,
        zero_motion_contexts: bool,
    ) -> Result<(BChunks, BRecon)> {
        let (h, w) = dims_ok(x)?;
        self.check_refs(fref, bref, s)?;
        let xv = f.c(x.clone());
        let v_tf = self.flow.estimate(f, xv, fref.x_hat)?;
        let v_tb = self.flow.estimate(f, xv, bref.x_hat)?;
        let preds = self.predictions(f, fref, bref, s)?;
        let r = concat(&[v_tf - preds.0, v_tb - preds.1]);
        let mctx = self.motion_contexts(fref, bref, s, zero_motion_contexts)?;
        let q_enc = self.mv.q_enc.step(f, s.rate_idx)?;
        let m = self.mv.analysis(f, r, &mctx, s.case)?.div(q_enc).value();
        let m_sym = to_symbols(&m);
        let motion = self.mv.prior.encode(f, &m, &m_sym, None);
        let (vhat_tf, vhat_tb, motion_ctx) = self.motion_recon(f, &m_sym, &mctx, preds, s)?;

        let (cf, cb) = self.contexts(f, fref, bref, vhat_tf, vhat_tb, s.layer)?;
        let q_enc_y = self.y.q_enc.step(f, s.rate_idx)?;
        let y = self.y.analysis(f, xv, &cf, &cb)?.div(q_enc_y).value();
        let y_sym = to_symbols(&y);
        let tp = self.temporal_prior(f, &cf, &cb, fref, bref, s, (h / 16, w / 16))?;
        let contextual = self.y.prior.encode(f, &y, &y_sym, Some(tp));
        let (x_hat, f_hat) = self.frame_recon(f, &y_sym, &cf, &cb, s)?;
        Ok((
            BChunks { motion, contextual },
            BRecon {
                x_hat,
                f_hat,
                motion_ctx,
                y_sym,
                vhat_tf: vhat_tf.value(),
                vhat_tb: vhat_tb.value(),
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn b_decode<'a>(
        &self,
        f: &Fwd<'a>,
        motion: (&[u8], &[u8]),
        contextual: (&[u8], &[u8]),
        h: usize,
        w: usize,
        fref: &RefView<'a>,
        bref: &RefView<'a>,
        s: &BFrameSpec,
    ) -> Result<BRecon> {
        self.check_refs(fref, bref, s)?;
        let preds = self.predictions(f, fref, bref, s)?;
        let mctx = self.motion_contexts(fref, bref, s, false)?;
        let m_sym = self.mv.prior.decode(f, motion.0, motion.1, h / 16, w / 16, None)?;
        let (vhat_tf, vhat_tb, motion_ctx) = self.motion_recon(f, &m_sym, &mctx, preds, s)?;
        let (cf, cb) = self.contexts(f, fref, bref, vhat_tf, vhat_tb, s.layer)?;
        let tp = self.temporal_prior(f, &cf, &cb, fref, bref, s, (h / 16, w / 16))?;
        let y_sym = self.y.prior.decode(f, contextual.0, contextual.1, h / 16, w / 16, Some(tp))?;
        let (x_hat, f_hat) = self.frame_recon(f, &y_sym, &cf, &cb, s)?;
        Ok(BRecon {
            x_hat,
            f_hat,
            motion_ctx,
            y_sym,
            vhat_tf: vhat_tf.value(),
            vhat_tb: vhat_tb.value(),
        })
    }
}

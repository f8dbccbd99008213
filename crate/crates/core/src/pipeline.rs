//! Sequence orchestration, reference management and the container format.
//!
//! Container layout (all varints are LEB128):
//!
//! ```text
//! header  = "DCVB" version:u8 width height intra_period gop_size
//!           rate_idx:f64le frame_count pad_right pad_bottom
//!           model_hash:u32le crc32:u32le
//! record  = [varint len][payload]          one per frame, coding order
//! payload = display_index type:u8 chunk* crc32:u32le
//! chunk   = [varint len][bytes]
//! ```
//!
//! I-frame records carry two chunks (hyper, latent). B-frame records carry
//! four: motion hyper, motion latent, contextual hyper, contextual latent.
//! The record CRC covers everything in the payload before it.

use std::collections::HashMap;

use bvc_tensor::{Tape, Tensor};

use crate::config::GopConfig;
use crate::entropy::{read_chunk, read_varint, write_chunk, write_varint, LatentChunks};
use crate::error::{corrupt, invalid, CodecError, Result};
use crate::gop::{plan_sequence, FramePlan, FrameType, RefCase};
use crate::metrics::psnr;
use crate::model::{BFrameSpec, Model, RefView};
use crate::motion_codec::MotionDiffContext;
use crate::nn::Fwd;
use crate::quant::check_rate;

pub const MAGIC: [u8; 4] = *b"DCVB";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub width: usize,
    pub height: usize,
    pub intra_period: usize,
    pub gop_size: usize,
    pub rate_idx: f64,
    pub frame_count: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
    pub model_hash: u32,
}

impl Header {
    pub fn padded(&self) -> (usize, usize) {
        (self.height + self.pad_bottom, self.width + self.pad_right)
    }

    pub fn gop(&self) -> GopConfig {
        GopConfig {
            intra_period: self.intra_period,
            gop_size: self.gop_size,
            ..Default::default()
        }
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        for v in [self.width, self.height, self.intra_period, self.gop_size] {
            write_varint(out, v as u64);
        }
        out.extend_from_slice(&self.rate_idx.to_le_bytes());
        for v in [self.frame_count, self.pad_right, self.pad_bottom] {
            write_varint(out, v as u64);
        }
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }

    /// Parses a header; returns it with the number of bytes consumed.
    pub fn read(data: &[u8]) -> Result<(Header, usize)> {
        let bad = |r: &str| corrupt(None, format!("header: {r}"));
        if data.len() < 5 || data[..4] != MAGIC {
            return Err(bad("missing DCVB magic"));
        }
        if data[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", data[4])));
        }
        let mut pos = 5;
        let var = |pos: &mut usize| read_varint(data, pos).map(|v| v as usize).ok_or_else(|| bad("truncated"));
        let width = var(&mut pos)?;
        let height = var(&mut pos)?;
        let intra_period = var(&mut pos)?;
        let gop_size = var(&mut pos)?;
        let rate = data.get(pos..pos + 8).ok_or_else(|| bad("truncated"))?;
        let rate_idx = f64::from_le_bytes(rate.try_into().unwrap());
        pos += 8;
        let frame_count = var(&mut pos)?;
        let pad_right = var(&mut pos)?;
        let pad_bottom = var(&mut pos)?;
        let tail = data.get(pos..pos + 8).ok_or_else(|| bad("truncated"))?;
        let model_hash = u32::from_le_bytes(tail[..4].try_into().unwrap());
        let crc = u32::from_le_bytes(tail[4..].try_into().unwrap());
        if crc != crc32fast::hash(&data[..pos + 4]) {
            return Err(bad("checksum mismatch"));
        }
        let h = Header {
            width,
            height,
            intra_period,
            gop_size,
            rate_idx,
            frame_count,
            pad_right,
            pad_bottom,
            model_hash,
        };
        if width == 0 || height == 0 || frame_count == 0 || (width + pad_right) % 16 != 0 || (height + pad_bottom) % 16 != 0 {
            return Err(bad("inconsistent geometry"));
        }
        check_rate(rate_idx).map_err(|_| bad("rate_idx out of range"))?;
        Ok((h, pos + 8))
    }
}

/// One decoded or reconstructed frame held for later reference.
#[derive(Clone, Debug)]
pub struct ReferenceEntry {
    pub display_index: usize,
    pub frame_type: FrameType,
    /// Padded reconstruction.
    pub x_hat: Tensor,
    pub f_hat: Tensor,
    pub motion_ctx: Option<MotionDiffContext>,
    pub y_hat: Option<Tensor>,
}

impl ReferenceEntry {
    pub fn view<'a>(&self, f: &Fwd<'a>) -> RefView<'a> {
        RefView {
            x_hat: f.c(self.x_hat.clone()),
            feature: f.c(self.f_hat.clone()),
            motion_ctx: self.motion_ctx.as_ref().map(|m| (f.c(m.m_f.clone()), f.c(m.m_b.clone()))),
            y_sym: self.y_hat.as_ref().map(|y| f.c(y.clone())),
        }
    }
}

/// Reference-counted store of reconstructed frames. An entry lives exactly
/// until the last frame that references it has been coded.
pub struct RefStore {
    entries: HashMap<usize, ReferenceEntry>,
    remaining: HashMap<usize, usize>,
    /// `(coding_order, display_index)` of every reference read.
    pub access_log: Vec<(usize, usize)>,
    pub max_live: usize,
}

impl RefStore {
    pub fn new(plan: &[FramePlan]) -> Self {
        let mut remaining = HashMap::new();
        for p in plan {
            for r in p.fwd_ref.into_iter().chain(p.bwd_ref) {
                *remaining.entry(r).or_insert(0) += 1;
            }
        }
        RefStore {
            entries: HashMap::new(),
            remaining,
            access_log: Vec::new(),
            max_live: 0,
        }
    }

    pub fn live(&self) -> usize {
        self.entries.len()
    }

    pub fn insert(&mut self, e: ReferenceEntry) {
        if self.remaining.get(&e.display_index).copied().unwrap_or(0) > 0 {
            self.entries.insert(e.display_index, e);
            self.max_live = self.max_live.max(self.entries.len());
        }
    }

    pub fn get(&mut self, coding_order: usize, display: usize) -> Result<&ReferenceEntry> {
        self.access_log.push((coding_order, display));
        self.entries
            .get(&display)
            .ok_or_else(|| invalid(format!("reference {display} is not available")))
    }

    /// Drops one pending use of each reference of a coded frame.
    pub fn release(&mut self, p: &FramePlan) {
        for r in p.fwd_ref.into_iter().chain(p.bwd_ref) {
            if let Some(n) = self.remaining.get_mut(&r) {
                *n -= 1;
                if *n == 0 {
                    self.entries.remove(&r);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkKind {
    IntraHyper,
    IntraLatent,
    MotionHyper,
    MotionLatent,
    ContextualHyper,
    ContextualLatent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkStat {
    pub kind: ChunkKind,
    pub actual_bits: u64,
    pub estimated_bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub display_index: usize,
    pub coding_order: usize,
    pub layer: usize,
    pub frame_type: FrameType,
    /// Whole record including framing and checksum.
    pub record_bits: u64,
    pub motion_bits: u64,
    /// Contextual latent bits; for I-frames the image-codec bits.
    pub contextual_bits: u64,
    pub overhead_bits: u64,
    pub psnr: f64,
    pub chunks: Vec<ChunkStat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStats {
    pub width: usize,
    pub height: usize,
    pub rate_idx: f64,
    pub header_bits: u64,
    pub total_bits: u64,
    /// Coding order.
    pub frames: Vec<FrameStats>,
    pub max_live_refs: usize,
}

impl SequenceStats {
    pub fn bpp(&self) -> f64 {
        self.total_bits as f64 / (self.frames.len() * self.width * self.height) as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len() as f64
    }
}

pub struct EncodeOutput {
    pub bitstream: Vec<u8>,
    pub stats: SequenceStats,
    /// Cropped reconstructions in display order.
    pub recon: Vec<Tensor>,
}

pub struct DecodeOutput {
    pub header: Header,
    pub frames: Vec<Tensor>,
    pub access_log: Vec<(usize, usize)>,
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect padding on the right and bottom to `h × w`.
pub fn pad_reflect(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, ih, iw) = x.dims3();
    if ih == h && iw == w {
        return x.clone();
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        let y = mirror((p / w) as isize, ih);
        let xx = mirror((p % w) as isize, iw);
        x.data()[ch * ih * iw + y * iw + xx]
    })
}

pub fn padded_size(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(16) * 16, w.div_ceil(16) * 16)
}

fn spec_for(p: &FramePlan, plan: &[FramePlan], rate_idx: f64) -> Result<BFrameSpec> {
    let (d_f, d_b) = p.distances().ok_or_else(|| invalid("B-frame without references"))?;
    Ok(BFrameSpec {
        d_f,
        d_b,
        layer: p.layer,
        case: crate::gop::reference_case(p, plan)?,
        rate_idx,
    })
}

fn bits(b: &[u8]) -> u64 {
    8 * b.len() as u64
}

fn push_latent(payload: &mut Vec<u8>, c: &LatentChunks, kinds: [ChunkKind; 2], stats: &mut Vec<ChunkStat>) {
    write_chunk(payload, &c.hyper);
    write_chunk(payload, &c.latent);
    stats.push(ChunkStat {
        kind: kinds[0],
        actual_bits: bits(&c.hyper),
        estimated_bits: c.est_hyper_bits,
    });
    stats.push(ChunkStat {
        kind: kinds[1],
        actual_bits: bits(&c.latent),
        estimated_bits: c.est_latent_bits,
    });
}

fn check_frames(frames: &[Tensor]) -> Result<(usize, usize)> {
    let first = frames.first().ok_or_else(|| invalid("empty sequence"))?;
    if first.rank() != 3 || first.shape()[0] != 3 {
        return Err(invalid(format!("frames must be [3,H,W], got {:?}", first.shape())));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(invalid(format!("frame {i} is {:?}, expected {:?}", f.shape(), first.shape())));
        }
        if !f.all_finite() {
            return Err(invalid(format!("frame {i} has non-finite samples")));
        }
    }
    let (_, h, w) = first.dims3();
    Ok((h, w))
}

pub fn encode_sequence(model: &Model, frames: &[Tensor], gop: &GopConfig, rate_idx: f64) -> Result<EncodeOutput> {
    encode_sequence_with(model, frames, gop, rate_idx, EncodeOptions::default())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Ablation: code motion without the motion-difference contexts of
    /// B-frame references. The result does not decode correctly.
    pub zero_motion_contexts: bool,
}

pub fn encode_sequence_with(model: &Model, frames: &[Tensor], gop: &GopConfig, rate_idx: f64, opts: EncodeOptions) -> Result<EncodeOutput> {
    check_rate(rate_idx)?;
    let (h, w) = check_frames(frames)?;
    let (ph, pw) = padded_size(h, w);
    let plan = plan_sequence(frames.len(), gop)?;
    let header = Header {
        width: w,
        height: h,
        intra_period: gop.intra_period,
        gop_size: gop.gop_size,
        rate_idx,
        frame_count: frames.len(),
        pad_right: pw - w,
        pad_bottom: ph - h,
        model_hash: model.fingerprint(),
    };
    let mut out = Vec::new();
    header.write(&mut out);
    let header_bits = bits(&out);
    let mut refs = RefStore::new(&plan);
    let mut recon = vec![None; frames.len()];
    let mut stats = Vec::with_capacity(plan.len());
    for p in &plan {
        let t = p.display_index;
        let x = pad_reflect(&frames[t], ph, pw);
        let mut payload = Vec::new();
        write_varint(&mut payload, t as u64);
        payload.push(p.frame_type as u8);
        let mut chunks = Vec::new();
        let entry = (|| -> Result<ReferenceEntry> {
            if p.is_intra() {
                let (c, x_hat) = model.intra_encode(&x, rate_idx)?;
                push_latent(&mut payload, &c, [ChunkKind::IntraHyper, ChunkKind::IntraLatent], &mut chunks);
                let f_hat = model.lift(&x_hat);
                return Ok(ReferenceEntry {
                    display_index: t,
                    frame_type: FrameType::I,
                    x_hat,
                    f_hat,
                    motion_ctx: None,
                    y_hat: None,
                });
            }
            let s = spec_for(p, &plan, rate_idx)?;
            let tape = Tape::inference();
            let f = Fwd::new(&tape, &model.store);
            let fv = refs.get(p.coding_order, p.fwd_ref.unwrap())?.view(&f);
            let bv = refs.get(p.coding_order, p.bwd_ref.unwrap())?.view(&f);
            let (c, r) = model.b_encode_ablated(&f, &x, &fv, &bv, &s, opts.zero_motion_contexts)?;
            push_latent(&mut payload, &c.motion, [ChunkKind::MotionHyper, ChunkKind::MotionLatent], &mut chunks);
            push_latent(&mut payload, &c.contextual, [ChunkKind::ContextualHyper, ChunkKind::ContextualLatent], &mut chunks);
            Ok(ReferenceEntry {
                display_index: t,
                frame_type: FrameType::B,
                x_hat: r.x_hat,
                f_hat: r.f_hat,
                motion_ctx: Some(r.motion_ctx),
                y_hat: Some(r.y_sym),
            })
        })()
        .map_err(|e| e.at_frame(t))?;
        let crc = crc32fast::hash(&payload);
        payload.extend_from_slice(&crc.to_le_bytes());
        let before = out.len();
        write_chunk(&mut out, &payload);
        let record_bits = bits(&out[before..]);
        let kind_bits = |ks: &[ChunkKind]| chunks.iter().filter(|c| ks.contains(&c.kind)).map(|c| c.actual_bits).sum::<u64>();
        let motion_bits = kind_bits(&[ChunkKind::MotionHyper, ChunkKind::MotionLatent]);
        let contextual_bits = kind_bits(&[ChunkKind::ContextualHyper, ChunkKind::ContextualLatent, ChunkKind::IntraHyper, ChunkKind::IntraLatent]);
        let x_out = entry.x_hat.crop(h, w);
        stats.push(FrameStats {
            display_index: t,
            coding_order: p.coding_order,
            layer: p.layer,
            frame_type: p.frame_type,
            record_bits,
            motion_bits,
            contextual_bits,
            overhead_bits: record_bits - motion_bits - contextual_bits,
            psnr: psnr(&frames[t], &x_out)?,
            chunks,
        });
        recon[t] = Some(x_out);
        refs.release(p);
        refs.insert(entry);
    }
    let stats = SequenceStats {
        width: w,
        height: h,
        rate_idx,
        header_bits,
        total_bits: bits(&out),
        frames: stats,
        max_live_refs: refs.max_live,
    };
    Ok(EncodeOutput {
        bitstream: out,
        stats,
        recon: recon.into_iter().map(|r| r.expect("every frame is planned")).collect(),
    })
}

/// Splits a record payload into its chunks after verifying the checksum.
fn parse_record<'d>(payload: &'d [u8], p: &FramePlan) -> Result<Vec<&'d [u8]>> {
    if payload.len() < 4 {
        return Err(corrupt(None, "record too short"));
    }
    let (body, crc) = payload.split_at(payload.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt(None, "record checksum mismatch"));
    }
    let mut pos = 0;
    let t = read_varint(body, &mut pos).ok_or_else(|| corrupt(None, "bad display index"))?;
    let ty = *body.get(pos).ok_or_else(|| corrupt(None, "missing frame type"))?;
    pos += 1;
    if t as usize != p.display_index || ty != p.frame_type as u8 {
        return Err(corrupt(None, format!("record for frame {t} type {ty} does not follow the plan")));
    }
    let n = if p.is_intra() { 2 } else { 4 };
    let mut chunks = Vec::with_capacity(n);
    for _ in 0..n {
        chunks.push(read_chunk(body, &mut pos).ok_or_else(|| corrupt(None, "truncated chunk"))?);
    }
    if pos != body.len() {
        return Err(corrupt(None, "trailing bytes in record"));
    }
    Ok(chunks)
}

/// Checks framing, checksums and plan consistency of a whole stream
/// without running the model. Every single-byte corruption fails here.
pub fn verify_container(data: &[u8]) -> Result<Header> {
    let (header, mut pos) = Header::read(data)?;
    let plan = plan_sequence(header.frame_count, &header.gop()).map_err(|e| corrupt(None, format!("header: {e}")))?;
    for p in &plan {
        let payload = read_chunk(data, &mut pos).ok_or_else(|| corrupt(Some(p.display_index), "truncated record"))?;
        parse_record(payload, p).map_err(|e| e.at_frame(p.display_index))?;
    }
    if pos != data.len() {
        return Err(corrupt(None, format!("{} trailing bytes after the last record", data.len() - pos)));
    }
    Ok(header)
}

pub fn decode_sequence(model: &Model, data: &[u8]) -> Result<DecodeOutput> {
    let (header, mut pos) = Header::read(data)?;
    if header.model_hash != model.fingerprint() {
        return Err(CodecError::InvalidArgument(format!(
            "bitstream was produced by model {:08x}, loaded model is {:08x}",
            header.model_hash,
            model.fingerprint()
        )));
    }
    let (ph, pw) = header.padded();
    let plan = plan_sequence(header.frame_count, &header.gop()).map_err(|e| corrupt(None, format!("header: {e}")))?;
    let rate_idx = header.rate_idx;
    let mut refs = RefStore::new(&plan);
    let mut frames = vec![None; header.frame_count];
    let mut last_good: Option<usize> = None;
    for p in &plan {
        let t = p.display_index;
        let fail = |e: CodecError| match e {
            CodecError::CorruptBitstream { reason, .. } => corrupt(
                Some(t),
                match last_good {
                    Some(g) => format!("{reason} (last good frame {g})"),
                    None => format!("{reason} (no frame decoded)"),
                },
            ),
            e => e.at_frame(t),
        };
        let payload = read_chunk(data, &mut pos).ok_or_else(|| fail(corrupt(None, "truncated record")))?;
        let chunks = parse_record(payload, p).map_err(fail)?;
        let entry = (|| -> Result<ReferenceEntry> {
            if p.is_intra() {
                let x_hat = model.intra_decode(chunks[0], chunks[1], ph, pw, rate_idx)?;
                let f_hat = model.lift(&x_hat);
                return Ok(ReferenceEntry {
                    display_index: t,
                    frame_type: FrameType::I,
                    x_hat,
                    f_hat,
                    motion_ctx: None,
                    y_hat: None,
                });
            }
            let s = spec_for(p, &plan, rate_idx)?;
            let tape = Tape::inference();
            let f = Fwd::new(&tape, &model.store);
            let fv = refs.get(p.coding_order, p.fwd_ref.unwrap())?.view(&f);
            let bv = refs.get(p.coding_order, p.bwd_ref.unwrap())?.view(&f);
            let r = model.b_decode(&f, (chunks[0], chunks[1]), (chunks[2], chunks[3]), ph, pw, &fv, &bv, &s)?;
            Ok(ReferenceEntry {
                display_index: t,
                frame_type: FrameType::B,
                x_hat: r.x_hat,
                f_hat: r.f_hat,
                motion_ctx: Some(r.motion_ctx),
                y_hat: Some(r.y_sym),
            })
        })()
        .map_err(fail)?;
        frames[t] = Some(entry.x_hat.crop(header.height, header.width));
        refs.release(p);
        refs.insert(entry);
        last_good = Some(t);
    }
    if pos != data.len() {
        return Err(corrupt(None, format!("{} trailing bytes after the last record", data.len() - pos)));
    }
    Ok(DecodeOutput {
        header,
        frames: frames.into_iter().map(|f| f.expect("every frame is planned")).collect(),
        access_log: refs.access_log,
    })
}

/// Reference case of every B-frame, for reporting.
pub fn cases(plan: &[FramePlan]) -> Result<Vec<Option<RefCase>>> {
    plan.iter()
        .map(|p| if p.is_intra() { Ok(None) } else { crate::gop::reference_case(p, plan).map(Some) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip_and_checksum() {
        let h = Header {
            width: 70,
            height: 50,
            intra_period: 32,
            gop_size: 32,
            rate_idx: 1.5,
            frame_count: 33,
            pad_right: 10,
            pad_bottom: 14,
            model_hash: 0xdead_beef,
        };
        let mut b = Vec::new();
        h.write(&mut b);
        let (g, n) = Header::read(&b).unwrap();
        assert_eq!((g, n), (h, b.len()));
        for i in 0..b.len() {
            let mut c = b.clone();
            c[i] ^= 0x01;
            assert!(Header::read(&c).is_err(), "flip at byte {i} undetected");
        }
    }

    #[test]
    fn reflect_padding() {
        let x = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]);
        let p = pad_reflect(&x, 1, 8);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(padded_size(50, 64), (64, 64));
        let one = Tensor::new(&[1, 1, 1], vec![7.0]);
        assert!(pad_reflect(&one, 2, 2).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn ref_store_evicts_after_last_use() {
        let plan = plan_sequence(9, &GopConfig { intra_period: 8, gop_size: 8, ..Default::default() }).unwrap();
        let mut s = RefStore::new(&plan);
        for p in &plan {
            for r in p.fwd_ref.into_iter().chain(p.bwd_ref) {
                s.get(p.coding_order, r).unwrap();
            }
            s.release(p);
            s.insert(ReferenceEntry {
                display_index: p.display_index,
                frame_type: p.frame_type,
                x_hat: Tensor::zeros(&[1]),
                f_hat: Tensor::zeros(&[1]),
                motion_ctx: None,
                y_hat: None,
            });
        }
        assert_eq!(s.live(), 0);
        assert!(s.max_live <= 5);
    }
}

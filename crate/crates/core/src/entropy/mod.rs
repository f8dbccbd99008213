//! Probability models and the range coder that turns them into bytes.

pub mod factorized;
pub mod laplace;
pub mod latent;
pub mod range;
pub mod temporal;

pub use latent::{LatentChunks, LatentPrior, PriorOutput};
pub use temporal::TemporalPrior;

/// LEB128 unsigned varint.
pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let b = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(b);
            return;
        }
        out.push(b | 0x80);
    }
}

/// Reads a varint at `*pos`, advancing it. `None` on truncation or overflow.
pub fn read_varint(data: &[u8], pos: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *data.get(*pos)?;
        *pos += 1;
        v |= ((b & 0x7F) as u64) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

/// Appends `[varint len][payload]`.
pub fn write_chunk(out: &mut Vec<u8>, payload: &[u8]) {
    write_varint(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

pub fn read_chunk<'d>(data: &'d [u8], pos: &mut usize) -> Option<&'d [u8]> {
    let len = usize::try_from(read_varint(data, pos)?).ok()?;
    let end = pos.checked_add(len)?;
    let s = data.get(*pos..end)?;
    *pos = end;
    Some(s)
}

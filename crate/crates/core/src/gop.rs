//! Hierarchical B-frame planning.
//!
//! I-frames sit at multiples of the intra period; a trailing partial period
//! is closed by promoting the last frame to I. Every span between two
//! consecutive I-frames is filled by recursive floor-midpoint bisection, so
//! a 32-frame span yields temporal layers 1..=5 with 1, 2, 4, 8 and 16
//! frames. Frames of one span are coded after its closing I-frame, layer by
//! layer, lower display index first within a layer.

use std::fmt;
use std::str::FromStr;

use crate::config::GopConfig;
use crate::error::{invalid, CodecError, Result};

/// Deepest temporal layer a plan may use.
pub const MAX_LAYER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameType {
    I,
    B,
}

/// Which references of a B-frame are themselves B-frames. Selects the
/// motion and prior fusion adaptors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RefCase {
    II,
    IB,
    BI,
    BB,
}

impl RefCase {
    pub const ALL: [RefCase; 4] = [RefCase::II, RefCase::IB, RefCase::BI, RefCase::BB];

    pub fn from_types(fwd: FrameType, bwd: FrameType) -> Self {
        match (fwd, bwd) {
            (FrameType::I, FrameType::I) => RefCase::II,
            (FrameType::I, FrameType::B) => RefCase::IB,
            (FrameType::B, FrameType::I) => RefCase::BI,
            (FrameType::B, FrameType::B) => RefCase::BB,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn fwd_is_b(self) -> bool {
        matches!(self, RefCase::BI | RefCase::BB)
    }

    pub fn bwd_is_b(self) -> bool {
        matches!(self, RefCase::IB | RefCase::BB)
    }

    /// Number of B-frame references contributing side information.
    pub fn b_refs(self) -> usize {
        self.fwd_is_b() as usize + self.bwd_is_b() as usize
    }
}

impl fmt::Display for RefCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePlan {
    pub display_index: usize,
    pub coding_order: usize,
    pub layer: usize,
    pub frame_type: FrameType,
    pub fwd_ref: Option<usize>,
    pub bwd_ref: Option<usize>,
    pub quality_coeff: f64,
}

impl FramePlan {
    pub fn is_intra(&self) -> bool {
        self.frame_type == FrameType::I
    }

    /// Temporal distances `(t - f, b - t)` of a B-frame.
    pub fn distances(&self) -> Option<(usize, usize)> {
        Some((self.display_index - self.fwd_ref?, self.bwd_ref? - self.display_index))
    }
}

pub fn quality_coeff_for(layer: usize, config: &GopConfig) -> f64 {
    match layer {
        0 => 1.0,
        l => config.quality_coeffs[l.min(MAX_LAYER) - 1],
    }
}

struct Span {
    lo: usize,
    hi: usize,
    layer: usize,
}

/// Bisects `(lo, hi)` and returns `(display, layer, fwd, bwd)` for every
/// interior frame in coding order. `anchors` are interior positions that
/// must be chosen before any other split point.
fn bisect_span(lo: usize, hi: usize, anchors: &[usize]) -> Result<Vec<(usize, usize, usize, usize)>> {
    let mut out = Vec::with_capacity(hi - lo);
    let mut level = vec![Span { lo, hi, layer: 1 }];
    while !level.is_empty() {
        let mut next = Vec::new();
        for s in &level {
            if s.hi - s.lo < 2 {
                continue;
            }
            if s.layer > MAX_LAYER {
                return Err(invalid(format!(
                    "span {}..{} needs more than {MAX_LAYER} B layers; reduce intra_period or gop_size",
                    lo, hi
                )));
            }
            let mid_f = (s.lo + s.hi) / 2;
            let mid = anchors
                .iter()
                .copied()
                .filter(|&a| a > s.lo && a < s.hi)
                .min_by_key(|&a| (a.abs_diff(mid_f), a))
                .unwrap_or(mid_f);
            out.push((mid, s.layer, s.lo, s.hi));
            next.push(Span { lo: s.lo, hi: mid, layer: s.layer + 1 });
            next.push(Span { lo: mid, hi: s.hi, layer: s.layer + 1 });
        }
        level = next;
    }
    // Stable: spans of one level are generated left to right.
    out.sort_by_key(|&(d, l, _, _)| (l, d));
    Ok(out)
}

/// Display indices of all I-frames for a sequence of `num_frames`.
pub fn intra_positions(num_frames: usize, intra_period: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..num_frames).step_by(intra_period).collect();
    if *v.last().unwrap() != num_frames - 1 {
        v.push(num_frames - 1);
    }
    v
}

pub fn plan_sequence(num_frames: usize, config: &GopConfig) -> Result<Vec<FramePlan>> {
    if num_frames == 0 {
        return Err(invalid("num_frames must be at least 1"));
    }
    config.validate()?;
    let intra = intra_positions(num_frames, config.intra_period);
    let mut plans = Vec::with_capacity(num_frames);
    let push_i = |plans: &mut Vec<FramePlan>, d: usize| {
        let order = plans.len();
        plans.push(FramePlan {
            display_index: d,
            coding_order: order,
            layer: 0,
            frame_type: FrameType::I,
            fwd_ref: None,
            bwd_ref: None,
            quality_coeff: 1.0,
        });
    };
    push_i(&mut plans, intra[0]);
    for pair in intra.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        push_i(&mut plans, hi);
        let anchors: Vec<usize> = (lo + 1..hi).filter(|d| d % config.gop_size == 0).collect();
        for (d, layer, f, b) in bisect_span(lo, hi, &anchors)? {
            let order = plans.len();
            plans.push(FramePlan {
                display_index: d,
                coding_order: order,
                layer,
                frame_type: FrameType::B,
                fwd_ref: Some(f),
                bwd_ref: Some(b),
                quality_coeff: quality_coeff_for(layer, config),
            });
        }
    }
    debug_assert_eq!(plans.len(), num_frames);
    Ok(plans)
}

/// Temporal layer a B-frame would occupy in a 32-frame GOP given the
/// distance between its references in original frames.
pub fn equivalent_layer(ref_span: usize) -> usize {
    let bits = usize::BITS - (ref_span.max(2) - 1).leading_zeros();
    (6 - bits as i64).clamp(1, MAX_LAYER as i64) as usize
}

/// Reference structure of a training clip of `num_frames` frames taken
/// every `stride` original frames: I-frames at both ends and bisection in
/// between. Layers and quality coefficients follow [`equivalent_layer`].
pub fn plan_training_clip(num_frames: usize, stride: usize, config: &GopConfig) -> Result<Vec<FramePlan>> {
    if num_frames < 3 || stride == 0 {
        return Err(invalid("training clips need at least 3 frames and a positive stride"));
    }
    let last = num_frames - 1;
    let mut plans = Vec::with_capacity(num_frames);
    for (order, d) in [0, last].into_iter().enumerate() {
        plans.push(FramePlan {
            display_index: d,
            coding_order: order,
            layer: 0,
            frame_type: FrameType::I,
            fwd_ref: None,
            bwd_ref: None,
            quality_coeff: 1.0,
        });
    }
    let mut inner = Vec::new();
    let mut stack = vec![(0usize, last, 1usize)];
    while let Some((lo, hi, depth)) = stack.pop() {
        if hi - lo < 2 {
            continue;
        }
        let mid = (lo + hi) / 2;
        inner.push((depth, mid, lo, hi));
        stack.push((lo, mid, depth + 1));
        stack.push((mid, hi, depth + 1));
    }
    inner.sort_by_key(|&(depth, d, _, _)| (depth, d));
    for (_, d, f, b) in inner {
        let layer = equivalent_layer((b - f) * stride);
        let order = plans.len();
        plans.push(FramePlan {
            display_index: d,
            coding_order: order,
            layer,
            frame_type: FrameType::B,
            fwd_ref: Some(f),
            bwd_ref: Some(b),
            quality_coeff: quality_coeff_for(layer, config),
        });
    }
    Ok(plans)
}

/// Looks up a plan entry by display index.
pub fn find(plans: &[FramePlan], display: usize) -> Option<&FramePlan> {
    plans.iter().find(|p| p.display_index == display)
}

pub fn reference_case(plan: &FramePlan, plans: &[FramePlan]) -> Result<RefCase> {
    let (Some(f), Some(b)) = (plan.fwd_ref, plan.bwd_ref) else {
        return Err(invalid(format!("frame {} is an I-frame", plan.display_index)));
    };
    let ty = |d| {
        find(plans, d)
            .map(|p| p.frame_type)
            .ok_or_else(|| invalid(format!("reference {d} not in plan")))
    };
    Ok(RefCase::from_types(ty(f)?, ty(b)?))
}

impl fmt::Display for FramePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = |x: Option<usize>| x.map_or("-".to_string(), |v| v.to_string());
        write!(
            f,
            "{} {} {} {} {} {} {}",
            self.coding_order,
            self.display_index,
            self.layer,
            if self.is_intra() { "I" } else { "B" },
            r(self.fwd_ref),
            r(self.bwd_ref),
            self.quality_coeff
        )
    }
}

impl FromStr for FramePlan {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 7 {
            return Err(invalid(format!("plan line needs 7 fields: {s:?}")));
        }
        let num = |x: &str| x.parse::<usize>().map_err(|_| invalid(format!("bad number {x:?}")));
        let opt = |x: &str| if x == "-" { Ok(None) } else { num(x).map(Some) };
        Ok(FramePlan {
            coding_order: num(f[0])?,
            display_index: num(f[1])?,
            layer: num(f[2])?,
            frame_type: match f[3] {
                "I" => FrameType::I,
                "B" => FrameType::B,
                t => return Err(invalid(format!("bad frame type {t:?}"))),
            },
            fwd_ref: opt(f[4])?,
            bwd_ref: opt(f[5])?,
            quality_coeff: f[6].parse().map_err(|_| invalid(format!("bad coefficient {:?}", f[6])))?,
        })
    }
}

/// One line per frame in coding order.
pub fn dump_plan(plans: &[FramePlan]) -> String {
    plans.iter().map(|p| format!("{p}\n")).collect()
}

pub fn parse_plan(text: &str) -> Result<Vec<FramePlan>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_is_intra() {
        let p = plan_sequence(1, &GopConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].coding_order, p[0].frame_type), (0, FrameType::I));
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(plan_sequence(0, &GopConfig::default()).is_err());
    }

    #[test]
    fn quality_coefficients() {
        let g = GopConfig::default();
        assert_eq!(quality_coeff_for(1, &g), 1.4);
        assert_eq!(quality_coeff_for(5, &g), 0.5);
        assert_eq!(quality_coeff_for(0, &g), 1.0);
    }

    #[test]
    fn equivalent_layers() {
        assert_eq!(equivalent_layer(32), 1);
        assert_eq!(equivalent_layer(16), 2);
        assert_eq!(equivalent_layer(2), 5);
        assert_eq!(equivalent_layer(6), 3);
        assert_eq!(equivalent_layer(3), 4);
    }

    #[test]
    fn dump_roundtrip() {
        let p = plan_sequence(40, &GopConfig::default()).unwrap();
        assert_eq!(parse_plan(&dump_plan(&p)).unwrap(), p);
    }

    #[test]
    fn overly_deep_spans_are_rejected() {
        let g = GopConfig {
            intra_period: 64,
            gop_size: 64,
            ..GopConfig::default()
        };
        assert!(plan_sequence(65, &g).is_err());
    }
}

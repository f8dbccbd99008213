//! Per-frame CSV, per-layer tables, bit shares and static SVG plots, all
//! derived from [`SequenceStats`]. Stats round-trip through a text file so
//! reports can be regenerated without re-encoding.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;

use crate::bd_rate::RdPoint;
use crate::error::{CodecError, Result};
use crate::gop::FrameType;
use crate::pipeline::{ChunkKind, ChunkStat, FrameStats, SequenceStats};

pub const FRAME_CSV_HEADER: &str =
    "frame,coding_order,layer,type,motion_bits,contextual_bits,overhead_bits,total_bits,motion_share,contextual_share,overhead_share,psnr";

/// Percentages of one frame's record bits; they sum to 100.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitShares {
    pub motion: f64,
    pub contextual: f64,
    pub overhead: f64,
}

pub fn bit_shares(f: &FrameStats) -> BitShares {
    let t = f.record_bits.max(1) as f64;
    let motion = 100.0 * f.motion_bits as f64 / t;
    let contextual = 100.0 * f.contextual_bits as f64 / t;
    BitShares {
        motion,
        contextual,
        overhead: 100.0 - motion - contextual,
    }
}

fn type_str(t: FrameType) -> &'static str {
    match t {
        FrameType::I => "I",
        FrameType::B => "B",
    }
}

/// One row per frame in display order.
pub fn frame_csv(stats: &SequenceStats) -> String {
    let mut frames: Vec<&FrameStats> = stats.frames.iter().collect();
    frames.sort_by_key(|f| f.display_index);
    let mut s = String::from(FRAME_CSV_HEADER);
    s.push('\n');
    for f in frames {
        let sh = bit_shares(f);
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
            f.display_index,
            f.coding_order,
            f.layer,
            type_str(f.frame_type),
            f.motion_bits,
            f.contextual_bits,
            f.overhead_bits,
            f.record_bits,
            sh.motion,
            sh.contextual,
            sh.overhead,
            f.psnr
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_bits: f64,
    pub mean_motion_bits: f64,
    pub mean_contextual_bits: f64,
    /// Motion bits over motion plus contextual bits, in percent.
    pub motion_share: f64,
}

/// Means grouped by hierarchy layer (I-frames are layer 0).
pub fn layer_table(stats: &SequenceStats) -> Vec<LayerRow> {
    let max = stats.frames.iter().map(|f| f.layer).max().unwrap_or(0);
    (0..=max)
        .filter_map(|layer| {
            let fs: Vec<&FrameStats> = stats.frames.iter().filter(|f| f.layer == layer).collect();
            if fs.is_empty() {
                return None;
            }
            let n = fs.len() as f64;
            let mean = |g: &dyn Fn(&FrameStats) -> f64| fs.iter().map(|f| g(f)).sum::<f64>() / n;
            let mb = mean(&|f| f.motion_bits as f64);
            let cb = mean(&|f| f.contextual_bits as f64);
            Some(LayerRow {
                layer,
                frames: fs.len(),
                mean_psnr: mean(&|f| f.psnr),
                mean_bits: mean(&|f| f.record_bits as f64),
                mean_motion_bits: mb,
                mean_contextual_bits: cb,
                motion_share: if mb + cb > 0.0 { 100.0 * mb / (mb + cb) } else { 0.0 },
            })
        })
        .collect()
}

pub fn layer_csv(rows: &[LayerRow]) -> String {
    let mut s = String::from("layer,frames,mean_psnr,mean_bits,mean_motion_bits,mean_contextual_bits,motion_share\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.4},{:.2},{:.2},{:.2},{:.4}",
            r.layer, r.frames, r.mean_psnr, r.mean_bits, r.mean_motion_bits, r.mean_contextual_bits, r.motion_share
        )
        .unwrap();
    }
    s
}

/// Motion share over all B-frames of a sequence, in percent.
pub fn motion_share(stats: &SequenceStats) -> f64 {
    let (m, c) = stats
        .frames
        .iter()
        .filter(|f| f.frame_type == FrameType::B)
        .fold((0u64, 0u64), |(m, c), f| (m + f.motion_bits, c + f.contextual_bits));
    if m + c == 0 {
        0.0
    } else {
        100.0 * m as f64 / (m + c) as f64
    }
}

pub fn rd_point(stats: &SequenceStats, tag: &str) -> RdPoint {
    RdPoint {
        bpp: stats.bpp(),
        quality: stats.mean_psnr(),
        rate_idx: stats.rate_idx,
        tag: tag.to_string(),
    }
}

fn kind_str(k: ChunkKind) -> &'static str {
    match k {
        ChunkKind::IntraHyper => "intra_hyper",
        ChunkKind::IntraLatent => "intra_latent",
        ChunkKind::MotionHyper => "motion_hyper",
        ChunkKind::MotionLatent => "motion_latent",
        ChunkKind::ContextualHyper => "contextual_hyper",
        ChunkKind::ContextualLatent => "contextual_latent",
    }
}

fn parse_kind(s: &str) -> Option<ChunkKind> {
    Some(match s {
        "intra_hyper" => ChunkKind::IntraHyper,
        "intra_latent" => ChunkKind::IntraLatent,
        "motion_hyper" => ChunkKind::MotionHyper,
        "motion_latent" => ChunkKind::MotionLatent,
        "contextual_hyper" => ChunkKind::ContextualHyper,
        "contextual_latent" => ChunkKind::ContextualLatent,
        _ => return None,
    })
}

/// Lossless text form of the stats stream. Floats use shortest round-trip
/// formatting.
pub fn stats_to_string(stats: &SequenceStats) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "seq {} {} {:?} {} {} {}",
        stats.width, stats.height, stats.rate_idx, stats.header_bits, stats.total_bits, stats.max_live_refs
    )
    .unwrap();
    for f in &stats.frames {
        writeln!(
            s,
            "frame {} {} {} {} {} {} {} {} {:?}",
            f.display_index,
            f.coding_order,
            f.layer,
            type_str(f.frame_type),
            f.record_bits,
            f.motion_bits,
            f.contextual_bits,
            f.overhead_bits,
            f.psnr
        )
        .unwrap();
        for c in &f.chunks {
            writeln!(s, "chunk {} {} {:?}", kind_str(c.kind), c.actual_bits, c.estimated_bits).unwrap();
        }
    }
    s
}

pub fn stats_from_str(text: &str) -> Result<SequenceStats> {
    let bad = |n: usize| CodecError::Data(format!("stats line {}: malformed", n + 1));
    let mut seq: Option<SequenceStats> = None;
    for (n, line) in text.lines().enumerate() {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        macro_rules! p {
            ($i:expr) => {
                t.get($i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(n))?
            };
        }
        match (t[0], seq.as_mut()) {
            ("seq", None) if t.len() == 7 => {
                seq = Some(SequenceStats {
                    width: p!(1),
                    height: p!(2),
                    rate_idx: p!(3),
                    header_bits: p!(4),
                    total_bits: p!(5),
                    frames: Vec::new(),
                    max_live_refs: p!(6),
                })
            }
            ("frame", Some(s)) if t.len() == 10 => s.frames.push(FrameStats {
                display_index: p!(1),
                coding_order: p!(2),
                layer: p!(3),
                frame_type: match t[4] {
                    "I" => FrameType::I,
                    "B" => FrameType::B,
                    _ => return Err(bad(n)),
                },
                record_bits: p!(5),
                motion_bits: p!(6),
                contextual_bits: p!(7),
                overhead_bits: p!(8),
                psnr: p!(9),
                chunks: Vec::new(),
            }),
            ("chunk", Some(s)) if t.len() == 4 => {
                let f = s.frames.last_mut().ok_or_else(|| bad(n))?;
                f.chunks.push(ChunkStat {
                    kind: parse_kind(t[1]).ok_or_else(|| bad(n))?,
                    actual_bits: p!(2),
                    estimated_bits: p!(3),
                });
            }
            _ => return Err(bad(n)),
        }
    }
    seq.ok_or_else(|| CodecError::Data("stats file has no seq line".into()))
}

fn plot_err<E: std::fmt::Display>(e: E) -> CodecError {
    CodecError::Plot(e.to_string())
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn padded_range(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let (lo, hi) = if lo.is_finite() && hi.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let m = ((hi - lo) * 0.08).max(1e-3);
    lo - m..hi + m
}

/// Rate-distortion curves (bpp against quality) as an SVG document.
pub fn rd_plot_svg(curves: &[(String, Vec<RdPoint>)], quality_label: &str) -> Result<String> {
    let pts = curves.iter().flat_map(|(_, c)| c.iter()).filter(|p| p.quality.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.quality);
        y1 = y1.max(p.quality);
    }
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Rate-distortion", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(padded_range(x0, x1), padded_range(y0, y1))
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("bpp")
            .y_desc(quality_label)
            .draw()
            .map_err(plot_err)?;
        for (i, (name, c)) in curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut c: Vec<(f64, f64)> = c.iter().filter(|p| p.quality.is_finite()).map(|p| (p.bpp, p.quality)).collect();
            c.sort_by(|a, b| a.0.total_cmp(&b.0));
            chart
                .draw_series(LineSeries::new(c.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart
                .draw_series(c.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE)
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Per-frame PSNR (top) and bits split into motion and contextual
/// (bottom), in display order.
pub fn frame_plot_svg(stats: &SequenceStats) -> Result<String> {
    let mut frames: Vec<&FrameStats> = stats.frames.iter().collect();
    frames.sort_by_key(|f| f.display_index);
    let n = frames.len().max(1) as f64;
    let finite: Vec<f64> = frames.iter().map(|f| f.psnr).filter(|p| p.is_finite()).collect();
    let (p0, p1) = finite
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &p| (a.min(p), b.max(p)));
    let bmax = frames.iter().map(|f| f.record_bits).max().unwrap_or(1) as f64;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 560)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (top, bottom) = root.split_vertically(280);
        let mut c = ChartBuilder::on(&top)
            .caption("Per-frame quality", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(-0.5..n - 0.5, padded_range(p0, p1))
            .map_err(plot_err)?;
        c.configure_mesh().x_desc("frame").y_desc("PSNR (dB)").draw().map_err(plot_err)?;
        let line: Vec<(f64, f64)> = frames
            .iter()
            .filter(|f| f.psnr.is_finite())
            .map(|f| (f.display_index as f64, f.psnr))
            .collect();
        c.draw_series(LineSeries::new(line.clone(), PALETTE[0].stroke_width(2)))
            .map_err(plot_err)?;
        c.draw_series(line.into_iter().map(|p| Circle::new(p, 2, PALETTE[0].filled())))
            .map_err(plot_err)?;

        let mut c = ChartBuilder::on(&bottom)
            .caption("Per-frame bits", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(-0.5..n - 0.5, 0.0..bmax * 1.05)
            .map_err(plot_err)?;
        c.configure_mesh().x_desc("frame").y_desc("bits").draw().map_err(plot_err)?;
        for f in &frames {
            let x = f.display_index as f64;
            let (m, cb) = (f.motion_bits as f64, f.contextual_bits as f64);
            c.draw_series([
                Rectangle::new([(x - 0.4, 0.0), (x + 0.4, m)], PALETTE[1].filled()),
                Rectangle::new([(x - 0.4, m), (x + 0.4, m + cb)], PALETTE[0].filled()),
                Rectangle::new([(x - 0.4, m + cb), (x + 0.4, f.record_bits as f64)], PALETTE[5].filled()),
            ])
            .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Writes `frames.csv`, `layers.csv` and `frames.svg` for one sequence.
pub fn write_sequence_report(dir: &Path, stats: &SequenceStats) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("frames.csv"), frame_csv(stats))?;
    std::fs::write(dir.join("layers.csv"), layer_csv(&layer_table(stats)))?;
    std::fs::write(dir.join("frames.svg"), frame_plot_svg(stats)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> SequenceStats {
        let mk = |d, co, layer, t, m: u64, c: u64, o: u64, psnr| FrameStats {
            display_index: d,
            coding_order: co,
            layer,
            frame_type: t,
            record_bits: m + c + o,
            motion_bits: m,
            contextual_bits: c,
            overhead_bits: o,
            psnr,
            chunks: vec![ChunkStat {
                kind: ChunkKind::ContextualLatent,
                actual_bits: c,
                estimated_bits: c as f64 * 0.99 + 0.1,
            }],
        };
        let frames = vec![
            mk(0, 0, 0, FrameType::I, 0, 4000, 40, 31.25),
            mk(2, 1, 0, FrameType::I, 0, 3900, 40, f64::INFINITY),
            mk(1, 2, 1, FrameType::B, 300, 900, 48, 29.5),
        ];
        let total = 64 + frames.iter().map(|f| f.record_bits).sum::<u64>();
        SequenceStats {
            width: 64,
            height: 48,
            rate_idx: 1.5,
            header_bits: 64,
            total_bits: total,
            frames,
            max_live_refs: 2,
        }
    }

    #[test]
    fn shares_sum_to_hundred_and_layers_match() {
        let s = sample();
        for f in &s.frames {
            let b = bit_shares(f);
            assert!((b.motion + b.contextual + b.overhead - 100.0).abs() < 1e-9);
        }
        let t = layer_table(&s);
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].mean_psnr, 29.5);
        assert_eq!(t[0].mean_bits, 3990.0);
        assert!((motion_share(&s) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn stats_text_roundtrip_gives_identical_reports() {
        let s = sample();
        let back = stats_from_str(&stats_to_string(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(frame_csv(&back), frame_csv(&s));
        assert_eq!(frame_plot_svg(&back).unwrap(), frame_plot_svg(&s).unwrap());
        assert!(stats_from_str("frame 1 2").is_err());
    }

    #[test]
    fn rd_plot_is_svg() {
        let c = vec![(
            "a".to_string(),
            vec![RdPoint::new(0.1, 30.0), RdPoint::new(0.2, 32.0), RdPoint::new(0.4, 34.0)],
        )];
        let svg = rd_plot_svg(&c, "PSNR (dB)").unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}

//! Optical flow: the pyramid estimator, motion prediction from the
//! cross-reference flow, flow downsampling and warping.
//!
//! Flows are `[2, H, W]` displacements in pixels, x first. A flow `v` from
//! frame `a` into frame `b` satisfies `warp(b, v) ≈ a`, i.e. it points from
//! each pixel of `a` to where its content sits in `b`.

use bvc_tensor::{concat, ParamStore, Tensor, Var};

use crate::error::{invalid, Result};
use crate::nn::{half, Conv, Fwd, LEAKY};

/// A displacement field between two display indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub values: Tensor,
    pub source: usize,
    pub target: usize,
}

impl Flow {
    pub fn new(values: Tensor, source: usize, target: usize) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != 2 {
            return Err(invalid(format!("flow must be [2,H,W], got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(invalid("flow contains non-finite values"));
        }
        Ok(Flow { values, source, target })
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dims3();
        (h, w)
    }
}

/// Weights of the two cross-reference flows used as predictions of the
/// current frame's flows, given distances `d_f = t - f` and `d_b = b - t`.
/// Equal distances give exactly one half.
pub fn prediction_weights(d_f: usize, d_b: usize) -> Result<(f32, f32)> {
    if d_f == 0 || d_b == 0 {
        return Err(invalid("reference distances must be positive"));
    }
    if d_f == d_b {
        return Ok((0.5, 0.5));
    }
    let s = (d_f + d_b) as f64;
    Ok(((d_f as f64 / s) as f32, (d_b as f64 / s) as f32))
}

/// Predictions `(pred_tf, pred_tb)` from the flows between the two
/// references, assuming constant velocity.
pub fn make_predictions(v_bf: &Flow, v_fb: &Flow, d_f: usize, d_b: usize) -> Result<(Flow, Flow)> {
    let (wf, wb) = prediction_weights(d_f, d_b)?;
    if v_bf.values.shape() != v_fb.values.shape() {
        return Err(invalid("cross-reference flows differ in shape"));
    }
    let t = v_bf.target + d_f;
    Ok((
        Flow::new(v_bf.values.scale(wf), t, v_bf.target)?,
        Flow::new(v_fb.values.scale(wb), t, v_fb.target)?,
    ))
}

pub fn make_predictions_var<'a>(v_bf: Var<'a>, v_fb: Var<'a>, d_f: usize, d_b: usize) -> Result<(Var<'a>, Var<'a>)> {
    let (wf, wb) = prediction_weights(d_f, d_b)?;
    Ok((v_bf.scale(wf), v_fb.scale(wb)))
}

/// Backward bilinear warp with border replication.
pub fn warp(feature: &Tensor, flow: &Flow) -> Result<Tensor> {
    let (_, h, w) = feature.dims3();
    if flow.hw() != (h, w) {
        return Err(invalid(format!("warp: feature {h}x{w} vs flow {:?}", flow.hw())));
    }
    let tape = bvc_tensor::Tape::inference();
    let out = tape.constant(feature.clone()).warp(tape.constant(flow.values.clone()));
    Ok(out.value())
}

/// Bilinear downsample to `ceil(h/2) × ceil(w/2)` with displacements halved.
pub fn downsample_flow_var(flow: Var<'_>) -> Var<'_> {
    let (_, h, w) = flow.dims3();
    flow.resize_bilinear(half(h), half(w)).scale(0.5)
}

pub fn downsample_flow(flow: &Flow) -> Result<Flow> {
    let (h, w) = flow.hw();
    if h < 2 || w < 2 {
        return Err(invalid("flow too small to downsample"));
    }
    let tape = bvc_tensor::Tape::inference();
    let v = downsample_flow_var(tape.constant(flow.values.clone())).value();
    Flow::new(v, flow.source, flow.target)
}

/// Everything the motion path produces for one B-frame.
#[derive(Clone, Debug)]
pub struct MotionBundle {
    pub v_tf: Tensor,
    pub v_tb: Tensor,
    pub pred_tf: Tensor,
    pub pred_tb: Tensor,
    pub r_tf: Tensor,
    pub r_tb: Tensor,
    pub rhat_tf: Tensor,
    pub rhat_tb: Tensor,
    pub vhat_tf: Tensor,
    pub vhat_tb: Tensor,
}

impl MotionBundle {
    /// Checks the additive identities `r = v - pred` and `vhat = rhat + pred`.
    pub fn new(v: [Tensor; 2], pred: [Tensor; 2], r: [Tensor; 2], rhat: [Tensor; 2], vhat: [Tensor; 2]) -> Result<Self> {
        for i in 0..2 {
            if !v[i].sub(&pred[i]).bit_eq(&r[i]) {
                return Err(invalid("MVD is not v - pred"));
            }
            if !rhat[i].add(&pred[i]).bit_eq(&vhat[i]) {
                return Err(invalid("reconstructed flow is not rhat + pred"));
            }
        }
        let [v_tf, v_tb] = v;
        let [pred_tf, pred_tb] = pred;
        let [r_tf, r_tb] = r;
        let [rhat_tf, rhat_tb] = rhat;
        let [vhat_tf, vhat_tb] = vhat;
        Ok(MotionBundle {
            v_tf,
            v_tb,
            pred_tf,
            pred_tb,
            r_tf,
            r_tb,
            rhat_tf,
            rhat_tb,
            vhat_tf,
            vhat_tb,
        })
    }
}

const LEVELS: usize = 3;
/// Search radius of the per-level matching cost volume.
const RADIUS: i32 = 2;
const COST_CH: usize = ((2 * RADIUS + 1) * (2 * RADIUS + 1)) as usize;

struct FlowLevel {
    convs: [Conv; 4],
}

/// Coarse-to-fine learned flow estimator over a 3-level image pyramid.
/// Each level predicts a residual on top of the upsampled coarser flow from
/// the first image, the second image warped by that flow, and the flow
/// itself, plus a local matching cost volume between the two.
pub struct FlowEstimator {
    levels: Vec<FlowLevel>,
}

impl FlowEstimator {
    pub fn new(store: &mut ParamStore, ch: usize) -> Self {
        let levels = (0..LEVELS)
            .map(|l| {
                let n = format!("flow.l{l}");
                FlowLevel {
                    convs: [
                        Conv::new(store, &format!("{n}.c0"), 8 + COST_CH, ch, 3, 1),
                        Conv::new(store, &format!("{n}.c1"), ch, ch, 3, 1),
                        Conv::new(store, &format!("{n}.c2"), ch, ch / 2, 3, 1),
                        Conv::zeros(store, &format!("{n}.c3"), ch / 2, 2, 3, 1),
                    ],
                }
            })
            .collect();
        FlowEstimator { levels }
    }

    /// Flow from `a` into `b`.
    pub fn estimate<'a>(&self, f: &Fwd<'a>, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        if a.shape() != b.shape() {
            return Err(invalid(format!("flow: frames {:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut pa = vec![a];
        let mut pb = vec![b];
        for _ in 1..LEVELS {
            let (_, h, w) = pa.last().unwrap().dims3();
            pa.push(pa.last().unwrap().resize_bilinear(half(h), half(w)));
            pb.push(pb.last().unwrap().resize_bilinear(half(h), half(w)));
        }
        let mut flow: Option<Var<'a>> = None;
        for l in (0..LEVELS).rev() {
            let (_, h, w) = pa[l].dims3();
            let up = match flow {
                None => f.c(Tensor::zeros(&[2, h, w])),
                Some(v) => v.resize_bilinear(h, w).scale(2.0),
            };
            let warped = pb[l].warp(up);
            let cost = cost_volume(f, pa[l], warped);
            let mut x = concat(&[pa[l], warped, up, cost]);
            let convs = &self.levels[l].convs;
            for (i, c) in convs.iter().enumerate() {
                x = c.f(f, x);
                if i + 1 < convs.len() {
                    x = x.leaky_relu(LEAKY);
                }
            }
            flow = Some(up + x);
        }
        Ok(flow.unwrap())
    }
}

/// Negative mean absolute difference between `a` and `b` shifted by every
/// integer offset within [`RADIUS`].
fn cost_volume<'a>(f: &Fwd<'a>, a: Var<'a>, b: Var<'a>) -> Var<'a> {
    let (c, h, w) = a.dims3();
    let avg = f.c(Tensor::full(&[1, c, 1, 1], -1.0 / c as f32));
    let mut planes = Vec::with_capacity(COST_CH);
    for dy in -RADIUS..=RADIUS {
        for dx in -RADIUS..=RADIUS {
            let mut off = vec![dx as f32; h * w];
            off.resize(2 * h * w, dy as f32);
            let shifted = b.warp(f.c(Tensor::new(&[2, h, w], off)));
            planes.push((a - shifted).abs().conv2d(avg, None, 1, 0));
        }
    }
    concat(&planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(v: Tensor) -> Flow {
        Flow::new(v, 0, 1).unwrap()
    }

    #[test]
    fn symmetric_prediction_halves() {
        let v = flow(Tensor::full(&[2, 4, 4], 4.0));
        let (p, q) = make_predictions(&v, &v, 8, 8).unwrap();
        assert!(p.values.data().iter().all(|&x| x == 2.0));
        assert!(q.values.data().iter().all(|&x| x == 2.0));
    }

    #[test]
    fn asymmetric_prediction_is_distance_proportional() {
        let v = flow(Tensor::full(&[2, 4, 4], 4.0));
        let (p, q) = make_predictions(&v, &v, 1, 3).unwrap();
        assert!(p.values.data().iter().all(|&x| x == 1.0));
        assert!(q.values.data().iter().all(|&x| x == 3.0));
        assert!(make_predictions(&v, &v, 0, 3).is_err());
    }

    #[test]
    fn zero_cross_flow_gives_zero_prediction() {
        let v = flow(Tensor::zeros(&[2, 3, 5]));
        let (p, _) = make_predictions(&v, &v, 2, 2).unwrap();
        assert_eq!(p.values.max_abs(), 0.0);
    }

    #[test]
    fn constant_flow_downsamples_to_quarter_after_two_steps() {
        let v = flow(Tensor::full(&[2, 16, 12], 4.0));
        let d = downsample_flow(&downsample_flow(&v).unwrap()).unwrap();
        assert_eq!(d.hw(), (4, 3));
        assert!(d.values.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn estimator_output_shape_and_rejects_mismatch() {
        let mut s = ParamStore::new(3);
        let est = FlowEstimator::new(&mut s, 8);
        let tape = bvc_tensor::Tape::inference();
        let f = Fwd::new(&tape, &s);
        let a = f.c(Tensor::full(&[3, 20, 28], 0.5));
        let b = f.c(Tensor::full(&[3, 20, 28], 0.5));
        assert_eq!(est.estimate(&f, a, b).unwrap().shape(), vec![2, 20, 28]);
        let c = f.c(Tensor::full(&[3, 20, 24], 0.5));
        assert!(est.estimate(&f, a, c).is_err());
    }
}

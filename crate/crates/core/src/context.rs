//! Multi-scale temporal context mining for one direction.
//!
//! A per-layer quality adaptor conditions the reference feature, a feature
//! extractor produces full, half and quarter resolution maps, each is
//! warped with the reconstructed flow brought to its scale, and a fusion
//! network merges the warped maps from coarse to fine. Forward and backward
//! directions never mix here.

use bvc_tensor::{concat, ParamStore, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::gop::MAX_LAYER;
use crate::motion::downsample_flow_var;
use crate::nn::{Conv, Fwd, ResBlock, Subpel, LEAKY};

/// Temporal contexts at full, half and quarter resolution.
#[derive(Clone, Copy)]
pub struct Contexts<'a> {
    pub c0: Var<'a>,
    pub c1: Var<'a>,
    pub c2: Var<'a>,
}

pub struct ContextMiner {
    adaptors: Vec<Conv>,
    fe0: Conv,
    fe0r: ResBlock,
    fe1: Conv,
    fe1r: ResBlock,
    fe2: Conv,
    fe2r: ResBlock,
    fuse2: Conv,
    up2: Subpel,
    fuse1: Conv,
    up1: Subpel,
    fuse0: Conv,
    lift: Conv,
    c_ref: usize,
}

impl ContextMiner {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let c = cfg.c_ref;
        ContextMiner {
            // Residual 1x1 adaptors start as the identity.
            adaptors: (1..=MAX_LAYER)
                .map(|l| Conv::zeros(store, &format!("ctx.adaptor{l}"), c, c, 1, 1))
                .collect(),
            fe0: Conv::new(store, "ctx.fe0", c, c, 3, 1),
            fe0r: ResBlock::new(store, "ctx.fe0r", c),
            fe1: Conv::new(store, "ctx.fe1", c, c, 3, 2),
            fe1r: ResBlock::new(store, "ctx.fe1r", c),
            fe2: Conv::new(store, "ctx.fe2", c, c, 3, 2),
            fe2r: ResBlock::new(store, "ctx.fe2r", c),
            fuse2: Conv::new(store, "ctx.fuse2", c, c, 3, 1),
            up2: Subpel::new(store, "ctx.up2", c, c, 2),
            fuse1: Conv::new(store, "ctx.fuse1", 2 * c, c, 3, 1),
            up1: Subpel::new(store, "ctx.up1", c, c, 2),
            fuse0: Conv::new(store, "ctx.fuse0", 2 * c, c, 3, 1),
            lift: Conv::new(store, "ctx.lift", 3, c, 3, 1),
            c_ref: c,
        }
    }

    /// Feature-domain version of a reconstructed I-frame.
    pub fn lift_iframe<'a>(&self, f: &Fwd<'a>, frame: Var<'a>) -> Var<'a> {
        self.lift.f(f, frame)
    }

    pub fn mine<'a>(&self, f: &Fwd<'a>, feature: Var<'a>, flow: Var<'a>, layer: usize) -> Result<Contexts<'a>> {
        if !(1..=MAX_LAYER).contains(&layer) {
            return Err(invalid(format!("layer {layer} outside 1..={MAX_LAYER}")));
        }
        let (c, h, w) = feature.dims3();
        if c != self.c_ref || flow.shape() != vec![2, h, w] {
            return Err(invalid(format!(
                "context mining: feature {:?} / flow {:?}",
                feature.shape(),
                flow.shape()
            )));
        }
        let a = feature + self.adaptors[layer - 1].f(f, feature);
        let f0 = self.fe0r.f(f, self.fe0.f(f, a));
        let f1 = self.fe1r.f(f, self.fe1.f(f, f0.leaky_relu(LEAKY)));
        let f2 = self.fe2r.f(f, self.fe2.f(f, f1.leaky_relu(LEAKY)));
        let v1 = downsample_flow_var(flow);
        let v2 = downsample_flow_var(v1);
        let w0 = f0.warp(flow);
        let w1 = f1.warp(v1);
        let w2 = f2.warp(v2);
        let (_, h1, wd1) = w1.dims3();
        let c2 = self.fuse2.f(f, w2);
        let up2 = self.up2.f(f, w2).crop(h1, wd1);
        let c1 = self.fuse1.f(f, concat(&[w1, up2]).leaky_relu(LEAKY));
        let up1 = self.up1.f(f, c1).crop(h, w);
        let c0 = self.fuse0.f(f, concat(&[w0, up1]).leaky_relu(LEAKY));
        Ok(Contexts { c0, c1, c2 })
    }
}

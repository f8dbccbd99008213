//! Temporal prior for contextual latents: the two quarter-resolution
//! contexts are fused and brought to latent resolution, then one of four
//! prior fusion adaptors mixes in the latents of B-frame references.

use bvc_tensor::{concat, ParamStore, Var};

use crate::error::{invalid, Result};
use crate::gop::RefCase;
use crate::nn::{Conv, DepthBlock, Fwd, LEAKY};

pub struct TemporalPrior {
    down1: Conv,
    down2: Conv,
    pfa: Vec<DepthBlock>,
    refine1: DepthBlock,
    refine2: DepthBlock,
}

impl TemporalPrior {
    pub fn new(store: &mut ParamStore, name: &str, c_ctx: usize, c_y: usize) -> Self {
        let mid = c_y;
        TemporalPrior {
            down1: Conv::new(store, &format!("{name}.down1"), 2 * c_ctx, mid, 3, 2),
            down2: Conv::new(store, &format!("{name}.down2"), mid, mid, 3, 2),
            pfa: RefCase::ALL
                .iter()
                .map(|case| DepthBlock::new(store, &format!("{name}.pfa{}", case.index()), mid + case.b_refs() * c_y, mid))
                .collect(),
            refine1: DepthBlock::new(store, &format!("{name}.refine1"), mid, mid),
            refine2: DepthBlock::new(store, &format!("{name}.refine2"), mid, c_y),
        }
    }

    /// `c_f2`, `c_b2`: quarter-resolution contexts; `y_f`, `y_b`: latents of
    /// the references, present exactly when that reference is a B-frame.
    pub fn forward<'a>(
        &self,
        f: &Fwd<'a>,
        c_f2: Var<'a>,
        c_b2: Var<'a>,
        y_f: Option<Var<'a>>,
        y_b: Option<Var<'a>>,
        case: RefCase,
        latent_hw: (usize, usize),
    ) -> Result<Var<'a>> {
        if y_f.is_some() != case.fwd_is_b() || y_b.is_some() != case.bwd_is_b() {
            return Err(invalid(format!("temporal prior: reference latents do not match case {case}")));
        }
        let x = self.down1.f(f, concat(&[c_f2, c_b2])).leaky_relu(LEAKY);
        let c_fb = self.down2.f(f, x).crop(latent_hw.0, latent_hw.1);
        let mut parts = vec![c_fb];
        parts.extend(y_f);
        parts.extend(y_b);
        for p in &parts[1..] {
            if p.dims3().1 != latent_hw.0 || p.dims3().2 != latent_hw.1 {
                return Err(invalid("reference latent resolution differs from the current latent"));
            }
        }
        let t = self.pfa[case.index()].f(f, concat(&parts));
        Ok(self.refine2.f(f, self.refine1.f(f, t)))
    }
}

//! Layers shared by all subnetworks.

use bvc_tensor::{concat, ParamId, ParamStore, Tape, Tensor, Var};

pub const LEAKY: f32 = 0.1;

/// Borrowed parameters plus the tape a forward pass records on.
#[derive(Clone, Copy)]
pub struct Fwd<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Fwd { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'a> {
        self.tape.param(self.store, id)
    }

    pub fn c(&self, t: Tensor) -> Var<'a> {
        self.tape.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_gain(store, name, cin, cout, k, stride, 1.0)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f32,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, gain);
        let b = store.add_const(format!("{name}.bias"), &[cout], 0.0);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    /// Zero-initialised weights, so the layer starts as a constant.
    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_gain(store, name, cin, cout, k, stride, 0.0)
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }

    pub fn f<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Var<'a> {
        x.conv2d(f.p(self.w), Some(f.p(self.b)), self.stride, self.pad)
    }
}

/// Sub-pixel upsampling: convolution to `cout·r²` channels, then shuffle.
#[derive(Clone, Debug)]
pub struct Subpel {
    conv: Conv,
    r: usize,
}

impl Subpel {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, r: usize) -> Self {
        Subpel {
            conv: Conv::new(store, name, cin, cout * r * r, 3, 1),
            r,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, r: usize) -> Self {
        Subpel {
            conv: Conv::zeros(store, name, cin, cout * r * r, 3, 1),
            r,
        }
    }

    pub fn f<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Var<'a> {
        self.conv.f(f, x).pixel_shuffle(self.r)
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        ResBlock {
            c1: Conv::new(store, &format!("{name}.c1"), c, c, 3, 1),
            c2: Conv::with_gain(store, &format!("{name}.c2"), c, c, 3, 1, 0.5),
        }
    }

    pub fn f<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Var<'a> {
        let h = self.c1.f(f, x.leaky_relu(LEAKY));
        x + self.c2.f(f, h.leaky_relu(LEAKY))
    }
}

/// Depthwise-separable block with a pointwise feed-forward stage, each with
/// a residual connection.
#[derive(Clone, Debug)]
pub struct DepthBlock {
    proj: Conv,
    dw_w: ParamId,
    dw_b: ParamId,
    pw: Conv,
    ffn1: Conv,
    ffn2: Conv,
}

impl DepthBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let dw_w = store.add_uniform(format!("{name}.dw.weight"), &[cout, 1, 3, 3], 9, 1.0);
        let dw_b = store.add_const(format!("{name}.dw.bias"), &[cout], 0.0);
        DepthBlock {
            proj: Conv::new(store, &format!("{name}.proj"), cin, cout, 1, 1),
            dw_w,
            dw_b,
            pw: Conv::with_gain(store, &format!("{name}.pw"), cout, cout, 1, 1, 0.5),
            ffn1: Conv::new(store, &format!("{name}.ffn1"), cout, 2 * cout, 1, 1),
            ffn2: Conv::with_gain(store, &format!("{name}.ffn2"), 2 * cout, cout, 1, 1, 0.5),
        }
    }

    /// Zeroes the projection weights of input channels `first..`, so those
    /// inputs start out ignored.
    pub fn mute_inputs_from(&self, store: &mut ParamStore, first: usize) {
        let w = store.value(self.proj.w).clone();
        let (cout, cin) = (w.shape()[0], w.shape()[1]);
        let k2 = w.len() / (cout * cin);
        let mut v = w.to_vec();
        for o in 0..cout {
            for i in first..cin {
                v[(o * cin + i) * k2..(o * cin + i + 1) * k2].fill(0.0);
            }
        }
        store.set_value(self.proj.w, Tensor::new(w.shape(), v));
    }

    pub fn f<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Var<'a> {
        let t = self.proj.f(f, x);
        let d = t.depthwise_conv2d(f.p(self.dw_w), Some(f.p(self.dw_b))).leaky_relu(LEAKY);
        let a = t + self.pw.f(f, d);
        let h = self.ffn1.f(f, a).leaky_relu(LEAKY);
        a + self.ffn2.f(f, h)
    }
}

/// Two-level encoder/decoder refiner with a skip connection.
#[derive(Clone, Debug)]
pub struct UBlock {
    head: ResBlock,
    down: Conv,
    mid: ResBlock,
    up: Subpel,
    fuse: Conv,
}

impl UBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        UBlock {
            head: ResBlock::new(store, &format!("{name}.head"), c),
            down: Conv::new(store, &format!("{name}.down"), c, c, 3, 2),
            mid: ResBlock::new(store, &format!("{name}.mid"), c),
            up: Subpel::new(store, &format!("{name}.up"), c, c, 2),
            fuse: Conv::with_gain(store, &format!("{name}.fuse"), 2 * c, c, 3, 1, 0.5),
        }
    }

    pub fn f<'a>(&self, f: &Fwd<'a>, x: Var<'a>) -> Var<'a> {
        let (_, h, w) = x.dims3();
        let s = self.head.f(f, x);
        let d = self.mid.f(f, self.down.f(f, s.leaky_relu(LEAKY)));
        let u = self.up.f(f, d.leaky_relu(LEAKY)).crop(h, w);
        x + self.fuse.f(f, concat(&[s, u]).leaky_relu(LEAKY))
    }
}

/// Upsamples `x` by two with a sub-pixel layer and crops to `(h, w)`.
pub fn up_to<'a>(layer: &Subpel, f: &Fwd<'a>, x: Var<'a>, h: usize, w: usize) -> Var<'a> {
    layer.f(f, x).crop(h, w)
}

pub fn half(n: usize) -> usize {
    n.div_ceil(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_shapes() {
        let mut s = ParamStore::new(1);
        let db = DepthBlock::new(&mut s, "db", 5, 7);
        let ub = UBlock::new(&mut s, "ub", 4);
        let up = Subpel::new(&mut s, "up", 4, 3, 2);
        let tape = Tape::inference();
        let f = Fwd::new(&tape, &s);
        let x = f.c(Tensor::full(&[5, 6, 10], 0.3));
        assert_eq!(db.f(&f, x).shape(), vec![7, 6, 10]);
        let y = f.c(Tensor::full(&[4, 7, 9], 0.3));
        assert_eq!(ub.f(&f, y).shape(), vec![4, 7, 9]);
        assert_eq!(up_to(&up, &f, y, 13, 17).shape(), vec![3, 13, 17]);
    }
}

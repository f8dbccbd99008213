//! Value-level forward/backward kernels. These know nothing about the tape;
//! `tape.rs` wires them into differentiable ops.

use crate::par;

const GEMM_ROW_BLOCK: usize = 32;

/// `C[m×n] (+)= A[m×k] · B[k×n]`. `A` and `B` are addressed through
/// arbitrary strides, `C` is contiguous row-major. Rows of `C` are split into
/// fixed blocks, so the result does not depend on the execution mode.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // Bounds: the largest addressed element must be inside each slice.
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    par::for_each_chunk(c, GEMM_ROW_BLOCK * n, |bi, cblk| {
        let row0 = bi * GEMM_ROW_BLOCK;
        let rows = cblk.len() / n;
        // SAFETY: row0 + rows <= m, so every element touched through the
        // offset pointer lies within `a` (checked above); `b` and `cblk` are
        // addressed within their asserted extents.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                cblk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Geometry of a square-kernel 2-D convolution over a single `[C,H,W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut col = vec![0.0f32; g.patch_len() * n];
    par::for_each_chunk(&mut col, n, |row, dst| {
        let ci = row / (g.k * g.k);
        let ky = (row / g.k) % g.k;
        let kx = row % g.k;
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for oy in 0..ho {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
            for (ox, d) in drow.iter_mut().enumerate() {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                if ix >= 0 && ix < g.w as isize {
                    *d = src[ix as usize];
                }
            }
        }
    });
    col
}

fn col2im(col: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kk = g.k * g.k;
    let mut gx = vec![0.0f32; g.cin * g.h * g.w];
    par::for_each_chunk(&mut gx, g.h * g.w, |ci, plane| {
        for r in 0..kk {
            let ky = r / g.k;
            let kx = r % g.k;
            let src = &col[(ci * kk + r) * n..(ci * kk + r + 1) * n];
            for oy in 0..ho {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let prow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                for ox in 0..wo {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        prow[ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    });
    gx
}

/// Dense convolution. `weight` is `[cout, cin, k, k]`.
pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kdim = g.patch_len();
    let mut out = vec![0.0f32; g.cout * n];
    if g.is_pointwise() {
        gemm(g.cout, kdim, n, weight, kdim, 1, x, n, 1, &mut out, false);
    } else {
        let col = im2col(x, g);
        gemm(g.cout, kdim, n, weight, kdim, 1, &col, n, 1, &mut out, false);
    }
    if let Some(b) = bias {
        par::for_each_chunk(&mut out, n, |co, row| {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        });
    }
    out
}

pub struct ConvGrads {
    pub x: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    gy: &[f32],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kdim = g.patch_len();
    let col_owned;
    let col: &[f32] = if g.is_pointwise() {
        x
    } else if need_w {
        col_owned = im2col(x, g);
        &col_owned
    } else {
        &[]
    };
    let gw = need_w.then(|| {
        let mut gw = vec![0.0f32; g.cout * kdim];
        // gy [cout×n] · colᵀ [n×kdim]
        gemm(g.cout, n, kdim, gy, n, 1, col, 1, n, &mut gw, false);
        gw
    });
    let gx = need_x.then(|| {
        let mut gcol = vec![0.0f32; kdim * n];
        // Wᵀ [kdim×cout] · gy [cout×n]
        gemm(kdim, g.cout, n, weight, 1, kdim, gy, n, 1, &mut gcol, false);
        if g.is_pointwise() {
            gcol
        } else {
            col2im(&gcol, g)
        }
    });
    let gb = need_b.then(|| {
        (0..g.cout)
            .map(|co| gy[co * n..(co + 1) * n].iter().sum())
            .collect()
    });
    ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    }
}

/// Depthwise stride-1 convolution; `weight` is `[c, 1, k, k]`, output keeps
/// the input size when `pad == k / 2`.
pub fn depthwise_forward(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Vec<f32> {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let mut out = vec![0.0f32; c * ho * wo];
    par::for_each_chunk(&mut out, ho * wo, |ch, plane| {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let wt = &weight[ch * k * k..(ch + 1) * k * k];
        let b = bias.map_or(0.0, |b| b[ch]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += wt[ky * k + kx] * src[iy as usize * w + ix as usize];
                    }
                }
                plane[oy * wo + ox] = acc;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    x: &[f32],
    weight: &[f32],
    gy: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let per_channel = par::collect(c, h * w * k * k, |ch| {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let wt = &weight[ch * k * k..(ch + 1) * k * k];
        let g = &gy[ch * ho * wo..(ch + 1) * ho * wo];
        let mut gx = vec![0.0f32; h * w];
        let mut gw = vec![0.0f32; k * k];
        let mut gb = 0.0f32;
        for oy in 0..ho {
            for ox in 0..wo {
                let go = g[oy * wo + ox];
                gb += go;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        gx[idx] += wt[ky * k + kx] * go;
                        gw[ky * k + kx] += src[idx] * go;
                    }
                }
            }
        }
        (gx, gw, gb)
    });
    let mut gx = Vec::with_capacity(c * h * w);
    let mut gw = Vec::with_capacity(c * k * k);
    let mut gb = Vec::with_capacity(c);
    for (a, b, s) in per_channel {
        gx.extend(a);
        gw.extend(b);
        gb.push(s);
    }
    (gx, gw, gb)
}

/// Bilinear tap for one output pixel of a backward warp.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    wx: f32,
    wy: f32,
    /// Sample coordinate is inside the image along x (gradient passes).
    live_x: bool,
    live_y: bool,
}

fn warp_taps(flow: &[f32], h: usize, w: usize) -> Vec<Tap> {
    let hw = h * w;
    par::collect(h, w * 8, |y| {
        let mut row = Vec::with_capacity(w);
        for x in 0..w {
            let p = y * w + x;
            let sx_raw = x as f32 + flow[p];
            let sy_raw = y as f32 + flow[hw + p];
            let max_x = (w - 1) as f32;
            let max_y = (h - 1) as f32;
            let live_x = sx_raw > 0.0 && sx_raw < max_x;
            let live_y = sy_raw > 0.0 && sy_raw < max_y;
            let sx = sx_raw.clamp(0.0, max_x);
            let sy = sy_raw.clamp(0.0, max_y);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let wx = sx - x0;
            let wy = sy - y0;
            let x0 = x0 as usize;
            let y0 = y0 as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            row.push(Tap {
                i00: y0 * w + x0,
                i01: y0 * w + x1,
                i10: y1 * w + x0,
                i11: y1 * w + x1,
                wx,
                wy,
                live_x,
                live_y,
            });
        }
        row
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Backward bilinear warp with border replication:
/// `out[c, y, x] = feat[c, y + flow_y, x + flow_x]`.
pub fn warp_forward(feat: &[f32], flow: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let taps = warp_taps(flow, h, w);
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    par::for_each_chunk(&mut out, hw, |ch, plane| {
        let f = &feat[ch * hw..(ch + 1) * hw];
        for (o, t) in plane.iter_mut().zip(&taps) {
            let top = (1.0 - t.wx) * f[t.i00] + t.wx * f[t.i01];
            let bot = (1.0 - t.wx) * f[t.i10] + t.wx * f[t.i11];
            *o = (1.0 - t.wy) * top + t.wy * bot;
        }
    });
    out
}

pub fn warp_backward(
    feat: &[f32],
    flow: &[f32],
    gy: &[f32],
    c: usize,
    h: usize,
    w: usize,
    need_feat: bool,
    need_flow: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let taps = warp_taps(flow, h, w);
    let hw = h * w;
    let gfeat = need_feat.then(|| {
        let mut gf = vec![0.0f32; c * hw];
        par::for_each_chunk(&mut gf, hw, |ch, plane| {
            let g = &gy[ch * hw..(ch + 1) * hw];
            for (p, t) in taps.iter().enumerate() {
                let go = g[p];
                plane[t.i00] += go * (1.0 - t.wx) * (1.0 - t.wy);
                plane[t.i01] += go * t.wx * (1.0 - t.wy);
                plane[t.i10] += go * (1.0 - t.wx) * t.wy;
                plane[t.i11] += go * t.wx * t.wy;
            }
        });
        gf
    });
    let gflow = need_flow.then(|| {
        let mut gx = vec![0.0f32; hw];
        let mut gyv = vec![0.0f32; hw];
        let pairs = par::collect(hw, c * 8, |p| {
            let t = taps[p];
            let mut dx = 0.0f32;
            let mut dy = 0.0f32;
            for ch in 0..c {
                let f = &feat[ch * hw..(ch + 1) * hw];
                let go = gy[ch * hw + p];
                let top_d = f[t.i01] - f[t.i00];
                let bot_d = f[t.i11] - f[t.i10];
                dx += go * ((1.0 - t.wy) * top_d + t.wy * bot_d);
                let top = (1.0 - t.wx) * f[t.i00] + t.wx * f[t.i01];
                let bot = (1.0 - t.wx) * f[t.i10] + t.wx * f[t.i11];
                dy += go * (bot - top);
            }
            (
                if t.live_x { dx } else { 0.0 },
                if t.live_y { dy } else { 0.0 },
            )
        });
        for (p, (dx, dy)) in pairs.into_iter().enumerate() {
            gx[p] = dx;
            gyv[p] = dy;
        }
        gx.extend(gyv);
        gx
    });
    (gfeat, gflow)
}

/// Per-axis interpolation coefficients, half-pixel centres (`align_corners = false`).
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|d| {
            let s = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = (s - i0 as f32).clamp(0.0, 1.0);
            (i0, i1, l)
        })
        .collect()
}

pub fn resize_forward(x: &[f32], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f32> {
    let ry = resize_axis(h, ho);
    let rx = resize_axis(w, wo);
    let mut out = vec![0.0f32; c * ho * wo];
    par::for_each_chunk(&mut out, ho * wo, |ch, plane| {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                plane[oy * wo + ox] = (1.0 - ly) * top + ly * bot;
            }
        }
    });
    out
}

pub fn resize_backward(gy: &[f32], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f32> {
    let ry = resize_axis(h, ho);
    let rx = resize_axis(w, wo);
    let mut gx = vec![0.0f32; c * h * w];
    par::for_each_chunk(&mut gx, h * w, |ch, plane| {
        let g = &gy[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                let go = g[oy * wo + ox];
                plane[y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += go * (1.0 - ly) * lx;
                plane[y1 * w + x0] += go * ly * (1.0 - lx);
                plane[y1 * w + x1] += go * ly * lx;
            }
        }
    });
    gx
}

/// `[c·r², h, w] → [c, h·r, w·r]`.
pub fn pixel_shuffle(x: &[f32], c: usize, h: usize, w: usize, r: usize) -> Vec<f32> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0f32; c * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |ch, plane| {
        for i in 0..r {
            for j in 0..r {
                let src = &x[(ch * r * r + i * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        plane[(y * r + i) * ow + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    });
    out
}

/// Inverse of [`pixel_shuffle`]; `c`, `h`, `w` describe the shuffled output.
pub fn pixel_unshuffle(y: &[f32], c: usize, h: usize, w: usize, r: usize) -> Vec<f32> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0f32; c * r * r * h * w];
    par::for_each_chunk(&mut out, h * w, |sub, plane| {
        let ch = sub / (r * r);
        let i = (sub / r) % r;
        let j = sub % r;
        let src = &y[ch * oh * ow..(ch + 1) * oh * ow];
        for yy in 0..h {
            for xx in 0..w {
                plane[yy * w + xx] = src[(yy * r + i) * ow + xx * r + j];
            }
        }
    });
    out
}

/// Batched matrix product `[b, m, k] · [b, k, n]`.
pub fn bmm(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            k,
            1,
            &b[i * k * n..(i + 1) * k * n],
            n,
            1,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    out
}

pub fn bmm_backward(
    a: &[f32],
    b: &[f32],
    gy: &[f32],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut ga = vec![0.0f32; batch * m * k];
    let mut gb = vec![0.0f32; batch * k * n];
    for i in 0..batch {
        let ai = &a[i * m * k..(i + 1) * m * k];
        let bi = &b[i * k * n..(i + 1) * k * n];
        let gi = &gy[i * m * n..(i + 1) * m * n];
        // gA = gY · Bᵀ
        gemm(m, n, k, gi, n, 1, bi, 1, n, &mut ga[i * m * k..(i + 1) * m * k], false);
        // gB = Aᵀ · gY
        gemm(k, m, n, ai, 1, k, gi, n, 1, &mut gb[i * k * n..(i + 1) * k * n], false);
    }
    (ga, gb)
}

/// Probability mass of the unit-width bin centred on `x` under
/// Laplace(`mu`, `b`), evaluated in f64 without catastrophic cancellation.
pub fn laplace_bin_mass(x: f64, mu: f64, b: f64) -> f64 {
    let a = (x - mu).abs();
    if a >= 0.5 {
        0.5 * (-(a - 0.5) / b).exp() * (-(-1.0 / b).exp_m1())
    } else {
        1.0 - 0.5 * (-(0.5 + a) / b).exp() - 0.5 * (-(0.5 - a) / b).exp()
    }
}

/// Partial derivatives of the bin mass with respect to `u = x - mu` and `b`.
fn laplace_bin_mass_grad(u: f64, b: f64) -> (f64, f64) {
    let a = u.abs();
    let s = if u >= 0.0 { 1.0 } else { -1.0 };
    if a >= 0.5 {
        let p = laplace_bin_mass(a, 0.0, b);
        let e = (-1.0 / b).exp();
        let dp_da = -p / b;
        let dlog_db = (a - 0.5) / (b * b) - e / (b * b * (1.0 - e));
        (s * dp_da, p * dlog_db)
    } else {
        let e1 = (-(0.5 + a) / b).exp();
        let e2 = (-(0.5 - a) / b).exp();
        let dp_da = 0.5 / b * e1 - 0.5 / b * e2;
        let dp_db = -0.5 * e1 * (0.5 + a) / (b * b) - 0.5 * e2 * (0.5 - a) / (b * b);
        (s * dp_da, dp_db)
    }
}

/// Bits `-log2(max(P, floor))` per element plus the derivatives of the bits
/// with respect to `u = x - mu` and `b`. Floored elements keep the gradient
/// of the unfloored mass scaled by the floor so that training can recover.
pub fn laplace_bits(x: &[f32], mu: &[f32], b: &[f32], floor: f64) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = x.len();
    let res = par::collect(n, 64, |i| {
        let u = x[i] as f64 - mu[i] as f64;
        let bb = b[i] as f64;
        let p = laplace_bin_mass(u, 0.0, bb);
        let pf = p.max(floor);
        let bits = -pf.log2();
        let (dpu, dpb) = laplace_bin_mass_grad(u, bb);
        let k = -1.0 / (pf * std::f64::consts::LN_2);
        (bits as f32, (k * dpu) as f32, (k * dpb) as f32)
    });
    let mut bits = Vec::with_capacity(n);
    let mut du = Vec::with_capacity(n);
    let mut db = Vec::with_capacity(n);
    for (a, c, d) in res {
        bits.push(a);
        du.push(c);
        db.push(d);
    }
    (bits, du, db)
}

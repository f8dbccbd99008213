//! PSNR and MS-SSIM on `[3,H,W]` images in `[0,1]`.

use bvc_tensor::Tensor;

use crate::error::{invalid, Result};

/// Weights of the five MS-SSIM scales, coarsest last.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(invalid(format!("metric shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1/MSE)`; identical images give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

fn gaussian(n: usize) -> Vec<f64> {
    let c = (n / 2) as f64;
    let g: Vec<f64> = (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of one plane.
fn filter(p: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = g.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|k| g[k] * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|k| g[k] * tmp[(y + k) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    // Coarse scales of small frames are narrower than the window.
    let mut n = WIN.min(h).min(w);
    if n % 2 == 0 {
        n -= 1;
    }
    let g = gaussian(n);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ..) = filter(a, h, w, &g);
    let (mu_b, ..) = filter(b, h, w, &g);
    let (saa, ..) = filter(&prod(a, a), h, w, &g);
    let (sbb, ..) = filter(&prod(b, b), h, w, &g);
    let (sab, ..) = filter(&prod(a, b), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    let n = mu_a.len() as f64;
    (ssim / n, cs / n)
}

fn pool2(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = 0.25 * (p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, ho, wo)
}

/// Five-scale MS-SSIM, averaged over channels. Frames must be at least
/// 16 pixels on each side so the coarsest scale is non-empty.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.dims3();
    if h < 16 || w < 16 {
        return Err(invalid(format!("MS-SSIM needs at least 16x16, got {h}x{w}")));
    }
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor| t.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (mut pa, mut pb, mut hh, mut ww) = (plane(a), plane(b), h, w);
        let mut v = 1.0;
        for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&pa, &pb, hh, ww);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { ssim } else { cs };
            v *= term.max(0.0).powf(wt);
            if s + 1 < MS_SSIM_WEIGHTS.len() {
                let (na, nh, nw) = pool2(&pa, hh, ww);
                pa = na;
                pb = pool2(&pb, hh, ww).0;
                hh = nh;
                ww = nw;
            }
        }
        total += v;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let a = Tensor::full(&[3, 32, 32], 0.5);
        let b = Tensor::full(&[3, 32, 32], 0.6);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-7);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_is_normalised() {
        let g = gaussian(11);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g[0] - g[10]).abs() < 1e-15);
    }

    #[test]
    fn rejects_tiny_and_mismatched() {
        let a = Tensor::zeros(&[3, 8, 8]);
        assert!(ms_ssim(&a, &a).is_err());
        assert!(psnr(&a, &Tensor::zeros(&[3, 8, 9])).is_err());
    }
}

//! Bjøntegaard delta rate over piecewise-cubic (monotone Hermite) fits of
//! log10 rate as a function of quality.

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    /// PSNR in dB or MS-SSIM.
    pub quality: f64,
    pub rate_idx: f64,
    pub tag: String,
}

impl RdPoint {
    pub fn new(bpp: f64, quality: f64) -> Self {
        RdPoint {
            bpp,
            quality,
            rate_idx: 0.0,
            tag: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BdResult {
    /// Average rate difference of `test` against `anchor`; negative is a
    /// saving.
    pub percent: f64,
    pub anchor: String,
    pub test: String,
}

/// Monotone cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` strictly increasing, at least two knots.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        assert!(n >= 2 && n == y.len());
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let s: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![s[0], s[0]];
        } else {
            for i in 1..n - 1 {
                if s[i - 1] * s[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / s[i - 1] + w2 / s[i]);
                }
            }
            d[0] = end_slope(h[0], h[1], s[0], s[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], s[n - 2], s[n - 3]);
        }
        Pchip { x, y, d }
    }

    fn segment(&self, t: f64) -> usize {
        match self.x.iter().rposition(|&k| k <= t) {
            None => 0,
            Some(i) => i.min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let u = (t - self.x[i]) / h;
        let (u2, u3) = (u * u, u * u * u);
        (2.0 * u3 - 3.0 * u2 + 1.0) * self.y[i]
            + (u3 - 2.0 * u2 + u) * h * self.d[i]
            + (-2.0 * u3 + 3.0 * u2) * self.y[i + 1]
            + (u3 - u2) * h * self.d[i + 1]
    }

    /// Exact integral over `[a, b]` inside the knot range.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let prim = |i: usize, t: f64| {
            let h = self.x[i + 1] - self.x[i];
            let u = (t - self.x[i]) / h;
            let (u2, u3, u4) = (u * u, u * u * u, u * u * u * u);
            h * ((0.5 * u4 - u3 + u) * self.y[i]
                + (0.25 * u4 - 2.0 / 3.0 * u3 + 0.5 * u2) * h * self.d[i]
                + (-0.5 * u4 + u3) * self.y[i + 1]
                + (0.25 * u4 - u3 / 3.0) * h * self.d[i + 1])
        };
        let (ia, ib) = (self.segment(a), self.segment(b));
        if ia == ib {
            return prim(ia, b) - prim(ia, a);
        }
        let mut s = prim(ia, self.x[ia + 1]) - prim(ia, a);
        for i in ia + 1..ib {
            s += prim(i, self.x[i + 1]);
        }
        s + prim(ib, b)
    }
}

fn end_slope(h0: f64, h1: f64, s0: f64, s1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d * s0 <= 0.0 {
        0.0
    } else if s0 * s1 <= 0.0 && d.abs() > 3.0 * s0.abs() {
        3.0 * s0
    } else {
        d
    }
}

/// Sorted `(quality, log10 bpp)` knots of a curve.
fn knots(curve: &[RdPoint], name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.len() < 3 {
        return Err(invalid(format!("{name}: BD-rate needs at least 3 points, got {}", curve.len())));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(curve.len());
    for p in curve {
        if !(p.bpp > 0.0 && p.bpp.is_finite() && p.quality.is_finite()) {
            return Err(invalid(format!("{name}: rates must be positive and qualities finite")));
        }
        pts.push((p.quality, p.bpp.log10()));
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(invalid(format!("{name}: quality must increase strictly with rate")));
    }
    Ok(pts.into_iter().unzip())
}

fn label(curve: &[RdPoint]) -> String {
    curve.first().map(|p| p.tag.clone()).unwrap_or_default()
}

pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<BdResult> {
    let (qa, ra) = knots(anchor, "anchor")?;
    let (qt, rt) = knots(test, "test")?;
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    if hi <= lo {
        return Err(invalid(format!("quality ranges do not overlap ({lo:.4} >= {hi:.4})")));
    }
    let fa = Pchip::new(qa, ra);
    let ft = Pchip::new(qt, rt);
    let diff = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(BdResult {
        percent: (10f64.powf(diff) - 1.0) * 100.0,
        anchor: label(anchor),
        test: label(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(r: &[f64], q: &[f64]) -> Vec<RdPoint> {
        r.iter().zip(q).map(|(&b, &p)| RdPoint::new(b, p)).collect()
    }

    #[test]
    fn identical_and_doubled() {
        let a = curve(&[0.1, 0.2, 0.4, 0.8], &[30.0, 32.5, 34.0, 36.2]);
        assert_eq!(bd_rate(&a, &a).unwrap().percent, 0.0);
        let b = curve(&[0.2, 0.4, 0.8, 1.6], &[30.0, 32.5, 34.0, 36.2]);
        assert!((bd_rate(&a, &b).unwrap().percent - 100.0).abs() < 0.01);
    }

    #[test]
    fn errors() {
        let a = curve(&[0.1, 0.2, 0.4], &[30.0, 31.0, 32.0]);
        let far = curve(&[0.1, 0.2, 0.4], &[40.0, 41.0, 42.0]);
        assert!(bd_rate(&a, &far).is_err());
        assert!(bd_rate(&a[..2], &a).is_err());
        let bumpy = curve(&[0.1, 0.2, 0.4], &[30.0, 29.0, 32.0]);
        assert!(bd_rate(&bumpy, &a).is_err());
        assert!(bd_rate(&curve(&[0.0, 0.2, 0.4], &[30.0, 31.0, 32.0]), &a).is_err());
    }

    #[test]
    fn pchip_reproduces_knots_and_lines() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]);
        for (x, y) in [(0.0, 1.0), (1.0, 3.0), (3.0, 7.0), (4.0, 9.0), (2.0, 5.0)] {
            assert!((p.eval(x) - y).abs() < 1e-12);
        }
        assert!((p.integral(0.5, 3.5) - (2.0 * 3.5 * 3.5 / 2.0 + 3.5 - 2.0 * 0.125 - 0.5)).abs() < 1e-12);
    }
}

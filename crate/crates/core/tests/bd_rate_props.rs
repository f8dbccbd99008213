use bvc_core::bd_rate::{bd_rate, RdPoint};
use proptest::prelude::*;

fn curve() -> impl Strategy<Value = Vec<RdPoint>> {
    (0.01f64..0.2, 25.0f64..32.0, prop::collection::vec((1.2f64..3.0, 0.3f64..3.0), 3..6)).prop_map(|(b0, q0, steps)| {
        let (mut b, mut q) = (b0, q0);
        steps
            .into_iter()
            .map(|(rb, dq)| {
                b *= rb;
                q += dq;
                RdPoint::new(b, q)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn swapping_curves_inverts_the_rate_ratio(a in curve(), b in curve()) {
        if let (Ok(ab), Ok(ba)) = (bd_rate(&a, &b), bd_rate(&b, &a)) {
            let prod = (1.0 + ab.percent / 100.0) * (1.0 + ba.percent / 100.0);
            prop_assert!((prod - 1.0).abs() < 1e-9, "{} {}", ab.percent, ba.percent);
        }
    }

    #[test]
    fn uniform_rate_scaling_is_recovered(a in curve(), k in 0.5f64..2.0) {
        let b: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bpp * k, p.quality)).collect();
        let r = bd_rate(&a, &b).unwrap();
        prop_assert!((r.percent - (k - 1.0) * 100.0).abs() < 1e-6);
    }

    #[test]
    fn a_curve_above_the_anchor_saves_rate(a in curve(), dq in 0.1f64..1.0) {
        let b: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bpp, p.quality + dq)).collect();
        if let Ok(r) = bd_rate(&a, &b) {
            prop_assert!(r.percent < 0.0);
        }
    }
}

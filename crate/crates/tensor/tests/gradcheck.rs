//! Analytic gradients of every differentiable op against central finite
//! differences. The scalar probe is `Σ out ⊙ P` for a fixed random `P`,
//! accumulated in f64 so untouched outputs cancel exactly.

use bvc_tensor::{concat, par, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probe_dot(out: &Tensor, probe: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(probe.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn check<F>(name: &str, inputs: Vec<Tensor>, f: F, eps: f32, samples: usize)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31 + 7);
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.watch(t.clone())).collect();
    let out = f(&vars);
    let probe = Tensor::rand_uniform(&out.shape(), -1.0, 1.0, &mut rng);
    let loss = out.mul(tape.constant(probe.clone())).sum();
    let grads = tape.backward(loss);

    let eval = |ins: &[Tensor]| {
        let t = Tape::inference();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        probe_dot(&f(&vs).value(), &probe)
    };
    for (i, input) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[i]).unwrap_or_else(|| panic!("{name}: no gradient for input {i}"));
        assert_eq!(g.shape(), input.shape());
        for _ in 0..samples {
            let k = rng.gen_range(0..input.len());
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            let mut d = input.to_vec();
            d[k] += eps;
            plus[i] = Tensor::new(input.shape(), d.clone());
            d[k] -= 2.0 * eps;
            minus[i] = Tensor::new(input.shape(), d);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps as f64);
            let an = g.data()[k] as f64;
            let denom = an.abs().max(fd.abs()).max(1e-2);
            let rel = (an - fd).abs() / denom;
            // f32 forward values bound FD accuracy to ~1e-4 absolute.
            assert!(rel < 1e-3 || (an - fd).abs() < 1e-4, "{name}: input {i} elem {k}: analytic {an} vs fd {fd} (rel {rel})");
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

#[test]
fn conv2d_gradients() {
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
        check(
            &format!("conv s{stride} p{pad} k{k}"),
            vec![rnd(&[3, 9, 8], 1), rnd(&[4, 3, k, k], 2), rnd(&[4], 3)],
            |v| v[0].conv2d(v[1], Some(v[2]), stride, pad),
            1e-2,
            20,
        );
    }
}

#[test]
fn depthwise_gradients() {
    check(
        "depthwise",
        vec![rnd(&[4, 7, 6], 4), rnd(&[4, 1, 3, 3], 5), rnd(&[4], 6)],
        |v| v[0].depthwise_conv2d(v[1], Some(v[2])),
        1e-2,
        20,
    );
}

#[test]
fn warp_gradients() {
    let (h, w) = (10, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Fractional parts away from cell edges so ±eps never crosses a knot.
    let flow = Tensor::from_fn(&[2, h, w], |_| {
        let whole: i32 = rng.gen_range(-3..=3);
        whole as f32 + rng.gen_range(0.2..0.8)
    });
    check("warp", vec![rnd(&[3, h, w], 8), flow], |v| v[0].warp(v[1]), 1e-2, 20);
}

#[test]
fn resize_and_shuffle_gradients() {
    check("resize down", vec![rnd(&[2, 8, 6], 10)], |v| v[0].resize_bilinear(4, 3), 1e-2, 20);
    check("resize up", vec![rnd(&[2, 4, 3], 11)], |v| v[0].resize_bilinear(8, 6), 1e-2, 20);
    check("pixel shuffle", vec![rnd(&[8, 3, 4], 12)], |v| v[0].pixel_shuffle(2), 1e-2, 20);
}

#[test]
fn elementwise_gradients() {
    check("sigmoid", vec![rnd(&[2, 3, 4], 13)], |v| v[0].sigmoid(), 1e-2, 10);
    check("tanh", vec![rnd(&[2, 3, 4], 14)], |v| v[0].tanh(), 1e-2, 10);
    check("softplus", vec![rnd(&[2, 3, 4], 15)], |v| v[0].softplus(), 1e-2, 10);
    check("exp", vec![rnd(&[2, 3, 4], 16)], |v| v[0].exp(), 1e-2, 10);
    check(
        "broadcast mul/div",
        vec![rnd(&[3, 4, 5], 17), rnd(&[3, 1, 1], 18).map(|x| x + 2.0)],
        |v| v[0].mul(v[1]).add(v[0].div(v[1])),
        1e-2,
        20,
    );
    check(
        "concat narrow crop",
        vec![rnd(&[2, 5, 5], 19), rnd(&[3, 5, 5], 20)],
        |v| concat(&[v[0], v[1]]).narrow(1, 3).crop(4, 3).sqr(),
        1e-2,
        20,
    );
}

#[test]
fn bmm_gradients() {
    check("bmm", vec![rnd(&[2, 3, 4], 21), rnd(&[2, 4, 5], 22)], |v| v[0].bmm(v[1]), 1e-2, 20);
}

#[test]
fn laplace_bits_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::from_fn(&[40], |_| rng.gen_range(-4.0f32..4.0));
    let mu = Tensor::from_fn(&[40], |_| rng.gen_range(-2.0f32..2.0));
    let b = Tensor::from_fn(&[40], |_| rng.gen_range(0.3f32..3.0));
    check("laplace bits", vec![x, mu, b], |v| v[0].laplace_bits(v[1], v[2], 1e-9), 3e-3, 30);
}

#[test]
fn round_st_passes_identity_gradient() {
    let tape = Tape::new();
    let x = tape.watch(Tensor::new(&[3], vec![0.4, 1.6, -2.2]));
    let y = x.round_st();
    assert_eq!(y.value().data(), &[0.0, 2.0, -2.0]);
    let g = tape.backward(y.scale(3.0).sum());
    assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 3.0, 3.0]);
}

#[test]
fn frozen_inputs_get_no_backward() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 3, 3], 1.0));
    let y = c.sigmoid().sum();
    assert!(!y.requires_grad());
    let x = tape.watch(Tensor::full(&[2, 3, 3], 1.0));
    let z = x.mul(c).sum();
    let g = tape.backward(z);
    assert!(g.wrt(x).is_some());
}

#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    let x = rnd(&[24, 40, 40], 30);
    let w = rnd(&[24, 24, 3, 3], 31);
    let flow = rnd(&[2, 40, 40], 32).scale(3.0);
    let run = || {
        let tape = Tape::new();
        let xv = tape.watch(x.clone());
        let wv = tape.watch(w.clone());
        let fv = tape.watch(flow.clone());
        let y = xv.conv2d(wv, None, 1, 1).warp(fv).resize_bilinear(20, 20);
        let loss = y.sqr().sum();
        let g = tape.backward(loss);
        (y.value(), g.wrt(xv).unwrap().clone(), g.wrt(wv).unwrap().clone(), g.wrt(fv).unwrap().clone())
    };
    par::set_parallel(false);
    let a = run();
    par::set_parallel(true);
    let b = run();
    assert!(a.0.bit_eq(&b.0));
    assert!(a.1.bit_eq(&b.1));
    assert!(a.2.bit_eq(&b.2));
    assert!(a.3.bit_eq(&b.3));
}

#[test]
fn clamp_st_gradient_only_pulls_inward() {
    let tape = Tape::new();
    let x = tape.watch(Tensor::new(&[4], vec![-0.5, 0.3, 0.7, 1.5]));
    let g = tape.backward(x.clamp_st(0.0, 1.0).mul(tape.constant(Tensor::new(&[4], vec![1.0, 1.0, 1.0, 1.0]))).sum());
    // Descent moves x by -g: below the interval only upward moves survive.
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0]);
    let tape = Tape::new();
    let x = tape.watch(Tensor::new(&[4], vec![-0.5, 0.3, 0.7, 1.5]));
    let g = tape.backward(x.clamp_st(0.0, 1.0).scale(-1.0).sum());
    assert_eq!(g.wrt(x).unwrap().data(), &[-1.0, -1.0, -1.0, 0.0]);
    let v = Tape::inference().constant(Tensor::new(&[2], vec![-3.0, 4.0])).clamp_st(0.0, 1.0).value();
    assert_eq!(v.data(), &[0.0, 1.0]);
}

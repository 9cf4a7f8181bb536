use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn params_of(entries: &[(&str, Tensor)]) -> Params {
    let mut p = Params::new();
    for (k, t) in entries {
        p.insert(*k, t.clone());
    }
    p
}

/// Checks tape gradients of `build` against central differences.
fn check_against_fd<F>(params: &Params, build: F)
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = tape.bind_params(params).unwrap();
    let loss = build(&mut tape, &pv).unwrap();
    let grads = tape.backward(loss, &pv).unwrap();
    let fd = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let pv = t.bind_params(p)?;
            let l = build(&mut t, &pv)?;
            t.value(l).item()
        },
        params,
        1e-5,
    )
    .unwrap();
    for (a, b) in grads.flatten().iter().zip(fd.flatten()) {
        assert!(relative_error(*a, b) < 1e-5, "autodiff {a} vs fd {b}");
    }
}

#[test]
fn conv2d_of_zero_input_is_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 5, 5])).unwrap();
    let k = tape.constant(random(&[4, 3, 3, 3], &mut rng)).unwrap();
    let b = tape.constant(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap()).unwrap();
    let y = tape.conv2d(x, k, b, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[2, 4, 5, 5]);
    for (i, v) in out.data().iter().enumerate() {
        let channel = (i / 25) % 4;
        assert_eq!(*v, [0.5, -1.0, 2.0, 0.0][channel]);
    }
}

#[test]
fn conv2d_impulse_golden() {
    // Cross-correlation: an impulse reproduces the kernel rotated by 180 degrees.
    let mut impulse = Tensor::zeros(&[1, 1, 3, 3]);
    impulse.data_mut()[4] = 1.0;
    let kernel = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(impulse).unwrap();
    let k = tape.constant(kernel).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
}

#[test]
fn conv2d_shape_errors_name_the_dimension() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    let err = tape.conv2d(x, k, b, 1).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
    let k2 = tape.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(tape.conv2d(x, k2, b, 0).is_err());
    let b2 = tape.constant(Tensor::zeros(&[2])).unwrap();
    assert!(tape.conv2d(x, k2, b2, 1).unwrap_err().to_string().contains("bias"));
}

#[test]
fn conv2d_kernel_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 2, 6, 6], &mut rng);
    let params = params_of(&[("k", random(&[3, 2, 3, 3], &mut rng)), ("b", random(&[3], &mut rng))]);
    check_against_fd(&params, |tape, pv| {
        let xv = tape.constant(x.clone())?;
        let y = tape.conv2d(xv, pv.get("k")?, pv.get("b")?, 1)?;
        tape.sum(y)
    });
}

#[test]
fn conv2d_input_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = random(&[2, 2, 5, 5], &mut rng);
    let target = random(&[1, 2, 7, 7], &mut rng);
    let params = params_of(&[("x", random(&[1, 2, 7, 7], &mut rng))]);
    check_against_fd(&params, |tape, pv| {
        let kv = tape.constant(k.clone())?;
        let bv = tape.constant(Tensor::zeros(&[2]))?;
        let t = tape.constant(target.clone())?;
        let y = tape.conv2d(pv.get("x")?, kv, bv, 2)?;
        tape.mse_loss(y, t)
    });
}

#[test]
fn avgpool2_examples() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(avgpool2(&x).unwrap().data(), &[2.5]);
    let c = Tensor::full(&[2, 3, 4, 6], 0.7);
    let pooled = avgpool2(&c).unwrap();
    assert_eq!(pooled.shape(), &[2, 3, 2, 3]);
    assert!(pooled.data().iter().all(|&v| v == 0.7));
    let checker = Tensor::from_fn(&[1, 1, 8, 8], |i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 });
    assert!(avgpool2(&checker).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(avgpool2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
}

#[test]
fn avgpool_and_upsample_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = random(&[1, 2, 4, 4], &mut rng);
    let params = params_of(&[("x", random(&[1, 2, 4, 4], &mut rng))]);
    check_against_fd(&params, |tape, pv| {
        let p = tape.avgpool2(pv.get("x")?)?;
        let u = tape.upsample_nearest2(p)?;
        let sq = tape.mul(u, u)?;
        let t = tape.constant(target.clone())?;
        let m = tape.mul(sq, t)?;
        tape.sum(m)
    });
}

#[test]
fn elementwise_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Keep values away from the ReLU kink so differences are well defined.
    let away = |t: Tensor| {
        let d = t.data().iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let params = params_of(&[
        ("a", away(random(&[3, 4], &mut rng))),
        ("b", random(&[3, 4], &mut rng)),
    ]);
    check_against_fd(&params, |tape, pv| {
        let (a, b) = (pv.get("a")?, pv.get("b")?);
        let r = tape.relu(a)?;
        let s = tape.add(r, b)?;
        let d = tape.sub(s, a)?;
        let m = tape.mul(d, b)?;
        let sc = tape.scale(m, 0.3)?;
        tape.sum(sc)
    });
}

#[test]
fn relu_passes_zero_gradient_for_negative_inputs() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![3], vec![-2.0, -0.5, 1.5]).unwrap()).unwrap();
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let t = tape.value_with_grad(s, x).unwrap();
    assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn conv1d_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = random(&[1, 1, 16], &mut rng);
    let y = random(&[1, 1, 16], &mut rng);
    let params = params_of(&[("theta", random(&[1, 1, 3], &mut rng))]);
    check_against_fd(&params, |tape, pv| {
        let uv = tape.constant(u.clone())?;
        let yv = tape.constant(y.clone())?;
        let c = tape.conv1d(uv, pv.get("theta")?, 1)?;
        let m = tape.mul(c, yv)?;
        let s = tape.sum(m)?;
        tape.scale(s, 1.0 / 16.0)
    });
}

#[test]
fn mse_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![2], vec![0.0, 2.0]).unwrap()).unwrap();
    let z = tape.constant(Tensor::zeros(&[2])).unwrap();
    let l = tape.mse_loss(a, z).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 2.0);
    let l0 = tape.mse_loss(a, a).unwrap();
    assert_eq!(tape.value(l0).item().unwrap(), 0.0);
    let bad = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(tape.mse_loss(a, bad).is_err());
}

#[test]
fn backward_examples() {
    let params = params_of(&[("theta", Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap()), ("unused", Tensor::full(&[2], 4.0))]);
    let mut tape = Tape::new();
    let pv = tape.bind_params(&params).unwrap();
    let loss = tape.sum(pv.get("theta").unwrap()).unwrap();
    let g = tape.backward(loss, &pv).unwrap();
    assert_eq!(g.get("theta").unwrap().data(), &[1.0; 3]);
    assert_eq!(g.get("unused").unwrap().data(), &[0.0; 2]);
    let not_scalar = pv.get("theta").unwrap();
    assert!(tape.backward(not_scalar, &pv).is_err());
}

#[test]
fn backward_of_conv_mse_matches_fd_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u = random(&[1, 1, 8, 8], &mut rng);
    let y = random(&[1, 1, 8, 8], &mut rng);
    let params = params_of(&[("k", random(&[1, 1, 3, 3], &mut rng)), ("b", random(&[1], &mut rng))]);
    check_against_fd(&params, |tape, pv| {
        let uv = tape.constant(u.clone())?;
        let yv = tape.constant(y.clone())?;
        let p = tape.conv2d(uv, pv.get("k")?, pv.get("b")?, 1)?;
        tape.mse_loss(p, yv)
    });
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = random(&[2, 3, 8, 8], &mut rng);
    let params = params_of(&[("k", random(&[4, 3, 3, 3], &mut rng)), ("b", random(&[4], &mut rng))]);
    let run = || {
        let mut tape = Tape::new();
        let pv = tape.bind_params(&params).unwrap();
        let x = tape.constant(u.clone()).unwrap();
        let y = tape.conv2d(x, pv.get("k").unwrap(), pv.get("b").unwrap(), 1).unwrap();
        let r = tape.relu(y).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s, &pv).unwrap().flatten()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn finite_diff_examples() {
    let p = params_of(&[("t", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
    let quad = finite_diff_grad(|q| Ok(q.flatten().iter().map(|v| v * v).sum()), &p, 1e-5).unwrap();
    assert!((quad.flatten()[0] - 2.0).abs() < 1e-8 && (quad.flatten()[1] - 4.0).abs() < 1e-8);
    for step in [1e-1, 1.0, 3.0] {
        let lin = finite_diff_grad(|q| Ok(3.0 * q.flatten()[0] - 0.5 * q.flatten()[1]), &p, step).unwrap();
        assert!((lin.flatten()[0] - 3.0).abs() < 1e-12 && (lin.flatten()[1] + 0.5).abs() < 1e-12);
    }
    assert!(finite_diff_grad(|_| Ok(0.0), &p, 0.0).is_err());
}

#[test]
fn non_finite_values_are_reported() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2], 1e300)).unwrap();
    assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    assert!(tape.constant(Tensor::full(&[1], f64::NAN)).is_err());
}

#[test]
fn injected_fault_breaks_kernel_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[1, 1, 4, 4], &mut rng);
    let params = params_of(&[("k", random(&[1, 1, 3, 3], &mut rng)), ("b", Tensor::zeros(&[1]))]);
    let grad_with = |tape: &mut Tape| {
        let pv = tape.bind_params(&params).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.conv2d(xv, pv.get("k").unwrap(), pv.get("b").unwrap(), 1).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &pv).unwrap()
    };
    let good = grad_with(&mut Tape::new());
    let bad = grad_with(&mut Tape::with_faults(FaultInjection { conv_kernel_grad_scale: Some(1.5) }));
    assert_ne!(good.get("k"), bad.get("k"));
}

use iresnet_core::engine::{
    finite_diff_check, BatchNormState, Mode, ParamKind, ParamStore, Parameter, Sgd, Tape, Tensor, Var,
};
use iresnet_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Distinct values, so max-pool windows never tie and ReLU inputs stay clear of 0.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| (order[i] as f64 - n as f64 / 2.0 + 0.5) * 0.1)
}

fn store(operands: &[Tensor<f64>]) -> ParamStore<f64> {
    let mut ps = ParamStore::new();
    for (i, t) in operands.iter().enumerate() {
        ps.push(Parameter::new(format!("x{i}"), ParamKind::Other, t.clone())).unwrap();
    }
    ps
}

/// Worst central-difference error of `op` with respect to every operand
/// element, under the loss `sum(op(..) * r)` for a fixed random `r`.
fn grad_error(operands: &[Tensor<f64>], op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut ps = store(operands);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..ps.len()).map(|i| tape.param(&ps, i)).collect();
        let out = op(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let proj = random(&out_shape, 99);
    let coords: Vec<(usize, usize)> = operands
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
        .collect();
    let report = finite_diff_check(&mut ps, &coords, 1e-5, |ps| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..ps.len()).map(|i| tape.param(ps, i)).collect();
        let out = op(&mut tape, &vars)?;
        let loss = if tape.value(out).numel() == 1 { out } else { tape.weighted_sum(out, proj.clone())? };
        let value = tape.value(loss).data()[0];
        tape.backward(loss, ps)?;
        Ok(value)
    })
    .unwrap();
    report.max_rel_error
}

fn conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize, groups: usize) -> Tensor<f32> {
    iresnet_core::engine::kernels::conv2d_forward(x, w, None, (stride, stride), (pad, pad), groups)
        .unwrap()
        .0
}

fn forward1(x: Tensor<f64>, op: impl FnOnce(&mut Tape<f64>, Var) -> Result<Var>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.input(x);
    let out = op(&mut tape, v).unwrap();
    tape.value(out).clone()
}

#[test]
fn conv_scalar_multiply() {
    let x = Tensor::new([1, 1, 1, 1], vec![2.0f32]).unwrap();
    let w = Tensor::new([1, 1, 1, 1], vec![3.0f32]).unwrap();
    assert_eq!(conv(&x, &w, 1, 0, 1).data(), &[6.0]);
}

#[test]
fn conv_of_zeros_is_zero() {
    let x = Tensor::<f32>::zeros([2, 3, 5, 5]);
    let w = random(&[4, 3, 3, 3], 1).cast::<f32>();
    assert!(conv(&x, &w, 1, 1, 1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn depthwise_channels_are_independent() {
    let c = 4;
    let x = random(&[1, c, 6, 6], 2).cast::<f32>();
    let w = random(&[c, 1, 3, 3], 3).cast::<f32>();
    let base = conv(&x, &w, 1, 1, c);
    for perturbed in 0..c {
        let mut x2 = x.clone();
        let plane = 36;
        for v in &mut x2.data_mut()[perturbed * plane..(perturbed + 1) * plane] {
            *v += 1.0;
        }
        let y = conv(&x2, &w, 1, 1, c);
        for ch in 0..c {
            let same = y.data()[ch * plane..(ch + 1) * plane] == base.data()[ch * plane..(ch + 1) * plane];
            assert_eq!(same, ch != perturbed, "perturbing {perturbed} affected {ch}");
        }
    }
}

#[test]
fn grouped_conv_matches_sliced_convs() {
    let x = random(&[1, 4, 5, 5], 4).cast::<f32>();
    let w = random(&[8, 2, 3, 3], 5).cast::<f32>();
    let grouped = conv(&x, &w, 1, 1, 2);
    let halves: Vec<Tensor<f32>> = (0..2)
        .map(|g| {
            let xs = x.narrow_channels(2 * g, 2 * g + 2).unwrap();
            let ws = Tensor::new([4, 2, 3, 3], w.data()[g * 72..(g + 1) * 72].to_vec()).unwrap();
            conv(&xs, &ws, 1, 1, 1)
        })
        .collect();
    let sliced = Tensor::concat_channels(&halves).unwrap();
    assert!(grouped.max_abs_diff(&sliced).unwrap() <= 1e-5);
}

#[test]
fn strided_pointwise_conv_subsamples() {
    let x = random(&[2, 3, 7, 6], 6);
    let w = random(&[5, 3, 1, 1], 7);
    let k = iresnet_core::engine::kernels::conv2d_forward;
    let (dense, _) = k(&x, &w, None, (1, 1), (0, 0), 1).unwrap();
    let (strided, _) = k(&x, &w, None, (2, 2), (0, 0), 1).unwrap();
    assert_eq!(strided.shape(), &[2, 5, 4, 3]);
    for n in 0..2 {
        for c in 0..5 {
            for i in 0..4 {
                for j in 0..3 {
                    let s = strided.data()[((n * 5 + c) * 4 + i) * 3 + j];
                    let d = dense.data()[((n * 5 + c) * 7 + 2 * i) * 6 + 2 * j];
                    assert_eq!(s, d);
                }
            }
        }
    }
}

#[test]
fn conv_rejects_bad_groups() {
    let x = Tensor::<f32>::zeros([1, 5, 4, 4]);
    let w = Tensor::<f32>::zeros([4, 2, 3, 3]);
    let err = iresnet_core::engine::kernels::conv2d_forward(&x, &w, None, (1, 1), (1, 1), 2).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_) | Error::ShapeMismatch(_)), "{err}");
}

fn bn(x: Tensor<f64>, gamma: &[f64], beta: &[f64], state: &mut BatchNormState<f64>) -> Result<Tensor<f64>> {
    let mut ps = store(&[Tensor::new([gamma.len()], gamma.to_vec())?, Tensor::new([beta.len()], beta.to_vec())?]);
    ps.get_mut(0).kind = ParamKind::BnGamma;
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let (g, b) = (tape.param(&ps, 0), tape.param(&ps, 1));
    let out = tape.batch_norm(xv, g, b, state)?;
    Ok(tape.value(out).clone())
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let x = random(&[2, 3, 4, 4], 8);
    let mut state = BatchNormState::new(0, 1, 3);
    state.mode = Mode::Eval;
    let y = bn(x.clone(), &[1.0; 3], &[0.0; 3], &mut state).unwrap();
    let scale = 1.0 / (1.0 + state.eps).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() < 1e-12);
    }
    assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
}

#[test]
fn batch_norm_train_constant_input_gives_beta() {
    let x = Tensor::full([2, 2, 3, 3], 4.5);
    let mut state = BatchNormState::new(0, 1, 2);
    let y = bn(x, &[2.0, -1.0], &[0.25, -0.75], &mut state).unwrap();
    for (i, &v) in y.data().iter().enumerate() {
        let beta = if (i / 9) % 2 == 0 { 0.25 } else { -0.75 };
        assert_eq!(v, beta);
    }
}

#[test]
fn batch_norm_train_statistics() {
    let x = random(&[4, 3, 2, 2], 9);
    let gamma = [1.5, -0.5, 2.0];
    let beta = [0.1, 0.2, -0.3];
    let mut state = BatchNormState::new(0, 1, 3);
    let y = bn(x.clone(), &gamma, &beta, &mut state).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 4..(n * 3 + c + 1) * 4].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!((mean - beta[c]).abs() < 1e-5, "channel {c} mean {mean}");
        // eps shrinks the variance slightly below gamma^2
        let xs: Vec<f64> = (0..4).flat_map(|n| x.data()[(n * 3 + c) * 4..(n * 3 + c + 1) * 4].to_vec()).collect();
        let xm = xs.iter().sum::<f64>() / 16.0;
        let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 16.0;
        let expected = gamma[c] * gamma[c] * xv / (xv + state.eps);
        assert!((var - expected).abs() < 1e-5, "channel {c} var {var} vs {expected}");
        assert!(state.running_var[c] >= 0.0);
    }
}

#[test]
fn batch_norm_updates_running_stats_with_momentum() {
    let x = Tensor::from_fn([2, 1, 1, 2], |i| i as f64);
    let mut state = BatchNormState::new(0, 1, 1);
    bn(x, &[1.0], &[0.0], &mut state).unwrap();
    // mean 1.5, unbiased variance 5/3
    assert!((state.running_mean[0] - 0.15).abs() < 1e-12);
    assert!((state.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_channel_mismatch_is_rejected() {
    let mut state = BatchNormState::new(0, 1, 3);
    let err = bn(Tensor::zeros([2, 2, 2, 2]), &[1.0; 3], &[0.0; 3], &mut state).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn relu_values_and_gradient_at_zero() {
    let x = Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(forward1(x.clone(), |t, v| t.relu(v)).data(), &[0.0, 0.0, 2.0]);
    let pos = Tensor::new([3], vec![0.5, 1.0, 2.0]).unwrap();
    assert_eq!(forward1(pos.clone(), |t, v| t.relu(v)), pos);

    let mut ps = store(&[x]);
    let mut tape = Tape::new();
    let v = tape.param(&ps, 0);
    let y = tape.relu(v).unwrap();
    let loss = tape.weighted_sum(y, Tensor::full([3], 1.0)).unwrap();
    tape.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.get(0).grad.data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn max_pool_ramp() {
    let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
    let y = forward1(x, |t, v| t.max_pool2d(v, (3, 3), (2, 2), (1, 1)));
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
}

#[test]
fn max_pool_constant_and_shape() {
    let y = forward1(Tensor::full([1, 2, 5, 5], -3.0), |t, v| t.max_pool2d(v, (3, 3), (2, 2), (1, 1)));
    assert!(y.data().iter().all(|&v| v == -3.0));
    let y = forward1(Tensor::zeros([1, 1, 56, 56]), |t, v| t.max_pool2d(v, (3, 3), (2, 2), (1, 1)));
    assert_eq!(y.shape(), &[1, 1, 28, 28]);
}

#[test]
fn max_pool_ties_route_to_first_cell() {
    let mut ps = store(&[Tensor::full([1, 1, 2, 2], 1.0)]);
    let mut tape = Tape::new();
    let v = tape.param(&ps, 0);
    let y = tape.max_pool2d(v, (2, 2), (2, 2), (0, 0)).unwrap();
    let loss = tape.weighted_sum(y, Tensor::full([1, 1, 1, 1], 3.0)).unwrap();
    tape.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.get(0).grad.data(), &[3.0, 0.0, 0.0, 0.0]);
}

#[test]
fn max_pool_rejects_degenerate_window() {
    let mut tape = Tape::<f64>::new();
    let v = tape.input(Tensor::zeros([1, 1, 4, 4]));
    assert!(tape.max_pool2d(v, (0, 0), (1, 1), (0, 0)).is_err());
}

#[test]
fn average_pools() {
    let y = forward1(Tensor::full([2, 3, 4, 4], 0.7), |t, v| t.global_avg_pool(v));
    assert_eq!(y.shape(), &[2, 3]);
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let y = forward1(Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap(), |t, v| t.global_avg_pool(v));
    assert_eq!(y.data(), &[4.0]);
    let y = forward1(Tensor::from_fn([1, 1, 4, 4], |i| i as f64), |t, v| t.avg_pool2d(v, (2, 2), (2, 2), (0, 0)));
    assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn linear_identity_and_zero_weight() {
    let x = random(&[3, 4], 10);
    let bias = Tensor::new([4], vec![1.0, -1.0, 0.5, 0.0]).unwrap();
    let eye = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let k = iresnet_core::engine::kernels::linear_forward;
    let y = k(&x, &eye, Some(&bias)).unwrap();
    for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
        assert_eq!(a, b + bias.data()[i % 4]);
    }
    let y = k(&x, &Tensor::zeros([4, 4]), Some(&bias)).unwrap();
    for row in y.data().chunks(4) {
        assert_eq!(row, bias.data());
    }
    assert!(k(&x, &Tensor::zeros([4, 5]), None).is_err());
}

#[test]
fn add_identity_and_commutativity() {
    let (a, b) = (random(&[2, 3, 4, 4], 11), random(&[2, 3, 4, 4], 12));
    let mut tape = Tape::new();
    let (va, vb, vz) = (tape.input(a.clone()), tape.input(b), tape.input(Tensor::zeros([2, 3, 4, 4])));
    let ab = tape.add(va, vb).unwrap();
    let ba = tape.add(vb, va).unwrap();
    let az = tape.add(va, vz).unwrap();
    assert_eq!(tape.value(ab), tape.value(ba));
    assert_eq!(tape.value(az), &a);
    let vc = tape.input(Tensor::zeros([2, 3, 4, 3]));
    assert!(matches!(tape.add(va, vc), Err(Error::ShapeMismatch(_))));
}

#[test]
fn cross_entropy_values() {
    let k = iresnet_core::engine::kernels::softmax_cross_entropy_forward;
    let (loss, _) = k(&Tensor::full([3, 10], 0.3), &[0, 4, 9]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
    assert!((loss - 2.302585).abs() < 1e-6);
    let logits = Tensor::from_fn([2, 5], |i| if i == 2 || i == 9 { 1e4 } else { 0.0 });
    let (loss, _) = k(&logits, &[2, 4]).unwrap();
    assert!(loss.abs() < 1e-12);
    assert!(matches!(k(&logits, &[2, 5]), Err(Error::InvalidArgument(_))));
}

#[test]
fn backward_semantics() {
    let mut ps = store(&[random(&[3, 4], 13), random(&[2, 2], 14)]);
    ps.get_mut(1).grad = Tensor::full([2, 2], 9.0);
    let mut tape = Tape::new();
    let x = tape.input(random(&[2, 4], 15));
    let w = tape.param(&ps, 0);
    let y = tape.linear(x, w, None).unwrap();
    let loss = tape.weighted_sum(y, Tensor::zeros([2, 3])).unwrap();
    assert_eq!(tape.value(loss).data(), &[0.0]);
    tape.backward(loss, &mut ps).unwrap();
    assert!(ps.get(0).grad.data().iter().all(|&g| g == 0.0));
    assert!(ps.get(1).grad.data().iter().all(|&g| g == 0.0), "unreachable params get zero grads");
    assert_eq!(tape.backward(loss, &mut ps), Err(Error::TapeConsumed));
    assert!(matches!(tape.relu(y), Err(Error::TapeConsumed)));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut ps = store(&[random(&[2, 2], 16)]);
    let mut tape = Tape::new();
    let v = tape.param(&ps, 0);
    assert!(tape.backward(v, &mut ps).is_err());
}

fn scalar_param(value: f64, decayable: bool) -> ParamStore<f64> {
    let mut ps = store(&[Tensor::full([1], value)]);
    ps.get_mut(0).decayable = decayable;
    ps
}

#[test]
fn sgd_plain_step() {
    let mut ps = scalar_param(1.0, true);
    ps.get_mut(0).grad = Tensor::full([1], 0.5);
    Sgd::new(0.0, 0.0).step(&mut ps, 0.1).unwrap();
    assert_eq!(ps.get(0).value.data(), &[1.0 - 0.05]);
}

#[test]
fn sgd_zero_grad_is_noop() {
    let mut ps = scalar_param(0.75, false);
    Sgd::new(0.9, 1e-4).step(&mut ps, 0.1).unwrap();
    assert_eq!(ps.get(0).value.data(), &[0.75]);
}

#[test]
fn sgd_two_steps_closed_form() {
    let (m, wd, lr, g) = (0.9, 0.01, 0.1, 2.0);
    let mut ps = scalar_param(1.0, true);
    let mut opt = Sgd::new(m, wd);
    ps.get_mut(0).grad = Tensor::full([1], g);
    opt.step(&mut ps, lr).unwrap();
    opt.step(&mut ps, lr).unwrap();
    let v1 = g + wd * 1.0;
    let w1 = 1.0 - lr * v1;
    let v2 = m * v1 + g + wd * w1;
    let w2 = w1 - lr * v2;
    assert!((ps.get(0).value.data()[0] - w2).abs() < 1e-15);
    assert!(Sgd::new(m, wd).step(&mut ps, 0.0).is_err());
}

#[test]
fn gradcheck_conv() {
    let err = grad_error(&[random(&[2, 4, 5, 5], 20), random(&[6, 2, 3, 3], 21), random(&[6], 22)], |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 1), 2)
    });
    assert!(err < GRAD_TOL, "{err}");
    let err = grad_error(&[random(&[1, 3, 4, 4], 23), random(&[2, 3, 1, 1], 24)], |t, v| {
        t.conv2d(v[0], v[1], None, (2, 2), (0, 0), 1)
    });
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn gradcheck_batch_norm() {
    for mode in [Mode::Train, Mode::Eval] {
        let err = grad_error(&[random(&[3, 2, 3, 3], 25), random(&[2], 26), random(&[2], 27)], |t, v| {
            let mut state = BatchNormState::new(1, 2, 2);
            state.running_mean = vec![0.2, -0.1];
            state.running_var = vec![0.5, 1.5];
            state.mode = mode;
            t.batch_norm(v[0], v[1], v[2], &mut state)
        });
        assert!(err < GRAD_TOL, "{mode:?}: {err}");
    }
}

#[test]
fn gradcheck_relu() {
    let err = grad_error(&[distinct(&[2, 3, 4], 28)], |t, v| t.relu(v[0]));
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn gradcheck_pools() {
    let err = grad_error(&[distinct(&[2, 2, 5, 5], 29)], |t, v| t.max_pool2d(v[0], (3, 3), (2, 2), (1, 1)));
    assert!(err < GRAD_TOL, "{err}");
    let err = grad_error(&[random(&[2, 2, 6, 6], 30)], |t, v| t.avg_pool2d(v[0], (2, 2), (2, 2), (0, 0)));
    assert!(err < GRAD_TOL, "{err}");
    let err = grad_error(&[random(&[2, 3, 3, 3], 31)], |t, v| t.global_avg_pool(v[0]));
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn gradcheck_linear_add_and_loss() {
    let err = grad_error(&[random(&[3, 5], 32), random(&[4, 5], 33), random(&[4], 34)], |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    });
    assert!(err < GRAD_TOL, "{err}");
    let err = grad_error(&[random(&[2, 3, 2], 35), random(&[2, 3, 2], 36)], |t, v| t.add(v[0], v[1]));
    assert!(err < GRAD_TOL, "{err}");
    let err = grad_error(&[random(&[4, 6], 37)], |t, v| t.softmax_cross_entropy(v[0], &[0, 5, 2, 2]));
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn gradcheck_conv_bn_relu_stack() {
    let operands = [random(&[2, 3, 6, 6], 40), random(&[4, 3, 3, 3], 41), random(&[4], 42), random(&[4], 43)];
    let err = grad_error(&operands, |t, v| {
        let mut state = BatchNormState::new(2, 3, 4);
        let y = t.conv2d(v[0], v[1], None, (1, 1), (1, 1), 1)?;
        let y = t.batch_norm(y, v[2], v[3], &mut state)?;
        let y = t.relu(y)?;
        let y = t.global_avg_pool(y)?;
        t.softmax_cross_entropy(y, &[1, 3])
    });
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn max_pool_backward_conserves_mass() {
    let x = distinct(&[2, 3, 6, 6], 50);
    let k = iresnet_core::engine::kernels::max_pool2d_forward;
    for (kernel, stride, pad) in [(2, 2, 0), (3, 2, 1), (3, 1, 1)] {
        let (y, argmax) = k(&x, (kernel, kernel), (stride, stride), (pad, pad)).unwrap();
        // integer gradients keep every partial sum exact
        let g = random(y.shape(), 51).map(|v| (v * 8.0).round());
        let dx = iresnet_core::engine::kernels::max_pool2d_backward(x.shape(), &argmax, &g).unwrap();
        let diff = (dx.sum() - g.sum()).abs();
        if kernel == stride {
            assert_eq!(dx.sum(), g.sum());
        } else {
            assert!(diff <= 1e-6, "{diff}");
        }
    }
}

use iresnet_core::engine::kernels::{
    batch_norm_forward, conv2d_forward, max_pool2d_backward, max_pool2d_forward,
};
use iresnet_core::engine::{finite_diff_check, ParamKind, ParamStore, Parameter, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: iresnet_core::engine::Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-1.0..1.0)))
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64)> {
    // (groups, cin per group, cout per group, kernel, stride, size, seed)
    (1usize..=4, 1usize..=3, 1usize..=3, prop_oneof![Just(1usize), Just(3)], 1usize..=2, 3usize..=7, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grouped_conv_is_concat_of_slices((g, cig, cog, k, s, hw, seed) in conv_case()) {
        let (cin, cout) = (g * cig, g * cog);
        let x = random::<f32>(&[2, cin, hw, hw], seed);
        let w = random::<f32>(&[cout, cig, k, k], seed ^ 1);
        let pad = k / 2;
        let (grouped, _) = conv2d_forward(&x, &w, None, (s, s), (pad, pad), g).unwrap();
        let per_group = cog * cig * k * k;
        let parts: Vec<Tensor<f32>> = (0..g)
            .map(|gi| {
                let xs = x.narrow_channels(gi * cig, (gi + 1) * cig).unwrap();
                let ws = Tensor::new([cog, cig, k, k], w.data()[gi * per_group..(gi + 1) * per_group].to_vec()).unwrap();
                conv2d_forward(&xs, &ws, None, (s, s), (pad, pad), 1).unwrap().0
            })
            .collect();
        let sliced = Tensor::concat_channels(&parts).unwrap();
        prop_assert!(grouped.max_abs_diff(&sliced).unwrap() <= 1e-5);
    }

    #[test]
    fn strided_pointwise_conv_is_subsampled(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = random::<f32>(&[1, c, h, w], seed);
        let wt = random::<f32>(&[2, c, 1, 1], seed ^ 2);
        let (dense, _) = conv2d_forward(&x, &wt, None, (1, 1), (0, 0), 1).unwrap();
        let (strided, _) = conv2d_forward(&x, &wt, None, (2, 2), (0, 0), 1).unwrap();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        prop_assert_eq!(strided.shape(), &[1, 2, oh, ow]);
        for co in 0..2 {
            for i in 0..oh {
                for j in 0..ow {
                    prop_assert_eq!(
                        strided.data()[(co * oh + i) * ow + j],
                        dense.data()[(co * h + 2 * i) * w + 2 * j]
                    );
                }
            }
        }
    }

    #[test]
    fn batch_norm_train_moments(n in 1usize..4, c in 1usize..4, hw in 4usize..6, seed in any::<u64>(), scale in 0.5f64..3.0) {
        let x = random::<f64>(&[n, c, hw, hw], seed).map(|v| v * 5.0 + 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let gamma: Vec<f64> = (0..c).map(|_| scale * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, _, _, _) = batch_norm_forward(&x, &gamma, &beta, None, 1e-5).unwrap();
        let plane = hw * hw;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| y.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            prop_assert!((m - beta[ch]).abs() <= 1e-5);
            prop_assert!((sd - gamma[ch].abs()).abs() <= 1e-4);
        }
    }

    #[test]
    fn max_pool_gradient_mass(k in 1usize..4, s in 1usize..3, hw in 3usize..8, seed in any::<u64>()) {
        let pad = k / 2;
        let x = random::<f64>(&[2, 2, hw, hw], seed);
        let (y, argmax) = max_pool2d_forward(&x, (k, k), (s, s), (pad, pad)).unwrap();
        let g = random::<f64>(y.shape(), seed ^ 4);
        let dx = max_pool2d_backward(x.shape(), &argmax, &g).unwrap();
        prop_assert!((dx.sum() - g.sum()).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn conv_gradients_match_central_differences((g, cig, cog, k, s, hw, seed) in conv_case()) {
        let (cin, cout) = (g * cig, g * cog);
        let mut ps = ParamStore::new();
        ps.push(Parameter::new("x", ParamKind::Other, random::<f64>(&[2, cin, hw, hw], seed))).unwrap();
        ps.push(Parameter::new("w", ParamKind::ConvWeight, random::<f64>(&[cout, cig, k, k], seed ^ 5))).unwrap();
        ps.push(Parameter::new("b", ParamKind::ConvBias, random::<f64>(&[cout], seed ^ 6))).unwrap();
        let pad = k / 2;
        let out_hw = (hw + 2 * pad - k) / s + 1;
        let proj = random::<f64>(&[2, cout, out_hw, out_hw], seed ^ 7);
        let coords: Vec<(usize, usize)> = (0..3).flat_map(|p| (0..ps.get(p).value.numel()).map(move |e| (p, e))).collect();
        let report = finite_diff_check(&mut ps, &coords, 1e-5, |ps| {
            let mut tape = Tape::new();
            let (x, w, b) = (tape.param(ps, 0), tape.param(ps, 1), tape.param(ps, 2));
            let y = tape.conv2d(x, w, Some(b), (s, s), (pad, pad), g)?;
            let loss = tape.weighted_sum(y, proj.clone())?;
            let v = tape.value(loss).data()[0];
            tape.backward(loss, ps)?;
            Ok(v)
        })
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }
}

use iresnet_core::engine::{ParamKind, Tensor};
use iresnet_core::networks::{Family, VariantId};
use iresnet_core::trainer::{
    augment, crop_image, evaluate, flip_image, lr_at, synthetic_dataset, topk_error, train, ArchRef,
    AugmentFlags, Dataset, TrainConfig, Trainer, CIFAR_MEAN, CIFAR_STD, CROP_PAD, IMAGE_LEN,
};
use iresnet_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(epochs: usize, milestones: Vec<usize>) -> TrainConfig {
    TrainConfig {
        arch: ArchRef {
            family: Family::Cifar,
            variant: VariantId::Iresnet,
            depth: 20,
            classes: 10,
        },
        epochs,
        batch_size: 16,
        milestones,
        record_wall_time: false,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn data(classes: usize, n: usize, seed: u64) -> Dataset {
    Dataset::from_raw(&synthetic_dataset(classes, n, seed).unwrap(), CIFAR_MEAN, CIFAR_STD).unwrap()
}

#[test]
fn synthetic_data_is_deterministic_and_balanced() {
    let a = synthetic_dataset(10, 103, 8).unwrap();
    assert_eq!(a, synthetic_dataset(10, 103, 8).unwrap());
    assert_ne!(a, synthetic_dataset(10, 103, 9).unwrap());
    assert_eq!(a.pixels.len(), 103 * IMAGE_LEN);
    let mut counts = [0usize; 10];
    a.labels.iter().for_each(|&l| counts[l] += 1);
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{counts:?}");
}

#[test]
fn two_class_blobs_are_linearly_separable() {
    // nearest class mean is a linear classifier with a closed-form fit
    let d = data(2, 400, 10);
    let (train, test) = (0..200, 200..400);
    let mut means = vec![vec![0.0f64; IMAGE_LEN]; 2];
    let mut counts = [0.0f64; 2];
    for i in train {
        counts[d.labels[i]] += 1.0;
        for (m, &v) in means[d.labels[i]].iter_mut().zip(d.image(i)) {
            *m += v as f64;
        }
    }
    for (m, c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let dist = |i: usize, m: &[f64]| d.image(i).iter().zip(m).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>();
    let correct = test
        .clone()
        .filter(|&i| {
            let pred = usize::from(dist(i, &means[1]) < dist(i, &means[0]));
            pred == d.labels[i]
        })
        .count();
    assert!(correct as f64 / test.len() as f64 > 0.9, "{correct}/200");
}

#[test]
fn augmentation_off_is_identity() {
    let d = data(10, 20, 11);
    let idx: Vec<usize> = (0..20).collect();
    let mut batch = d.batch(&idx);
    let before = batch.images.clone();
    let choices = augment(&mut batch, AugmentFlags::OFF, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(batch.images, before);
    assert!(choices.iter().all(|c| !c.flipped && c.offset == (CROP_PAD, CROP_PAD)));
}

#[test]
fn crop_shifts_with_zero_fill() {
    let original: Vec<f32> = (0..IMAGE_LEN).map(|i| i as f32 + 1.0).collect();
    let mut img = original.clone();
    crop_image(&mut img, (CROP_PAD, CROP_PAD));
    assert_eq!(img, original);
    let mut img = original.clone();
    crop_image(&mut img, (0, 2 * CROP_PAD));
    // content moves down 4 rows and left 4 columns
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let v = img[c * 1024 + y * 32 + x];
                if y < 4 || x >= 28 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, original[c * 1024 + (y - 4) * 32 + x + 4]);
                }
            }
        }
    }
}

#[test]
fn uniform_random_predictor_errs_nine_tenths() {
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = Tensor::from_fn([n, 10], |_| rng.random::<f32>());
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let e = topk_error(&logits, &labels, 1).unwrap();
    assert!((e - 0.9).abs() <= 0.05, "{e}");
    let onehot = Tensor::from_fn([n, 10], |i| if labels[i / 10] == i % 10 { 1.0 } else { 0.0 });
    assert_eq!(topk_error(&onehot, &labels, 1).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn flip_twice_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let original: Vec<f32> = (0..IMAGE_LEN).map(|_| rng.random()).collect();
        let mut img = original.clone();
        flip_image(&mut img);
        prop_assert_ne!(&img, &original);
        flip_image(&mut img);
        prop_assert_eq!(img, original);
    }

    #[test]
    fn crop_offsets_stay_in_padded_range(seed in any::<u64>()) {
        let d = data(2, 8, 13);
        let mut batch = d.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let choices = augment(&mut batch, AugmentFlags::STANDARD, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(choices.len(), 8);
        for c in choices {
            prop_assert!(c.offset.0 <= 2 * CROP_PAD && c.offset.1 <= 2 * CROP_PAD);
        }
    }

    #[test]
    fn top5_never_exceeds_top1(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn([n, 10], |_| rng.random_range(-1.0f32..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        prop_assert!(topk_error(&logits, &labels, 5).unwrap() <= topk_error(&logits, &labels, 1).unwrap());
    }
}

#[test]
fn evaluate_reports_errors_and_restores_mode() {
    let d = data(10, 30, 14);
    let mut t = Trainer::new(small_config(1, vec![])).unwrap();
    let before = t.model.mode();
    let e = evaluate(&mut t.model, &d, 7).unwrap();
    assert_eq!(t.model.mode(), before);
    assert!((0.0..=1.0).contains(&e.top1));
    assert!(e.top5.unwrap() <= e.top1);
}

#[test]
fn history_lr_follows_schedule_and_runs_repeat() {
    let d = data(10, 48, 15);
    let cfg = small_config(3, vec![1, 2]);
    let run = || train(cfg.clone(), &d, Some(&d), &mut || 0.0, &mut |_, _| Ok(())).unwrap();
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta.model.named_tensors(), tb.model.named_tensors());
    let lrs: Vec<f64> = a.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, [0.1, 0.01, 0.001]);
    for (i, r) in a.records.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert_eq!(r.lr, lr_at(&cfg, i).unwrap());
        assert!(r.val_top1.is_some() && r.val_top5.is_some());
    }
}

#[test]
fn zero_epochs_gives_empty_history() {
    let d = data(10, 20, 16);
    let (h, t) = train(small_config(0, vec![]), &d, None, &mut || 0.0, &mut |_, _| Ok(())).unwrap();
    assert!(h.records.is_empty());
    let fresh = Trainer::new(small_config(0, vec![])).unwrap();
    assert_eq!(t.model.named_tensors(), fresh.model.named_tensors());
}

#[test]
fn bn_decay_switch_only_touches_bn_params() {
    let d = data(10, 16, 17);
    let step = |bn_weight_decay: bool| {
        let mut cfg = small_config(1, vec![]);
        cfg.bn_weight_decay = bn_weight_decay;
        cfg.weight_decay = 0.05;
        let mut t = Trainer::new(cfg).unwrap();
        t.train_epoch(0, &d).unwrap();
        t.model
    };
    let (on, off) = (step(true), step(false));
    let mut bn_changed = 0;
    for (p, q) in on.params().iter().zip(off.params().iter()) {
        if p.kind.is_batch_norm() {
            bn_changed += usize::from(p.value != q.value);
        } else {
            assert_eq!(p.value, q.value, "{}", p.id);
        }
    }
    assert!(bn_changed > 0);
    assert!(off.params().iter().filter(|p| p.kind == ParamKind::BnGamma).all(|p| !p.decayable));
}

#[test]
fn divergence_reports_non_finite() {
    let d = data(10, 32, 18);
    let mut cfg = small_config(2, vec![]);
    cfg.base_lr = 1e12;
    let err = train(cfg, &d, None, &mut || 0.0, &mut |_, _| Ok(())).err().expect("training must diverge");
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("iteration") && msg.contains("lr 1000000000000"), "{msg}");
}

#[test]
fn class_count_mismatch_is_rejected() {
    let d = data(2, 16, 19);
    let mut t = Trainer::new(small_config(1, vec![])).unwrap();
    assert!(t.train_epoch(0, &d).is_err());
}

//! Small-scale supervised training on 32×32 RGB images.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Mode, Sgd, Tensor};
use crate::model::{InitPolicy, Model};
use crate::networks::{build_network, Family, VariantId};
use crate::{Error, Result};

pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];
pub const IMAGE_LEN: usize = 3 * 32 * 32;
/// Per-channel mean and std of the CIFAR-10 training set.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
/// Zero padding on each side before random cropping.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchRef {
    pub family: Family,
    pub variant: VariantId,
    pub depth: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Directory holding the binary batches.
    pub dir: Option<alloc::string::String>,
    /// Use only the first `subset` training images.
    pub subset: Option<usize>,
    pub val_subset: Option<usize>,
    /// Sizes of the generated sets for the synthetic kind.
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Cifar10,
            dir: None,
            subset: None,
            val_subset: None,
            synthetic_train: 500,
            synthetic_val: 200,
            mean: CIFAR_MEAN,
            std: CIFAR_STD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentFlags {
    pub crop: bool,
    pub flip: bool,
}

impl AugmentFlags {
    pub const OFF: Self = Self { crop: false, flip: false };
    pub const STANDARD: Self = Self { crop: true, flip: true };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchRef,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub zero_gamma: bool,
    pub bn_weight_decay: bool,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub augment: AugmentFlags,
    /// When false the history records 0 seconds per epoch.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    /// The CIFAR recipe: 164 epochs, lr 0.1 divided by 10 at epochs 81 and 122.
    fn default() -> Self {
        Self {
            arch: ArchRef {
                family: Family::Cifar,
                variant: VariantId::Iresnet,
                depth: 164,
                classes: 10,
            },
            epochs: 164,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![81, 122],
            lr_factor: 0.1,
            zero_gamma: false,
            bn_weight_decay: true,
            seed: 0,
            dataset: DatasetSpec::default(),
            augment: AugmentFlags::STANDARD,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidArgument(msg));
        if self.arch.family != Family::Cifar {
            return bad(format!("training supports the cifar family, got {}", self.arch.family));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("base lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_factor > 0.0) {
            return bad(format!("lr factor must be positive, got {}", self.lr_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be below epochs {}", self.milestones, self.epochs));
        }
        if self.dataset.std.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("normalization std must be positive: {:?}", self.dataset.std));
        }
        Ok(())
    }

    pub fn init_policy(&self) -> InitPolicy {
        InitPolicy {
            seed: self.seed,
            zero_gamma: self.zero_gamma,
            bn_weight_decay: self.bn_weight_decay,
        }
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    // Dividing by an integral 1/factor keeps 0.1 -> 0.01 -> 0.001 exact.
    let inv = 1.0 / cfg.lr_factor;
    let inv_round = Float::round(inv);
    if inv_round >= 1.0 && Float::abs(inv - inv_round) < 1e-9 {
        Ok(cfg.base_lr / Float::powi(inv_round, passed))
    } else {
        Ok(cfg.base_lr * Float::powi(cfg.lr_factor, passed))
    }
}

/// Undecoded images: `IMAGE_LEN` channel-major bytes per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * IMAGE_LEN);
        }
    }
}

/// Normalized images ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_raw(raw: &RawImages, mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if raw.pixels.len() != raw.labels.len() * IMAGE_LEN {
            return Err(Error::ShapeMismatch(format!(
                "{} labels but {} pixel bytes",
                raw.labels.len(),
                raw.pixels.len()
            )));
        }
        if let Some(&l) = raw.labels.iter().find(|&&l| l >= raw.classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{}", raw.classes)));
        }
        let plane = IMAGE_LEN / 3;
        let images = raw
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i % IMAGE_LEN) / plane;
                ((p as f64 / 255.0 - mean[c]) / std[c]) as f32
            })
            .collect();
        Ok(Self {
            images,
            labels: raw.labels.clone(),
            classes: raw.classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        LabeledBatch {
            images: Tensor::new([indices.len(), 3, 32, 32], data).expect("whole images"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Class-separable images made of a few coloured Gaussian blobs per class,
/// jittered per sample and overlaid with pixel noise. Labels are balanced.
pub fn synthetic_dataset(classes: usize, n: usize, seed: u64) -> Result<RawImages> {
    if classes < 2 || n < classes || classes > 256 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs 2..=256 classes and n >= classes, got {classes} classes, n {n}"
        )));
    }
    struct Blob {
        y: f64,
        x: f64,
        sigma: f64,
        color: [f64; 3],
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<Blob>> = (0..classes)
        .map(|_| {
            (0..3)
                .map(|_| Blob {
                    y: proto_rng.random_range(6.0..26.0),
                    x: proto_rng.random_range(6.0..26.0),
                    sigma: proto_rng.random_range(2.5..5.0),
                    color: [0; 3].map(|_| proto_rng.random_range(-1.0..1.0)),
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, 16.0).expect("positive std");
    let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
    let mut image = vec![0.0f64; IMAGE_LEN];
    for &label in &labels {
        image.fill(0.0);
        for blob in &prototypes[label] {
            let (dy, dx): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let amp: f64 = rng.random_range(0.8..1.2);
            let (cy, cx) = (blob.y + dy, blob.x + dx);
            let denom = 2.0 * blob.sigma * blob.sigma;
            for y in 0..32 {
                for x in 0..32 {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let w = amp * (-d2 / denom).exp();
                    for c in 0..3 {
                        image[c * 1024 + y * 32 + x] += w * blob.color[c];
                    }
                }
            }
        }
        for v in &image {
            let p = 128.0 + 90.0 * v + noise.sample(&mut rng);
            pixels.push(p.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RawImages { pixels, labels, classes })
}

/// Per-sample choices made by [`augment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentChoice {
    /// Crop origin in the padded image, each in `0..=2*CROP_PAD`.
    pub offset: (usize, usize),
    pub flipped: bool,
}

/// Shifts a `[3, 32, 32]` image as if cropping a zero-padded copy at `offset`.
pub fn crop_image(image: &mut [f32], offset: (usize, usize)) {
    let src = image.to_vec();
    let (oy, ox) = offset;
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let (sy, sx) = ((y + oy) as isize - CROP_PAD as isize, (x + ox) as isize - CROP_PAD as isize);
                image[c * 1024 + y * 32 + x] = if (0..32).contains(&sy) && (0..32).contains(&sx) {
                    src[c * 1024 + sy as usize * 32 + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

pub fn flip_image(image: &mut [f32]) {
    for row in image.chunks_mut(32) {
        row.reverse();
    }
}

/// Random pad-and-crop and horizontal flip, in place.
pub fn augment(batch: &mut LabeledBatch, flags: AugmentFlags, rng: &mut impl Rng) -> Vec<AugmentChoice> {
    let n = batch.labels.len();
    let mut choices = Vec::with_capacity(n);
    for img in batch.images.data_mut().chunks_mut(IMAGE_LEN) {
        let mut choice = AugmentChoice {
            offset: (CROP_PAD, CROP_PAD),
            flipped: false,
        };
        if flags.crop {
            choice.offset = (rng.random_range(0..=2 * CROP_PAD), rng.random_range(0..=2 * CROP_PAD));
            if choice.offset != (CROP_PAD, CROP_PAD) {
                crop_image(img, choice.offset);
            }
        }
        if flags.flip && rng.random_bool(0.5) {
            choice.flipped = true;
            flip_image(img);
        }
        choices.push(choice);
    }
    choices
}

/// Fraction of samples whose label is not among the `k` highest outputs.
/// Ties count against the label.
pub fn topk_error(logits: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    let n = labels.len();
    if logits.rank() != 2 || logits.shape()[0] != n || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "top-k of {:?} logits with {n} labels",
            logits.shape()
        )));
    }
    let classes = logits.shape()[1];
    let mut wrong = 0usize;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let target = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| j != label && v >= target)
            .count();
        if rank >= k {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopKErrors {
    pub top1: f64,
    /// Present when the model has at least five classes.
    pub top5: Option<f64>,
}

/// Eval-mode top-1/top-5 error over a dataset. The model's mode is restored.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, batch_size: usize) -> Result<TopKErrors> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let (mut wrong1, mut wrong5) = (0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    let result = (|| {
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch = data.batch(chunk);
            let logits = model.predict(batch.images)?;
            wrong1 += topk_error(&logits, &batch.labels, 1)? * chunk.len() as f64;
            wrong5 += topk_error(&logits, &batch.labels, 5)? * chunk.len() as f64;
        }
        Ok(())
    })();
    model.set_mode(previous);
    result?;
    let n = data.len() as f64;
    Ok(TopKErrors {
        top1: wrong1 / n,
        top5: (data.classes >= 5).then_some(wrong5 / n),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Training accuracy (fraction correct) over the epoch's batches.
    pub train_top1: f64,
    /// Validation accuracies.
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// Model, optimizer and shuffling state of one training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    optimizer: Sgd<f32>,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let a = &config.arch;
        let graph = build_network(a.family, a.variant, a.depth, a.classes)?;
        let model = Model::lower(&graph, config.init_policy())?;
        let optimizer = Sgd::new(config.momentum as f32, config.weight_decay as f32);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Ok(Self {
            model,
            config,
            optimizer,
            rng,
            iteration: 0,
        })
    }

    /// One pass of shuffle → augment → forward → loss → backward → step.
    /// `epoch` is zero-based. A trailing batch of one sample is skipped.
    pub fn train_epoch(&mut self, epoch: usize, data: &Dataset) -> Result<EpochRecord> {
        if data.classes != self.config.arch.classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, model {}",
                data.classes, self.config.arch.classes
            )));
        }
        let lr = lr_at(&self.config, epoch)?;
        self.model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = data.batch(chunk);
            augment(&mut batch, self.config.augment, &mut self.rng);
            self.iteration += 1;
            let (iteration, epoch1) = (self.iteration, epoch + 1);
            let (loss, logits) = self
                .model
                .loss_and_grad(batch.images, &batch.labels)
                .map_err(|e| match e {
                    Error::NonFinite(m) => {
                        Error::NonFinite(format!("{m} at iteration {iteration} (epoch {epoch1}, lr {lr})"))
                    }
                    e => e,
                })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at iteration {} (epoch {}, lr {lr})",
                    self.iteration,
                    epoch + 1
                )));
            }
            self.optimizer.step(self.model.params_mut(), lr as f32)?;
            let err = topk_error(&logits, &batch.labels, 1)?;
            correct += round_count((1.0 - err) * chunk.len() as f64);
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::InvalidArgument("training set yields no batch of two or more samples".into()));
        }
        Ok(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_top1: correct as f64 / seen as f64,
            val_top1: None,
            val_top5: None,
            seconds: 0.0,
        })
    }

    /// Trains one epoch and evaluates on `val` when given.
    pub fn run_epoch(&mut self, epoch: usize, train: &Dataset, val: Option<&Dataset>) -> Result<EpochRecord> {
        let mut rec = self.train_epoch(epoch, train)?;
        if let Some(val) = val {
            let e = evaluate(&mut self.model, val, self.config.batch_size)?;
            rec.val_top1 = Some(1.0 - e.top1);
            rec.val_top5 = e.top5.map(|t| 1.0 - t);
        }
        Ok(rec)
    }
}

fn round_count(x: f64) -> usize {
    Float::round(x) as usize
}

/// Runs every epoch of `config`. `clock` returns seconds since an arbitrary
/// origin; `on_epoch` sees each record after it is appended.
pub fn train(
    config: TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    clock: &mut dyn FnMut() -> f64,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Trainer) -> Result<()>,
) -> Result<(TrainHistory, Trainer)> {
    let mut trainer = Trainer::new(config)?;
    let mut history = TrainHistory::default();
    for epoch in 0..trainer.config.epochs {
        let start = clock();
        let mut rec = trainer.run_epoch(epoch, train_set, val_set)?;
        if trainer.config.record_wall_time {
            rec.seconds = clock() - start;
        }
        on_epoch(&rec, &trainer)?;
        history.records.push(rec);
    }
    Ok((history, trainer))
}

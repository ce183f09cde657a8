//! TOML training configs.
//!
//! Every key is optional; missing keys fall back to [`TrainConfig::default`]
//! and command-line flags override both. Unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//! epochs = 30
//! batch_size = 32
//! record_wall_time = false
//! out_dir = "runs/cifar20"
//!
//! [arch]
//! family = "cifar"
//! variant = "iresnet"
//! depth = 20
//! classes = 10
//!
//! [optim]
//! base_lr = 0.1
//! momentum = 0.9
//! weight_decay = 1e-4
//! milestones = [15, 22]
//! lr_factor = 0.1
//! bn_weight_decay = true
//!
//! [init]
//! zero_gamma = false
//!
//! [data]
//! kind = "cifar10"        # cifar10 | cifar100 | synthetic
//! dir = "data/cifar-10"   # relative to this file
//! subset = 500
//! val_subset = 1000
//!
//! [augment]
//! crop = true
//! flip = true
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use iresnet_core::networks::{Family, VariantId};
use iresnet_core::trainer::{synthetic_dataset, Dataset, DatasetKind, RawImages, TrainConfig, IMAGE_LEN};
use serde::{Deserialize, Serialize};

use crate::cifar::{self, CifarKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_wall_time: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub augment: AugmentSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bn_weight_decay: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_gamma: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl From<DataKind> for DatasetKind {
    fn from(k: DataKind) -> Self {
        match k {
            DataKind::Cifar10 => Self::Cifar10,
            DataKind::Cifar100 => Self::Cifar100,
            DataKind::Synthetic => Self::Synthetic,
        }
    }
}

impl From<DatasetKind> for DataKind {
    fn from(k: DatasetKind) -> Self {
        match k {
            DatasetKind::Cifar10 => Self::Cifar10,
            DatasetKind::Cifar100 => Self::Cifar100,
            DatasetKind::Synthetic => Self::Synthetic,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<DataKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_val: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip: Option<bool>,
}

/// Line and column (1-based) of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl FileConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    /// Reads a config; a relative `data.dir` is taken relative to the file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::parse(&text, path)?;
        if let Some(dir) = &cfg.data.dir {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                let joined = base.join(dir);
                cfg.data.dir = Some(std::path::absolute(&joined).unwrap_or(joined));
            }
        }
        Ok(cfg)
    }

    /// Overlays the keys set in `other` onto `self`.
    pub fn overlay(mut self, other: &FileConfig) -> Self {
        macro_rules! take {
            ($($field:ident).+) => {
                if other.$($field).+.is_some() {
                    self.$($field).+ = other.$($field).+.clone();
                }
            };
        }
        take!(seed);
        take!(epochs);
        take!(batch_size);
        take!(record_wall_time);
        take!(out_dir);
        take!(arch.family);
        take!(arch.variant);
        take!(arch.depth);
        take!(arch.classes);
        take!(optim.base_lr);
        take!(optim.momentum);
        take!(optim.weight_decay);
        take!(optim.milestones);
        take!(optim.lr_factor);
        take!(optim.bn_weight_decay);
        take!(init.zero_gamma);
        take!(data.kind);
        take!(data.dir);
        take!(data.subset);
        take!(data.val_subset);
        take!(data.synthetic_train);
        take!(data.synthetic_val);
        take!(data.mean);
        take!(data.std);
        take!(augment.crop);
        take!(augment.flip);
        self
    }

    /// Fills unset keys from the defaults and validates the result.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        set(&mut c.seed, &self.seed);
        set(&mut c.epochs, &self.epochs);
        set(&mut c.batch_size, &self.batch_size);
        set(&mut c.record_wall_time, &self.record_wall_time);
        set(&mut c.arch.family, &self.arch.family);
        set(&mut c.arch.variant, &self.arch.variant);
        set(&mut c.arch.depth, &self.arch.depth);
        set(&mut c.arch.classes, &self.arch.classes);
        set(&mut c.base_lr, &self.optim.base_lr);
        set(&mut c.momentum, &self.optim.momentum);
        set(&mut c.weight_decay, &self.optim.weight_decay);
        set(&mut c.milestones, &self.optim.milestones);
        set(&mut c.lr_factor, &self.optim.lr_factor);
        set(&mut c.bn_weight_decay, &self.optim.bn_weight_decay);
        set(&mut c.zero_gamma, &self.init.zero_gamma);
        if let Some(k) = self.data.kind {
            c.dataset.kind = k.into();
        }
        c.dataset.dir = self.data.dir.as_ref().map(|d| d.display().to_string());
        c.dataset.subset = self.data.subset;
        c.dataset.val_subset = self.data.val_subset;
        set(&mut c.dataset.synthetic_train, &self.data.synthetic_train);
        set(&mut c.dataset.synthetic_val, &self.data.synthetic_val);
        set(&mut c.dataset.mean, &self.data.mean);
        set(&mut c.dataset.std, &self.data.std);
        set(&mut c.augment.crop, &self.augment.crop);
        set(&mut c.augment.flip, &self.augment.flip);
        let expected = match c.dataset.kind {
            DatasetKind::Cifar10 => Some(10),
            DatasetKind::Cifar100 => Some(100),
            DatasetKind::Synthetic => None,
        };
        if let Some(k) = expected {
            if c.arch.classes != k {
                return Err(Error::Usage(format!(
                    "dataset {:?} has {k} classes but arch.classes is {}",
                    DataKind::from(c.dataset.kind),
                    c.arch.classes
                )));
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Every key of a resolved config, for writing next to a run's outputs.
    pub fn from_resolved(c: &TrainConfig, out_dir: Option<&Path>) -> Self {
        FileConfig {
            seed: Some(c.seed),
            epochs: Some(c.epochs),
            batch_size: Some(c.batch_size),
            record_wall_time: Some(c.record_wall_time),
            out_dir: out_dir.map(Path::to_path_buf),
            arch: ArchSection {
                family: Some(c.arch.family),
                variant: Some(c.arch.variant),
                depth: Some(c.arch.depth),
                classes: Some(c.arch.classes),
            },
            optim: OptimSection {
                base_lr: Some(c.base_lr),
                momentum: Some(c.momentum),
                weight_decay: Some(c.weight_decay),
                milestones: Some(c.milestones.clone()),
                lr_factor: Some(c.lr_factor),
                bn_weight_decay: Some(c.bn_weight_decay),
            },
            init: InitSection {
                zero_gamma: Some(c.zero_gamma),
            },
            data: DataSection {
                kind: Some(c.dataset.kind.into()),
                dir: c.dataset.dir.as_ref().map(PathBuf::from),
                subset: c.dataset.subset,
                val_subset: c.dataset.val_subset,
                synthetic_train: Some(c.dataset.synthetic_train),
                synthetic_val: Some(c.dataset.synthetic_val),
                mean: Some(c.dataset.mean),
                std: Some(c.dataset.std),
            },
            augment: AugmentSection {
                crop: Some(c.augment.crop),
                flip: Some(c.augment.flip),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }
}

fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

fn take_prefix(mut raw: RawImages, n: Option<usize>) -> RawImages {
    if let Some(n) = n {
        raw.truncate(n);
    }
    raw
}

/// Training set and validation set described by `c.dataset`. Synthetic data
/// is drawn once from `c.seed` and split, so both halves share class
/// prototypes.
pub fn load_datasets(c: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let spec = &c.dataset;
    let (train, val) = match spec.kind {
        DatasetKind::Synthetic => {
            let n = spec.synthetic_train + spec.synthetic_val;
            let mut all = synthetic_dataset(c.arch.classes, n, c.seed)?;
            let val = RawImages {
                pixels: all.pixels.split_off(spec.synthetic_train * IMAGE_LEN),
                labels: all.labels.split_off(spec.synthetic_train),
                classes: all.classes,
            };
            (all, val)
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let kind = if spec.kind == DatasetKind::Cifar10 {
                CifarKind::Cifar10
            } else {
                CifarKind::Cifar100
            };
            let dir = spec
                .dir
                .as_ref()
                .ok_or_else(|| Error::Usage("data.dir is required for CIFAR datasets".into()))?;
            let splits = cifar::load(Path::new(dir), kind)?;
            (splits.train, splits.test)
        }
    };
    let train = take_prefix(train, spec.subset);
    let val = take_prefix(val, spec.val_subset);
    if train.len() < 2 {
        return Err(Error::Usage(format!("training set has {} images", train.len())));
    }
    Ok((
        Dataset::from_raw(&train, spec.mean, spec.std)?,
        Dataset::from_raw(&val, spec.mean, spec.std)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = FileConfig::parse("", Path::new("x")).unwrap().resolve().unwrap();
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn file_then_flags() {
        let file = FileConfig::parse(
            "epochs = 30\nseed = 5\n[optim]\nmilestones = [15, 22]\n[data]\nkind = \"synthetic\"\n",
            Path::new("x"),
        )
        .unwrap();
        let flags = FileConfig {
            seed: Some(9),
            ..Default::default()
        };
        let c = file.overlay(&flags).resolve().unwrap();
        assert_eq!((c.epochs, c.seed), (30, 9));
        assert_eq!(c.milestones, [15, 22]);
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn errors_point_at_the_key() {
        let err = FileConfig::parse("epochs = 3\n\n[optim]\nbogus = 1\n", Path::new("c.toml")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = TrainConfig::default();
        c.epochs = 7;
        c.milestones = vec![3, 5];
        c.dataset.kind = DatasetKind::Synthetic;
        let text = FileConfig::from_resolved(&c, None).to_toml();
        assert_eq!(FileConfig::parse(&text, Path::new("x")).unwrap().resolve().unwrap(), c);
    }

    #[test]
    fn class_count_must_match_dataset() {
        let f = FileConfig::parse("[arch]\nclasses = 100\n", Path::new("x")).unwrap();
        assert!(f.resolve().is_err());
    }
}

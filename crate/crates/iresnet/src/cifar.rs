//! CIFAR-10/100 binary format.
//!
//! CIFAR-10 records are 3073 bytes: a label byte and 3072 channel-major
//! pixels (1024 R, 1024 G, 1024 B). CIFAR-100 records are 3074 bytes: coarse
//! label, fine label, pixels. The fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use iresnet_core::trainer::{RawImages, IMAGE_LEN};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_LEN
    }

    /// Archive subdirectory name, tried when the files are not directly in
    /// the given directory.
    fn subdir(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar-10-batches-bin",
            Self::Cifar100 => "cifar-100-binary",
        }
    }

    pub fn train_files(self) -> &'static [&'static str] {
        match self {
            Self::Cifar10 => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Self::Cifar100 => &["train.bin"],
        }
    }

    pub fn test_file(self) -> &'static str {
        match self {
            Self::Cifar10 => "test_batch.bin",
            Self::Cifar100 => "test.bin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarSplits {
    pub train: RawImages,
    pub test: RawImages,
}

pub fn parse_records(bytes: &[u8], kind: CifarKind, origin: &Path) -> Result<RawImages> {
    let rec = kind.record_len();
    let fail = |offset: usize, message: String| Error::Binary {
        path: origin.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec * rec;
        return Err(fail(
            whole,
            format!("truncated record: {} bytes left, records are {rec} bytes", bytes.len() - whole),
        ));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[kind.label_bytes() - 1] as usize;
        if label >= kind.classes() {
            return Err(fail(
                i * rec + kind.label_bytes() - 1,
                format!("label {label} out of range for {} classes", kind.classes()),
            ));
        }
        labels.push(label);
        pixels.extend_from_slice(&record[kind.label_bytes()..]);
    }
    Ok(RawImages {
        pixels,
        labels,
        classes: kind.classes(),
    })
}

/// Inverse of [`parse_records`]. CIFAR-100 coarse labels are written as
/// `fine / 5`.
pub fn encode_records(images: &RawImages, kind: CifarKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * kind.record_len());
    for (i, &label) in images.labels.iter().enumerate() {
        if kind == CifarKind::Cifar100 {
            out.push((label / 5) as u8);
        }
        out.push(label as u8);
        out.extend_from_slice(&images.pixels[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]);
    }
    out
}

fn read_file(path: &Path, kind: CifarKind) -> Result<RawImages> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    parse_records(&bytes, kind, path)
}

fn concat(parts: Vec<RawImages>, classes: usize) -> RawImages {
    let mut all = RawImages {
        pixels: Vec::new(),
        labels: Vec::new(),
        classes,
    };
    for p in parts {
        all.pixels.extend(p.pixels);
        all.labels.extend(p.labels);
    }
    all
}

/// Directory that holds the files of `kind`, looking inside the archive's
/// own subdirectory as well.
pub fn resolve_dir(dir: &Path, kind: CifarKind) -> PathBuf {
    let nested = dir.join(kind.subdir());
    if !dir.join(kind.test_file()).exists() && nested.join(kind.test_file()).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn load(dir: &Path, kind: CifarKind) -> Result<CifarSplits> {
    let dir = resolve_dir(dir, kind);
    let train = kind
        .train_files()
        .iter()
        .map(|f| read_file(&dir.join(f), kind))
        .collect::<Result<Vec<_>>>()?;
    let test = read_file(&dir.join(kind.test_file()), kind)?;
    Ok(CifarSplits {
        train: concat(train, kind.classes()),
        test,
    })
}

/// Writes both splits in the standard file layout, spreading the training
/// records over the training files in order.
pub fn write(dir: &Path, kind: CifarKind, splits: &CifarSplits) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let files = kind.train_files();
    let per_file = splits.train.len().div_ceil(files.len());
    for (i, name) in files.iter().enumerate() {
        let lo = (i * per_file).min(splits.train.len());
        let hi = ((i + 1) * per_file).min(splits.train.len());
        let part = RawImages {
            pixels: splits.train.pixels[lo * IMAGE_LEN..hi * IMAGE_LEN].to_vec(),
            labels: splits.train.labels[lo..hi].to_vec(),
            classes: splits.train.classes,
        };
        let path = dir.join(name);
        fs::write(&path, encode_records(&part, kind)).map_err(Error::io(&path))?;
    }
    let path = dir.join(kind.test_file());
    fs::write(&path, encode_records(&splits.test, kind)).map_err(Error::io(&path))
}

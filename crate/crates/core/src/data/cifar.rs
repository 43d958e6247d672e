//! CIFAR binary batches: per record, label byte(s) then 3072 pixel bytes
//! (1024 red, 1024 green, 1024 blue, row-major 32x32).

use std::path::Path;

use super::{Normalization, RawDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    /// Two label bytes, coarse then fine; the fine label is used.
    Cifar100,
}

impl CifarKind {
    fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    fn normalization(self) -> Normalization {
        match self {
            CifarKind::Cifar10 => Normalization::cifar10(),
            CifarKind::Cifar100 => Normalization::cifar100(),
        }
    }
}

pub fn parse_cifar(bytes: &[u8], kind: CifarKind, path: &Path) -> Result<RawDataset> {
    let record = kind.label_bytes() + PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() / record * record) as u64,
            detail: format!("{} bytes is not a whole number of {record}-byte records", bytes.len()),
        });
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label_at = kind.label_bytes() - 1;
        let label = rec[label_at] as usize;
        if label >= kind.classes() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * record + label_at) as u64,
                detail: format!("label {label} outside [0, {})", kind.classes()),
            });
        }
        labels.push(label);
        data.extend(rec[kind.label_bytes()..].iter().map(|&p| f64::from(p) / 255.0));
    }
    let norm = kind.normalization();
    norm.apply(&mut data, 32 * 32);
    let inputs = Tensor::new(vec![n, 3, 32, 32], data)?;
    RawDataset::new(inputs, labels, kind.classes(), norm)
}

pub fn read_cifar_file(path: &Path, kind: CifarKind) -> Result<RawDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, kind, path)
}

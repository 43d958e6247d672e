//! Datasets: IDX (MNIST) and CIFAR binary loaders, subsetting, and the
//! synthetic sets used by tests and the attribute-inference experiment.

mod cifar;
mod idx;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::{read_cifar_file, CifarKind};
pub use idx::{read_idx_images, read_idx_labels};
pub use synth::{synth_attr, synth_blobs, SynthAttr};

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn mnist() -> Self {
        Normalization {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn cifar100() -> Self {
        Normalization {
            mean: vec![0.5071, 0.4865, 0.4409],
            std: vec![0.2673, 0.2564, 0.2762],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Maps `[0, 1]` pixel intensities of `[.., C, H, W]` data in place.
    pub fn apply(&self, data: &mut [f64], plane: usize) {
        let c = self.channels();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// Inverse of [`Normalization::apply`].
    pub fn invert(&self, data: &mut [f64], plane: usize) {
        let c = self.channels();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + m);
        }
    }
}

/// Labelled inputs of shape `[n, C, H, W]`.
#[derive(Clone, Debug)]
pub struct RawDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    norm: Normalization,
}

impl RawDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, norm: Normalization) -> Result<Self> {
        if inputs.ndim() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("inputs must be [n, C, H, W], got {:?}", inputs.shape()),
            ));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} inputs but {} labels", inputs.shape()[0], labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
        }
        Ok(RawDataset {
            inputs,
            labels,
            classes,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> Result<Tensor> {
        let row = self.inputs.slice_outer(i, i + 1)?;
        row.reshape(&row.shape()[1..])
    }

    /// Rows in the given order, with labels.
    pub fn select(&self, rows: &[usize]) -> Result<RawDataset> {
        let inputs = self.inputs.gather_outer(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        RawDataset::new(inputs, labels, self.classes, self.norm.clone())
    }

    /// Batch inputs and one-hot targets for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Tensor)> {
        let x = self.inputs.gather_outer(rows)?;
        Ok((x, one_hot(rows.iter().map(|&r| self.labels[r]), rows.len(), self.classes)))
    }

    /// Keeps only samples whose label is in `classes`, relabelled to their
    /// position in that list; at most `per_class` of each, in file order.
    pub fn subset(&self, classes: &[usize], per_class: Option<usize>) -> Result<RawDataset> {
        self.subset_skip(classes, 0, per_class)
    }

    /// As [`subset`](Self::subset), after dropping the first `skip` samples
    /// of each class.
    pub fn subset_skip(&self, classes: &[usize], skip: usize, per_class: Option<usize>) -> Result<RawDataset> {
        let mut seen = vec![0usize; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if let Some(pos) = classes.iter().position(|&c| c == l) {
                seen[pos] += 1;
                if seen[pos] > skip && per_class.is_none_or(|cap| counts[pos] < cap) {
                    counts[pos] += 1;
                    rows.push(i);
                    labels.push(pos);
                }
            }
        }
        if let Some(cap) = per_class {
            if let Some(pos) = counts.iter().position(|&c| c < cap) {
                return Err(Error::Config(format!(
                    "class {} has only {} samples, {cap} requested",
                    classes[pos], counts[pos]
                )));
            }
        }
        let inputs = self.inputs.gather_outer(&rows)?;
        RawDataset::new(inputs, labels, classes.len(), self.norm.clone())
    }

    /// Same inputs, different labels (e.g. a secondary attribute).
    pub fn relabel(&self, labels: Vec<usize>, classes: usize) -> Result<RawDataset> {
        RawDataset::new(self.inputs.clone(), labels, classes, self.norm.clone())
    }

    /// Concatenation of datasets with identical sample shape and classes.
    pub fn concat(parts: &[RawDataset]) -> Result<RawDataset> {
        let first = parts.first().ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.sample_shape() != first.sample_shape() || p.classes != first.classes {
                return Err(Error::shape("concat", "datasets disagree on shape or classes"));
            }
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
        }
        let [c, h, w] = first.sample_shape();
        let inputs = Tensor::new(vec![labels.len(), c, h, w], data)?;
        RawDataset::new(inputs, labels, first.classes, first.norm.clone())
    }
}

pub fn one_hot(labels: impl Iterator<Item = usize>, n: usize, classes: usize) -> Tensor {
    let mut data = vec![0.0; n * classes];
    for (i, l) in labels.enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![n, classes], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar100,
    SynthBlobs,
    SynthAttr,
}

/// Which dataset to load and how much of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetId {
    pub name: DatasetName,
    /// Directory holding the raw files; unused for synthetic sets.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Keep only these original class ids (relabelled 0..n).
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    /// Drop this many training samples of each class before taking
    /// `train_per_class`, e.g. to draw a pool disjoint from another run.
    #[serde(default)]
    pub train_skip_per_class: Option<usize>,
    /// Synthetic sets: samples per class (blobs) or per cell (attr).
    #[serde(default)]
    pub synth_size: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DatasetId {
    pub fn named(name: DatasetName) -> Self {
        DatasetId {
            name,
            root: None,
            classes: None,
            train_per_class: None,
            test_per_class: None,
            train_skip_per_class: None,
            synth_size: None,
            seed: None,
        }
    }

    fn root(&self) -> Result<&Path> {
        let root = self
            .root
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{:?} needs a root directory", self.name)))?;
        if !root.is_dir() {
            return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
        }
        Ok(root)
    }
}

/// Loads `(train, test)` for a dataset id, applying the class subset.
pub fn load(id: &DatasetId) -> Result<(RawDataset, RawDataset)> {
    let (train, test) = match id.name {
        DatasetName::Mnist => {
            let root = id.root()?;
            let read = |images: &str, labels: &str| -> Result<RawDataset> {
                let x = read_idx_images(&root.join(images))?;
                let y = read_idx_labels(&root.join(labels), 10)?;
                if x.len() != y.len() {
                    return Err(Error::Format {
                        path: root.join(labels),
                        offset: 4,
                        detail: format!("{} labels for {} images", y.len(), x.len()),
                    });
                }
                images_to_dataset(x, y, 10, Normalization::mnist())
            };
            (
                read("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
                read("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
            )
        }
        DatasetName::Cifar10 => {
            let root = id.root()?;
            let dir = if root.join("cifar-10-batches-bin").is_dir() {
                root.join("cifar-10-batches-bin")
            } else {
                root.to_path_buf()
            };
            let mut train = Vec::new();
            for i in 1..=5 {
                train.push(read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), CifarKind::Cifar10)?);
            }
            let train = RawDataset::concat(&train)?;
            let test = read_cifar_file(&dir.join("test_batch.bin"), CifarKind::Cifar10)?;
            (train, test)
        }
        DatasetName::Cifar100 => {
            let root = id.root()?;
            let dir = if root.join("cifar-100-binary").is_dir() {
                root.join("cifar-100-binary")
            } else {
                root.to_path_buf()
            };
            (
                read_cifar_file(&dir.join("train.bin"), CifarKind::Cifar100)?,
                read_cifar_file(&dir.join("test.bin"), CifarKind::Cifar100)?,
            )
        }
        DatasetName::SynthBlobs => {
            let n = id.synth_size.unwrap_or(200);
            let classes = id.classes.as_ref().map_or(2, Vec::len).max(2);
            let seed = id.seed.unwrap_or(0);
            (
                synth_blobs(n, classes, 8, seed)?,
                synth_blobs(n / 2 + 1, classes, 8, seed.wrapping_add(1))?,
            )
        }
        DatasetName::SynthAttr => {
            let n = id.synth_size.unwrap_or(100);
            let seed = id.seed.unwrap_or(0);
            (
                synth_attr(n, seed)?.data,
                synth_attr(n / 2 + 1, seed.wrapping_add(1))?.data,
            )
        }
    };
    let file_backed = matches!(
        id.name,
        DatasetName::Mnist | DatasetName::Cifar10 | DatasetName::Cifar100
    );
    let skip = id.train_skip_per_class.unwrap_or(0);
    match (&id.classes, file_backed) {
        (Some(classes), true) => Ok((
            train.subset_skip(classes, skip, id.train_per_class)?,
            test.subset(classes, id.test_per_class)?,
        )),
        _ if id.train_per_class.is_some() || id.test_per_class.is_some() || skip > 0 => {
            let all: Vec<usize> = (0..train.classes()).collect();
            Ok((
                train.subset_skip(&all, skip, id.train_per_class)?,
                test.subset(&all, id.test_per_class)?,
            ))
        }
        _ => Ok((train, test)),
    }
}

/// Raw `u8` images `[n][C*H*W]` to a normalized dataset.
fn images_to_dataset(
    images: idx::IdxImages,
    labels: Vec<usize>,
    classes: usize,
    norm: Normalization,
) -> Result<RawDataset> {
    let plane = images.rows * images.cols;
    let mut data: Vec<f64> = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    norm.apply(&mut data, plane);
    let inputs = Tensor::new(vec![labels.len(), 1, images.rows, images.cols], data)?;
    RawDataset::new(inputs, labels, classes, norm)
}

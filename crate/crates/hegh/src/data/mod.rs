//! Dataset handling: image collections with label sets, deterministic
//! splits, the CIFAR-10 binary layout, a JSON manifest for multi-label
//! data, and a synthetic generator for confusable classes.

mod cifar;
mod manifest;
mod synthetic;

pub use cifar::{load_cifar10_bin, save_cifar10_bin, CIFAR_CLASSES, CIFAR_EDGE};
pub use manifest::{load_manifest, save_manifest, ImageSource, ManifestEntry};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::tensor::Tensor;

/// Attaches the file path to an io error so loaders can report which of
/// several inputs failed.
pub(crate) fn file_err(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Images with their label sets. Every image is a `[3, H, W]` tensor with
/// values in [0, 1]; all images share one shape, and every image carries
/// at least one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    num_classes: usize,
    images: Vec<Tensor<f32>>,
    labels: Vec<LabelSet>,
}

impl LabeledDataset {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Data("datasets need at least one class".into()));
        }
        Ok(LabeledDataset { num_classes, images: Vec::new(), labels: Vec::new() })
    }

    pub fn push(&mut self, image: Tensor<f32>, labels: LabelSet) -> Result<()> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Data(format!(
                "images must be [3, H, W], got {shape:?}"
            )));
        }
        if let Some(first) = self.images.first() {
            if first.shape() != shape {
                return Err(Error::Data(format!(
                    "image shape {shape:?} differs from the dataset's {:?}",
                    first.shape()
                )));
            }
        }
        if labels.num_classes() != self.num_classes {
            return Err(Error::Data(format!(
                "labels over {} classes in a {}-class dataset",
                labels.num_classes(),
                self.num_classes
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data(format!(
                "image {} has no labels",
                self.images.len()
            )));
        }
        if !image.all_finite() {
            return Err(Error::Data(format!(
                "image {} contains non-finite pixels",
                self.images.len()
            )));
        }
        self.images.push(image);
        self.labels.push(labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    /// `(height, width)` of the images, when any exist.
    pub fn image_hw(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[1], t.shape()[2]))
    }

    /// Stacks the selected images into one `[B, 3, H, W]` batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let (h, w) = self
            .image_hw()
            .ok_or_else(|| Error::Usage("cannot batch an empty dataset".into()))?;
        let mut out = Tensor::zeros(&[indices.len(), 3, h, w]);
        let stride = 3 * h * w;
        for (slot, &i) in indices.iter().enumerate() {
            let image = self
                .images
                .get(i)
                .ok_or_else(|| Error::Usage(format!("batch index {i} out of range")))?;
            out.data_mut()[slot * stride..(slot + 1) * stride].copy_from_slice(image.data());
        }
        Ok(out)
    }

    /// The primary class of each image: its lowest label index. Used as
    /// the stratum for splitting and subsetting.
    fn primary_class(&self, i: usize) -> usize {
        self.labels[i].iter().next().expect("datasets never hold unlabeled images")
    }

    /// Keeps the first `count` images of every primary class, in record
    /// order: the standard deterministic desk-scale subset.
    pub fn take_per_class(&self, count: usize) -> Result<LabeledDataset> {
        let mut taken = vec![0usize; self.num_classes];
        let mut subset = LabeledDataset::new(self.num_classes)?;
        for i in 0..self.len() {
            let class = self.primary_class(i);
            if taken[class] < count {
                taken[class] += 1;
                subset.push(self.images[i].clone(), self.labels[i].clone())?;
            }
        }
        Ok(subset)
    }

    /// Stratified split by primary class: shuffles each class's indices
    /// with the seed, keeps `train_fraction` of them (at least one, never
    /// all) for the train side, and preserves record order within each
    /// side. The two sides are disjoint.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Usage(format!(
                "train fraction must be in (0, 1), got {train_fraction}"
            )));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for i in 0..self.len() {
            by_class[self.primary_class(i)].push(i);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut train_rows = Vec::new();
        let mut test_rows = Vec::new();
        for (class, mut rows) in by_class.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            if rows.len() < 2 {
                return Err(Error::Data(format!(
                    "class {class} has {} example(s); splitting needs at least 2",
                    rows.len()
                )));
            }
            rows.shuffle(&mut rng);
            let take = ((rows.len() as f64 * train_fraction).floor() as usize)
                .clamp(1, rows.len() - 1);
            train_rows.extend_from_slice(&rows[..take]);
            test_rows.extend_from_slice(&rows[take..]);
        }
        train_rows.sort_unstable();
        test_rows.sort_unstable();
        let collect = |rows: &[usize]| -> Result<LabeledDataset> {
            let mut side = LabeledDataset::new(self.num_classes)?;
            for &i in rows {
                side.push(self.images[i].clone(), self.labels[i].clone())?;
            }
            Ok(side)
        };
        Ok((collect(&train_rows)?, collect(&test_rows)?))
    }
}

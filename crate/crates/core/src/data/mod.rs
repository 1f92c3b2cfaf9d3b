//! Datasets of `N x 1 x H x W` images in `[0, 1]` with labels in `[0, 10)`.

mod idx;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub use idx::{
    decode_images, decode_labels, encode_images, encode_images_in_ball, encode_labels, load_idx_images,
    load_idx_labels, pixel_to_byte, read_maybe_gzip, write_idx_images, write_idx_images_in_ball, write_idx_labels,
    IMAGES_MAGIC, LABELS_MAGIC, NUM_CLASSES,
};
pub use synthetic::{synthetic_dataset, SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// File-name prefix used by the MNIST distribution.
    pub fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[1] != 1 {
            return Err(Error::invalid(format!("images must be N x 1 x H x W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("pixel {i} outside [0, 1]: {}", images.data()[i])));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange { index, label, classes: NUM_CLASSES });
        }
        Ok(Self { images, labels, split })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn into_parts(self) -> (Tensor<f32>, Vec<usize>) {
        (self.images, self.labels)
    }

    /// The first `n` examples (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_batch(0..n).expect("range within batch"),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.select(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.gather(indices)?;
        Ok(Self { images, labels, split: self.split })
    }

    /// Mini-batches in the order given by [`batch_indices`].
    pub fn batches(
        &self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_> {
        let order = batch_indices(self.len(), batch_size, shuffle_seed)?;
        Ok(order.into_iter().map(move |idx| self.gather(&idx).expect("indices in range")))
    }

    /// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let images = load_idx_images(find_file(dir, split, "images-idx3-ubyte")?)?;
        let labels = load_idx_labels(find_file(dir, split, "labels-idx1-ubyte")?)?;
        Self::new(images, labels, split)
    }

    /// Writes the dataset under the same names [`Dataset::load_dir`] reads.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let prefix = self.split.file_prefix();
        write_idx_images(dir.join(format!("{prefix}-images-idx3-ubyte")), &self.images)?;
        write_idx_labels(dir.join(format!("{prefix}-labels-idx1-ubyte")), &self.labels)
    }
}

fn find_file(dir: &Path, split: Split, stem: &str) -> Result<PathBuf> {
    let base = format!("{}-{stem}", split.file_prefix());
    [base.clone(), format!("{base}.gz")].into_iter().map(|name| dir.join(name)).find(|p| p.is_file()).ok_or_else(|| {
        Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no {base}[.gz] in {}", dir.display())))
    })
}

/// Splits `0..n` into batches of `batch_size`, the last one possibly short.
/// With a seed the indices are permuted first; without one the order is kept.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE]));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

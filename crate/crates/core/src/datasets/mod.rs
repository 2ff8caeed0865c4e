//! Labeled image datasets: MNIST IDX files and class-per-directory image folders.

mod folder;
mod mnist;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use folder::{load_image_folder, FolderLoad};
pub use mnist::{load_mnist, parse_idx_images, parse_idx_labels};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0,1]` with labels and stable per-instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
        ids: Vec<String>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dataset(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::Dataset(format!(
                "{n} images but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: class_names.len(),
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Dataset(format!("duplicate instance id {dup:?}")));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-example `[C,H,W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels for the given instance indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_axis0(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// A new dataset holding only `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Dataset::new(
            images,
            labels,
            self.class_names.clone(),
            self.split,
            indices.iter().map(|&i| self.ids[i].clone()).collect(),
        )
    }

    /// The first `n` instances (or all of them).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn batches(&self, batch_size: usize, seed: u64, shuffled: bool) -> Vec<Vec<usize>> {
        batches(self.len(), batch_size, seed, shuffled)
    }
}

/// Splits `0..len` into consecutive batches, optionally after a seeded
/// Fisher-Yates shuffle. The final partial batch is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, shuffled: bool) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    if shuffled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

//! Dataset ingestion in the published on-disk layouts, plus a procedural stand-in dataset.
//!
//! Images are kept as `u8` at the configured resolution and converted to `[0, 1]` floats
//! per batch.

mod caltech;
mod cifar;
mod synthetic;
mod tiny;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

pub use synthetic::SYNTHETIC_CLASSES;

/// Environment variable naming the directory that holds the datasets.
pub const DATA_ROOT_ENV: &str = "AFFINE_SSL_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    TinyImagenet,
    Caltech101,
    /// Procedurally drawn shapes; needs no files.
    Synthetic,
}

impl DatasetId {
    pub const ALL: [DatasetId; 5] = [DatasetId::Cifar10, DatasetId::Cifar100, DatasetId::TinyImagenet, DatasetId::Caltech101, DatasetId::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::TinyImagenet => "tiny_imagenet",
            DatasetId::Caltech101 => "caltech101",
            DatasetId::Synthetic => "synthetic",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetId::Cifar10 => 10,
            DatasetId::Cifar100 => 100,
            DatasetId::TinyImagenet => 200,
            DatasetId::Caltech101 => 101,
            DatasetId::Synthetic => SYNTHETIC_CLASSES,
        }
    }

    pub fn native_resolution(self) -> usize {
        match self {
            DatasetId::TinyImagenet => 64,
            _ => 32,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetId::ALL.into_iter().find(|d| d.as_str() == s).ok_or_else(|| Error::config(format!("unknown dataset {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOptions {
    pub resolution: usize,
    /// Keep a seeded random subset of this many items.
    pub limit: Option<usize>,
    pub seed: u64,
}

/// An indexed, labelled image collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: DatasetId,
    pub split: Split,
    /// `n x 3 x r x r`.
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
    /// Position of each item in the split's published order.
    pub ids: Vec<u64>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.len_of(Axis(2))
    }

    /// Items at `indices` as a `[0, 1]` batch.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let r = self.resolution();
        let mut data = Array4::zeros((indices.len(), 3, r, r));
        for (out, &i) in data.outer_iter_mut().zip(indices) {
            let src = self.images.index_axis(Axis(0), i);
            ndarray::Zip::from(out).and(src).for_each(|o, &s| *o = s as f64 / 255.0);
        }
        ImageBatch { data, ids: indices.iter().map(|&i| self.ids[i]).collect() }
    }

    pub fn all(&self) -> ImageBatch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            id: self.id,
            split: self.split,
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    fn from_items(id: DatasetId, split: Split, items: Vec<(RgbImage, usize, u64)>, resolution: usize) -> Dataset {
        let mut images = Array4::zeros((items.len(), 3, resolution, resolution));
        let mut labels = Vec::with_capacity(items.len());
        let mut ids = Vec::with_capacity(items.len());
        for (k, (img, label, id)) in items.into_iter().enumerate() {
            let img = fit_square(img, resolution);
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    images[[k, c, y as usize, x as usize]] = p.0[c];
                }
            }
            labels.push(label);
            ids.push(id);
        }
        Dataset { id, split, images, labels, ids, num_classes: id.num_classes() }
    }
}

/// Resizes the shorter side to `size` and centre-crops to a square.
pub(crate) fn fit_square(img: RgbImage, size: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let size = size as u32;
    if w == size && h == size {
        return img;
    }
    let scale = size as f64 / w.min(h) as f64;
    let (nw, nh) = (((w as f64 * scale).round() as u32).max(size), ((h as f64 * scale).round() as u32).max(size));
    let resized = image::imageops::resize(&img, nw, nh, FilterType::Triangle);
    image::imageops::crop_imm(&resized, (nw - size) / 2, (nh - size) / 2, size, size).to_image()
}

/// The seeded subset of `0..n` kept under `limit`, in draw order.
pub(crate) fn limited_indices(n: usize, limit: Option<usize>, seed: u64, id: DatasetId, split: Split) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(limit) = limit {
        if limit < n {
            let mut rng = stream(seed, &[purpose::SUBSET, id as u64, split as u64]);
            idx.shuffle(&mut rng);
            idx.truncate(limit);
        }
    }
    idx
}

pub(crate) fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::missing(path, "not found"))
    }
}

pub(crate) fn decode(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| Error::missing(path, e.to_string()))
}

/// The data root from the environment, if set.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).filter(|p| !p.as_os_str().is_empty())
}

/// Loads a split. `root` is the directory holding the dataset folders; it is unused for the
/// synthetic dataset.
pub fn load_dataset(id: DatasetId, root: Option<&Path>, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    if opts.resolution == 0 {
        return Err(Error::config("resolution must be positive"));
    }
    if id == DatasetId::Synthetic {
        return Ok(synthetic::load(split, opts));
    }
    let root = root.ok_or_else(|| Error::config(format!("dataset {id} needs a data root (set {DATA_ROOT_ENV} or --data-root)")))?;
    let ds = match id {
        DatasetId::Cifar10 | DatasetId::Cifar100 => cifar::load(id, root, split, opts)?,
        DatasetId::TinyImagenet => tiny::load(root, split, opts)?,
        DatasetId::Caltech101 => caltech::load(root, split, opts)?,
        DatasetId::Synthetic => unreachable!(),
    };
    log::info!("loaded {id} {split:?}: {} items at {}px", ds.len(), ds.resolution());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_parse() {
        assert_eq!("tiny_imagenet".parse::<DatasetId>().unwrap(), DatasetId::TinyImagenet);
        assert!(matches!("imagenet".parse::<DatasetId>(), Err(Error::Config(_))));
    }

    #[test]
    fn limited_subset_is_seeded() {
        let a = limited_indices(100, Some(10), 3, DatasetId::Cifar10, Split::Train);
        assert_eq!(a, limited_indices(100, Some(10), 3, DatasetId::Cifar10, Split::Train));
        assert_ne!(a, limited_indices(100, Some(10), 4, DatasetId::Cifar10, Split::Train));
        assert_eq!(limited_indices(5, None, 3, DatasetId::Cifar10, Split::Train), vec![0, 1, 2, 3, 4]);
        assert!(limited_indices(5, Some(0), 3, DatasetId::Cifar10, Split::Train).is_empty());
    }

    #[test]
    fn fit_square_crops_centre() {
        let img = RgbImage::from_fn(40, 20, |x, _| image::Rgb([if x < 10 || x >= 30 { 0 } else { 200 }, 0, 0]));
        let out = fit_square(img, 20);
        assert_eq!(out.dimensions(), (20, 20));
        assert!(out.pixels().all(|p| p.0[0] == 200));
    }

    #[test]
    fn missing_root_is_ingestion_error() {
        let opts = LoadOptions { resolution: 32, limit: None, seed: 0 };
        let err = load_dataset(DatasetId::Cifar10, Some(Path::new("/nonexistent/root")), Split::Train, &opts).unwrap_err();
        match err {
            Error::Ingestion { path, .. } => assert!(path.starts_with("/nonexistent/root")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_dataset(DatasetId::Cifar10, None, Split::Train, &opts), Err(Error::Config(_))));
    }
}

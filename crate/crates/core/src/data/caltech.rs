//! Caltech101 layout: `101_ObjectCategories/<class>/*.jpg`. There is no published split, so
//! each class is split 80/20 by a seeded shuffle.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::{decode, limited_indices, require, Dataset, DatasetId, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

/// Fraction of every class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Seed of the fixed train/eval partition, independent of the run seed.
pub const SPLIT_SEED: u64 = 101;
const CLUTTER_CLASS: &str = "BACKGROUND_Google";

fn list(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::missing(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

pub(super) fn load(root: &Path, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    let base = root.join("caltech101").join("101_ObjectCategories");
    require(&base)?;
    let classes: Vec<PathBuf> = list(&base)?
        .into_iter()
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != CLUTTER_CLASS))
        .collect();
    if classes.is_empty() {
        return Err(Error::missing(&base, "no class directories"));
    }
    let mut entries: Vec<(PathBuf, usize)> = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = list(dir)?.into_iter().filter(|p| p.is_file()).collect();
        files.shuffle(&mut stream(SPLIT_SEED, &[purpose::SUBSET, label as u64]));
        let cut = ((files.len() as f64) * TRAIN_FRACTION).round() as usize;
        let part = match split {
            Split::Train => &files[..cut],
            Split::Eval => &files[cut..],
        };
        let mut part = part.to_vec();
        part.sort();
        entries.extend(part.into_iter().map(|p| (p, label)));
    }
    let keep = limited_indices(entries.len(), opts.limit, opts.seed, DatasetId::Caltech101, split);
    let items = keep
        .iter()
        .map(|&i| decode(&entries[i].0).map(|img| (img, entries[i].1, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::from_items(DatasetId::Caltech101, split, items, opts.resolution);
    ds.num_classes = classes.len();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use image::RgbImage;

    #[test]
    fn stratified_split_excludes_clutter() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("caltech101/101_ObjectCategories");
        for (class, count) in [("BACKGROUND_Google", 4), ("ant", 10), ("bass", 5)] {
            let dir = base.join(class);
            std::fs::create_dir_all(&dir).unwrap();
            for k in 0..count {
                RgbImage::from_pixel(40, 30, image::Rgb([k as u8, 0, 0])).save(dir.join(format!("image_{k:04}.png"))).unwrap();
            }
        }
        let opts = LoadOptions { resolution: 16, limit: None, seed: 0 };
        let train = load_dataset(DatasetId::Caltech101, Some(tmp.path()), Split::Train, &opts).unwrap();
        let eval = load_dataset(DatasetId::Caltech101, Some(tmp.path()), Split::Eval, &opts).unwrap();
        assert_eq!(train.num_classes, 2);
        assert_eq!(train.labels.iter().filter(|&&l| l == 0).count(), 8);
        assert_eq!(train.labels.iter().filter(|&&l| l == 1).count(), 4);
        assert_eq!(eval.len(), 3);
        assert_eq!(train.images.shape(), &[12, 3, 16, 16]);
    }
}

//! Tiny ImageNet layout: `wnids.txt`, `train/<wnid>/images/*.JPEG`, and
//! `val/images/*.JPEG` labelled by `val/val_annotations.txt`.

use std::path::{Path, PathBuf};

use super::{decode, limited_indices, require, Dataset, DatasetId, LoadOptions, Split};
use crate::error::{Error, Result};

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    require(dir)?;
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::missing(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub(super) fn load(root: &Path, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    let base = root.join("tiny-imagenet-200");
    let wnids_path = base.join("wnids.txt");
    require(&wnids_path)?;
    let text = std::fs::read_to_string(&wnids_path).map_err(|e| Error::missing(&wnids_path, e.to_string()))?;
    let mut wnids: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    wnids.sort_unstable();
    let class_of = |w: &str| wnids.binary_search(&w).ok();

    let mut entries: Vec<(PathBuf, usize)> = Vec::new();
    match split {
        Split::Train => {
            for (label, w) in wnids.iter().enumerate() {
                for p in sorted_files(&base.join("train").join(w).join("images"))? {
                    entries.push((p, label));
                }
            }
        }
        Split::Eval => {
            let ann = base.join("val").join("val_annotations.txt");
            require(&ann)?;
            let text = std::fs::read_to_string(&ann).map_err(|e| Error::missing(&ann, e.to_string()))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let mut cols = line.split('\t');
                let (Some(file), Some(w)) = (cols.next(), cols.next()) else {
                    return Err(Error::missing(&ann, format!("malformed line {line:?}")));
                };
                let label = class_of(w).ok_or_else(|| Error::missing(&ann, format!("unknown wnid {w}")))?;
                entries.push((base.join("val").join("images").join(file), label));
            }
            entries.sort();
        }
    }
    let keep = limited_indices(entries.len(), opts.limit, opts.seed, DatasetId::TinyImagenet, split);
    let items = keep
        .iter()
        .map(|&i| decode(&entries[i].0).map(|img| (img, entries[i].1, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::from_items(DatasetId::TinyImagenet, split, items, opts.resolution);
    ds.num_classes = wnids.len();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use image::RgbImage;

    #[test]
    fn parses_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("tiny-imagenet-200");
        std::fs::create_dir_all(base.join("val/images")).unwrap();
        std::fs::write(base.join("wnids.txt"), "n02\nn01\n").unwrap();
        for (w, shade) in [("n01", 10u8), ("n02", 200u8)] {
            let dir = base.join("train").join(w).join("images");
            std::fs::create_dir_all(&dir).unwrap();
            for k in 0..3 {
                RgbImage::from_pixel(64, 64, image::Rgb([shade, 0, 0])).save(dir.join(format!("{w}_{k}.png"))).unwrap();
            }
        }
        RgbImage::from_pixel(64, 64, image::Rgb([7, 7, 7])).save(base.join("val/images/val_0.png")).unwrap();
        std::fs::write(base.join("val/val_annotations.txt"), "val_0.png\tn02\t0\t0\t63\t63\n").unwrap();
        let opts = LoadOptions { resolution: 32, limit: None, seed: 0 };
        let train = load_dataset(DatasetId::TinyImagenet, Some(tmp.path()), Split::Train, &opts).unwrap();
        assert_eq!(train.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(train.images.shape(), &[6, 3, 32, 32]);
        assert_eq!(train.images[[4, 0, 5, 5]], 200);
        let eval = load_dataset(DatasetId::TinyImagenet, Some(tmp.path()), Split::Eval, &opts).unwrap();
        assert_eq!(eval.labels, vec![1]);
    }
}

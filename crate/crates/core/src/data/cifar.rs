//! CIFAR-10 / CIFAR-100 binary layout: fixed-size records of label byte(s) followed by a
//! 32x32 image stored as three 1024-byte channel planes.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array4;

use super::{fit_square, limited_indices, require, Dataset, DatasetId, LoadOptions, Split};
use crate::error::{Error, Result};

const PIXELS: usize = 32 * 32 * 3;

fn files(id: DatasetId, root: &Path, split: Split) -> (PathBuf, Vec<PathBuf>, usize) {
    match id {
        DatasetId::Cifar10 => {
            let dir = root.join("cifar-10-batches-bin");
            let names: Vec<String> = match split {
                Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                Split::Eval => vec!["test_batch.bin".into()],
            };
            (dir.clone(), names.iter().map(|n| dir.join(n)).collect(), 1)
        }
        _ => {
            let dir = root.join("cifar-100-binary");
            let name = match split {
                Split::Train => "train.bin",
                Split::Eval => "test.bin",
            };
            (dir.clone(), vec![dir.join(name)], 2)
        }
    }
}

pub(super) fn load(id: DatasetId, root: &Path, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    let (dir, paths, label_bytes) = files(id, root, split);
    require(&dir)?;
    let record = label_bytes + PIXELS;
    let mut raw = Vec::new();
    for path in &paths {
        require(path)?;
        let bytes = std::fs::read(path).map_err(|e| Error::missing(path, e.to_string()))?;
        if bytes.len() % record != 0 {
            return Err(Error::missing(path, format!("size {} is not a multiple of the {record}-byte record", bytes.len())));
        }
        raw.extend_from_slice(&bytes);
    }
    let n = raw.len() / record;
    let keep = limited_indices(n, opts.limit, opts.seed, id, split);
    let r = opts.resolution;
    let mut images = Array4::zeros((keep.len(), 3, r, r));
    let mut labels = Vec::with_capacity(keep.len());
    for (k, &i) in keep.iter().enumerate() {
        let rec = &raw[i * record..(i + 1) * record];
        // CIFAR-100 records carry (coarse, fine); the fine label is the class.
        let label = rec[label_bytes - 1] as usize;
        if label >= id.num_classes() {
            return Err(Error::missing(&paths[0], format!("record {i} has label {label}")));
        }
        labels.push(label);
        let px = &rec[label_bytes..];
        if r == 32 {
            for (j, v) in px.iter().enumerate() {
                images[[k, j / 1024, (j % 1024) / 32, j % 32]] = *v;
            }
        } else {
            let img = RgbImage::from_fn(32, 32, |x, y| {
                let o = (y * 32 + x) as usize;
                image::Rgb([px[o], px[1024 + o], px[2048 + o]])
            });
            for (x, y, p) in fit_square(img, r).enumerate_pixels() {
                for c in 0..3 {
                    images[[k, c, y as usize, x as usize]] = p.0[c];
                }
            }
        }
    }
    Ok(Dataset { id, split, images, labels, ids: keep.iter().map(|&i| i as u64).collect(), num_classes: id.num_classes() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    fn write_fake(dir: &Path, name: &str, labels: &[u8], label_bytes: usize) {
        let mut bytes = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if label_bytes == 2 {
                bytes.push(0);
            }
            bytes.push(l);
            bytes.extend((0..PIXELS).map(|j| ((i * 7 + j) % 256) as u8));
        }
        std::fs::create_dir_all(dir).unwrap();
        std::fs::write(dir.join(name), bytes).unwrap();
    }

    #[test]
    fn parses_cifar10_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("cifar-10-batches-bin");
        for b in 1..=5 {
            write_fake(&dir, &format!("data_batch_{b}.bin"), &[0, 1, 2, 9], 1);
        }
        write_fake(&dir, "test_batch.bin", &[3, 4], 1);
        let opts = LoadOptions { resolution: 32, limit: None, seed: 0 };
        let train = load_dataset(DatasetId::Cifar10, Some(tmp.path()), Split::Train, &opts).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(&train.labels[..4], &[0, 1, 2, 9]);
        // Channel planes: pixel (row 0, col 1) of the green plane is byte 1024 + 1.
        assert_eq!(train.images[[0, 1, 0, 1]], (1025 % 256) as u8);
        let eval = load_dataset(DatasetId::Cifar10, Some(tmp.path()), Split::Eval, &opts).unwrap();
        assert_eq!(eval.labels, vec![3, 4]);
        let limited = load_dataset(DatasetId::Cifar10, Some(tmp.path()), Split::Train, &LoadOptions { limit: Some(7), ..opts.clone() }).unwrap();
        assert_eq!(limited.len(), 7);
        let again = load_dataset(DatasetId::Cifar10, Some(tmp.path()), Split::Train, &LoadOptions { limit: Some(7), ..opts.clone() }).unwrap();
        assert_eq!(limited.ids, again.ids);
        let empty = load_dataset(DatasetId::Cifar10, Some(tmp.path()), Split::Train, &LoadOptions { limit: Some(0), ..opts.clone() }).unwrap();
        assert!(empty.is_empty());
        let small = load_dataset(DatasetId::Cifar10, Some(tmp.path()), Split::Eval, &LoadOptions { resolution: 16, ..opts }).unwrap();
        assert_eq!(small.images.shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn parses_cifar100_fine_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("cifar-100-binary");
        write_fake(&dir, "train.bin", &[5, 99, 42], 2);
        let opts = LoadOptions { resolution: 32, limit: None, seed: 0 };
        let ds = load_dataset(DatasetId::Cifar100, Some(tmp.path()), Split::Train, &opts).unwrap();
        assert_eq!(ds.labels, vec![5, 99, 42]);
        assert_eq!(ds.num_classes, 100);
        let err = load_dataset(DatasetId::Cifar100, Some(tmp.path()), Split::Eval, &opts).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref path, .. } if path.ends_with("test.bin")));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("cifar-10-batches-bin");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("test_batch.bin"), vec![0u8; 100]).unwrap();
        let opts = LoadOptions { resolution: 32, limit: None, seed: 0 };
        assert!(matches!(load_dataset(DatasetId::Cifar10, Some(tmp.path()), Split::Eval, &opts), Err(Error::Ingestion { .. })));
    }
}

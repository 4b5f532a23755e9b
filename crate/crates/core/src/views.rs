//! The stochastic augmentation pipeline that turns one image into two views.
//!
//! Every (image, view) pair draws from its own stream keyed by seed, epoch, item id and view
//! index, so a view depends only on those coordinates and never on batch composition.

use ndarray::{Array3, ArrayViewMut3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::geometry::resize_region;
use crate::rng::{purpose, stream, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub random_crop: bool,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip: bool,
    pub flip_prob: f64,
    pub color_jitter: bool,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale: bool,
    pub grayscale_prob: f64,
    pub blur: bool,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    /// Kernel size as a fraction of the image side, rounded to the nearest odd size >= 3.
    pub blur_kernel_frac: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            random_crop: true,
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip: true,
            flip_prob: 0.5,
            color_jitter: true,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale: true,
            grayscale_prob: 0.2,
            blur: true,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            blur_kernel_frac: 0.1,
        }
    }
}

impl AugmentationConfig {
    /// Every transform switched off: views equal the input.
    pub fn disabled() -> Self {
        AugmentationConfig { random_crop: false, flip: false, color_jitter: false, grayscale: false, blur: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip", self.flip_prob), ("jitter", self.jitter_prob), ("grayscale", self.grayscale_prob), ("blur", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("crop scale range must lie in (0, 1] with lo <= hi"));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::config("crop ratio range must be positive with lo <= hi"));
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|s| !(0.0..=1.0).contains(s)) || !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config("jitter strengths out of range"));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) || !(self.blur_kernel_frac >= 0.0) {
            return Err(Error::config("blur parameters out of range"));
        }
        Ok(())
    }
}

/// Two independently augmented views of every image in `img`.
pub fn make_views(img: &ImageBatch, cfg: &AugmentationConfig, seed: u64, epoch: u64) -> Result<(ImageBatch, ImageBatch)> {
    if img.height() != img.width() {
        return Err(Error::contract(format!("views expect square images, got {}x{}", img.height(), img.width())));
    }
    if img.channels() != 3 {
        return Err(Error::contract("views expect RGB images"));
    }
    cfg.validate()?;
    let view = |v: u64| {
        let mut out = img.clone();
        for (i, &id) in img.ids.iter().enumerate() {
            let mut rng = stream(seed, &[purpose::VIEWS, epoch, id, v]);
            let aug = augment(img.image(i).to_owned(), cfg, &mut rng);
            out.image_mut(i).assign(&aug);
        }
        out
    };
    Ok((view(0), view(1)))
}

/// Applies the pipeline to a single `3 x s x s` image.
pub fn augment(mut x: Array3<f64>, cfg: &AugmentationConfig, rng: &mut StreamRng) -> Array3<f64> {
    if cfg.random_crop {
        x = random_resized_crop(&x, cfg, rng);
    }
    if cfg.flip && rng.random_bool(cfg.flip_prob) {
        x.invert_axis(Axis(2));
        x = x.as_standard_layout().into_owned();
    }
    if cfg.color_jitter && rng.random_bool(cfg.jitter_prob) {
        color_jitter(&mut x.view_mut(), cfg, rng);
    }
    if cfg.grayscale && rng.random_bool(cfg.grayscale_prob) {
        to_grayscale(&mut x.view_mut());
    }
    if cfg.blur && rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        x = gaussian_blur(&x, kernel_size(x.shape()[1], cfg.blur_kernel_frac), sigma);
    }
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    x
}

fn random_resized_crop(x: &Array3<f64>, cfg: &AugmentationConfig, rng: &mut StreamRng) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            return resize_region(x.view(), (x0 as f64, y0 as f64, cw as f64, ch as f64), h, w);
        }
    }
    // Fallback: the largest centred crop with an admissible aspect ratio.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < cfg.crop_ratio.0 {
        (w as f64, (w as f64 / cfg.crop_ratio.0).round())
    } else if in_ratio > cfg.crop_ratio.1 {
        ((h as f64 * cfg.crop_ratio.1).round(), h as f64)
    } else {
        (w as f64, h as f64)
    };
    resize_region(x.view(), ((w as f64 - cw) / 2.0, (h as f64 - ch) / 2.0, cw, ch), h, w)
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn to_grayscale(x: &mut ArrayViewMut3<f64>) {
    let (_, h, w) = x.dim();
    for i in 0..h {
        for j in 0..w {
            let l = luminance(x[[0, i, j]], x[[1, i, j]], x[[2, i, j]]);
            for c in 0..3 {
                x[[c, i, j]] = l;
            }
        }
    }
}

fn blend(x: &mut ArrayViewMut3<f64>, other: &Array3<f64>, factor: f64) {
    ndarray::Zip::from(x).and(other).for_each(|a, &b| *a = (factor * *a + (1.0 - factor) * b).clamp(0.0, 1.0));
}

/// Brightness, contrast, saturation and hue adjustments in random order.
fn color_jitter(x: &mut ArrayViewMut3<f64>, cfg: &AugmentationConfig, rng: &mut StreamRng) {
    let mut order = [0, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut StreamRng, s: f64| if s > 0.0 { rng.random_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
    for op in order {
        match op {
            0 => {
                let f = factor(rng, cfg.brightness);
                x.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
            }
            1 => {
                let f = factor(rng, cfg.contrast);
                let (_, h, w) = x.dim();
                let mean = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| luminance(x[[0, i, j]], x[[1, i, j]], x[[2, i, j]])).sum::<f64>()
                    / (h * w) as f64;
                let flat = Array3::from_elem(x.dim(), mean);
                blend(x, &flat, f);
            }
            2 => {
                let f = factor(rng, cfg.saturation);
                let mut gray = x.to_owned();
                to_grayscale(&mut gray.view_mut());
                blend(x, &gray, f);
            }
            _ => {
                if cfg.hue > 0.0 {
                    let shift = rng.random_range(-cfg.hue..=cfg.hue);
                    shift_hue(x, shift);
                }
            }
        }
    }
}

fn shift_hue(x: &mut ArrayViewMut3<f64>, shift: f64) {
    let (_, h, w) = x.dim();
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (x[[0, i, j]], x[[1, i, j]], x[[2, i, j]]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            if delta <= 0.0 {
                continue;
            }
            let hue = if max == r {
                ((g - b) / delta).rem_euclid(6.0)
            } else if max == g {
                (b - r) / delta + 2.0
            } else {
                (r - g) / delta + 4.0
            } / 6.0;
            let hue = (hue + shift).rem_euclid(1.0) * 6.0;
            let (s, v) = (delta / max, max);
            let k = |n: f64| {
                let k = (n + hue) % 6.0;
                v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
            };
            x[[0, i, j]] = k(5.0);
            x[[1, i, j]] = k(3.0);
            x[[2, i, j]] = k(1.0);
        }
    }
}

fn kernel_size(side: usize, frac: f64) -> usize {
    let k = (side as f64 * frac).round() as usize;
    let k = k.max(3);
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(x: &Array3<f64>, k: usize, sigma: f64) -> Array3<f64> {
    let half = (k / 2) as isize;
    let weights: Vec<f64> = (-half..=half).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum::<f64>();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (ch, h, w) = x.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut tmp = Array3::<f64>::zeros((ch, h, w));
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                tmp[[c, i, j]] = weights.iter().enumerate().map(|(t, wt)| wt * x[[c, i, reflect(j as isize + t as isize - half, w)]]).sum::<f64>();
            }
        }
    }
    let mut out = Array3::zeros((ch, h, w));
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                out[[c, i, j]] = weights.iter().enumerate().map(|(t, wt)| wt * tmp[[c, reflect(i as isize + t as isize - half, h), j]]).sum::<f64>();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetId, LoadOptions, Split};

    fn batch(n: usize) -> ImageBatch {
        let ds = load_dataset(DatasetId::Synthetic, None, Split::Train, &LoadOptions { resolution: 16, limit: Some(n), seed: 1 }).unwrap();
        ds.all()
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let x = batch(4);
        let (a, b) = make_views(&x, &AugmentationConfig::disabled(), 3, 0).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn views_replay_and_differ() {
        let x = batch(8);
        let cfg = AugmentationConfig::default();
        let (a1, b1) = make_views(&x, &cfg, 5, 2).unwrap();
        let (a2, b2) = make_views(&x, &cfg, 5, 2).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert!(a1.same_shape(&x));
        assert!(a1.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let diff = (&a1.data - &b1.data).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.0);
        let (a3, _) = make_views(&x, &cfg, 5, 3).unwrap();
        assert_ne!(a1, a3);
    }

    #[test]
    fn view_depends_on_item_not_batch() {
        let x = batch(6);
        let cfg = AugmentationConfig::default();
        let (full, _) = make_views(&x, &cfg, 7, 0).unwrap();
        let part = ImageBatch::new(x.data.slice(ndarray::s![2..4, .., .., ..]).to_owned(), x.ids[2..4].to_vec()).unwrap();
        let (sub, _) = make_views(&part, &cfg, 7, 0).unwrap();
        assert_eq!(sub.image(0), full.image(2));
    }

    #[test]
    fn grayscale_equalises_channels() {
        let x = batch(3);
        let cfg = AugmentationConfig { grayscale_prob: 1.0, ..AugmentationConfig::disabled() };
        let cfg = AugmentationConfig { grayscale: true, ..cfg };
        let (a, _) = make_views(&x, &cfg, 1, 0).unwrap();
        for img in a.data.outer_iter() {
            for ((r, g), b) in img.index_axis(Axis(0), 0).iter().zip(img.index_axis(Axis(0), 1)).zip(img.index_axis(Axis(0), 2)) {
                assert!((r - g).abs() < 1e-6 && (r - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hue_shift_round_trip() {
        let mut x = Array3::<f64>::from_shape_fn((3, 2, 2), |(c, i, j)| 0.1 + 0.2 * c as f64 + 0.1 * (i + j) as f64);
        let orig = x.clone();
        shift_hue(&mut x.view_mut(), 0.3);
        shift_hue(&mut x.view_mut(), -0.3);
        assert!(x.iter().zip(orig.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_constants() {
        let x = Array3::from_elem((3, 8, 8), 0.4);
        let y = gaussian_blur(&x, 3, 1.5);
        assert!(y.iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert_eq!(kernel_size(32, 0.1), 3);
        assert_eq!(kernel_size(64, 0.1), 7);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AugmentationConfig { flip_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentationConfig { crop_scale: (0.0, 1.0), ..Default::default() }.validate().is_err());
    }
}

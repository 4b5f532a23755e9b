use ndarray::{Array3, ArrayView3, ArrayViewMut3, Axis};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};

use super::matrix::AffineMatrix;
use super::polygon::{footprint_polygon, max_inscribed_rect, BoundedCropRect};

/// Bilinear sample at `(x, y)`; taps outside the image contribute zero.
#[inline]
fn bilinear_zero(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    if !(x > -1.0 && y > -1.0 && x < width as f64 && y < height as f64) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= width as isize || yi >= height as isize {
            0.0
        } else {
            plane[yi as usize * width + xi as usize]
        }
    };
    let top = tap(x0, y0) * (1.0 - fx) + if fx > 0.0 { tap(x0 + 1, y0) * fx } else { 0.0 };
    if fy > 0.0 {
        let bottom = tap(x0, y0 + 1) * (1.0 - fx) + if fx > 0.0 { tap(x0 + 1, y0 + 1) * fx } else { 0.0 };
        top * (1.0 - fy) + bottom * fy
    } else {
        top
    }
}

/// Fills `out` (channels x height x width) by sampling `src` at `out_to_src * q` for every
/// output pixel `q`, bilinearly, with zero fill outside the source.
pub fn resample_into(src: ArrayView3<'_, f64>, out_to_src: &AffineMatrix, mut out: ArrayViewMut3<'_, f64>) {
    let (channels, sh, sw) = src.dim();
    let (_, oh, ow) = out.dim();
    let src = src.as_standard_layout();
    let plane_len = sh * sw;
    let data = src.as_slice().expect("standard layout");
    for c in 0..channels {
        let plane = &data[c * plane_len..(c + 1) * plane_len];
        let mut out_plane = out.index_axis_mut(Axis(0), c);
        for oy in 0..oh {
            for ox in 0..ow {
                let (x, y) = out_to_src.apply(ox as f64, oy as f64);
                out_plane[[oy, ox]] = bilinear_zero(plane, sw, sh, x, y);
            }
        }
    }
}

fn check_frame(img: &ImageBatch, m: &AffineMatrix) -> Result<()> {
    match m.frame() {
        Some((w, h)) if (w, h) != (img.width(), img.height()) => Err(Error::contract(format!(
            "matrix built for {w}x{h} but images are {}x{}",
            img.width(),
            img.height()
        ))),
        _ => Ok(()),
    }
}

/// Applies `m` to every image: output pixel `q` takes the input value at `m^-1 q`.
pub fn warp_image(img: &ImageBatch, m: &AffineMatrix) -> Result<ImageBatch> {
    warp_each(img, &vec![*m; img.len()])
}

/// Per-image variant of [`warp_image`].
pub fn warp_each(img: &ImageBatch, ms: &[AffineMatrix]) -> Result<ImageBatch> {
    if ms.len() != img.len() {
        return Err(Error::contract(format!("{} matrices for {} images", ms.len(), img.len())));
    }
    let mut out = ImageBatch { data: ndarray::Array4::zeros(img.data.raw_dim()), ids: img.ids.clone() };
    for (i, m) in ms.iter().enumerate() {
        check_frame(img, m)?;
        let inv = m.invert()?;
        resample_into(img.image(i), &inv, out.image_mut(i));
    }
    Ok(out)
}

/// Sampling matrix for the bounded variant: maps an output pixel to its source location after
/// warping by `m`, cropping the maximal inscribed axis-aligned rectangle of the warped
/// footprint, and resizing that crop back to the full frame.
pub fn bounded_sampling_matrix(m: &AffineMatrix, width: usize, height: usize) -> Result<(AffineMatrix, BoundedCropRect)> {
    let poly = footprint_polygon(m, width, height)?;
    let rect = max_inscribed_rect(&poly)?;
    let sx = if width > 1 { (rect.x1 - rect.x0) / (width as f64 - 1.0) } else { 0.0 };
    let sy = if height > 1 { (rect.y1 - rect.y0) / (height as f64 - 1.0) } else { 0.0 };
    let crop = AffineMatrix::from_top_rows([[sx, 0.0, rect.x0], [0.0, sy, rect.y0]]);
    Ok((m.invert()? * crop, rect))
}

/// Resizes the region `[x0, x0 + w) x [y0, y0 + h)` (pixel units, half-pixel centred) of `src`
/// to `out_h x out_w` with bilinear interpolation and edge clamping.
pub fn resize_region(
    src: ArrayView3<'_, f64>,
    (x0, y0, w, h): (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Array3<f64> {
    let (channels, sh, sw) = src.dim();
    let mut out = Array3::zeros((channels, out_h, out_w));
    let sx = w / out_w as f64;
    let sy = h / out_h as f64;
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|i| {
            let x = (x0 + (i as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let xl = (x.floor() as usize).min(sw - 1);
            (xl, (xl + 1).min(sw - 1), x - xl as f64)
        })
        .collect();
    for c in 0..channels {
        for j in 0..out_h {
            let y = (y0 + (j as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
            let yl = (y.floor() as usize).min(sh - 1);
            let yh = (yl + 1).min(sh - 1);
            let fy = y - yl as f64;
            for (i, &(xl, xh, fx)) in xs.iter().enumerate() {
                let top = src[[c, yl, xl]] * (1.0 - fx) + src[[c, yl, xh]] * fx;
                let bot = src[[c, yh, xl]] * (1.0 - fx) + src[[c, yh, xh]] * fx;
                out[[c, j, i]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

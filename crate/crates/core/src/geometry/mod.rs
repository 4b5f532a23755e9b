//! Affine transformations of images: parameter sampling, homogeneous matrices, bilinear
//! warping, and the bounded (maximal inscribed rectangle) crop.

mod matrix;
mod params;
mod polygon;
mod warp;

pub use matrix::AffineMatrix;
pub use params::{
    denormalize_params, normalize_params, sample_affine_params, AffineParams, Component,
    ComponentMask, Interval, ParamRanges, PARAM_COUNT, PARAM_NAMES,
};
pub use polygon::{
    footprint_polygon, max_inscribed_rect, point_in_convex_polygon, polygon_area, BoundedCropRect,
    Point,
};
pub use warp::{bounded_sampling_matrix, resample_into, resize_region, warp_each, warp_image};

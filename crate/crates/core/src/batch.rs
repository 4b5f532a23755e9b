use ndarray::{Array4, ArrayView3, ArrayViewMut3, Axis};

use crate::error::{Error, Result};

/// A batch of images laid out `batch x channels x height x width`, values in `[0, 1]`.
///
/// `ids` carry provenance: the dataset item each image came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f64>,
    pub ids: Vec<u64>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>, ids: Vec<u64>) -> Result<Self> {
        if data.len_of(Axis(0)) != ids.len() {
            return Err(Error::contract(format!(
                "batch has {} images but {} ids",
                data.len_of(Axis(0)),
                ids.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("image batch contains non-finite values"));
        }
        Ok(ImageBatch { data, ids })
    }

    pub fn zeros(len: usize, channels: usize, height: usize, width: usize) -> Self {
        ImageBatch { data: Array4::zeros((len, channels, height, width)), ids: (0..len as u64).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(3))
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn image_mut(&mut self, i: usize) -> ArrayViewMut3<'_, f64> {
        self.data.index_axis_mut(Axis(0), i)
    }

    pub fn same_shape(&self, other: &ImageBatch) -> bool {
        self.data.shape() == other.data.shape()
    }

    pub fn clamp_unit(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

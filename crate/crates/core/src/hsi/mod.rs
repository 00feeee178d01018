//! Cube, pixel-matrix, mask and intensity-map types.
//!
//! A [`HyperCube`] stores an H×W×Q radiance cube band-sequentially. Detectors
//! work on its [`PixelMatrix`] view: M = H·W rows, one spectrum per row, in
//! row-major spatial order.

mod io;

pub use io::{
    read_cube, read_map, read_mask, read_pgm, write_cube, write_map, write_map_with_notes,
    write_mask, write_pgm, CubeHeader,
};
pub(crate) use io::{read_json, write_json};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// M×Q matrix of spectra, one pixel per row.
pub type PixelMatrix = Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HyperCube {
    /// `data` is band-sequential: band 0's full H×W plane first.
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::dims(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::dims(format!(
                "{height}x{width}x{bands} cube needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(HyperCube {
            height,
            width,
            bands,
            data,
        })
    }

    /// Inverse of [`HyperCube::flatten`]. Values are narrowed to `f32`.
    pub fn from_pixels(pixels: &PixelMatrix, height: usize, width: usize) -> Result<Self> {
        if pixels.rows() != height * width {
            return Err(Error::dims(format!(
                "{} pixel rows cannot fill a {height}x{width} cube",
                pixels.rows()
            )));
        }
        let bands = pixels.cols();
        let plane = height * width;
        let mut data = vec![0f32; plane * bands];
        for (p, spectrum) in pixels.row_iter().enumerate() {
            for (b, &v) in spectrum.iter().enumerate() {
                data[b * plane + p] = v as f32;
            }
        }
        HyperCube::new(height, width, bands, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[band * self.pixels() + row * self.width + col]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(row, col, b)).collect()
    }

    /// Row `r·W + c` of the result is the spectrum at `(r, c)`.
    pub fn flatten(&self) -> PixelMatrix {
        let plane = self.pixels();
        let mut m = Matrix::zeros(plane, self.bands);
        for b in 0..self.bands {
            let band = &self.data[b * plane..(b + 1) * plane];
            for (p, &v) in band.iter().enumerate() {
                m[(p, b)] = f64::from(v);
            }
        }
        m
    }
}

/// Direction-agnostic change labels; `true` marks an anomaly pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    labels: Vec<bool>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, labels: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::dims(format!(
                "{height}x{width} mask with {} labels",
                labels.len()
            )));
        }
        if labels.iter().all(|&a| a) {
            return Err(Error::invalid("mask has no background pixels"));
        }
        Ok(GroundTruthMask {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn is_anomaly(&self, row: usize, col: usize) -> bool {
        self.labels[row * self.width + col]
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&a| a).count()
    }

    pub fn background_count(&self) -> usize {
        self.labels.len() - self.anomaly_count()
    }
}

/// H×W map of nonnegative anomaly scores.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl IntensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::dims(format!(
                "{height}x{width} map with {} values",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(v) = values.iter().find(|&&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "intensity maps are nonnegative, found {v}"
            )));
        }
        Ok(IntensityMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn check_same_shape(&self, other: &IntensityMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(format!(
                "maps are {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_same_dims(x: &HyperCube, y: &HyperCube) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::dims(format!(
            "cubes are {:?} and {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

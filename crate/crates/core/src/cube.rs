//! Spectral cubes and their pixels × bands matrix view.
//!
//! A cube stores `rows × cols × bands` samples band-sequentially: all pixels of
//! band 0 in row-major `(row, col)` order, then band 1, and so on. Pixel `i` of
//! the matrix view is spatial location `(i / cols, i % cols)`; this is the one
//! flattening every operator in the crate agrees on.
//!
//! Because the storage is band-sequential, the matrix view is exactly a
//! column-major `n_pixels × n_bands` matrix and converting between the two is a
//! buffer move.

use nalgebra::DMatrix;

use crate::error::{FusionError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f64>,
    band_centers: Option<Vec<f64>>,
}

impl SpectralCube {
    /// Builds a cube from band-sequential data.
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(FusionError::shape(format!(
                "cube dims must be positive, got {rows}x{cols}x{bands}"
            )));
        }
        if data.len() != rows * cols * bands {
            return Err(FusionError::shape(format!(
                "{rows}x{cols}x{bands} cube needs {} values, got {}",
                rows * cols * bands,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::Domain(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(SpectralCube {
            rows,
            cols,
            bands,
            data,
            band_centers: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize, bands: usize) -> Result<Self> {
        Self::new(rows, cols, bands, vec![0.0; rows * cols * bands])
    }

    /// Builds a cube from a closure evaluated at `(row, col, band)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols * bands);
        for b in 0..bands {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(r, c, b));
                }
            }
        }
        Self::new(rows, cols, bands, data)
    }

    /// Attaches band centers (wavelengths or wavenumbers). They must be
    /// strictly monotonic and one per band.
    pub fn with_band_centers(mut self, centers: Vec<f64>) -> Result<Self> {
        if centers.len() != self.bands {
            return Err(FusionError::shape(format!(
                "{} band centers for {} bands",
                centers.len(),
                self.bands
            )));
        }
        let increasing = centers.windows(2).all(|w| w[1] > w[0]);
        let decreasing = centers.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(FusionError::param(
                "band centers must be strictly monotonic",
            ));
        }
        self.band_centers = Some(centers);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn band_centers(&self) -> Option<&[f64]> {
        self.band_centers.as_deref()
    }

    /// Band-sequential samples.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(band * self.rows + row) * self.cols + col]
    }

    /// Samples of one band in row-major order.
    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the cube into its matrix view.
    pub fn as_matrix(&self) -> MatrixView {
        MatrixView::new(DMatrix::from_column_slice(
            self.n_pixels(),
            self.bands,
            &self.data,
        ))
    }

    /// Consumes the cube into its matrix view without copying.
    pub fn into_matrix(self) -> MatrixView {
        MatrixView::new(DMatrix::from_vec(
            self.rows * self.cols,
            self.bands,
            self.data,
        ))
    }

    /// Inverse of [`SpectralCube::as_matrix`].
    pub fn from_matrix(m: MatrixView, rows: usize, cols: usize) -> Result<Self> {
        if m.n_pixels() != rows * cols {
            return Err(FusionError::shape(format!(
                "matrix has {} pixels but {rows}x{cols} = {} requested",
                m.n_pixels(),
                rows * cols
            )));
        }
        let bands = m.n_bands();
        let values: Vec<f64> = m.into_inner().data.into();
        Self::new(rows, cols, bands, values)
    }

    /// One band as a 2-D image.
    pub fn slice_band(&self, band_index: usize) -> Result<BandImage> {
        if band_index >= self.bands {
            return Err(FusionError::Index {
                what: "bands",
                index: band_index,
                len: self.bands,
            });
        }
        Ok(BandImage {
            rows: self.rows,
            cols: self.cols,
            data: self.band(band_index).to_vec(),
        })
    }
}

/// Pixels × bands view of a cube; row `i` is the spectrum of pixel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixView {
    values: DMatrix<f64>,
}

impl MatrixView {
    pub fn new(values: DMatrix<f64>) -> Self {
        MatrixView { values }
    }

    pub fn n_pixels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, pixel: usize, band: usize) -> f64 {
        self.values[(pixel, band)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

impl From<DMatrix<f64>> for MatrixView {
    fn from(values: DMatrix<f64>) -> Self {
        MatrixView::new(values)
    }
}

/// A single-band image in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct BandImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl BandImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

//! PCA subspace of the hyperspectral input.
//!
//! Spectra are modeled as `f = r·Q + mean` where the rows of `Q` (dim × bands)
//! are orthonormal principal axes of the band covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cube::MatrixView;
use crate::error::{FusionError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    /// `dim × n_bands`, orthonormal rows.
    basis: DMatrix<f64>,
    mean_spectrum: DVector<f64>,
    explained_variance: Vec<f64>,
}

impl Subspace {
    /// Builds a subspace from explicit parts; rows of `basis` must be
    /// orthonormal.
    pub fn from_parts(
        basis: DMatrix<f64>,
        mean_spectrum: DVector<f64>,
        explained_variance: Vec<f64>,
    ) -> Result<Self> {
        if basis.ncols() != mean_spectrum.len() || basis.nrows() != explained_variance.len() {
            return Err(FusionError::shape("subspace parts have inconsistent sizes"));
        }
        let gram = &basis * basis.transpose();
        let err = (gram - DMatrix::<f64>::identity(basis.nrows(), basis.nrows())).amax();
        if err > 1e-8 {
            return Err(FusionError::param(format!(
                "basis rows are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Subspace {
            basis,
            mean_spectrum,
            explained_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn mean_spectrum(&self) -> &DVector<f64> {
        &self.mean_spectrum
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// `r = (f − mean)·Qᵀ`.
    pub fn project(&self, m: &MatrixView) -> Result<MatrixView> {
        Ok(self.project_matrix(m.matrix())?.into())
    }

    /// `f = r·Q + mean`.
    pub fn reconstruct(&self, r: &MatrixView) -> Result<MatrixView> {
        Ok(self.reconstruct_matrix(r.matrix())?.into())
    }

    pub fn project_matrix(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if f.ncols() != self.n_bands() {
            return Err(FusionError::shape(format!(
                "subspace spans {} bands, input has {}",
                self.n_bands(),
                f.ncols()
            )));
        }
        Ok(self.center(f) * self.basis.transpose())
    }

    pub fn reconstruct_matrix(&self, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if r.ncols() != self.dim() {
            return Err(FusionError::shape(format!(
                "subspace has dim {}, coefficients have {} columns",
                self.dim(),
                r.ncols()
            )));
        }
        let mut f = r * &self.basis;
        for mut row in f.row_iter_mut() {
            row += self.mean_spectrum.transpose();
        }
        Ok(f)
    }

    /// Subtracts the mean spectrum from every row.
    pub fn center(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = f.clone();
        for mut row in out.row_iter_mut() {
            row -= self.mean_spectrum.transpose();
        }
        out
    }
}

/// Fits the top-`dim` principal axes of the band covariance of `h`.
///
/// Each axis is signed so that its largest-magnitude coefficient is positive.
pub fn fit_pca(h: &MatrixView, dim: usize) -> Result<Subspace> {
    let x = h.matrix();
    let (n, bands) = x.shape();
    if dim == 0 || dim > n.min(bands) {
        return Err(FusionError::param(format!(
            "subspace dim {dim} outside [1, {}]",
            n.min(bands)
        )));
    }
    let mean = DVector::from_iterator(bands, x.column_iter().map(|c| c.mean()));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / n as f64;
    let total = cov.trace();
    if total <= 0.0 || !total.is_finite() {
        return Err(FusionError::Degenerate(
            "hyperspectral input has zero variance".into(),
        ));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..bands).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut basis = DMatrix::zeros(dim, bands);
    let mut explained = Vec::with_capacity(dim);
    for (k, &idx) in order.iter().take(dim).enumerate() {
        let axis = eig.eigenvectors.column(idx);
        let lead = axis.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        basis.row_mut(k).copy_from(&(axis.transpose() * sign));
        explained.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(Subspace {
        basis,
        mean_spectrum: mean,
        explained_variance: explained,
    })
}

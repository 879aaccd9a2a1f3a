//! The fusion problem in subspace coordinates.
//!
//! With `F = R·Q + 1·meanᵀ` and both operators preserving constants, the data
//! terms reduce to `H_c ≈ L·R·Q` and `M_c ≈ R·Q·B` where `H_c`, `M_c` are the
//! observations with the (projected) mean spectrum removed. Noise covariances
//! are diagonal per band.

use nalgebra::{DMatrix, DVector};

use crate::cube::SpectralCube;
use crate::degrade::{BandSelector, SpatialOperator};
use crate::error::{FusionError, Result};
use crate::subspace::Subspace;

/// Observations, operators and weights shared by the MAP initializer and the
/// ADMM solver.
#[derive(Debug, Clone)]
pub struct FusionProblem<'a> {
    pub(crate) op: &'a SpatialOperator,
    pub(crate) sel: &'a BandSelector,
    pub(crate) sub: &'a Subspace,
    /// `N_H × Z_H`, mean removed.
    pub(crate) hs: DMatrix<f64>,
    /// `N_M × Z_M`, mean removed.
    pub(crate) ms: DMatrix<f64>,
    pub(crate) inv_var_h: DVector<f64>,
    pub(crate) inv_var_m: DVector<f64>,
    /// `Q·B`, `Z̃ × Z_M`.
    pub(crate) qb: DMatrix<f64>,
    /// `Q·Λ_H⁻¹·Qᵀ`
    pub(crate) gram_h: DMatrix<f64>,
    /// `H_c·Λ_H⁻¹·Qᵀ`
    pub(crate) hs_proj: DMatrix<f64>,
    /// `Q·B·Λ_M⁻¹·Bᵀ·Qᵀ`
    pub(crate) gram_m: DMatrix<f64>,
    /// `M_c·Λ_M⁻¹·Bᵀ·Qᵀ`
    pub(crate) ms_proj: DMatrix<f64>,
}

impl<'a> FusionProblem<'a> {
    /// Checks every dimension and precomputes the iteration-independent
    /// products. Variances are floored at `1e-10` of the band's mean square so
    /// noiseless inputs still give finite weights.
    pub fn new(
        hs: &SpectralCube,
        ms: &SpectralCube,
        op: &'a SpatialOperator,
        sel: &'a BandSelector,
        sub: &'a Subspace,
        var_h: &[f64],
        var_m: &[f64],
    ) -> Result<Self> {
        check_dims(hs, ms, op, sel)?;
        if sub.n_bands() != hs.bands() {
            return Err(FusionError::shape(format!(
                "subspace spans {} bands, HS image has {}",
                sub.n_bands(),
                hs.bands()
            )));
        }
        if var_h.len() != hs.bands() || var_m.len() != ms.bands() {
            return Err(FusionError::shape(format!(
                "expected {} HS and {} MS variances, got {} and {}",
                hs.bands(),
                ms.bands(),
                var_h.len(),
                var_m.len()
            )));
        }
        let inv_var_h = inverse_variances(hs, var_h)?;
        let inv_var_m = inverse_variances(ms, var_m)?;

        let hs_c = sub.center(hs.as_matrix().matrix());
        let ms_mean = sel.matrix().transpose() * sub.mean_spectrum();
        let mut ms_c = ms.as_matrix().into_inner();
        for mut row in ms_c.row_iter_mut() {
            row -= ms_mean.transpose();
        }

        let q = sub.basis();
        let qb = q * sel.matrix();
        let wq_t = scale_rows(&q.transpose(), &inv_var_h); // Λ_H⁻¹·Qᵀ
        let gram_h = q * &wq_t;
        let hs_proj = &hs_c * &wq_t;
        let wqb_t = scale_rows(&qb.transpose(), &inv_var_m); // Λ_M⁻¹·Bᵀ·Qᵀ
        let gram_m = &qb * &wqb_t;
        let ms_proj = &ms_c * &wqb_t;

        Ok(FusionProblem {
            op,
            sel,
            sub,
            hs: hs_c,
            ms: ms_c,
            inv_var_h,
            inv_var_m,
            qb,
            gram_h,
            hs_proj,
            gram_m,
            ms_proj,
        })
    }

    pub fn dim(&self) -> usize {
        self.sub.dim()
    }

    pub fn hs_pixels(&self) -> usize {
        self.hs.nrows()
    }

    pub fn ms_pixels(&self) -> usize {
        self.ms.nrows()
    }

    pub fn operator(&self) -> &SpatialOperator {
        self.op
    }

    pub fn selector(&self) -> &BandSelector {
        self.sel
    }

    pub fn subspace(&self) -> &Subspace {
        self.sub
    }

    /// `½‖(H_c − L·R·Q)·Λ_H^(−½)‖²_F`
    pub fn hs_misfit(&self, r: &DMatrix<f64>) -> f64 {
        let pred = self.op.apply_matrix(r) * self.sub.basis();
        weighted_half_norm2(&(&self.hs - pred), &self.inv_var_h)
    }

    /// `½‖(M_c − R·Q·B)·Λ_M^(−½)‖²_F`
    pub fn ms_misfit(&self, r: &DMatrix<f64>) -> f64 {
        let pred = r * &self.qb;
        weighted_half_norm2(&(&self.ms - pred), &self.inv_var_m)
    }

    /// Weighted data fit plus `η·Σ|R_ij|`.
    pub fn objective(&self, r: &DMatrix<f64>, eta: f64) -> f64 {
        self.hs_misfit(r) + self.ms_misfit(r) + eta * r.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Gradient of the smooth part of [`FusionProblem::objective`].
    pub fn smooth_gradient(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let lr = self.op.apply_matrix(r);
        let resid_h = &self.hs - lr * self.sub.basis();
        let g_h = self.op.adjoint_matrix(
            &(scale_columns(&resid_h, &self.inv_var_h) * self.sub.basis().transpose()),
        );
        let resid_m = &self.ms - r * &self.qb;
        let g_m = scale_columns(&resid_m, &self.inv_var_m) * self.qb.transpose();
        -(g_h + g_m)
    }
}

pub(crate) fn check_dims(
    hs: &SpectralCube,
    ms: &SpectralCube,
    op: &SpatialOperator,
    sel: &BandSelector,
) -> Result<()> {
    let mut problems = Vec::new();
    if (ms.rows(), ms.cols()) != op.input_dims() {
        problems.push(format!(
            "MS image is {}x{} but the spatial operator expects {}x{}",
            ms.rows(),
            ms.cols(),
            op.input_dims().0,
            op.input_dims().1
        ));
    }
    if (hs.rows(), hs.cols()) != op.output_dims() {
        problems.push(format!(
            "HS image is {}x{} but the spatial operator produces {}x{}",
            hs.rows(),
            hs.cols(),
            op.output_dims().0,
            op.output_dims().1
        ));
    }
    if hs.bands() != sel.input_bands() {
        problems.push(format!(
            "HS image has {} bands, band selector expects {}",
            hs.bands(),
            sel.input_bands()
        ));
    }
    if ms.bands() != sel.output_bands() {
        problems.push(format!(
            "MS image has {} bands, band selector produces {}",
            ms.bands(),
            sel.output_bands()
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(FusionError::Shape(problems.join("; ")))
    }
}

fn inverse_variances(image: &SpectralCube, var: &[f64]) -> Result<DVector<f64>> {
    if let Some(v) = var.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(FusionError::param(format!(
            "noise variances must be finite and nonnegative, got {v}"
        )));
    }
    let n = image.n_pixels() as f64;
    Ok(DVector::from_iterator(
        var.len(),
        var.iter().enumerate().map(|(b, &v)| {
            let power = image.band(b).iter().map(|x| x * x).sum::<f64>() / n;
            let floor = if power > 0.0 { 1e-10 * power } else { 1e-300 };
            1.0 / v.max(floor)
        }),
    ))
}

pub(crate) fn scale_columns(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut col, wk) in out.column_iter_mut().zip(w.iter()) {
        col *= *wk;
    }
    out
}

pub(crate) fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut row, wk) in out.row_iter_mut().zip(w.iter()) {
        row *= *wk;
    }
    out
}

fn weighted_half_norm2(m: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    0.5 * m
        .column_iter()
        .zip(w.iter())
        .map(|(col, wk)| wk * col.norm_squared())
        .sum::<f64>()
}

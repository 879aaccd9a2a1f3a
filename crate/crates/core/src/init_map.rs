//! MAP initialization of the reduced image.
//!
//! The prior `R̄ | M` is Gaussian with conditional mean `R̃` (a linear
//! regression of subspace coefficients on MS spectra) and a single row
//! covariance `Λ_{R̄|M}`. The estimate minimizes
//!
//! ```text
//! ½‖(H_c − L·R̄·Q)·Λ_H^(−½)‖²_F + ½ Σ_i (r̄_i − r̃_i)·Λ_{R̄|M}⁻¹·(r̄_i − r̃_i)ᵀ
//! ```
//!
//! whose normal equations `LᵀL·R̄·G + R̄·P = Lᵀ·H_c·Λ_H⁻¹·Qᵀ + R̃·P`
//! (`G = Q·Λ_H⁻¹·Qᵀ`, `P = Λ_{R̄|M}⁻¹`) decouple after a congruence that
//! diagonalizes `G` and `P` together, leaving one FFT-diagonal solve
//! `(d_j·LᵀL + I)·y_j = b_j` per subspace band.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::cube::SpectralCube;
use crate::degrade::SpatialOperator;
use crate::error::{FusionError, Result};
use crate::model::FusionProblem;
use crate::subspace::Subspace;

/// Joint statistics of projected HS pixels and block-averaged MS pixels.
#[derive(Debug, Clone)]
pub struct MapStatistics {
    /// `Λ_{R̄,M}`, dim × Z_M.
    pub cross_cov: DMatrix<f64>,
    /// `Λ_{M,M}`, Z_M × Z_M, with `ms_ridge` already added.
    pub ms_cov: DMatrix<f64>,
    /// `Λ_{R̄,R̄}`, dim × dim.
    pub r_cov: DMatrix<f64>,
    /// `Λ_{R̄|M}`, dim × dim.
    pub cond_cov: DMatrix<f64>,
    pub mean_r: DVector<f64>,
    pub mean_m: DVector<f64>,
    /// `R̃ = E[R̄ | M]`, one row per MS pixel.
    pub conditional_mean: DMatrix<f64>,
    /// Ridge added to a singular `Λ_{M,M}`, if any.
    pub ms_ridge: Option<f64>,
}

/// Estimates the prior statistics by pairing each HS pixel `(p, q)` with the
/// mean of the MS block `[p·d, p·d + d) × [q·d, q·d + d)`. Covariances use the
/// `1/n` normalization.
pub fn estimate_statistics(
    hs: &SpectralCube,
    ms: &SpectralCube,
    sub: &Subspace,
    op: &SpatialOperator,
) -> Result<MapStatistics> {
    if (ms.rows(), ms.cols()) != op.input_dims() || (hs.rows(), hs.cols()) != op.output_dims() {
        return Err(FusionError::shape(format!(
            "HS {}x{} and MS {}x{} do not match the spatial operator",
            hs.rows(),
            hs.cols(),
            ms.rows(),
            ms.cols()
        )));
    }
    let coeffs = sub.project_matrix(hs.as_matrix().matrix())?;
    let blocks = block_average(ms, op.factor());
    let ms_full = ms.as_matrix().into_inner();
    let stats = statistics_from_pairs(&coeffs, &blocks, &ms_full);
    Ok(stats)
}

pub(crate) fn statistics_from_pairs(
    coeffs: &DMatrix<f64>,
    blocks: &DMatrix<f64>,
    ms_full: &DMatrix<f64>,
) -> MapStatistics {
    let n = coeffs.nrows() as f64;
    let mean_r = column_means(coeffs);
    let mean_m = column_means(blocks);
    let rc = center(coeffs, &mean_r);
    let mc = center(blocks, &mean_m);

    let r_cov = symmetrize(&(rc.transpose() * &rc / n));
    let cross_cov = rc.transpose() * &mc / n;
    let mut ms_cov = symmetrize(&(mc.transpose() * &mc / n));

    let z_m = ms_cov.nrows();
    let eig = SymmetricEigen::new(ms_cov.clone());
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    let mut ms_ridge = None;
    if max_eig <= 0.0 || min_eig <= 1e-12 * max_eig {
        let trace = ms_cov.trace();
        let eps = if trace > 0.0 {
            1e-8 * trace / z_m as f64
        } else {
            1e-12
        };
        ms_cov += DMatrix::<f64>::identity(z_m, z_m) * eps;
        ms_ridge = Some(eps);
    }

    // gain = Λ_{R̄,M}·Λ_{M,M}⁻¹ through Λ_{M,M}·gainᵀ = Λ_{R̄,M}ᵀ
    let gain = ms_cov
        .clone()
        .cholesky()
        .map(|c| c.solve(&cross_cov.transpose()).transpose())
        .unwrap_or_else(|| {
            ms_cov
                .clone()
                .pseudo_inverse(1e-14)
                .map(|pinv| &cross_cov * pinv)
                .expect("pseudo-inverse of a symmetric matrix")
        });
    let cond_cov = symmetrize(&(&r_cov - &gain * cross_cov.transpose()));

    let mut conditional_mean = center(ms_full, &mean_m) * gain.transpose();
    for mut row in conditional_mean.row_iter_mut() {
        row += mean_r.transpose();
    }

    MapStatistics {
        cross_cov,
        ms_cov,
        r_cov,
        cond_cov,
        mean_r,
        mean_m,
        conditional_mean,
        ms_ridge,
    }
}

/// The MAP estimate and whether its conditional covariance needed a ridge.
#[derive(Debug, Clone)]
pub struct MapInit {
    pub coeffs: DMatrix<f64>,
    pub cond_ridge: Option<f64>,
}

/// Solves the MAP objective exactly in closed form.
pub fn map_initialize(problem: &FusionProblem<'_>, stats: &MapStatistics) -> Result<MapInit> {
    let dim = problem.dim();
    if stats.cond_cov.shape() != (dim, dim)
        || stats.conditional_mean.shape() != (problem.ms_pixels(), dim)
    {
        return Err(FusionError::shape(
            "MAP statistics do not match the problem",
        ));
    }

    // C = V·S·Vᵀ with eigenvalues clamped from below
    let cond = SymmetricEigen::new(symmetrize(&stats.cond_cov));
    let trace = cond.eigenvalues.iter().map(|v| v.max(0.0)).sum::<f64>();
    let scale = if trace > 0.0 {
        trace / dim as f64
    } else {
        problem
            .sub
            .explained_variance()
            .iter()
            .sum::<f64>()
            .max(1e-300)
            / dim as f64
    };
    let floor = 1e-8 * scale;
    let mut cond_ridge = None;
    let s: Vec<f64> = cond
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < floor {
                cond_ridge = Some(floor);
                floor
            } else {
                v
            }
        })
        .collect();
    let v = &cond.eigenvectors;
    let sqrt_c = v
        * DMatrix::from_diagonal(&DVector::from_iterator(dim, s.iter().map(|x| x.sqrt())))
        * v.transpose();
    let inv_sqrt_c =
        v * DMatrix::from_diagonal(&DVector::from_iterator(
            dim,
            s.iter().map(|x| 1.0 / x.sqrt()),
        )) * v.transpose();

    // C^{½}·G·C^{½} = U·D·Uᵀ
    let inner = SymmetricEigen::new(symmetrize(&(&sqrt_c * &problem.gram_h * &sqrt_c)));
    let u = &inner.eigenvectors;

    let data_rhs = problem.op.adjoint_matrix(&problem.hs_proj) * &sqrt_c * u;
    let prior_rhs = &stats.conditional_mean * &inv_sqrt_c * u;
    let rhs = data_rhs + prior_rhs;

    let mut y = DMatrix::zeros(problem.ms_pixels(), dim);
    for j in 0..dim {
        let d = inner.eigenvalues[j].max(0.0);
        let col = problem.op.solve_shifted(d, 1.0, rhs.column(j).as_slice());
        y.column_mut(j).copy_from_slice(&col);
    }
    let coeffs = y * u.transpose() * &sqrt_c;
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite {
            iteration: 0,
            block: "MAP initialization".into(),
        });
    }
    Ok(MapInit { coeffs, cond_ridge })
}

/// Value of the MAP objective at `r`.
pub fn map_objective(problem: &FusionProblem<'_>, stats: &MapStatistics, r: &DMatrix<f64>) -> f64 {
    let prior = prior_precision(stats);
    let diff = r - &stats.conditional_mean;
    problem.hs_misfit(r) + 0.5 * (&diff * &prior).component_mul(&diff).sum()
}

/// Gradient of [`map_objective`].
pub fn map_gradient(
    problem: &FusionProblem<'_>,
    stats: &MapStatistics,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let prior = prior_precision(stats);
    let lr = problem.op.apply_matrix(r);
    let resid = &problem.hs - lr * problem.sub.basis();
    let weighted = crate::model::scale_columns(&resid, &problem.inv_var_h);
    let data = problem
        .op
        .adjoint_matrix(&(weighted * problem.sub.basis().transpose()));
    (r - &stats.conditional_mean) * prior - data
}

fn prior_precision(stats: &MapStatistics) -> DMatrix<f64> {
    let dim = stats.cond_cov.nrows();
    let cond = SymmetricEigen::new(symmetrize(&stats.cond_cov));
    let trace = cond.eigenvalues.iter().map(|v| v.max(0.0)).sum::<f64>();
    let floor = 1e-8
        * if trace > 0.0 {
            trace / dim as f64
        } else {
            1e-300
        };
    let inv = DVector::from_iterator(dim, cond.eigenvalues.iter().map(|v| 1.0 / v.max(floor)));
    &cond.eigenvectors * DMatrix::from_diagonal(&inv) * cond.eigenvectors.transpose()
}

/// Mean of each `factor × factor` block, one row per coarse pixel.
pub fn block_average(ms: &SpectralCube, factor: usize) -> DMatrix<f64> {
    let (rows, cols) = (ms.rows() / factor, ms.cols() / factor);
    let norm = (factor * factor) as f64;
    let mut out = DMatrix::zeros(rows * cols, ms.bands());
    for b in 0..ms.bands() {
        for p in 0..rows {
            for q in 0..cols {
                let mut acc = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += ms.get(p * factor + dr, q * factor + dc, b);
                    }
                }
                out[(p * cols + q, b)] = acc / norm;
            }
        }
    }
    out
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn center(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

//! Weighted-LASSO fusion solved by ADMM.
//!
//! The reduced image `R` minimizes
//!
//! ```text
//! ½‖(H_c − L·R·Q)·Λ_H^(−½)‖²_F + ½‖(M_c − R·Q·B)·Λ_M^(−½)‖²_F + η·Σ|R_ij|
//! ```
//!
//! With splittings `W1 = L·R`, `W2 = R`, `W3 = R` and scaled multipliers the
//! augmented Lagrangian is
//!
//! ```text
//! ½‖(H_c − W1·Q)·Λ_H^(−½)‖² + μ/2‖L·R − W1 − J1‖²
//! + ½‖(M_c − W2·Q·B)·Λ_M^(−½)‖² + μ/2‖R − W2 − J2‖²
//! + η‖W3‖₁ + μ/2‖W3 − R − J3‖²
//! ```
//!
//! Every block update below is the exact minimizer of that function over its
//! block. The dual steps are `J1 += W1 − L·R`, `J2 += W2 − R` and
//! `J3 += R − W3`; the last sign follows from `J3` entering its penalty as
//! `W3 − R − J3` rather than `R − W3 − J3`.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::cube::{MatrixView, SpectralCube};
use crate::degrade::{BandSelector, SpatialOperator};
use crate::error::{FusionError, Result};
use crate::init_map::{estimate_statistics, map_initialize};
use crate::model::FusionProblem;
use crate::subspace::{fit_pca, Subspace};

/// `argmin_w ½(w − x)² + t·|w|`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Penalty parameter. When neither this nor `mu_ms_weight` is set,
    /// `5e-2·mean(diag Λ_H)/Z_H`.
    pub mu: Option<f64>,
    /// `μ = k·mean(diag Λ_M⁻¹)`: ties the penalty to the MS data weights, so
    /// it does not depend on the intensity scale.
    pub mu_ms_weight: Option<f64>,
    /// L1 weight; `None` uses `1.25e-3·‖H‖_∞` (max absolute row sum).
    pub eta: Option<f64>,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Early exit when `‖R_u − R_{u−1}‖/‖R_{u−1}‖` drops below this.
    pub convergence_tol: f64,
    pub record_objective: bool,
    pub subspace_dim: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mu: None,
            mu_ms_weight: None,
            eta: None,
            outer_iters: 10,
            inner_iters: 20,
            convergence_tol: 1e-5,
            record_objective: true,
            subspace_dim: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                errs.push(format!("mu must be positive and finite, got {mu}"));
            }
        }
        if let Some(k) = self.mu_ms_weight {
            if !(k > 0.0 && k.is_finite()) {
                errs.push(format!("mu_ms_weight must be positive and finite, got {k}"));
            }
            if self.mu.is_some() {
                errs.push("set at most one of mu and mu_ms_weight".into());
            }
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                errs.push(format!("eta must be nonnegative and finite, got {eta}"));
            }
        }
        if self.outer_iters == 0 {
            errs.push("outer_iters must be at least 1".into());
        }
        if self.inner_iters == 0 {
            errs.push("inner_iters must be at least 1".into());
        }
        if !(self.convergence_tol >= 0.0) {
            errs.push(format!(
                "convergence_tol must be >= 0, got {}",
                self.convergence_tol
            ));
        }
        if self.subspace_dim == 0 {
            errs.push("subspace_dim must be at least 1".into());
        }
        errs
    }

    /// The penalty this configuration uses on `problem`, whose raw HS noise
    /// variances are `var_h`.
    pub fn resolve_mu(&self, problem: &FusionProblem<'_>, var_h: &[f64]) -> f64 {
        match (self.mu, self.mu_ms_weight) {
            (Some(mu), _) => mu,
            (None, Some(k)) => k * problem.inv_var_m.mean(),
            (None, None) => default_mu(var_h),
        }
    }
}

/// Per-band weight levels in dB SNR: one value, a linear ramp (in dB) from
/// the first band to the last, or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightLevels {
    Scalar(f64),
    PerBand(Vec<f64>),
    Range { from: f64, to: f64 },
}

impl WeightLevels {
    pub fn levels(&self, bands: usize) -> Result<Vec<f64>> {
        let out = match self {
            WeightLevels::Scalar(db) => vec![*db; bands],
            WeightLevels::Range { from, to } => (0..bands)
                .map(|b| {
                    let t = if bands > 1 {
                        b as f64 / (bands - 1) as f64
                    } else {
                        0.0
                    };
                    from + t * (to - from)
                })
                .collect(),
            WeightLevels::PerBand(v) => {
                if v.len() != bands {
                    return Err(FusionError::shape(format!(
                        "{} weight levels for {bands} bands",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(FusionError::param(format!(
                "weight level must be finite, got {bad}"
            )));
        }
        Ok(out)
    }

    /// Noise variances implied by the levels: band power / 10^(dB/10).
    pub fn variances(&self, cube: &SpectralCube) -> Result<Vec<f64>> {
        crate::degrade::variances_for_snr(
            cube,
            &crate::degrade::SnrDb::PerBand(self.levels(cube.bands())?),
        )
    }
}

/// Tenfold penalty increases allowed per outer iteration before giving up on
/// finding a descent step.
pub const MAX_PENALTY_RAISES: usize = 12;

/// `5e-2·mean(diag Λ_H)/Z_H`
pub fn default_mu(var_h: &[f64]) -> f64 {
    let mean = var_h.iter().sum::<f64>() / var_h.len() as f64;
    5e-2 * mean / var_h.len() as f64
}

/// `1.25e-3·‖H‖_∞` with the induced (max absolute row sum) norm.
pub fn default_eta(hs: &SpectralCube) -> f64 {
    let m = hs.as_matrix();
    let norm = m
        .matrix()
        .row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    1.25e-3 * norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub r: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    pub j1: DMatrix<f64>,
    pub j2: DMatrix<f64>,
    pub j3: DMatrix<f64>,
    /// Completed outer iterations.
    pub outer: usize,
    /// Completed inner iterations, over the whole run.
    pub inner: usize,
    pub objective_history: Vec<f64>,
}

impl AdmmState {
    /// `W1 = L·R₀`, `W2 = W3 = R₀`, multipliers zero.
    pub fn initial(r0: DMatrix<f64>, op: &SpatialOperator) -> Self {
        let w1 = op.apply_matrix(&r0);
        let zeros_h = DMatrix::zeros(w1.nrows(), w1.ncols());
        let zeros_m = DMatrix::zeros(r0.nrows(), r0.ncols());
        AdmmState {
            w1,
            w2: r0.clone(),
            w3: r0.clone(),
            j1: zeros_h,
            j2: zeros_m.clone(),
            j3: zeros_m,
            r: r0,
            outer: 0,
            inner: 0,
            objective_history: Vec::new(),
        }
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        let blocks: [(&'static str, &DMatrix<f64>); 7] = [
            ("R", &self.r),
            ("W1", &self.w1),
            ("W2", &self.w2),
            ("W3", &self.w3),
            ("J1", &self.j1),
            ("J2", &self.j2),
            ("J3", &self.j3),
        ];
        blocks
            .into_iter()
            .find(|(_, m)| m.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

/// ADMM block updates for one problem with fixed `μ` and `η`.
pub struct Admm<'p, 'a> {
    problem: &'p FusionProblem<'a>,
    mu: f64,
    eta: f64,
    /// `Q·Λ_H⁻¹·Qᵀ + μI`
    w1_system: Cholesky<f64, Dyn>,
    /// `Q·B·Λ_M⁻¹·Bᵀ·Qᵀ + μI`
    w2_system: Cholesky<f64, Dyn>,
}

impl<'p, 'a> Admm<'p, 'a> {
    pub fn new(problem: &'p FusionProblem<'a>, mu: f64, eta: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(FusionError::param(format!("mu must be positive, got {mu}")));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(FusionError::param(format!(
                "eta must be nonnegative, got {eta}"
            )));
        }
        let dim = problem.dim();
        let id = DMatrix::<f64>::identity(dim, dim);
        let w1_system = Cholesky::new(&problem.gram_h + &id * mu)
            .ok_or_else(|| FusionError::Degenerate("W1 system is not positive definite".into()))?;
        let w2_system = Cholesky::new(&problem.gram_m + &id * mu)
            .ok_or_else(|| FusionError::Degenerate("W2 system is not positive definite".into()))?;
        Ok(Admm {
            problem,
            mu,
            eta,
            w1_system,
            w2_system,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Starts at `R₀` with every `W` block at consensus and dual-feasible
    /// multipliers: `J1`, `J2` are the data-term gradients at `R₀` over `μ`,
    /// `J3` a subgradient of `η‖·‖₁` over `μ`. Each `W` update then leaves its
    /// block in place, and the first `R` step is a preconditioned gradient
    /// step of length `1/μ` rather than a jump toward the raw observations.
    pub fn warm_start(&self, r0: DMatrix<f64>) -> AdmmState {
        let p = self.problem;
        let mut s = AdmmState::initial(r0, p.op);
        let inv_mu = 1.0 / self.mu;
        s.j1 = (&p.hs_proj - &s.w1 * &p.gram_h) * inv_mu;
        s.j2 = (&p.ms_proj - &s.r * &p.gram_m) * inv_mu;
        let t = self.eta * inv_mu;
        s.j3 = s.r.map(|x| if x == 0.0 { 0.0 } else { t * x.signum() });
        s
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn problem(&self) -> &FusionProblem<'a> {
        self.problem
    }

    /// `(LᵀL + 2I)·R = Lᵀ(W1 + J1) + (W2 + J2) + (W3 − J3)`, one FFT solve
    /// per subspace band.
    pub fn update_r(&self, s: &AdmmState) -> DMatrix<f64> {
        let op = self.problem.op;
        let rhs = op.adjoint_matrix(&(&s.w1 + &s.j1)) + &s.w2 + &s.j2 + &s.w3 - &s.j3;
        op.solve_shifted_matrix(1.0, 2.0, &rhs)
    }

    /// `W1 = (H_c·Λ_H⁻¹·Qᵀ + μ(L·R − J1))·(Q·Λ_H⁻¹·Qᵀ + μI)⁻¹`
    pub fn update_w1(&self, s: &AdmmState) -> DMatrix<f64> {
        let rhs = &self.problem.hs_proj + (self.problem.op.apply_matrix(&s.r) - &s.j1) * self.mu;
        self.w1_system.solve(&rhs.transpose()).transpose()
    }

    /// `W2 = (M_c·Λ_M⁻¹·Bᵀ·Qᵀ + μ(R − J2))·(Q·B·Λ_M⁻¹·Bᵀ·Qᵀ + μI)⁻¹`
    pub fn update_w2(&self, s: &AdmmState) -> DMatrix<f64> {
        let rhs = &self.problem.ms_proj + (&s.r - &s.j2) * self.mu;
        self.w2_system.solve(&rhs.transpose()).transpose()
    }

    /// Entrywise soft threshold of `R + J3` at `η/μ`.
    pub fn update_w3(&self, s: &AdmmState) -> DMatrix<f64> {
        let t = self.eta / self.mu;
        (&s.r + &s.j3).map(|x| soft_threshold(x, t))
    }

    pub fn update_j1(&self, s: &AdmmState) -> DMatrix<f64> {
        &s.j1 + &s.w1 - self.problem.op.apply_matrix(&s.r)
    }

    pub fn update_j2(&self, s: &AdmmState) -> DMatrix<f64> {
        &s.j2 + &s.w2 - &s.r
    }

    pub fn update_j3(&self, s: &AdmmState) -> DMatrix<f64> {
        &s.j3 + &s.r - &s.w3
    }

    /// All three multiplier steps from the current primal blocks.
    pub fn update_duals(&self, s: &AdmmState) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.update_j1(s), self.update_j2(s), self.update_j3(s))
    }

    /// One inner iteration: `R`, `W1`, `J1`, `W2`, `J2`.
    pub fn inner_step(&self, s: &mut AdmmState) {
        s.r = self.update_r(s);
        s.w1 = self.update_w1(s);
        s.j1 = self.update_j1(s);
        s.w2 = self.update_w2(s);
        s.j2 = self.update_j2(s);
        s.inner += 1;
    }

    /// Sparsity step closing an outer iteration: `W3`, then `J3`.
    pub fn outer_step(&self, s: &mut AdmmState) {
        s.w3 = self.update_w3(s);
        s.j3 = self.update_j3(s);
        s.outer += 1;
    }

    /// The augmented Lagrangian at `s`.
    pub fn lagrangian(&self, s: &AdmmState) -> f64 {
        let p = self.problem;
        let half_mu = 0.5 * self.mu;
        let fit_h = {
            let resid = &p.hs - &s.w1 * p.sub.basis();
            weighted(&resid, &p.inv_var_h)
        };
        let fit_m = {
            let resid = &p.ms - &s.w2 * &p.qb;
            weighted(&resid, &p.inv_var_m)
        };
        let lr = p.op.apply_matrix(&s.r);
        fit_h
            + half_mu * (lr - &s.w1 - &s.j1).norm_squared()
            + fit_m
            + half_mu * (&s.r - &s.w2 - &s.j2).norm_squared()
            + self.eta * s.w3.iter().map(|v| v.abs()).sum::<f64>()
            + half_mu * (&s.w3 - &s.r - &s.j3).norm_squared()
    }

    /// Relative consensus residuals `‖L·R − W1‖/‖L·R‖`, `‖R − W2‖/‖R‖`,
    /// `‖R − W3‖/‖R‖`.
    pub fn residuals(&self, s: &AdmmState) -> [f64; 3] {
        let lr = self.problem.op.apply_matrix(&s.r);
        let rn = s.r.norm().max(f64::MIN_POSITIVE);
        [
            (&lr - &s.w1).norm() / lr.norm().max(f64::MIN_POSITIVE),
            (&s.r - &s.w2).norm() / rn,
            (&s.r - &s.w3).norm() / rn,
        ]
    }
}

fn weighted(m: &DMatrix<f64>, w: &nalgebra::DVector<f64>) -> f64 {
    0.5 * m
        .column_iter()
        .zip(w.iter())
        .map(|(c, wk)| wk * c.norm_squared())
        .sum::<f64>()
}

/// One line of the per-outer-iteration diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub outer: usize,
    pub objective: f64,
    /// Penalty the accepted step ran with.
    pub mu: f64,
    pub residual_w1: f64,
    pub residual_w2: f64,
    pub residual_w3: f64,
    pub r_change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    IterationBudget,
    Converged,
    /// No penalty up to `MAX_PENALTY_RAISES` tenfold increases produced an
    /// outer step that lowers the objective.
    NoDescent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pca_s: f64,
    pub map_s: f64,
    /// ADMM iterations only.
    pub fusion_s: f64,
    /// PCA + MAP + ADMM + reconstruction.
    pub algorithm_s: f64,
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub fused: SpectralCube,
    pub subspace: Subspace,
    pub state: AdmmState,
    /// The MAP initialization `R̄`.
    pub initial: MatrixView,
    /// Configured penalty.
    pub mu_initial: f64,
    /// Penalty at the end; above `mu_initial` when some outer step had to be
    /// retried with a stiffer penalty to keep the objective from rising.
    pub mu: f64,
    pub eta: f64,
    pub timing: Timing,
    pub diagnostics: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub ms_ridge: Option<f64>,
    pub cond_ridge: Option<f64>,
}

impl FusionResult {
    /// `R̄·Q + mean` as a cube on the MS grid.
    pub fn initial_cube(&self) -> Result<SpectralCube> {
        let f = self.subspace.reconstruct(&self.initial)?;
        SpectralCube::from_matrix(f, self.fused.rows(), self.fused.cols())
    }
}

/// Runs the full fusion: PCA on `hs`, MAP initialization, then `outer_iters`
/// rounds of (`inner_iters` least-squares ADMM steps + one sparsity step).
///
/// An outer round that would raise the objective is discarded and rerun from
/// the last accepted iterate with `μ` ten times larger, so the recorded
/// objective never increases.
pub fn fuse(
    hs: &SpectralCube,
    ms: &SpectralCube,
    op: &SpatialOperator,
    sel: &BandSelector,
    var_h: &[f64],
    var_m: &[f64],
    config: &SolverConfig,
) -> Result<FusionResult> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(FusionError::Config(errs));
    }
    crate::model::check_dims(hs, ms, op, sel)?;
    let start = Instant::now();

    let sub = fit_pca(&hs.as_matrix(), config.subspace_dim)?;
    let pca_s = start.elapsed().as_secs_f64();

    let map_start = Instant::now();
    let problem = FusionProblem::new(hs, ms, op, sel, &sub, var_h, var_m)?;
    let stats = estimate_statistics(hs, ms, &sub, op)?;
    let init = map_initialize(&problem, &stats)?;
    let map_s = map_start.elapsed().as_secs_f64();

    let mu = config.resolve_mu(&problem, var_h);
    let eta = config.eta.unwrap_or_else(|| default_eta(hs));
    let mut admm = Admm::new(&problem, mu, eta)?;
    log::debug!(
        "admm: mu = {mu:e}, eta = {eta:e}, threshold = {:e}",
        eta / mu
    );

    let admm_start = Instant::now();
    let mut state = admm.warm_start(init.coeffs.clone());
    let mut objective = problem.objective(&state.r, eta);
    // roundoff allowance for the descent test
    let slack = 1e-12 * objective.abs();
    let mut diagnostics = Vec::new();
    if config.record_objective {
        state.objective_history.push(objective);
    }
    let mut stop_reason = StopReason::IterationBudget;
    'outer: for _ in 0..config.outer_iters {
        let accepted = state.clone();
        let mut raises = 0;
        let next = loop {
            for _ in 0..config.inner_iters {
                admm.inner_step(&mut state);
            }
            admm.outer_step(&mut state);
            if let Some(block) = state.first_non_finite() {
                return Err(FusionError::NonFinite {
                    iteration: state.outer,
                    block: block.into(),
                });
            }
            let next = problem.objective(&state.r, eta);
            if next <= objective + slack {
                break next;
            }
            // The step overshot: back off to the accepted iterate and retry
            // with a stiffer penalty, which shortens the first R step.
            if raises == MAX_PENALTY_RAISES {
                state = accepted;
                stop_reason = StopReason::NoDescent;
                log::warn!(
                    "no descent at outer iteration {} up to mu = {:e}",
                    state.outer + 1,
                    admm.mu()
                );
                break 'outer;
            }
            raises += 1;
            admm = Admm::new(&problem, admm.mu() * 10.0, eta)?;
            log::debug!(
                "outer {}: objective rose to {next:.6e}, raising mu to {:e}",
                accepted.outer + 1,
                admm.mu()
            );
            let mut restart = admm.warm_start(accepted.r.clone());
            restart.outer = accepted.outer;
            restart.inner = accepted.inner;
            restart.objective_history = accepted.objective_history.clone();
            state = restart;
        };
        objective = next;
        let previous = &accepted.r;
        let r_change = (&state.r - previous).norm() / previous.norm().max(f64::MIN_POSITIVE);
        if config.record_objective {
            let [residual_w1, residual_w2, residual_w3] = admm.residuals(&state);
            state.objective_history.push(objective);
            diagnostics.push(IterationRecord {
                outer: state.outer,
                objective,
                mu: admm.mu(),
                residual_w1,
                residual_w2,
                residual_w3,
                r_change,
            });
            log::debug!(
                "outer {}: objective {objective:.6e}, residuals {residual_w1:.2e} {residual_w2:.2e} {residual_w3:.2e}",
                state.outer
            );
        }
        if r_change < config.convergence_tol {
            stop_reason = StopReason::Converged;
            log::info!(
                "converged after {} outer iterations (dR = {r_change:.2e})",
                state.outer
            );
            break;
        }
    }
    let fusion_s = admm_start.elapsed().as_secs_f64();
    let mu_final = admm.mu();

    let fused = SpectralCube::from_matrix(
        sub.reconstruct_matrix(&state.r)?.into(),
        ms.rows(),
        ms.cols(),
    )?;
    let algorithm_s = start.elapsed().as_secs_f64();

    Ok(FusionResult {
        fused,
        subspace: sub,
        state,
        initial: init.coeffs.into(),
        mu_initial: mu,
        mu: mu_final,
        eta,
        timing: Timing {
            pca_s,
            map_s,
            fusion_s,
            algorithm_s,
        },
        diagnostics,
        stop_reason,
        ms_ridge: stats.ms_ridge,
        cond_ridge: init.cond_ridge,
    })
}

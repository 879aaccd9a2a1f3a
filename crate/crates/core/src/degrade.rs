//! Observation model: `H = L·S + noise` and `M = S·B + noise`.
//!
//! `L` blurs every band with a circular (periodic) convolution and then keeps
//! every `d`-th row and column starting at `(0, 0)`. Periodic boundaries make
//! `L·Lᵀ` circulant on the coarse grid, which is what lets the solver invert
//! `α·LᵀL + β·I` with FFTs.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::error::{FusionError, Result};
use crate::fft2::Fft2;

/// Square, odd-sided, nonnegative blur kernel normalized to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    taps: Vec<f64>,
}

impl Kernel {
    /// Row-major taps; they are normalized to sum to one.
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(FusionError::param(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        if taps.len() != size * size {
            return Err(FusionError::shape(format!(
                "{size}x{size} kernel needs {} taps, got {}",
                size * size,
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(FusionError::param(
                "kernel taps must be finite and nonnegative",
            ));
        }
        let sum: f64 = taps.iter().sum();
        if sum <= 0.0 {
            return Err(FusionError::param("kernel taps sum to zero"));
        }
        Ok(Kernel {
            size,
            taps: taps.into_iter().map(|t| t / sum).collect(),
        })
    }

    pub fn identity() -> Self {
        Kernel {
            size: 1,
            taps: vec![1.0],
        }
    }

    /// Sampled isotropic Gaussian `exp(−(x²+y²)/2σ²)`, normalized.
    /// `sigma = ∞` gives the flat box kernel.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 {
            return Err(FusionError::param(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(FusionError::param(format!(
                "kernel sigma must be > 0, got {sigma}"
            )));
        }
        let half = (size / 2) as f64;
        let mut taps = Vec::with_capacity(size * size);
        for a in 0..size {
            for b in 0..size {
                let (y, x) = (a as f64 - half, b as f64 - half);
                taps.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
            }
        }
        Kernel::new(size, taps)
    }

    /// Default width: the kernel edge sits at 3σ.
    pub fn default_sigma(size: usize) -> f64 {
        size as f64 / 6.0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn tap(&self, row: usize, col: usize) -> f64 {
        self.taps[row * self.size + col]
    }
}

/// Blur-then-decimate operator `L` for a fixed image size.
#[derive(Debug, Clone)]
pub struct SpatialOperator {
    kernel: Kernel,
    factor: usize,
    rows: usize,
    cols: usize,
    fine: Fft2,
    coarse: Fft2,
    kernel_hat: Vec<Complex64>,
    /// Eigenvalues of the coarse-grid circulant `L·Lᵀ`.
    gram_eigs: Vec<f64>,
}

impl SpatialOperator {
    pub fn new(kernel: Kernel, factor: usize, rows: usize, cols: usize) -> Result<Self> {
        if factor == 0 {
            return Err(FusionError::param("downsample factor must be positive"));
        }
        if rows == 0 || cols == 0 || rows % factor != 0 || cols % factor != 0 {
            return Err(FusionError::shape(format!(
                "image {rows}x{cols} is not divisible by downsample factor {factor}"
            )));
        }
        let fine = Fft2::new(rows, cols);
        let coarse = Fft2::new(rows / factor, cols / factor);

        let half = kernel.size / 2;
        let mut embedded = vec![0.0; rows * cols];
        for a in 0..kernel.size {
            for b in 0..kernel.size {
                let r = wrap(a as isize - half as isize, rows);
                let c = wrap(b as isize - half as isize, cols);
                embedded[r * cols + c] += kernel.tap(a, b);
            }
        }
        let kernel_hat = fine.forward_real(&embedded);

        // autocorrelation of the kernel, subsampled on the coarse lattice
        let power: Vec<Complex64> = kernel_hat
            .iter()
            .map(|k| Complex64::new(k.norm_sqr(), 0.0))
            .collect();
        let autocorr = fine.inverse_real(power);
        let (cr, cc) = (rows / factor, cols / factor);
        let mut sub = Vec::with_capacity(cr * cc);
        for r in 0..cr {
            for c in 0..cc {
                sub.push(autocorr[(r * factor) * cols + c * factor]);
            }
        }
        let gram_eigs = coarse
            .forward_real(&sub)
            .into_iter()
            .map(|z| z.re)
            .collect();

        Ok(SpatialOperator {
            kernel,
            factor,
            rows,
            cols,
            fine,
            coarse,
            kernel_hat,
            gram_eigs,
        })
    }

    pub fn identity(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Kernel::identity(), 1, rows, cols)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.rows / self.factor, self.cols / self.factor)
    }

    pub fn input_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn output_pixels(&self) -> usize {
        self.input_pixels() / (self.factor * self.factor)
    }

    /// Applies `L` to one row-major band image.
    pub fn apply_image(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_pixels(), "image size mismatch");
        let mut spec = self.fine.forward_real(x);
        for (s, k) in spec.iter_mut().zip(&self.kernel_hat) {
            *s *= k;
        }
        let blurred = self.fine.inverse_real(spec);
        self.decimate(&blurred)
    }

    /// Applies `Lᵀ` to one coarse band image.
    pub fn adjoint_image(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.output_pixels(), "image size mismatch");
        let filled = self.zero_fill(y);
        let mut spec = self.fine.forward_real(&filled);
        for (s, k) in spec.iter_mut().zip(&self.kernel_hat) {
            *s *= k.conj();
        }
        self.fine.inverse_real(spec)
    }

    /// Spatial-domain reference for [`SpatialOperator::apply_image`]:
    /// explicit periodic convolution followed by decimation.
    pub fn apply_image_direct(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_pixels(), "image size mismatch");
        let size = self.kernel.size;
        let half = (size / 2) as isize;
        let mut out = Vec::with_capacity(self.output_pixels());
        for r in (0..self.rows).step_by(self.factor) {
            for c in (0..self.cols).step_by(self.factor) {
                let mut acc = 0.0;
                for a in 0..size {
                    for b in 0..size {
                        let sr = wrap(r as isize - (a as isize - half), self.rows);
                        let sc = wrap(c as isize - (b as isize - half), self.cols);
                        acc += self.kernel.tap(a, b) * x[sr * self.cols + sc];
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    /// Solves `(α·LᵀL + β·I)·x = b` exactly for one band image (β > 0).
    ///
    /// With `U = L`, `(βI + αUᵀU)⁻¹ = (I − α·Uᵀ(βI + α·UUᵀ)⁻¹·U)/β`, and `UUᵀ`
    /// is circulant on the coarse grid.
    pub fn solve_shifted(&self, alpha: f64, beta: f64, b: &[f64]) -> Vec<f64> {
        assert!(beta > 0.0, "shift must be positive");
        if alpha == 0.0 {
            return b.iter().map(|v| v / beta).collect();
        }
        if self.factor == 1 {
            // LᵀL is diagonal in frequency; avoids the cancellation in the
            // Woodbury form when α ≫ β
            let mut spec = self.fine.forward_real(b);
            for (s, k) in spec.iter_mut().zip(&self.kernel_hat) {
                *s /= beta + alpha * k.norm_sqr();
            }
            return self.fine.inverse_real(spec);
        }
        let lb = self.apply_image(b);
        let mut spec = self.coarse.forward_real(&lb);
        for (s, eig) in spec.iter_mut().zip(&self.gram_eigs) {
            *s /= beta + alpha * eig;
        }
        let t = self.coarse.inverse_real(spec);
        let back = self.adjoint_image(&t);
        b.iter()
            .zip(&back)
            .map(|(bv, tv)| (bv - alpha * tv) / beta)
            .collect()
    }

    /// `L` applied to every column of a pixels × k matrix.
    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.input_pixels(), "matrix rows mismatch");
        self.map_columns(x, self.output_pixels(), |col| self.apply_image(col))
    }

    /// `Lᵀ` applied to every column of a coarse pixels × k matrix.
    pub fn adjoint_matrix(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(y.nrows(), self.output_pixels(), "matrix rows mismatch");
        self.map_columns(y, self.input_pixels(), |col| self.adjoint_image(col))
    }

    /// Column-wise `(α·LᵀL + β·I)⁻¹`.
    pub fn solve_shifted_matrix(&self, alpha: f64, beta: f64, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.input_pixels(), "matrix rows mismatch");
        self.map_columns(b, self.input_pixels(), |col| {
            self.solve_shifted(alpha, beta, col)
        })
    }

    pub fn apply(&self, cube: &SpectralCube) -> Result<SpectralCube> {
        self.check_cube(cube, self.input_dims())?;
        let (r, c) = self.output_dims();
        let data = self.map_bands(cube, |band| self.apply_image(band));
        SpectralCube::new(r, c, cube.bands(), data)
    }

    pub fn apply_adjoint(&self, cube: &SpectralCube) -> Result<SpectralCube> {
        self.check_cube(cube, self.output_dims())?;
        let data = self.map_bands(cube, |band| self.adjoint_image(band));
        SpectralCube::new(self.rows, self.cols, cube.bands(), data)
    }

    /// Same as [`SpatialOperator::apply`] through the spatial-domain path.
    pub fn apply_direct(&self, cube: &SpectralCube) -> Result<SpectralCube> {
        self.check_cube(cube, self.input_dims())?;
        let (r, c) = self.output_dims();
        let data = self.map_bands(cube, |band| self.apply_image_direct(band));
        SpectralCube::new(r, c, cube.bands(), data)
    }

    fn decimate(&self, full: &[f64]) -> Vec<f64> {
        if self.factor == 1 {
            return full.to_vec();
        }
        let mut out = Vec::with_capacity(self.output_pixels());
        for r in (0..self.rows).step_by(self.factor) {
            for c in (0..self.cols).step_by(self.factor) {
                out.push(full[r * self.cols + c]);
            }
        }
        out
    }

    fn zero_fill(&self, small: &[f64]) -> Vec<f64> {
        if self.factor == 1 {
            return small.to_vec();
        }
        let (_, cc) = self.output_dims();
        let mut full = vec![0.0; self.input_pixels()];
        for (i, v) in small.iter().enumerate() {
            let (r, c) = (i / cc, i % cc);
            full[(r * self.factor) * self.cols + c * self.factor] = *v;
        }
        full
    }

    fn check_cube(&self, cube: &SpectralCube, dims: (usize, usize)) -> Result<()> {
        if (cube.rows(), cube.cols()) != dims {
            return Err(FusionError::shape(format!(
                "operator expects {}x{} images, got {}x{}",
                dims.0,
                dims.1,
                cube.rows(),
                cube.cols()
            )));
        }
        Ok(())
    }

    fn map_bands(&self, cube: &SpectralCube, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Vec<f64> {
        let per_band: Vec<Vec<f64>> = (0..cube.bands())
            .into_par_iter()
            .map(|b| f(cube.band(b)))
            .collect();
        per_band.concat()
    }

    fn map_columns(
        &self,
        x: &DMatrix<f64>,
        out_rows: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Sync,
    ) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| f(x.column(j).as_slice()))
            .collect();
        DMatrix::from_vec(out_rows, x.ncols(), cols.concat())
    }
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Spectral operator `B` (Z_H × Z_M); each column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSelector {
    matrix: DMatrix<f64>,
    selected: Option<Vec<usize>>,
}

impl BandSelector {
    /// Pure selection of strictly increasing band indices.
    pub fn select(n_bands: usize, selected: Vec<usize>) -> Result<Self> {
        if selected.is_empty() {
            return Err(FusionError::param("band selection is empty"));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= n_bands) {
            return Err(FusionError::Index {
                what: "bands",
                index: bad,
                len: n_bands,
            });
        }
        if selected.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FusionError::param(
                "selected bands must be unique and strictly increasing",
            ));
        }
        let mut matrix = DMatrix::zeros(n_bands, selected.len());
        for (k, &i) in selected.iter().enumerate() {
            matrix[(i, k)] = 1.0;
        }
        Ok(BandSelector {
            matrix,
            selected: Some(selected),
        })
    }

    pub fn all(n_bands: usize) -> Self {
        Self::select(n_bands, (0..n_bands).collect()).expect("n_bands > 0")
    }

    /// Weighted spectral response; column `k` holds the nonnegative weights of
    /// MS band `k` and is normalized to unit sum.
    pub fn with_response(mut response: DMatrix<f64>) -> Result<Self> {
        if response.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FusionError::param(
                "response weights must be finite and nonnegative",
            ));
        }
        for mut col in response.column_iter_mut() {
            let s = col.sum();
            if s <= 0.0 {
                return Err(FusionError::param("response column sums to zero"));
            }
            col /= s;
        }
        Ok(BandSelector {
            matrix: response,
            selected: None,
        })
    }

    /// `count` indices spread evenly over the first `range` bands.
    pub fn evenly_spaced(n_bands: usize, count: usize, range: usize) -> Result<Self> {
        let range = range.min(n_bands);
        if count == 0 || count > range {
            return Err(FusionError::param(format!(
                "cannot pick {count} bands from a range of {range}"
            )));
        }
        let picks = if count == 1 {
            vec![0]
        } else {
            (0..count)
                .map(|i| ((i * (range - 1)) as f64 / (count - 1) as f64).round() as usize)
                .collect()
        };
        Self::select(n_bands, picks)
    }

    /// `count` distinct indices drawn uniformly from the first `range` bands.
    pub fn random(n_bands: usize, count: usize, range: usize, seed: u64) -> Result<Self> {
        let range = range.min(n_bands);
        if count == 0 || count > range {
            return Err(FusionError::param(format!(
                "cannot pick {count} bands from a range of {range}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, range, count).into_vec();
        picks.sort_unstable();
        log::info!("random MS bands (seed {seed}): {picks:?}");
        Self::select(n_bands, picks)
    }

    pub fn input_bands(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn output_bands(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn selected(&self) -> Option<&[usize]> {
        self.selected.as_deref()
    }

    /// Dense `Z_H × Z_M` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `X·B` for a pixels × Z_H matrix.
    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.selected {
            Some(sel) => x.select_columns(sel.iter()),
            None => x * &self.matrix,
        }
    }

    pub fn apply(&self, cube: &SpectralCube) -> Result<SpectralCube> {
        if cube.bands() != self.input_bands() {
            return Err(FusionError::shape(format!(
                "selector expects {} bands, cube has {}",
                self.input_bands(),
                cube.bands()
            )));
        }
        let out = self.apply_matrix(cube.as_matrix().matrix());
        SpectralCube::from_matrix(out.into(), cube.rows(), cube.cols())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    Poisson,
}

impl std::str::FromStr for NoiseDistribution {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseDistribution::Gaussian),
            "poisson" => Ok(NoiseDistribution::Poisson),
            other => Err(FusionError::param(format!(
                "unknown noise distribution {other:?}"
            ))),
        }
    }
}

/// Target SNR in dB, either one level for the whole cube or one per band.
/// `f64::INFINITY` means no noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrDb {
    Global(f64),
    PerBand(Vec<f64>),
}

impl SnrDb {
    pub fn noiseless() -> Self {
        SnrDb::Global(f64::INFINITY)
    }

    fn check(&self, bands: usize) -> Result<()> {
        match self {
            SnrDb::Global(v) if v.is_nan() => Err(FusionError::param("SNR is NaN")),
            SnrDb::PerBand(v) if v.len() != bands => Err(FusionError::shape(format!(
                "{} per-band SNR levels for {bands} bands",
                v.len()
            ))),
            SnrDb::PerBand(v) if v.iter().any(|x| x.is_nan()) => {
                Err(FusionError::param("SNR list contains NaN"))
            }
            _ => Ok(()),
        }
    }

    /// Per-band levels for a cube with `bands` bands.
    pub fn levels(&self, bands: usize) -> Vec<f64> {
        match self {
            SnrDb::Global(v) => vec![*v; bands],
            SnrDb::PerBand(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub distribution: NoiseDistribution,
    pub snr_db: SnrDb,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(snr_db: f64, seed: u64) -> Self {
        NoiseSpec {
            distribution: NoiseDistribution::Gaussian,
            snr_db: SnrDb::Global(snr_db),
            seed,
        }
    }

    pub fn poisson(snr_db: f64, seed: u64) -> Self {
        NoiseSpec {
            distribution: NoiseDistribution::Poisson,
            snr_db: SnrDb::Global(snr_db),
            seed,
        }
    }

    pub fn none() -> Self {
        Self::gaussian(f64::INFINITY, 0)
    }
}

fn db_to_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Noise variance per band such that signal power / variance hits the target.
///
/// A global level uses the mean square over all voxels; a per-band list uses
/// each band's own mean square. This is also how weights are derived from a
/// guessed SNR on real data.
pub fn variances_for_snr(cube: &SpectralCube, snr: &SnrDb) -> Result<Vec<f64>> {
    snr.check(cube.bands())?;
    let n = cube.n_pixels();
    Ok(match snr {
        SnrDb::Global(db) => {
            let power = mean(cube.data().iter().map(|v| v * v), cube.data().len());
            vec![power / db_to_ratio(*db); cube.bands()]
        }
        SnrDb::PerBand(dbs) => dbs
            .iter()
            .enumerate()
            .map(|(b, db)| mean(cube.band(b).iter().map(|v| v * v), n) / db_to_ratio(*db))
            .collect(),
    })
}

/// Adds noise at the requested SNR and returns the per-band noise variances
/// that were injected.
///
/// Each band draws from its own ChaCha stream keyed by `(seed, band)`, so the
/// output does not depend on how bands are scheduled across threads.
pub fn add_noise(cube: &SpectralCube, spec: &NoiseSpec) -> Result<(SpectralCube, Vec<f64>)> {
    spec.snr_db.check(cube.bands())?;
    let n = cube.n_pixels();
    let bands = cube.bands();
    let levels = spec.snr_db.levels(bands);

    let noisy_bands: Vec<(Vec<f64>, f64)> = match spec.distribution {
        NoiseDistribution::Gaussian => {
            let variances = variances_for_snr(cube, &spec.snr_db)?;
            (0..bands)
                .into_par_iter()
                .map(|b| {
                    let var = variances[b];
                    let src = cube.band(b);
                    if var == 0.0 || !var.is_finite() {
                        return (src.to_vec(), 0.0);
                    }
                    let sd = var.sqrt();
                    let mut rng = band_rng(spec.seed, b);
                    let out = src
                        .iter()
                        .map(|v| {
                            let z: f64 = rng.sample(StandardNormal);
                            v + sd * z
                        })
                        .collect();
                    (out, var)
                })
                .collect()
        }
        NoiseDistribution::Poisson => {
            if let Some(v) = cube.data().iter().find(|v| **v < 0.0) {
                return Err(FusionError::Domain(format!(
                    "poisson noise needs nonnegative intensities, found {v}"
                )));
            }
            // counts ~ Poisson(scale·s) / scale has variance s/scale, so the
            // expected SNR is scale·mean(s²)/mean(s)
            let scales: Vec<f64> = match &spec.snr_db {
                SnrDb::Global(db) => {
                    let total = cube.data().len();
                    let m1 = mean(cube.data().iter().copied(), total);
                    let m2 = mean(cube.data().iter().map(|v| v * v), total);
                    vec![poisson_scale(*db, m1, m2); bands]
                }
                SnrDb::PerBand(_) => (0..bands)
                    .map(|b| {
                        let m1 = mean(cube.band(b).iter().copied(), n);
                        let m2 = mean(cube.band(b).iter().map(|v| v * v), n);
                        poisson_scale(levels[b], m1, m2)
                    })
                    .collect(),
            };
            (0..bands)
                .into_par_iter()
                .map(|b| {
                    let scale = scales[b];
                    let src = cube.band(b);
                    if !scale.is_finite() {
                        return (src.to_vec(), 0.0);
                    }
                    let mut rng = band_rng(spec.seed, b);
                    let out = src
                        .iter()
                        .map(|v| {
                            let rate = scale * v;
                            if rate <= 0.0 {
                                0.0
                            } else {
                                let k: f64 = Poisson::new(rate)
                                    .expect("positive finite rate")
                                    .sample(&mut rng);
                                k / scale
                            }
                        })
                        .collect();
                    let var = mean(src.iter().copied(), n) / scale;
                    (out, var)
                })
                .collect()
        }
    };

    let mut data = Vec::with_capacity(cube.data().len());
    let mut variances = Vec::with_capacity(bands);
    for (band, var) in noisy_bands {
        data.extend(band);
        variances.push(var);
    }
    let mut out = SpectralCube::new(cube.rows(), cube.cols(), bands, data)?;
    if let Some(centers) = cube.band_centers() {
        out = out.with_band_centers(centers.to_vec())?;
    }
    Ok((out, variances))
}

fn poisson_scale(db: f64, mean_signal: f64, mean_square: f64) -> f64 {
    if db == f64::INFINITY || mean_square <= 0.0 {
        return f64::INFINITY;
    }
    db_to_ratio(db) * mean_signal / mean_square
}

fn band_rng(seed: u64, band: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(band as u64);
    rng
}

/// Seed for a named substream (`"noise-h"`, `"noise-m"`, `"band-pick"`).
pub fn substream_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `10·log10(mean(clean²) / mean((noisy − clean)²))`.
pub fn realized_snr_db(clean: &SpectralCube, noisy: &SpectralCube) -> f64 {
    let n = clean.data().len();
    let power = mean(clean.data().iter().map(|v| v * v), n);
    let noise = mean(
        clean
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(a, b)| (a - b) * (a - b)),
        n,
    );
    10.0 * (power / noise).log10()
}

/// A simulated observation pair with the per-band noise variances that
/// produced it.
#[derive(Debug, Clone)]
pub struct SimulatedPair {
    pub hs: SpectralCube,
    pub ms: SpectralCube,
    pub hs_variances: Vec<f64>,
    pub ms_variances: Vec<f64>,
}

pub fn simulate_pair(
    truth: &SpectralCube,
    op: &SpatialOperator,
    sel: &BandSelector,
    noise_h: &NoiseSpec,
    noise_m: &NoiseSpec,
) -> Result<SimulatedPair> {
    let clean_h = op.apply(truth)?;
    let clean_m = sel.apply(truth)?;
    let (hs, hs_variances) = add_noise(&clean_h, noise_h)?;
    let (ms, ms_variances) = add_noise(&clean_m, noise_m)?;
    Ok(SimulatedPair {
        hs,
        ms,
        hs_variances,
        ms_variances,
    })
}

/// Nearest-neighbor upsampling of every band by `factor`; the naive baseline
/// fused images are compared against.
pub fn upsample_nearest(cube: &SpectralCube, factor: usize) -> Result<SpectralCube> {
    if factor == 0 {
        return Err(FusionError::param("upsampling factor must be at least 1"));
    }
    SpectralCube::from_fn(
        cube.rows() * factor,
        cube.cols() * factor,
        cube.bands(),
        |r, c, b| cube.get(r / factor, c / factor, b),
    )
}

/// A seeded `rank`-component linear-mixing scene: smooth positive endmember
/// spectra weighted by abundance maps that sum to one per pixel. Abundances
/// mix low-frequency waves with sharp-edged blobs, so the scene has both
/// large regions and detail lost by blurring.
pub fn synthetic_scene(
    rows: usize,
    cols: usize,
    bands: usize,
    rank: usize,
    seed: u64,
) -> Result<SpectralCube> {
    if rows == 0 || cols == 0 || bands == 0 || rank == 0 || rank > bands {
        return Err(FusionError::param(format!(
            "invalid synthetic scene {rows}x{cols}x{bands} of rank {rank}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let endmembers: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.08..0.35),
                        rng.random_range(0.2..0.7),
                    )
                })
                .collect();
            let base = rng.random_range(0.1..0.3);
            (0..bands)
                .map(|b| {
                    let x = if bands == 1 {
                        0.0
                    } else {
                        b as f64 / (bands - 1) as f64
                    };
                    base + bumps
                        .iter()
                        .map(|(c, w, a)| a * (-(x - c) * (x - c) / (2.0 * w * w)).exp())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();

    struct Blob {
        r: f64,
        c: f64,
        radius: f64,
        k: usize,
    }
    let blobs: Vec<Blob> = (0..(rows * cols / 64).clamp(4, 400))
        .map(|_| Blob {
            r: rng.random_range(0.0..rows as f64),
            c: rng.random_range(0.0..cols as f64),
            radius: rng.random_range(1.5..(rows.min(cols) as f64 / 6.0).max(2.0)),
            k: rng.random_range(0..rank),
        })
        .collect();
    let waves: Vec<[f64; 4]> = (0..rank)
        .map(|_| {
            [
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();

    let mut abundance = vec![0.0; rows * cols * rank];
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 / rows as f64, c as f64 / cols as f64);
            let mut logits: Vec<f64> = waves
                .iter()
                .map(|[fy, fx, py, px]| {
                    (std::f64::consts::TAU * fy * y + py).sin()
                        + (std::f64::consts::TAU * fx * x + px).cos()
                })
                .collect();
            for blob in &blobs {
                let d2 = (r as f64 - blob.r).powi(2) + (c as f64 - blob.c).powi(2);
                if d2 <= blob.radius * blob.radius {
                    logits[blob.k] += 3.0;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for k in 0..rank {
                abundance[(r * cols + c) * rank + k] = (logits[k] - max).exp() / total;
            }
        }
    }
    SpectralCube::from_fn(rows, cols, bands, |r, c, b| {
        let a = &abundance[(r * cols + c) * rank..(r * cols + c + 1) * rank];
        a.iter().zip(&endmembers).map(|(w, e)| w * e[b]).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_cube(rows: usize, cols: usize, bands: usize, seed: u64) -> SpectralCube {
        SpectralCube::new(rows, cols, bands, random_image(rows * cols * bands, seed)).unwrap()
    }

    /// Materializes `L` column by column from unit impulses.
    fn dense_operator(op: &SpatialOperator) -> DMatrix<f64> {
        let n = op.input_pixels();
        let mut m = DMatrix::zeros(op.output_pixels(), n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (i, v) in op.apply_image_direct(&e).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn gaussian_kernel_shapes() {
        assert_eq!(Kernel::gaussian(1, 0.3).unwrap().taps(), &[1.0]);
        let flat = Kernel::gaussian(3, f64::INFINITY).unwrap();
        assert!(flat.taps().iter().all(|t| (t - 1.0 / 9.0).abs() < 1e-15));
        let wide = Kernel::gaussian(3, 1e9).unwrap();
        assert!(wide.taps().iter().all(|t| (t - 1.0 / 9.0).abs() < 1e-12));
        assert!(Kernel::gaussian(4, 1.0).is_err());
        assert!(Kernel::gaussian(3, 0.0).is_err());
    }

    #[test]
    fn gaussian_kernel_matches_closed_form() {
        let size = 39;
        let sigma = 39.0 / 6.0;
        let k = Kernel::gaussian(size, sigma).unwrap();
        let mut z = 0.0;
        for a in 0..size {
            for b in 0..size {
                let (y, x) = (a as f64 - 19.0, b as f64 - 19.0);
                z += (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            }
        }
        for a in 0..size {
            for b in 0..size {
                let (y, x) = (a as f64 - 19.0, b as f64 - 19.0);
                let expect = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp() / z;
                assert!((k.tap(a, b) - expect).abs() < 1e-12);
            }
        }
        assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let peak = k.taps().iter().copied().fold(0.0, f64::max);
        assert_eq!(k.tap(19, 19), peak);
        assert_eq!(k.tap(3, 10), k.tap(10, 3));
    }

    #[test]
    fn identity_operator_is_identity() {
        let op = SpatialOperator::identity(5, 7).unwrap();
        let cube = random_cube(5, 7, 3, 1);
        let out = op.apply(&cube).unwrap();
        for (a, b) in out.data().iter().zip(cube.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = op.apply_adjoint(&cube).unwrap();
        for (a, b) in back.data().iter().zip(cube.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_is_preserved() {
        let op = SpatialOperator::new(Kernel::gaussian(5, 1.3).unwrap(), 3, 9, 12).unwrap();
        let cube = SpectralCube::from_fn(9, 12, 2, |_, _, _| 4.25).unwrap();
        let out = op.apply(&cube).unwrap();
        assert_eq!((out.rows(), out.cols()), (3, 4));
        assert!(out.data().iter().all(|v| (v - 4.25).abs() < 1e-12));
    }

    #[test]
    fn fft_path_matches_dense_operator() {
        let op = SpatialOperator::new(Kernel::gaussian(3, 0.8).unwrap(), 2, 8, 8).unwrap();
        let dense = dense_operator(&op);
        let x = random_image(64, 3);
        let expect = &dense * nalgebra::DVector::from_vec(x.clone());
        let got = op.apply_image(&x);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_dot_product() {
        let op = SpatialOperator::new(Kernel::gaussian(3, 0.9).unwrap(), 2, 8, 8).unwrap();
        let x = random_image(64, 5);
        let y = random_image(16, 6);
        let lhs = dot(&op.apply_image(&x), &y);
        let rhs = dot(&x, &op.adjoint_image(&y));
        assert!((lhs - rhs).abs() < 1e-10);

        // (Lᵀ)ᵀ = L: the dense adjoint transposed reproduces L
        let n = 64;
        let mut adj = DMatrix::zeros(n, 16);
        for j in 0..16 {
            let mut e = vec![0.0; 16];
            e[j] = 1.0;
            for (i, v) in op.adjoint_image(&e).into_iter().enumerate() {
                adj[(i, j)] = v;
            }
        }
        let lt_t = adj.transpose();
        let got = &lt_t * nalgebra::DVector::from_vec(x.clone());
        for (a, b) in got.iter().zip(op.apply_image(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn large_kernel_wraps_on_small_image() {
        let op = SpatialOperator::new(Kernel::gaussian(9, 2.0).unwrap(), 2, 6, 4).unwrap();
        let x = random_image(24, 9);
        let fast = op.apply_image(&x);
        let slow = op.apply_image_direct(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_solve_matches_dense() {
        let op = SpatialOperator::new(Kernel::gaussian(3, 0.7).unwrap(), 2, 8, 6).unwrap();
        let dense = dense_operator(&op);
        let (alpha, beta) = (1.7, 2.0);
        let system = &dense.transpose() * &dense * alpha + DMatrix::<f64>::identity(48, 48) * beta;
        let b = random_image(48, 11);
        let expect = system
            .lu()
            .solve(&nalgebra::DVector::from_vec(b.clone()))
            .unwrap();
        let got = op.solve_shifted(alpha, beta, &b);
        for (a, e) in got.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_indivisible_dims() {
        assert!(SpatialOperator::new(Kernel::identity(), 4, 10, 8).is_err());
        let op = SpatialOperator::new(Kernel::identity(), 2, 4, 4).unwrap();
        assert!(op.apply(&random_cube(4, 6, 1, 0)).is_err());
        assert!(op.apply_adjoint(&random_cube(4, 4, 1, 0)).is_err());
    }

    #[test]
    fn band_selection() {
        let cube = random_cube(3, 3, 93, 12);
        let same = BandSelector::all(93).apply(&cube).unwrap();
        assert_eq!(same, cube);

        let sel = BandSelector::select(93, vec![0, 30, 60, 90]).unwrap();
        let ms = sel.apply(&cube).unwrap();
        assert_eq!(ms.bands(), 4);
        for (k, &b) in [0, 30, 60, 90].iter().enumerate() {
            assert_eq!(ms.band(k), cube.band(b));
        }
        for col in sel.matrix().column_iter() {
            assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 1);
            assert_eq!(col.sum(), 1.0);
        }

        assert!(BandSelector::select(5, vec![1, 5]).is_err());
        assert!(BandSelector::select(5, vec![2, 2]).is_err());
    }

    #[test]
    fn selector_matches_dense_matrix() {
        let cube = random_cube(4, 3, 10, 13);
        let sel = BandSelector::random(10, 4, 10, 77).unwrap();
        let dense = cube.as_matrix().matrix() * sel.matrix();
        let got = sel.apply(&cube).unwrap().into_matrix();
        assert_eq!(got.matrix(), &dense);

        let weights = DMatrix::from_fn(10, 3, |i, k| ((i + k) % 4) as f64);
        let weighted = BandSelector::with_response(weights).unwrap();
        let dense = cube.as_matrix().matrix() * weighted.matrix();
        let got = weighted.apply(&cube).unwrap().into_matrix();
        assert!((got.matrix() - dense).amax() < 1e-14);
        for col in weighted.matrix().column_iter() {
            assert!((col.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn evenly_spaced_picks() {
        let sel = BandSelector::evenly_spaced(93, 4, 70).unwrap();
        assert_eq!(sel.selected().unwrap(), &[0, 23, 46, 69]);
        assert!(BandSelector::evenly_spaced(3, 4, 70).is_err());
    }

    #[test]
    fn infinite_snr_is_noiseless() {
        let cube = random_cube(4, 4, 3, 14);
        let (out, vars) = add_noise(&cube, &NoiseSpec::gaussian(f64::INFINITY, 1)).unwrap();
        assert_eq!(out, cube);
        assert_eq!(vars, vec![0.0; 3]);
        let pos = SpectralCube::from_fn(4, 4, 3, |r, c, b| (r + c + b) as f64).unwrap();
        let (out, vars) = add_noise(&pos, &NoiseSpec::poisson(f64::INFINITY, 1)).unwrap();
        assert_eq!(out, pos);
        assert_eq!(vars, vec![0.0; 3]);
    }

    #[test]
    fn gaussian_noise_hits_target_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // unit mean power
        let cube = SpectralCube::from_fn(
            64,
            64,
            8,
            |_, _, _| {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            },
        )
        .unwrap();
        let (noisy, vars) = add_noise(&cube, &NoiseSpec::gaussian(10.0, 3)).unwrap();
        let snr = realized_snr_db(&cube, &noisy);
        assert!((9.8..=10.2).contains(&snr), "realized {snr}");
        assert!(vars.iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn poisson_noise_hits_target_snr() {
        let cube = SpectralCube::from_fn(64, 64, 4, |r, c, b| {
            0.2 + ((r * 7 + c * 3 + b) % 13) as f64 / 13.0
        })
        .unwrap();
        let (noisy, vars) = add_noise(&cube, &NoiseSpec::poisson(10.0, 4)).unwrap();
        let snr = realized_snr_db(&cube, &noisy);
        assert!((9.8..=10.2).contains(&snr), "realized {snr}");
        let power: f64 = cube.data().iter().map(|v| v * v).sum::<f64>() / cube.data().len() as f64;
        let mean_var = vars.iter().sum::<f64>() / vars.len() as f64;
        assert!((10.0 * (power / mean_var).log10() - 10.0).abs() < 1e-9);
        assert!(noisy.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn poisson_rejects_negative_values() {
        let cube = SpectralCube::new(1, 2, 1, vec![1.0, -0.5]).unwrap();
        assert!(matches!(
            add_noise(&cube, &NoiseSpec::poisson(10.0, 0)),
            Err(FusionError::Domain(_))
        ));
    }

    #[test]
    fn noise_is_deterministic() {
        let cube = random_cube(8, 8, 4, 15);
        let a = add_noise(&cube, &NoiseSpec::gaussian(5.0, 99)).unwrap();
        let b = add_noise(&cube, &NoiseSpec::gaussian(5.0, 99)).unwrap();
        assert_eq!(a.0, b.0);
        let c = add_noise(&cube, &NoiseSpec::gaussian(5.0, 100)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn per_band_snr_levels() {
        let cube =
            SpectralCube::from_fn(32, 32, 2, |_, _, b| if b == 0 { 1.0 } else { 3.0 }).unwrap();
        let spec = NoiseSpec {
            distribution: NoiseDistribution::Gaussian,
            snr_db: SnrDb::PerBand(vec![10.0, 20.0]),
            seed: 1,
        };
        let (_, vars) = add_noise(&cube, &spec).unwrap();
        assert!((vars[0] - 0.1).abs() < 1e-12);
        assert!((vars[1] - 0.09).abs() < 1e-12);
    }

    #[test]
    fn trivial_pair_is_truth() {
        let truth = random_cube(4, 6, 5, 16);
        let op = SpatialOperator::identity(4, 6).unwrap();
        let pair = simulate_pair(
            &truth,
            &op,
            &BandSelector::all(5),
            &NoiseSpec::none(),
            &NoiseSpec::none(),
        )
        .unwrap();
        assert_eq!(pair.ms, truth);
        for (a, b) in pair.hs.data().iter().zip(truth.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn simulated_hs_matches_dense_pipeline() {
        let truth = random_cube(16, 16, 8, 17);
        let op = SpatialOperator::new(Kernel::gaussian(3, 1.0).unwrap(), 2, 16, 16).unwrap();
        let sel = BandSelector::select(8, vec![1, 4, 6]).unwrap();
        let pair =
            simulate_pair(&truth, &op, &sel, &NoiseSpec::none(), &NoiseSpec::none()).unwrap();
        let dense_l = dense_operator(&op);
        let s = truth.as_matrix();
        let expect_h = &dense_l * s.matrix();
        let expect_m = s.matrix() * sel.matrix();
        assert!((pair.hs.as_matrix().matrix() - expect_h).amax() < 1e-12);
        assert!((pair.ms.as_matrix().matrix() - expect_m).amax() < 1e-12);
        assert_eq!((pair.hs.rows(), pair.hs.cols(), pair.hs.bands()), (8, 8, 8));
        assert_eq!(
            (pair.ms.rows(), pair.ms.cols(), pair.ms.bands()),
            (16, 16, 3)
        );
    }

    #[test]
    fn substreams_differ_by_label() {
        let a = substream_seed(7, "noise-h");
        assert_eq!(a, substream_seed(7, "noise-h"));
        assert_ne!(a, substream_seed(7, "noise-m"));
        assert_ne!(a, substream_seed(8, "noise-h"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn operator_is_linear_and_adjoint(
            half_rows in 4usize..=16,
            half_cols in 4usize..=16,
            ksize in prop::sample::select(vec![1usize, 3, 5, 7]),
            seed: u64,
        ) {
            let (rows, cols) = (2 * half_rows, 2 * half_cols);
            let op = SpatialOperator::new(Kernel::gaussian(ksize, 1.1).unwrap(), 2, rows, cols).unwrap();
            let x = random_image(rows * cols, seed);
            let z = random_image(rows * cols, seed ^ 1);
            let y = random_image(half_rows * half_cols, seed ^ 2);
            let (alpha, beta) = (0.3, -1.7);
            let combo: Vec<f64> = x.iter().zip(&z).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = op.apply_image(&combo);
            let (lx, lz) = (op.apply_image(&x), op.apply_image(&z));
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * lx[i] + beta * lz[i])).abs() < 1e-10);
            }
            let inner = (dot(&lx, &y) - dot(&x, &op.adjoint_image(&y))).abs();
            prop_assert!(inner < 1e-10);
            let direct = op.apply_image_direct(&x);
            for (a, b) in lx.iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nearest_upsampling_repeats_pixels() {
        let small =
            SpectralCube::from_fn(2, 3, 2, |r, c, b| (r * 10 + c + 100 * b) as f64).unwrap();
        let up = upsample_nearest(&small, 2).unwrap();
        assert_eq!((up.rows(), up.cols(), up.bands()), (4, 6, 2));
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(up.get(r, c, 1), small.get(r / 2, c / 2, 1));
            }
        }
        assert!(upsample_nearest(&small, 0).is_err());
    }

    #[test]
    fn synthetic_scene_is_positive_low_rank_and_seeded() {
        let a = synthetic_scene(32, 24, 12, 3, 5).unwrap();
        let b = synthetic_scene(32, 24, 12, 3, 5).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), synthetic_scene(32, 24, 12, 3, 6).unwrap().data());
        assert!(a.data().iter().all(|v| *v > 0.0));
        let sv = a.as_matrix().into_inner().svd(false, false).singular_values;
        assert!(sv[3] < 1e-10 * sv[0], "rank above 3: {sv}");
        assert!(sv[2] > 1e-3 * sv[0]);
        assert!(synthetic_scene(4, 4, 2, 3, 0).is_err());
    }
}

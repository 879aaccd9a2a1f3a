//! Full-reference fusion quality metrics.
//!
//! All functions take `(reference, candidate)` cubes of equal shape. PSNR uses
//! the reference maximum as its peak; SAM is in degrees; UIQI defaults to the
//! 8×8 sliding-window estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{BandImage, SpectralCube};
use crate::error::{FusionError, Result};

pub const DEFAULT_UIQI_WINDOW: usize = 8;

fn check_same(reference: &SpectralCube, candidate: &SpectralCube) -> Result<()> {
    let a = (reference.rows(), reference.cols(), reference.bands());
    let b = (candidate.rows(), candidate.cols(), candidate.bands());
    if a != b {
        return Err(FusionError::shape(format!(
            "reference is {}x{}x{} but candidate is {}x{}x{}",
            a.0, a.1, a.2, b.0, b.1, b.2
        )));
    }
    Ok(())
}

fn sum_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared error over all voxels.
pub fn mse(reference: &SpectralCube, candidate: &SpectralCube) -> Result<f64> {
    check_same(reference, candidate)?;
    Ok(sum_sq_diff(reference.data(), candidate.data()) / reference.data().len() as f64)
}

/// `10·log10(max(S)² / MSE)`; `+∞` for identical cubes.
pub fn psnr(reference: &SpectralCube, candidate: &SpectralCube) -> Result<f64> {
    let e = mse(reference, candidate)?;
    Ok(psnr_from(reference.max_value(), e))
}

fn psnr_from(peak: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// The normalized squared Frobenius norm `‖F − S‖²_F/(N·Z)`, i.e. the MSE.
pub fn rmse_paper(reference: &SpectralCube, candidate: &SpectralCube) -> Result<f64> {
    mse(reference, candidate)
}

/// Root mean squared error.
pub fn rmse(reference: &SpectralCube, candidate: &SpectralCube) -> Result<f64> {
    Ok(mse(reference, candidate)?.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamResult {
    /// Mean angle over valid pixels, degrees.
    pub mean_deg: f64,
    /// Per-pixel angle in degrees; excluded pixels hold 0.
    pub map: BandImage,
    /// Pixels where either spectrum has zero norm.
    pub excluded: usize,
}

/// Spectral angle per pixel. Pixels with a zero spectrum in either cube are
/// skipped and counted; if every pixel is skipped the mean is 0.
pub fn sam(reference: &SpectralCube, candidate: &SpectralCube) -> Result<SamResult> {
    check_same(reference, candidate)?;
    let (rows, cols, bands) = (reference.rows(), reference.cols(), reference.bands());
    let np = rows * cols;
    let (rd, cd) = (reference.data(), candidate.data());
    let angles: Vec<Option<f64>> = (0..np)
        .into_par_iter()
        .map(|p| {
            let (mut nr, mut nc) = (0.0f64, 0.0f64);
            for b in 0..bands {
                nr += rd[b * np + p] * rd[b * np + p];
                nc += cd[b * np + p] * cd[b * np + p];
            }
            if nr == 0.0 || nc == 0.0 {
                return None;
            }
            // 2·atan2(‖u − v‖, ‖u + v‖) on unit vectors: exact at 0°, unlike acos
            let (nr, nc) = (nr.sqrt(), nc.sqrt());
            let (mut diff, mut sum) = (0.0, 0.0);
            for b in 0..bands {
                let (u, v) = (rd[b * np + p] / nr, cd[b * np + p] / nc);
                diff += (u - v) * (u - v);
                sum += (u + v) * (u + v);
            }
            Some((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
        })
        .collect();
    let excluded = angles.iter().filter(|a| a.is_none()).count();
    let valid = np - excluded;
    let total: f64 = angles.iter().flatten().sum();
    Ok(SamResult {
        mean_deg: if valid == 0 {
            0.0
        } else {
            total / valid as f64
        },
        map: BandImage {
            rows,
            cols,
            data: angles.into_iter().map(|a| a.unwrap_or(0.0)).collect(),
        },
        excluded,
    })
}

/// `4·σ_sf·μ_s·μ_f / ((σ_s² + σ_f²)(μ_s² + μ_f²))` from window moments, or
/// `None` when the denominator vanishes.
fn quality_index(n: f64, sx: f64, sy: f64, sxx: f64, syy: f64, sxy: f64) -> Option<f64> {
    let mx = sx / n;
    let my = sy / n;
    let vx = (sxx / n - mx * mx).max(0.0);
    let vy = (syy / n - my * my).max(0.0);
    let cxy = sxy / n - mx * my;
    let den = (vx + vy) * (mx * mx + my * my);
    if den == 0.0 || !den.is_finite() {
        None
    } else {
        Some((4.0 * cxy * mx * my / den).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UiqiResult {
    /// Mean over bands that had at least one valid window.
    pub mean: f64,
    /// Per band; `None` where no window was valid.
    pub per_band: Vec<Option<f64>>,
    pub skipped_windows: usize,
}

/// Sliding-window sums of side `w` (stride 1, windows fully inside).
fn box_sums(img: &[f64], rows: usize, cols: usize, w: usize) -> Vec<f64> {
    let oc = cols - w + 1;
    let or = rows - w + 1;
    let mut horiz = vec![0.0; rows * oc];
    for r in 0..rows {
        let row = &img[r * cols..(r + 1) * cols];
        for c in 0..oc {
            horiz[r * oc + c] = row[c..c + w].iter().sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (r..r + w).map(|k| horiz[k * oc + c]).sum();
        }
    }
    out
}

/// Universal image quality index over `window`×`window` sliding windows,
/// averaged per band and then over bands. A window larger than the image is
/// shrunk to the image. Windows with a zero denominator (flat and dark) are
/// skipped and counted; if none is valid anywhere the result is 1 for
/// identical cubes and 0 otherwise.
pub fn uiqi(
    reference: &SpectralCube,
    candidate: &SpectralCube,
    window: usize,
) -> Result<UiqiResult> {
    check_same(reference, candidate)?;
    if window == 0 {
        return Err(FusionError::param("UIQI window must be at least 1"));
    }
    let (rows, cols) = (reference.rows(), reference.cols());
    let w = window.min(rows).min(cols);
    let n = (w * w) as f64;
    let per: Vec<(Option<f64>, usize)> = (0..reference.bands())
        .into_par_iter()
        .map(|b| {
            let x = reference.band(b);
            let y = candidate.band(b);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
            let sums = [x, y, &xx[..], &yy[..], &xy[..]].map(|img| box_sums(img, rows, cols, w));
            let (mut total, mut count, mut skipped) = (0.0, 0usize, 0usize);
            for i in 0..sums[0].len() {
                match quality_index(
                    n, sums[0][i], sums[1][i], sums[2][i], sums[3][i], sums[4][i],
                ) {
                    Some(q) => {
                        total += q;
                        count += 1;
                    }
                    None => skipped += 1,
                }
            }
            ((count > 0).then(|| total / count as f64), skipped)
        })
        .collect();
    let skipped_windows = per.iter().map(|p| p.1).sum();
    let per_band: Vec<Option<f64>> = per.into_iter().map(|p| p.0).collect();
    let valid: Vec<f64> = per_band.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        fallback(reference, candidate)
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(UiqiResult {
        mean,
        per_band,
        skipped_windows,
    })
}

fn fallback(reference: &SpectralCube, candidate: &SpectralCube) -> f64 {
    if reference.data() == candidate.data() {
        1.0
    } else {
        0.0
    }
}

/// UIQI with each band treated as a single window.
pub fn uiqi_global(reference: &SpectralCube, candidate: &SpectralCube) -> Result<f64> {
    check_same(reference, candidate)?;
    let n = reference.n_pixels() as f64;
    let vals: Vec<f64> = (0..reference.bands())
        .filter_map(|b| {
            let x = reference.band(b);
            let y = candidate.band(b);
            let sx = x.iter().sum::<f64>();
            let sy = y.iter().sum::<f64>();
            let mx = sx / n;
            let my = sy / n;
            // centered moments for accuracy on large images
            let vx = x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
            let vy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
            let cxy = x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - mx) * (b - my))
                .sum::<f64>()
                / n;
            let den = (vx + vy) * (mx * mx + my * my);
            (den != 0.0).then(|| (4.0 * cxy * mx * my / den).clamp(-1.0, 1.0))
        })
        .collect();
    Ok(if vals.is_empty() {
        fallback(reference, candidate)
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgasResult {
    pub value: f64,
    /// Bands left out because their mean is (numerically) zero.
    pub excluded_bands: Vec<usize>,
}

/// `100·ratio·sqrt(mean_b (RMSE_b/μ_b)²)` where `μ_b` is the candidate's band
/// mean and `ratio` the HS/MS pixel-count ratio. Bands with
/// `|μ_b| < 1e-9·(dynamic range)` are excluded and reported.
pub fn ergas(
    reference: &SpectralCube,
    candidate: &SpectralCube,
    ratio: f64,
) -> Result<ErgasResult> {
    check_same(reference, candidate)?;
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(FusionError::param(format!(
            "ERGAS resolution ratio must be positive, got {ratio}"
        )));
    }
    let range = {
        let (lo, hi) = reference
            .data()
            .iter()
            .chain(candidate.data())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            });
        hi - lo
    };
    let n = reference.n_pixels() as f64;
    let mut excluded_bands = Vec::new();
    let mut acc = 0.0;
    let mut used = 0usize;
    for b in 0..reference.bands() {
        let mean = candidate.band(b).iter().sum::<f64>() / n;
        let e2 = sum_sq_diff(reference.band(b), candidate.band(b)) / n;
        if mean.abs() <= 1e-9 * range {
            if e2 > 0.0 || mean == 0.0 && range > 0.0 {
                excluded_bands.push(b);
            }
            continue;
        }
        acc += e2 / (mean * mean);
        used += 1;
    }
    let value = if used == 0 {
        0.0
    } else {
        100.0 * ratio * (acc / used as f64).sqrt()
    };
    Ok(ErgasResult {
        value,
        excluded_bands,
    })
}

/// Mean absolute voxel difference.
pub fn dd(reference: &SpectralCube, candidate: &SpectralCube) -> Result<f64> {
    check_same(reference, candidate)?;
    dd_normalized(reference, candidate, reference.n_pixels())
}

/// `Σ|S − F| / (n_pixels·Z)` with an explicit pixel count, e.g. the HS pixel
/// count when comparing at MS resolution.
pub fn dd_normalized(
    reference: &SpectralCube,
    candidate: &SpectralCube,
    n_pixels: usize,
) -> Result<f64> {
    check_same(reference, candidate)?;
    if n_pixels == 0 {
        return Err(FusionError::param("DD normalization must be positive"));
    }
    let s: f64 = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / (n_pixels * reference.bands()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: usize,
    pub psnr_db: f64,
    pub rmse: f64,
    /// `None` when every window of the band was degenerate.
    pub uiqi: Option<f64>,
    /// `None` for bands excluded from ERGAS.
    pub ergas: Option<f64>,
    pub dd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub rmse: f64,
    pub rmse_paper: f64,
    pub sam_deg: f64,
    pub uiqi: f64,
    pub uiqi_global: f64,
    pub ergas: f64,
    pub dd: f64,
    pub per_band: Vec<BandMetrics>,
    pub sam_map: BandImage,
    pub excluded_pixels: usize,
    pub ergas_excluded_bands: Vec<usize>,
    pub uiqi_skipped_windows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub uiqi_window: usize,
    /// HS/MS pixel-count ratio used by ERGAS.
    pub resolution_ratio: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            uiqi_window: DEFAULT_UIQI_WINDOW,
            resolution_ratio: 1.0,
        }
    }
}

/// Every metric plus per-band curves and the SAM map. Per-band PSNR uses the
/// global reference peak.
pub fn report(
    reference: &SpectralCube,
    candidate: &SpectralCube,
    opts: &ReportOptions,
) -> Result<MetricReport> {
    check_same(reference, candidate)?;
    let e = mse(reference, candidate)?;
    let peak = reference.max_value();
    let s = sam(reference, candidate)?;
    let q = uiqi(reference, candidate, opts.uiqi_window)?;
    let g = ergas(reference, candidate, opts.resolution_ratio)?;
    let n = reference.n_pixels() as f64;
    let per_band = (0..reference.bands())
        .map(|b| {
            let (x, y) = (reference.band(b), candidate.band(b));
            let e_b = sum_sq_diff(x, y) / n;
            let mean = y.iter().sum::<f64>() / n;
            BandMetrics {
                band: b,
                psnr_db: psnr_from(peak, e_b),
                rmse: e_b.sqrt(),
                uiqi: q.per_band[b],
                ergas: (!g.excluded_bands.contains(&b) && mean != 0.0)
                    .then(|| 100.0 * opts.resolution_ratio * e_b.sqrt() / mean.abs()),
                dd: x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(MetricReport {
        psnr_db: psnr_from(peak, e),
        rmse: e.sqrt(),
        rmse_paper: e,
        sam_deg: s.mean_deg,
        uiqi: q.mean,
        uiqi_global: uiqi_global(reference, candidate)?,
        ergas: g.value,
        dd: dd(reference, candidate)?,
        per_band,
        sam_map: s.map,
        excluded_pixels: s.excluded,
        ergas_excluded_bands: g.excluded_bands,
        uiqi_skipped_windows: q.skipped_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(seed: u64, rows: usize, cols: usize, bands: usize) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectralCube::from_fn(rows, cols, bands, |_, _, _| rng.random_range(0.05..1.0)).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    // naive oracles: explicit loops over (r, c, b) through `get`

    fn naive_mse(s: &SpectralCube, f: &SpectralCube) -> f64 {
        let mut acc = 0.0;
        for r in 0..s.rows() {
            for c in 0..s.cols() {
                for b in 0..s.bands() {
                    acc += (s.get(r, c, b) - f.get(r, c, b)).powi(2);
                }
            }
        }
        acc / (s.rows() * s.cols() * s.bands()) as f64
    }

    fn naive_max(s: &SpectralCube) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for r in 0..s.rows() {
            for c in 0..s.cols() {
                for b in 0..s.bands() {
                    m = m.max(s.get(r, c, b));
                }
            }
        }
        m
    }

    fn naive_sam(s: &SpectralCube, f: &SpectralCube) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for r in 0..s.rows() {
            for c in 0..s.cols() {
                let a: Vec<f64> = (0..s.bands()).map(|b| s.get(r, c, b)).collect();
                let x: Vec<f64> = (0..s.bands()).map(|b| f.get(r, c, b)).collect();
                let dot: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum();
                let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nx: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                if na > 0.0 && nx > 0.0 {
                    total += (dot / (na * nx)).clamp(-1.0, 1.0).acos().to_degrees();
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    /// Two-pass window statistics, textbook form.
    fn naive_window_q(
        s: &SpectralCube,
        f: &SpectralCube,
        b: usize,
        r0: usize,
        c0: usize,
        w: usize,
    ) -> Option<f64> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in r0..r0 + w {
            for c in c0..c0 + w {
                xs.push(s.get(r, c, b));
                ys.push(f.get(r, c, b));
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0);
        let cxy = xs
            .iter()
            .zip(&ys)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / (n - 1.0);
        let den = (vx + vy) * (mx * mx + my * my);
        (den != 0.0).then(|| 4.0 * cxy * mx * my / den)
    }

    fn naive_uiqi(s: &SpectralCube, f: &SpectralCube, w: usize) -> f64 {
        let mut bands = Vec::new();
        for b in 0..s.bands() {
            let mut qs = Vec::new();
            for r0 in 0..=s.rows() - w {
                for c0 in 0..=s.cols() - w {
                    if let Some(q) = naive_window_q(s, f, b, r0, c0, w) {
                        qs.push(q);
                    }
                }
            }
            if !qs.is_empty() {
                bands.push(qs.iter().sum::<f64>() / qs.len() as f64);
            }
        }
        bands.iter().sum::<f64>() / bands.len() as f64
    }

    fn naive_ergas(s: &SpectralCube, f: &SpectralCube, ratio: f64) -> f64 {
        let mut acc = 0.0;
        for b in 0..s.bands() {
            let (mut e, mut m) = (0.0, 0.0);
            for r in 0..s.rows() {
                for c in 0..s.cols() {
                    e += (s.get(r, c, b) - f.get(r, c, b)).powi(2);
                    m += f.get(r, c, b);
                }
            }
            let n = (s.rows() * s.cols()) as f64;
            acc += (e / n).sqrt().powi(2) / (m / n).powi(2);
        }
        100.0 * ratio * (acc / s.bands() as f64).sqrt()
    }

    fn naive_dd(s: &SpectralCube, f: &SpectralCube) -> f64 {
        let mut acc = 0.0;
        for r in 0..s.rows() {
            for c in 0..s.cols() {
                for b in 0..s.bands() {
                    acc += (s.get(r, c, b) - f.get(r, c, b)).abs();
                }
            }
        }
        acc / (s.rows() * s.cols() * s.bands()) as f64
    }

    #[test]
    fn identity_row() {
        let s = random_cube(1, 16, 16, 4);
        let rep = report(&s, &s, &ReportOptions::default()).unwrap();
        assert_eq!(rep.psnr_db, f64::INFINITY);
        assert_eq!(rep.rmse, 0.0);
        assert_eq!(rep.sam_deg, 0.0);
        assert_eq!(rep.uiqi, 1.0);
        assert_eq!(rep.ergas, 0.0);
        assert_eq!(rep.dd, 0.0);
        assert!((rep.uiqi_global - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        // peak 1, every voxel off by 0.1 → MSE 0.01 → 20 dB
        let s =
            SpectralCube::from_fn(4, 4, 2, |r, c, _| if r + c == 0 { 1.0 } else { 0.5 }).unwrap();
        let f = SpectralCube::from_fn(4, 4, 2, |r, c, _| s.get(r, c, 0) - 0.1).unwrap();
        assert!((psnr(&s, &f).unwrap() - 20.0).abs() < 1e-10);
    }

    #[test]
    fn single_voxel_rmse() {
        let s = SpectralCube::new(1, 1, 1, vec![0.0]).unwrap();
        let f = SpectralCube::new(1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(rmse_paper(&s, &f).unwrap(), 1.0);
        assert_eq!(rmse(&s, &f).unwrap(), 1.0);
    }

    #[test]
    fn all_metrics_match_naive_oracles() {
        for seed in 0..5 {
            let s = random_cube(10 + seed, 16, 16, 4);
            let f = random_cube(100 + seed, 16, 16, 4);
            let m = naive_mse(&s, &f);
            assert!(close(mse(&s, &f).unwrap(), m, 1e-12));
            assert!(close(rmse(&s, &f).unwrap(), m.sqrt(), 1e-12));
            assert!(close(rmse_paper(&s, &f).unwrap(), m, 1e-12));
            let p = 10.0 * (naive_max(&s).powi(2) / m).log10();
            assert!(close(psnr(&s, &f).unwrap(), p, 1e-10));
            assert!(close(
                sam(&s, &f).unwrap().mean_deg,
                naive_sam(&s, &f),
                1e-10
            ));
            assert!(close(
                uiqi(&s, &f, 8).unwrap().mean,
                naive_uiqi(&s, &f, 8),
                1e-10
            ));
            assert!(close(
                ergas(&s, &f, 0.25).unwrap().value,
                naive_ergas(&s, &f, 0.25),
                1e-10
            ));
            assert!(close(dd(&s, &f).unwrap(), naive_dd(&s, &f), 1e-12));
        }
    }

    #[test]
    fn single_window_uiqi_matches_covariance_formula() {
        let s = random_cube(3, 8, 8, 2);
        let f = random_cube(4, 8, 8, 2);
        let expect = (naive_window_q(&s, &f, 0, 0, 0, 8).unwrap()
            + naive_window_q(&s, &f, 1, 0, 0, 8).unwrap())
            / 2.0;
        assert!(close(uiqi(&s, &f, 8).unwrap().mean, expect, 1e-10));
        assert!(close(uiqi_global(&s, &f).unwrap(), expect, 1e-10));
        // a window larger than the image falls back to the whole image
        assert!(close(uiqi(&s, &f, 32).unwrap().mean, expect, 1e-10));
    }

    #[test]
    fn negation_is_invisible_to_the_index() {
        // σ_sf and μ_s·μ_f both flip sign under f = −s, so every defined window
        // scores +1; anti-correlation proper needs a shared mean (next test)
        let s = SpectralCube::from_fn(8, 8, 1, |r, c, _| {
            (r as f64 - 3.5) * 0.1 + (c as f64 * 0.7).sin()
        })
        .unwrap();
        let f = SpectralCube::new(8, 8, 1, s.data().iter().map(|v| -v).collect()).unwrap();
        let res = uiqi(&s, &f, 4).unwrap();
        assert!((res.mean - 1.0).abs() < 1e-10);
        assert!((uiqi_global(&s, &f).unwrap() - 1.0).abs() < 1e-10);

        // exactly zero-mean window: luminance term is 0/0 → skipped
        let z = SpectralCube::from_fn(2, 2, 1, |r, c, _| if (r + c) % 2 == 0 { 1.0 } else { -1.0 })
            .unwrap();
        let nz = SpectralCube::new(2, 2, 1, z.data().iter().map(|v| -v).collect()).unwrap();
        let res = uiqi(&z, &nz, 2).unwrap();
        assert_eq!(res.skipped_windows, 1);
        assert_eq!(res.mean, 0.0);
    }

    #[test]
    fn anticorrelated_windows_score_minus_one() {
        // f = 2μ − s: same mean, correlation −1, equal variance → Q = −1
        let s = random_cube(5, 8, 8, 3);
        let f = SpectralCube::from_fn(8, 8, 3, |r, c, b| {
            let mu = s.band(b).iter().sum::<f64>() / 64.0;
            2.0 * mu - s.get(r, c, b)
        })
        .unwrap();
        assert!((uiqi(&s, &f, 8).unwrap().mean + 1.0).abs() < 1e-10);
    }

    #[test]
    fn flat_windows_are_skipped_not_nan() {
        let s = SpectralCube::from_fn(10, 10, 2, |r, _, b| if b == 0 { 0.0 } else { r as f64 })
            .unwrap();
        let f = s.clone();
        let res = uiqi(&s, &f, 4).unwrap();
        assert_eq!(res.per_band[0], None);
        assert_eq!(res.per_band[1], Some(1.0));
        assert_eq!(res.skipped_windows, 49);
        assert_eq!(res.mean, 1.0);
        // constant identical cubes: nothing valid, identical ⇒ 1
        let c = SpectralCube::from_fn(4, 4, 1, |_, _, _| 0.0).unwrap();
        assert_eq!(uiqi(&c, &c, 2).unwrap().mean, 1.0);
    }

    #[test]
    fn sam_special_cases() {
        let s = SpectralCube::from_fn(
            1,
            2,
            2,
            |_, c, b| if c == 0 { [1.0, 0.0][b] } else { [1.0, 2.0][b] },
        )
        .unwrap();
        let f = SpectralCube::from_fn(
            1,
            2,
            2,
            |_, c, b| if c == 0 { [0.0, 3.0][b] } else { [2.0, 4.0][b] },
        )
        .unwrap();
        let res = sam(&s, &f).unwrap();
        assert!((res.map.data[0] - 90.0).abs() < 1e-12);
        assert!(res.map.data[1].abs() < 1e-6);
        assert!((res.mean_deg - 45.0).abs() < 1e-6);

        let z = SpectralCube::from_fn(1, 2, 2, |_, c, _| if c == 0 { 0.0 } else { 1.0 }).unwrap();
        let res = sam(&z, &z).unwrap();
        assert_eq!(res.excluded, 1);
        assert_eq!(res.mean_deg, 0.0);
    }

    #[test]
    fn sam_scale_invariance() {
        let s = random_cube(6, 16, 16, 4);
        let f = random_cube(7, 16, 16, 4);
        let base = sam(&s, &f).unwrap().mean_deg;
        for (a, b) in [(2.0, 1.0), (0.3, 7.0), (1e3, 1e-3)] {
            let sa =
                SpectralCube::new(16, 16, 4, s.data().iter().map(|v| v * a).collect()).unwrap();
            let fb =
                SpectralCube::new(16, 16, 4, f.data().iter().map(|v| v * b).collect()).unwrap();
            assert!((sam(&sa, &fb).unwrap().mean_deg - base).abs() < 1e-10);
        }
    }

    #[test]
    fn dd_offset_and_normalization() {
        let s = random_cube(8, 4, 4, 3);
        let f = SpectralCube::new(4, 4, 3, s.data().iter().map(|v| v + 0.25).collect()).unwrap();
        assert!((dd(&s, &f).unwrap() - 0.25).abs() < 1e-12);
        // printed constant with a quarter of the pixels is four times larger
        assert!((dd_normalized(&s, &f, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ergas_flags_zero_mean_band() {
        let s = SpectralCube::from_fn(4, 4, 2, |r, c, b| {
            if b == 0 {
                1.0 + r as f64
            } else {
                (r + c) as f64 % 2.0 - 0.5
            }
        })
        .unwrap();
        let f = SpectralCube::from_fn(4, 4, 2, |r, c, b| {
            s.get(r, c, b)
                + if b == 0 { 0.1 } else { 0.0 }
                + if b == 1 && r == 0 {
                    0.01 * if c % 2 == 0 { 1.0 } else { -1.0 }
                } else {
                    0.0
                }
        })
        .unwrap();
        let res = ergas(&s, &f, 1.0).unwrap();
        assert_eq!(res.excluded_bands, vec![1]);
        let mean0 = f.band(0).iter().sum::<f64>() / 16.0;
        assert!((res.value - 100.0 * 0.1 / mean0).abs() < 1e-10);
        assert!(res.value.is_finite());
    }

    #[test]
    fn report_is_composition_of_metrics() {
        let s = random_cube(20, 12, 10, 5);
        let f = random_cube(21, 12, 10, 5);
        let opts = ReportOptions {
            uiqi_window: 4,
            resolution_ratio: 1.0 / 16.0,
        };
        let rep = report(&s, &f, &opts).unwrap();
        assert_eq!(rep.psnr_db, psnr(&s, &f).unwrap());
        assert_eq!(rep.rmse, rmse(&s, &f).unwrap());
        assert_eq!(rep.sam_deg, sam(&s, &f).unwrap().mean_deg);
        assert_eq!(rep.uiqi, uiqi(&s, &f, 4).unwrap().mean);
        assert_eq!(rep.ergas, ergas(&s, &f, 1.0 / 16.0).unwrap().value);
        assert_eq!(rep.dd, dd(&s, &f).unwrap());
        assert_eq!(rep.per_band.len(), 5);
        assert_eq!((rep.sam_map.rows, rep.sam_map.cols), (12, 10));

        // band MSEs average to the global MSE
        let peak = s.max_value();
        let mean_mse = rep
            .per_band
            .iter()
            .map(|b| peak * peak / 10f64.powf(b.psnr_db / 10.0))
            .sum::<f64>()
            / 5.0;
        assert!(close(mean_mse, rep.rmse_paper, 1e-12));
        let mean_sq: f64 = rep.per_band.iter().map(|b| b.rmse * b.rmse).sum::<f64>() / 5.0;
        assert!(close(mean_sq.sqrt(), rep.rmse, 1e-12));
    }

    #[test]
    fn invariant_to_pixel_permutation_for_global_metrics() {
        let s = random_cube(30, 6, 6, 3);
        let f = random_cube(31, 6, 6, 3);
        // transpose the spatial grid in both cubes
        let ts = SpectralCube::from_fn(6, 6, 3, |r, c, b| s.get(c, r, b)).unwrap();
        let tf = SpectralCube::from_fn(6, 6, 3, |r, c, b| f.get(c, r, b)).unwrap();
        assert!(close(psnr(&s, &f).unwrap(), psnr(&ts, &tf).unwrap(), 1e-12));
        assert!(close(
            sam(&s, &f).unwrap().mean_deg,
            sam(&ts, &tf).unwrap().mean_deg,
            1e-12
        ));
        assert!(close(
            ergas(&s, &f, 1.0).unwrap().value,
            ergas(&ts, &tf, 1.0).unwrap().value,
            1e-12
        ));
        assert!(close(dd(&s, &f).unwrap(), dd(&ts, &tf).unwrap(), 1e-12));
        assert!(close(
            uiqi_global(&s, &f).unwrap(),
            uiqi_global(&ts, &tf).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = random_cube(1, 4, 4, 2);
        let f = random_cube(1, 4, 4, 3);
        assert!(matches!(psnr(&s, &f), Err(FusionError::Shape(_))));
        assert!(report(&s, &f, &ReportOptions::default()).is_err());
    }
}

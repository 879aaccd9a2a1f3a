//! Report files: Table-style CSV, JSON, per-band curves and the SAM map.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use hsfuse_core::io::{write_atomic, write_cube, Dtype};
use hsfuse_core::metrics::{BandMetrics, MetricReport};
use hsfuse_core::{BandImage, SpectralCube};
use serde::Serialize;

pub const REPORT_HEADER: &str = "method,psnr_db,rmse,sam_deg,uiqi,ergas,dd,alg_time_s";

/// One scored candidate.
pub struct Row<'a> {
    pub method: String,
    pub report: &'a MetricReport,
    /// Wall-clock seconds, when known. The only nondeterministic column.
    pub alg_time_s: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(rows: &[Row]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let m = r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            m.psnr_db,
            m.rmse,
            m.sam_deg,
            m.uiqi,
            m.ergas,
            m.dd,
            opt(r.alg_time_s)
        );
    }
    out
}

pub fn per_band_csv(bands: &[BandMetrics], centers: Option<&[f64]>) -> String {
    let mut out = String::from("band,band_center,psnr_db,rmse,uiqi,ergas,dd\n");
    for b in bands {
        let center = centers.map(|c| c[b.band]);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            b.band,
            opt(center),
            b.psnr_db,
            b.rmse,
            opt(b.uiqi),
            opt(b.ergas),
            b.dd
        );
    }
    out
}

#[derive(Serialize)]
pub struct Scores {
    pub psnr_db: f64,
    pub rmse: f64,
    pub rmse_paper: f64,
    pub sam_deg: f64,
    pub uiqi: f64,
    pub uiqi_global: f64,
    pub ergas: f64,
    pub dd: f64,
}

impl From<&MetricReport> for Scores {
    fn from(m: &MetricReport) -> Self {
        Scores {
            psnr_db: m.psnr_db,
            rmse: m.rmse,
            rmse_paper: m.rmse_paper,
            sam_deg: m.sam_deg,
            uiqi: m.uiqi,
            uiqi_global: m.uiqi_global,
            ergas: m.ergas,
            dd: m.dd,
        }
    }
}

#[derive(Serialize)]
struct JsonEntry<'a> {
    method: &'a str,
    metrics: Scores,
    sam_excluded_pixels: usize,
    ergas_excluded_bands: &'a [usize],
    uiqi_skipped_windows: usize,
    per_band: &'a [BandMetrics],
}

#[derive(Serialize)]
struct JsonReport<'a> {
    reference: &'a str,
    uiqi_window: usize,
    resolution_ratio: f64,
    rows: Vec<JsonEntry<'a>>,
}

/// Everything in the CSV except timings, plus per-band values and exclusion
/// counts. Non-finite numbers (the PSNR of a perfect match) become `null`.
pub fn report_json(
    reference: &str,
    uiqi_window: usize,
    resolution_ratio: f64,
    rows: &[Row],
) -> Result<Vec<u8>> {
    let doc = JsonReport {
        reference,
        uiqi_window,
        resolution_ratio,
        rows: rows
            .iter()
            .map(|r| JsonEntry {
                method: &r.method,
                metrics: r.report.into(),
                sam_excluded_pixels: r.report.excluded_pixels,
                ergas_excluded_bands: &r.report.ergas_excluded_bands,
                uiqi_skipped_windows: r.report.uiqi_skipped_windows,
                per_band: &r.report.per_band,
            })
            .collect(),
    };
    pretty(&doc)
}

pub fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Five-stop dark-to-bright ramp (black, indigo, crimson, orange, pale yellow).
const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [87.0, 16.0, 110.0],
    [188.0, 55.0, 84.0],
    [249.0, 142.0, 9.0],
    [252.0, 255.0, 164.0],
];

fn color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|k| (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8)
}

/// 8-bit RGB heatmap scaled from 0 to `max`.
pub fn heatmap_png(map: &BandImage, max: f64) -> Result<Vec<u8>> {
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let img = image::RgbImage::from_fn(map.cols as u32, map.rows as u32, |x, y| {
        let v = map.get(y as usize, x as usize);
        image::Rgb(color(if v.is_finite() { v * scale } else { 0.0 }))
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes `sam_map.cube` (one band, degrees) and `sam_map.png`; returns the
/// heatmap's full-scale value.
pub fn write_sam_map(
    dir: &Path,
    map: &BandImage,
    dtype: Dtype,
    provenance: serde_json::Value,
) -> Result<f64> {
    let cube = SpectralCube::new(map.rows, map.cols, 1, map.data.clone())?;
    write_cube(&dir.join("sam_map.cube"), &cube, dtype, provenance)?;
    let max = map
        .data
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    write_atomic(&dir.join("sam_map.png"), &heatmap_png(map, max)?)?;
    Ok(max)
}

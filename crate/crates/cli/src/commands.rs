use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use hsfuse_core::degrade::{
    simulate_pair, substream_seed, synthetic_scene, upsample_nearest, variances_for_snr,
    BandSelector, Kernel, NoiseDistribution, NoiseSpec, SpatialOperator,
};
use hsfuse_core::io::{read_cube, read_envi, write_atomic, write_cube, Dtype};
use hsfuse_core::metrics::{report, MetricReport, ReportOptions};
use hsfuse_core::solver::{fuse, FusionResult, Timing, WeightLevels};
use hsfuse_core::SpectralCube;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{snr_of, ScenarioConfig, SyntheticScene, DEFAULT_HS_SNR_DB, DEFAULT_MS_SNR_DB};
use crate::output::{self, pretty, Row, Scores};
use crate::CliError;

/// What `simulate` injected; `fuse` reads the geometry and weights back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lambdas {
    pub seed: u64,
    pub noise: NoiseDistribution,
    #[serde(default, skip_deserializing)]
    pub hs_snr_db: Vec<f64>,
    #[serde(default, skip_deserializing)]
    pub ms_snr_db: Vec<f64>,
    pub hs_variances: Vec<f64>,
    pub ms_variances: Vec<f64>,
    pub ms_bands: Vec<usize>,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    pub downsample: usize,
}

impl Lambdas {
    fn operator(&self, rows: usize, cols: usize) -> Result<SpatialOperator> {
        Ok(SpatialOperator::new(
            Kernel::gaussian(self.kernel_size, self.kernel_sigma)?,
            self.downsample,
            rows,
            cols,
        )?)
    }
}

fn provenance(stage: &str, config: &ScenarioConfig) -> Value {
    json!({
        "tool": "hsfuse",
        "version": env!("CARGO_PKG_VERSION"),
        "stage": stage,
        "config": config,
    })
}

fn invalid(errs: Vec<String>) -> Result<()> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(errs).into())
    }
}

pub fn load_cube(path: &Path) -> Result<SpectralCube> {
    let cube = if path.extension().is_some_and(|e| e == "hdr") {
        read_envi(path)
    } else {
        read_cube(path).map(|(c, _)| c)
    };
    cube.with_context(|| format!("loading {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// The truth cube from a file or the configured synthetic scene.
pub fn load_truth(truth: Option<&Path>, config: &ScenarioConfig) -> Result<SpectralCube> {
    match (truth, &config.synthetic) {
        (Some(p), _) => load_cube(p),
        (
            None,
            Some(SyntheticScene {
                rows,
                cols,
                bands,
                rank,
            }),
        ) => {
            // a malformed scene has no dims to check against
            if rows * cols * bands * rank == 0 || rank > bands {
                invalid(config.validate())?;
            }
            Ok(synthetic_scene(
                *rows,
                *cols,
                *bands,
                *rank,
                substream_seed(config.seed, "scene"),
            )?)
        }
        (None, None) => Err(CliError::Validation(vec![
            "no truth: pass --truth <file> or --synthetic RxCxB[:rank]".into(),
        ])
        .into()),
    }
}

pub struct Simulated {
    pub hs: SpectralCube,
    pub ms: SpectralCube,
    pub lambdas: Lambdas,
}

pub fn simulate_in_memory(truth: &SpectralCube, config: &ScenarioConfig) -> Result<Simulated> {
    let mut errs = config.validate();
    errs.extend(config.validate_for(truth.rows(), truth.cols(), truth.bands()));
    invalid(errs)?;
    let op = config.operator(truth.rows(), truth.cols())?;
    let sel = config.selector(truth.bands())?;
    let hs_levels = config
        .hs_snr_db
        .clone()
        .unwrap_or(WeightLevels::Scalar(DEFAULT_HS_SNR_DB));
    let ms_levels = config
        .ms_snr_db
        .clone()
        .unwrap_or(WeightLevels::Scalar(DEFAULT_MS_SNR_DB));
    let spec = |levels: &WeightLevels, bands: usize, label: &str| -> Result<NoiseSpec> {
        Ok(NoiseSpec {
            distribution: config.noise,
            snr_db: snr_of(levels, bands)?,
            seed: substream_seed(config.seed, label),
        })
    };
    let n_ms = sel.output_bands();
    let pair = simulate_pair(
        truth,
        &op,
        &sel,
        &spec(&hs_levels, truth.bands(), "noise-h")?,
        &spec(&ms_levels, n_ms, "noise-m")?,
    )?;
    let lambdas = Lambdas {
        seed: config.seed,
        noise: config.noise,
        hs_snr_db: hs_levels.levels(truth.bands()).unwrap_or_default(),
        ms_snr_db: ms_levels.levels(n_ms).unwrap_or_default(),
        hs_variances: pair.hs_variances,
        ms_variances: pair.ms_variances,
        ms_bands: sel.selected().map(<[usize]>::to_vec).unwrap_or_default(),
        kernel_size: config.kernel_size,
        kernel_sigma: config.sigma(),
        downsample: config.downsample,
    };
    Ok(Simulated {
        hs: pair.hs,
        ms: pair.ms,
        lambdas,
    })
}

pub fn write_simulated(dir: &Path, sim: &Simulated, config: &ScenarioConfig) -> Result<()> {
    ensure_dir(dir)?;
    let prov = provenance("simulate", config);
    write_cube(&dir.join("H.cube"), &sim.hs, config.dtype, prov.clone())?;
    write_cube(&dir.join("M.cube"), &sim.ms, config.dtype, prov)?;
    write_atomic(&dir.join("lambdas.json"), &pretty(&sim.lambdas)?)?;
    Ok(())
}

pub fn simulate(truth_path: Option<&Path>, config: &ScenarioConfig, out: &Path) -> Result<()> {
    let truth = load_truth(truth_path, config)?;
    let sim = simulate_in_memory(&truth, config)?;
    if truth_path.is_none() {
        ensure_dir(out)?;
        write_cube(
            &out.join("truth.cube"),
            &truth,
            config.dtype,
            provenance("scene", config),
        )?;
    }
    write_simulated(out, &sim, config)?;
    log::info!(
        "wrote H {}x{}x{} and M {}x{}x{} to {}",
        sim.hs.rows(),
        sim.hs.cols(),
        sim.hs.bands(),
        sim.ms.rows(),
        sim.ms.cols(),
        sim.ms.bands(),
        out.display()
    );
    Ok(())
}

/// Noise variances, operator and selector for a fusion run, from the
/// simulator's record when available and from the config otherwise.
fn fusion_setup(
    hs: &SpectralCube,
    ms: &SpectralCube,
    lambdas: Option<&Lambdas>,
    config: &ScenarioConfig,
) -> Result<(SpatialOperator, BandSelector, Vec<f64>, Vec<f64>)> {
    let mut errs = config.validate();
    if ms.rows() % hs.rows() != 0
        || ms.cols() % hs.cols() != 0
        || ms.rows() / hs.rows() != ms.cols() / hs.cols()
    {
        errs.push(format!(
            "MS {}x{} is not an integer multiple of HS {}x{}",
            ms.rows(),
            ms.cols(),
            hs.rows(),
            hs.cols()
        ));
        return Err(CliError::Validation(errs).into());
    }
    let ratio = ms.rows() / hs.rows();
    let setup = match lambdas {
        Some(l) => {
            if config.solver.subspace_dim > hs.bands() {
                errs.push(format!(
                    "solver.subspace_dim {} exceeds the {} HS bands",
                    config.solver.subspace_dim,
                    hs.bands()
                ));
            }
            if l.downsample != ratio {
                errs.push(format!(
                    "lambdas downsample {} but MS/HS size ratio is {ratio}",
                    l.downsample
                ));
            }
            if l.hs_variances.len() != hs.bands() {
                errs.push(format!(
                    "{} HS variances for {} HS bands",
                    l.hs_variances.len(),
                    hs.bands()
                ));
            }
            if l.ms_variances.len() != ms.bands() || l.ms_bands.len() != ms.bands() {
                errs.push(format!(
                    "lambdas describe {} MS bands, M has {}",
                    l.ms_bands.len(),
                    ms.bands()
                ));
            }
            invalid(errs)?;
            (
                l.operator(ms.rows(), ms.cols())?,
                BandSelector::select(hs.bands(), l.ms_bands.clone())?,
                l.hs_variances.clone(),
                l.ms_variances.clone(),
            )
        }
        None => {
            let (Some(h_db), Some(m_db)) = (&config.hs_snr_db, &config.ms_snr_db) else {
                errs.push(
                    "no noise variances: pass --lambdas <lambdas.json>, or a guessed SNR for both images \
                     with --hs-snr-db and --ms-snr-db"
                        .into(),
                );
                return Err(CliError::Validation(errs).into());
            };
            if config.downsample != ratio {
                errs.push(format!(
                    "downsample {} but MS/HS size ratio is {ratio}",
                    config.downsample
                ));
            }
            errs.extend(config.validate_for(ms.rows(), ms.cols(), hs.bands()));
            invalid(errs)?;
            let sel = config.selector(hs.bands())?;
            if sel.output_bands() != ms.bands() {
                invalid(vec![format!(
                    "{} MS bands selected, M has {}",
                    sel.output_bands(),
                    ms.bands()
                )])?;
            }
            let var_h = variances_for_snr(hs, &snr_of(h_db, hs.bands())?)?;
            let var_m = variances_for_snr(ms, &snr_of(m_db, ms.bands())?)?;
            (config.operator(ms.rows(), ms.cols())?, sel, var_h, var_m)
        }
    };
    Ok(setup)
}

pub struct Fused {
    pub result: FusionResult,
    pub total_s: f64,
}

pub fn fuse_in_memory(
    hs: &SpectralCube,
    ms: &SpectralCube,
    lambdas: Option<&Lambdas>,
    config: &ScenarioConfig,
) -> Result<Fused> {
    let start = Instant::now();
    let (op, sel, var_h, var_m) = fusion_setup(hs, ms, lambdas, config)?;
    let result = fuse(hs, ms, &op, &sel, &var_h, &var_m, &config.solver)?;
    Ok(Fused {
        result,
        total_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct TimingOut<'a> {
    #[serde(flatten)]
    timing: &'a Timing,
    total_s: f64,
    note: &'static str,
}

const TIMING_NOTE: &str = "algorithm_s = PCA + MAP initialization + ADMM; fusion_s = ADMM iterations only; total_s adds setup";

pub fn write_fused(dir: &Path, fused: &Fused, config: &ScenarioConfig) -> Result<()> {
    ensure_dir(dir)?;
    let r = &fused.result;
    write_cube(
        &dir.join("F.cube"),
        &r.fused,
        config.dtype,
        provenance("fuse", config),
    )?;
    write_atomic(&dir.join("subspace.json"), &pretty(&r.subspace)?)?;
    let diagnostics = json!({
        "mu": r.mu,
        "mu_initial": r.mu_initial,
        "eta": r.eta,
        "stop_reason": r.stop_reason,
        "outer_iterations": r.state.outer,
        "objective_history": r.state.objective_history,
        "iterations": r.diagnostics,
        "ms_ridge": r.ms_ridge,
        "conditional_ridge": r.cond_ridge,
        "explained_variance": r.subspace.explained_variance(),
        "timing": TimingOut { timing: &r.timing, total_s: fused.total_s, note: TIMING_NOTE },
        "provenance": provenance("fuse", config),
    });
    write_atomic(&dir.join("diagnostics.json"), &pretty(&diagnostics)?)?;
    Ok(())
}

pub fn fuse_files(
    hs: &Path,
    ms: &Path,
    lambdas: Option<&Path>,
    config: &ScenarioConfig,
    out: &Path,
) -> Result<()> {
    invalid(config.validate())?;
    let hs = load_cube(hs)?;
    let ms = load_cube(ms)?;
    let lambdas: Option<Lambdas> = match lambdas {
        Some(p) => {
            let text = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some(
                serde_json::from_slice(&text)
                    .map_err(|e| CliError::Validation(vec![format!("{}: {e}", p.display())]))?,
            )
        }
        None => None,
    };
    let fused = fuse_in_memory(&hs, &ms, lambdas.as_ref(), config)?;
    write_fused(out, &fused, config)?;
    log::info!(
        "fused {}x{}x{} in {:.3} s ({:?})",
        fused.result.fused.rows(),
        fused.result.fused.cols(),
        fused.result.fused.bands(),
        fused.result.timing.algorithm_s,
        fused.result.stop_reason
    );
    Ok(())
}

/// A candidate to score and how long it took to produce.
pub struct Candidate {
    pub method: String,
    pub cube: SpectralCube,
    pub alg_time_s: Option<f64>,
}

/// Scores every candidate, writes `report.csv` and `report.json`, and the
/// per-band curves and SAM map of the first one.
pub fn write_evaluation(
    dir: &Path,
    reference_name: &str,
    reference: &SpectralCube,
    candidates: &[Candidate],
    opts: &ReportOptions,
    dtype: Dtype,
    prov: Value,
) -> Result<Vec<MetricReport>> {
    ensure_dir(dir)?;
    let reports = candidates
        .iter()
        .map(|c| report(reference, &c.cube, opts).with_context(|| format!("scoring {}", c.method)))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Row> = candidates
        .iter()
        .zip(&reports)
        .map(|(c, r)| Row {
            method: c.method.clone(),
            report: r,
            alg_time_s: c.alg_time_s,
        })
        .collect();
    write_atomic(
        &dir.join("report.csv"),
        output::report_csv(&rows).as_bytes(),
    )?;
    write_atomic(
        &dir.join("report.json"),
        &output::report_json(
            reference_name,
            opts.uiqi_window,
            opts.resolution_ratio,
            &rows,
        )?,
    )?;
    let first = &reports[0];
    write_atomic(
        &dir.join("per_band.csv"),
        output::per_band_csv(&first.per_band, reference.band_centers()).as_bytes(),
    )?;
    output::write_sam_map(dir, &first.sam_map, dtype, prov)?;
    Ok(reports)
}

pub struct EvaluateArgs<'a> {
    pub reference: &'a Path,
    pub candidate: &'a Path,
    pub method: &'a str,
    pub ratio: Option<f64>,
    pub diagnostics: Option<&'a Path>,
}

pub fn evaluate(args: &EvaluateArgs, config: &ScenarioConfig, out: &Path) -> Result<()> {
    invalid(config.validate())?;
    let reference = load_cube(args.reference)?;
    let candidate = load_cube(args.candidate)?;
    let dims = |c: &SpectralCube| (c.rows(), c.cols(), c.bands());
    if dims(&reference) != dims(&candidate) {
        invalid(vec![format!(
            "reference is {:?} but candidate is {:?} (rows, cols, bands)",
            dims(&reference),
            dims(&candidate)
        )])?;
    }
    let alg_time_s = match args.diagnostics {
        Some(p) => {
            let v: Value = serde_json::from_slice(
                &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
            )?;
            v["timing"]["algorithm_s"].as_f64()
        }
        None => None,
    };
    let opts = ReportOptions {
        uiqi_window: config.uiqi_window,
        resolution_ratio: args
            .ratio
            .unwrap_or(1.0 / (config.downsample * config.downsample) as f64),
    };
    let name = args.reference.display().to_string();
    let reports = write_evaluation(
        out,
        &name,
        &reference,
        &[Candidate {
            method: args.method.into(),
            cube: candidate,
            alg_time_s,
        }],
        &opts,
        config.dtype,
        provenance("evaluate", config),
    )?;
    log::info!(
        "{}: PSNR {:.2} dB, SAM {:.3} deg",
        args.method,
        reports[0].psnr_db,
        reports[0].sam_deg
    );
    Ok(())
}

#[derive(Serialize)]
struct Artifacts {
    truth: Option<&'static str>,
    hs: &'static str,
    ms: &'static str,
    lambdas: &'static str,
    fused: &'static str,
    subspace: &'static str,
    diagnostics: &'static str,
    report_csv: &'static str,
    report_json: &'static str,
    per_band: &'static str,
    sam_map: &'static str,
    sam_map_png: &'static str,
}

/// One simulate → fuse → evaluate run; returns its summary.
fn pipeline_once(
    truth: &SpectralCube,
    write_truth: bool,
    config: &ScenarioConfig,
    out: &Path,
) -> Result<Value> {
    ensure_dir(out)?;
    if write_truth {
        write_cube(
            &out.join("truth.cube"),
            truth,
            config.dtype,
            provenance("scene", config),
        )?;
    }
    let sim = simulate_in_memory(truth, config)?;
    write_simulated(out, &sim, config)?;
    let fused = fuse_in_memory(&sim.hs, &sim.ms, Some(&sim.lambdas), config)?;
    write_fused(out, &fused, config)?;
    let r = &fused.result;

    let d = config.downsample;
    let candidates = [
        Candidate {
            method: "proposed".into(),
            cube: r.fused.clone(),
            alg_time_s: Some(r.timing.algorithm_s),
        },
        Candidate {
            method: "map_init".into(),
            cube: r.initial_cube()?,
            alg_time_s: Some(r.timing.pca_s + r.timing.map_s),
        },
        Candidate {
            method: "nearest".into(),
            cube: upsample_nearest(&sim.hs, d)?,
            alg_time_s: None,
        },
    ];
    let opts = ReportOptions {
        uiqi_window: config.uiqi_window,
        resolution_ratio: 1.0 / (d * d) as f64,
    };
    let reports = write_evaluation(
        out,
        "truth",
        truth,
        &candidates,
        &opts,
        config.dtype,
        provenance("evaluate", config),
    )?;

    let metrics: serde_json::Map<String, Value> = candidates
        .iter()
        .zip(&reports)
        .map(|(c, m)| {
            (
                c.method.clone(),
                serde_json::to_value(Scores::from(m)).unwrap(),
            )
        })
        .collect();
    let summary = json!({
        "provenance": provenance("pipeline", config),
        "artifacts": Artifacts {
            truth: write_truth.then_some("truth.cube"),
            hs: "H.cube",
            ms: "M.cube",
            lambdas: "lambdas.json",
            fused: "F.cube",
            subspace: "subspace.json",
            diagnostics: "diagnostics.json",
            report_csv: "report.csv",
            report_json: "report.json",
            per_band: "per_band.csv",
            sam_map: "sam_map.cube",
            sam_map_png: "sam_map.png",
        },
        "metrics": metrics,
        "solver": {
            "mu": r.mu,
            "mu_initial": r.mu_initial,
        "mu_initial": r.mu_initial,
            "eta": r.eta,
            "stop_reason": r.stop_reason,
            "outer_iterations": r.state.outer,
        },
        "timing": TimingOut { timing: &r.timing, total_s: fused.total_s, note: TIMING_NOTE },
    });
    write_atomic(&out.join("summary.json"), &pretty(&summary)?)?;
    log::info!(
        "pipeline: proposed {:.2} dB, MAP init {:.2} dB, nearest {:.2} dB, alg time {:.3} s",
        reports[0].psnr_db,
        reports[1].psnr_db,
        reports[2].psnr_db,
        r.timing.algorithm_s
    );
    Ok(summary)
}

fn sweep_dir(out: &Path, snr: f64) -> PathBuf {
    out.join(format!("snr_{snr}db"))
}

pub fn pipeline(truth_path: Option<&Path>, config: &ScenarioConfig, out: &Path) -> Result<()> {
    let truth = load_truth(truth_path, config)?;
    let mut errs = config.validate();
    errs.extend(config.validate_for(truth.rows(), truth.cols(), truth.bands()));
    if config.snr_sweep.is_some()
        && matches!(
            config.hs_snr_db,
            Some(WeightLevels::PerBand(_) | WeightLevels::Range { .. })
        )
    {
        errs.push("snr_sweep replaces hs_snr_db; drop the per-band hs_snr_db".into());
    }
    invalid(errs)?;
    let Some(sweep) = &config.snr_sweep else {
        pipeline_once(&truth, truth_path.is_none(), config, out)?;
        return Ok(());
    };

    ensure_dir(out)?;
    if truth_path.is_none() {
        write_cube(
            &out.join("truth.cube"),
            &truth,
            config.dtype,
            provenance("scene", config),
        )?;
    }
    let mut csv = String::from(output::REPORT_HEADER);
    csv.push('\n');
    let mut runs = Vec::new();
    for &snr in sweep {
        let run_config = ScenarioConfig {
            hs_snr_db: Some(WeightLevels::Scalar(snr)),
            snr_sweep: None,
            ..config.clone()
        };
        let dir = sweep_dir(out, snr);
        let summary = pipeline_once(&truth, false, &run_config, &dir)?;
        let rows = std::fs::read_to_string(dir.join("report.csv"))?;
        for line in rows.lines().skip(1) {
            let (method, rest) = line.split_once(',').unwrap_or((line, ""));
            csv.push_str(&format!("{method}@{snr}dB,{rest}\n"));
        }
        runs.push(json!({
            "hs_snr_db": snr,
            "dir": dir.file_name().map(|n| n.to_string_lossy().into_owned()),
            "metrics": summary["metrics"],
            "timing": summary["timing"],
        }));
    }
    write_atomic(&out.join("report.csv"), csv.as_bytes())?;
    let summary = json!({
        "provenance": provenance("pipeline", config),
        "truth": truth_path.is_none().then_some("truth.cube"),
        "report_csv": "report.csv",
        "runs": runs,
    });
    write_atomic(&out.join("summary.json"), &pretty(&summary)?)?;
    Ok(())
}

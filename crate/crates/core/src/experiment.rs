//! Simulate, convergence and calibrate pipelines.
//!
//! Paths are computed in parallel and every reduction and file write runs in
//! path order, so outputs are byte-identical for any thread count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::analysis::{mean_distance, mle_eta2, weak_error, z_scores, ConvergenceReport, ErrorEstimates};
use crate::brownian::PiecewiseParabola;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::filter::Scheme;
use crate::models::SdeModel;
use crate::rng::{NoiseStream, Purpose};
use crate::samplers::{
    alg3_run, coupled_path, initial_point, map_coupled, FilterSettings, GridSpec, PathInput, PathRecord, Sampler,
    SamplerRegistry,
};

const CHUNK: usize = 1024;

/// Runs `f` inside a pool of `threads` workers; 0 picks the rayon default.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Round-trip float formatting for CSV cells.
fn num(v: f64) -> String {
    format!("{v}")
}

fn sampling_stream(model: &SdeModel, seed: u64, path: u64, level: u8) -> NoiseStream {
    NoiseStream::new(seed, path, level, Purpose::Sampling, model.dim())
}

fn level_of(index: usize) -> Result<u8> {
    u8::try_from(index).ok().filter(|l| *l < 64).ok_or_else(|| Error::invalid("too many step sizes"))
}

/// Fine-step factor for a reference at `delta^2`.
pub fn fine_factor(delta: f64) -> f64 {
    1.0 / delta
}

/// A sampler and the number of leading paths it should run on.
pub struct SamplerJob {
    pub sampler: Box<dyn Sampler>,
    pub paths: usize,
}

/// First-step and terminal points of one path.
pub type Ends = (DVector<f64>, DVector<f64>);

/// Endpoints of one coupled path for the fine reference and every job.
#[derive(Debug)]
pub struct Endpoints {
    pub fine: Ends,
    /// One entry per job; `None` past the job's path count or for inactive jobs.
    pub approx: Vec<Option<Result<Ends>>>,
}

fn ends(r: &PathRecord) -> Ends {
    (r.values[1].clone(), r.terminal().clone())
}

/// Runs every active job on the coupled paths of one step size.
///
/// A sampler failure is kept per path and job so the other jobs still get
/// their estimates; only failures of the shared reference abort.
pub fn coupled_endpoints(
    model: &SdeModel,
    delta: f64,
    level: u8,
    n: usize,
    seed: u64,
    jobs: &[SamplerJob],
    active: &[bool],
) -> Result<Vec<Endpoints>> {
    let grid = GridSpec::new(model.horizon(), delta)?;
    map_coupled(model, &grid, fine_factor(delta), n, seed, level, |p, c| {
        let mut approx = Vec::with_capacity(jobs.len());
        for (job, &on) in jobs.iter().zip(active) {
            if !on || p as usize >= job.paths {
                approx.push(None);
                continue;
            }
            let mut sampling = sampling_stream(model, seed, p, level);
            let input = PathInput { model, grid: &grid, x0: &c.x0, coeffs: &c.coarse, sampling: &mut sampling };
            let run = job.sampler.run(input).map(|r| ends(&r));
            if let Err(e) = &run {
                warn!("{} failed on path {p} at delta = {delta}: {e}", job.sampler.name());
            }
            approx.push(Some(run));
        }
        Ok(Endpoints { fine: ends(&c.fine), approx })
    })
}

/// Error estimates of one job's column; the first path failure is returned.
fn estimates_from(delta: f64, fine: &[&Ends], approx: Vec<Option<Result<Ends>>>, strong: bool) -> Result<ErrorEstimates> {
    let n = approx.len();
    let mut al = Vec::with_capacity(n);
    let mut at = Vec::with_capacity(n);
    for (p, a) in approx.into_iter().enumerate() {
        let (l, t) = a.ok_or_else(|| Error::invalid(format!("path {p} was not run")))??;
        al.push(l);
        at.push(t);
    }
    let fl: Vec<_> = fine[..n].iter().map(|f| f.0.clone()).collect();
    let ft: Vec<_> = fine[..n].iter().map(|f| f.1.clone()).collect();
    let (eps_local, eps_global) = if strong {
        (Some(mean_distance(&al, &fl)?), Some(mean_distance(&at, &ft)?))
    } else {
        (None, None)
    };
    Ok(ErrorEstimates { delta, eps_local, eps_global, eps_weak: weak_error(&at, &ft)?, n })
}

/// Convergence study of several jobs sharing one coupled reference per step size.
///
/// Returns `result[job][delta_index]` over each job's own path count. A job
/// that fails at one step size yields its error and is not run at later ones.
pub fn convergence_study(
    model: &SdeModel,
    deltas: &[f64],
    seed: u64,
    jobs: &[SamplerJob],
) -> Result<Vec<Result<Vec<ErrorEstimates>>>> {
    let n = jobs.iter().map(|j| j.paths).max().ok_or_else(|| Error::invalid("no samplers to run"))?;
    let mut out: Vec<Result<Vec<ErrorEstimates>>> = (0..jobs.len()).map(|_| Ok(Vec::with_capacity(deltas.len()))).collect();
    for (idx, &delta) in deltas.iter().enumerate() {
        let active: Vec<bool> = out.iter().map(|r| r.is_ok()).collect();
        if !active.iter().any(|&a| a) {
            break;
        }
        let start = Instant::now();
        let mut endpoints = coupled_endpoints(model, delta, level_of(idx)?, n, seed, jobs, &active)?;
        let mut columns: Vec<Vec<Option<Result<Ends>>>> = jobs.iter().map(|j| Vec::with_capacity(j.paths)).collect();
        for e in endpoints.iter_mut() {
            for (col, a) in columns.iter_mut().zip(e.approx.drain(..)) {
                if a.is_some() {
                    col.push(a);
                }
            }
        }
        let fine: Vec<&Ends> = endpoints.iter().map(|e| &e.fine).collect();
        for (j, (job, col)) in jobs.iter().zip(columns).enumerate() {
            if !active[j] {
                continue;
            }
            match estimates_from(delta, &fine, col, job.sampler.uses_coefficients()) {
                Ok(est) => out[j].as_mut().expect("active job").push(est),
                Err(e) => out[j] = Err(e),
            }
        }
        info!("delta = {delta}: {n} coupled paths in {:.1?}", start.elapsed());
    }
    Ok(out)
}

fn prepare(cfg: &ExperimentConfig) -> Result<(ExperimentConfig, SdeModel)> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    if cfg.full_scale {
        warn!(
            "full scale: {} paths, finest step {}; expect a very long run",
            cfg.paths,
            cfg.grid.deltas.last().copied().unwrap_or(0.0)
        );
    }
    if cfg.sampler == "alg4" && cfg.scheme == Scheme::Ekf1 {
        warn!("alg4 with ekf1 is known to give biased weak errors");
    }
    if cfg.sampler == "em" && cfg.scheme != Scheme::Ekf0 {
        info!("sampler em ignores the scheme setting");
    }
    let model = cfg.build_model()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    Ok((cfg, model))
}

fn build_sampler(cfg: &ExperimentConfig) -> Result<Box<dyn Sampler>> {
    SamplerRegistry::default().build(&cfg.sampler, cfg.filter_settings()?)
}

/// Result of the simulate pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulateSummary {
    pub paths: usize,
    pub steps: usize,
    pub delta: f64,
    pub file: PathBuf,
    pub terminal_mean: DVector<f64>,
    pub terminal_var: DVector<f64>,
    pub elapsed: Duration,
}

/// Samples `paths` trajectories at the first configured step and writes `paths.csv`.
pub fn simulate(cfg: &ExperimentConfig, threads: usize) -> Result<SimulateSummary> {
    let start = Instant::now();
    let (cfg, model) = prepare(cfg)?;
    let sampler = build_sampler(&cfg)?;
    let delta = cfg.grid.deltas[0];
    let grid = GridSpec::new(model.horizon(), delta)?;
    let (d, m) = (model.dim(), model.noise_dim());
    let file = cfg.out.join("paths.csv");
    let mut w = csv::Writer::from_path(&file)?;
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((0..d).map(|i| format!("x_{i}")));
    if sampler.gaussian_output() {
        header.extend((0..d).map(|i| format!("var_{i}")));
    }
    w.write_record(&header)?;

    let run_path = |p: u64| -> Result<PathRecord> {
        let mut cs = NoiseStream::new(cfg.seed, p, 0, Purpose::Coefficients, 2 * m);
        let coeffs = PiecewiseParabola::sample(&mut cs, grid.steps(), delta, m)?;
        let x0 = initial_point(&model, cfg.seed, p);
        let mut sampling = sampling_stream(&model, cfg.seed, p, 0);
        sampler.run(PathInput { model: &model, grid: &grid, x0: &x0, coeffs: &coeffs, sampling: &mut sampling })
    };
    let mut sum = DVector::zeros(d);
    let mut sum_sq = DVector::zeros(d);
    with_threads(threads, || -> Result<()> {
        for chunk_start in (0..cfg.paths).step_by(CHUNK) {
            let chunk_end = (chunk_start + CHUNK).min(cfg.paths);
            let records: Result<Vec<_>> = (chunk_start as u64..chunk_end as u64).into_par_iter().map(run_path).collect();
            for (offset, rec) in records?.iter().enumerate() {
                let p = chunk_start + offset;
                let vars = rec.variances();
                for (k, (t, x)) in rec.times.iter().zip(&rec.values).enumerate() {
                    let mut row = vec![p.to_string(), num(*t)];
                    row.extend(x.iter().map(|v| num(*v)));
                    if let Some(vs) = &vars {
                        row.extend(vs[k].iter().map(|v| num(*v)));
                    }
                    w.write_record(&row)?;
                }
                let xt = rec.terminal();
                sum += xt;
                sum_sq += xt.component_mul(xt);
            }
        }
        Ok(())
    })??;
    w.flush()?;
    let n = cfg.paths as f64;
    let terminal_mean = &sum / n;
    let terminal_var = if cfg.paths > 1 {
        (sum_sq - terminal_mean.component_mul(&terminal_mean) * n) / (n - 1.0)
    } else {
        DVector::zeros(d)
    };
    Ok(SimulateSummary {
        paths: cfg.paths,
        steps: grid.steps(),
        delta,
        file,
        terminal_mean,
        terminal_var,
        elapsed: start.elapsed(),
    })
}

/// Writes the per-delta table followed by `a_hat`, `ln_b_hat`, `c_hat`, `r2` rows.
pub fn write_convergence_csv(path: &Path, report: &ConvergenceReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["delta", "eps_local", "eps_global", "eps_weak", "N"])?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    for e in &report.estimates {
        w.write_record([num(e.delta), opt(e.eps_local), opt(e.eps_global), num(e.eps_weak), e.n.to_string()])?;
    }
    type Field = fn(&crate::analysis::LogLogFit) -> f64;
    let rows: [(&str, Field); 4] = [
        ("a_hat", |f| f.a_hat),
        ("ln_b_hat", |f| f.ln_b_hat),
        ("c_hat", |f| f.c_hat),
        ("r2", |f| f.r2),
    ];
    for (name, get) in rows {
        w.write_record([
            name.to_string(),
            opt(report.local.as_ref().map(get)),
            opt(report.global.as_ref().map(get)),
            num(get(&report.weak)),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the coupled convergence study for the configured sampler and writes `convergence.csv`.
pub fn convergence(cfg: &ExperimentConfig, threads: usize) -> Result<ConvergenceReport> {
    let (cfg, model) = prepare(cfg)?;
    if cfg.grid.deltas.len() < 3 {
        return Err(Error::Config(format!("convergence needs at least 3 step sizes, got {}", cfg.grid.deltas.len())));
    }
    let jobs = [SamplerJob { sampler: build_sampler(&cfg)?, paths: cfg.paths }];
    if !jobs[0].sampler.uses_coefficients() {
        info!("{} marginalises the Brownian path: only weak errors are reported", cfg.sampler);
    }
    let mut per_job = with_threads(threads, || convergence_study(&model, &cfg.grid.deltas, cfg.seed, &jobs))??;
    let report = ConvergenceReport::from_estimates(per_job.remove(0)?)?;
    write_convergence_csv(&cfg.out.join("convergence.csv"), &report)?;
    Ok(report)
}

/// Result of the calibrate pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSummary {
    pub delta: f64,
    /// Prior scale of the first run.
    pub eta2_initial: f64,
    /// Estimate from path 0 alone.
    pub eta2_hat: f64,
    /// Mean of the per-path estimates over all paths.
    pub eta2_hat_mean: f64,
    pub paths: usize,
    /// Fraction of |Z| <= 2 along path 0, before and after calibration.
    pub coverage_initial: f64,
    pub coverage_calibrated: Option<f64>,
    pub file: PathBuf,
}

fn coverage(z: &[DVector<f64>]) -> f64 {
    let total: usize = z.iter().map(|v| v.len()).sum();
    let inside: usize = z.iter().map(|v| v.iter().filter(|x| x.abs() <= 2.0).count()).sum();
    inside as f64 / total.max(1) as f64
}

/// Calibrates the prior scale of alg3 from innovations and writes `calibration.csv`.
///
/// The first run uses the configured prior scale `eta0`; its innovations
/// estimate `eta^2 / eta0^2`, so the calibrated scale is `eta0^2` times that.
pub fn calibrate(cfg: &ExperimentConfig, threads: usize) -> Result<CalibrationSummary> {
    let (cfg, model) = prepare(cfg)?;
    if cfg.sampler != "alg3" {
        return Err(Error::Config(format!("calibrate needs sampler = \"alg3\", got \"{}\"", cfg.sampler)));
    }
    let settings = cfg.filter_settings()?;
    let eta2_initial = settings.prior.eta().powi(2);
    let delta = cfg.grid.deltas[0];
    let grid = GridSpec::new(model.horizon(), delta)?;

    let per_path = with_threads(threads, || {
        map_coupled(&model, &grid, fine_factor(delta), cfg.paths, cfg.seed, 0, |_, c| {
            let rec = alg3_run(&model, &grid, &settings, &c.coarse)?;
            Ok(eta2_initial * mle_eta2(&rec.innovations)?)
        })
    })??;
    let eta2_hat_mean = per_path.iter().sum::<f64>() / per_path.len() as f64;
    let eta2_hat = per_path[0];

    let c = coupled_path(&model, &grid, fine_factor(delta), cfg.seed, 0, 0)?;
    let first = alg3_run(&model, &grid, &settings, &c.coarse)?;
    let z_first = z_scores(&c.fine, &first)?;
    let second = if eta2_hat > 0.0 {
        let calibrated = FilterSettings { prior: settings.prior.with_eta(eta2_hat.sqrt())?, ..settings };
        let rec = alg3_run(&model, &grid, &calibrated, &c.coarse)?;
        let z = z_scores(&c.fine, &rec)?;
        Some((rec, z))
    } else {
        warn!("estimated prior scale is zero (all innovations vanish); skipping the calibrated rerun");
        None
    };

    let file = cfg.out.join("calibration.csv");
    write_calibration_csv(&file, &c.fine, &first, &z_first, second.as_ref())?;
    let mut summary = fs::File::create(cfg.out.join("calibration_summary.csv"))?;
    let coverage_calibrated = second.as_ref().map(|(_, z)| coverage(z));
    writeln!(summary, "key,value")?;
    writeln!(summary, "delta,{}", num(delta))?;
    writeln!(summary, "eta2_initial,{}", num(eta2_initial))?;
    writeln!(summary, "eta2_hat,{}", num(eta2_hat))?;
    writeln!(summary, "eta2_hat_mean,{}", num(eta2_hat_mean))?;
    writeln!(summary, "paths,{}", cfg.paths)?;
    writeln!(summary, "coverage_initial,{}", num(coverage(&z_first)))?;
    writeln!(summary, "coverage_calibrated,{}", coverage_calibrated.map(num).unwrap_or_default())?;
    Ok(CalibrationSummary {
        delta,
        eta2_initial,
        eta2_hat,
        eta2_hat_mean,
        paths: cfg.paths,
        coverage_initial: coverage(&z_first),
        coverage_calibrated,
        file,
    })
}

fn write_calibration_csv(
    path: &Path,
    fine: &PathRecord,
    first: &PathRecord,
    z_first: &[DVector<f64>],
    second: Option<&(PathRecord, Vec<DVector<f64>>)>,
) -> Result<()> {
    let d = fine.values[0].len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    for prefix in ["fine", "mean", "var", "z", "mean_cal", "var_cal", "z_cal"] {
        header.extend((0..d).map(|i| format!("{prefix}_{i}")));
    }
    w.write_record(&header)?;
    let blank = |row: &mut Vec<String>| row.extend(std::iter::repeat_n(String::new(), d));
    let diag = |r: &PathRecord, k: usize| -> DVector<f64> {
        r.covariances.as_ref().map(|c| c[k].diagonal()).unwrap_or_else(|| DMatrix::<f64>::zeros(d, d).diagonal())
    };
    for k in 0..fine.len() {
        let mut row = vec![num(fine.times[k])];
        row.extend(fine.values[k].iter().map(|v| num(*v)));
        row.extend(first.values[k].iter().map(|v| num(*v)));
        row.extend(diag(first, k).iter().map(|v| num(*v)));
        match k {
            0 => blank(&mut row),
            _ => row.extend(z_first[k - 1].iter().map(|v| num(*v))),
        }
        match second {
            Some((rec, z)) => {
                row.extend(rec.values[k].iter().map(|v| num(*v)));
                row.extend(diag(rec, k).iter().map(|v| num(*v)));
                match k {
                    0 => blank(&mut row),
                    _ => row.extend(z[k - 1].iter().map(|v| num(*v))),
                }
            }
            None => {
                for _ in 0..3 {
                    blank(&mut row);
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

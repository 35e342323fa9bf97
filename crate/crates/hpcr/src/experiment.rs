//! Experiment front-end behind the CLI verbs: grid execution over
//! (method, buffer size, seed) cells with per-run CSVs and a seed-aggregated
//! table, the gradient-check driver, the temperature sweep, and data export.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gradients::{run_gradcheck, GradCheckReport};
use crate::losses::TemperatureSchedule;
use crate::stream::make_task_stream;
use crate::trainer::{self, Method, MethodSpec, RunOptions, RunResult};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "HPCR_OUT_DIR";

/// One (method, buffer, seed) cell of the grid.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub run_id: String,
    pub method: Method,
    pub buffer: usize,
    pub seed: u64,
    pub result: std::result::Result<RunResult, String>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub aggregate_path: PathBuf,
}

impl RunSummary {
    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.result.is_ok())
    }
}

/// Resolves the output directory: explicit flag, then environment override,
/// then the configured value.
pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from(&cfg.experiment.out_dir)
}

fn spec_for_cell(cfg: &ExperimentConfig, method: Method, buffer: usize) -> Result<MethodSpec> {
    let mut hyper = cfg.train.clone();
    hyper.buffer_capacity = buffer;
    hyper.current_batch = cfg.stream.batch_size;
    let schedule = cfg.schedule.build(cfg.model.tau)?;
    let mut spec = MethodSpec::new(method, hyper, schedule);
    spec.classifier = cfg.experiment.classifier.resolve(method);
    Ok(spec)
}

fn run_cell(
    cfg: &ExperimentConfig,
    method: Method,
    buffer: usize,
    seed: u64,
    out_dir: &Path,
) -> CellOutcome {
    let run_id = format!("{}_m{}_s{}", method.name(), buffer, seed);
    let dir = out_dir.join(&run_id);
    let outcome = (|| -> Result<RunResult> {
        let mut stream_cfg = cfg.stream.clone();
        stream_cfg.seed = seed;
        let mut stream = make_task_stream(&stream_cfg)?;
        let spec = spec_for_cell(cfg, method, buffer)?;
        let options = RunOptions {
            grad_audit: cfg.experiment.grad_audit,
            eval_per_step: cfg.experiment.eval_per_step,
        };
        let out = trainer::run(&mut stream, &cfg.model, &spec, seed, options)?;
        out.result.write_csvs(&dir)?;
        if let Some(audit) = &out.audit_rows {
            audit.write_csv(&dir.join("grad_audit.csv"))?;
        }
        if cfg.experiment.export_embeddings {
            trainer::write_embeddings_csv(
                &out.params,
                stream.tasks(),
                &dir.join("embeddings.csv"),
            )?;
        }
        Ok(out.result)
    })();
    CellOutcome {
        run_id,
        method,
        buffer,
        seed,
        result: outcome.map_err(|e| e.to_string()),
    }
}

/// Executes the whole grid, one directory per run, and writes the aggregate
/// table with mean and 95% confidence half-width over seeds.
pub fn cmd_run(cfg: &ExperimentConfig, out_flag: Option<&Path>) -> Result<RunSummary> {
    cfg.validate_for_run()?;
    let out_dir = resolve_out_dir(cfg, out_flag);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.effective.toml"), cfg.to_toml_string())?;

    let mut cells_spec = Vec::new();
    for &method in &cfg.experiment.methods {
        for &buffer in &cfg.experiment.buffer_sizes {
            for &seed in &cfg.experiment.seeds {
                cells_spec.push((method, buffer, seed));
            }
        }
    }
    let cells: Vec<CellOutcome> = cells_spec
        .par_iter()
        .map(|&(method, buffer, seed)| run_cell(cfg, method, buffer, seed, &out_dir))
        .collect();

    let aggregate_path = out_dir.join("aggregate.csv");
    write_aggregate(
        &cells,
        &cfg.experiment.methods,
        &cfg.experiment.buffer_sizes,
        &aggregate_path,
    )?;
    Ok(RunSummary {
        out_dir,
        cells,
        aggregate_path,
    })
}

/// Sample mean and 95% confidence-interval half-width (Student t).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof")
        .inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

fn write_aggregate(
    cells: &[CellOutcome],
    methods: &[Method],
    buffers: &[usize],
    path: &Path,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "method,buffer,seeds,failed,A_T_mean,A_T_ci95,AAA_mean,AAA_ci95,F_T_mean,F_T_ci95"
    )?;
    for &method in methods {
        for &buffer in buffers {
            let group: Vec<&CellOutcome> = cells
                .iter()
                .filter(|c| c.method == method && c.buffer == buffer)
                .collect();
            let ok: Vec<&RunResult> = group
                .iter()
                .filter_map(|c| c.result.as_ref().ok())
                .collect();
            let failed = group.len() - ok.len();
            let a: Vec<f64> = ok.iter().map(|r| r.final_accuracy).collect();
            let aaa: Vec<f64> = ok.iter().map(|r| r.anytime_accuracy).collect();
            let f: Vec<f64> = ok.iter().filter_map(|r| r.forgetting).collect();
            let (am, ac) = mean_ci95(&a);
            let (gm, gc) = mean_ci95(&aaa);
            let (fm, fc) = mean_ci95(&f);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                method.name(),
                buffer,
                ok.len(),
                failed,
                am,
                ac,
                gm,
                gc,
                fm,
                fc
            )?;
        }
    }
    Ok(())
}

/// Runs the closed-form-vs-finite-difference suite.
pub fn cmd_gradcheck(instances: usize, seed: u64) -> Result<GradCheckReport> {
    if instances == 0 {
        return Err(Error::Config("--instances must be at least 1".into()));
    }
    run_gradcheck(instances, seed)
}

/// One row of the temperature sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub tau_max: f64,
    pub tau_min: f64,
    pub cycle: u64,
    pub final_accuracy: f64,
    pub anytime_accuracy: f64,
}

/// Runs HPCR once per grid cell (averaged over the configured seeds) and
/// tabulates (tau_max, tau_min, S) -> (A_T, AAA).
pub fn cmd_tau_sweep(
    cfg: &ExperimentConfig,
    out_flag: Option<&Path>,
) -> Result<(PathBuf, Vec<SweepRow>)> {
    cfg.validate_common()?;
    if cfg.sweep.tau_max.is_empty() || cfg.sweep.tau_min.is_empty() || cfg.sweep.cycle.is_empty() {
        return Err(Error::Config(
            "sweep grid must list tau_max, tau_min, and cycle values".into(),
        ));
    }
    let buffer = cfg.experiment.buffer_sizes.first().copied().unwrap_or(200);
    let out_dir = resolve_out_dir(cfg, out_flag);
    std::fs::create_dir_all(&out_dir)?;

    let mut grid = Vec::new();
    for &tmax in &cfg.sweep.tau_max {
        for &tmin in &cfg.sweep.tau_min {
            for &cycle in &cfg.sweep.cycle {
                // Fail fast on an invalid combination.
                TemperatureSchedule::new(tmax, tmin, cycle, cfg.model.tau)?;
                grid.push((tmax, tmin, cycle));
            }
        }
    }

    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&(tmax, tmin, cycle)| -> Result<SweepRow> {
            let mut a_sum = 0.0;
            let mut aaa_sum = 0.0;
            for &seed in &cfg.experiment.seeds {
                let mut stream_cfg = cfg.stream.clone();
                stream_cfg.seed = seed;
                let mut stream = make_task_stream(&stream_cfg)?;
                let mut hyper = cfg.train.clone();
                hyper.buffer_capacity = buffer;
                hyper.current_batch = cfg.stream.batch_size;
                let schedule = TemperatureSchedule::new(tmax, tmin, cycle, cfg.model.tau)?;
                let spec = MethodSpec::new(Method::Hpcr, hyper, schedule);
                let out =
                    trainer::run(&mut stream, &cfg.model, &spec, seed, RunOptions::default())?;
                a_sum += out.result.final_accuracy;
                aaa_sum += out.result.anytime_accuracy;
            }
            let n = cfg.experiment.seeds.len() as f64;
            Ok(SweepRow {
                tau_max: tmax,
                tau_min: tmin,
                cycle,
                final_accuracy: a_sum / n,
                anytime_accuracy: aaa_sum / n,
            })
        })
        .collect::<Result<_>>()?;

    let path = out_dir.join("tau_sweep.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(out, "tau_max,tau_min,cycle,A_T,AAA")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.tau_max, r.tau_min, r.cycle, r.final_accuracy, r.anytime_accuracy
        )?;
    }
    Ok((path, rows))
}

/// Generates the configured stream for the first seed and writes it as CSV.
pub fn cmd_export_data(cfg: &ExperimentConfig, out_flag: Option<&Path>) -> Result<PathBuf> {
    cfg.validate_common()?;
    let out_dir = resolve_out_dir(cfg, out_flag);
    std::fs::create_dir_all(&out_dir)?;
    let mut stream_cfg = cfg.stream.clone();
    stream_cfg.seed = cfg.experiment.seeds[0];
    let stream = make_task_stream(&stream_cfg)?;
    let path = out_dir.join("dataset.csv");
    stream.export_csv(&path)?;
    Ok(path)
}

//! Implementation of the `robustgnss` command: `simulate`, `solve` and
//! `sweep`, driven by one JSON configuration file.

pub mod config;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use robustgnss::eval::{fault_sweep_with_progress, CellProgress, EvalError};
use robustgnss::io::{self as files, IoError, ObservationRecord};
use robustgnss::sim::{generate_truth, inject_faults, synthesize_observations, SimError};
use robustgnss::{error_stats, estimate, rsos_series, EstimateError, SweepSetup};
use tempfile::NamedTempFile;
use thiserror::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_UNOBSERVABLE: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    /// Outputs were written before this was raised.
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("{0}")]
    Unobservable(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Io(_) => EXIT_IO,
            Self::NotConverged(_) => EXIT_NOT_CONVERGED,
            Self::Unobservable(_) => EXIT_UNOBSERVABLE,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_parse() {
            Self::Config(e.to_string())
        } else {
            Self::Io(e.to_string())
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        match e {
            EstimateError::InvalidOptions(_) => Self::Config(e.to_string()),
            _ if e.is_unobservable() => Self::Unobservable(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::Config(e.to_string())
    }
}

/// Output files staged next to their destination and renamed into place
/// together, so a failed command leaves no partial outputs.
struct Staged {
    dir: PathBuf,
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_owned(),
            files: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut BufWriter<&mut NamedTempFile>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let target = self.dir.join(name);
        let io_err = |e: std::io::Error| CliError::Io(format!("{}: {e}", target.display()));
        let mut tmp = NamedTempFile::new_in(&self.dir).map_err(io_err)?;
        {
            let mut w = BufWriter::new(&mut tmp);
            fill(&mut w)?;
            w.flush().map_err(io_err)?;
        }
        self.files.push((tmp, target));
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut written = Vec::with_capacity(self.files.len());
        for (tmp, target) in self.files {
            tmp.persist(&target)
                .map_err(|e| CliError::Io(format!("{}: {}", target.display(), e.error)))?;
            written.push(target);
        }
        Ok(written)
    }
}

/// Writes `observations.jsonl`, `truth.csv` and `faults.csv`.
pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let truth = generate_truth(&config.scenario)?;
    let clean = synthesize_observations(&truth, &config.scenario)?;
    let faulted = inject_faults(&clean, &config.fault)?;
    info!(
        "simulated {} epochs, {} observations, {} faulted",
        truth.len(),
        clean.len(),
        faulted.fault_count()
    );
    let iono = Some(config.scenario.iono_l1_delay).filter(|&d| d != 0.0);
    let records: Vec<ObservationRecord> = faulted
        .observations
        .iter()
        .map(|o| ObservationRecord::from_observation(o, iono))
        .collect();

    let mut out = Staged::new(&config.io.output_dir)?;
    out.write("observations.jsonl", |w| Ok(files::write_observations(w, &records)?))?;
    out.write("truth.csv", |w| Ok(files::write_truth_csv(w, &truth)?))?;
    out.write("faults.csv", |w| {
        Ok(files::write_faults_csv(w, &faulted.observations, &faulted.mask, &faulted.offsets)?)
    })?;
    out.commit()
}

/// Writes `estimate.csv` and `iterations.csv`, plus `rsos.csv` when a truth
/// file is configured. Returns `NotConverged` after writing if the solver
/// stopped at its iteration limit.
pub fn cmd_solve(config: &RunConfig, observations: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let path = observations
        .or(config.io.observations.as_deref())
        .ok_or_else(|| CliError::Config("no observations file (use --observations or io.observations)".into()))?;
    let observations = files::read_observations(open(path)?, &path.display().to_string())?;
    let truth = match &config.io.truth {
        Some(p) => Some(files::read_truth_csv(open(p)?)?),
        None => None,
    };

    let est = estimate(&observations, &config.estimator, &config.solver, &config.robust)?;
    let report = &est.report;
    info!(
        "{}: {} epochs, error {} -> {} in {} iterations",
        config.robust.scheme.name(),
        est.epochs.len(),
        report.initial_error,
        report.final_error,
        report.iterations.len()
    );

    let mut out = Staged::new(&config.io.output_dir)?;
    out.write("estimate.csv", |w| Ok(files::write_estimate_csv(w, &est)?))?;
    out.write("iterations.csv", |w| Ok(files::write_iterations_csv(w, &report.iterations)?))?;
    if let Some(truth) = truth {
        let rsos = rsos_series(&est.trajectory(), &truth)
            .map_err(|e| CliError::Config(format!("truth does not match the estimate: {e}")))?;
        let stats = error_stats(&rsos).map_err(|e| CliError::Config(e.to_string()))?;
        info!("rsos median {} mean {} max {}", stats.median, stats.mean, stats.max);
        let times: Vec<f64> = est.epochs.iter().map(|e| e.t).collect();
        out.write("rsos.csv", |w| Ok(files::write_rsos_csv(w, &times, &rsos)?))?;
    }
    let written = out.commit()?;
    if !report.converged {
        return Err(CliError::NotConverged(format!(
            "iteration limit of {} reached",
            config.solver.max_iterations
        )));
    }
    Ok(written)
}

/// Writes `sweep.csv` and `sweep.json`, reporting progress on standard
/// error.
pub fn cmd_sweep(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let setup = sweep_setup(config);
    let report = |c: CellProgress| {
        eprintln!("[{}/{}] p = {} trial {}", c.completed, c.total, c.p, c.trial);
    };
    let results = fault_sweep_with_progress(&setup, &report)?;
    for r in &results {
        let diverged: usize = r.cells.iter().map(|c| c.divergences).sum();
        if diverged > 0 {
            warn!("{}: {diverged} diverged trials", r.scheme.name());
        }
    }
    let mut out = Staged::new(&config.io.output_dir)?;
    out.write("sweep.csv", |w| Ok(files::write_sweep_csv(w, &results)?))?;
    out.write("sweep.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &results).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| CliError::Io(e.to_string()))
    })?;
    out.commit()
}

pub fn sweep_setup(config: &RunConfig) -> SweepSetup {
    SweepSetup {
        scenario: config.scenario.clone(),
        sigma_fault: config.fault.sigma_fault,
        schemes: config.sweep.schemes.clone(),
        p_grid: config.sweep.p_grid.clone(),
        trials: config.sweep.trials,
        base_seed: config.sweep.base_seed,
        robust: config.robust.clone(),
        solver: config.solver.clone(),
        estimator: config.estimator.clone(),
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

//! File formats: JSON-lines observations and the CSV outputs.
//!
//! Floats are written with Rust's shortest round-trip formatting, fields
//! separated by `,` and records terminated by `\n`, so identical inputs give
//! identical bytes.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::Estimate;
use crate::eval::SweepResult;
use crate::gnss::{
    iono_free, DualFreqObservation, EpochState, PseudorangeObservation, SatelliteContext,
    TimedState, GPS_L1_HZ, GPS_L2_HZ,
};
use crate::graph::solver::IterationRecord;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IoError {
    pub fn is_parse(&self) -> bool {
        match self {
            Self::Parse { .. } => true,
            Self::Csv(e) => !e.is_io_error(),
            Self::Io(_) => false,
        }
    }
}

/// One line of the observation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub t: f64,
    pub sat: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_l1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_l2: Option<f64>,
    /// Takes precedence over the dual-frequency pair when both are present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_if: Option<f64>,
    pub sat_pos: [f64; 3],
    #[serde(default)]
    pub sat_clk: f64,
    #[serde(default)]
    pub rel: f64,
    #[serde(default)]
    pub pc: f64,
    #[serde(default)]
    pub dcb: f64,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f2: Option<f64>,
}

impl ObservationRecord {
    /// Record for `obs`. With `iono_l1 = Some(I)` the L1/L2 pair carrying a
    /// first-order delay of `I` meters on L1 is written instead of the
    /// combination.
    pub fn from_observation(obs: &PseudorangeObservation, iono_l1: Option<f64>) -> Self {
        let (rho_l1, rho_l2, rho_if) = match iono_l1 {
            Some(delay) => {
                let ratio = (GPS_L1_HZ / GPS_L2_HZ).powi(2);
                (Some(obs.rho_if + delay), Some(obs.rho_if + delay * ratio), None)
            }
            None => (None, None, Some(obs.rho_if)),
        };
        Self {
            t: obs.epoch,
            sat: obs.sat.sat_id.clone(),
            rho_l1,
            rho_l2,
            rho_if,
            sat_pos: obs.sat.position.into(),
            sat_clk: obs.sat.clock_bias,
            rel: obs.sat.rel_correction,
            pc: obs.sat.phase_center,
            dcb: obs.sat.dcb,
            sigma: obs.sigma,
            f1: None,
            f2: None,
        }
    }

    pub fn to_observation(&self) -> Result<PseudorangeObservation, String> {
        let rho_if = match (self.rho_if, self.rho_l1, self.rho_l2) {
            (Some(rho), _, _) => rho,
            (None, Some(l1), Some(l2)) => iono_free(&DualFreqObservation {
                epoch: self.t,
                sat_id: self.sat.clone(),
                rho_l1: l1,
                rho_l2: l2,
                f1: self.f1.unwrap_or(GPS_L1_HZ),
                f2: self.f2.unwrap_or(GPS_L2_HZ),
            })
            .map_err(|e| e.to_string())?,
            _ => return Err("needs rho_if or both rho_l1 and rho_l2".into()),
        };
        if !(self.sigma > 0.0) {
            return Err(format!("sigma must be positive, got {}", self.sigma));
        }
        let mut sat = SatelliteContext::new(self.sat.clone(), Vector3::from(self.sat_pos));
        sat.clock_bias = self.sat_clk;
        sat.rel_correction = self.rel;
        sat.phase_center = self.pc;
        sat.dcb = self.dcb;
        Ok(PseudorangeObservation {
            epoch: self.t,
            sat,
            rho_if,
            sigma: self.sigma,
        })
    }
}

/// Parses a JSON-lines stream; blank lines are skipped and unknown keys
/// ignored.
pub fn read_observations(reader: impl BufRead, source_name: &str) -> Result<Vec<PseudorangeObservation>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |message: String| IoError::Parse {
            source_name: source_name.to_owned(),
            line: i + 1,
            message,
        };
        let record: ObservationRecord = serde_json::from_str(&line).map_err(|e| parse_error(e.to_string()))?;
        out.push(record.to_observation().map_err(parse_error)?);
    }
    Ok(out)
}

pub fn write_observations(mut writer: impl Write, records: &[ObservationRecord]) -> Result<(), IoError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_truth_csv(w: impl Write, truth: &[TimedState]) -> Result<(), IoError> {
    let mut csv = csv_writer(w);
    csv.write_record(["t", "x", "y", "z", "clock", "tropo"])?;
    for s in truth {
        let p = s.state.position;
        csv.write_record([s.t, p.x, p.y, p.z, s.state.clock_bias, s.state.zenith_tropo].map(fmt))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_truth_csv(r: impl std::io::Read) -> Result<Vec<TimedState>, IoError> {
    let mut csv = csv::ReaderBuilder::new().from_reader(r);
    let headers = csv.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "x", "y", "z", "clock", "tropo"] {
        return Err(IoError::Parse {
            source_name: "truth".into(),
            line: 1,
            message: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for record in csv.deserialize() {
        let (t, x, y, z, clock, tropo): (f64, f64, f64, f64, f64, f64) = record?;
        out.push(TimedState {
            t,
            state: EpochState::new(Vector3::new(x, y, z), clock, tropo),
        });
    }
    Ok(out)
}

/// One row per observation: `t,sat,faulted,offset`.
pub fn write_faults_csv(
    w: impl Write,
    observations: &[PseudorangeObservation],
    mask: &[bool],
    offsets: &[f64],
) -> Result<(), IoError> {
    let mut csv = csv_writer(w);
    csv.write_record(["t", "sat", "faulted", "offset"])?;
    for ((o, m), d) in observations.iter().zip(mask).zip(offsets) {
        csv.write_record([fmt(o.epoch), o.sat.sat_id.clone(), m.to_string(), fmt(*d)])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_estimate_csv(w: impl Write, estimate: &Estimate) -> Result<(), IoError> {
    let with_switch = estimate.epochs.iter().any(|e| e.mean_switch.is_some());
    let mut csv = csv_writer(w);
    let mut header = vec!["t", "x", "y", "z", "clock", "tropo", "n_sats", "converged"];
    if with_switch {
        header.push("mean_switch");
    }
    csv.write_record(&header)?;
    let converged = estimate.report.converged.to_string();
    for e in &estimate.epochs {
        let p = e.state.position;
        let mut row: Vec<String> = [e.t, p.x, p.y, p.z, e.state.clock_bias, e.state.zenith_tropo]
            .map(fmt)
            .into();
        row.push(e.n_sats.to_string());
        row.push(converged.clone());
        if with_switch {
            row.push(e.mean_switch.map(fmt).unwrap_or_default());
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_iterations_csv(w: impl Write, log: &[IterationRecord]) -> Result<(), IoError> {
    let mut csv = csv_writer(w);
    csv.write_record(["iteration", "lambda", "total_error", "accepted"])?;
    for r in log {
        csv.write_record([r.iteration.to_string(), fmt(r.lambda), fmt(r.total_error), r.accepted.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_rsos_csv(w: impl Write, times: &[f64], rsos: &[f64]) -> Result<(), IoError> {
    let mut csv = csv_writer(w);
    csv.write_record(["t", "rsos"])?;
    for (t, e) in times.iter().zip(rsos) {
        csv.write_record([fmt(*t), fmt(*e)])?;
    }
    csv.flush()?;
    Ok(())
}

/// `scheme,p,median,mean,max,divergences`; statistics are empty when every
/// trial of the cell diverged.
pub fn write_sweep_csv(w: impl Write, results: &[SweepResult]) -> Result<(), IoError> {
    let mut csv = csv_writer(w);
    csv.write_record(["scheme", "p", "median", "mean", "max", "divergences"])?;
    for r in results {
        for c in &r.cells {
            let (median, mean, max) = match c.stats {
                Some(s) => (fmt(s.median), fmt(s.mean), fmt(s.max)),
                None => Default::default(),
            };
            csv.write_record([
                r.scheme.name().to_owned(),
                fmt(c.p),
                median,
                mean,
                max,
                c.divergences.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

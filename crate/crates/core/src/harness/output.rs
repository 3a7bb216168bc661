//! CSV files written by `run` and read back by `report`.
//!
//! Layout of an output directory for one environment:
//!
//! ```text
//! raw.csv            rep,alg,t,choice,reward,inst_regret,cum_regret
//! summary.csv        env,alg,reps,mean_regret,std_regret,relative_regret,top_rate
//! curves/<ALG>.csv   t,mean,std
//! regret.svg
//! ```
//!
//! Experiments over several environments put one such directory per
//! environment under the output root and a combined `summary.csv` beside
//! them.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Algorithm, RunResult};

use super::metrics::{mean_curve, FinalRegret, SummaryTable};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub rep: u64,
    pub alg: Algorithm,
    pub t: usize,
    pub choice: usize,
    pub reward: f64,
    pub inst_regret: f64,
    pub cum_regret: f64,
}

pub fn raw_rows(runs: &[RunResult]) -> impl Iterator<Item = RawRow> + '_ {
    runs.iter().flat_map(|run| {
        run.records.iter().map(move |r| RawRow {
            rep: run.rep,
            alg: run.algorithm,
            t: r.t,
            choice: r.choice,
            reward: r.reward,
            inst_regret: r.inst_regret,
            cum_regret: r.cum_regret,
        })
    })
}

pub fn write_raw<W: Write>(runs: &[RunResult], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for row in raw_rows(runs) {
        out.serialize(row)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_raw<R: Read>(r: R) -> Result<Vec<RawRow>, HarnessError> {
    csv::Reader::from_reader(r).deserialize().collect::<Result<Vec<RawRow>, _>>().map_err(HarnessError::from)
}

pub fn read_raw_file(path: &Path) -> Result<Vec<RawRow>, HarnessError> {
    read_raw(File::open(path).map_err(HarnessError::io(path))?)
}

/// Cumulative-regret curve of every `(algorithm, repetition)`, checking that
/// each one covers rounds `1..=T` in order.
pub fn curves_from_raw(rows: &[RawRow]) -> Result<Vec<(Algorithm, u64, Vec<f64>)>, HarnessError> {
    let mut out: Vec<(Algorithm, u64, Vec<f64>)> = Vec::new();
    for row in rows {
        let fresh = match out.last() {
            Some((a, r, _)) => (*a, *r) != (row.alg, row.rep),
            None => true,
        };
        if fresh {
            if out.iter().any(|(a, r, _)| (*a, *r) == (row.alg, row.rep)) {
                return Err(HarnessError::Malformed(format!(
                    "rows of {} repetition {} are not contiguous",
                    row.alg, row.rep
                )));
            }
            out.push((row.alg, row.rep, Vec::new()));
        }
        let curve = &mut out.last_mut().expect("pushed above").2;
        if row.t != curve.len() + 1 {
            return Err(HarnessError::Malformed(format!(
                "{} repetition {}: expected round {}, found {}",
                row.alg,
                row.rep,
                curve.len() + 1,
                row.t
            )));
        }
        curve.push(row.cum_regret);
    }
    if out.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    Ok(out)
}

/// Final regret of every run listed in a raw CSV.
pub fn final_regrets_from_raw(rows: &[RawRow], env: &str) -> Result<Vec<FinalRegret>, HarnessError> {
    Ok(curves_from_raw(rows)?
        .into_iter()
        .map(|(algorithm, rep, c)| FinalRegret {
            env: env.to_string(),
            rep,
            algorithm,
            regret: c.last().copied().unwrap_or(0.0),
        })
        .collect())
}

pub fn final_regrets(runs: &[RunResult], env: &str) -> Vec<FinalRegret> {
    runs.iter()
        .map(|r| FinalRegret { env: env.to_string(), rep: r.rep, algorithm: r.algorithm, regret: r.final_regret() })
        .collect()
}

pub fn write_summary<W: Write>(table: &SummaryTable, w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for row in &table.rows {
        out.serialize(row)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_summary<R: Read>(r: R) -> Result<SummaryTable, HarnessError> {
    let rows = csv::Reader::from_reader(r).deserialize().collect::<Result<Vec<_>, _>>()?;
    Ok(SummaryTable { rows })
}

/// Mean and standard deviation of cumulative regret per round for one
/// algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub algorithm: Algorithm,
    pub points: Vec<(f64, f64)>,
}

/// One curve per algorithm, in algorithm order.
pub fn regret_curves(runs: &[RunResult]) -> Result<Vec<Curve>, HarnessError> {
    let mut algs: Vec<Algorithm> = runs.iter().map(|r| r.algorithm).collect();
    algs.sort();
    algs.dedup();
    algs.into_iter()
        .map(|algorithm| {
            let mut own: Vec<&RunResult> = runs.iter().filter(|r| r.algorithm == algorithm).collect();
            own.sort_by_key(|r| r.rep);
            let cum: Vec<Vec<f64>> = own.iter().map(|r| r.records.iter().map(|x| x.cum_regret).collect()).collect();
            let refs: Vec<&[f64]> = cum.iter().map(Vec::as_slice).collect();
            Ok(Curve { algorithm, points: mean_curve(&refs)? })
        })
        .collect()
}

pub fn write_curve<W: Write>(curve: &Curve, w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "mean", "std"])?;
    for (i, (m, s)) in curve.points.iter().enumerate() {
        out.serialize((i + 1, m, s))?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(HarnessError::io(path))?))
}

/// Writes raw rows, curves and the chart of one environment into `dir`.
pub fn write_env_dir(dir: &Path, runs: &[RunResult]) -> Result<Vec<Curve>, HarnessError> {
    write_raw(runs, create(&dir.join("raw.csv"))?)?;
    let curves = regret_curves(runs)?;
    for c in &curves {
        write_curve(c, create(&dir.join("curves").join(format!("{}.csv", c.algorithm)))?)?;
    }
    let svg = super::plot::regret_svg(&curves, "Cumulative regret");
    let path = dir.join("regret.svg");
    create(&path)?.write_all(svg.as_bytes()).map_err(HarnessError::io(&path))?;
    Ok(curves)
}

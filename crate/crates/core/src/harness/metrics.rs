//! Aggregate statistics over finished runs.
//!
//! Every function sorts its input by `(environment, algorithm, repetition)`
//! before summing, so the results do not depend on the order in which runs
//! finished and recompute bit-for-bit from a raw CSV.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::env::Algorithm;

use super::HarnessError;

/// Final cumulative regret of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalRegret {
    pub env: String,
    pub rep: u64,
    pub algorithm: Algorithm,
    pub regret: f64,
}

/// Mean and population standard deviation (divisor `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sorted(rows: &[FinalRegret]) -> Vec<&FinalRegret> {
    let mut v: Vec<&FinalRegret> = rows.iter().collect();
    v.sort_by(|a, b| (&a.env, a.algorithm, a.rep).cmp(&(&b.env, b.algorithm, b.rep)));
    v
}

fn regrets_by_env_alg(rows: &[FinalRegret]) -> BTreeMap<&str, BTreeMap<Algorithm, Vec<f64>>> {
    let mut out: BTreeMap<&str, BTreeMap<Algorithm, Vec<f64>>> = BTreeMap::new();
    for r in sorted(rows) {
        out.entry(r.env.as_str()).or_default().entry(r.algorithm).or_default().push(r.regret);
    }
    out
}

/// Mean final regret of each algorithm divided by the largest mean in its
/// environment. When every algorithm has zero regret all of them get 1.
pub fn relative_regret(rows: &[FinalRegret]) -> Result<BTreeMap<String, BTreeMap<Algorithm, f64>>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    let mut out = BTreeMap::new();
    for (env, algs) in regrets_by_env_alg(rows) {
        let means: BTreeMap<Algorithm, f64> = algs.iter().map(|(&a, v)| (a, mean_std(v).0)).collect();
        let max = means.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let rel = means.into_iter().map(|(a, m)| (a, if max > 0.0 { m / max } else { 1.0 })).collect();
        out.insert(env.to_string(), rel);
    }
    Ok(out)
}

/// Fraction of `(environment, repetition)` trials in which each algorithm's
/// final regret has competition rank at most 2 (one plus the number of
/// strictly smaller regrets).
pub fn top_rate(rows: &[FinalRegret]) -> Result<BTreeMap<Algorithm, f64>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    let mut trials: BTreeMap<(&str, u64), Vec<(Algorithm, f64)>> = BTreeMap::new();
    for r in sorted(rows) {
        trials.entry((r.env.as_str(), r.rep)).or_default().push((r.algorithm, r.regret));
    }
    let mut hits: BTreeMap<Algorithm, (usize, usize)> = BTreeMap::new();
    for entries in trials.values() {
        let distinct: BTreeSet<Algorithm> = entries.iter().map(|e| e.0).collect();
        if distinct.len() < 2 {
            return Err(HarnessError::FewerThanTwoAlgorithms(distinct.len()));
        }
        for &(a, r) in entries {
            let rank = 1 + entries.iter().filter(|&&(_, other)| other < r).count();
            let slot = hits.entry(a).or_insert((0, 0));
            slot.1 += 1;
            if rank <= 2 {
                slot.0 += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|(a, (k, n))| (a, k as f64 / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub alg: Algorithm,
    pub reps: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
    pub relative_regret: f64,
    /// Absent when fewer than two algorithms ran.
    pub top_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn get(&self, env: &str, alg: Algorithm) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.env == env && r.alg == alg)
    }
}

/// One row per `(environment, algorithm)`.
pub fn summarize(rows: &[FinalRegret]) -> Result<SummaryTable, HarnessError> {
    let rel = relative_regret(rows)?;
    let algs: BTreeSet<Algorithm> = rows.iter().map(|r| r.algorithm).collect();
    let rates = if algs.len() >= 2 { Some(top_rate(rows)?) } else { None };
    let mut out = Vec::new();
    for (env, by_alg) in regrets_by_env_alg(rows) {
        for (alg, values) in by_alg {
            let (mean, std) = mean_std(&values);
            out.push(SummaryRow {
                env: env.to_string(),
                alg,
                reps: values.len(),
                mean_regret: mean,
                std_regret: std,
                relative_regret: rel[env][&alg],
                top_rate: rates.as_ref().map(|r| r[&alg]),
            });
        }
    }
    Ok(SummaryTable { rows: out })
}

/// Column-wise mean and population standard deviation of equally long
/// curves.
pub fn mean_curve(curves: &[&[f64]]) -> Result<Vec<(f64, f64)>, HarnessError> {
    let len = curves.first().ok_or(HarnessError::EmptyResults)?.len();
    if curves.iter().any(|c| c.len() != len) {
        return Err(HarnessError::Malformed("curves have different lengths".into()));
    }
    let mut column = vec![0.0; curves.len()];
    Ok((0..len)
        .map(|t| {
            for (slot, c) in column.iter_mut().zip(curves) {
                *slot = c[t];
            }
            mean_std(&column)
        })
        .collect())
}

//! Ranking experiments on aggregated metrics (lower is better).

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::Serialize;

use super::table::RunRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FinalResidual,
    /// Last recorded `k`; runs stop at tolerance, so this is iterations-to-tol.
    Iterations,
    /// Area under `ln residual` over the recorded `k` (trapezoid).
    Auc,
    FinalDist,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_residual" => Ok(Metric::FinalResidual),
            "iterations" => Ok(Metric::Iterations),
            "auc" => Ok(Metric::Auc),
            "final_dist" => Ok(Metric::FinalDist),
            _ => Err(Error::UnknownName { kind: "metric", name: s.into() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranking {
    pub rank: usize,
    pub experiment_id: String,
    /// Mean over seeds; infinite when any seed failed.
    pub value: f64,
    pub seeds: usize,
}

fn run_value(rows: &[&RunRecord], metric: Metric) -> f64 {
    let ok: Vec<_> = rows.iter().filter(|r| r.error.is_none() && r.k.is_some()).collect();
    if ok.len() < rows.len() {
        return f64::INFINITY;
    }
    let Some(last) = ok.last() else { return f64::INFINITY };
    match metric {
        Metric::FinalResidual => last.bellman_residual_inf.unwrap_or(f64::INFINITY),
        Metric::FinalDist => last.dist_to_opt_inf.unwrap_or(f64::INFINITY),
        Metric::Iterations => last.k.unwrap_or(0) as f64,
        Metric::Auc => {
            let ln = |r: &RunRecord| r.bellman_residual_inf.unwrap_or(f64::INFINITY).max(f64::MIN_POSITIVE).ln();
            ok.windows(2)
                .map(|w| (w[1].k.unwrap() - w[0].k.unwrap()) as f64 * 0.5 * (ln(w[0]) + ln(w[1])))
                .sum()
        }
    }
}

/// Ranks `ids` (all experiments when empty). Ties go to the smaller id.
pub fn compare(records: &[RunRecord], ids: &[String], metric: Metric) -> Result<Vec<Ranking>> {
    let mut runs: BTreeMap<&str, BTreeMap<u64, Vec<&RunRecord>>> = BTreeMap::new();
    for r in records {
        runs.entry(&r.experiment_id).or_default().entry(r.seed).or_default().push(r);
    }
    let wanted: Vec<&str> = if ids.is_empty() {
        runs.keys().copied().collect()
    } else {
        for id in ids {
            if !runs.contains_key(id.as_str()) {
                return Err(Error::UnknownExperiment(id.clone()));
            }
        }
        let mut v: Vec<&str> = ids.iter().map(String::as_str).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut table: Vec<Ranking> = wanted
        .into_iter()
        .map(|id| {
            let seeds = &runs[id];
            let total: f64 = seeds.values().map(|rows| run_value(rows, metric)).sum();
            Ranking { rank: 0, experiment_id: id.to_string(), value: total / seeds.len() as f64, seeds: seeds.len() }
        })
        .collect();
    table.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.experiment_id.cmp(&b.experiment_id)));
    for (i, row) in table.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    Ok(table)
}

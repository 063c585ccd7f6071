//! CSV form of run records.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::batch::RunOutcome;
use crate::error::Result;

pub const COLUMNS: [&str; 9] = [
    "experiment_id",
    "seed",
    "k",
    "bellman_residual_inf",
    "dist_to_opt_inf",
    "inner_backtracks",
    "safeguard_rejections",
    "wall_ns",
    "error",
];

/// One CSV row. Error rows leave the numeric columns empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment_id: String,
    pub seed: u64,
    pub k: Option<usize>,
    pub bellman_residual_inf: Option<f64>,
    pub dist_to_opt_inf: Option<f64>,
    pub inner_backtracks: Option<usize>,
    pub safeguard_rejections: Option<usize>,
    pub wall_ns: Option<u64>,
    pub error: Option<String>,
}

/// Shortest round-trip form is not byte-stable across formatters, so every
/// float is written with 17 significant digits.
fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv<W: Write>(outcomes: &[RunOutcome], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(COLUMNS)?;
    for o in outcomes {
        let seed = o.seed.to_string();
        match &o.result {
            Ok(trace) => {
                for r in &trace.records {
                    w.write_record([
                        o.experiment_id.as_str(),
                        &seed,
                        &r.k.to_string(),
                        &float(r.residual),
                        &float(r.dist_to_opt),
                        &r.inner_backtracks.to_string(),
                        &r.safeguard_rejections.to_string(),
                        &r.wall_ns.to_string(),
                        "",
                    ])?;
                }
            }
            Err(msg) => w.write_record([o.experiment_id.as_str(), &seed, "", "", "", "", "", "", msg])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(outcomes: &[RunOutcome]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(outcomes, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

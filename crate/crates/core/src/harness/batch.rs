//! Parallel execution of a batch.

use std::path::Path;

use rayon::prelude::*;

use super::config::{Batch, ExperimentConfig, Plan, SafeguardKind};
use crate::error::{Error, Result};
use crate::mdp::{q_from_v, solve_optimal, QFunction, TabularMdp, ValueFunction};
use crate::model_based::run_model_based;
use crate::model_free::run_model_free;
use crate::problems::SeededStream;
use crate::record::RunTrace;
use crate::safeguards::{b_provider, backtracked_run_vi, safeguarded_run_ql, safeguarded_run_vi, v_provider};

/// Outcome of one `(experiment, seed)` job.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub experiment_id: String,
    pub seed: u64,
    pub result: std::result::Result<RunTrace, String>,
}

/// Exact optimum for distance columns: the solver oracle when discounted,
/// value iteration to a fixed point on flagged undiscounted problems.
pub fn reference_optimum(mdp: &TabularMdp) -> Option<(ValueFunction, QFunction)> {
    if mdp.gamma() < 1.0 {
        return solve_optimal(mdp).ok().map(|s| (s.v, s.q));
    }
    if !mdp.is_undiscounted_safe() {
        return None;
    }
    let mut v = ValueFunction::zeros(mdp.n());
    for _ in 0..1_000_000 {
        let tv = mdp.backup(v.as_slice());
        if tv == v {
            let q = q_from_v(mdp, &v);
            return Some((v, q));
        }
        if (&tv - &v).amax() <= 1e-14 * tv.amax().max(1.0) {
            let q = q_from_v(mdp, &tv);
            return Some((tv, q));
        }
        v = tv;
    }
    None
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, master_seed: u64, base_dir: Option<&Path>) -> Result<RunTrace> {
    let mdp = cfg.problem.build(base_dir)?;
    let optimum = reference_optimum(&mdp);
    let mut stream = SeededStream::for_run(master_seed, &cfg.experiment_id, seed);
    let v0 = ValueFunction::zeros(mdp.n());
    let q0 = QFunction::zeros(mdp.n(), mdp.m());
    let ov = optimum.as_ref().map(|o| &o.0);
    let oq = optimum.as_ref().map(|o| &o.1);
    match cfg.plan()? {
        Plan::ModelBased(c) => run_model_based(&mdp, &c, &v0, ov),
        Plan::ModelFree(c) => {
            if mdp.gamma() >= 1.0 {
                return Err(Error::UndiscountedUnsupported(c.algorithm.name()));
            }
            run_model_free(&mdp, &c, &q0, &mut stream, oq)
        }
        Plan::GuardedVi { kind, provider, base, guard } => {
            let mut p = v_provider(&provider, &base, &stream)?;
            match kind {
                SafeguardKind::Envelope => safeguarded_run_vi(&mdp, p.as_mut(), &guard, &v0, ov),
                _ => backtracked_run_vi(&mdp, p.as_mut(), &guard, &v0, ov),
            }
        }
        Plan::GuardedQl { provider, guard } => {
            let mut p = b_provider(&provider, &stream)?;
            safeguarded_run_ql(&mdp, p.as_mut(), &guard, &q0, &mut stream, oq)
        }
    }
}

/// Runs every `(experiment, seed)` pair on `workers` threads. The result is
/// sorted by `(experiment_id, seed)` and does not depend on `workers`.
pub fn run_batch(batch: &Batch, workers: usize) -> Result<Vec<RunOutcome>> {
    let jobs: Vec<(&ExperimentConfig, u64)> =
        batch.experiments.iter().flat_map(|e| e.seeds.iter().map(move |&s| (e, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let base = batch.base_dir.as_deref();
    let mut out: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cfg, seed)| RunOutcome {
                experiment_id: cfg.experiment_id.clone(),
                seed,
                result: run_experiment(cfg, seed, batch.master_seed, base).map_err(|e| e.to_string()),
            })
            .collect()
    });
    out.sort_by(|a, b| (a.experiment_id.as_str(), a.seed).cmp(&(b.experiment_id.as_str(), b.seed)));
    Ok(out)
}

//! Self-checks behind the `verify` command: the optimization/control
//! pairings in lockstep, and the convergence guarantees on small models.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::duality::{lockstep_equivalence_check, EquivalencePair};
use crate::error::{Error, Result};
use crate::fixtures::{m2, m2s};
use crate::mdp::{jacobian_t, smoothed_bellman_q, bellman_q_exact, QFunction, SmoothingKind, TabularMdp, ValueFunction};
use crate::model_based::{rank_one_solve, run_model_based, MbAlgorithm, MbConfig};
use crate::problems::{generate, GeneratorSpec, SeededStream};
use crate::safeguards::{b_provider, backtracked_run_vi, safeguarded_run_ql, safeguarded_run_vi, v_provider, SafeguardConfig};
use crate::schedule::Schedule;
use crate::solve_optimal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Equivalence,
    Theorems,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Theorems => "theorems",
        }
    }
}

/// One row of the verification table; passes iff `value <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Set when the check could not run.
    pub error: Option<String>,
}

impl CheckResult {
    fn new(suite: Suite, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckResult { suite: suite.name(), name: name.into(), value, threshold, passed: value <= threshold, error: None }
    }

    fn failed(suite: Suite, name: impl Into<String>, err: &Error) -> Self {
        CheckResult {
            suite: suite.name(),
            name: name.into(),
            value: f64::INFINITY,
            threshold: 0.0,
            passed: false,
            error: Some(err.to_string()),
        }
    }
}

const VERIFY_SEED: u64 = 20_240_601;

fn lockstep_models() -> Vec<(&'static str, TabularMdp)> {
    vec![
        ("m2", m2()),
        ("m2s", m2s()),
        ("garnet20", generate(&GeneratorSpec::garnet(20, 4, 3, 0.9, 1)).expect("valid spec")),
    ]
}

pub fn equivalence_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (label, mdp) in lockstep_models() {
        for pair in EquivalencePair::ALL {
            let name = format!("{}/{label}", pair.name());
            out.push(match lockstep_equivalence_check(pair, &mdp, pair.default_steps(), None) {
                Ok(r) => CheckResult::new(Suite::Equivalence, name, r.max_gap, r.tolerance),
                Err(e) => CheckResult::failed(Suite::Equivalence, name, &e),
            });
        }
    }
    out
}

fn envelope_check(label: &str, mdp: &TabularMdp, seeds: u64) -> Result<CheckResult> {
    let cfg = SafeguardConfig { gamma_prime: 0.95, max_iter: 200, tol: 1e-300, ..SafeguardConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let stream = SeededStream::for_run(VERIFY_SEED, "envelope", seed);
        let mut p = v_provider("random", &MbConfig::new(MbAlgorithm::Vi), &stream)?;
        let t = safeguarded_run_vi(mdp, p.as_mut(), &cfg, &DVector::zeros(mdp.n()), None)?;
        for r in &t.records {
            let bound = 0.95f64.powi(r.k as i32) * t.initial_residual;
            worst = worst.max(r.residual / bound);
        }
    }
    Ok(CheckResult::new(Suite::Theorems, format!("safeguard_envelope/{label}"), worst, 1.0))
}

fn backtracking_checks() -> Result<Vec<CheckResult>> {
    let mdp = m2();
    let cfg = SafeguardConfig { gamma_prime: 0.8, lambda: 0.5, max_iter: 200, ..SafeguardConfig::default() };
    let mut backtracks = 0;
    let mut ratio: f64 = 0.0;
    for name in ["random", "acc_vi", "pid_vi", "aa_vi"] {
        for seed in 0..3 {
            let stream = SeededStream::for_run(VERIFY_SEED, "backtracking", seed);
            let mut p = v_provider(name, &MbConfig::new(MbAlgorithm::Vi), &stream)?;
            let t = backtracked_run_vi(&mdp, p.as_mut(), &cfg, &DVector::zeros(2), None)?;
            let mut prev = t.initial_residual;
            for r in &t.records {
                backtracks = backtracks.max(r.inner_backtracks);
                ratio = ratio.max(r.residual / prev);
                prev = r.residual;
            }
        }
    }
    Ok(vec![
        CheckResult::new(Suite::Theorems, "backtracking_inner_steps/m2", backtracks as f64, 5.0),
        CheckResult::new(Suite::Theorems, "backtracking_ratio/m2", ratio, 0.8),
    ])
}

fn perturbed_ql_check(steps: usize) -> Result<CheckResult> {
    let mdp = m2s();
    let q_star = solve_optimal(&mdp)?.q;
    let cfg = SafeguardConfig {
        alpha: Schedule::power(0.75),
        beta: Schedule::power(0.25),
        rho: 1.0,
        max_iter: steps,
        eval_period: steps,
        ..SafeguardConfig::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut stream = SeededStream::for_run(VERIFY_SEED, "perturbed_ql", seed);
        let mut p = b_provider("sql", &stream)?;
        let t = safeguarded_run_ql(&mdp, p.as_mut(), &cfg, &QFunction::zeros(2, 2), &mut stream, Some(&q_star))?;
        worst = worst.max(t.records.last().map_or(f64::INFINITY, |r| r.dist_to_opt));
    }
    Ok(CheckResult::new(Suite::Theorems, "perturbed_ql_distance/m2s", worst, 0.05))
}

/// Central differences of `T`; exact up to rounding where the greedy
/// margin exceeds the step.
pub fn finite_difference_jacobian(mdp: &TabularMdp, v: &ValueFunction, h: f64) -> DMatrix<f64> {
    let n = mdp.n();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut up = v.clone();
        let mut down = v.clone();
        up[j] += h;
        down[j] -= h;
        let col = (mdp.backup(up.as_slice()) - mdp.backup(down.as_slice())) / (2.0 * h);
        out.set_column(j, &col);
    }
    out
}

fn jacobian_check() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut stream = SeededStream::for_run(VERIFY_SEED, "jacobian", 0);
    for model in 0..5u64 {
        let mdp = generate(&GeneratorSpec::garnet(8, 3, 3, 0.9, 100 + model))?;
        let mut found = 0;
        while found < 4 {
            let v = stream.uniform_vector(mdp.n(), -5.0, 5.0);
            let jac = jacobian_t(&mdp, &v)?;
            if jac.margin <= 1e-3 {
                continue;
            }
            worst = worst.max((finite_difference_jacobian(&mdp, &v, 1e-6) - jac.matrix).amax());
            found += 1;
        }
    }
    Ok(CheckResult::new(Suite::Theorems, "jacobian_finite_difference", worst, 1e-6))
}

fn pi_check() -> Result<CheckResult> {
    let mdp = generate(&GeneratorSpec::garnet(50, 5, 3, 0.9, 3))?;
    let t = run_model_based(&mdp, &MbConfig::new(MbAlgorithm::Pi).with_max_iter(20), &DVector::zeros(50), None)?;
    let value = if t.final_residual() == 0.0 { t.records.len() as f64 } else { f64::INFINITY };
    Ok(CheckResult::new(Suite::Theorems, "policy_iteration_steps/garnet50", value, 20.0))
}

fn rank_one_check() -> Result<CheckResult> {
    let mut stream = SeededStream::for_run(VERIFY_SEED, "rank_one", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 6;
        let raw = stream.uniform_vector(n, 0.0, 1.0);
        let w = &raw / raw.sum();
        let g = stream.uniform_vector(n, -1.0, 1.0);
        let gamma = 0.9;
        let dense = DMatrix::identity(n, n) - DMatrix::from_element(n, 1, 1.0) * w.transpose() * gamma;
        let reference = dense.lu().solve(&g).ok_or_else(|| Error::SingularSystem("rank-one reference".into()))?;
        worst = worst.max((rank_one_solve(&g, &w, gamma)? - reference).amax());
    }
    Ok(CheckResult::new(Suite::Theorems, "rank_one_closed_form", worst, 1e-10))
}

fn sandwich_check() -> Result<Vec<CheckResult>> {
    let mut stream = SeededStream::for_run(VERIFY_SEED, "sandwich", 0);
    let mut violation: f64 = 0.0;
    for i in 0..50u64 {
        let mdp = generate(&GeneratorSpec::garnet(6, 3, 2, 0.9, 200 + i))?;
        let q = QFunction::from_vector(6, 3, stream.uniform_vector(18, -3.0, 3.0))?;
        let temp = 0.1 + 20.0 * stream.next_uniforms(1)[0];
        let slack = mdp.gamma() * (3f64).ln() / temp;
        let exact = bellman_q_exact(&mdp, &q)?;
        let soft = smoothed_bellman_q(&mdp, &q, SmoothingKind::Softmin, temp)?;
        let mellow = smoothed_bellman_q(&mdp, &q, SmoothingKind::Mellowmin, temp)?;
        for j in 0..18 {
            let (t, s, m) = (exact.as_slice()[j], soft.as_slice()[j], mellow.as_slice()[j]);
            violation = violation.max((t - slack) - s).max(s - t).max(t - m).max(m - (t + slack));
        }
    }
    let mdp = generate(&GeneratorSpec::garnet(6, 3, 2, 0.9, 999))?;
    let q = QFunction::from_vector(6, 3, stream.uniform_vector(18, -3.0, 3.0))?;
    let exact = bellman_q_exact(&mdp, &q)?;
    let mut gap: f64 = 0.0;
    for kind in [SmoothingKind::Softmin, SmoothingKind::Mellowmin] {
        gap = gap.max((smoothed_bellman_q(&mdp, &q, kind, 1e6)?.as_vector() - exact.as_vector()).amax());
    }
    Ok(vec![
        CheckResult::new(Suite::Theorems, "smoothing_sandwich_violation", violation, 1e-12),
        CheckResult::new(Suite::Theorems, "smoothing_gap_at_high_temperature", gap, 1e-5),
    ])
}

fn anchored_check() -> Result<CheckResult> {
    let mdp = generate(&GeneratorSpec::absorbing_chain(20, 1.0))?;
    let cfg = MbConfig::new(MbAlgorithm::AncVi).with_max_iter(1000).with_tol(1e-300);
    let t = run_model_based(&mdp, &cfg, &DVector::zeros(20), None)?;
    let at = |k: usize| t.records.iter().find(|r| r.k == k).map(|r| r.k as f64 * r.residual);
    let base = at(10).ok_or_else(|| Error::InsufficientData("anchored run stopped before k = 10".into()))?;
    let worst = t.records.iter().filter(|r| r.k >= 10).map(|r| r.k as f64 * r.residual).fold(0.0, f64::max);
    Ok(CheckResult::new(Suite::Theorems, "anchored_k_residual/absorbing_chain20", worst / base, 2.0))
}

pub fn theorems_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<Vec<CheckResult>>| match r {
        Ok(rows) => out.extend(rows),
        Err(e) => out.push(CheckResult::failed(Suite::Theorems, name, &e)),
    };
    let garnet = generate(&GeneratorSpec::garnet(20, 4, 3, 0.9, 1));
    push("safeguard_envelope/m2", envelope_check("m2", &m2(), 5).map(|c| vec![c]));
    push("safeguard_envelope/garnet20", garnet.and_then(|g| envelope_check("garnet20", &g, 5)).map(|c| vec![c]));
    push("backtracking/m2", backtracking_checks());
    push("perturbed_ql_distance/m2s", perturbed_ql_check(200_000).map(|c| vec![c]));
    push("jacobian_finite_difference", jacobian_check().map(|c| vec![c]));
    push("policy_iteration_steps/garnet50", pi_check().map(|c| vec![c]));
    push("rank_one_closed_form", rank_one_check().map(|c| vec![c]));
    push("smoothing", sandwich_check());
    push("anchored_k_residual/absorbing_chain20", anchored_check().map(|c| vec![c]));
    out
}

pub fn run_suites(suites: &[Suite]) -> Vec<CheckResult> {
    suites
        .iter()
        .flat_map(|s| match s {
            Suite::Equivalence => equivalence_suite(),
            Suite::Theorems => theorems_suite(),
        })
        .collect()
}

/// `suite,name,value,threshold,passed,error` with 17-digit floats.
pub fn results_csv(rows: &[CheckResult]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["suite", "name", "value", "threshold", "passed", "error"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.suite.to_string(),
            r.name.clone(),
            format!("{:.16e}", r.value),
            format!("{:.16e}", r.threshold),
            r.passed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

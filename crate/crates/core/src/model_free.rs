//! Sample-driven solvers of the form `q_{k+1} = q_k + d_k`.
//!
//! Each iteration draws one synchronous next-state sample per pair (a batch
//! of them for HQL). Directions are built from the sampled residual
//! `g = q - T^(q, sample)`; exact diagnostics are measurement-only.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{
    bellman_q_exact, sampled_backup, sampled_transition_matrix, smoothed_bellman_q_sampled,
    NextStateSample, QFunction, SmoothingKind, TabularMdp,
};
use crate::model_based::PidGains;
use crate::problems::{sample_next_states, SeededStream};
use crate::record::{IterRecord, RunTrace, Stopwatch};
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfAlgorithm {
    Ql,
    /// Speedy QL with its fixed schedules.
    Sql,
    /// The speedy update with user coefficients.
    MomQl,
    Hql,
    PidQl,
    Zql,
    SaaQl,
    R1Ql,
}

impl MfAlgorithm {
    pub const ALL: [MfAlgorithm; 8] = [
        MfAlgorithm::Ql,
        MfAlgorithm::Sql,
        MfAlgorithm::MomQl,
        MfAlgorithm::Hql,
        MfAlgorithm::PidQl,
        MfAlgorithm::Zql,
        MfAlgorithm::SaaQl,
        MfAlgorithm::R1Ql,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MfAlgorithm::Ql => "ql",
            MfAlgorithm::Sql => "sql",
            MfAlgorithm::MomQl => "mom_ql",
            MfAlgorithm::Hql => "hql",
            MfAlgorithm::PidQl => "pid_ql",
            MfAlgorithm::Zql => "zql",
            MfAlgorithm::SaaQl => "saa_ql",
            MfAlgorithm::R1Ql => "r1_ql",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub kind: SmoothingKind,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfConfig {
    pub algorithm: MfAlgorithm,
    /// Learning rate. `None` picks the algorithm default.
    pub alpha: Option<Schedule>,
    /// Momentum, anchor, gain-averaging or SAA step weight.
    pub beta: Option<Schedule>,
    /// Previous-direction weight (speedy family) or SAA regularization.
    pub delta: Option<Schedule>,
    /// PID smoothing rate of the derivative reference.
    pub eta: Schedule,
    pub gains: PidGains,
    /// Samples averaged per HQL iteration.
    pub batch: usize,
    pub memory: usize,
    pub ridge: f64,
    pub power_iters: usize,
    pub power_tol: f64,
    /// Optional smoothed backup for SAA-QL.
    pub smoothing: Option<Smoothing>,
    pub max_iter: usize,
    pub eval_period: usize,
    pub timing: bool,
}

impl MfConfig {
    pub fn new(algorithm: MfAlgorithm) -> Self {
        MfConfig {
            algorithm,
            alpha: None,
            beta: None,
            delta: None,
            eta: Schedule::Constant(0.05),
            gains: PidGains::default(),
            batch: 1,
            memory: 5,
            ridge: 1e-8,
            power_iters: 10,
            power_tol: 1e-10,
            smoothing: None,
            max_iter: 1000,
            eval_period: 1,
            timing: false,
        }
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_alpha(mut self, alpha: Schedule) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_beta(mut self, beta: Schedule) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_delta(mut self, delta: Schedule) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn with_eval_period(mut self, period: usize) -> Self {
        self.eval_period = period;
        self
    }

    /// Learning rate, momentum/anchor weight and auxiliary weight in force.
    pub fn schedules(&self) -> (Schedule, Schedule, Schedule) {
        use MfAlgorithm::*;
        let rm = Schedule::power(0.75);
        let (alpha, beta, delta) = match self.algorithm {
            Sql => return (Schedule::Harmonic, Schedule::SqlMomentum, Schedule::SqlMomentum),
            Ql | R1Ql => (rm, Schedule::Constant(0.0), Schedule::Constant(0.0)),
            MomQl => (rm, Schedule::Constant(0.0), Schedule::Constant(0.0)),
            Hql => (Schedule::Constant(1.0), Schedule::Anchor, Schedule::Constant(0.0)),
            PidQl => (Schedule::Constant(1.0), Schedule::Constant(0.95), Schedule::Constant(0.0)),
            Zql => (Schedule::power(0.85), Schedule::Harmonic, Schedule::Constant(0.0)),
            SaaQl => (Schedule::Constant(1.0), rm, Schedule::Constant(1e-4)),
        };
        (self.alpha.unwrap_or(alpha), self.beta.unwrap_or(beta), self.delta.unwrap_or(delta))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if self.eval_period == 0 {
            return Err(Error::InvalidConfig("eval_period must be at least 1".into()));
        }
        if let Some(s) = self.smoothing {
            if !(s.temperature > 0.0) {
                return Err(Error::NonPositiveTemperature(s.temperature));
            }
        }
        let (alpha, _, _) = self.schedules();
        if !(alpha.at(0) > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Mutable memory of a model-free run. Vectors are flat `(s, a)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MfState {
    pub k: usize,
    pub prev_d: DVector<f64>,
    pub prev_q: Option<DVector<f64>>,
    pub prev_g: Option<DVector<f64>>,
    pub anchor: DVector<f64>,
    pub integrator: DVector<f64>,
    /// Running average reference for the PID derivative term.
    pub smoothed: DVector<f64>,
    /// Zap gain, identity before the first update.
    pub zap_gain: DMatrix<f64>,
    /// SAA columns `q_{i+1} - q_i`, newest first.
    pub saa_dq: VecDeque<DVector<f64>>,
    /// SAA columns of sampled-residual differences, newest first.
    pub saa_dg: VecDeque<DVector<f64>>,
    pub running_p: DMatrix<f64>,
    pub r1_w: DVector<f64>,
    /// Solves that needed a ridge.
    pub singular_events: usize,
}

impl MfState {
    pub fn new(q0: &QFunction) -> Self {
        let nm = q0.as_slice().len();
        MfState {
            k: 0,
            prev_d: DVector::zeros(nm),
            prev_q: None,
            prev_g: None,
            anchor: q0.as_vector().clone(),
            integrator: DVector::zeros(nm),
            smoothed: q0.as_vector().clone(),
            zap_gain: DMatrix::identity(nm, nm),
            saa_dq: VecDeque::new(),
            saa_dg: VecDeque::new(),
            running_p: DMatrix::zeros(nm, nm),
            r1_w: DVector::from_element(nm, 1.0 / nm as f64),
            singular_events: 0,
        }
    }
}

pub(crate) fn sampled_residual(mdp: &TabularMdp, q: &QFunction, sample: &NextStateSample) -> DVector<f64> {
    q.as_vector() - sampled_backup(mdp, q, sample).as_vector()
}

fn check(mdp: &TabularMdp, q: &QFunction, sample: &NextStateSample) -> Result<()> {
    if q.n() != mdp.n() || q.m() != mdp.m() {
        return Err(Error::DimensionMismatch { expected: mdp.nm(), found: q.n() * q.m() });
    }
    crate::mdp::bellman_q_sampled(mdp, &QFunction::zeros(mdp.n(), mdp.m()), sample).map(|_| ())
}

fn commit(q: &QFunction, d: &DVector<f64>) -> QFunction {
    q.with_values(q.as_vector() + d)
}

/// Synchronous QL: `q' = q - alpha (q - T^(q))`.
pub fn ql_step(mdp: &TabularMdp, q: &QFunction, sample: &NextStateSample, alpha: f64) -> Result<QFunction> {
    check(mdp, q, sample)?;
    let g = sampled_residual(mdp, q, sample);
    Ok(commit(q, &g.map(|x| -(alpha * x))))
}

fn speedy(mdp: &TabularMdp, q: &QFunction, state: &mut MfState, sample: &NextStateSample, alpha: f64, beta: f64, delta: f64) -> DVector<f64> {
    let g = sampled_residual(mdp, q, sample);
    let g_prev = match &state.prev_q {
        Some(prev) => {
            let pq = q.with_values(prev.clone());
            sampled_residual(mdp, &pq, sample)
        }
        None => g.clone(),
    };
    let dprime = &g - &g_prev;
    let mut d = DVector::zeros(g.len());
    for i in 0..g.len() {
        d[i] = -(alpha * g[i]) - beta * dprime[i] + delta * state.prev_d[i];
    }
    state.prev_q = Some(q.as_vector().clone());
    state.prev_d = d.clone();
    d
}

/// Generalized speedy QL. Both residuals in the difference term use the
/// same sample. The first call treats `q_{-1} = q_0`.
pub fn speedy_ql_step(
    mdp: &TabularMdp,
    q: &QFunction,
    state: &mut MfState,
    sample: &NextStateSample,
    alpha: f64,
    beta: f64,
    delta: f64,
) -> Result<QFunction> {
    check(mdp, q, sample)?;
    let d = speedy(mdp, q, state, sample, alpha, beta, delta);
    state.k += 1;
    Ok(commit(q, &d))
}

fn halpern(mdp: &TabularMdp, q: &QFunction, state: &MfState, samples: &[NextStateSample], beta: f64) -> DVector<f64> {
    let mut mean = DVector::zeros(q.as_slice().len());
    for s in samples {
        mean += sampled_backup(mdp, q, s).as_vector();
    }
    mean /= samples.len() as f64;
    let g = q.as_vector() - mean;
    let pull = &state.anchor - q.as_vector();
    pull.zip_map(&g, |ai, gi| beta * ai - ((1.0 - beta) * gi))
}

/// Anchored QL with a batch-averaged sampled backup.
pub fn halpern_ql_step(
    mdp: &TabularMdp,
    q: &QFunction,
    state: &mut MfState,
    samples: &[NextStateSample],
    beta: f64,
) -> Result<QFunction> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    for s in samples {
        check(mdp, q, s)?;
    }
    let d = halpern(mdp, q, state, samples, beta);
    state.k += 1;
    Ok(commit(q, &d))
}

fn pid(q: &QFunction, g: &DVector<f64>, state: &mut MfState, gains: PidGains, alpha: f64, beta: f64, eta: f64) -> DVector<f64> {
    state.integrator = g.zip_map(&state.integrator, |gi, ii| -(alpha * gi) + beta * ii);
    if let Some(prev) = &state.prev_q {
        state.smoothed = state.smoothed.zip_map(prev, |si, pi| (1.0 - eta) * si + eta * pi);
    }
    let qv = q.as_vector();
    let mut d = DVector::zeros(g.len());
    for i in 0..g.len() {
        let deriv = qv[i] - state.smoothed[i];
        d[i] = -(gains.kp * g[i]) + gains.ki * state.integrator[i] + gains.kd * deriv;
    }
    state.prev_q = Some(qv.clone());
    state.prev_d = d.clone();
    d
}

/// PID-controlled QL. The derivative term compares `q_k` with a running
/// average of past iterates that starts at `q_0`.
pub fn pid_ql_step(
    mdp: &TabularMdp,
    q: &QFunction,
    state: &mut MfState,
    sample: &NextStateSample,
    gains: PidGains,
    alpha: f64,
    beta: f64,
    eta: f64,
) -> Result<QFunction> {
    check(mdp, q, sample)?;
    let g = sampled_residual(mdp, q, sample);
    let d = pid(q, &g, state, gains, alpha, beta, eta);
    state.k += 1;
    Ok(commit(q, &d))
}

fn zap(mdp: &TabularMdp, q: &QFunction, state: &mut MfState, sample: &NextStateSample, alpha: f64, beta: f64, ridge: f64) -> DVector<f64> {
    let g = sampled_residual(mdp, q, sample);
    let phat = sampled_transition_matrix(q, sample).expect("shapes checked");
    let nm = g.len();
    let target = DMatrix::identity(nm, nm) - phat * mdp.gamma();
    linalg::gain_average(&mut state.zap_gain, &target, beta);
    let (x, retried) = linalg::solve_with_ridge(&state.zap_gain, &g, ridge);
    if retried {
        state.singular_events += 1;
    }
    x.map(|xi| -(alpha * xi))
}

/// Zap QL: matrix-gain stochastic Newton step with a running gain
/// `D_k = (1-beta) D_{k-1} + beta (I - gamma P^)`.
pub fn zap_ql_step(
    mdp: &TabularMdp,
    q: &QFunction,
    state: &mut MfState,
    sample: &NextStateSample,
    alpha: f64,
    beta: f64,
    ridge: f64,
) -> Result<QFunction> {
    check(mdp, q, sample)?;
    let d = zap(mdp, q, state, sample, alpha, beta, ridge);
    state.k += 1;
    Ok(commit(q, &d))
}

fn saa(
    mdp: &TabularMdp,
    q: &QFunction,
    state: &mut MfState,
    sample: &NextStateSample,
    beta: f64,
    delta: f64,
    memory: usize,
    smoothing: Option<Smoothing>,
) -> DVector<f64> {
    let g = match smoothing {
        Some(s) => {
            let t = smoothed_bellman_q_sampled(mdp, q, sample, s.kind, s.temperature).expect("validated");
            q.as_vector() - t.as_vector()
        }
        None => sampled_residual(mdp, q, sample),
    };
    if let (Some(pq), Some(pg)) = (&state.prev_q, &state.prev_g) {
        if memory > 0 {
            state.saa_dq.push_front(q.as_vector() - pq);
            state.saa_dg.push_front(&g - pg);
        }
    }
    state.saa_dq.truncate(memory);
    state.saa_dg.truncate(memory);
    state.prev_q = Some(q.as_vector().clone());
    state.prev_g = Some(g.clone());
    let cols = state.saa_dq.len();
    if cols == 0 {
        return g.map(|x| -(beta * x));
    }
    let dq = DMatrix::from_columns(&state.saa_dq.iter().cloned().collect::<Vec<_>>());
    let dg = DMatrix::from_columns(&state.saa_dg.iter().cloned().collect::<Vec<_>>());
    let reg = delta * (dq.norm_squared() + dg.norm_squared());
    let gram = dg.tr_mul(&dg) + DMatrix::identity(cols, cols) * reg;
    let rhs = dg.tr_mul(&g);
    let y = match linalg::spd_solve_with_ridge(&gram, &rhs) {
        Some(sol) => {
            if sol.regularized {
                state.singular_events += 1;
            }
            sol.x
        }
        None => {
            state.singular_events += 1;
            return g.map(|x| -(beta * x));
        }
    };
    // type-II mixing: q' = q - beta g - (Dq - beta Dg) y
    let correction = (dq - dg * beta) * y;
    g.zip_map(&correction, |gi, ci| -(beta * gi) - ci)
}

/// Stable Anderson-accelerated QL. With no history this is QL with step
/// `beta`; `delta` scales the Frobenius-norm regularizer.
#[allow(clippy::too_many_arguments)]
pub fn saa_ql_step(
    mdp: &TabularMdp,
    q: &QFunction,
    state: &mut MfState,
    sample: &NextStateSample,
    beta: f64,
    delta: f64,
    memory: usize,
    smoothing: Option<Smoothing>,
) -> Result<QFunction> {
    check(mdp, q, sample)?;
    let d = saa(mdp, q, state, sample, beta, delta, memory, smoothing);
    state.k += 1;
    Ok(commit(q, &d))
}

fn rank_one(mdp: &TabularMdp, q: &QFunction, state: &mut MfState, sample: &NextStateSample, alpha: f64, iters: usize, tol: f64) -> DVector<f64> {
    let g = sampled_residual(mdp, q, sample);
    let phat = sampled_transition_matrix(q, sample).expect("shapes checked");
    let k = state.k as f64;
    state.running_p.zip_apply(&phat, |r, p| *r = (k * *r + p) / (k + 1.0));
    let running = &state.running_p;
    state.r1_w = linalg::stationary_power(state.r1_w.clone(), iters, tol, |w| running.tr_mul(w));
    linalg::rank_one_inverse_apply(&g, &state.r1_w, mdp.gamma()).map(|x| -(alpha * x))
}

/// Rank-one preconditioned QL with a stationary estimate from the running
/// mean of sampled state-action transition matrices.
pub fn rank_one_ql_step(
    mdp: &TabularMdp,
    q: &QFunction,
    state: &mut MfState,
    sample: &NextStateSample,
    alpha: f64,
    power_iters: usize,
) -> Result<QFunction> {
    check(mdp, q, sample)?;
    if mdp.gamma() >= 1.0 {
        return Err(Error::UndiscountedUnsupported("rank-one modified QL"));
    }
    let d = rank_one(mdp, q, state, sample, alpha, power_iters, 1e-10);
    state.k += 1;
    Ok(commit(q, &d))
}

/// One configured update from `q` using `samples` (one per iteration,
/// `batch` of them for HQL). Advances `state.k`.
pub fn mf_step(
    mdp: &TabularMdp,
    cfg: &MfConfig,
    state: &mut MfState,
    q: &QFunction,
    samples: &[NextStateSample],
) -> Result<QFunction> {
    let k = state.k;
    let (alpha_s, beta_s, delta_s) = cfg.schedules();
    let (alpha, beta, delta) = (alpha_s.at(k), beta_s.at(k), delta_s.at(k));
    let sample = &samples[0];
    let d = match cfg.algorithm {
        MfAlgorithm::Ql => sampled_residual(mdp, q, sample).map(|x| -(alpha * x)),
        MfAlgorithm::Sql | MfAlgorithm::MomQl => speedy(mdp, q, state, sample, alpha, beta, delta),
        MfAlgorithm::Hql => halpern(mdp, q, state, samples, beta),
        MfAlgorithm::PidQl => {
            let g = sampled_residual(mdp, q, sample);
            pid(q, &g, state, cfg.gains, alpha, beta, cfg.eta.at(k))
        }
        MfAlgorithm::Zql => zap(mdp, q, state, sample, alpha, beta, cfg.ridge),
        MfAlgorithm::SaaQl => saa(mdp, q, state, sample, beta, delta, cfg.memory, cfg.smoothing),
        MfAlgorithm::R1Ql => rank_one(mdp, q, state, sample, alpha, cfg.power_iters, cfg.power_tol),
    };
    state.k += 1;
    Ok(commit(q, &d))
}

/// Runs the configured solver for `max_iter` iterations. Exact diagnostics
/// are taken every `eval_period` iterations and after the last one.
pub fn run_model_free(
    mdp: &TabularMdp,
    cfg: &MfConfig,
    q0: &QFunction,
    stream: &mut SeededStream,
    optimum: Option<&QFunction>,
) -> Result<RunTrace> {
    mdp.ensure_valid()?;
    cfg.validate()?;
    if q0.n() != mdp.n() || q0.m() != mdp.m() {
        return Err(Error::DimensionMismatch { expected: mdp.nm(), found: q0.n() * q0.m() });
    }
    if mdp.gamma() >= 1.0 && cfg.algorithm == MfAlgorithm::R1Ql {
        return Err(Error::UndiscountedUnsupported("rank-one modified QL"));
    }
    let diag = |q: &QFunction| -> Result<(f64, f64)> {
        let tq = bellman_q_exact(mdp, q)?;
        let r = (q.as_vector() - tq.as_vector()).amax();
        let d = optimum.map_or(-1.0, |o| (q.as_vector() - o.as_vector()).amax());
        Ok((r, d))
    };
    let (r0, d0) = diag(q0)?;
    let mut trace = RunTrace::new(r0, d0, q0.as_vector().clone());
    let mut state = MfState::new(q0);
    let mut q = q0.clone();
    let batch = if cfg.algorithm == MfAlgorithm::Hql { cfg.batch } else { 1 };
    let mut clock = Stopwatch::start(cfg.timing);
    let mut samples = Vec::with_capacity(batch);
    for k in 1..=cfg.max_iter {
        samples.clear();
        samples.extend((0..batch).map(|_| sample_next_states(mdp, stream)));
        q = mf_step(mdp, cfg, &mut state, &q, &samples)?;
        if k % cfg.eval_period == 0 || k == cfg.max_iter {
            if !q.is_finite() {
                return Err(Error::NonFinite("model-free iterate"));
            }
            let (r, d) = diag(&q)?;
            trace.operator_evals += 1;
            trace.records.push(IterRecord {
                k,
                residual: r,
                dist_to_opt: d,
                inner_backtracks: 0,
                safeguard_rejections: 0,
                wall_ns: clock.lap(),
            });
        }
    }
    trace.regularized_solves = state.singular_events;
    trace.last = q.into_vector();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{m2, m2_restricted, m2s};
    use crate::mdp::{policy_evaluation, solve_optimal_oracle, Policy};

    fn costs() -> QFunction {
        QFunction::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]])
    }

    #[test]
    fn ql_examples() {
        let mdp = m2();
        let forced = NextStateSample::forced(&mdp).unwrap();
        assert_eq!(ql_step(&mdp, &QFunction::zeros(2, 2), &forced, 1.0).unwrap(), costs());
        let star = solve_optimal_oracle(&mdp).unwrap().q;
        assert_eq!(ql_step(&mdp, &star, &forced, 0.3).unwrap(), star);
    }

    #[test]
    fn ql_alpha_one_is_q_value_iteration() {
        let mdp = m2();
        let forced = NextStateSample::forced(&mdp).unwrap();
        let star = solve_optimal_oracle(&mdp).unwrap().q;
        let mut q = QFunction::zeros(2, 2);
        let mut err = (q.as_vector() - star.as_vector()).amax();
        for _ in 0..30 {
            q = ql_step(&mdp, &q, &forced, 1.0).unwrap();
            let next = (q.as_vector() - star.as_vector()).amax();
            assert!(next <= 0.5 * err + 1e-15);
            err = next;
        }
    }

    #[test]
    fn speedy_reductions() {
        let mdp = m2s();
        let q = QFunction::from_rows(&[vec![0.2, -0.3], vec![1.1, 0.4]]);
        let sample = NextStateSample::new(2, 2, vec![0, 0, 1, 0]).unwrap();
        let mut st = MfState::new(&q);
        let a = speedy_ql_step(&mdp, &q, &mut st, &sample, 0.4, 0.7, 0.9).unwrap();
        assert_eq!(a, ql_step(&mdp, &q, &sample, 0.4).unwrap());
        // k = 1 of the speedy preset: beta = delta = 0, alpha = 1/2
        let mut st = MfState::new(&q);
        st.k = 1;
        st.prev_q = Some(DVector::from_vec(vec![5.0, 1.0, -2.0, 0.0]));
        st.prev_d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let (al, be, de) = (Schedule::Harmonic.at(1), Schedule::SqlMomentum.at(1), Schedule::SqlMomentum.at(1));
        let b = speedy_ql_step(&mdp, &q, &mut st, &sample, al, be, de).unwrap();
        assert_eq!(b, ql_step(&mdp, &q, &sample, 0.5).unwrap());
    }

    #[test]
    fn sql_reaches_optimum_on_m2() {
        let mdp = m2();
        let star = solve_optimal_oracle(&mdp).unwrap().q;
        let cfg = MfConfig::new(MfAlgorithm::Sql).with_max_iter(500).with_eval_period(500);
        let trace = run_model_free(&mdp, &cfg, &QFunction::zeros(2, 2), &mut SeededStream::new(0, 0), Some(&star)).unwrap();
        assert!(trace.records.last().unwrap().dist_to_opt <= 1e-2);
    }

    #[test]
    fn halpern_examples() {
        let mdp = m2();
        let forced = NextStateSample::forced(&mdp).unwrap();
        let q0 = QFunction::from_rows(&[vec![0.4, 0.1], vec![-0.6, 0.9]]);
        let mut st = MfState::new(&q0);
        let q1 = halpern_ql_step(&mdp, &q0, &mut st, &[forced.clone(), forced.clone()], 0.5).unwrap();
        let t = sampled_backup(&mdp, &q0, &forced);
        let expect = (q0.as_vector() + t.as_vector()) * 0.5;
        assert!((q1.as_vector() - expect).amax() < 1e-15);
        let star = solve_optimal_oracle(&mdp).unwrap().q;
        let mut st = MfState::new(&star);
        let mut q = star.clone();
        for k in 0..20 {
            q = halpern_ql_step(&mdp, &q, &mut st, &[forced.clone()], Schedule::Anchor.at(k)).unwrap();
        }
        assert_eq!(q, star);
        let mut st = MfState::new(&q0);
        assert_eq!(
            halpern_ql_step(&mdp, &q0, &mut st, &[forced.clone()], 0.0).unwrap(),
            ql_step(&mdp, &q0, &forced, 1.0).unwrap()
        );
    }

    #[test]
    fn pid_reductions() {
        let mdp = m2s();
        let q0 = QFunction::from_rows(&[vec![0.4, 0.1], vec![-0.6, 0.9]]);
        let mut stream = SeededStream::new(1, 2);
        let p = PidGains { kp: 1.0, ki: 0.0, kd: 0.0 };
        let mut st = MfState::new(&q0);
        let mut a = q0.clone();
        let mut b = q0.clone();
        for _ in 0..10 {
            let s = sample_next_states(&mdp, &mut stream);
            a = pid_ql_step(&mdp, &a, &mut st, &s, p, 1.0, 0.95, 0.05).unwrap();
            b = ql_step(&mdp, &b, &s, 1.0).unwrap();
            assert_eq!(a, b);
        }
        // eta = 1 makes the derivative term the previous increment
        let g = PidGains { kp: 0.3, ki: 0.0, kd: 0.5 };
        let mut st = MfState::new(&q0);
        let mut q = q0.clone();
        let mut prev = q0.clone();
        for k in 0..6 {
            let s = sample_next_states(&mdp, &mut stream);
            let before = q.clone();
            q = pid_ql_step(&mdp, &q, &mut st, &s, g, 1.0, 0.0, 1.0).unwrap();
            if k > 0 {
                assert_eq!(st.smoothed, *prev.as_vector());
            }
            prev = before;
        }
    }

    #[test]
    fn zap_first_step_is_dense_newton_solve() {
        let mdp = m2();
        let forced = NextStateSample::forced(&mdp).unwrap();
        let q0 = QFunction::zeros(2, 2);
        let mut st = MfState::new(&q0);
        let q1 = zap_ql_step(&mdp, &q0, &mut st, &forced, 1.0, 1.0, 1e-8).unwrap();
        let phat = sampled_transition_matrix(&q0, &forced).unwrap();
        let h = DMatrix::identity(4, 4) - phat * 0.5;
        let g = sampled_residual(&mdp, &q0, &forced);
        let d = h.lu().solve(&g).unwrap();
        assert!((q1.as_vector() + d).amax() < 1e-15);
        // Newton in q-space lands on the Q-function of the greedy policy of q0
        let v = policy_evaluation(&mdp, &Policy(vec![0, 0])).unwrap();
        let lifted = QFunction::from_fn(2, 2, |s, a| mdp.cost(s, a) + 0.5 * mdp.expectation(s, a, v.as_slice()));
        assert!((q1.as_vector() - lifted.as_vector()).amax() < 1e-12);
    }

    #[test]
    fn zap_frozen_gain_is_ql() {
        let mdp = m2s();
        let mut stream = SeededStream::new(3, 3);
        let q0 = QFunction::from_rows(&[vec![0.4, 0.1], vec![-0.6, 0.9]]);
        let mut st = MfState::new(&q0);
        let (mut a, mut b) = (q0.clone(), q0.clone());
        for k in 0..20 {
            let s = sample_next_states(&mdp, &mut stream);
            let alpha = Schedule::power(0.85).at(k);
            a = zap_ql_step(&mdp, &a, &mut st, &s, alpha, 0.0, 1e-8).unwrap();
            b = ql_step(&mdp, &b, &s, alpha).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zap_gain_row_sums() {
        let mdp = m2s();
        let mut stream = SeededStream::new(4, 4);
        let mut q = QFunction::zeros(2, 2);
        let mut st = MfState::new(&q);
        let mut wbar = 0.0;
        for k in 0..30 {
            let s = sample_next_states(&mdp, &mut stream);
            let beta = Schedule::Harmonic.at(k);
            q = zap_ql_step(&mdp, &q, &mut st, &s, 0.5, beta, 1e-8).unwrap();
            wbar = (1.0 - beta) * wbar + beta;
            for i in 0..4 {
                let row: f64 = st.zap_gain.row(i).sum();
                assert!((row - (1.0 - 0.5 * wbar)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saa_reductions_and_exactness() {
        let mdp = m2s();
        let mut stream = SeededStream::new(5, 5);
        let q0 = QFunction::from_rows(&[vec![0.4, 0.1], vec![-0.6, 0.9]]);
        let mut st = MfState::new(&q0);
        let (mut a, mut b) = (q0.clone(), q0.clone());
        for _ in 0..10 {
            let s = sample_next_states(&mdp, &mut stream);
            a = saa_ql_step(&mdp, &a, &mut st, &s, 0.3, 0.0, 0, None).unwrap();
            b = ql_step(&mdp, &b, &s, 0.3).unwrap();
            assert_eq!(a, b);
        }
        let affine = m2_restricted(&Policy(vec![1, 0]));
        let forced = NextStateSample::forced(&affine).unwrap();
        let target = policy_evaluation(&affine, &Policy(vec![0, 0])).unwrap();
        let lifted = QFunction::from_fn(2, 1, |s, a| affine.cost(s, a) + 0.5 * affine.expectation(s, a, target.as_slice()));
        let mut q = QFunction::zeros(2, 1);
        let mut st = MfState::new(&q);
        for _ in 0..5 {
            q = saa_ql_step(&affine, &q, &mut st, &forced, 1.0, 0.0, 2, None).unwrap();
        }
        assert!((q.as_vector() - lifted.as_vector()).amax() <= 1e-8, "{:?}", q);
    }

    #[test]
    fn rank_one_ql_concentrates_on_recurrent_pair() {
        let mdp = m2();
        let forced = NextStateSample::forced(&mdp).unwrap();
        let star = solve_optimal_oracle(&mdp).unwrap().q;
        let mut st = MfState::new(&star);
        let mut q = star.clone();
        for _ in 0..50 {
            q = rank_one_ql_step(&mdp, &q, &mut st, &forced, 0.5, 10).unwrap();
        }
        assert_eq!(q, star);
        // under policy (1, 0) every pair drains into (1, 0), index 2
        assert!(st.r1_w[2] > 0.99, "{:?}", st.r1_w);
        assert!((st.r1_w.sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rank_one_ql_first_step_uses_uniform_estimate() {
        let mdp = m2s();
        let q = QFunction::zeros(2, 2);
        let mut st = MfState::new(&q);
        assert_eq!(st.r1_w, DVector::from_element(4, 0.25));
        let s = NextStateSample::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert!(rank_one_ql_step(&mdp, &q, &mut st, &s, 0.5, 10).unwrap().is_finite());
    }

    #[test]
    fn run_reproduces_exact_iteration_on_deterministic_model() {
        let mdp = m2();
        let cfg = MfConfig::new(MfAlgorithm::Ql).with_alpha(Schedule::Constant(1.0)).with_max_iter(20);
        let a = run_model_free(&mdp, &cfg, &QFunction::zeros(2, 2), &mut SeededStream::new(1, 1), None).unwrap();
        let b = run_model_free(&mdp, &cfg, &QFunction::zeros(2, 2), &mut SeededStream::new(9, 9), None).unwrap();
        assert_eq!(a.records, b.records);
        for w in a.records.windows(2) {
            assert!(w[1].residual <= 0.5 * w[0].residual + 1e-15);
        }
        let empty = run_model_free(&mdp, &cfg.clone().with_max_iter(0), &QFunction::zeros(2, 2), &mut SeededStream::new(1, 1), None).unwrap();
        assert!(empty.records.is_empty());
    }

    #[test]
    fn run_is_deterministic_per_seed() {
        let mdp = m2s();
        for alg in MfAlgorithm::ALL {
            let cfg = MfConfig::new(alg).with_max_iter(40).with_eval_period(7);
            let run = |seed| run_model_free(&mdp, &cfg, &QFunction::zeros(2, 2), &mut SeededStream::new(seed, 4), None).unwrap();
            assert_eq!(run(3), run(3), "{alg:?}");
            assert_eq!(run(3).records.len(), 6);
        }
    }
}

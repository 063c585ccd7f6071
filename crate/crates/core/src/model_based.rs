//! Exact-model solvers of the form `v_{k+1} = v_k + d_k`.
//!
//! Every direction is expressed through the residual `g = v - T(v)`, computed
//! once per iteration and shared with the diagnostics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{policy_evaluation, policy_matrices, Policy, TabularMdp, ValueFunction};
use crate::record::{IterRecord, RunTrace, Stopwatch};
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MbAlgorithm {
    /// Relaxed value iteration; plain VI at `alpha = 1`.
    Vi,
    MomVi,
    AccVi,
    AncVi,
    PidVi,
    AaVi,
    R1Vi,
    Pi,
}

impl MbAlgorithm {
    pub const ALL: [MbAlgorithm; 8] = [
        MbAlgorithm::Vi,
        MbAlgorithm::MomVi,
        MbAlgorithm::AccVi,
        MbAlgorithm::AncVi,
        MbAlgorithm::PidVi,
        MbAlgorithm::AaVi,
        MbAlgorithm::R1Vi,
        MbAlgorithm::Pi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MbAlgorithm::Vi => "vi",
            MbAlgorithm::MomVi => "mom_vi",
            MbAlgorithm::AccVi => "acc_vi",
            MbAlgorithm::AncVi => "anc_vi",
            MbAlgorithm::PidVi => "pid_vi",
            MbAlgorithm::AaVi => "aa_vi",
            MbAlgorithm::R1Vi => "r1_vi",
            MbAlgorithm::Pi => "pi",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    fn supports_undiscounted(self) -> bool {
        matches!(self, MbAlgorithm::Vi | MbAlgorithm::AncVi)
    }
}

/// Proportional, integral and derivative gains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains { kp: 1.0, ki: 0.05, kd: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MbConfig {
    pub algorithm: MbAlgorithm,
    /// Residual step size (VI relaxation, momentum and PID integrator rate).
    pub alpha: Schedule,
    /// Momentum or anchor weight. `None` picks the algorithm default:
    /// gamma for Mom-VI/Acc-VI, `1/(k+2)` for Anc-VI, 0.95 for PID-VI.
    pub beta: Option<Schedule>,
    pub gains: PidGains,
    /// Anderson memory: number of past iterates kept besides the current one.
    pub memory: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub timing: bool,
}

impl MbConfig {
    pub fn new(algorithm: MbAlgorithm) -> Self {
        MbConfig {
            algorithm,
            alpha: Schedule::Constant(1.0),
            beta: None,
            gains: PidGains::default(),
            memory: 5,
            power_iters: 10,
            power_tol: 1e-10,
            max_iter: 1000,
            tol: 1e-10,
            timing: false,
        }
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_alpha(mut self, alpha: Schedule) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_beta(mut self, beta: Schedule) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn beta_schedule(&self, gamma: f64) -> Schedule {
        self.beta.unwrap_or(match self.algorithm {
            MbAlgorithm::AncVi => Schedule::Anchor,
            MbAlgorithm::PidVi => Schedule::Constant(0.95),
            _ => Schedule::Constant(gamma),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Mutable memory carried between iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct MbState {
    pub k: usize,
    pub prev_d: DVector<f64>,
    pub integrator: DVector<f64>,
    pub anchor: DVector<f64>,
    /// `(v_i, g_i)`, newest first.
    pub history: VecDeque<(DVector<f64>, DVector<f64>)>,
    pub r1_w: DVector<f64>,
    /// Anderson weights of the last step.
    pub last_weights: Option<DVector<f64>>,
    /// Linear solves that needed a ridge.
    pub regularized: usize,
}

impl MbState {
    pub fn new(v0: &ValueFunction) -> Self {
        let n = v0.len();
        MbState {
            k: 0,
            prev_d: DVector::zeros(n),
            integrator: DVector::zeros(n),
            anchor: v0.clone(),
            history: VecDeque::new(),
            r1_w: DVector::from_element(n, 1.0 / n as f64),
            last_weights: None,
            regularized: 0,
        }
    }
}

/// `T(v)` together with its greedy policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Backup {
    pub tv: ValueFunction,
    pub policy: Policy,
}

impl Backup {
    pub fn of(mdp: &TabularMdp, v: &ValueFunction) -> Self {
        let (tv, policy) = mdp.backup_greedy(v.as_slice());
        Backup { tv, policy }
    }
}

/// Next iterate and the direction that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MbStep {
    pub next: ValueFunction,
    pub direction: ValueFunction,
}

impl MbStep {
    fn from_direction(v: &ValueFunction, d: ValueFunction) -> Self {
        MbStep { next: v + &d, direction: d }
    }
}

fn residual(v: &ValueFunction, tv: &ValueFunction) -> ValueFunction {
    v - tv
}

fn check_len(mdp: &TabularMdp, v: &ValueFunction) -> Result<()> {
    if v.len() != mdp.n() {
        return Err(Error::DimensionMismatch { expected: mdp.n(), found: v.len() });
    }
    Ok(())
}

fn relaxed(v: &ValueFunction, g: &ValueFunction, alpha: f64) -> MbStep {
    MbStep::from_direction(v, g.map(|x| -(alpha * x)))
}

fn momentum(v: &ValueFunction, g: &ValueFunction, state: &mut MbState, alpha: f64, beta: f64) -> MbStep {
    let d = g.zip_map(&state.prev_d, |gi, pi| -(alpha * gi) + beta * pi);
    state.prev_d = d.clone();
    MbStep::from_direction(v, d)
}

fn accelerated(
    mdp: &TabularMdp,
    v: &ValueFunction,
    tv: &ValueFunction,
    state: &mut MbState,
    alpha: f64,
    beta: f64,
) -> (MbStep, bool) {
    let look = v.zip_map(&state.prev_d, |vi, pi| vi + beta * pi);
    let fresh = look != *v;
    let t_look = if fresh { mdp.backup(look.as_slice()) } else { tv.clone() };
    let g = residual(&look, &t_look);
    let d = g.zip_map(&state.prev_d, |gi, pi| -(alpha * gi) + beta * pi);
    state.prev_d = d.clone();
    (MbStep::from_direction(v, d), fresh)
}

fn anchored(v: &ValueFunction, g: &ValueFunction, anchor: &ValueFunction, beta: f64) -> MbStep {
    let pull = anchor - v;
    let d = pull.zip_map(g, |ai, gi| beta * ai - ((1.0 - beta) * gi));
    MbStep::from_direction(v, d)
}

fn pid(v: &ValueFunction, g: &ValueFunction, state: &mut MbState, gains: PidGains, alpha: f64, beta: f64) -> MbStep {
    state.integrator = g.zip_map(&state.integrator, |gi, ii| -(alpha * gi) + beta * ii);
    let mut d = DVector::zeros(v.len());
    for i in 0..v.len() {
        d[i] = -(gains.kp * g[i]) + gains.ki * state.integrator[i] + gains.kd * state.prev_d[i];
    }
    state.prev_d = d.clone();
    MbStep::from_direction(v, d)
}

fn anderson(v: &ValueFunction, g: &ValueFunction, state: &mut MbState, memory: usize) -> MbStep {
    state.history.push_front((v.clone(), g.clone()));
    state.history.truncate(memory + 1);
    if state.history.len() == 1 {
        state.last_weights = Some(DVector::from_element(1, 1.0));
        return MbStep::from_direction(v, -g);
    }
    let points: Vec<&DVector<f64>> = state.history.iter().map(|(x, _)| x).collect();
    let residuals: Vec<&DVector<f64>> = state.history.iter().map(|(_, r)| r).collect();
    let mix = linalg::anderson_mix(&points, &residuals);
    if mix.regularized {
        state.regularized += 1;
    }
    state.last_weights = Some(mix.weights);
    let direction = &mix.point - v;
    MbStep { next: mix.point, direction }
}

/// `P_pi' w` for the chain of `policy`.
fn policy_transpose_apply(mdp: &TabularMdp, policy: &Policy, w: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(mdp.n());
    for s in 0..mdp.n() {
        let row = mdp.transition_row(s, policy.0[s]);
        for (t, &p) in row.iter().enumerate() {
            out[t] += w[s] * p;
        }
    }
    out
}

fn rank_one(
    mdp: &TabularMdp,
    v: &ValueFunction,
    g: &ValueFunction,
    policy: &Policy,
    state: &mut MbState,
    iters: usize,
    tol: f64,
) -> Result<MbStep> {
    if mdp.gamma() >= 1.0 {
        return Err(Error::UndiscountedUnsupported("rank-one modified VI"));
    }
    let w = linalg::stationary_power(state.r1_w.clone(), iters, tol, |w| policy_transpose_apply(mdp, policy, w));
    let d = -linalg::rank_one_inverse_apply(g, &w, mdp.gamma());
    state.r1_w = w;
    Ok(MbStep::from_direction(v, d))
}

/// Closed-form solve of `(I - gamma 1 w') x = g` for a weight vector `w`
/// summing to one.
pub fn rank_one_solve(g: &ValueFunction, w: &ValueFunction, gamma: f64) -> Result<ValueFunction> {
    if g.len() != w.len() {
        return Err(Error::DimensionMismatch { expected: g.len(), found: w.len() });
    }
    if !(gamma >= 0.0 && gamma < 1.0) {
        return Err(Error::InvalidConfig(format!("rank-one solve needs gamma in [0, 1), got {gamma}")));
    }
    if (w.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("weights must sum to one, got {}", w.sum())));
    }
    Ok(linalg::rank_one_inverse_apply(g, w, gamma))
}

/// Tolerance on the Newton-form identity of a policy iteration step.
const NEWTON_IDENTITY_TOL: f64 = 1e-9;

fn policy_iteration(mdp: &TabularMdp, v: &ValueFunction, g: &ValueFunction, policy: &Policy) -> Result<MbStep> {
    if mdp.gamma() >= 1.0 {
        return Err(Error::UndiscountedUnsupported("policy iteration"));
    }
    let next = policy_evaluation(mdp, policy)?;
    let pm = policy_matrices(mdp, policy)?;
    let n = mdp.n();
    let h = DMatrix::identity(n, n) - pm.p_pi * mdp.gamma();
    let newton = linalg::lu_solve(h, g).ok_or_else(|| Error::SingularSystem("Newton system".into()))?;
    let newton_point = v - &newton;
    let gap = (&next - &newton_point).amax();
    if !(gap <= NEWTON_IDENTITY_TOL * next.amax().max(1.0)) {
        return Err(Error::NewtonIdentity { gap });
    }
    let direction = &next - v;
    Ok(MbStep { next, direction })
}

/// One configured step from `v`, given `T(v)` and its greedy policy.
/// Advances `state.k`. The flag reports whether an extra operator
/// evaluation was needed (Acc-VI lookahead).
pub fn mb_step(
    mdp: &TabularMdp,
    cfg: &MbConfig,
    state: &mut MbState,
    v: &ValueFunction,
    backup: &Backup,
) -> Result<(MbStep, bool)> {
    let k = state.k;
    let g = residual(v, &backup.tv);
    let alpha = cfg.alpha.at(k);
    let beta = cfg.beta_schedule(mdp.gamma()).at(k);
    let mut extra = false;
    let step = match cfg.algorithm {
        MbAlgorithm::Vi => relaxed(v, &g, alpha),
        MbAlgorithm::MomVi => momentum(v, &g, state, alpha, beta),
        MbAlgorithm::AccVi => {
            let (s, e) = accelerated(mdp, v, &backup.tv, state, alpha, beta);
            extra = e;
            s
        }
        MbAlgorithm::AncVi => anchored(v, &g, &state.anchor, beta),
        MbAlgorithm::PidVi => pid(v, &g, state, cfg.gains, alpha, beta),
        MbAlgorithm::AaVi => anderson(v, &g, state, cfg.memory),
        MbAlgorithm::R1Vi => rank_one(mdp, v, &g, &backup.policy, state, cfg.power_iters, cfg.power_tol)?,
        MbAlgorithm::Pi => policy_iteration(mdp, v, &g, &backup.policy)?,
    };
    state.k += 1;
    Ok((step, extra))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("step size {alpha} outside (0, 1]")));
    }
    Ok(())
}

/// Relaxed VI: returns `(v', d)` with `d = -alpha (v - T(v))`.
pub fn vi_step(mdp: &TabularMdp, v: &ValueFunction, alpha: f64) -> Result<(ValueFunction, ValueFunction)> {
    check_len(mdp, v)?;
    check_alpha(alpha)?;
    let s = relaxed(v, &residual(v, &mdp.backup(v.as_slice())), alpha);
    Ok((s.next, s.direction))
}

/// Heavy-ball VI: `d = -alpha g + beta d_prev`.
pub fn momentum_vi_step(
    mdp: &TabularMdp,
    v: &ValueFunction,
    state: &mut MbState,
    alpha: f64,
    beta: f64,
) -> Result<ValueFunction> {
    check_len(mdp, v)?;
    let s = momentum(v, &residual(v, &mdp.backup(v.as_slice())), state, alpha, beta);
    state.k += 1;
    Ok(s.next)
}

/// Nesterov-style VI: the residual is taken at `v + beta d_prev`.
pub fn accelerated_vi_step(
    mdp: &TabularMdp,
    v: &ValueFunction,
    state: &mut MbState,
    alpha: f64,
    beta: f64,
) -> Result<ValueFunction> {
    check_len(mdp, v)?;
    let tv = mdp.backup(v.as_slice());
    let (s, _) = accelerated(mdp, v, &tv, state, alpha, beta);
    state.k += 1;
    Ok(s.next)
}

/// Halpern-anchored VI with anchor weight `beta`.
pub fn anchored_vi_step(mdp: &TabularMdp, v: &ValueFunction, state: &mut MbState, beta: f64) -> Result<ValueFunction> {
    check_len(mdp, v)?;
    mdp.ensure_valid()?;
    let s = anchored(v, &residual(v, &mdp.backup(v.as_slice())), &state.anchor, beta);
    state.k += 1;
    Ok(s.next)
}

pub fn pid_vi_step(
    mdp: &TabularMdp,
    v: &ValueFunction,
    state: &mut MbState,
    gains: PidGains,
    alpha: f64,
    beta: f64,
) -> Result<ValueFunction> {
    check_len(mdp, v)?;
    let s = pid(v, &residual(v, &mdp.backup(v.as_slice())), state, gains, alpha, beta);
    state.k += 1;
    Ok(s.next)
}

/// Anderson-accelerated VI; memory 0 is plain VI.
pub fn anderson_vi_step(mdp: &TabularMdp, v: &ValueFunction, state: &mut MbState, memory: usize) -> Result<ValueFunction> {
    check_len(mdp, v)?;
    let s = anderson(v, &residual(v, &mdp.backup(v.as_slice())), state, memory);
    state.k += 1;
    Ok(s.next)
}

/// Rank-one preconditioned VI with a warm-started stationary estimate.
pub fn rank_one_vi_step(mdp: &TabularMdp, v: &ValueFunction, state: &mut MbState, power_iters: usize) -> Result<ValueFunction> {
    check_len(mdp, v)?;
    let b = Backup::of(mdp, v);
    let s = rank_one(mdp, v, &residual(v, &b.tv), &b.policy, state, power_iters, 1e-10)?;
    state.k += 1;
    Ok(s.next)
}

/// Greedy improvement followed by exact evaluation.
pub fn policy_iteration_step(mdp: &TabularMdp, v: &ValueFunction) -> Result<(ValueFunction, Policy)> {
    check_len(mdp, v)?;
    let b = Backup::of(mdp, v);
    let s = policy_iteration(mdp, v, &residual(v, &b.tv), &b.policy)?;
    Ok((s.next, b.policy))
}

/// Runs the configured solver from `v0` until the Bellman residual drops to
/// `tol` or `max_iter` updates were applied. `optimum` enables the distance
/// column.
pub fn run_model_based(
    mdp: &TabularMdp,
    cfg: &MbConfig,
    v0: &ValueFunction,
    optimum: Option<&ValueFunction>,
) -> Result<RunTrace> {
    mdp.ensure_valid()?;
    cfg.validate()?;
    check_len(mdp, v0)?;
    if mdp.gamma() >= 1.0 && !cfg.algorithm.supports_undiscounted() {
        return Err(Error::UndiscountedUnsupported(cfg.algorithm.name()));
    }
    let dist = |v: &ValueFunction| optimum.map_or(-1.0, |o| (v - o).amax());
    let mut v = v0.clone();
    let mut backup = Backup::of(mdp, &v);
    let r0 = (&v - &backup.tv).amax();
    let mut trace = RunTrace::new(r0, dist(&v), v.clone());
    let mut state = MbState::new(v0);
    let mut r = r0;
    let mut clock = Stopwatch::start(cfg.timing);
    for k in 1..=cfg.max_iter {
        if r <= cfg.tol {
            break;
        }
        let (step, extra) = mb_step(mdp, cfg, &mut state, &v, &backup)?;
        v = step.next;
        backup = Backup::of(mdp, &v);
        trace.operator_evals += 1 + usize::from(extra);
        r = (&v - &backup.tv).amax();
        if !r.is_finite() {
            return Err(Error::NonFinite("model-based iterate"));
        }
        trace.records.push(IterRecord {
            k,
            residual: r,
            dist_to_opt: dist(&v),
            inner_backtracks: 0,
            safeguard_rejections: 0,
            wall_ns: clock.lap(),
        });
    }
    trace.regularized_solves = state.regularized;
    trace.last = v;
    Ok(trace)
}

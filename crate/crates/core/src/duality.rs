//! A small optimizer engine over gradient oracles, and the adapter that
//! turns a Bellman operator into such an oracle.
//!
//! Through the adapter (`gradient = x - T(x)`, `hessian = I - gamma P`) each
//! optimizer rule runs the same arithmetic as its control counterpart, which
//! the lockstep checks confirm step by step.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{
    bellman_q_exact, exact_state_action_matrix, jacobian_t, sampled_backup, sampled_transition_matrix,
    QFunction, TabularMdp,
};
use crate::model_based::{mb_step, Backup, MbAlgorithm, MbConfig, MbState, PidGains};
use crate::model_free::{mf_step, MfAlgorithm, MfConfig, MfState};
use crate::problems::{sample_next_states, SeededStream};
use crate::schedule::Schedule;

/// Sampled gradient, with a sampled Hessian from the same draw when the
/// oracle has one.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyEval {
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

pub trait GradientOracle {
    fn dim(&self) -> usize;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn noisy(&self, _x: &DVector<f64>, _stream: &mut SeededStream) -> Option<NoisyEval> {
        None
    }
}

/// `g(v) = v - T(v)` over value functions.
pub struct BellmanVOracle {
    mdp: TabularMdp,
}

pub fn bellman_gradient_oracle(mdp: &TabularMdp) -> Result<BellmanVOracle> {
    mdp.ensure_valid()?;
    Ok(BellmanVOracle { mdp: mdp.clone() })
}

impl GradientOracle for BellmanVOracle {
    fn dim(&self) -> usize {
        self.mdp.n()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x - self.mdp.backup(x.as_slice())
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.mdp.n();
        let jac = jacobian_t(&self.mdp, x).ok()?;
        Some(DMatrix::identity(n, n) - jac.matrix)
    }
}

/// `g(q) = q - T(q)` over flattened Q-functions, with the sampled operator
/// as its noisy version.
pub struct BellmanQOracle {
    mdp: TabularMdp,
}

pub fn bellman_q_oracle(mdp: &TabularMdp) -> Result<BellmanQOracle> {
    mdp.ensure_valid()?;
    Ok(BellmanQOracle { mdp: mdp.clone() })
}

impl BellmanQOracle {
    fn wrap(&self, x: &DVector<f64>) -> QFunction {
        QFunction::from_vector(self.mdp.n(), self.mdp.m(), x.clone()).expect("dimension")
    }
}

impl GradientOracle for BellmanQOracle {
    fn dim(&self) -> usize {
        self.mdp.nm()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let q = self.wrap(x);
        x - bellman_q_exact(&self.mdp, &q).expect("dimension").as_vector()
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let nm = self.mdp.nm();
        let p = exact_state_action_matrix(&self.mdp, &self.wrap(x)).ok()?;
        Some(DMatrix::identity(nm, nm) - p * self.mdp.gamma())
    }

    fn noisy(&self, x: &DVector<f64>, stream: &mut SeededStream) -> Option<NoisyEval> {
        let q = self.wrap(x);
        let sample = sample_next_states(&self.mdp, stream);
        let gradient = x - sampled_backup(&self.mdp, &q, &sample).as_vector();
        let nm = self.mdp.nm();
        let phat = sampled_transition_matrix(&q, &sample).ok()?;
        Some(NoisyEval { gradient, hessian: Some(DMatrix::identity(nm, nm) - phat * self.mdp.gamma()) })
    }
}

/// `f(x) = x'Ax/2 - b'x` with optional zero-mean uniform gradient noise.
pub struct QuadraticOracle {
    a: DMatrix<f64>,
    b: DVector<f64>,
    noise_scale: f64,
}

pub fn quadratic_oracle(a: DMatrix<f64>, b: DVector<f64>, noise_scale: f64) -> Result<QuadraticOracle> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), found: b.len() });
    }
    if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite);
    }
    if nalgebra::Cholesky::new(a.clone()).is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(QuadraticOracle { a, b, noise_scale })
}

impl QuadraticOracle {
    pub fn minimizer(&self) -> DVector<f64> {
        nalgebra::Cholesky::new(self.a.clone()).expect("checked SPD").solve(&self.b)
    }
}

impl GradientOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }

    fn noisy(&self, x: &DVector<f64>, stream: &mut SeededStream) -> Option<NoisyEval> {
        let noise = stream.uniform_vector(self.dim(), -self.noise_scale, self.noise_scale);
        Some(NoisyEval { gradient: self.gradient(x) + noise, hessian: Some(self.a.clone()) })
    }
}

/// Update rules of the engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum OptimizerRule {
    Gd { alpha: Schedule },
    /// Heavy ball.
    Polyak { alpha: Schedule, beta: Schedule },
    /// Gradient taken at the lookahead `x + beta d_prev`.
    Nesterov { alpha: Schedule, beta: Schedule },
    /// Halpern anchoring; `alpha = None` means `1 - beta`.
    Anchored { beta: Schedule, alpha: Option<Schedule> },
    /// Type-II Anderson mixing with unit step.
    Anderson { memory: usize },
    Pid { gains: PidGains, alpha: Schedule, beta: Schedule },
    /// Damped Newton.
    Newton { alpha: Schedule },
    /// Stochastic Newton-Raphson with a running Hessian average (noisy only).
    Snr { alpha: Schedule, beta: Schedule, ridge: f64 },
}

impl OptimizerRule {
    pub fn tag(&self) -> &'static str {
        match self {
            OptimizerRule::Gd { .. } => "gd",
            OptimizerRule::Polyak { .. } => "polyak",
            OptimizerRule::Nesterov { .. } => "nesterov",
            OptimizerRule::Anchored { .. } => "anchored",
            OptimizerRule::Anderson { .. } => "anderson",
            OptimizerRule::Pid { .. } => "pid",
            OptimizerRule::Newton { .. } => "newton",
            OptimizerRule::Snr { .. } => "snr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineState {
    pub k: usize,
    pub anchor: DVector<f64>,
    pub prev_d: DVector<f64>,
    pub integrator: DVector<f64>,
    /// `(x_i, g_i)`, newest first.
    pub history: VecDeque<(DVector<f64>, DVector<f64>)>,
    pub gain: Option<DMatrix<f64>>,
    pub regularized: usize,
}

impl EngineState {
    pub fn new(x0: &DVector<f64>) -> Self {
        let n = x0.len();
        EngineState {
            k: 0,
            anchor: x0.clone(),
            prev_d: DVector::zeros(n),
            integrator: DVector::zeros(n),
            history: VecDeque::new(),
            gain: None,
            regularized: 0,
        }
    }
}

fn eval_gradient(oracle: &dyn GradientOracle, x: &DVector<f64>, stream: &mut Option<&mut SeededStream>) -> Result<DVector<f64>> {
    match stream {
        Some(s) => oracle.noisy(x, s).map(|e| e.gradient).ok_or(Error::MissingNoisyOracle),
        None => Ok(oracle.gradient(x)),
    }
}

/// One update of `rule` from `x`. Passing a stream switches every gradient
/// evaluation to the oracle's noisy version (SGD and friends).
pub fn optimizer_step(
    rule: &OptimizerRule,
    oracle: &dyn GradientOracle,
    x: &DVector<f64>,
    state: &mut EngineState,
    mut stream: Option<&mut SeededStream>,
) -> Result<DVector<f64>> {
    if x.len() != oracle.dim() {
        return Err(Error::DimensionMismatch { expected: oracle.dim(), found: x.len() });
    }
    let k = state.k;
    let next = match rule {
        OptimizerRule::Gd { alpha } => {
            let a = alpha.at(k);
            let g = eval_gradient(oracle, x, &mut stream)?;
            x + g.map(|gi| -(a * gi))
        }
        OptimizerRule::Polyak { alpha, beta } => {
            let (a, b) = (alpha.at(k), beta.at(k));
            let g = eval_gradient(oracle, x, &mut stream)?;
            let d = g.zip_map(&state.prev_d, |gi, pi| -(a * gi) + b * pi);
            state.prev_d = d.clone();
            x + d
        }
        OptimizerRule::Nesterov { alpha, beta } => {
            let (a, b) = (alpha.at(k), beta.at(k));
            let look = x.zip_map(&state.prev_d, |xi, pi| xi + b * pi);
            let g = eval_gradient(oracle, &look, &mut stream)?;
            let d = g.zip_map(&state.prev_d, |gi, pi| -(a * gi) + b * pi);
            state.prev_d = d.clone();
            x + d
        }
        OptimizerRule::Anchored { beta, alpha } => {
            let b = beta.at(k);
            let a = alpha.map_or(1.0 - b, |s| s.at(k));
            let g = eval_gradient(oracle, x, &mut stream)?;
            let pull = &state.anchor - x;
            x + pull.zip_map(&g, |pi, gi| b * pi - (a * gi))
        }
        OptimizerRule::Anderson { memory } => {
            let g = eval_gradient(oracle, x, &mut stream)?;
            state.history.push_front((x.clone(), g.clone()));
            state.history.truncate(memory + 1);
            if state.history.len() == 1 {
                x + (-g)
            } else {
                let points: Vec<&DVector<f64>> = state.history.iter().map(|(p, _)| p).collect();
                let residuals: Vec<&DVector<f64>> = state.history.iter().map(|(_, r)| r).collect();
                let mix = linalg::anderson_mix(&points, &residuals);
                if mix.regularized {
                    state.regularized += 1;
                }
                mix.point
            }
        }
        OptimizerRule::Pid { gains, alpha, beta } => {
            let (a, b) = (alpha.at(k), beta.at(k));
            let g = eval_gradient(oracle, x, &mut stream)?;
            state.integrator = g.zip_map(&state.integrator, |gi, ii| -(a * gi) + b * ii);
            let mut d = DVector::zeros(x.len());
            for i in 0..x.len() {
                d[i] = -(gains.kp * g[i]) + gains.ki * state.integrator[i] + gains.kd * state.prev_d[i];
            }
            state.prev_d = d.clone();
            x + d
        }
        OptimizerRule::Newton { alpha } => {
            let a = alpha.at(k);
            let (g, h) = match stream.as_mut() {
                Some(s) => {
                    let e = oracle.noisy(x, s).ok_or(Error::MissingNoisyOracle)?;
                    (e.gradient, e.hessian.ok_or(Error::MissingHessian("newton"))?)
                }
                None => (oracle.gradient(x), oracle.hessian(x).ok_or(Error::MissingHessian("newton"))?),
            };
            let step = linalg::lu_solve(h, &g).ok_or_else(|| Error::SingularSystem("Newton system".into()))?;
            x + step.map(|si| -(a * si))
        }
        OptimizerRule::Snr { alpha, beta, ridge } => {
            let (a, b) = (alpha.at(k), beta.at(k));
            let s = stream.as_mut().ok_or(Error::MissingNoisyOracle)?;
            let e = oracle.noisy(x, s).ok_or(Error::MissingNoisyOracle)?;
            let h = e.hessian.ok_or(Error::MissingHessian("snr"))?;
            let n = x.len();
            let gain = state.gain.get_or_insert_with(|| DMatrix::identity(n, n));
            linalg::gain_average(gain, &h, b);
            let (sol, retried) = linalg::solve_with_ridge(gain, &e.gradient, *ridge);
            if retried {
                state.regularized += 1;
            }
            x + sol.map(|si| -(a * si))
        }
    };
    state.k += 1;
    Ok(next)
}

/// The algorithm pairings checked in lockstep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivalencePair {
    GdRelVi,
    PolyakMomVi,
    NesterovAccVi,
    AnchoredAncVi,
    AndersonAaVi,
    PidPidVi,
    NewtonPi,
    SgdQl,
    SnrZql,
}

impl EquivalencePair {
    pub const ALL: [EquivalencePair; 9] = [
        EquivalencePair::GdRelVi,
        EquivalencePair::PolyakMomVi,
        EquivalencePair::NesterovAccVi,
        EquivalencePair::AnchoredAncVi,
        EquivalencePair::AndersonAaVi,
        EquivalencePair::PidPidVi,
        EquivalencePair::NewtonPi,
        EquivalencePair::SgdQl,
        EquivalencePair::SnrZql,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EquivalencePair::GdRelVi => "gd~rel_vi",
            EquivalencePair::PolyakMomVi => "polyak~mom_vi",
            EquivalencePair::NesterovAccVi => "nesterov~acc_vi",
            EquivalencePair::AnchoredAncVi => "anchored~anc_vi",
            EquivalencePair::AndersonAaVi => "anderson~aa_vi",
            EquivalencePair::PidPidVi => "pid~pid_vi",
            EquivalencePair::NewtonPi => "newton~pi",
            EquivalencePair::SgdQl => "sgd~ql",
            EquivalencePair::SnrZql => "snr~zql",
        }
    }

    /// Zero where both sides share evaluation order, 1e-12 where dense
    /// solves may reorder arithmetic.
    pub fn default_tolerance(self) -> f64 {
        match self {
            EquivalencePair::NewtonPi | EquivalencePair::AndersonAaVi => 1e-12,
            _ => 0.0,
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            EquivalencePair::NewtonPi => 5,
            EquivalencePair::AndersonAaVi => 20,
            EquivalencePair::SgdQl | EquivalencePair::SnrZql => 50,
            _ => 100,
        }
    }

    /// Matching coefficients for both sides.
    pub fn default_sides(self, gamma: f64) -> (OptimizerRule, NativeSolver) {
        let half = Schedule::Constant(0.5);
        let one = Schedule::Constant(1.0);
        let mb = |alg: MbAlgorithm, alpha: Schedule, beta: Option<Schedule>| {
            let mut cfg = MbConfig::new(alg).with_alpha(alpha);
            cfg.beta = beta;
            NativeSolver::ModelBased(cfg)
        };
        match self {
            EquivalencePair::GdRelVi => (OptimizerRule::Gd { alpha: half }, mb(MbAlgorithm::Vi, half, None)),
            EquivalencePair::PolyakMomVi => {
                let beta = Schedule::Constant(gamma);
                (OptimizerRule::Polyak { alpha: one, beta }, mb(MbAlgorithm::MomVi, one, Some(beta)))
            }
            EquivalencePair::NesterovAccVi => {
                let beta = Schedule::Constant(gamma);
                (OptimizerRule::Nesterov { alpha: one, beta }, mb(MbAlgorithm::AccVi, one, Some(beta)))
            }
            EquivalencePair::AnchoredAncVi => (
                OptimizerRule::Anchored { beta: Schedule::Anchor, alpha: None },
                mb(MbAlgorithm::AncVi, one, Some(Schedule::Anchor)),
            ),
            EquivalencePair::AndersonAaVi => {
                let mut cfg = MbConfig::new(MbAlgorithm::AaVi);
                cfg.memory = 3;
                (OptimizerRule::Anderson { memory: 3 }, NativeSolver::ModelBased(cfg))
            }
            EquivalencePair::PidPidVi => {
                let mut cfg = MbConfig::new(MbAlgorithm::PidVi).with_beta(Schedule::Constant(0.95));
                cfg.gains = PidGains::default();
                (
                    OptimizerRule::Pid { gains: PidGains::default(), alpha: one, beta: Schedule::Constant(0.95) },
                    NativeSolver::ModelBased(cfg),
                )
            }
            EquivalencePair::NewtonPi => (OptimizerRule::Newton { alpha: one }, mb(MbAlgorithm::Pi, one, None)),
            EquivalencePair::SgdQl => {
                let alpha = Schedule::power(0.75);
                (OptimizerRule::Gd { alpha }, NativeSolver::ModelFree(MfConfig::new(MfAlgorithm::Ql).with_alpha(alpha)))
            }
            EquivalencePair::SnrZql => {
                let (alpha, beta) = (Schedule::power(0.85), Schedule::Harmonic);
                let cfg = MfConfig::new(MfAlgorithm::Zql).with_alpha(alpha).with_beta(beta);
                (OptimizerRule::Snr { alpha, beta, ridge: cfg.ridge }, NativeSolver::ModelFree(cfg))
            }
        }
    }
}

/// Control-side solver of a lockstep comparison.
#[derive(Clone, Debug, PartialEq)]
pub enum NativeSolver {
    ModelBased(MbConfig),
    ModelFree(MfConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LockstepReport {
    pub pair: String,
    pub steps: usize,
    /// Largest per-step `|x_engine - x_native|_inf`.
    pub max_gap: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn mismatch(what: &str) -> Error {
    Error::ScheduleMismatch(what.to_string())
}

fn check_sides(rule: &OptimizerRule, native: &NativeSolver, gamma: f64) -> Result<()> {
    use OptimizerRule as R;
    match (rule, native) {
        (R::Gd { alpha }, NativeSolver::ModelBased(c)) => {
            if c.algorithm != MbAlgorithm::Vi || c.alpha != *alpha {
                return Err(mismatch("gd needs relaxed VI with the same step size"));
            }
        }
        (R::Polyak { alpha, beta }, NativeSolver::ModelBased(c)) | (R::Nesterov { alpha, beta }, NativeSolver::ModelBased(c)) => {
            let want = if matches!(rule, R::Polyak { .. }) { MbAlgorithm::MomVi } else { MbAlgorithm::AccVi };
            if c.algorithm != want || c.alpha != *alpha || c.beta_schedule(gamma) != *beta {
                return Err(mismatch("momentum coefficients differ"));
            }
        }
        (R::Anchored { beta, alpha }, NativeSolver::ModelBased(c)) => {
            if c.algorithm != MbAlgorithm::AncVi || c.beta_schedule(gamma) != *beta || alpha.is_some() {
                return Err(mismatch("anchored VI needs the same anchor weights and alpha = 1 - beta"));
            }
        }
        (R::Anderson { memory }, NativeSolver::ModelBased(c)) => {
            if c.algorithm != MbAlgorithm::AaVi || c.memory != *memory {
                return Err(mismatch("Anderson memories differ"));
            }
        }
        (R::Pid { gains, alpha, beta }, NativeSolver::ModelBased(c)) => {
            if c.algorithm != MbAlgorithm::PidVi || c.gains != *gains || c.alpha != *alpha || c.beta_schedule(gamma) != *beta {
                return Err(mismatch("PID gains or rates differ"));
            }
        }
        (R::Newton { alpha }, NativeSolver::ModelBased(c)) => {
            if c.algorithm != MbAlgorithm::Pi || *alpha != Schedule::Constant(1.0) {
                return Err(mismatch("policy iteration is undamped Newton"));
            }
        }
        (R::Gd { alpha }, NativeSolver::ModelFree(c)) => {
            if c.algorithm != MfAlgorithm::Ql || c.schedules().0 != *alpha {
                return Err(mismatch("sgd needs QL with the same learning rate"));
            }
        }
        (R::Snr { alpha, beta, ridge }, NativeSolver::ModelFree(c)) => {
            let (a, b, _) = c.schedules();
            if c.algorithm != MfAlgorithm::Zql || a != *alpha || b != *beta || c.ridge != *ridge {
                return Err(mismatch("stochastic Newton coefficients differ from Zap QL"));
            }
        }
        _ => return Err(mismatch("rule and solver are not a recognized pair")),
    }
    Ok(())
}

/// Runs the engine on the Bellman oracle next to the native solver from the
/// zero start and reports the largest iterate gap. Model-free pairs share a
/// sample stream seeded by `seed`.
pub fn lockstep_with(
    rule: &OptimizerRule,
    native: &NativeSolver,
    mdp: &TabularMdp,
    steps: usize,
    tolerance: f64,
    seed: u64,
) -> Result<LockstepReport> {
    mdp.ensure_valid()?;
    check_sides(rule, native, mdp.gamma())?;
    let mut max_gap: f64 = 0.0;
    match native {
        NativeSolver::ModelBased(cfg) => {
            let oracle = bellman_gradient_oracle(mdp)?;
            let mut x = DVector::zeros(mdp.n());
            let mut v = x.clone();
            let mut es = EngineState::new(&x);
            let mut ms = MbState::new(&v);
            for _ in 0..steps {
                x = optimizer_step(rule, &oracle, &x, &mut es, None)?;
                let backup = Backup::of(mdp, &v);
                v = mb_step(mdp, cfg, &mut ms, &v, &backup)?.0.next;
                max_gap = max_gap.max((&x - &v).amax());
            }
        }
        NativeSolver::ModelFree(cfg) => {
            let oracle = bellman_q_oracle(mdp)?;
            let mut x = DVector::zeros(mdp.nm());
            let mut q = QFunction::zeros(mdp.n(), mdp.m());
            let mut es = EngineState::new(&x);
            let mut ms = MfState::new(&q);
            let mut engine_stream = SeededStream::new(seed, 0x10c5);
            let mut native_stream = engine_stream.clone();
            for _ in 0..steps {
                x = optimizer_step(rule, &oracle, &x, &mut es, Some(&mut engine_stream))?;
                let sample = sample_next_states(mdp, &mut native_stream);
                q = mf_step(mdp, cfg, &mut ms, &q, std::slice::from_ref(&sample))?;
                max_gap = max_gap.max((&x - q.as_vector()).amax());
            }
        }
    }
    Ok(LockstepReport {
        pair: format!("{}~{}", rule.tag(), native_name(native)),
        steps,
        max_gap,
        tolerance,
        passed: max_gap <= tolerance,
    })
}

fn native_name(native: &NativeSolver) -> &'static str {
    match native {
        NativeSolver::ModelBased(c) => c.algorithm.name(),
        NativeSolver::ModelFree(c) => c.algorithm.name(),
    }
}

/// Lockstep check of a named pair with its default coefficients.
pub fn lockstep_equivalence_check(
    pair: EquivalencePair,
    mdp: &TabularMdp,
    steps: usize,
    tolerance: Option<f64>,
) -> Result<LockstepReport> {
    let (rule, native) = pair.default_sides(mdp.gamma());
    let mut report = lockstep_with(&rule, &native, mdp, steps, tolerance.unwrap_or(pair.default_tolerance()), 7)?;
    report.pair = pair.name().to_string();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{m2, m2s};
    use crate::problems::{generate, GeneratorSpec};

    #[test]
    fn bellman_oracle_examples() {
        let o = bellman_gradient_oracle(&m2()).unwrap();
        assert_eq!(o.gradient(&DVector::zeros(2)), DVector::from_vec(vec![0.0, -0.5]));
        assert_eq!(o.gradient(&DVector::from_vec(vec![0.5, 1.0])), DVector::zeros(2));
        assert_eq!(o.hessian(&DVector::zeros(2)).unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.0, 0.5]));
    }

    #[test]
    fn noisy_q_gradient_is_unbiased_on_m2s() {
        let mdp = m2s();
        let o = bellman_q_oracle(&mdp).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        // only pair (0,1) is random; enumerate its two outcomes by weight
        let exact = o.gradient(&x);
        let q = QFunction::from_vector(2, 2, x.clone()).unwrap();
        let mut mean = DVector::zeros(4);
        for (next, w) in [(0usize, 0.2), (1usize, 0.8)] {
            let sample = crate::mdp::NextStateSample::new(2, 2, vec![0, next, 1, 0]).unwrap();
            mean += (&x - sampled_backup(&mdp, &q, &sample).as_vector()) * w;
        }
        assert!((mean - exact).amax() <= 1e-12);
    }

    #[test]
    fn quadratic_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let o = quadratic_oracle(a.clone(), b.clone(), 0.0).unwrap();
        let star = o.minimizer();
        assert!(o.gradient(&star).amax() < 1e-14);
        let mut st = EngineState::new(&DVector::zeros(2));
        let x = optimizer_step(&OptimizerRule::Newton { alpha: Schedule::Constant(1.0) }, &o, &DVector::from_vec(vec![5.0, 3.0]), &mut st, None).unwrap();
        assert!((x - &star).amax() < 1e-12);
        let id = quadratic_oracle(DMatrix::identity(2, 2), b.clone(), 0.0).unwrap();
        let mut st = EngineState::new(&DVector::zeros(2));
        let x = optimizer_step(&OptimizerRule::Gd { alpha: Schedule::Constant(1.0) }, &id, &DVector::from_vec(vec![4.0, 4.0]), &mut st, None).unwrap();
        assert_eq!(x, b);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(quadratic_oracle(bad, b, 0.0), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn gd_decreases_energy_norm_on_quadratic() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let o = quadratic_oracle(a.clone(), DVector::from_vec(vec![1.0, 2.0, 3.0]), 0.0).unwrap();
        let star = o.minimizer();
        let lmax = a.symmetric_eigenvalues().max();
        let rule = OptimizerRule::Gd { alpha: Schedule::Constant(1.9 / lmax) };
        let mut x = DVector::from_vec(vec![10.0, -5.0, 2.0]);
        let mut st = EngineState::new(&x);
        let energy = |x: &DVector<f64>| {
            let e = x - &star;
            (e.transpose() * &a * &e)[0]
        };
        let mut prev = energy(&x);
        for _ in 0..50 {
            x = optimizer_step(&rule, &o, &x, &mut st, None).unwrap();
            let cur = energy(&x);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn engine_examples_on_m2() {
        let o = bellman_gradient_oracle(&m2()).unwrap();
        let z = DVector::zeros(2);
        let mut st = EngineState::new(&z);
        let x = optimizer_step(&OptimizerRule::Gd { alpha: Schedule::Constant(0.5) }, &o, &z, &mut st, None).unwrap();
        assert_eq!(x, DVector::from_vec(vec![0.0, 0.25]));
        let mut st = EngineState::new(&z);
        let x = optimizer_step(&OptimizerRule::Newton { alpha: Schedule::Constant(1.0) }, &o, &z, &mut st, None).unwrap();
        assert_eq!(x, DVector::from_vec(vec![0.5, 1.0]));
        let mut a = EngineState::new(&z);
        let mut b = EngineState::new(&z);
        let (mut xa, mut xb) = (z.clone(), z.clone());
        for _ in 0..10 {
            xa = optimizer_step(&OptimizerRule::Polyak { alpha: Schedule::Constant(0.7), beta: Schedule::Constant(0.0) }, &o, &xa, &mut a, None).unwrap();
            xb = optimizer_step(&OptimizerRule::Gd { alpha: Schedule::Constant(0.7) }, &o, &xb, &mut b, None).unwrap();
            assert_eq!(xa, xb);
        }
    }

    #[test]
    fn missing_capabilities() {
        struct Plain;
        impl GradientOracle for Plain {
            fn dim(&self) -> usize {
                1
            }
            fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
                x.clone()
            }
        }
        let x = DVector::from_element(1, 1.0);
        let mut st = EngineState::new(&x);
        assert!(matches!(
            optimizer_step(&OptimizerRule::Newton { alpha: Schedule::Constant(1.0) }, &Plain, &x, &mut st, None),
            Err(Error::MissingHessian(_))
        ));
        let mut s = SeededStream::new(0, 0);
        assert!(matches!(
            optimizer_step(&OptimizerRule::Gd { alpha: Schedule::Constant(1.0) }, &Plain, &x, &mut st, Some(&mut s)),
            Err(Error::MissingNoisyOracle)
        ));
    }

    #[test]
    fn all_pairs_agree() {
        let garnet = generate(&GeneratorSpec::garnet(20, 4, 3, 0.9, 1)).unwrap();
        for mdp in [m2(), m2s(), garnet] {
            for pair in EquivalencePair::ALL {
                let r = lockstep_equivalence_check(pair, &mdp, pair.default_steps(), None).unwrap();
                assert!(r.passed, "{} gap {:e}", r.pair, r.max_gap);
            }
        }
    }

    #[test]
    fn mismatched_schedules_are_rejected() {
        let rule = OptimizerRule::Gd { alpha: Schedule::Constant(0.5) };
        let native = NativeSolver::ModelBased(MbConfig::new(MbAlgorithm::Vi).with_alpha(Schedule::Constant(0.4)));
        assert!(matches!(lockstep_with(&rule, &native, &m2(), 5, 0.0, 0), Err(Error::ScheduleMismatch(_))));
    }
}

//! Wrappers that make arbitrary update directions convergent.
//!
//! Two of them guard value iteration (reject-and-fall-back, and a
//! backtracking line search), one guards Q-learning (a clipped, vanishing
//! perturbation of the plain QL step).

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mdp::{sampled_backup, NextStateSample, QFunction, TabularMdp, ValueFunction};
use crate::model_based::{mb_step, Backup, MbAlgorithm, MbConfig, MbState};
use crate::model_free::MfConfig;
use crate::problems::{sample_next_states, SeededStream};
use crate::record::{IterRecord, RunTrace, Stopwatch};
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub struct SafeguardConfig {
    /// Target linear rate.
    pub gamma_prime: f64,
    /// Backtracking shrink factor.
    pub lambda: f64,
    /// Clip radius for the QL perturbation.
    pub rho: f64,
    /// QL learning rate.
    pub alpha: Schedule,
    /// Weight of the clipped perturbation.
    pub beta: Schedule,
    pub max_iter: usize,
    pub tol: f64,
    pub eval_period: usize,
    pub timing: bool,
}

impl Default for SafeguardConfig {
    fn default() -> Self {
        SafeguardConfig {
            gamma_prime: 0.95,
            lambda: 0.5,
            rho: 1.0,
            alpha: Schedule::power(0.75),
            beta: Schedule::power(0.25),
            max_iter: 1000,
            tol: 1e-10,
            eval_period: 1,
            timing: false,
        }
    }
}

impl SafeguardConfig {
    fn check_common(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if self.eval_period == 0 {
            return Err(Error::InvalidConfig("eval_period must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks the step-size conditions of the QL safeguard: the learning rate
    /// must behave like `(k+1)^-a` with `a` in `(0.5, 1]` and the
    /// perturbation weight must vanish.
    pub fn check_ql_schedules(&self) -> Result<()> {
        match self.alpha.decay_exponent() {
            Some(a) if a > 0.5 && a <= 1.0 => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "learning rate {:?} must decay like (k+1)^-a with a in (0.5, 1]",
                    self.alpha
                )))
            }
        }
        match self.beta.decay_exponent() {
            Some(b) if b > 0.0 => {}
            _ => return Err(Error::InvalidConfig(format!("perturbation weight {:?} must vanish", self.beta))),
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidConfig(format!("clip radius must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// What a value-space direction provider sees at step `k`.
pub struct VContext<'a> {
    pub mdp: &'a TabularMdp,
    pub k: usize,
    pub v: &'a ValueFunction,
    pub backup: &'a Backup,
    pub residual: f64,
}

pub trait DirectionProvider: Send {
    fn direction(&mut self, ctx: &VContext<'_>) -> Result<ValueFunction>;
}

/// Direction of a model-based solver run with its own memory.
pub struct SolverProvider {
    cfg: MbConfig,
    state: Option<MbState>,
}

impl SolverProvider {
    pub fn new(cfg: MbConfig) -> Self {
        SolverProvider { cfg, state: None }
    }
}

impl DirectionProvider for SolverProvider {
    fn direction(&mut self, ctx: &VContext<'_>) -> Result<ValueFunction> {
        let state = self.state.get_or_insert_with(|| MbState::new(ctx.v));
        let (step, _) = mb_step(ctx.mdp, &self.cfg, state, ctx.v, ctx.backup)?;
        Ok(step.direction)
    }
}

/// Uniform noise in `[-scale, scale]^n`.
pub struct RandomProvider {
    stream: SeededStream,
    scale: f64,
}

impl RandomProvider {
    pub fn new(stream: SeededStream, scale: f64) -> Self {
        RandomProvider { stream, scale }
    }
}

impl DirectionProvider for RandomProvider {
    fn direction(&mut self, ctx: &VContext<'_>) -> Result<ValueFunction> {
        Ok(self.stream.uniform_vector(ctx.v.len(), -self.scale, self.scale))
    }
}

pub struct ZeroProvider;

impl DirectionProvider for ZeroProvider {
    fn direction(&mut self, ctx: &VContext<'_>) -> Result<ValueFunction> {
        Ok(DVector::zeros(ctx.v.len()))
    }
}

/// Fork tag for provider noise, kept apart from sampling draws.
const PROVIDER_FORK: u64 = 0x5afe;

/// Value-space providers by name: `random`, `zero`, or any model-based
/// algorithm name (configured by `base`, whose algorithm is overridden).
pub fn v_provider(name: &str, base: &MbConfig, stream: &SeededStream) -> Result<Box<dyn DirectionProvider>> {
    match name {
        "random" => Ok(Box::new(RandomProvider::new(stream.fork(PROVIDER_FORK), 1.0))),
        "zero" => Ok(Box::new(ZeroProvider)),
        _ => {
            let alg = MbAlgorithm::from_name(name)
                .ok_or_else(|| Error::UnknownName { kind: "direction provider", name: name.into() })?;
            Ok(Box::new(SolverProvider::new(MbConfig { algorithm: alg, ..base.clone() })))
        }
    }
}

fn guard_inputs(mdp: &TabularMdp, v0: &ValueFunction) -> Result<()> {
    mdp.ensure_valid()?;
    if v0.len() != mdp.n() {
        return Err(Error::DimensionMismatch { expected: mdp.n(), found: v0.len() });
    }
    Ok(())
}

fn dist(optimum: Option<&ValueFunction>, v: &ValueFunction) -> f64 {
    optimum.map_or(-1.0, |o| (v - o).amax())
}

/// Accepts the provider's candidate only while the Bellman residual stays
/// under `gamma'^(k+1) * residual_0`; otherwise commits `T(v_k)`.
pub fn safeguarded_run_vi(
    mdp: &TabularMdp,
    provider: &mut dyn DirectionProvider,
    cfg: &SafeguardConfig,
    v0: &ValueFunction,
    optimum: Option<&ValueFunction>,
) -> Result<RunTrace> {
    guard_inputs(mdp, v0)?;
    cfg.check_common()?;
    let gp = cfg.gamma_prime;
    if !(gp >= mdp.gamma() && gp < 1.0) {
        return Err(Error::InvalidConfig(format!("gamma' {gp} must lie in [gamma, 1)")));
    }
    let mut v = v0.clone();
    let mut backup = Backup::of(mdp, &v);
    let r0 = (&v - &backup.tv).amax();
    let mut r = r0;
    let mut trace = RunTrace::new(r0, dist(optimum, &v), v.clone());
    let mut clock = Stopwatch::start(cfg.timing);
    for k in 0..cfg.max_iter {
        if r <= cfg.tol {
            break;
        }
        let d = provider.direction(&VContext { mdp, k, v: &v, backup: &backup, residual: r })?;
        let candidate = &v + &d;
        let cb = Backup::of(mdp, &candidate);
        trace.operator_evals += 1;
        let rc = (&candidate - &cb.tv).amax();
        let envelope = gp.powi(k as i32 + 1) * r0;
        let rejected = !(rc <= envelope);
        if rejected {
            v = backup.tv.clone();
            backup = Backup::of(mdp, &v);
            trace.operator_evals += 1;
            r = (&v - &backup.tv).amax();
        } else {
            v = candidate;
            backup = cb;
            r = rc;
        }
        trace.records.push(IterRecord {
            k: k + 1,
            residual: r,
            dist_to_opt: dist(optimum, &v),
            inner_backtracks: 0,
            safeguard_rejections: usize::from(rejected),
            wall_ns: clock.lap(),
        });
    }
    trace.last = v;
    Ok(trace)
}

/// Most candidate evaluations one backtracking step can need:
/// `ceil(log_lambda((gamma' - gamma) / 4)) + 1`.
pub fn backtracking_bound(gamma: f64, gamma_prime: f64, lambda: f64) -> usize {
    ((((gamma_prime - gamma) / 4.0).ln() / lambda.ln()).ceil()).max(0.0) as usize + 1
}

/// Line search between `T(v_k)` and the capped provider step: candidate
/// `T(v) + alpha (v - T(v) + beta d)`, shrinking `alpha` by `lambda` until the
/// residual contracts by `gamma'`. Records the number of shrinks per step.
pub fn backtracked_run_vi(
    mdp: &TabularMdp,
    provider: &mut dyn DirectionProvider,
    cfg: &SafeguardConfig,
    v0: &ValueFunction,
    optimum: Option<&ValueFunction>,
) -> Result<RunTrace> {
    guard_inputs(mdp, v0)?;
    cfg.check_common()?;
    let (gp, lambda) = (cfg.gamma_prime, cfg.lambda);
    if !(gp > mdp.gamma() && gp < 1.0) {
        return Err(Error::InvalidConfig(format!("gamma' {gp} must lie in (gamma, 1)")));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must lie in (0, 1)")));
    }
    let bound = backtracking_bound(mdp.gamma(), gp, lambda);
    let mut v = v0.clone();
    let mut backup = Backup::of(mdp, &v);
    let r0 = (&v - &backup.tv).amax();
    let mut r = r0;
    let mut trace = RunTrace::new(r0, dist(optimum, &v), v.clone());
    let mut clock = Stopwatch::start(cfg.timing);
    for k in 0..cfg.max_iter {
        if r <= cfg.tol {
            break;
        }
        let d = provider.direction(&VContext { mdp, k, v: &v, backup: &backup, residual: r })?;
        let nd = d.amax();
        // 0/0 when the provider proposes nothing; the term vanishes either way
        let beta = if nd == 0.0 { 1.0 } else { r.min(nd) / nd };
        let base = DVector::from_fn(v.len(), |i, _| (v[i] - backup.tv[i]) + beta * d[i]);
        let mut alpha = 1.0;
        let mut evals = 0;
        let (candidate, cb, rc) = loop {
            let candidate = backup.tv.zip_map(&base, |t, b| t + alpha * b);
            let cb = Backup::of(mdp, &candidate);
            evals += 1;
            let rc = (&candidate - &cb.tv).amax();
            if rc <= gp * r {
                break (candidate, cb, rc);
            }
            if evals >= bound {
                return Err(Error::BacktrackLimit { bound });
            }
            alpha *= lambda;
        };
        trace.operator_evals += evals;
        v = candidate;
        backup = cb;
        r = rc;
        trace.records.push(IterRecord {
            k: k + 1,
            residual: r,
            dist_to_opt: dist(optimum, &v),
            inner_backtracks: evals - 1,
            safeguard_rejections: 0,
            wall_ns: clock.lap(),
        });
    }
    trace.last = v;
    Ok(trace)
}

/// `min(rho, |p|) / |p| * p` in the infinity norm; zero stays zero.
pub fn clip_b_rho(p: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
    if !(rho > 0.0) {
        return Err(Error::InvalidConfig(format!("clip radius must be positive, got {rho}")));
    }
    let norm = p.amax();
    if norm <= rho {
        Ok(p.clone())
    } else {
        Ok(p * (rho / norm))
    }
}

/// What a Q-space provider sees: the iterate, its sampled backup and the
/// sample that produced it. Providers must not draw further samples.
pub struct QContext<'a> {
    pub mdp: &'a TabularMdp,
    pub k: usize,
    pub q: &'a QFunction,
    pub backup: &'a QFunction,
    /// `T^(q) - q`, elementwise.
    pub td: &'a DVector<f64>,
    pub sample: &'a NextStateSample,
}

/// Proposes the unscaled update `b_k` (the plain QL choice is `T^(q) - q`).
pub trait BProvider: Send {
    fn b(&mut self, ctx: &QContext<'_>) -> Result<DVector<f64>>;
}

pub struct QlB;

impl BProvider for QlB {
    fn b(&mut self, ctx: &QContext<'_>) -> Result<DVector<f64>> {
        Ok(ctx.td.clone())
    }
}

/// Speedy-QL update divided by its own learning rate. Its memory tracks the
/// committed iterates, not its own proposals.
#[derive(Default)]
pub struct SpeedyB {
    last_q: Option<DVector<f64>>,
}

impl BProvider for SpeedyB {
    fn b(&mut self, ctx: &QContext<'_>) -> Result<DVector<f64>> {
        let k = ctx.k;
        let q = ctx.q.as_vector();
        let (alpha, beta, delta) =
            (Schedule::Harmonic.at(k), Schedule::SqlMomentum.at(k), Schedule::SqlMomentum.at(k));
        let g = ctx.td.map(|x| -x);
        let (dprime, prev_d) = match &self.last_q {
            Some(prev) => {
                let pq = ctx.q.with_values(prev.clone());
                let g_prev = prev - sampled_backup(ctx.mdp, &pq, ctx.sample).as_vector();
                (&g - g_prev, q - prev)
            }
            None => (DVector::zeros(g.len()), DVector::zeros(g.len())),
        };
        self.last_q = Some(q.clone());
        let mut b = DVector::zeros(g.len());
        for i in 0..g.len() {
            b[i] = (-(alpha * g[i]) - beta * dprime[i] + delta * prev_d[i]) / alpha;
        }
        Ok(b)
    }
}

pub struct RandomB {
    stream: SeededStream,
}

impl BProvider for RandomB {
    fn b(&mut self, ctx: &QContext<'_>) -> Result<DVector<f64>> {
        Ok(self.stream.uniform_vector(ctx.td.len(), -1.0, 1.0))
    }
}

pub struct ZeroB;

impl BProvider for ZeroB {
    fn b(&mut self, ctx: &QContext<'_>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(ctx.td.len()))
    }
}

/// Q-space providers by name: `ql`, `sql`, `random`, `zero`.
pub fn b_provider(name: &str, stream: &SeededStream) -> Result<Box<dyn BProvider>> {
    match name {
        "ql" => Ok(Box::new(QlB)),
        "sql" => Ok(Box::new(SpeedyB::default())),
        "random" => Ok(Box::new(RandomB { stream: stream.fork(PROVIDER_FORK) })),
        "zero" => Ok(Box::new(ZeroB)),
        _ => Err(Error::UnknownName { kind: "b provider", name: name.into() }),
    }
}

/// QL with a clipped perturbation toward the provider's proposal:
/// `q' = q + alpha (T^(q) - q + beta B_rho(p))` with `p = b - (T^(q) - q)`.
///
/// The safeguard-rejection column counts steps where clipping was active
/// since the previous record.
pub fn safeguarded_run_ql(
    mdp: &TabularMdp,
    provider: &mut dyn BProvider,
    cfg: &SafeguardConfig,
    q0: &QFunction,
    stream: &mut SeededStream,
    optimum: Option<&QFunction>,
) -> Result<RunTrace> {
    mdp.ensure_valid()?;
    cfg.check_common()?;
    cfg.check_ql_schedules()?;
    if q0.n() != mdp.n() || q0.m() != mdp.m() {
        return Err(Error::DimensionMismatch { expected: mdp.nm(), found: q0.n() * q0.m() });
    }
    let diag = |q: &QFunction| -> Result<(f64, f64)> {
        let tq = crate::mdp::bellman_q_exact(mdp, q)?;
        let r = (q.as_vector() - tq.as_vector()).amax();
        Ok((r, optimum.map_or(-1.0, |o| (q.as_vector() - o.as_vector()).amax())))
    };
    let (r0, d0) = diag(q0)?;
    let mut trace = RunTrace::new(r0, d0, q0.as_vector().clone());
    let mut q = q0.clone();
    let mut clipped = 0;
    let mut worst: f64 = 0.0;
    let mut clock = Stopwatch::start(cfg.timing);
    for k in 0..cfg.max_iter {
        let sample = sample_next_states(mdp, stream);
        let backup = sampled_backup(mdp, &q, &sample);
        let td = backup.as_vector() - q.as_vector();
        let b = provider.b(&QContext { mdp, k, q: &q, backup: &backup, td: &td, sample: &sample })?;
        let p = &b - &td;
        let bp = clip_b_rho(&p, cfg.rho)?;
        if p.amax() > cfg.rho {
            clipped += 1;
        }
        let (alpha, beta) = (cfg.alpha.at(k), cfg.beta.at(k));
        if beta > 0.0 {
            worst = worst.max((bp.amax() * beta) / (beta * cfg.rho));
        }
        let mut next = q.as_vector().clone();
        for i in 0..next.len() {
            next[i] += alpha * (td[i] + beta * bp[i]);
        }
        q = q.with_values(next);
        let done = k + 1;
        if done % cfg.eval_period == 0 || done == cfg.max_iter {
            if !q.is_finite() {
                return Err(Error::NonFinite("safeguarded QL iterate"));
            }
            let (r, d) = diag(&q)?;
            trace.operator_evals += 1;
            trace.records.push(IterRecord {
                k: done,
                residual: r,
                dist_to_opt: d,
                inner_backtracks: 0,
                safeguard_rejections: clipped,
                wall_ns: clock.lap(),
            });
            clipped = 0;
        }
    }
    trace.max_perturbation_ratio = Some(worst);
    trace.last = q.into_vector();
    Ok(trace)
}

/// Plain QL expressed through the safeguard's schedules (for comparisons).
pub fn ql_reference_config(cfg: &SafeguardConfig) -> MfConfig {
    let mut out = MfConfig::new(crate::model_free::MfAlgorithm::Ql).with_alpha(cfg.alpha);
    out.max_iter = cfg.max_iter;
    out.eval_period = cfg.eval_period;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{m2, m2s};
    use crate::mdp::solve_optimal_oracle;
    use crate::model_based::run_model_based;
    use crate::model_free::run_model_free;

    fn zeros(n: usize) -> ValueFunction {
        DVector::zeros(n)
    }

    #[test]
    fn clip_examples() {
        let p = DVector::from_vec(vec![3.0, -4.0]);
        assert_eq!(clip_b_rho(&p, 2.0).unwrap(), DVector::from_vec(vec![1.5, -2.0]));
        assert_eq!(clip_b_rho(&p, 5.0).unwrap(), p);
        assert_eq!(clip_b_rho(&DVector::zeros(3), 1.0).unwrap(), DVector::zeros(3));
        assert!(clip_b_rho(&p, 0.0).is_err());
    }

    #[test]
    fn bound_constant() {
        assert_eq!(backtracking_bound(0.5, 0.8, 0.5), 5);
    }

    #[test]
    fn vi_provider_is_never_rejected_and_changes_nothing() {
        let mdp = m2();
        let base = MbConfig::new(MbAlgorithm::Vi);
        let mut prov = v_provider("vi", &base, &SeededStream::new(0, 0)).unwrap();
        let cfg = SafeguardConfig { gamma_prime: 0.5, max_iter: 40, ..Default::default() };
        let guarded = safeguarded_run_vi(&mdp, prov.as_mut(), &cfg, &zeros(2), None).unwrap();
        assert_eq!(guarded.total_rejections(), 0);
        let plain = run_model_based(&mdp, &base.with_max_iter(40), &zeros(2), None).unwrap();
        assert_eq!(guarded.residuals(), plain.residuals());
        assert_eq!(guarded.last, plain.last);
    }

    #[test]
    fn random_provider_respects_envelope() {
        let mdp = m2();
        let mut prov = v_provider("random", &MbConfig::new(MbAlgorithm::Vi), &SeededStream::new(1, 2)).unwrap();
        let cfg = SafeguardConfig { gamma_prime: 0.95, max_iter: 200, tol: 1e-300, ..Default::default() };
        let t = safeguarded_run_vi(&mdp, prov.as_mut(), &cfg, &zeros(2), None).unwrap();
        for r in &t.records {
            assert!(r.residual <= 0.95f64.powi(r.k as i32) * t.initial_residual);
        }
        assert!(t.total_rejections() > 0);
    }

    #[test]
    fn start_at_optimum_stays() {
        let mdp = m2();
        let star = DVector::from_vec(vec![0.5, 1.0]);
        let mut prov = v_provider("random", &MbConfig::new(MbAlgorithm::Vi), &SeededStream::new(1, 2)).unwrap();
        let cfg = SafeguardConfig { tol: 1e-300, max_iter: 5, ..Default::default() };
        let t = safeguarded_run_vi(&mdp, prov.as_mut(), &cfg, &star, None).unwrap();
        assert_eq!(t.initial_residual, 0.0);
        assert!(t.records.is_empty());
        assert_eq!(t.last, star);
    }

    #[test]
    fn backtracking_with_zero_and_pi_providers() {
        let mdp = m2();
        let cfg = SafeguardConfig { gamma_prime: 0.8, lambda: 0.5, max_iter: 100, ..Default::default() };
        let mut zero = ZeroProvider;
        let t = backtracked_run_vi(&mdp, &mut zero, &cfg, &zeros(2), None).unwrap();
        assert!(t.records.iter().all(|r| r.inner_backtracks < 5));
        assert!(t.final_residual() <= 1e-10);
        let mut pi = v_provider("pi", &MbConfig::new(MbAlgorithm::Pi), &SeededStream::new(0, 0)).unwrap();
        let t = backtracked_run_vi(&mdp, pi.as_mut(), &cfg, &zeros(2), None).unwrap();
        let mut prev = t.initial_residual;
        for r in &t.records {
            assert_eq!(r.inner_backtracks, 0);
            assert!(r.residual <= 0.5 * prev);
            prev = r.residual;
        }
    }

    #[test]
    fn ql_provider_and_zero_weight_are_plain_ql() {
        let mdp = m2s();
        let cfg = SafeguardConfig { max_iter: 300, eval_period: 10, ..Default::default() };
        let plain = run_model_free(&mdp, &ql_reference_config(&cfg), &QFunction::zeros(2, 2), &mut SeededStream::new(3, 4), None).unwrap();
        let mut ql = QlB;
        let a = safeguarded_run_ql(&mdp, &mut ql, &cfg, &QFunction::zeros(2, 2), &mut SeededStream::new(3, 4), None).unwrap();
        assert_eq!(a.last, plain.last);
        assert_eq!(a.residuals(), plain.residuals());
        let zero_beta = SafeguardConfig { beta: Schedule::Constant(0.0), ..cfg.clone() };
        let mut rnd = b_provider("random", &SeededStream::new(3, 4)).unwrap();
        let b = safeguarded_run_ql(&mdp, rnd.as_mut(), &zero_beta, &QFunction::zeros(2, 2), &mut SeededStream::new(3, 4), None).unwrap();
        assert_eq!(b.last, plain.last);
    }

    #[test]
    fn perturbation_is_bounded() {
        let mdp = m2s();
        let star = solve_optimal_oracle(&mdp).unwrap().q;
        let cfg = SafeguardConfig { max_iter: 2000, eval_period: 500, ..Default::default() };
        let mut sql = b_provider("sql", &SeededStream::new(0, 0)).unwrap();
        let t = safeguarded_run_ql(&mdp, sql.as_mut(), &cfg, &QFunction::zeros(2, 2), &mut SeededStream::new(0, 1), Some(&star)).unwrap();
        assert!(t.max_perturbation_ratio.unwrap() <= 1.0 + 1e-12);
        assert!(t.records.last().unwrap().dist_to_opt < 0.5);
    }

    #[test]
    fn schedule_conditions_are_enforced() {
        let bad = SafeguardConfig { alpha: Schedule::Constant(0.1), ..Default::default() };
        assert!(bad.check_ql_schedules().is_err());
        let bad = SafeguardConfig { alpha: Schedule::power(0.5), ..Default::default() };
        assert!(bad.check_ql_schedules().is_err());
        let bad = SafeguardConfig { beta: Schedule::Constant(0.3), ..Default::default() };
        assert!(bad.check_ql_schedules().is_err());
        assert!(SafeguardConfig::default().check_ql_schedules().is_ok());
        assert!(SafeguardConfig { beta: Schedule::Constant(0.0), ..Default::default() }.check_ql_schedules().is_ok());
    }
}

//! Finite state-action MDPs and the operators built on them.
//!
//! Costs are minimized throughout. Every expectation is accumulated left to
//! right in ascending next-state order and every argmin breaks ties toward the
//! lowest action index, so two code paths that evaluate the same formula get
//! bitwise identical results.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Real vector over states.
pub type ValueFunction = DVector<f64>;

/// Probability rows must sum to one within this tolerance.
pub const STOCHASTICITY_TOL: f64 = 1e-12;

/// Largest policy count the enumeration oracle accepts.
pub const ORACLE_POLICY_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n: usize,
    m: usize,
    gamma: f64,
    /// `(s, a)` at `s * m + a`.
    costs: Vec<f64>,
    /// `(s, a, s')` at `(s * m + a) * n + s'`.
    transitions: Vec<f64>,
    /// Set for models whose undiscounted Bellman operator has a fixed point
    /// (every policy eventually reaches a zero-cost absorbing state).
    undiscounted_safe: bool,
}

/// One violated model invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EmptySpace { n: usize, m: usize },
    Shape { what: &'static str, expected: usize, found: usize },
    Probability { s: usize, a: usize, next: usize, value: f64 },
    RowSum { s: usize, a: usize, sum: f64 },
    Gamma(f64),
    NonFiniteCost { s: usize, a: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySpace { n, m } => write!(f, "empty state or action space (n={n}, m={m})"),
            Violation::Shape { what, expected, found } => {
                write!(f, "{what} has {found} entries, expected {expected}")
            }
            Violation::Probability { s, a, next, value } => {
                write!(f, "P({next}|{s},{a}) = {value} outside [0, 1]")
            }
            Violation::RowSum { s, a, sum } => {
                write!(f, "transition row ({s},{a}) sums to {sum}")
            }
            Violation::Gamma(g) => write!(f, "discount factor {g} outside [0, 1)"),
            Violation::NonFiniteCost { s, a } => write!(f, "cost ({s},{a}) is not finite"),
        }
    }
}

/// Lists every violated invariant of `mdp`. An empty list means valid.
pub fn validate_mdp(mdp: &TabularMdp) -> Vec<Violation> {
    let (n, m) = (mdp.n, mdp.m);
    let mut out = Vec::new();
    if n == 0 || m == 0 {
        out.push(Violation::EmptySpace { n, m });
        return out;
    }
    if mdp.costs.len() != n * m {
        out.push(Violation::Shape { what: "costs", expected: n * m, found: mdp.costs.len() });
    }
    if mdp.transitions.len() != n * m * n {
        out.push(Violation::Shape {
            what: "transitions",
            expected: n * m * n,
            found: mdp.transitions.len(),
        });
    }
    if !out.is_empty() {
        return out;
    }
    for s in 0..n {
        for a in 0..m {
            if !mdp.cost(s, a).is_finite() {
                out.push(Violation::NonFiniteCost { s, a });
            }
            let row = mdp.transition_row(s, a);
            let mut sum = 0.0;
            for (next, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    out.push(Violation::Probability { s, a, next, value: p });
                }
                sum += p;
            }
            if !((sum - 1.0).abs() <= STOCHASTICITY_TOL) {
                out.push(Violation::RowSum { s, a, sum });
            }
        }
    }
    let g = mdp.gamma;
    let gamma_ok = (0.0..1.0).contains(&g) || (g == 1.0 && mdp.undiscounted_safe);
    if !gamma_ok {
        out.push(Violation::Gamma(g));
    }
    out
}

impl TabularMdp {
    /// Builds a model and rejects it unless [`validate_mdp`] passes.
    pub fn new(n: usize, m: usize, gamma: f64, costs: Vec<f64>, transitions: Vec<f64>) -> Result<Self> {
        Self::from_parts_unchecked(n, m, gamma, costs, transitions).validated()
    }

    /// Builds a model without checking it. Solvers still refuse invalid
    /// models, this only exists so invalid inputs can be reported on.
    pub fn from_parts_unchecked(
        n: usize,
        m: usize,
        gamma: f64,
        costs: Vec<f64>,
        transitions: Vec<f64>,
    ) -> Self {
        TabularMdp { n, m, gamma, costs, transitions, undiscounted_safe: false }
    }

    /// Nested-array constructor: `costs[s][a]`, `transitions[s][a][s']`.
    pub fn from_nested(gamma: f64, costs: &[Vec<f64>], transitions: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = costs.len();
        let m = costs.first().map_or(0, Vec::len);
        if transitions.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: transitions.len() });
        }
        let mut flat_c = Vec::with_capacity(n * m);
        let mut flat_p = Vec::with_capacity(n * m * n);
        for s in 0..n {
            if costs[s].len() != m || transitions[s].len() != m {
                return Err(Error::InvalidMdp(vec![format!("state {s} has a ragged action dimension")]));
            }
            flat_c.extend_from_slice(&costs[s]);
            for a in 0..m {
                if transitions[s][a].len() != n {
                    return Err(Error::InvalidMdp(vec![format!(
                        "transition row ({s},{a}) has {} entries, expected {n}",
                        transitions[s][a].len()
                    )]));
                }
                flat_p.extend_from_slice(&transitions[s][a]);
            }
        }
        Self::new(n, m, gamma, flat_c, flat_p)
    }

    fn validated(self) -> Result<Self> {
        let report = validate_mdp(&self);
        if report.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidMdp(report.iter().map(ToString::to_string).collect()))
        }
    }

    /// Re-validates; solvers call this before running.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_mdp(self);
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidMdp(report.iter().map(ToString::to_string).collect()))
        }
    }

    /// Marks the model as having a fixed point at gamma = 1.
    pub fn with_undiscounted_safe(mut self, flag: bool) -> Self {
        self.undiscounted_safe = flag;
        self
    }

    /// Same dynamics and costs under another discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        out.gamma = gamma;
        out.validated()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of state-action pairs.
    pub fn nm(&self) -> usize {
        self.n * self.m
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_undiscounted_safe(&self) -> bool {
        self.undiscounted_safe
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.costs[s * self.m + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.m + a) * self.n;
        &self.transitions[start..start + self.n]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.m + a) * self.n + next]
    }

    /// Costs as an `n x m` matrix.
    pub fn cost_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.m, |s, a| self.cost(s, a))
    }

    /// `E[v(s+) | s, a]`, summed in ascending `s+` order.
    #[inline]
    pub(crate) fn expectation(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (p, x) in self.transition_row(s, a).iter().zip(v) {
            acc += p * x;
        }
        acc
    }

    /// `c(s,a) + gamma * E[v(s+) | s, a]`.
    #[inline]
    pub(crate) fn action_value(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.cost(s, a) + self.gamma * self.expectation(s, a, v)
    }

    /// Bellman backup and greedy policy in one sweep. Panics on a length
    /// mismatch; the public wrappers check shapes first.
    pub(crate) fn backup_greedy(&self, v: &[f64]) -> (ValueFunction, Policy) {
        assert_eq!(v.len(), self.n, "value function length");
        let mut tv = DVector::zeros(self.n);
        let mut pi = vec![0; self.n];
        for s in 0..self.n {
            let mut best = self.action_value(s, 0, v);
            let mut arg = 0;
            for a in 1..self.m {
                let x = self.action_value(s, a, v);
                if x < best {
                    best = x;
                    arg = a;
                }
            }
            tv[s] = best;
            pi[s] = arg;
        }
        (tv, Policy(pi))
    }

    /// `T(v)`; panics on a length mismatch.
    pub(crate) fn backup(&self, v: &[f64]) -> ValueFunction {
        self.backup_greedy(v).0
    }

    /// Returns true when every transition row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.transitions.chunks(self.n).all(|row| row.iter().any(|&p| p == 1.0))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        file.into_mdp()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MdpFile::from_mdp(self))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// On-disk layout of a model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpFile {
    pub n: usize,
    pub m: usize,
    pub gamma: f64,
    pub costs: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undiscounted_safe: bool,
}

impl MdpFile {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (n, m) = (mdp.n, mdp.m);
        MdpFile {
            n,
            m,
            gamma: mdp.gamma,
            costs: (0..n).map(|s| (0..m).map(|a| mdp.cost(s, a)).collect()).collect(),
            transitions: (0..n)
                .map(|s| (0..m).map(|a| mdp.transition_row(s, a).to_vec()).collect())
                .collect(),
            undiscounted_safe: mdp.undiscounted_safe,
        }
    }

    pub fn into_mdp(self) -> Result<TabularMdp> {
        if self.costs.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: self.costs.len() });
        }
        if self.costs.iter().any(|row| row.len() != self.m) {
            return Err(Error::InvalidMdp(vec!["cost rows must have m entries".into()]));
        }
        let mdp = TabularMdp {
            n: self.n,
            m: self.m,
            gamma: self.gamma,
            costs: self.costs.into_iter().flatten().collect(),
            transitions: self.transitions.into_iter().flatten().flatten().collect(),
            undiscounted_safe: self.undiscounted_safe,
        };
        mdp.validated()
    }
}

/// Real function over state-action pairs, stored row-major by state.
#[derive(Clone, Debug, PartialEq)]
pub struct QFunction {
    n: usize,
    m: usize,
    values: DVector<f64>,
}

impl QFunction {
    pub fn zeros(n: usize, m: usize) -> Self {
        QFunction { n, m, values: DVector::zeros(n * m) }
    }

    pub fn from_fn(n: usize, m: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = DVector::zeros(n * m);
        for s in 0..n {
            for a in 0..m {
                values[s * m + a] = f(s, a);
            }
        }
        QFunction { n, m, values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        QFunction::from_fn(n, m, |s, a| rows[s][a])
    }

    /// Wraps a flat `(s, a) -> s * m + a` vector.
    pub fn from_vector(n: usize, m: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::DimensionMismatch { expected: n * m, found: values.len() });
        }
        Ok(QFunction { n, m, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.m + a]
    }

    pub fn set(&mut self, s: usize, a: usize, x: f64) {
        self.values[s * self.m + a] = x;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values.as_slice()[s * self.m..(s + 1) * self.m]
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    /// Same shape, new values.
    pub fn with_values(&self, values: DVector<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        QFunction { n: self.n, m: self.m, values }
    }

    /// Per-state minimum over actions.
    pub fn row_minima(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |s, _| self.row(s).iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n != mdp.n {
            return Err(Error::DimensionMismatch { expected: mdp.n, found: self.n });
        }
        if self.m != mdp.m {
            return Err(Error::DimensionMismatch { expected: mdp.m, found: self.m });
        }
        Ok(())
    }
}

/// Deterministic stationary policy: one action per state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Policy(pub Vec<usize>);

impl Policy {
    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.0.len() != mdp.n {
            return Err(Error::DimensionMismatch { expected: mdp.n, found: self.0.len() });
        }
        if let Some(&a) = self.0.iter().find(|&&a| a >= mdp.m) {
            return Err(Error::IndexOutOfRange { index: a, bound: mdp.m });
        }
        Ok(())
    }
}

/// One sampled next state per state-action pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NextStateSample {
    n: usize,
    m: usize,
    next: Vec<usize>,
}

impl NextStateSample {
    pub fn new(n: usize, m: usize, next: Vec<usize>) -> Result<Self> {
        if next.len() != n * m {
            return Err(Error::DimensionMismatch { expected: n * m, found: next.len() });
        }
        if let Some(&s) = next.iter().find(|&&s| s >= n) {
            return Err(Error::IndexOutOfRange { index: s, bound: n });
        }
        Ok(NextStateSample { n, m, next })
    }

    /// The only possible sample of a deterministic model.
    pub fn forced(mdp: &TabularMdp) -> Option<Self> {
        let mut next = Vec::with_capacity(mdp.nm());
        for s in 0..mdp.n {
            for a in 0..mdp.m {
                next.push(mdp.transition_row(s, a).iter().position(|&p| p == 1.0)?);
            }
        }
        Some(NextStateSample { n: mdp.n, m: mdp.m, next })
    }

    pub fn get(&self, s: usize, a: usize) -> usize {
        self.next[s * self.m + a]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.next
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n != mdp.n || self.m != mdp.m {
            return Err(Error::DimensionMismatch { expected: mdp.nm(), found: self.next.len() });
        }
        Ok(())
    }
}

/// Transition matrix and stage cost of the chain induced by a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMatrices {
    pub p_pi: DMatrix<f64>,
    pub c_pi: DVector<f64>,
}

fn check_len(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: v.len() });
    }
    Ok(())
}

/// Bellman optimality operator `T`.
pub fn bellman_v(mdp: &TabularMdp, v: &ValueFunction) -> Result<ValueFunction> {
    check_len(v.as_slice(), mdp.n)?;
    Ok(mdp.backup(v.as_slice()))
}

/// Greedy policy with respect to a value function.
pub fn greedy_policy_v(mdp: &TabularMdp, v: &ValueFunction) -> Result<Policy> {
    check_len(v.as_slice(), mdp.n)?;
    Ok(mdp.backup_greedy(v.as_slice()).1)
}

/// Per-state argmin of a Q-function, lowest index on ties.
pub fn greedy_policy_q(q: &QFunction) -> Policy {
    Policy(
        (0..q.n)
            .map(|s| {
                let row = q.row(s);
                let mut arg = 0;
                for a in 1..row.len() {
                    if row[a] < row[arg] {
                        arg = a;
                    }
                }
                arg
            })
            .collect(),
    )
}

/// Exact Q-function backup: `c(s,a) + gamma * E[min_a' q(s+, a')]`.
pub fn bellman_q_exact(mdp: &TabularMdp, q: &QFunction) -> Result<QFunction> {
    q.check_shape(mdp)?;
    let mins = q.row_minima();
    Ok(QFunction::from_fn(mdp.n, mdp.m, |s, a| mdp.action_value(s, a, mins.as_slice())))
}

/// Sampled Q-function backup: `c(s,a) + gamma * min_a' q(sample(s,a), a')`.
pub fn bellman_q_sampled(mdp: &TabularMdp, q: &QFunction, sample: &NextStateSample) -> Result<QFunction> {
    q.check_shape(mdp)?;
    sample.check(mdp)?;
    Ok(sampled_backup(mdp, q, sample))
}

pub(crate) fn sampled_backup(mdp: &TabularMdp, q: &QFunction, sample: &NextStateSample) -> QFunction {
    let mins = q.row_minima();
    QFunction::from_fn(mdp.n, mdp.m, |s, a| mdp.cost(s, a) + mdp.gamma * mins[sample.get(s, a)])
}

pub fn policy_matrices(mdp: &TabularMdp, pi: &Policy) -> Result<PolicyMatrices> {
    pi.check(mdp)?;
    let n = mdp.n;
    let p_pi = DMatrix::from_fn(n, n, |s, t| mdp.prob(s, pi.0[s], t));
    let c_pi = DVector::from_fn(n, |s, _| mdp.cost(s, pi.0[s]));
    Ok(PolicyMatrices { p_pi, c_pi })
}

/// One-hot `(nm) x (nm)` matrix: row `(s,a)` has its 1 at
/// `(sample(s,a), greedy_q(sample(s,a)))`.
pub fn sampled_transition_matrix(q: &QFunction, sample: &NextStateSample) -> Result<DMatrix<f64>> {
    if q.n != sample.n || q.m != sample.m {
        return Err(Error::DimensionMismatch { expected: q.n * q.m, found: sample.next.len() });
    }
    let m = q.m;
    let pi = greedy_policy_q(q);
    let nm = q.n * m;
    let mut out = DMatrix::zeros(nm, nm);
    for s in 0..q.n {
        for a in 0..m {
            let next = sample.get(s, a);
            out[(s * m + a, next * m + pi.0[next])] = 1.0;
        }
    }
    Ok(out)
}

/// Expected state-action transition matrix under the greedy policy of `q`.
pub fn exact_state_action_matrix(mdp: &TabularMdp, q: &QFunction) -> Result<DMatrix<f64>> {
    q.check_shape(mdp)?;
    let (n, m) = (mdp.n, mdp.m);
    let pi = greedy_policy_q(q);
    let mut out = DMatrix::zeros(n * m, n * m);
    for s in 0..n {
        for a in 0..m {
            for (t, &p) in mdp.transition_row(s, a).iter().enumerate() {
                out[(s * m + a, t * m + pi.0[t])] = p;
            }
        }
    }
    Ok(out)
}

/// Jacobian of `T` at `v` plus the greedy margin certifying differentiability.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub matrix: DMatrix<f64>,
    pub policy: Policy,
    /// Smallest gap between the best and second-best action value over
    /// states; infinite for single-action models.
    pub margin: f64,
}

pub fn jacobian_t(mdp: &TabularMdp, v: &ValueFunction) -> Result<Jacobian> {
    check_len(v.as_slice(), mdp.n)?;
    let (_, policy) = mdp.backup_greedy(v.as_slice());
    let mut margin = f64::INFINITY;
    for s in 0..mdp.n {
        let best = mdp.action_value(s, policy.0[s], v.as_slice());
        for a in (0..mdp.m).filter(|&a| a != policy.0[s]) {
            margin = margin.min(mdp.action_value(s, a, v.as_slice()) - best);
        }
    }
    let pm = policy_matrices(mdp, &policy)?;
    Ok(Jacobian { matrix: pm.p_pi * mdp.gamma, policy, margin })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingKind {
    /// `-(1/beta) log sum exp(-beta q)`
    Softmin,
    /// `-(1/omega) log((1/m) sum exp(-omega q))`
    Mellowmin,
}

/// Smoothed minimum of one row, evaluated with a min-shift.
pub fn smoothed_min(row: &[f64], kind: SmoothingKind, temperature: f64) -> f64 {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for &x in row {
        sum += (-temperature * (x - lo)).exp();
    }
    match kind {
        SmoothingKind::Softmin => lo - sum.ln() / temperature,
        SmoothingKind::Mellowmin => lo - (sum.ln() - (row.len() as f64).ln()) / temperature,
    }
}

/// `bellman_q_exact` with the inner minimum replaced by a smoothed one.
pub fn smoothed_bellman_q(
    mdp: &TabularMdp,
    q: &QFunction,
    kind: SmoothingKind,
    temperature: f64,
) -> Result<QFunction> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    q.check_shape(mdp)?;
    let inner = DVector::from_fn(mdp.n, |s, _| smoothed_min(q.row(s), kind, temperature));
    Ok(QFunction::from_fn(mdp.n, mdp.m, |s, a| mdp.action_value(s, a, inner.as_slice())))
}

/// Sampled counterpart of [`smoothed_bellman_q`].
pub fn smoothed_bellman_q_sampled(
    mdp: &TabularMdp,
    q: &QFunction,
    sample: &NextStateSample,
    kind: SmoothingKind,
    temperature: f64,
) -> Result<QFunction> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    q.check_shape(mdp)?;
    sample.check(mdp)?;
    let inner = DVector::from_fn(mdp.n, |s, _| smoothed_min(q.row(s), kind, temperature));
    Ok(QFunction::from_fn(mdp.n, mdp.m, |s, a| {
        mdp.cost(s, a) + mdp.gamma * inner[sample.get(s, a)]
    }))
}

const POLISH_SWEEPS: usize = 200_000;

/// Solves `(I - gamma P_pi) v = c_pi` by LU with partial pivoting.
///
/// The LU solution is then polished into an exact floating-point fixed
/// point of the policy's own backup (same arithmetic as [`bellman_v`]), so
/// an optimal policy's value has Bellman residual exactly 0 whenever the
/// policy is greedy for it.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &Policy) -> Result<ValueFunction> {
    let pm = policy_matrices(mdp, pi)?;
    let n = mdp.n;
    let a = DMatrix::identity(n, n) - &pm.p_pi * mdp.gamma;
    let v = linalg::lu_solve(a.clone(), &pm.c_pi)
        .ok_or_else(|| Error::SingularSystem(format!("I - gamma P_pi for policy {:?}", pi.0)))?;
    let scale = 1.0 + linalg::inf_norm(pm.c_pi.as_slice());
    let lin_residual = linalg::inf_norm((&a * &v - &pm.c_pi).as_slice());
    if !(lin_residual <= 1e-10 * scale) {
        return Err(Error::SingularSystem(format!(
            "policy evaluation residual {lin_residual:e} for policy {:?}",
            pi.0
        )));
    }
    if mdp.gamma < 1.0 {
        if let Some(exact) = polish(mdp, pi, &v) {
            return Ok(exact);
        }
    }
    Ok(v)
}

/// Plain sweeps of a monotone map can cycle at the last bit. Starting from
/// a point the rounded backup does not increase, Gauss-Seidel sweeps only
/// move down and must stop on a finite set of floats.
fn polish(mdp: &TabularMdp, pi: &Policy, v: &ValueFunction) -> Option<ValueFunction> {
    let backup = |x: &[f64], s: usize| mdp.action_value(s, pi.0[s], x);
    let vscale = 1.0 + linalg::inf_norm(v.as_slice());
    let mut delta = 16.0 * f64::EPSILON * vscale / (1.0 - mdp.gamma);
    let mut u = None;
    for _ in 0..64 {
        let cand: Vec<f64> = v.iter().map(|x| x + delta).collect();
        if (0..mdp.n).all(|s| backup(&cand, s) <= cand[s]) {
            u = Some(cand);
            break;
        }
        delta *= 2.0;
    }
    let mut u = u?;
    for _ in 0..POLISH_SWEEPS {
        let mut moved = false;
        for s in 0..mdp.n {
            let x = backup(&u, s);
            if x != u[s] {
                u[s] = x;
                moved = true;
            }
        }
        if !moved {
            return Some(DVector::from_vec(u));
        }
    }
    None
}

/// Optimal value, Q-function and a minimizing policy.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalSolution {
    pub v: ValueFunction,
    pub q: QFunction,
    pub policy: Policy,
}

pub(crate) fn q_from_v(mdp: &TabularMdp, v: &ValueFunction) -> QFunction {
    QFunction::from_fn(mdp.n, mdp.m, |s, a| mdp.action_value(s, a, v.as_slice()))
}

/// Brute-force optimum: evaluates every deterministic policy.
pub fn solve_optimal_oracle(mdp: &TabularMdp) -> Result<OptimalSolution> {
    mdp.ensure_valid()?;
    if mdp.gamma >= 1.0 {
        return Err(Error::UndiscountedUnsupported("the enumeration oracle"));
    }
    let (n, m) = (mdp.n, mdp.m);
    let count = (m as f64).powi(n as i32);
    if count > ORACLE_POLICY_LIMIT {
        return Err(Error::OracleTooLarge { policies: count });
    }
    let mut actions = vec![0usize; n];
    let mut values = Vec::with_capacity(count as usize);
    loop {
        let pi = Policy(actions.clone());
        let v = policy_evaluation(mdp, &pi)?;
        values.push((pi, v));
        // odometer, last state fastest
        let mut i = n;
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            actions[i] += 1;
            if actions[i] < m {
                break;
            }
            actions[i] = 0;
            if i == 0 {
                i = usize::MAX;
                break;
            }
        }
        if i == usize::MAX {
            break;
        }
    }
    let mut v_min = DVector::from_element(n, f64::INFINITY);
    for (_, v) in &values {
        for s in 0..n {
            v_min[s] = v_min[s].min(v[s]);
        }
    }
    let gap = |v: &ValueFunction| (0..n).map(|s| v[s] - v_min[s]).fold(0.0, f64::max);
    let mut best = 0;
    for (i, (_, v)) in values.iter().enumerate() {
        if gap(v) < gap(&values[best].1) {
            best = i;
        }
    }
    let policy = values.swap_remove(best).0;
    let q = q_from_v(mdp, &v_min);
    Ok(OptimalSolution { v: v_min, q, policy })
}

/// Optimum by policy iteration run until the greedy policy repeats.
pub fn solve_optimal_pi(mdp: &TabularMdp) -> Result<OptimalSolution> {
    mdp.ensure_valid()?;
    if mdp.gamma >= 1.0 {
        return Err(Error::UndiscountedUnsupported("policy iteration"));
    }
    let mut v = DVector::zeros(mdp.n);
    let mut policy = mdp.backup_greedy(v.as_slice()).1;
    for _ in 0..10_000 {
        v = policy_evaluation(mdp, &policy)?;
        let next = mdp.backup_greedy(v.as_slice()).1;
        if next == policy {
            break;
        }
        policy = next;
    }
    let q = q_from_v(mdp, &v);
    Ok(OptimalSolution { v, q, policy })
}

/// Oracle that picks enumeration when small enough and policy iteration otherwise.
pub fn solve_optimal(mdp: &TabularMdp) -> Result<OptimalSolution> {
    let count = (mdp.m as f64).powi(mdp.n as i32);
    if count <= 4096.0 {
        solve_optimal_oracle(mdp)
    } else {
        solve_optimal_pi(mdp)
    }
}

/// `max_i |a_i - b_i|`.
pub fn residual_inf(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(b, a.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

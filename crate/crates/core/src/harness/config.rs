//! Experiment and batch descriptions (JSON).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures;
use crate::mdp::TabularMdp;
use crate::model_based::{MbAlgorithm, MbConfig, PidGains};
use crate::model_free::{MfAlgorithm, MfConfig, Smoothing};
use crate::problems::{generate, GeneratorSpec};
use crate::safeguards::SafeguardConfig;
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSource {
    Generator(GeneratorSpec),
    /// MDP JSON file; relative paths resolve against the batch file.
    File(PathBuf),
    Fixture(Fixture),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Fixture {
    M2,
    M2s,
    /// Ring of `n` states with alternating step costs.
    Ring { n: usize, gamma: f64 },
}

impl ProblemSource {
    pub fn build(&self, base_dir: Option<&Path>) -> Result<TabularMdp> {
        match self {
            ProblemSource::Generator(spec) => generate(spec),
            ProblemSource::File(path) => match base_dir {
                Some(dir) if path.is_relative() => TabularMdp::load(dir.join(path)),
                _ => TabularMdp::load(path),
            },
            ProblemSource::Fixture(Fixture::M2) => Ok(fixtures::m2()),
            ProblemSource::Fixture(Fixture::M2s) => Ok(fixtures::m2s()),
            ProblemSource::Fixture(Fixture::Ring { n, gamma }) => {
                if *n < 2 || n % 2 != 0 || !(*gamma >= 0.0 && *gamma < 1.0) {
                    return Err(Error::InvalidSpec(format!("ring needs even n >= 2 and gamma in [0, 1), got n={n}, gamma={gamma}")));
                }
                Ok(fixtures::signed_ring(*n, *gamma))
            }
        }
    }
}

/// Coefficients; anything left out takes the algorithm default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<PidGains>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<Smoothing>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: String,
    #[serde(default)]
    pub params: AlgorithmParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SafeguardKind {
    /// Reject candidates above the residual envelope.
    #[serde(rename = "thm1")]
    Envelope,
    /// Backtracking line search.
    #[serde(rename = "thm2")]
    Backtracking,
    /// Clipped perturbation of Q-learning.
    #[serde(rename = "thm3")]
    PerturbedQl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeguardSpec {
    pub kind: SafeguardKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Schedule>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_max_iter() -> usize {
    1000
}
fn default_tol() -> f64 {
    1e-10
}
fn default_eval_period() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub problem: ProblemSource,
    pub algorithm: AlgorithmSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safeguard: Option<SafeguardSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_eval_period")]
    pub eval_period: usize,
    /// Fill the wall_ns column. Off by default so outputs stay byte-stable.
    #[serde(default)]
    pub timing: bool,
}

/// The solver an experiment resolves to.
#[derive(Clone, Debug, PartialEq)]
pub enum Plan {
    ModelBased(MbConfig),
    ModelFree(MfConfig),
    /// Envelope or backtracking guard around a value-space provider (a model-based name, `random` or `zero`).
    GuardedVi { kind: SafeguardKind, provider: String, base: MbConfig, guard: SafeguardConfig },
    /// Perturbed Q-learning around a Q-space provider (`ql`, `sql`, `random` or `zero`).
    GuardedQl { provider: String, guard: SafeguardConfig },
}

const V_EXTRA: [&str; 2] = ["random", "zero"];
const B_NAMES: [&str; 4] = ["ql", "sql", "random", "zero"];

impl ExperimentConfig {
    pub fn plan(&self) -> Result<Plan> {
        let name = self.algorithm.name.as_str();
        let p = &self.algorithm.params;
        let mb = |alg: MbAlgorithm| {
            let mut c = MbConfig::new(alg).with_max_iter(self.max_iter).with_tol(self.tol);
            if let Some(a) = p.alpha {
                c.alpha = a;
            }
            c.beta = p.beta;
            c.gains = p.gains.unwrap_or_default();
            c.memory = p.memory.unwrap_or(c.memory);
            c.power_iters = p.power_iters.unwrap_or(c.power_iters);
            c.timing = self.timing;
            c
        };
        let guard = |spec: &SafeguardSpec| {
            let mut g = SafeguardConfig {
                max_iter: self.max_iter,
                tol: self.tol,
                eval_period: self.eval_period,
                timing: self.timing,
                ..SafeguardConfig::default()
            };
            g.gamma_prime = spec.gamma_prime.unwrap_or(g.gamma_prime);
            g.lambda = spec.lambda.unwrap_or(g.lambda);
            g.rho = spec.rho.unwrap_or(g.rho);
            g.alpha = spec.alpha.unwrap_or(g.alpha);
            g.beta = spec.beta.unwrap_or(g.beta);
            g
        };
        let unknown = |kind: &'static str| Error::UnknownName { kind, name: name.to_string() };
        match &self.safeguard {
            None => {
                if let Some(alg) = MbAlgorithm::from_name(name) {
                    return Ok(Plan::ModelBased(mb(alg)));
                }
                let alg = MfAlgorithm::from_name(name).ok_or_else(|| unknown("algorithm"))?;
                let mut c = MfConfig::new(alg).with_max_iter(self.max_iter).with_eval_period(self.eval_period);
                c.alpha = p.alpha;
                c.beta = p.beta;
                c.delta = p.delta;
                c.eta = p.eta.unwrap_or(c.eta);
                c.gains = p.gains.unwrap_or_default();
                c.memory = p.memory.unwrap_or(c.memory);
                c.batch = p.batch.unwrap_or(c.batch);
                c.ridge = p.ridge.unwrap_or(c.ridge);
                c.power_iters = p.power_iters.unwrap_or(c.power_iters);
                c.smoothing = p.smoothing;
                c.timing = self.timing;
                Ok(Plan::ModelFree(c))
            }
            Some(spec) if spec.kind == SafeguardKind::PerturbedQl => {
                if !B_NAMES.contains(&name) {
                    return Err(unknown("QL safeguard provider"));
                }
                Ok(Plan::GuardedQl { provider: name.to_string(), guard: guard(spec) })
            }
            Some(spec) => {
                let base = match MbAlgorithm::from_name(name) {
                    Some(alg) => mb(alg),
                    None if V_EXTRA.contains(&name) => mb(MbAlgorithm::Vi),
                    None => return Err(unknown("value-space provider")),
                };
                Ok(Plan::GuardedVi { kind: spec.kind, provider: name.to_string(), base, guard: guard(spec) })
            }
        }
    }

    fn check(&self) -> Result<()> {
        if self.experiment_id.is_empty() {
            return Err(Error::InvalidConfig("experiment_id must not be empty".into()));
        }
        if self.eval_period == 0 {
            return Err(Error::InvalidConfig(format!("{}: eval_period must be at least 1", self.experiment_id)));
        }
        self.plan().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchFile {
    #[serde(default)]
    pub master_seed: u64,
    pub experiments: Vec<ExperimentConfig>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BatchRepr {
    Bare(Vec<ExperimentConfig>),
    Full(BatchFile),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub master_seed: u64,
    pub experiments: Vec<ExperimentConfig>,
    /// Directory that relative problem files resolve against.
    pub base_dir: Option<PathBuf>,
}

impl Batch {
    pub fn new(experiments: Vec<ExperimentConfig>, master_seed: u64) -> Result<Self> {
        let batch = Batch { master_seed, experiments, base_dir: None };
        batch.check()?;
        Ok(batch)
    }

    /// Accepts either a bare array of experiments or
    /// `{"master_seed": .., "experiments": [..]}`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let (master_seed, experiments) = match serde_json::from_str(text)? {
            BatchRepr::Bare(e) => (0, e),
            BatchRepr::Full(f) => (f.master_seed, f.experiments),
        };
        Batch::new(experiments, master_seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut batch = Batch::from_json_str(&std::fs::read_to_string(path)?)?;
        batch.base_dir = path.parent().map(Path::to_path_buf);
        Ok(batch)
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.experiments {
            if !seen.insert(e.experiment_id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate experiment_id {:?}", e.experiment_id)));
            }
            e.check()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_batch_shapes() {
        let one = r#"[{"experiment_id":"a","problem":{"fixture":"m2"},"algorithm":{"name":"vi"}}]"#;
        let b = Batch::from_json_str(one).unwrap();
        assert_eq!(b.master_seed, 0);
        assert_eq!(b.experiments[0].seeds, vec![0]);
        let full = r#"{"master_seed":9,"experiments":[
            {"experiment_id":"g","problem":{"generator":{"family":"garnet","n":5,"m":2,"branching":2,"gamma":0.9,"seed":1}},
             "algorithm":{"name":"zql","params":{"alpha":{"scale":1.0,"exponent":0.85}}},"seeds":[1,2]},
            {"experiment_id":"s","problem":{"fixture":{"ring":{"n":4,"gamma":0.9}}},
             "algorithm":{"name":"random"},"safeguard":{"kind":"thm1","gamma_prime":0.95}}]}"#;
        let b = Batch::from_json_str(full).unwrap();
        assert_eq!(b.master_seed, 9);
        assert!(matches!(b.experiments[0].plan().unwrap(), Plan::ModelFree(_)));
        assert!(matches!(b.experiments[1].plan().unwrap(), Plan::GuardedVi { kind: SafeguardKind::Envelope, .. }));
    }

    #[test]
    fn rejects_bad_batches() {
        let dup = r#"[{"experiment_id":"a","problem":{"fixture":"m2"},"algorithm":{"name":"vi"}},
                      {"experiment_id":"a","problem":{"fixture":"m2"},"algorithm":{"name":"pi"}}]"#;
        assert!(matches!(Batch::from_json_str(dup), Err(Error::InvalidConfig(_))));
        let unknown = r#"[{"experiment_id":"a","problem":{"fixture":"m2"},"algorithm":{"name":"magic"}}]"#;
        assert!(matches!(Batch::from_json_str(unknown), Err(Error::UnknownName { .. })));
        let bad_provider = r#"[{"experiment_id":"a","problem":{"fixture":"m2s"},"algorithm":{"name":"vi"},"safeguard":{"kind":"thm3"}}]"#;
        assert!(matches!(Batch::from_json_str(bad_provider), Err(Error::UnknownName { .. })));
        let typo = r#"[{"experiment_id":"a","problem":{"fixture":"m2"},"algorithm":{"name":"vi","params":{"alpah":1}}}]"#;
        assert!(Batch::from_json_str(typo).is_err());
    }
}

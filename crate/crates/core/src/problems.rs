//! Seeded next-state sampling and benchmark model families.

use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{NextStateSample, TabularMdp};

/// Counter-based random stream.
///
/// Draw `t` of the stream reads its words from a fixed offset of the ChaCha8
/// keystream selected by `(master_seed, stream_id)`, so the value at a given
/// `(t, index)` never depends on how many values earlier draws consumed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededStream {
    master_seed: u64,
    stream_id: u64,
    draws: u64,
}

/// Words reserved per draw (2^36, i.e. 2^35 u64 values).
const DRAW_SHIFT: u32 = 36;

impl SeededStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        SeededStream { master_seed, stream_id, draws: 0 }
    }

    /// Stream owned by one `(experiment, seed)` run.
    pub fn for_run(master_seed: u64, experiment_id: &str, seed: u64) -> Self {
        Self::new(master_seed, stream_id_for(experiment_id, seed))
    }

    /// Independent stream derived from this one's identity (not its position).
    pub fn fork(&self, tag: u64) -> Self {
        let mut h = Fnv::new();
        h.write(&self.stream_id.to_le_bytes());
        h.write(b"/fork/");
        h.write(&tag.to_le_bytes());
        Self::new(self.master_seed, h.finish())
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.draws
    }

    fn rng_for_draw(&self, t: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos((t as u128) << DRAW_SHIFT);
        rng
    }

    /// `len` uniforms in `[0, 1)` for the next draw.
    pub fn next_uniforms(&mut self, len: usize) -> Vec<f64> {
        let mut rng = self.rng_for_draw(self.draws);
        self.draws += 1;
        (0..len).map(|_| unit_f64(rng.random::<u64>())).collect()
    }

    /// Vector with entries uniform in `[lo, hi)` for the next draw.
    pub fn uniform_vector(&mut self, len: usize, lo: f64, hi: f64) -> DVector<f64> {
        let u = self.next_uniforms(len);
        DVector::from_iterator(len, u.into_iter().map(|x| lo + (hi - lo) * x))
    }
}

fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// 64-bit FNV-1a, used to turn `(experiment_id, seed)` into a stream id.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

pub fn stream_id_for(experiment_id: &str, seed: u64) -> u64 {
    let mut h = Fnv::new();
    h.write(experiment_id.as_bytes());
    h.write(&[0xff]);
    h.write(&seed.to_le_bytes());
    h.finish()
}

/// Index `i` with `cdf(i-1) <= u < cdf(i)`, scanning states in ascending
/// order. Rounding slack at the top falls to the last positive entry.
fn inverse_cdf(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One synchronous sample: an independent next state for every pair.
pub fn sample_next_states(mdp: &TabularMdp, stream: &mut SeededStream) -> NextStateSample {
    let (n, m) = (mdp.n(), mdp.m());
    let u = stream.next_uniforms(n * m);
    let mut next = Vec::with_capacity(n * m);
    for s in 0..n {
        for a in 0..m {
            next.push(inverse_cdf(mdp.transition_row(s, a), u[s * m + a]));
        }
    }
    NextStateSample::new(n, m, next).expect("inverse CDF yields valid states")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Garnet,
    Chain,
    AbsorbingChain,
    Gridworld,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n: usize,
    /// Actions; chains need 2 and grids 4.
    pub m: usize,
    /// Successors per pair (garnet only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branching: Option<usize>,
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn garnet(n: usize, m: usize, branching: usize, gamma: f64, seed: u64) -> Self {
        GeneratorSpec { family: Family::Garnet, n, m, branching: Some(branching), gamma, seed }
    }

    pub fn chain(n: usize, gamma: f64) -> Self {
        GeneratorSpec { family: Family::Chain, n, m: 2, branching: None, gamma, seed: 0 }
    }

    pub fn absorbing_chain(n: usize, gamma: f64) -> Self {
        GeneratorSpec { family: Family::AbsorbingChain, n, m: 2, branching: None, gamma, seed: 0 }
    }

    pub fn gridworld(n: usize, gamma: f64, seed: u64) -> Self {
        GeneratorSpec { family: Family::Gridworld, n, m: 4, branching: None, gamma, seed }
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n == 0 || self.m == 0 {
            return bad(format!("sizes must be positive (n={}, m={})", self.n, self.m));
        }
        let gamma_max_ok = self.gamma < 1.0 || (self.gamma == 1.0 && self.family == Family::AbsorbingChain);
        if !(self.gamma >= 0.0 && gamma_max_ok) {
            return bad(format!("gamma {} not allowed for {:?}", self.gamma, self.family));
        }
        match self.family {
            Family::Garnet => match self.branching {
                Some(b) if b >= 1 && b <= self.n => Ok(()),
                Some(b) => bad(format!("branching {b} must lie in [1, n={}]", self.n)),
                None => bad("garnet needs a branching factor".into()),
            },
            Family::Chain | Family::AbsorbingChain if self.m != 2 => {
                bad(format!("chains have 2 actions, got m={}", self.m))
            }
            Family::Gridworld if self.m != 4 => bad(format!("grids have 4 actions, got m={}", self.m)),
            _ if self.branching.is_some() => bad("branching only applies to garnet".into()),
            _ => Ok(()),
        }
    }
}

/// Builds a model from a family description. Identical specs give bitwise
/// identical models.
pub fn generate(spec: &GeneratorSpec) -> Result<TabularMdp> {
    spec.check()?;
    let (n, m) = (spec.n, spec.m);
    let mut costs = vec![0.0; n * m];
    let mut p = vec![0.0; n * m * n];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let idx = |s: usize, a: usize, t: usize| (s * m + a) * n + t;
    let mut safe = false;
    match spec.family {
        Family::Garnet => {
            let b = spec.branching.unwrap_or(1);
            for s in 0..n {
                for a in 0..m {
                    let mut succ = index::sample(&mut rng, n, b).into_vec();
                    succ.sort_unstable();
                    let raw: Vec<f64> = (0..b).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                    let total: f64 = raw.iter().sum();
                    for (&t, w) in succ.iter().zip(&raw) {
                        p[idx(s, a, t)] = w / total;
                    }
                    costs[s * m + a] = rng.random::<f64>();
                }
            }
        }
        Family::Chain | Family::AbsorbingChain => {
            let absorbing = spec.family == Family::AbsorbingChain;
            let goal = n - 1;
            for s in 0..n {
                let left = s.saturating_sub(1);
                let right = (s + 1).min(goal);
                if absorbing && s == goal {
                    p[idx(s, 0, s)] = 1.0;
                    p[idx(s, 1, s)] = 1.0;
                    continue;
                }
                p[idx(s, 0, left)] = 1.0;
                costs[s * m] = 1.0;
                p[idx(s, 1, right)] = 1.0;
                costs[s * m + 1] = if s == goal { 0.0 } else { 1.0 };
            }
            safe = absorbing;
        }
        Family::Gridworld => {
            let width = (n as f64).sqrt().ceil() as usize;
            let goal = n - 1;
            let blocked: Vec<bool> =
                (0..n).map(|s| s != 0 && s != goal && rng.random::<f64>() < 0.2).collect();
            for s in 0..n {
                let (r, c) = (s / width, s % width);
                // up, down, left, right
                let moves = [
                    (r > 0).then(|| s - width),
                    (s + width < n).then(|| s + width),
                    (c > 0).then(|| s - 1),
                    (c + 1 < width && s + 1 < n).then(|| s + 1),
                ];
                for (a, target) in moves.into_iter().enumerate() {
                    let t = if s == goal || blocked[s] {
                        s
                    } else {
                        target.filter(|&t| !blocked[t]).unwrap_or(s)
                    };
                    p[idx(s, a, t)] = 1.0;
                    costs[s * m + a] = if s == goal { 0.0 } else { 1.0 };
                }
            }
        }
    }
    let mdp = TabularMdp::from_parts_unchecked(n, m, spec.gamma, costs, p).with_undiscounted_safe(safe);
    mdp.ensure_valid()?;
    Ok(mdp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{m2, m2s};
    use crate::mdp::{bellman_q_exact, bellman_q_sampled, bellman_v, validate_mdp, QFunction};

    #[test]
    fn forced_sample_on_deterministic_model() {
        let mdp = m2();
        let forced = NextStateSample::forced(&mdp).unwrap();
        for seed in [0, 1, 99] {
            let mut stream = SeededStream::new(seed, 3);
            for _ in 0..5 {
                assert_eq!(sample_next_states(&mdp, &mut stream), forced);
            }
        }
    }

    #[test]
    fn switch_frequency_on_m2s() {
        let mdp = m2s();
        let mut stream = SeededStream::new(2024, 1);
        let draws = 100_000;
        let hits = (0..draws).filter(|_| sample_next_states(&mdp, &mut stream).get(0, 1) == 1).count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.8).abs() <= 0.012, "frequency {freq}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = SeededStream::new(5, 8);
        let mut b = SeededStream::new(5, 8);
        let mut c = SeededStream::new(5, 9);
        let ua = a.next_uniforms(16);
        assert_eq!(ua, b.next_uniforms(16));
        assert_ne!(ua, c.next_uniforms(16));
        // draw t does not depend on how much draw t-1 consumed
        let mut short = SeededStream::new(5, 8);
        short.next_uniforms(1);
        assert_eq!(a.next_uniforms(4), short.next_uniforms(4));
    }

    #[test]
    fn stream_ids_differ_by_seed() {
        assert_ne!(stream_id_for("a", 0), stream_id_for("a", 1));
        assert_ne!(stream_id_for("a", 0), stream_id_for("b", 0));
    }

    #[test]
    fn families_validate() {
        let specs = [
            GeneratorSpec::garnet(50, 5, 3, 0.9, 7),
            GeneratorSpec::chain(6, 0.9),
            GeneratorSpec::absorbing_chain(20, 1.0),
            GeneratorSpec::gridworld(16, 0.95, 3),
            GeneratorSpec::chain(1, 0.5),
            GeneratorSpec::gridworld(1, 0.5, 0),
        ];
        for spec in &specs {
            let mdp = generate(spec).unwrap();
            assert!(validate_mdp(&mdp).is_empty(), "{spec:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GeneratorSpec::garnet(20, 4, 3, 0.9, 11);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = GeneratorSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn garnet_rows_have_branching_successors() {
        let mdp = generate(&GeneratorSpec::garnet(10, 3, 4, 0.9, 1)).unwrap();
        for s in 0..10 {
            for a in 0..3 {
                assert_eq!(mdp.transition_row(s, a).iter().filter(|&&p| p > 0.0).count(), 4);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&GeneratorSpec::garnet(3, 2, 4, 0.9, 0)).is_err());
        assert!(generate(&GeneratorSpec::garnet(0, 2, 1, 0.9, 0)).is_err());
        assert!(generate(&GeneratorSpec::chain(4, 1.0)).is_err());
        assert!(generate(&GeneratorSpec { m: 3, ..GeneratorSpec::chain(4, 0.5) }).is_err());
    }

    #[test]
    fn two_state_chain_layout() {
        let mdp = generate(&GeneratorSpec::chain(2, 0.5)).unwrap();
        // left from 0 stays, right from 0 moves to the free self-loop
        assert_eq!(mdp.transition_row(0, 0), &[1.0, 0.0]);
        assert_eq!(mdp.transition_row(0, 1), &[0.0, 1.0]);
        assert_eq!(mdp.transition_row(1, 1), &[0.0, 1.0]);
        assert_eq!((mdp.cost(0, 0), mdp.cost(0, 1), mdp.cost(1, 0), mdp.cost(1, 1)), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn absorbing_chain_distance_fixed_point() {
        let n = 20;
        let mdp = generate(&GeneratorSpec::absorbing_chain(n, 1.0)).unwrap();
        let dist = DVector::from_fn(n, |s, _| (n - 1 - s) as f64);
        assert_eq!(bellman_v(&mdp, &dist).unwrap(), dist);
    }

    #[test]
    fn sampled_backup_is_unbiased_on_m2s() {
        // enumerate the only random pair (0,1): next state 0 w.p. 0.2, 1 w.p. 0.8
        let mdp = m2s();
        let q = QFunction::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]);
        let forced = NextStateSample::forced(&crate::fixtures::m2()).unwrap();
        let mut mean = QFunction::zeros(2, 2).into_vector();
        for (next, w) in [(0usize, 0.2), (1usize, 0.8)] {
            let mut raw = forced.as_slice().to_vec();
            raw[1] = next;
            let sample = NextStateSample::new(2, 2, raw).unwrap();
            mean += bellman_q_sampled(&mdp, &q, &sample).unwrap().into_vector() * w;
        }
        let exact = bellman_q_exact(&mdp, &q).unwrap();
        assert!((mean - exact.as_vector()).amax() <= 1e-12);
    }

    #[test]
    fn empirical_operator_error_shrinks_like_root_n() {
        let mdp = m2s();
        let q = QFunction::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]);
        let exact = bellman_q_exact(&mdp, &q).unwrap().into_vector();
        let rms = |batch: usize, reps: usize, seed: u64| {
            let mut stream = SeededStream::new(seed, batch as u64);
            let mut sq = 0.0;
            for _ in 0..reps {
                let mut acc = DVector::zeros(4);
                for _ in 0..batch {
                    let s = sample_next_states(&mdp, &mut stream);
                    acc += bellman_q_sampled(&mdp, &q, &s).unwrap().into_vector();
                }
                let err = (acc / batch as f64 - &exact).amax();
                sq += err * err;
            }
            (sq / reps as f64).sqrt()
        };
        let ratio = rms(100, 100, 1) / rms(10_000, 100, 2);
        assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}");
    }
}

//! Small hand-checkable models used by tests, examples and the harness.

use crate::mdp::{Policy, TabularMdp};

const M2_COSTS: [f64; 4] = [1.0, 0.0, 0.5, 2.0];

/// Two states, two actions, deterministic. Action 0 stays, action 1 switches.
/// Optimum: v = (0.5, 1.0), policy (1, 0).
pub fn m2() -> TabularMdp {
    #[rustfmt::skip]
    let p = vec![
        1.0, 0.0,   0.0, 1.0,
        0.0, 1.0,   1.0, 0.0,
    ];
    TabularMdp::new(2, 2, 0.5, M2_COSTS.to_vec(), p).expect("m2 is valid")
}

/// [`m2`] with a stochastic switch out of state 0: `P(.|0,1) = (0.2, 0.8)`.
pub fn m2s() -> TabularMdp {
    #[rustfmt::skip]
    let p = vec![
        1.0, 0.0,   0.2, 0.8,
        0.0, 1.0,   1.0, 0.0,
    ];
    TabularMdp::new(2, 2, 0.5, M2_COSTS.to_vec(), p).expect("m2s is valid")
}

/// Single-action model following `policy` on [`m2`]: an affine fixed-point map.
pub fn m2_restricted(policy: &Policy) -> TabularMdp {
    let full = m2();
    let mut costs = Vec::with_capacity(2);
    let mut p = Vec::with_capacity(4);
    for s in 0..2 {
        let a = policy.0[s];
        costs.push(full.cost(s, a));
        p.extend_from_slice(full.transition_row(s, a));
    }
    TabularMdp::new(2, 1, 0.5, costs, p).expect("restriction of m2 is valid")
}

/// Cycle of even length `n` whose advance costs alternate +1, -1.
///
/// Action 0 advances, action 1 stays put at cost 2 and is never optimal.
/// The optimum is `1/(1+gamma)` on even states and `-1/(1+gamma)` on odd
/// ones, and plain value iteration from zero only approaches it at rate
/// gamma, which makes this a slow case for long horizons.
pub fn signed_ring(n: usize, gamma: f64) -> TabularMdp {
    assert!(n >= 2 && n % 2 == 0, "ring length must be even");
    let mut costs = Vec::with_capacity(2 * n);
    let mut p = vec![0.0; 2 * n * n];
    for s in 0..n {
        costs.push(if s % 2 == 0 { 1.0 } else { -1.0 });
        costs.push(2.0);
        p[(s * 2) * n + (s + 1) % n] = 1.0;
        p[(s * 2 + 1) * n + s] = 1.0;
    }
    TabularMdp::new(n, 2, gamma, costs, p).expect("ring is valid")
}

/// Closed-form optimum of [`signed_ring`].
pub fn signed_ring_optimum(n: usize, gamma: f64) -> Vec<f64> {
    let x = 1.0 / (1.0 + gamma);
    (0..n).map(|s| if s % 2 == 0 { x } else { -x }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{bellman_v, solve_optimal_oracle};
    use nalgebra::DVector;

    #[test]
    fn ring_optimum_is_fixed_point() {
        let mdp = signed_ring(4, 0.9);
        let v = DVector::from_vec(signed_ring_optimum(4, 0.9));
        let tv = bellman_v(&mdp, &v).unwrap();
        assert!((tv - &v).amax() < 1e-15);
        let sol = solve_optimal_oracle(&mdp).unwrap();
        assert!((sol.v - v).amax() < 1e-12);
        assert_eq!(sol.policy, Policy(vec![0; 4]));
    }

    #[test]
    fn restriction_matches_policy_chain() {
        let r = m2_restricted(&Policy(vec![1, 0]));
        assert_eq!(r.m(), 1);
        assert_eq!(r.transition_row(0, 0), &[0.0, 1.0]);
        assert_eq!(r.transition_row(1, 0), &[0.0, 1.0]);
        assert_eq!((r.cost(0, 0), r.cost(1, 0)), (0.0, 0.5));
    }
}

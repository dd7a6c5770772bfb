//! Behavior-chain analysis and trajectory sampling.
//!
//! The critic's finite-sample bounds are stated in terms of the behavior
//! chain's stationary distribution `mu` and its mixing time
//! `t_delta = min{k : max_s ||P^k(s,.) - mu||_TV <= delta}`. Everything here
//! is exact at desk scale: the stationary distribution comes from a dense
//! linear solve, TV distances are half L1 norms of row differences, and
//! irreducibility/aperiodicity are checked structurally on the transition
//! digraph rather than spectrally.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Mdp, Policy};

/// Upper bound on chain steps when searching for a mixing time.
pub const MIXING_STEP_CAP: usize = 1_000_000;

/// Precisions for which `stationary_distribution` tabulates `t_delta`.
pub const DEFAULT_DELTAS: [f64; 4] = [0.1, 0.01, 1e-3, 1e-4];

const TV_FLOOR: f64 = 1e-13;

/// Stationary distribution of the behavior chain together with its measured
/// total-variation decay, tabulated mixing times, and a least-squares
/// geometric envelope fit `(C, sigma)` with `C >= 1`, `sigma in (0, 1)`.
///
/// The `(C, sigma)` pair is reported for diagnostics only; the finite-sample
/// bounds consume measured `t_delta` values directly.
#[derive(Debug, Clone)]
pub struct MixingInfo {
    stationary: DVector<f64>,
    tv_decay: Vec<f64>,
    t_delta: Vec<(f64, usize)>,
    geom_fit: (f64, f64),
}

impl MixingInfo {
    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }

    /// `max_s ||P^k(s,.) - mu||_TV` for `k = 0, 1, ...` until the floor.
    pub fn tv_decay(&self) -> &[f64] {
        &self.tv_decay
    }

    /// Tabulated `(delta, t_delta)` pairs for the default precisions.
    pub fn t_delta(&self) -> &[(f64, usize)] {
        &self.t_delta
    }

    pub fn geom_fit(&self) -> (f64, f64) {
        self.geom_fit
    }

    /// Smallest `k` with worst-case TV distance at most `delta`, if the
    /// recorded decay reaches that precision.
    pub fn mixing_time(&self, delta: f64) -> Option<usize> {
        // tv_decay is non-increasing, so the first index at or below delta
        // is a partition point.
        let k = self.tv_decay.partition_point(|&d| d > delta);
        (k < self.tv_decay.len()).then_some(k)
    }
}

/// Verifies Assumption 1 (full behavior support, irreducible and aperiodic
/// induced chain) and returns the state-to-state chain matrix.
pub fn check_behavior_assumption(mdp: &Mdp, behavior: &Policy) -> Result<DMatrix<f64>> {
    mdp.check_policy(behavior)?;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            if behavior.prob(s, a) <= 0.0 {
                return Err(Error::AssumptionViolation(format!(
                    "behavior policy has zero probability at state {s}, action {a}"
                )));
            }
        }
    }
    let p = mdp.state_transition(behavior)?;
    let n = p.nrows();
    let forward = reachable(&p, false);
    let backward = reachable(&p, true);
    let dead: Vec<usize> = (0..n).filter(|&s| !forward[s] || !backward[s]).collect();
    if !dead.is_empty() {
        return Err(Error::AssumptionViolation(format!(
            "induced chain is reducible; states not strongly connected to state 0: {dead:?}"
        )));
    }
    let period = chain_period(&p);
    if period != 1 {
        let class: Vec<usize> = bfs_distances(&p)
            .iter()
            .enumerate()
            .filter(|(_, &d)| d % period == 0)
            .map(|(s, _)| s)
            .collect();
        return Err(Error::AssumptionViolation(format!(
            "induced chain is periodic with period {period}; cyclic class of state 0: {class:?}"
        )));
    }
    Ok(p)
}

fn reachable(p: &DMatrix<f64>, transpose: bool) -> Vec<bool> {
    let n = p.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            let edge = if transpose { p[(v, u)] } else { p[(u, v)] };
            if edge > 0.0 && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

fn bfs_distances(p: &DMatrix<f64>) -> Vec<usize> {
    let n = p.nrows();
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    dist[0] = 0;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if p[(u, v)] > 0.0 && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Period of a strongly connected chain: gcd over edges `(u, v)` of
/// `dist(u) + 1 - dist(v)` for BFS distances from state 0.
fn chain_period(p: &DMatrix<f64>) -> usize {
    let dist = bfs_distances(p);
    let n = p.nrows();
    let mut g: i64 = 0;
    for u in 0..n {
        for v in 0..n {
            if p[(u, v)] > 0.0 {
                let diff = (dist[u] as i64 + 1 - dist[v] as i64).abs();
                g = gcd(g, diff);
            }
        }
    }
    g.max(1) as usize
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Exact TV distance between a row of `m` and `mu`: half the L1 norm.
fn max_tv_to(m: &DMatrix<f64>, mu: &DVector<f64>) -> f64 {
    (0..m.nrows())
        .map(|s| {
            0.5 * (0..m.ncols())
                .map(|s2| (m[(s, s2)] - mu[s2]).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Solves for the stationary distribution of the behavior chain and measures
/// its mixing behavior.
///
/// `mu` satisfies `mu^T P = mu^T` with residual below 1e-10; mixing times are
/// found by iterating the chain (capped at [`MIXING_STEP_CAP`] steps) and the
/// `(C, sigma)` envelope is fit by least squares on the log TV decay.
pub fn stationary_distribution(mdp: &Mdp, behavior: &Policy) -> Result<MixingInfo> {
    let p = check_behavior_assumption(mdp, behavior)?;
    let n = p.nrows();

    // mu^T (P - I) = 0 with the normalization sum(mu) = 1 replacing one row.
    let mut a = p.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let mut mu = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::AssumptionViolation("stationary system is singular".into()))?;
    let total: f64 = mu.iter().sum();
    mu /= total;

    let mut tv_decay = Vec::new();
    let mut powered = DMatrix::identity(n, n);
    tv_decay.push(max_tv_to(&powered, &mu));
    while *tv_decay.last().unwrap() > TV_FLOOR && tv_decay.len() <= MIXING_STEP_CAP {
        powered *= &p;
        tv_decay.push(max_tv_to(&powered, &mu));
    }

    let geom_fit = fit_geometric(&tv_decay);
    let info = MixingInfo {
        stationary: mu,
        t_delta: Vec::new(),
        tv_decay,
        geom_fit,
    };
    let t_delta = DEFAULT_DELTAS
        .iter()
        .filter_map(|&d| info.mixing_time(d).map(|t| (d, t)))
        .collect();
    Ok(MixingInfo { t_delta, ..info })
}

fn fit_geometric(decay: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = decay
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > TV_FLOOR)
        .map(|(k, &d)| (k as f64, d.ln()))
        .collect();
    if pts.len() < 2 {
        // Chain forgets its start essentially immediately.
        return (1.0, 1e-12);
    }
    let m = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0, y + p.1));
    let (sxx, sxy): (f64, f64) = pts
        .iter()
        .fold((0.0, 0.0), |(xx, xy), p| (xx + p.0 * p.0, xy + p.0 * p.1));
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let intercept = (sy - slope * sx) / m;
    let sigma = slope.exp().clamp(1e-12, 1.0 - 1e-9);
    let c = intercept.exp().max(1.0);
    (c, sigma)
}

/// Where a sampled trajectory starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartState {
    /// Draw `S_0` from the stationary distribution, so mixing-time bounds
    /// apply from step 0.
    Stationary,
    /// Start from a fixed state (worst-case mixing experiments).
    Fixed(usize),
}

/// Samples `(S_k, A_k)` pairs of the given length under the behavior policy:
/// `A_k ~ pi_b(.|S_k)`, `S_{k+1} ~ P_{A_k}(S_k, .)`. Deterministic in `seed`.
pub fn sample_trajectory(
    mdp: &Mdp,
    behavior: &Policy,
    length: usize,
    seed: u64,
    start: StartState,
) -> Result<Vec<(usize, usize)>> {
    if length == 0 {
        return Err(Error::InvalidInput("trajectory length must be at least 1".into()));
    }
    mdp.check_policy(behavior)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = match start {
        StartState::Fixed(s) => {
            if s >= mdp.n_states() {
                return Err(Error::InvalidInput(format!(
                    "start state {s} out of range 0..{}",
                    mdp.n_states()
                )));
            }
            s
        }
        StartState::Stationary => {
            let info = stationary_distribution(mdp, behavior)?;
            sample_categorical(&mut rng, info.stationary().iter().copied())
        }
    };
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let action = sample_categorical(
            &mut rng,
            (0..mdp.n_actions()).map(|a| behavior.prob(state, a)),
        );
        out.push((state, action));
        state = sample_categorical(
            &mut rng,
            mdp.transition(action).row(state).iter().copied(),
        );
    }
    Ok(out)
}

fn sample_categorical<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

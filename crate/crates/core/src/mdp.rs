//! Finite MDP representation and exact Bellman machinery.
//!
//! States are `0..n_states`, actions `0..n_actions`. Wherever a vector is
//! indexed by state-action pairs (Q vectors, feature rows, pair-transition
//! matrices) the flattening is row-major: pair `(s, a)` sits at index
//! `s * n_actions + a`.
//!
//! Exact solvers go through dense LU with partial pivoting and are capped at
//! `|S||A| <= 10_000`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Hard cap on |S||A| for the dense exact solvers.
pub const EXACT_SOLVER_CAP: usize = 10_000;

const ROW_SUM_TOL: f64 = 1e-12;

/// A finite discounted MDP: per-action transition matrices `P_a`, a reward
/// table `R(s, a)` normalized into `[0, 1]`, and a discount `gamma < 1`.
///
/// `gamma = 0` is accepted so the discount-free edge cases stay expressible,
/// even though a "real" discounted problem has `gamma > 0`.
#[derive(Debug, Clone)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// One `|S| x |S|` row-stochastic matrix per action.
    transitions: Vec<DMatrix<f64>>,
    /// `|S| x |A|` reward table.
    rewards: DMatrix<f64>,
}

impl Mdp {
    pub fn new(
        gamma: f64,
        transitions: Vec<DMatrix<f64>>,
        rewards: DMatrix<f64>,
    ) -> Result<Self> {
        let n_actions = transitions.len();
        if n_actions == 0 {
            return Err(Error::InvalidInput("MDP needs at least one action".into()));
        }
        let n_states = transitions[0].nrows();
        if n_states == 0 {
            return Err(Error::InvalidInput("MDP needs at least one state".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidInput(format!(
                "discount must lie in [0, 1), got {gamma}"
            )));
        }
        for (a, p) in transitions.iter().enumerate() {
            if p.nrows() != n_states || p.ncols() != n_states {
                return Err(Error::DimensionMismatch(format!(
                    "transition matrix for action {a} is {}x{}, expected {n_states}x{n_states}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            for s in 0..n_states {
                let row = p.row(s);
                if row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "P_{a}({s}, .) has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidInput(format!(
                        "P_{a}({s}, .) sums to {sum}, expected 1 within {ROW_SUM_TOL}"
                    )));
                }
            }
        }
        if rewards.nrows() != n_states || rewards.ncols() != n_actions {
            return Err(Error::DimensionMismatch(format!(
                "reward table is {}x{}, expected {n_states}x{n_actions}",
                rewards.nrows(),
                rewards.ncols()
            )));
        }
        if rewards.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::InvalidInput(
                "rewards must lie in [0, 1] (normalize max reward to 1)".into(),
            ));
        }
        Ok(Mdp {
            n_states,
            n_actions,
            gamma,
            transitions,
            rewards,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of state-action pairs `|S||A|`.
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Flat index of the pair `(s, a)`.
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn transition(&self, a: usize) -> &DMatrix<f64> {
        &self.transitions[a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[(s, a)]
    }

    pub fn rewards(&self) -> &DMatrix<f64> {
        &self.rewards
    }

    /// Rewards flattened over pairs, `R[(s,a)] = R(s, a)`.
    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_fn(self.n_pairs(), |p, _| {
            self.rewards[(p / self.n_actions, p % self.n_actions)]
        })
    }

    /// State-to-state transition matrix of the chain induced by `policy`:
    /// `P_pi(s, s') = sum_a pi(a|s) P_a(s, s')`.
    pub fn state_transition(&self, policy: &Policy) -> Result<DMatrix<f64>> {
        self.check_policy(policy)?;
        let mut p = DMatrix::zeros(self.n_states, self.n_states);
        for a in 0..self.n_actions {
            for s in 0..self.n_states {
                let w = policy.prob(s, a);
                if w != 0.0 {
                    for s2 in 0..self.n_states {
                        p[(s, s2)] += w * self.transitions[a][(s, s2)];
                    }
                }
            }
        }
        Ok(p)
    }

    /// Pair-to-pair transition matrix
    /// `P_pi((s,a), (s',a')) = P_a(s, s') pi(a'|s')`.
    pub fn pair_transition(&self, policy: &Policy) -> Result<DMatrix<f64>> {
        self.check_policy(policy)?;
        let n = self.n_pairs();
        let mut p = DMatrix::zeros(n, n);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.pair_index(s, a);
                for s2 in 0..self.n_states {
                    let pt = self.transitions[a][(s, s2)];
                    if pt == 0.0 {
                        continue;
                    }
                    for a2 in 0..self.n_actions {
                        p[(row, self.pair_index(s2, a2))] = pt * policy.prob(s2, a2);
                    }
                }
            }
        }
        Ok(p)
    }

    pub(crate) fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    pub(crate) fn check_q(&self, q: &QTable) -> Result<()> {
        if q.n_states() != self.n_states || q.n_actions() != self.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "Q table is {}x{}, MDP is {}x{}",
                q.n_states(),
                q.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    pub(crate) fn check_solver_cap(&self) -> Result<()> {
        if self.n_pairs() > EXACT_SOLVER_CAP {
            return Err(Error::InvalidInput(format!(
                "|S||A| = {} exceeds the exact-solver cap of {EXACT_SOLVER_CAP}",
                self.n_pairs()
            )));
        }
        Ok(())
    }

    /// Two-state chain with a `stay` action (identity transition) and a
    /// `switch` action (swap transition); reward 1 in state 0, 0 in state 1,
    /// discount 0.9. The standing small test instance.
    pub fn two_loop() -> Mdp {
        let stay = DMatrix::identity(2, 2);
        let switch = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let rewards = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        Mdp::new(0.9, vec![stay, switch], rewards).expect("two_loop is valid")
    }

    pub fn load(path: &Path) -> Result<Mdp> {
        let text = std::fs::read_to_string(path)?;
        Mdp::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Mdp> {
        let file: MdpFile = serde_json::from_str(text)?;
        Mdp::try_from(file)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MdpFile::from(self))?)
    }
}

/// On-disk MDP schema: `transitions` is indexed `[a][s][s']`, `rewards` is
/// indexed `[s][a]`.
#[derive(Debug, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub rewards: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl From<&Mdp> for MdpFile {
    fn from(m: &Mdp) -> Self {
        MdpFile {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            rewards: (0..m.n_states)
                .map(|s| (0..m.n_actions).map(|a| m.rewards[(s, a)]).collect())
                .collect(),
            transitions: m
                .transitions
                .iter()
                .map(|p| {
                    (0..m.n_states)
                        .map(|s| p.row(s).iter().copied().collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<MdpFile> for Mdp {
    type Error = Error;

    fn try_from(f: MdpFile) -> Result<Mdp> {
        if f.transitions.len() != f.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "file declares {} actions but has {} transition matrices",
                f.n_actions,
                f.transitions.len()
            )));
        }
        let grid = |rows: &Vec<Vec<f64>>, what: &str| -> Result<DMatrix<f64>> {
            if rows.len() != f.n_states || rows.iter().any(|r| r.len() != rows[0].len()) {
                return Err(Error::DimensionMismatch(format!("ragged or missized {what}")));
            }
            let ncols = rows[0].len();
            Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        };
        let rewards = grid(&f.rewards, "reward table")?;
        let transitions = f
            .transitions
            .iter()
            .map(|p| grid(p, "transition matrix"))
            .collect::<Result<Vec<_>>>()?;
        Mdp::new(f.gamma, transitions, rewards)
    }
}

/// A row-stochastic policy table `pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

impl Policy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "policy row {s} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "policy row {s} sums to {sum}, expected 1 within {ROW_SUM_TOL}"
                )));
            }
        }
        Ok(Policy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Policy {
        Policy {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy selecting `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Policy {
        let mut probs = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            probs[(s, a)] = 1.0;
        }
        Policy { probs }
    }

    /// Row-wise softmax of a logit table, with per-row max subtraction.
    pub fn from_logits(logits: &DMatrix<f64>) -> Policy {
        let mut probs = logits.clone();
        for s in 0..probs.nrows() {
            let m = probs.row(s).max();
            let mut z = 0.0;
            for a in 0..probs.ncols() {
                let e = (probs[(s, a)] - m).exp();
                probs[(s, a)] = e;
                z += e;
            }
            for a in 0..probs.ncols() {
                probs[(s, a)] /= z;
            }
        }
        Policy { probs }
    }

    /// Random policy with i.i.d. uniform row weights, normalized.
    pub fn random<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> Policy {
        let mut probs = DMatrix::from_fn(n_states, n_actions, |_, _| {
            rng.random::<f64>() + 1e-3
        });
        for s in 0..n_states {
            let sum: f64 = probs.row(s).iter().sum();
            for a in 0..n_actions {
                probs[(s, a)] /= sum;
            }
        }
        Policy { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// True if every entry is strictly positive (full support).
    pub fn has_full_support(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// `sum_a |pi(a|s) - other(a|s)|` for one state.
    pub fn row_l1_distance(&self, other: &Policy, s: usize) -> f64 {
        (0..self.n_actions())
            .map(|a| (self.prob(s, a) - other.prob(s, a)).abs())
            .sum()
    }

    pub fn to_json_string(&self) -> Result<String> {
        let rows: Vec<Vec<f64>> = (0..self.n_states())
            .map(|s| self.probs.row(s).iter().copied().collect())
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "probs": rows }))?)
    }

    pub fn from_json_str(text: &str) -> Result<Policy> {
        #[derive(Deserialize)]
        struct PolicyFile {
            probs: Vec<Vec<f64>>,
        }
        let f: PolicyFile = serde_json::from_str(text)?;
        if f.probs.is_empty() || f.probs.iter().any(|r| r.len() != f.probs[0].len()) {
            return Err(Error::InvalidInput("empty or ragged policy table".into()));
        }
        let ncols = f.probs[0].len();
        Policy::new(DMatrix::from_fn(f.probs.len(), ncols, |i, j| f.probs[i][j]))
    }

    pub fn load(path: &Path) -> Result<Policy> {
        Policy::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// A state-action value table `Q(s, a)` in units of discounted reward.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: DMatrix<f64>,
}

impl QTable {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("Q table has non-finite entries".into()));
        }
        Ok(QTable { values })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> QTable {
        QTable {
            values: DMatrix::zeros(n_states, n_actions),
        }
    }

    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        f: impl FnMut(usize, usize) -> f64,
    ) -> QTable {
        QTable {
            values: DMatrix::from_fn(n_states, n_actions, f),
        }
    }

    /// Rebuild from a flat pair-ordered vector (`(s,a) -> s*|A| + a`).
    pub fn from_vector(n_states: usize, n_actions: usize, v: &DVector<f64>) -> QTable {
        QTable {
            values: DMatrix::from_fn(n_states, n_actions, |s, a| v[s * n_actions + a]),
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[(s, a)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Flatten into pair order.
    pub fn as_vector(&self) -> DVector<f64> {
        let na = self.n_actions();
        DVector::from_fn(self.n_states() * na, |p, _| self.values[(p / na, p % na)])
    }

    /// Row argmax with ties broken by the lowest action index.
    pub fn greedy_action(&self, s: usize) -> usize {
        let mut best = 0;
        for a in 1..self.n_actions() {
            if self.values[(s, a)] > self.values[(s, best)] {
                best = a;
            }
        }
        best
    }

    /// Greedy deterministic policy (lowest-index tie break).
    pub fn greedy_policy(&self) -> Policy {
        let actions: Vec<usize> = (0..self.n_states()).map(|s| self.greedy_action(s)).collect();
        Policy::deterministic(self.n_actions(), &actions)
    }

    pub fn linf_distance(&self, other: &QTable) -> f64 {
        (&self.values - &other.values).abs().max()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.abs().max()
    }
}

/// Solve the linear Bellman system `Q = R + gamma P_pi Q` for `Q^pi`.
///
/// The system matrix `I - gamma P_pi` is strictly diagonally dominant for
/// `gamma < 1`, so it is never singular; no fallback path exists.
pub fn exact_q(mdp: &Mdp, policy: &Policy) -> Result<QTable> {
    mdp.check_policy(policy)?;
    mdp.check_solver_cap()?;
    let n = mdp.n_pairs();
    let p_pi = mdp.pair_transition(policy)?;
    let a = DMatrix::identity(n, n) - p_pi * mdp.gamma();
    let q = a
        .lu()
        .solve(&mdp.reward_vector())
        .expect("I - gamma*P is nonsingular for gamma < 1");
    Ok(QTable::from_vector(mdp.n_states(), mdp.n_actions(), &q))
}

/// Bellman optimality operator:
/// `[H(Q)](s,a) = R(s,a) + gamma sum_s' P_a(s,s') max_a' Q(s',a')`.
pub fn bellman_optimality(mdp: &Mdp, q: &QTable) -> Result<QTable> {
    mdp.check_q(q)?;
    let vmax = DVector::from_fn(mdp.n_states(), |s, _| {
        q.values().row(s).max()
    });
    apply_one_step(mdp, &vmax)
}

/// Bellman operator of a fixed policy:
/// `[H_pi(Q)](s,a) = R(s,a) + gamma E_{s' ~ P_a, a' ~ pi}[Q(s',a')]`.
pub fn bellman_policy(mdp: &Mdp, policy: &Policy, q: &QTable) -> Result<QTable> {
    mdp.check_policy(policy)?;
    mdp.check_q(q)?;
    let vpi = DVector::from_fn(mdp.n_states(), |s, _| {
        (0..mdp.n_actions())
            .map(|a| policy.prob(s, a) * q.get(s, a))
            .sum()
    });
    apply_one_step(mdp, &vpi)
}

fn apply_one_step(mdp: &Mdp, next_value: &DVector<f64>) -> Result<QTable> {
    let mut out = DMatrix::zeros(mdp.n_states(), mdp.n_actions());
    for a in 0..mdp.n_actions() {
        let backed = mdp.transition(a) * next_value;
        for s in 0..mdp.n_states() {
            out[(s, a)] = mdp.reward(s, a) + mdp.gamma() * backed[s];
        }
    }
    QTable::new(out)
}

/// Value iteration to a fixed-point residual `||H(Q*) - Q*||_inf <= tol`,
/// returning `Q*` and its greedy policy.
pub fn value_iteration(mdp: &Mdp, tol: f64) -> Result<(QTable, Policy)> {
    if tol <= 0.0 {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    loop {
        let next = bellman_optimality(mdp, &q)?;
        let gap = next.linf_distance(&q);
        q = next;
        // One more application shrinks the residual below gamma * tol <= tol.
        if gap <= tol {
            let fixed = bellman_optimality(mdp, &q)?;
            let policy = fixed.greedy_policy();
            return Ok((fixed, policy));
        }
    }
}

/// Random MDP: each `(s, a)` reaches `branching` distinct uniformly chosen
/// states with flat-Dirichlet probabilities; rewards are Uniform[0, 1].
/// Deterministic in `seed`.
pub fn gen_garnet(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    gamma: f64,
    seed: u64,
) -> Result<Mdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidInput("need at least one state and one action".into()));
    }
    if branching == 0 || branching > n_states {
        return Err(Error::InvalidInput(format!(
            "branching must lie in 1..={n_states}, got {branching}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = vec![DMatrix::zeros(n_states, n_states); n_actions];
    for a in 0..n_actions {
        for s in 0..n_states {
            let targets = sample(&mut rng, n_states, branching);
            // Flat Dirichlet via normalized unit exponentials.
            let mut weights: Vec<f64> = (0..branching)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            for (t, w) in targets.iter().zip(&weights) {
                transitions[a][(s, t)] = *w;
            }
            // Renormalize the row exactly so validation tolerances never bite.
            let sum: f64 = transitions[a].row(s).iter().sum();
            for s2 in 0..n_states {
                transitions[a][(s, s2)] /= sum;
            }
        }
    }
    let rewards = DMatrix::from_fn(n_states, n_actions, |_, _| rng.random::<f64>());
    Mdp::new(gamma, transitions, rewards)
}

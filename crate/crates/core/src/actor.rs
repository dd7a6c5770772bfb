//! The actor: policy-improvement rules with their stepsize schedules.
//!
//! Three update rules `pi_{t+1} = G(Q_t, pi_t)` are supported:
//!
//! * natural policy gradient (multiplicative):
//!   `pi_{t+1}(a|s) ~ pi_t(a|s) exp(beta_t Q_t(s,a))`;
//! * Boltzmann softmax: `pi_{t+1}(a|s) ~ exp(beta_t Q_t(s,a))`, independent
//!   of `pi_t`;
//! * epsilon-greedy: mass `beta_t/|A|` off the greedy action and
//!   `beta_t/|A| + 1 - beta_t` on it.
//!
//! Two stepsize schedules are provided. The constant schedule keeps a fixed
//! tunable `beta` and sets the per-step `beta_t` at the minimal admissible
//! value (equality in the schedule inequalities), e.g.
//! `beta_t = gamma beta log|A|` for Boltzmann; "constant" refers to `beta`,
//! not to `beta_t`, which for NPG and epsilon-greedy depends on the current
//! iterate. The increasing schedule divides by `gamma^{2t-1}` instead, so
//! `beta_t` explodes geometrically; NPG and Boltzmann therefore run in
//! logit space and policies are normalized on read.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::critic::runtime::CSV_HEADER;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::mdp::{bellman_optimality, bellman_policy, exact_q, value_iteration, Mdp, Policy, QTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorRuleKind {
    Npg,
    Boltzmann,
    EpsGreedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsizeMode {
    Constant,
    Increasing,
}

/// An actor rule with its stepsize schedule and tunable parameter `beta`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActorRule {
    pub kind: ActorRuleKind,
    pub mode: StepsizeMode,
    /// Tunable parameter of the constant schedule; unused by the increasing
    /// schedule.
    pub beta: f64,
}

/// Per-iteration stepsize: a scalar for NPG/Boltzmann, one value per state
/// for epsilon-greedy.
#[derive(Debug, Clone, PartialEq)]
pub enum BetaValue {
    Scalar(f64),
    PerState(DVector<f64>),
}

impl BetaValue {
    /// Scalar summary used in CSV output (the max over states for the
    /// per-state variant).
    pub fn summary(&self) -> f64 {
        match self {
            BetaValue::Scalar(b) => *b,
            BetaValue::PerState(v) => v.max(),
        }
    }
}

fn require_finite_q(q: &QTable) -> Result<()> {
    if q.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("Q estimate has non-finite entries".into()));
    }
    Ok(())
}

/// Natural policy gradient update
/// `pi'(a|s) ~ pi(a|s) exp(beta Q(s,a))`, computed with per-row max
/// subtraction. Zero-probability actions stay at zero.
pub fn npg_update(prev: &Policy, q: &QTable, beta: f64) -> Result<Policy> {
    require_finite_q(q)?;
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("beta_t must be >= 0, got {beta}")));
    }
    if prev.n_states() != q.n_states() || prev.n_actions() != q.n_actions() {
        return Err(Error::DimensionMismatch("policy and Q shapes differ".into()));
    }
    let logits = DMatrix::from_fn(q.n_states(), q.n_actions(), |s, a| {
        prev.prob(s, a).ln() + beta * q.get(s, a)
    });
    Ok(Policy::from_logits(&logits))
}

/// Boltzmann softmax update `pi'(a|s) ~ exp(beta Q(s,a))`; does not depend
/// on the previous policy.
pub fn boltzmann_update(q: &QTable, beta: f64) -> Result<Policy> {
    require_finite_q(q)?;
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("beta_t must be >= 0, got {beta}")));
    }
    Ok(Policy::from_logits(&(q.values() * beta)))
}

/// Epsilon-greedy update with a per-state stepsize: probability
/// `beta_s/|A|` on each non-greedy action and `beta_s/|A| + 1 - beta_s` on
/// the greedy one (lowest-index tie break).
///
/// The schedules can demand `beta_s > 1`, which would put negative mass on
/// the greedy action; such entries are clamped to 1 and counted in the
/// returned tally so bound checks can skip affected iterations.
pub fn eps_greedy_update(q: &QTable, beta_s: &DVector<f64>) -> Result<(Policy, usize)> {
    require_finite_q(q)?;
    if beta_s.len() != q.n_states() {
        return Err(Error::DimensionMismatch(format!(
            "beta vector has {} entries for {} states",
            beta_s.len(),
            q.n_states()
        )));
    }
    if beta_s.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(Error::InvalidInput("per-state beta must be finite and >= 0".into()));
    }
    let na = q.n_actions();
    let mut clamped = 0usize;
    let mut probs = DMatrix::zeros(q.n_states(), na);
    for s in 0..q.n_states() {
        let beta = if beta_s[s] > 1.0 {
            clamped += 1;
            1.0
        } else {
            beta_s[s]
        };
        let greedy = q.greedy_action(s);
        for a in 0..na {
            probs[(s, a)] = beta / na as f64 + if a == greedy { 1.0 - beta } else { 0.0 };
        }
    }
    if clamped > 0 {
        log::warn!("epsilon-greedy stepsize exceeded 1 in {clamped} state(s); clamped");
    }
    Ok((Policy::new(probs)?, clamped))
}

fn power_2t_minus_1(gamma: f64, t: usize) -> f64 {
    gamma.powi(2 * t as i32 - 1)
}

/// Minimal admissible `beta_t` for the selected rule and schedule
/// (equality in the schedule inequalities).
///
/// * NPG: `gamma beta log(1/min_s pi_t(a_{t,s}|s))`, or the same log term
///   divided by `gamma^{2t-1}` under the increasing schedule, where
///   `a_{t,s}` is the greedy action of `q`.
/// * Boltzmann: `gamma beta log|A|`, or `log|A| / gamma^{2t-1}`.
/// * Epsilon-greedy (per state): `2 gamma beta max_a |Q(s,a)|`, or
///   `2 max_a |Q(s,a)| / gamma^{2t-1}`.
pub fn stepsize_condition(
    kind: ActorRuleKind,
    mode: StepsizeMode,
    beta: f64,
    t: usize,
    prev: &Policy,
    q: &QTable,
    gamma: f64,
) -> Result<BetaValue> {
    require_finite_q(q)?;
    match kind {
        ActorRuleKind::Npg => {
            let mut min_log = f64::INFINITY;
            for s in 0..q.n_states() {
                let p = prev.prob(s, q.greedy_action(s));
                if p <= 0.0 {
                    return Err(Error::DegenerateSupport(format!(
                        "pi_t(a_t,s | s) = 0 at state {s}; the NPG stepsize log term is undefined"
                    )));
                }
                min_log = min_log.min(p.ln());
            }
            let log_term = -min_log;
            Ok(BetaValue::Scalar(match mode {
                StepsizeMode::Constant => gamma * beta * log_term,
                StepsizeMode::Increasing => log_term / power_2t_minus_1(gamma, t),
            }))
        }
        ActorRuleKind::Boltzmann => {
            let log_a = (q.n_actions() as f64).ln();
            Ok(BetaValue::Scalar(match mode {
                StepsizeMode::Constant => gamma * beta * log_a,
                StepsizeMode::Increasing => log_a / power_2t_minus_1(gamma, t),
            }))
        }
        ActorRuleKind::EpsGreedy => {
            let v = DVector::from_fn(q.n_states(), |s, _| {
                let qmax = (0..q.n_actions()).map(|a| q.get(s, a).abs()).fold(0.0, f64::max);
                match mode {
                    StepsizeMode::Constant => 2.0 * gamma * beta * qmax,
                    StepsizeMode::Increasing => 2.0 * qmax / power_2t_minus_1(gamma, t),
                }
            });
            Ok(BetaValue::PerState(v))
        }
    }
}

/// Compatible softmax parameterization `pi_theta(a|s) ~ exp(phi(s,a)' theta)`.
#[derive(Debug, Clone)]
pub struct SoftmaxParam {
    pub theta: DVector<f64>,
}

impl SoftmaxParam {
    pub fn zeros(dim: usize) -> SoftmaxParam {
        SoftmaxParam {
            theta: DVector::zeros(dim),
        }
    }

    /// Materializes the implied policy table (diagnostic-side; the learning
    /// loop itself only ever needs policy values along the trajectory).
    pub fn policy(&self, features: &FeatureMap, n_states: usize, n_actions: usize) -> Policy {
        let logits = features.expand(&self.theta);
        Policy::from_logits(&DMatrix::from_fn(n_states, n_actions, |s, a| {
            logits[s * n_actions + a]
        }))
    }
}

/// `theta <- theta + beta_t w`: the d-dimensional equivalent of an NPG step
/// on the implied softmax policy with Q estimate `Phi w`.
pub fn theta_update(theta: &SoftmaxParam, w: &DVector<f64>, beta_t: f64) -> Result<SoftmaxParam> {
    if theta.theta.len() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "theta has dimension {}, w has {}",
            theta.theta.len(),
            w.len()
        )));
    }
    Ok(SoftmaxParam {
        theta: &theta.theta + w * beta_t,
    })
}

/// Both sides of the log-sum-exp gap inequality: for a vector `x`, a fully
/// supported distribution `y`, and `beta > 0`,
///
/// ```text
/// max_i x_i - sum_i x_i y_i e^{beta x_i} / sum_j y_j e^{beta x_j}
///   <= (1/beta) log(1/y_{i_max})
/// ```
///
/// Returned as `(lhs, rhs)`; the inequality itself is exercised by property
/// tests.
pub fn logsumexp_gap_check(x: &DVector<f64>, y: &DVector<f64>, beta: f64) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::DimensionMismatch("x and y must have equal nonzero length".into()));
    }
    if beta <= 0.0 {
        return Err(Error::InvalidInput("beta must be positive".into()));
    }
    if y.iter().any(|&p| p <= 0.0) {
        return Err(Error::InvalidInput("y must have strictly positive entries".into()));
    }
    let xmax = x.max();
    let mut i_max = 0;
    for i in 0..x.len() {
        if x[i] == xmax {
            i_max = i;
            break;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        let e = y[i] * (beta * (x[i] - xmax)).exp();
        num += x[i] * e;
        den += e;
    }
    let lhs = xmax - num / den;
    let rhs = (1.0 / y[i_max]).ln() / beta;
    Ok((lhs, rhs))
}

/// One logged step of an exact-critic actor run.
#[derive(Debug, Clone)]
pub struct ActorRecord {
    pub t: usize,
    /// Stepsize applied when leaving this iterate; `NaN` on the final row.
    pub beta: BetaValue,
    /// `||Q* - Q^{pi_t}||_inf`.
    pub err_inf: f64,
    /// `gamma^t ||Q* - Q^{pi_0}||_inf`.
    pub n1: f64,
    /// Critic error term; identically zero with the exact critic.
    pub n2: f64,
    /// Policy-update error term: `2 gamma / (beta (1-gamma)^2)` for the
    /// constant schedule, `2 gamma^t / (1-gamma)^2` for the increasing one.
    pub n3: f64,
    /// Alternative published form `2 gamma beta / (1-gamma)^2` of the
    /// constant-schedule term; reported alongside `n3` because the two
    /// appear inconsistently and only one can be right.
    pub n3_alt: Option<f64>,
    /// States whose epsilon-greedy stepsize had to be clamped to 1.
    pub clamped_states: usize,
    /// Min and max entries of `H(Q_t) - H_{pi_{t+1}}(Q_t)`, the per-step
    /// policy-improvement gap.
    pub actor_gap: Option<(f64, f64)>,
}

/// Trace of an exact-critic actor run.
#[derive(Debug)]
pub struct ActorRun {
    pub records: Vec<ActorRecord>,
    pub q_star: QTable,
    pub final_policy: Policy,
}

impl ActorRun {
    pub fn final_error(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.err_inf)
    }

    /// Writes `t, beta_t, err_inf, N1, N2, N3` rows under the schema header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        writeln!(out, "t,beta_t,err_inf,N1,N2,N3")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.t,
                r.beta.summary(),
                r.err_inf,
                r.n1,
                r.n2,
                r.n3
            )?;
        }
        Ok(())
    }
}

/// Runs the generic policy-based loop with the exact critic
/// `Q_t = Q^{pi_t}` for `T` steps from the uniform initial policy, logging
/// the optimality gap and the actor-side bound terms at every iterate.
pub fn run_actor_exact(mdp: &Mdp, rule: &ActorRule, horizon: usize) -> Result<ActorRun> {
    if rule.mode == StepsizeMode::Constant && !(rule.beta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "constant schedule needs beta > 0, got {}",
            rule.beta
        )));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (q_star, _) = value_iteration(mdp, 1e-12)?;
    let gamma = mdp.gamma();

    // NPG and Boltzmann iterate in logit space; epsilon-greedy in
    // probabilities.
    let mut logits = DMatrix::zeros(ns, na);
    let mut policy = Policy::uniform(ns, na);
    let err0 = {
        let q0 = exact_q(mdp, &policy)?;
        q_star.linf_distance(&q0)
    };

    let n3_for = |t: usize| match rule.mode {
        StepsizeMode::Constant => (
            2.0 * gamma / (rule.beta * (1.0 - gamma).powi(2)),
            Some(2.0 * gamma * rule.beta / (1.0 - gamma).powi(2)),
        ),
        StepsizeMode::Increasing => (2.0 * gamma.powi(t as i32) / (1.0 - gamma).powi(2), None),
    };

    let mut records = Vec::with_capacity(horizon + 1);
    for t in 0..horizon {
        let q_t = exact_q(mdp, &policy)?;
        let err_inf = q_star.linf_distance(&q_t);

        let beta_t = match rule.kind {
            // Computed from the logits so the log term stays exact even when
            // probabilities underflow.
            ActorRuleKind::Npg => {
                let mut min_log = f64::INFINITY;
                for s in 0..ns {
                    let row = logits.row(s);
                    let m: f64 = row.max();
                    let lse = m + row.iter().map(|&l: &f64| (l - m).exp()).sum::<f64>().ln();
                    min_log = min_log.min(logits[(s, q_t.greedy_action(s))] - lse);
                }
                if min_log == f64::NEG_INFINITY {
                    return Err(Error::DegenerateSupport(
                        "greedy action has zero probability under pi_t".into(),
                    ));
                }
                BetaValue::Scalar(match rule.mode {
                    StepsizeMode::Constant => gamma * rule.beta * (-min_log),
                    StepsizeMode::Increasing => -min_log / power_2t_minus_1(gamma, t),
                })
            }
            _ => stepsize_condition(rule.kind, rule.mode, rule.beta, t, &policy, &q_t, gamma)?,
        };

        let mut clamped = 0usize;
        let next_policy = match (rule.kind, &beta_t) {
            (ActorRuleKind::Npg, BetaValue::Scalar(b)) => {
                logits += q_t.values() * *b;
                Policy::from_logits(&logits)
            }
            (ActorRuleKind::Boltzmann, BetaValue::Scalar(b)) => {
                logits = q_t.values() * *b;
                Policy::from_logits(&logits)
            }
            (ActorRuleKind::EpsGreedy, BetaValue::PerState(v)) => {
                let (p, c) = eps_greedy_update(&q_t, v)?;
                clamped = c;
                p
            }
            _ => unreachable!("stepsize arity always matches the rule"),
        };

        // Per-step policy-improvement gap H(Q_t) - H_{pi_{t+1}}(Q_t).
        let h = bellman_optimality(mdp, &q_t)?;
        let h_pi = bellman_policy(mdp, &next_policy, &q_t)?;
        let gap = h.values() - h_pi.values();
        let actor_gap = Some((gap.min(), gap.max()));

        let (n3, n3_alt) = n3_for(t);
        records.push(ActorRecord {
            t,
            beta: beta_t,
            err_inf,
            n1: gamma.powi(t as i32) * err0,
            n2: 0.0,
            n3,
            n3_alt,
            clamped_states: clamped,
            actor_gap,
        });
        policy = next_policy;
    }

    let q_final = exact_q(mdp, &policy)?;
    let (n3, n3_alt) = n3_for(horizon);
    records.push(ActorRecord {
        t: horizon,
        beta: BetaValue::Scalar(f64::NAN),
        err_inf: q_star.linf_distance(&q_final),
        n1: gamma.powi(horizon as i32) * err0,
        n2: 0.0,
        n3,
        n3_alt,
        clamped_states: 0,
        actor_gap: None,
    });
    Ok(ActorRun {
        records,
        q_star,
        final_policy: policy,
    })
}

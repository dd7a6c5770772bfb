//! End-to-end off-policy actor-critic pipeline.
//!
//! One long behavior trajectory of length `T (K + n)` is partitioned into
//! `T` consecutive blocks; block `t` feeds the critic that evaluates the
//! current target policy `pi_t`, whose output `w_{t+1}` drives the actor
//! update. The critic re-initializes at `w = 0` every outer iteration
//! rather than warm-starting. The natural-policy-gradient option maintains
//! the compatible softmax parameter `theta` in d dimensions; the Boltzmann
//! and epsilon-greedy options derive `pi_{t+1}` from `Phi w_{t+1}` directly.
//!
//! Exact diagnostics (`Q^{pi_t}`, `Q*`, PBE fixed points) are computed
//! outside the learning loop and never feed back into the updates. Full
//! policy tables are materialized only for those diagnostics; the learning
//! path itself only needs policy values along the trajectory.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::actor::{
    eps_greedy_update, stepsize_condition, ActorRule, ActorRuleKind, BetaValue, StepsizeMode,
};
use crate::chain::{sample_trajectory, stationary_distribution, MixingInfo, StartState};
use crate::critic::analytic::{pbe_fixed_point, q_fixed_point, stability_report};
use crate::critic::factors::IsFactorTable;
use crate::critic::runtime::{
    pair_indices, theoretical_bound_curve, CriticConfig, Stepsize, TdProblem, CSV_HEADER,
};
use crate::error::{Error, Result};
use crate::features::{spectral_info, FeatureMap, WeightMatrixInfo};
use crate::mdp::{exact_q, gen_garnet, value_iteration, Mdp, Policy, QTable};

/// Worker-count override for replication parallelism.
pub const THREADS_ENV_VAR: &str = "ACLAB_THREADS";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdpSource {
    File { path: PathBuf },
    Garnet {
        states: usize,
        actions: usize,
        branching: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
        seed: u64,
    },
    TwoLoop,
}

fn default_gamma() -> f64 {
    0.9
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySource {
    #[default]
    Uniform,
    File { path: PathBuf },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    Tabular,
    File { path: PathBuf },
}

/// Critic factor scheme selection with scalar per-state parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticScheme {
    LambdaAveraged { lambda: f64 },
    TwoSided { u: f64 },
    Vanilla,
    OnPolicy,
}

impl CriticScheme {
    pub fn factors(&self, target: &Policy, behavior: &Policy) -> Result<IsFactorTable> {
        match *self {
            CriticScheme::LambdaAveraged { lambda } => IsFactorTable::lambda_averaged(
                target,
                behavior,
                &DVector::from_element(target.n_states(), lambda),
            ),
            CriticScheme::TwoSided { u } => IsFactorTable::two_sided(
                target,
                behavior,
                &DVector::from_element(target.n_states(), u),
            ),
            CriticScheme::Vanilla => IsFactorTable::vanilla(target, behavior),
            CriticScheme::OnPolicy => Ok(IsFactorTable::on_policy(behavior)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticSection {
    pub scheme: CriticScheme,
    /// Bootstrapping parameter; `None` selects `n_required` from the
    /// stability report.
    pub n: Option<usize>,
    pub alpha: f64,
    /// Inner iteration count `K`.
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mdp: MdpSource,
    #[serde(default)]
    pub behavior: PolicySource,
    pub actor: ActorRule,
    pub critic: CriticSection,
    #[serde(default)]
    pub features: FeatureSource,
    /// Outer iteration count `T`.
    pub outer_iterations: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Keep per-iteration critic error traces for the first seed (drives
    /// the `critic_t<k>.csv` outputs).
    #[serde(default = "default_true")]
    pub record_critic_traces: bool,
}

fn default_true() -> bool {
    true
}

pub fn materialize_mdp(source: &MdpSource) -> Result<Mdp> {
    match source {
        MdpSource::File { path } => Mdp::load(path),
        MdpSource::Garnet {
            states,
            actions,
            branching,
            gamma,
            seed,
        } => gen_garnet(*states, *actions, *branching, *gamma, *seed),
        MdpSource::TwoLoop => Ok(Mdp::two_loop()),
    }
}

pub fn materialize_policy(source: &PolicySource, mdp: &Mdp) -> Result<Policy> {
    match source {
        PolicySource::Uniform => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions())),
        PolicySource::File { path } => {
            let p = Policy::load(path)?;
            mdp.check_policy(&p)?;
            Ok(p)
        }
    }
}

pub fn materialize_features(source: &FeatureSource, mdp: &Mdp) -> Result<FeatureMap> {
    match source {
        FeatureSource::Tabular => Ok(FeatureMap::tabular(mdp.n_pairs())),
        FeatureSource::File { path } => FeatureMap::load(path, mdp.n_pairs()),
    }
}

/// One outer iteration of one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterRecord {
    pub t: usize,
    /// Critic output `w_{t+1}` for target `pi_t`.
    pub w: Vec<f64>,
    /// Exact-oracle optimality gap `||Q* - Q^{pi_t}||_inf` (diagnostic).
    pub err_inf: f64,
    /// Scalar summary of the actor stepsize applied at this iteration.
    pub beta: f64,
    /// `||Q^{pi_t}_{c,rho} - Phi w*_{pi_t}||_inf`, exact.
    pub e_approx: f64,
    /// General bias numerator `max_s sum_a |pi_t - pi_b rho|`.
    pub e_bias: f64,
    pub n1: f64,
    pub n21: f64,
    pub n22: f64,
    pub n23: f64,
    pub n24: f64,
    pub n3: f64,
    pub clamped_states: usize,
    /// Variance parameter `L` of the critic at this target policy.
    pub variance_l: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<OuterRecord>,
    /// `||Q* - Q^{pi_T}||_inf` of the output policy.
    pub final_err: f64,
    /// Per-outer-iteration critic error traces (first seed only).
    #[serde(skip)]
    pub critic_traces: Option<Vec<CriticTrace>>,
}

#[derive(Debug, Clone)]
pub struct CriticTrace {
    pub errors: Vec<f64>,
    pub bounds: Option<Vec<f64>>,
}

/// Scalars the aggregate bound report needs, frozen at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundInputs {
    pub gamma: f64,
    pub err0: f64,
    pub alpha: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub n: usize,
    pub t_alpha: Option<usize>,
    pub lambda_min: f64,
    pub gamma_c: f64,
    pub variance_l_max: f64,
    pub actor_mode: StepsizeMode,
    pub actor_beta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineRun {
    pub seed_runs: Vec<SeedRun>,
    /// Behavior samples consumed per replication, exactly `T (K + n)`.
    pub samples_per_seed: usize,
    pub bound_inputs: BoundInputs,
}

impl PipelineRun {
    pub fn mean_final_error(&self) -> f64 {
        self.seed_runs.iter().map(|r| r.final_err).sum::<f64>() / self.seed_runs.len() as f64
    }
}

/// Executes the pipeline for every configured seed (replications run in a
/// worker pool capped by `ACLAB_THREADS`).
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    if cfg.outer_iterations == 0 {
        return Err(Error::InvalidInput("outer iteration count T must be >= 1".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidInput("at least one replication seed is required".into()));
    }
    if !(cfg.critic.alpha >= 0.0) {
        return Err(Error::InvalidInput("critic stepsize must be >= 0".into()));
    }
    let mdp = materialize_mdp(&cfg.mdp)?;
    let behavior = materialize_policy(&cfg.behavior, &mdp)?;
    let features = materialize_features(&cfg.features, &mdp)?;
    let mixing = stationary_distribution(&mdp, &behavior)?;
    let winfo = spectral_info(&features, &mixing, &behavior)?;
    let (q_star, _) = value_iteration(&mdp, 1e-12)?;

    let ctx = SeedContext {
        cfg,
        mdp: &mdp,
        behavior: &behavior,
        features: &features,
        mixing: &mixing,
        winfo: &winfo,
        q_star: &q_star,
    };

    let indexed: Vec<(usize, u64)> = cfg.seeds.iter().copied().enumerate().collect();
    let worker = |&(idx, seed): &(usize, u64)| -> Result<SeedRun> {
        run_seed(&ctx, seed, idx == 0 && cfg.record_critic_traces)
    };
    let seed_runs: Result<Vec<SeedRun>> = match thread_cap() {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?
            .install(|| indexed.par_iter().map(worker).collect()),
        None => indexed.par_iter().map(worker).collect(),
    };
    let seed_runs = seed_runs?;

    // Aggregate scalars for the bound report. All schemes in use keep
    // D_c = D_rho = I, so gamma_c is policy-independent; L is not, so take
    // the max over every target policy encountered.
    let pi0 = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let factors0 = cfg.critic.scheme.factors(&pi0, &behavior)?;
    let n = resolve_n(cfg, &factors0, &winfo, mdp.gamma(), 0)?;
    let report0 = stability_report(&factors0, &winfo, mdp.gamma(), n)?;
    let l_max = seed_runs
        .iter()
        .flat_map(|r| r.records.iter().map(|rec| rec.variance_l))
        .fold(report0.variance_l, f64::max);
    let err0 = q_star.linf_distance(&exact_q(&mdp, &pi0)?);
    let bound_inputs = BoundInputs {
        gamma: mdp.gamma(),
        err0,
        alpha: cfg.critic.alpha,
        inner_iterations: cfg.critic.iterations,
        outer_iterations: cfg.outer_iterations,
        n,
        t_alpha: mixing.mixing_time(cfg.critic.alpha),
        lambda_min: winfo.lambda_min(),
        gamma_c: report0.gamma_c,
        variance_l_max: l_max,
        actor_mode: cfg.actor.mode,
        actor_beta: cfg.actor.beta,
    };
    Ok(PipelineRun {
        seed_runs,
        samples_per_seed: cfg.outer_iterations * (cfg.critic.iterations + n),
        bound_inputs,
    })
}

fn thread_cap() -> Option<usize> {
    match std::env::var(THREADS_ENV_VAR) {
        Ok(v) => match v.parse::<usize>() {
            Ok(t) if t >= 1 => Some(t),
            _ => {
                log::warn!("ignoring invalid {THREADS_ENV_VAR}={v}");
                None
            }
        },
        Err(_) => None,
    }
}

fn resolve_n(
    cfg: &PipelineConfig,
    factors: &IsFactorTable,
    winfo: &WeightMatrixInfo,
    gamma: f64,
    t: usize,
) -> Result<usize> {
    let report = stability_report(factors, winfo, gamma, cfg.critic.n.unwrap_or(1))?;
    match cfg.critic.n {
        Some(n) => {
            let rep = stability_report(factors, winfo, gamma, n)?;
            if rep.gamma_c >= 1.0 {
                return Err(Error::Stability(format!(
                    "gamma_c = {:.4} >= 1 at outer iteration {t} with n = {n}; required n: {}",
                    rep.gamma_c,
                    rep.n_required.map_or("infeasible".into(), |m| m.to_string())
                )));
            }
            Ok(n)
        }
        None => report.n_required.ok_or_else(|| {
            Error::Stability(format!(
                "no bootstrapping parameter below the search cap stabilizes the critic at outer \
                 iteration {t}"
            ))
        }),
    }
}

struct SeedContext<'a> {
    cfg: &'a PipelineConfig,
    mdp: &'a Mdp,
    behavior: &'a Policy,
    features: &'a FeatureMap,
    mixing: &'a MixingInfo,
    winfo: &'a WeightMatrixInfo,
    q_star: &'a QTable,
}

enum ActorState {
    /// Compatible softmax parameter (natural policy gradient).
    Theta(DVector<f64>),
    /// Logit table of the current policy (Boltzmann), or explicit
    /// probabilities (epsilon-greedy / initial uniform).
    Table(Policy),
}

fn run_seed(ctx: &SeedContext<'_>, seed: u64, keep_traces: bool) -> Result<SeedRun> {
    let cfg = ctx.cfg;
    let mdp = ctx.mdp;
    let gamma = mdp.gamma();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let t_outer = cfg.outer_iterations;
    let k_inner = cfg.critic.iterations;

    // Resolve n against the initial (uniform) policy; re-checked per t.
    let pi0 = Policy::uniform(ns, na);
    let factors0 = cfg.critic.scheme.factors(&pi0, ctx.behavior)?;
    let n = resolve_n(cfg, &factors0, ctx.winfo, gamma, 0)?;

    let block = k_inner + n;
    let trajectory =
        sample_trajectory(mdp, ctx.behavior, t_outer * block, seed, StartState::Stationary)?;
    let pairs = pair_indices(mdp, &trajectory);

    let mut state = match cfg.actor.kind {
        ActorRuleKind::Npg => ActorState::Theta(DVector::zeros(ctx.features.dim())),
        _ => ActorState::Table(pi0.clone()),
    };
    let err0 = ctx.q_star.linf_distance(&exact_q(mdp, &pi0)?);

    let mut records = Vec::with_capacity(t_outer);
    let mut traces = keep_traces.then(Vec::new);

    for t in 0..t_outer {
        let pi_t = match &state {
            ActorState::Theta(theta) => theta.policy_table(ctx.features, ns, na),
            ActorState::Table(p) => p.clone(),
        };
        let factors = cfg.critic.scheme.factors(&pi_t, ctx.behavior)?;
        let n_t = resolve_n(cfg, &factors, ctx.winfo, gamma, t)?;
        if n_t != n {
            return Err(Error::Stability(format!(
                "bootstrapping parameter changed from {n} to {n_t} at outer iteration {t}; \
                 fix n explicitly to proceed"
            )));
        }
        let report = stability_report(&factors, ctx.winfo, gamma, n)?;
        let w_star = pbe_fixed_point(mdp, ctx.behavior, &factors, ctx.features, ctx.winfo, n)?;

        // Critic: Algorithm block t, re-initialized at w = 0.
        let problem = TdProblem::new(mdp, &factors, ctx.features, n);
        let window = &pairs[t * block..(t + 1) * block];
        let mut errors = keep_traces.then(|| Vec::with_capacity(k_inner + 1));
        let w_next = problem.run(
            Stepsize::Constant {
                alpha: cfg.critic.alpha,
            },
            k_inner,
            DVector::zeros(ctx.features.dim()),
            window,
            |_, w| {
                if let Some(e) = errors.as_mut() {
                    e.push((w - &w_star).norm_squared());
                }
            },
        );
        if let (Some(traces), Some(errors)) = (traces.as_mut(), errors) {
            let critic_cfg = CriticConfig {
                n,
                iterations: k_inner,
                stepsize: Stepsize::Constant {
                    alpha: cfg.critic.alpha,
                },
                w0: None,
                seed,
            };
            let bounds = theoretical_bound_curve(
                &critic_cfg,
                &report,
                ctx.winfo.lambda_min(),
                ctx.mixing,
                &DVector::zeros(ctx.features.dim()),
                &w_star,
            )
            .ok();
            traces.push(CriticTrace { errors, bounds });
        }

        // Exact diagnostics for this iterate.
        let q_pi_t = exact_q(mdp, &pi_t)?;
        let err_inf = ctx.q_star.linf_distance(&q_pi_t);
        let q_cr = q_fixed_point(mdp, ctx.behavior, &factors)?;
        let e_approx = (q_cr.as_vector() - ctx.features.expand(&w_star)).abs().max();
        let e_bias = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        (pi_t.prob(s, a) - ctx.behavior.prob(s, a) * factors.rho()[(s, a)]).abs()
                    })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);

        // Actor update driven by the critic output Q_t = Phi w_{t+1}.
        let q_est = ctx.features.expand_q(&w_next, ns, na);
        let beta_t = match cfg.actor.kind {
            ActorRuleKind::Npg => {
                let logits = match &state {
                    ActorState::Theta(theta) => {
                        let flat = ctx.features.expand(theta);
                        DMatrix::from_fn(ns, na, |s, a| flat[s * na + a])
                    }
                    ActorState::Table(_) => unreachable!("NPG always tracks theta"),
                };
                let mut min_log = f64::INFINITY;
                for s in 0..ns {
                    let row = logits.row(s);
                    let m: f64 = row.max();
                    let lse = m + row.iter().map(|&l: &f64| (l - m).exp()).sum::<f64>().ln();
                    min_log = min_log.min(logits[(s, q_est.greedy_action(s))] - lse);
                }
                if min_log == f64::NEG_INFINITY {
                    return Err(Error::DegenerateSupport(format!(
                        "greedy action has zero probability at outer iteration {t}"
                    )));
                }
                BetaValue::Scalar(match cfg.actor.mode {
                    StepsizeMode::Constant => gamma * cfg.actor.beta * (-min_log),
                    StepsizeMode::Increasing => -min_log / gamma.powi(2 * t as i32 - 1),
                })
            }
            _ => stepsize_condition(
                cfg.actor.kind,
                cfg.actor.mode,
                cfg.actor.beta,
                t,
                &pi_t,
                &q_est,
                gamma,
            )?,
        };

        let mut clamped = 0usize;
        state = match (cfg.actor.kind, &beta_t, state) {
            (ActorRuleKind::Npg, BetaValue::Scalar(b), ActorState::Theta(theta)) => {
                ActorState::Theta(theta + &w_next * *b)
            }
            (ActorRuleKind::Boltzmann, BetaValue::Scalar(b), _) => {
                ActorState::Table(Policy::from_logits(&(q_est.values() * *b)))
            }
            (ActorRuleKind::EpsGreedy, BetaValue::PerState(v), _) => {
                let (p, c) = eps_greedy_update(&q_est, v)?;
                clamped = c;
                ActorState::Table(p)
            }
            _ => unreachable!("stepsize arity always matches the rule"),
        };

        let t_alpha = ctx.mixing.mixing_time(cfg.critic.alpha);
        let (n23, n24) = critic_terms(
            gamma,
            report.gamma_c,
            ctx.winfo.lambda_min(),
            cfg.critic.alpha,
            k_inner,
            n,
            t_alpha,
            report.variance_l,
        );
        let n3 = match cfg.actor.mode {
            StepsizeMode::Constant => 2.0 * gamma / (cfg.actor.beta * (1.0 - gamma).powi(2)),
            StepsizeMode::Increasing => 2.0 * gamma.powi(t as i32) / (1.0 - gamma).powi(2),
        };
        records.push(OuterRecord {
            t,
            w: w_next.iter().copied().collect(),
            err_inf,
            beta: beta_t.summary(),
            e_approx,
            e_bias,
            n1: gamma.powi(t as i32) * err0,
            n21: 2.0 * gamma * e_approx / (1.0 - gamma).powi(2),
            n22: 2.0 * gamma.powi(2) * e_bias / (1.0 - gamma).powi(4),
            n23,
            n24,
            n3,
            clamped_states: clamped,
            variance_l: report.variance_l,
        });
    }

    let pi_final = match &state {
        ActorState::Theta(theta) => theta.policy_table(ctx.features, ns, na),
        ActorState::Table(p) => p.clone(),
    };
    let final_err = ctx.q_star.linf_distance(&exact_q(mdp, &pi_final)?);
    Ok(SeedRun {
        seed,
        records,
        final_err,
        critic_traces: traces,
    })
}

trait ThetaPolicy {
    fn policy_table(&self, features: &FeatureMap, ns: usize, na: usize) -> Policy;
}

impl ThetaPolicy for DVector<f64> {
    fn policy_table(&self, features: &FeatureMap, ns: usize, na: usize) -> Policy {
        let flat = features.expand(self);
        Policy::from_logits(&DMatrix::from_fn(ns, na, |s, a| flat[s * na + a]))
    }
}

#[allow(clippy::too_many_arguments)]
fn critic_terms(
    gamma: f64,
    gamma_c: f64,
    lambda_min: f64,
    alpha: f64,
    k_inner: usize,
    n: usize,
    t_alpha: Option<usize>,
    variance_l: f64,
) -> (f64, f64) {
    let Some(t_alpha) = t_alpha else {
        return (f64::NAN, f64::NAN);
    };
    let k_start = (t_alpha + n + 1) as f64;
    let decay = (1.0 - (1.0 - gamma_c) * lambda_min * alpha)
        .powf(0.5 * (k_inner as f64 - k_start).max(0.0));
    let n23 = 6.0 * decay / ((1.0 - gamma).powi(3) * (1.0 - gamma_c).sqrt() * lambda_min.sqrt());
    let n24 = 70.0 * variance_l * (alpha * k_start).sqrt()
        / (lambda_min * (1.0 - gamma_c) * (1.0 - gamma).powi(3));
    (n23, n24)
}

/// Aggregate bound table for a finished run.
#[derive(Debug, Serialize)]
pub struct BoundReport {
    pub n1: f64,
    pub n21: f64,
    pub n22: f64,
    pub n23: f64,
    pub n24: f64,
    /// Actor floor: `2 gamma / (beta (1-gamma)^2)` for the constant
    /// schedule, `2 gamma^T / (1-gamma)^2` for the increasing one.
    pub n3: f64,
    /// Alternative published form of the constant-schedule floor,
    /// `2 gamma beta / (1-gamma)^2`.
    pub n3_alt: Option<f64>,
    pub total: f64,
    pub measured_mean_final_error: f64,
    pub ratio_measured_over_bound: f64,
    pub e_approx: f64,
    pub e_bias: f64,
    pub caveat: String,
}

/// Builds the term-by-term bound table from a finished run. `E_approx` and
/// `E_bias` are maxima over the policies actually encountered, a computable
/// stand-in (and lower bound) for the supremum over all policies.
pub fn bound_report(run: &PipelineRun) -> Result<BoundReport> {
    let b = &run.bound_inputs;
    let gamma = b.gamma;
    let e_approx = run
        .seed_runs
        .iter()
        .flat_map(|r| r.records.iter().map(|rec| rec.e_approx))
        .fold(0.0, f64::max);
    let e_bias = run
        .seed_runs
        .iter()
        .flat_map(|r| r.records.iter().map(|rec| rec.e_bias))
        .fold(0.0, f64::max);
    let (n23, n24) = critic_terms(
        gamma,
        b.gamma_c,
        b.lambda_min,
        b.alpha,
        b.inner_iterations,
        b.n,
        b.t_alpha,
        b.variance_l_max,
    );
    if !n23.is_finite() {
        return Err(Error::Precondition(
            "mixing time at the critic stepsize is unavailable; critic bound terms undefined"
                .into(),
        ));
    }
    let t = b.outer_iterations;
    let (n3, n3_alt) = match b.actor_mode {
        StepsizeMode::Constant => (
            2.0 * gamma / (b.actor_beta * (1.0 - gamma).powi(2)),
            Some(2.0 * gamma * b.actor_beta / (1.0 - gamma).powi(2)),
        ),
        StepsizeMode::Increasing => (2.0 * gamma.powi(t as i32) / (1.0 - gamma).powi(2), None),
    };
    let n1 = gamma.powi(t as i32) * b.err0;
    let n21 = 2.0 * gamma * e_approx / (1.0 - gamma).powi(2);
    let n22 = 2.0 * gamma.powi(2) * e_bias / (1.0 - gamma).powi(4);
    let total = n1 + n21 + n22 + n23 + n24 + n3;
    let measured = run.mean_final_error();
    Ok(BoundReport {
        n1,
        n21,
        n22,
        n23,
        n24,
        n3,
        n3_alt,
        total,
        measured_mean_final_error: measured,
        ratio_measured_over_bound: measured / total,
        e_approx,
        e_bias,
        caveat: "E_approx and E_bias are maxima over encountered policies (a lower bound of the \
                 supremum over all policies)"
            .into(),
    })
}

impl PipelineRun {
    /// Writes `actor.csv`, per-outer-iteration `critic_t<k>.csv` traces for
    /// the first seed, `bounds.json`, `report.txt`, and the full `run.json`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut actor = std::io::BufWriter::new(std::fs::File::create(dir.join("actor.csv"))?);
        writeln!(actor, "{CSV_HEADER}")?;
        writeln!(actor, "seed,t,beta_t,err_inf,N1,N2_1,N2_2,N2_3,N2_4,N3")?;
        for run in &self.seed_runs {
            for r in &run.records {
                writeln!(
                    actor,
                    "{},{},{},{},{},{},{},{},{},{}",
                    run.seed, r.t, r.beta, r.err_inf, r.n1, r.n21, r.n22, r.n23, r.n24, r.n3
                )?;
            }
        }
        drop(actor);

        if let Some(traces) = self.seed_runs.first().and_then(|r| r.critic_traces.as_ref()) {
            for (t, trace) in traces.iter().enumerate() {
                let mut out = std::io::BufWriter::new(std::fs::File::create(
                    dir.join(format!("critic_t{t}.csv")),
                )?);
                writeln!(out, "{CSV_HEADER}")?;
                writeln!(out, "k,alpha_k,w_err_sq,bound")?;
                for (k, err) in trace.errors.iter().enumerate() {
                    let bound = trace
                        .bounds
                        .as_ref()
                        .map_or(f64::NAN, |b| b.get(k).copied().unwrap_or(f64::NAN));
                    writeln!(out, "{},{},{},{}", k, self.bound_inputs.alpha, err, bound)?;
                }
            }
        }

        let report = bound_report(self);
        match &report {
            Ok(rep) => {
                std::fs::write(dir.join("bounds.json"), serde_json::to_string_pretty(rep)?)?;
            }
            Err(e) => {
                std::fs::write(
                    dir.join("bounds.json"),
                    serde_json::to_string_pretty(&serde_json::json!({ "error": e.to_string() }))?,
                )?;
            }
        }

        let mut txt = String::new();
        txt.push_str(&format!(
            "replications: {}\nsamples per replication: {}\nmean final error: {}\n",
            self.seed_runs.len(),
            self.samples_per_seed,
            self.mean_final_error()
        ));
        if let Ok(rep) = &report {
            txt.push_str(&format!(
                "bound terms: N1={} N2_1={} N2_2={} N2_3={} N2_4={} N3={}\ntotal bound: {}\nmeasured/bound: {}\n{}\n",
                rep.n1, rep.n21, rep.n22, rep.n23, rep.n24, rep.n3, rep.total,
                rep.ratio_measured_over_bound, rep.caveat
            ));
        }
        std::fs::write(dir.join("report.txt"), txt)?;
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

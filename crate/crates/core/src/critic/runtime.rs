//! The stochastic multi-step off-policy TD iteration and the finite-sample
//! bound curves it is checked against.
//!
//! One iteration reads the trajectory window `(S_k, A_k), ..., (S_{k+n}, A_{k+n})`
//! and performs
//!
//! ```text
//! Delta_i(w) = R(S_i, A_i) + gamma rho(S_{i+1}, A_{i+1}) phi(S_{i+1}, A_{i+1})' w
//!              - phi(S_i, A_i)' w
//! w        <- w + alpha_k phi(S_k, A_k)
//!              sum_{i=k}^{k+n-1} gamma^{i-k} prod_{j=k+1}^{i} c(S_j, A_j) Delta_i(w)
//! ```
//!
//! Windows overlap, the iteration is single time-scale, and there is no
//! replay buffer. Runs are deterministic given the input trajectory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::chain::MixingInfo;
use crate::critic::analytic::{pbe_fixed_point, StabilityReport};
use crate::critic::factors::IsFactorTable;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, WeightMatrixInfo};
use crate::mdp::{Mdp, Policy};

/// Versioned header comment carried by every CSV this crate writes.
pub const CSV_HEADER: &str = "# offpolicy-ac-lab v1";

/// Stepsize schedule of the critic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stepsize {
    Constant { alpha: f64 },
    /// `alpha_k = alpha / (k + h)`.
    Diminishing { alpha: f64, h: f64 },
}

impl Stepsize {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Stepsize::Constant { alpha } => alpha,
            Stepsize::Diminishing { alpha, h } => alpha / (k as f64 + h),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            // alpha = 0 is allowed so the frozen-iterate edge case stays
            // expressible.
            Stepsize::Constant { alpha } => alpha >= 0.0 && alpha.is_finite(),
            Stepsize::Diminishing { alpha, h } => alpha >= 0.0 && h >= 0.0 && alpha.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid stepsize schedule {self:?}")))
        }
    }
}

/// Inputs of one critic run.
#[derive(Debug, Clone)]
pub struct CriticConfig {
    /// Bootstrapping parameter `n >= 1`.
    pub n: usize,
    /// Number of iterations `K`.
    pub iterations: usize,
    pub stepsize: Stepsize,
    /// Initial weight vector; zeros when absent.
    pub w0: Option<DVector<f64>>,
    pub seed: u64,
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("bootstrapping parameter n must be >= 1".into()));
        }
        self.stepsize.validate()
    }

    pub fn initial_weights(&self, dim: usize) -> Result<DVector<f64>> {
        match &self.w0 {
            None => Ok(DVector::zeros(dim)),
            Some(w) if w.len() == dim => Ok(w.clone()),
            Some(w) => Err(Error::DimensionMismatch(format!(
                "w0 has {} entries, features have dimension {dim}",
                w.len()
            ))),
        }
    }
}

/// Full trace of a critic run: the weight iterates, the analytic fixed
/// point, the squared distances to it, and (optionally) a theoretical bound
/// curve aligned with the iterates.
#[derive(Debug, Clone)]
pub struct CriticRun {
    pub config: CriticConfig,
    pub weights: Vec<DVector<f64>>,
    pub fixed_point: DVector<f64>,
    /// `||w_k - w*||_2^2` for `k = 0..=K`.
    pub errors: Vec<f64>,
    /// Bound value per iterate; `NaN` before the bound's start index.
    pub bounds: Option<Vec<f64>>,
}

impl CriticRun {
    /// Writes `k, alpha_k, w_err_sq, bound` rows under the schema header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        writeln!(out, "k,alpha_k,w_err_sq,bound")?;
        for (k, err) in self.errors.iter().enumerate() {
            let bound = self
                .bounds
                .as_ref()
                .map_or(f64::NAN, |b| b.get(k).copied().unwrap_or(f64::NAN));
            writeln!(out, "{},{},{},{}", k, self.config.stepsize.at(k), err, bound)?;
        }
        Ok(())
    }
}

/// Precomputed flat tables for the inner TD loop.
pub(crate) struct TdProblem {
    gamma: f64,
    n: usize,
    rewards: Vec<f64>,
    c: Vec<f64>,
    rho: Vec<f64>,
    /// `d x |S||A|`; column p is the feature vector of pair p.
    phi_t: DMatrix<f64>,
}

impl TdProblem {
    pub(crate) fn new(
        mdp: &Mdp,
        factors: &IsFactorTable,
        features: &FeatureMap,
        n: usize,
    ) -> TdProblem {
        let np = mdp.n_pairs();
        let na = mdp.n_actions();
        let flat = |m: &DMatrix<f64>| (0..np).map(|p| m[(p / na, p % na)]).collect::<Vec<_>>();
        TdProblem {
            gamma: mdp.gamma(),
            n,
            rewards: flat(mdp.rewards()),
            c: flat(factors.c()),
            rho: flat(factors.rho()),
            phi_t: features.matrix().transpose(),
        }
    }

    /// Runs `iterations` updates over the trajectory, invoking `visit` with
    /// `(k, w_k)` for `k = 0..=iterations`, and returns the final weights.
    pub(crate) fn run(
        &self,
        stepsize: Stepsize,
        iterations: usize,
        w0: DVector<f64>,
        pairs: &[usize],
        mut visit: impl FnMut(usize, &DVector<f64>),
    ) -> DVector<f64> {
        let mut w = w0;
        for k in 0..iterations {
            visit(k, &w);
            let mut acc = 0.0;
            let mut weight = 1.0;
            for i in k..k + self.n {
                if i > k {
                    weight *= self.gamma * self.c[pairs[i]];
                }
                let (p, p_next) = (pairs[i], pairs[i + 1]);
                let delta = self.rewards[p]
                    + self.gamma * self.rho[p_next] * self.phi_t.column(p_next).dot(&w)
                    - self.phi_t.column(p).dot(&w);
                acc += weight * delta;
            }
            let alpha = stepsize.at(k);
            if alpha != 0.0 && acc != 0.0 {
                w.axpy(alpha * acc, &self.phi_t.column(pairs[k]), 1.0);
            }
        }
        visit(iterations, &w);
        w
    }
}

pub(crate) fn pair_indices(mdp: &Mdp, trajectory: &[(usize, usize)]) -> Vec<usize> {
    trajectory
        .iter()
        .map(|&(s, a)| mdp.pair_index(s, a))
        .collect()
}

/// Runs the multi-step off-policy TD iteration over a behavior trajectory
/// and logs the squared distance of every iterate to the generalized PBE
/// fixed point.
pub fn td_run(
    mdp: &Mdp,
    behavior: &Policy,
    factors: &IsFactorTable,
    features: &FeatureMap,
    winfo: &WeightMatrixInfo,
    config: &CriticConfig,
    trajectory: &[(usize, usize)],
) -> Result<CriticRun> {
    config.validate()?;
    if trajectory.len() < config.iterations + config.n {
        return Err(Error::InvalidInput(format!(
            "trajectory has {} samples, need at least K + n = {}",
            trajectory.len(),
            config.iterations + config.n
        )));
    }
    let w_star = pbe_fixed_point(mdp, behavior, factors, features, winfo, config.n)?;
    let w0 = config.initial_weights(features.dim())?;

    let problem = TdProblem::new(mdp, factors, features, config.n);
    let pairs = pair_indices(mdp, trajectory);
    let mut weights = Vec::with_capacity(config.iterations + 1);
    let mut errors = Vec::with_capacity(config.iterations + 1);
    problem.run(config.stepsize, config.iterations, w0, &pairs, |_, w| {
        weights.push(w.clone());
        errors.push((w - &w_star).norm_squared());
    });
    Ok(CriticRun {
        config: config.clone(),
        weights,
        fixed_point: w_star,
        errors,
        bounds: None,
    })
}

fn bound_constants(w0: &DVector<f64>, w_star: &DVector<f64>) -> (f64, f64) {
    let c1 = (w0.norm() + (w0 - w_star).norm() + 1.0).powi(2);
    let c2 = 130.0 * (w_star.norm() + 1.0).powi(2);
    (c1, c2)
}

/// Evaluates the finite-sample mean-square-error bound curve for the run
/// configuration, one value per iterate `k = 0..=K` (`NaN` before the
/// bound's start index).
///
/// Constant stepsize: for `k >= t_alpha + n + 1`,
///
/// ```text
/// c1 (1 - (1-gamma_c) lambda_min alpha)^(k - (t_alpha+n+1))
///   + c2 alpha L^2 (t_alpha+n+1) / ((1-gamma_c) lambda_min)
/// ```
///
/// with `c1 = (||w0|| + ||w0 - w*|| + 1)^2` and `c2 = 130 (||w*|| + 1)^2`.
/// The stepsize requirement `alpha (t_alpha+n+1) <= (1-gamma_c) lambda_min /
/// (130 L^2)` is checked and logged as a warning when violated -- the bound
/// is sufficient, not necessary, and exploratory runs remain useful.
///
/// Diminishing stepsize `alpha_k = alpha/(k+h)`: requires
/// `alpha > 1/((1-gamma_c) lambda_min)` (hard error otherwise) and, for
/// `k >= k_0 = min{k : k >= t_{alpha_k} + n + 1}`, evaluates
///
/// ```text
/// c1 (k_0+h)/(k+h) + c2 (8 e alpha^2 / ((1-gamma_c) lambda_min alpha - 1))
///   (t_k+n+1)/(k+h)
/// ```
///
/// The accompanying window condition on `h` is checked and logged as a
/// warning when violated, same as the constant-stepsize requirement.
pub fn theoretical_bound_curve(
    config: &CriticConfig,
    report: &StabilityReport,
    lambda_min: f64,
    mixing: &MixingInfo,
    w0: &DVector<f64>,
    w_star: &DVector<f64>,
) -> Result<Vec<f64>> {
    config.validate()?;
    if report.gamma_c >= 1.0 {
        return Err(Error::Stability(format!(
            "gamma_c = {} >= 1; no finite-sample bound applies",
            report.gamma_c
        )));
    }
    let contraction_gap = (1.0 - report.gamma_c) * lambda_min;
    let l = report.variance_l;
    let (c1, c2) = bound_constants(w0, w_star);
    let k_max = config.iterations;
    let n = config.n;
    let mut curve = vec![f64::NAN; k_max + 1];

    match config.stepsize {
        Stepsize::Constant { alpha } => {
            let t_alpha = mixing.mixing_time(alpha).ok_or_else(|| {
                Error::Precondition(format!(
                    "mixing time at precision {alpha} not reachable from the recorded TV decay"
                ))
            })?;
            let k_start = t_alpha + n + 1;
            let cap = contraction_gap / (130.0 * l * l);
            if alpha * k_start as f64 > cap {
                log::warn!(
                    "constant-stepsize requirement violated: alpha (t_alpha+n+1) = {} > {cap}; \
                     the mean-square bound is not guaranteed",
                    alpha * k_start as f64
                );
            }
            let rate = 1.0 - contraction_gap * alpha;
            let variance = c2 * alpha * l * l * k_start as f64 / contraction_gap;
            for k in k_start..=k_max {
                curve[k] = c1 * rate.powi((k - k_start) as i32) + variance;
            }
        }
        Stepsize::Diminishing { alpha, h } => {
            if alpha * contraction_gap <= 1.0 {
                return Err(Error::Precondition(format!(
                    "the diminishing-stepsize bound requires alpha > 1/((1-gamma_c) lambda_min) \
                     = {}, got alpha = {alpha}",
                    1.0 / contraction_gap
                )));
            }
            let t_at = |k: usize| -> Result<usize> {
                mixing.mixing_time(config.stepsize.at(k)).ok_or_else(|| {
                    Error::Precondition(format!(
                        "mixing time at precision {} not reachable",
                        config.stepsize.at(k)
                    ))
                })
            };
            let mut k0 = None;
            for k in 0..=k_max {
                if k >= t_at(k)? + n + 1 {
                    k0 = Some(k);
                    break;
                }
            }
            let k0 = k0.ok_or_else(|| {
                Error::Precondition("k_0 with k >= t_k + n + 1 not reached within the run".into())
            })?;
            // Window condition on h; violation downgrades to a warning.
            let cap = contraction_gap / (130.0 * l * l);
            for k in k0..=k_max {
                let tau = t_at(k)? + n + 1;
                let window: f64 = (k.saturating_sub(tau)..k).map(|i| config.stepsize.at(i)).sum();
                if window > cap {
                    log::warn!(
                        "diminishing-stepsize window condition violated at k = {k}: \
                         sum alpha_i = {window} > {cap}; the bound is not guaranteed"
                    );
                    break;
                }
            }
            let variance_coeff =
                c2 * 8.0 * std::f64::consts::E * alpha * alpha / (contraction_gap * alpha - 1.0);
            for k in k0..=k_max {
                let tau = (t_at(k)? + n + 1) as f64;
                curve[k] =
                    c1 * (k0 as f64 + h) / (k as f64 + h) + variance_coeff * tau / (k as f64 + h);
            }
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{sample_trajectory, stationary_distribution, StartState};
    use crate::critic::analytic::stability_report;
    use crate::critic::factors::IsFactorTable;
    use crate::features::spectral_info;
    use crate::mdp::Mdp;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    struct Ctx {
        mdp: Mdp,
        behavior: Policy,
        target: Policy,
        feats: FeatureMap,
        winfo: WeightMatrixInfo,
        mixing: MixingInfo,
    }

    fn two_loop_ctx() -> Ctx {
        let mdp = Mdp::two_loop();
        let behavior = Policy::uniform(2, 2);
        let target = Policy::new(DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6])).unwrap();
        let mixing = stationary_distribution(&mdp, &behavior).unwrap();
        let feats = FeatureMap::tabular(4);
        let winfo = spectral_info(&feats, &mixing, &behavior).unwrap();
        Ctx {
            mdp,
            behavior,
            target,
            feats,
            winfo,
            mixing,
        }
    }

    fn lambda_one(ctx: &Ctx) -> IsFactorTable {
        IsFactorTable::lambda_averaged(
            &ctx.target,
            &ctx.behavior,
            &nalgebra::DVector::from_element(2, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn zero_stepsize_freezes_iterates() {
        let ctx = two_loop_ctx();
        let factors = lambda_one(&ctx);
        let traj =
            sample_trajectory(&ctx.mdp, &ctx.behavior, 200, 3, StartState::Stationary).unwrap();
        let config = CriticConfig {
            n: 7,
            iterations: 100,
            stepsize: Stepsize::Constant { alpha: 0.0 },
            w0: None,
            seed: 0,
        };
        let run = td_run(
            &ctx.mdp,
            &ctx.behavior,
            &factors,
            &ctx.feats,
            &ctx.winfo,
            &config,
            &traj,
        )
        .unwrap();
        let first = run.errors[0];
        assert!(run.errors.iter().all(|&e| (e - first).abs() < 1e-15));
    }

    #[test]
    fn fixed_point_with_no_noise_is_stationary() {
        // One state, one action: the TD update has zero noise, so starting
        // at the fixed point keeps every Delta at exactly zero.
        let mdp = Mdp::new(
            0.9,
            vec![DMatrix::from_element(1, 1, 1.0)],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let behavior = Policy::uniform(1, 1);
        let mixing = stationary_distribution(&mdp, &behavior).unwrap();
        let feats = FeatureMap::tabular(1);
        let winfo = spectral_info(&feats, &mixing, &behavior).unwrap();
        let factors = IsFactorTable::on_policy(&behavior);
        let traj = vec![(0usize, 0usize); 120];
        let config = CriticConfig {
            n: 2,
            iterations: 100,
            stepsize: Stepsize::Constant { alpha: 0.1 },
            w0: Some(nalgebra::DVector::from_element(1, 10.0)),
            seed: 0,
        };
        let run = td_run(&mdp, &behavior, &factors, &feats, &winfo, &config, &traj).unwrap();
        assert_abs_diff_eq!(run.fixed_point[0], 10.0, epsilon = 1e-9);
        assert!(run.errors.iter().all(|&e| e < 1e-18));
    }

    #[test]
    fn trajectory_length_checked() {
        let ctx = two_loop_ctx();
        let factors = lambda_one(&ctx);
        let traj =
            sample_trajectory(&ctx.mdp, &ctx.behavior, 50, 3, StartState::Stationary).unwrap();
        let config = CriticConfig {
            n: 7,
            iterations: 50,
            stepsize: Stepsize::Constant { alpha: 0.01 },
            w0: None,
            seed: 0,
        };
        let err = td_run(
            &ctx.mdp,
            &ctx.behavior,
            &factors,
            &ctx.feats,
            &ctx.winfo,
            &config,
            &traj,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn constant_bound_curve_closed_form_at_start() {
        let ctx = two_loop_ctx();
        let factors = lambda_one(&ctx);
        let n = 7;
        let report = stability_report(&factors, &ctx.winfo, 0.9, n).unwrap();
        let alpha = 1e-4;
        let config = CriticConfig {
            n,
            iterations: 50,
            stepsize: Stepsize::Constant { alpha },
            w0: None,
            seed: 0,
        };
        let w0 = nalgebra::DVector::zeros(4);
        let w_star = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let curve = theoretical_bound_curve(
            &config,
            &report,
            ctx.winfo.lambda_min(),
            &ctx.mixing,
            &w0,
            &w_star,
        )
        .unwrap();
        let t_alpha = ctx.mixing.mixing_time(alpha).unwrap();
        let k_start = t_alpha + n + 1;
        assert!(curve[k_start - 1].is_nan());
        // At k = k_start the geometric term is exactly c1; the variance term
        // carries the verbatim constant 130 inside c2.
        let c1 = (w0.norm() + (&w0 - &w_star).norm() + 1.0).powi(2);
        let c2 = 130.0 * (w_star.norm() + 1.0).powi(2);
        let gap = (1.0 - report.gamma_c) * ctx.winfo.lambda_min();
        let expect =
            c1 + c2 * alpha * report.variance_l.powi(2) * k_start as f64 / gap;
        assert_abs_diff_eq!(curve[k_start], expect, epsilon = 1e-9 * expect);
    }

    #[test]
    fn diminishing_bound_requires_large_alpha_and_uses_8e() {
        let ctx = two_loop_ctx();
        let factors = lambda_one(&ctx);
        let n = 7;
        let report = stability_report(&factors, &ctx.winfo, 0.9, n).unwrap();
        let gap = (1.0 - report.gamma_c) * ctx.winfo.lambda_min();

        let too_small = CriticConfig {
            n,
            iterations: 100,
            stepsize: Stepsize::Diminishing {
                alpha: 0.5 / gap,
                h: 10.0,
            },
            w0: None,
            seed: 0,
        };
        let w0 = nalgebra::DVector::zeros(4);
        let w_star = nalgebra::DVector::from_element(4, 1.0);
        assert!(matches!(
            theoretical_bound_curve(
                &too_small,
                &report,
                ctx.winfo.lambda_min(),
                &ctx.mixing,
                &w0,
                &w_star
            ),
            Err(Error::Precondition(_))
        ));

        let alpha = 2.0 / gap;
        let h = 50.0;
        let config = CriticConfig {
            n,
            iterations: 100,
            stepsize: Stepsize::Diminishing { alpha, h },
            w0: None,
            seed: 0,
        };
        let curve = theoretical_bound_curve(
            &config,
            &report,
            ctx.winfo.lambda_min(),
            &ctx.mixing,
            &w0,
            &w_star,
        )
        .unwrap();
        // k_0 = min{k : k >= t_{alpha_k} + n + 1} from the recorded decay.
        let k0 = (0..).find(|&k| {
            k >= ctx.mixing.mixing_time(config.stepsize.at(k)).unwrap() + n + 1
        })
        .unwrap();
        assert!(curve[k0 - 1].is_nan());
        assert!(curve[k0].is_finite());
        let c1 = (w0.norm() + (&w0 - &w_star).norm() + 1.0).powi(2);
        let c2 = 130.0 * (w_star.norm() + 1.0).powi(2);
        let k = 40usize;
        let tau = (ctx.mixing.mixing_time(config.stepsize.at(k)).unwrap() + n + 1) as f64;
        let expect = c1 * (k0 as f64 + h) / (k as f64 + h)
            + c2 * (8.0 * std::f64::consts::E * alpha * alpha / (gap * alpha - 1.0)) * tau
                / (k as f64 + h);
        assert_abs_diff_eq!(curve[k], expect, epsilon = 1e-9 * expect);
    }

    #[test]
    fn csv_round_trips_schema_header() {
        let ctx = two_loop_ctx();
        let factors = lambda_one(&ctx);
        let traj =
            sample_trajectory(&ctx.mdp, &ctx.behavior, 120, 5, StartState::Stationary).unwrap();
        let config = CriticConfig {
            n: 7,
            iterations: 100,
            stepsize: Stepsize::Constant { alpha: 0.01 },
            w0: None,
            seed: 0,
        };
        let run = td_run(
            &ctx.mdp,
            &ctx.behavior,
            &factors,
            &ctx.feats,
            &ctx.winfo,
            &config,
            &traj,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("critic.csv");
        run.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# offpolicy-ac-lab v1\nk,alpha_k,w_err_sq,bound\n"));
        assert_eq!(text.lines().count(), 2 + 101);
    }
}

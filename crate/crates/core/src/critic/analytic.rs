//! Analytic layer of the critic: the generalized Bellman operator, its exact
//! fixed points, the projected-Bellman-equation solution, and the stability,
//! bias, and variance calculators.
//!
//! In matrix form over state-action pairs, with
//! `M_c((s,a),(s',a')) = P_a(s,s') pi_b(a'|s') c(s',a')` and `M_rho`
//! analogous,
//!
//! ```text
//! H_rho(Q) = R + gamma M_rho Q
//! T_c(Y)   = sum_{i=0}^{n-1} (gamma M_c)^i Y
//! B(Q)     = T_c(H_rho(Q) - Q) + Q
//! ```
//!
//! and the expected TD update direction is
//! `F_bar(w) = Phi' K_SA T_c(H_rho(Phi w) - Phi w) = b - A w`, whose zero is
//! the generalized PBE solution. Fixed points are computed by direct linear
//! solves so they stay independent of the stochastic iteration they oracle.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::critic::factors::{FactorScheme, IsFactorTable};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Projector, WeightMatrixInfo};
use crate::mdp::{Mdp, Policy, QTable};

/// Search cap for the bootstrapping parameter when looking for `gamma_c < 1`.
pub const N_SEARCH_CAP: usize = 10_000;

/// `f_n(x) = sum_{i=0}^{n-1} x^i`.
pub fn f_n(x: f64, n: usize) -> f64 {
    let mut acc = 0.0;
    let mut pow = 1.0;
    for _ in 0..n {
        acc += pow;
        pow *= x;
    }
    acc
}

/// Contraction and variance diagnostics for one factor table at a given
/// bootstrapping parameter `n`.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub n: usize,
    /// Sup-norm contraction factor of the generalized Bellman operator,
    /// `1 - f_n(gamma D_c_min) (1 - gamma D_rho_max)`.
    pub gamma_tilde_n: f64,
    /// Contraction factor of the projected operator,
    /// `gamma_tilde(n) / sqrt(K_SA_min)`.
    pub gamma_c: f64,
    /// The three requirements on the factors: `c <= rho`,
    /// `gamma D_rho_max < 1`, and the projected-contraction limit below 1.
    pub condition3: [bool; 3],
    /// Smallest `n` achieving `gamma_c < 1`, if any exists below the cap.
    pub n_required: Option<usize>,
    /// Lipschitz/variance parameter `L` of the stochastic update:
    /// `1 + (gamma rho_max)^n` when `c = rho`, else
    /// `(1 + gamma rho_max) f_n(gamma c_max)`.
    pub variance_l: f64,
}

pub(crate) fn gamma_tilde(factors: &IsFactorTable, gamma: f64, n: usize) -> f64 {
    1.0 - f_n(gamma * factors.d_c_min(), n) * (1.0 - gamma * factors.d_rho_max())
}

/// Variance parameter `L` at bootstrapping parameter `n`.
pub fn variance_param(factors: &IsFactorTable, gamma: f64, n: usize) -> f64 {
    if factors.c_equals_rho() {
        1.0 + (gamma * factors.rho_max()).powi(n as i32)
    } else {
        (1.0 + gamma * factors.rho_max()) * f_n(gamma * factors.c_max(), n)
    }
}

/// Computes all stability quantities for the factor table.
pub fn stability_report(
    factors: &IsFactorTable,
    winfo: &WeightMatrixInfo,
    gamma: f64,
    n: usize,
) -> Result<StabilityReport> {
    if n == 0 {
        return Err(Error::InvalidInput("bootstrapping parameter n must be >= 1".into()));
    }
    let ksa_sqrt = winfo.ksa_min().sqrt();
    let cond_order = factors
        .c()
        .iter()
        .zip(factors.rho().iter())
        .all(|(&c, &r)| c <= r + 1e-12);
    let cond_rho = gamma * factors.d_rho_max() < 1.0;
    let cond_limit = if gamma * factors.d_c_min() < 1.0 {
        gamma * (factors.d_rho_max() - factors.d_c_min())
            / ((1.0 - gamma * factors.d_c_min()) * ksa_sqrt)
            < 1.0
    } else {
        false
    };
    let n_required = (1..=N_SEARCH_CAP).find(|&m| gamma_tilde(factors, gamma, m) / ksa_sqrt < 1.0);
    let gamma_tilde_n = gamma_tilde(factors, gamma, n);
    Ok(StabilityReport {
        n,
        gamma_tilde_n,
        gamma_c: gamma_tilde_n / ksa_sqrt,
        condition3: [cond_order, cond_rho, cond_limit],
        n_required,
        variance_l: variance_param(factors, gamma, n),
    })
}

/// The generalized Bellman operator in matrix form, reusable across many
/// applications.
pub struct GeneralizedBellman {
    gamma: f64,
    n: usize,
    m_c: DMatrix<f64>,
    m_rho: DMatrix<f64>,
    rewards: DVector<f64>,
}

/// `M((s,a),(s',a')) = P_a(s,s') pi_b(a'|s') w(s',a')` for a weight table.
fn pair_kernel(mdp: &Mdp, behavior: &Policy, weights: &DMatrix<f64>) -> DMatrix<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = ns * na;
    let mut m = DMatrix::zeros(n, n);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.pair_index(s, a);
            for s2 in 0..ns {
                let pt = mdp.transition(a)[(s, s2)];
                if pt == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    m[(row, mdp.pair_index(s2, a2))] =
                        pt * behavior.prob(s2, a2) * weights[(s2, a2)];
                }
            }
        }
    }
    m
}

impl GeneralizedBellman {
    pub fn new(
        mdp: &Mdp,
        behavior: &Policy,
        factors: &IsFactorTable,
        n: usize,
    ) -> Result<GeneralizedBellman> {
        mdp.check_policy(behavior)?;
        mdp.check_solver_cap()?;
        if factors.n_states() != mdp.n_states() || factors.n_actions() != mdp.n_actions() {
            return Err(Error::DimensionMismatch("factor table does not match the MDP".into()));
        }
        if n == 0 {
            return Err(Error::InvalidInput("bootstrapping parameter n must be >= 1".into()));
        }
        Ok(GeneralizedBellman {
            gamma: mdp.gamma(),
            n,
            m_c: pair_kernel(mdp, behavior, factors.c()),
            m_rho: pair_kernel(mdp, behavior, factors.rho()),
            rewards: mdp.reward_vector(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `T_c(v) = sum_{i=0}^{n-1} (gamma M_c)^i v`.
    pub fn t_c(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut acc = v.clone();
        let mut cur = v.clone();
        for _ in 1..self.n {
            cur = &self.m_c * cur * self.gamma;
            acc += &cur;
        }
        acc
    }

    fn t_c_mat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut acc = y.clone();
        let mut cur = y.clone();
        for _ in 1..self.n {
            cur = &self.m_c * cur * self.gamma;
            acc += &cur;
        }
        acc
    }

    /// `H_rho(v) = R + gamma M_rho v`.
    pub fn h_rho(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.rewards + &self.m_rho * v * self.gamma
    }

    /// `B(v) = T_c(H_rho(v) - v) + v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.t_c(&(self.h_rho(v) - v)) + v
    }
}

/// Applies the generalized Bellman operator to a Q table.
pub fn generalized_bellman(
    q: &QTable,
    mdp: &Mdp,
    behavior: &Policy,
    factors: &IsFactorTable,
    n: usize,
) -> Result<QTable> {
    mdp.check_q(q)?;
    let gb = GeneralizedBellman::new(mdp, behavior, factors, n)?;
    Ok(QTable::from_vector(
        mdp.n_states(),
        mdp.n_actions(),
        &gb.apply(&q.as_vector()),
    ))
}

/// Unique solution of `Q = B_{c,rho}(Q)`, via the equivalent one-step system
/// `(I - gamma M_rho) Q = R`.
///
/// Requires `gamma D_rho_max < 1`, which also makes `T_c` invertible so the
/// one-step and n-step fixed points coincide for every `n`.
pub fn q_fixed_point(mdp: &Mdp, behavior: &Policy, factors: &IsFactorTable) -> Result<QTable> {
    mdp.check_policy(behavior)?;
    mdp.check_solver_cap()?;
    if mdp.gamma() * factors.d_rho_max() >= 1.0 {
        return Err(Error::Stability(format!(
            "gamma * D_rho_max = {} >= 1; the generalized Bellman equation may not have a unique solution",
            mdp.gamma() * factors.d_rho_max()
        )));
    }
    let gb = GeneralizedBellman::new(mdp, behavior, factors, 1)?;
    let np = mdp.n_pairs();
    let a = DMatrix::identity(np, np) - &gb.m_rho * mdp.gamma();
    let q = a
        .lu()
        .solve(&gb.rewards)
        .ok_or_else(|| Error::Stability("one-step factor system is singular".into()))?;
    let residual = (gb.h_rho(&q) - &q).abs().max();
    if residual > 1e-8 {
        return Err(Error::Stability(format!(
            "fixed-point residual {residual:.3e} exceeds 1e-8"
        )));
    }
    Ok(QTable::from_vector(mdp.n_states(), mdp.n_actions(), &q))
}

/// The d-dimensional linear system `A w = b` whose solution is the
/// generalized PBE fixed point; `F_bar(w) = b - A w`.
pub struct PbeSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn pbe_system(
    gb: &GeneralizedBellman,
    features: &FeatureMap,
    winfo: &WeightMatrixInfo,
) -> Result<PbeSystem> {
    let np = gb.rewards.len();
    if features.n_pairs() != np || winfo.ksa_diag().len() != np {
        return Err(Error::DimensionMismatch(
            "features / K_SA do not match the state-action space".into(),
        ));
    }
    let phi = features.matrix();
    let y = phi - &gb.m_rho * phi * gb.gamma;
    let mut ty = gb.t_c_mat(&y);
    let mut tr = gb.t_c(&gb.rewards);
    for p in 0..np {
        let k = winfo.ksa_diag()[p];
        ty.row_mut(p).scale_mut(k);
        tr[p] *= k;
    }
    Ok(PbeSystem {
        a: phi.transpose() * ty,
        b: phi.transpose() * tr,
    })
}

/// Solves the generalized projected Bellman equation for `w` and verifies
/// both the linear-system residual and the fixed-point identity
/// `Phi w = Proj B(Phi w)`.
pub fn pbe_fixed_point(
    mdp: &Mdp,
    behavior: &Policy,
    factors: &IsFactorTable,
    features: &FeatureMap,
    winfo: &WeightMatrixInfo,
    n: usize,
) -> Result<DVector<f64>> {
    let report = stability_report(factors, winfo, mdp.gamma(), n)?;
    if report.gamma_c >= 1.0 {
        return Err(Error::Stability(format!(
            "gamma_c = {:.6} >= 1 at n = {n}; required n: {}",
            report.gamma_c,
            report
                .n_required
                .map_or("infeasible".into(), |m| m.to_string())
        )));
    }
    let gb = GeneralizedBellman::new(mdp, behavior, factors, n)?;
    let sys = pbe_system(&gb, features, winfo)?;
    let w = sys
        .a
        .clone()
        .lu()
        .solve(&sys.b)
        .ok_or_else(|| Error::InvalidFeature("PBE system is singular despite gamma_c < 1".into()))?;
    let residual = (&sys.a * &w - &sys.b).abs().max();
    if residual > 1e-9 {
        return Err(Error::InvalidFeature(format!(
            "PBE residual {residual:.3e} exceeds 1e-9"
        )));
    }
    let qw = features.expand(&w);
    let projected = Projector::new(features, winfo)?.apply_vec(&gb.apply(&qw))?;
    let gap = (&qw - projected).abs().max();
    if gap > 1e-8 {
        return Err(Error::InvalidFeature(format!(
            "projected fixed-point identity violated by {gap:.3e}"
        )));
    }
    Ok(w)
}

/// Expected update direction `F_bar(w)` of the stochastic TD iteration,
/// computed exactly through the matrix forms.
pub fn expected_update(
    gb: &GeneralizedBellman,
    features: &FeatureMap,
    winfo: &WeightMatrixInfo,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let sys = pbe_system(gb, features, winfo)?;
    Ok(&sys.b - &sys.a * w)
}

/// The two error terms bounding `||Q^pi - Phi w||_{K_SA}` at the PBE
/// solution: function-approximation error and sampling bias from the
/// generalized factors.
#[derive(Debug, Clone, Serialize)]
pub struct BiasBound {
    /// `||Q_{c,rho} - Proj Q_{c,rho}||_{K_SA} / sqrt(1 - gamma_c^2)`.
    pub approx_term: f64,
    /// `gamma max_s ||pi(.|s) - pi_b(.|s) rho(s,.)||_1
    ///  / ((1 - gamma)(1 - gamma D_rho_max))`.
    pub sampling_bias_term: f64,
    /// Scheme-specific closed form of the bias numerator: equals the general
    /// term for lambda-averaged factors, upper-bounds it for two-sided.
    pub specialized_bias_term: Option<f64>,
}

impl BiasBound {
    pub fn total(&self) -> f64 {
        self.approx_term + self.sampling_bias_term
    }
}

pub fn bias_bound(
    mdp: &Mdp,
    behavior: &Policy,
    target: &Policy,
    factors: &IsFactorTable,
    features: &FeatureMap,
    winfo: &WeightMatrixInfo,
    n: usize,
) -> Result<BiasBound> {
    let report = stability_report(factors, winfo, mdp.gamma(), n)?;
    if report.gamma_c >= 1.0 {
        return Err(Error::Stability(format!(
            "gamma_c = {:.6} >= 1; bias bound undefined",
            report.gamma_c
        )));
    }
    let gamma = mdp.gamma();
    let q_cr = q_fixed_point(mdp, behavior, factors)?.as_vector();
    let projected = Projector::new(features, winfo)?.apply_vec(&q_cr)?;
    let approx_term = winfo.norm_vec(&(&q_cr - projected)) / (1.0 - report.gamma_c.powi(2)).sqrt();

    let bias_l1 = (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| (target.prob(s, a) - behavior.prob(s, a) * factors.rho()[(s, a)]).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let sampling_bias_term =
        gamma * bias_l1 / ((1.0 - gamma) * (1.0 - gamma * factors.d_rho_max()));

    let specialized_bias_term = match factors.scheme() {
        FactorScheme::LambdaAveraged { lambda } => {
            let m = (0..mdp.n_states())
                .map(|s| (1.0 - lambda[s]) * target.row_l1_distance(behavior, s))
                .fold(0.0, f64::max);
            Some(gamma * m / (1.0 - gamma).powi(2))
        }
        FactorScheme::TwoSided { lower, upper } => {
            let m = (0..mdp.n_states())
                .map(|s| {
                    (0..mdp.n_actions())
                        .map(|a| {
                            let over =
                                (target.prob(s, a) - behavior.prob(s, a) * upper[s]).max(0.0);
                            let under =
                                (target.prob(s, a) - behavior.prob(s, a) * lower[s]).min(0.0);
                            over - under
                        })
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            Some(gamma * m / (1.0 - gamma).powi(2))
        }
        _ => None,
    };
    if let Some(sp) = specialized_bias_term {
        debug_assert!(
            sp >= sampling_bias_term - 1e-9,
            "specialized bias {sp} below general term {sampling_bias_term}"
        );
    }
    Ok(BiasBound {
        approx_term,
        sampling_bias_term,
        specialized_bias_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::stationary_distribution;
    use crate::features::spectral_info;
    use crate::mdp::{exact_q, gen_garnet};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Setup {
        mdp: Mdp,
        behavior: Policy,
        target: Policy,
        winfo_tab: WeightMatrixInfo,
        mixing: crate::chain::MixingInfo,
    }

    fn two_loop_setup() -> Setup {
        let mdp = Mdp::two_loop();
        let behavior = Policy::uniform(2, 2);
        let target = Policy::new(DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.3, 0.7])).unwrap();
        let mixing = stationary_distribution(&mdp, &behavior).unwrap();
        let winfo_tab = spectral_info(&FeatureMap::tabular(4), &mixing, &behavior).unwrap();
        Setup {
            mdp,
            behavior,
            target,
            winfo_tab,
            mixing,
        }
    }

    #[test]
    fn stability_lambda_averaged_closed_forms() {
        let s = two_loop_setup();
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        for n in [1usize, 3, 7, 20] {
            let rep = stability_report(&factors, &s.winfo_tab, 0.9, n).unwrap();
            // D_c = D_rho = I collapses gamma_tilde(n) to gamma^n.
            assert_abs_diff_eq!(rep.gamma_tilde_n, 0.9f64.powi(n as i32), epsilon = 1e-12);
            assert_abs_diff_eq!(
                rep.gamma_c,
                0.9f64.powi(n as i32) / s.winfo_tab.ksa_min().sqrt(),
                epsilon = 1e-12
            );
            assert_eq!(rep.condition3, [true, true, true]);
        }
        // n = 1 gives gamma_tilde(1) = gamma D_rho_max.
        let rep1 = stability_report(&factors, &s.winfo_tab, 0.9, 1).unwrap();
        assert_abs_diff_eq!(rep1.gamma_tilde_n, 0.9 * factors.d_rho_max(), epsilon = 1e-12);
        // K_SA_min = 1/4, so gamma^n < 1/2 first holds at n = 7.
        assert_eq!(rep1.n_required, Some(7));
    }

    #[test]
    fn vanilla_variance_param_matches_closed_form_and_blows_up() {
        let s = two_loop_setup();
        // Target concentrated on one action: rho_max = 0.9/0.5 = 1.8.
        let target = Policy::new(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.9, 0.1])).unwrap();
        let factors = IsFactorTable::vanilla(&target, &s.behavior).unwrap();
        let g_rho = 0.9 * factors.rho_max();
        assert!(g_rho > 1.0);
        for n in 1..=10 {
            let rep = stability_report(&factors, &s.winfo_tab, 0.9, n).unwrap();
            assert_abs_diff_eq!(rep.variance_l, 1.0 + g_rho.powi(n as i32), epsilon = 1e-10);
        }
        let l1 = stability_report(&factors, &s.winfo_tab, 0.9, 1).unwrap().variance_l;
        let l10 = stability_report(&factors, &s.winfo_tab, 0.9, 10).unwrap().variance_l;
        assert!(l10 / l1 > 10.0, "variance parameter must blow up geometrically");

        // c != rho takes the (1 + gamma rho_max) f_n(gamma c_max) branch.
        let custom =
            IsFactorTable::from_tables(factors.c() * 0.5, factors.rho().clone(), &s.behavior)
                .unwrap();
        let rep = stability_report(&custom, &s.winfo_tab, 0.9, 4).unwrap();
        let expect = (1.0 + g_rho) * f_n(0.9 * custom.c_max(), 4);
        assert_abs_diff_eq!(rep.variance_l, expect, epsilon = 1e-10);
    }

    #[test]
    fn generalized_bellman_n1_is_h_rho_and_on_policy_fixed_point() {
        let s = two_loop_setup();
        let factors = IsFactorTable::vanilla(&s.target, &s.behavior).unwrap();
        let gb = GeneralizedBellman::new(&s.mdp, &s.behavior, &factors, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = DVector::from_fn(4, |_, _| rng.random::<f64>() * 8.0 - 4.0);
        assert!((gb.apply(&q) - gb.h_rho(&q)).abs().max() <= 1e-12);

        // With exact ratios, H_rho coincides with H_pi of the target, so
        // Q^pi is a fixed point of B for any n.
        let q_pi = exact_q(&s.mdp, &s.target).unwrap();
        for n in [1usize, 3, 6] {
            let b = generalized_bellman(&q_pi, &s.mdp, &s.behavior, &factors, n).unwrap();
            assert!(b.linf_distance(&q_pi) <= 1e-9);
        }
    }

    #[test]
    fn q_fixed_point_limiting_schemes() {
        let s = two_loop_setup();
        // Factors identically one evaluate the behavior policy.
        let ones = IsFactorTable::on_policy(&s.behavior);
        let q = q_fixed_point(&s.mdp, &s.behavior, &ones).unwrap();
        let q_b = exact_q(&s.mdp, &s.behavior).unwrap();
        assert!(q.linf_distance(&q_b) <= 1e-9);

        // Exact ratios evaluate the target policy.
        let ratios = IsFactorTable::vanilla(&s.target, &s.behavior).unwrap();
        let q = q_fixed_point(&s.mdp, &s.behavior, &ratios).unwrap();
        let q_pi = exact_q(&s.mdp, &s.target).unwrap();
        assert!(q.linf_distance(&q_pi) <= 1e-9);
    }

    #[test]
    fn q_fixed_point_matches_iteration_oracle() {
        let s = two_loop_setup();
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let q = q_fixed_point(&s.mdp, &s.behavior, &factors).unwrap();

        // Oracle: iterate B to convergence (contraction for these factors).
        let gb = GeneralizedBellman::new(&s.mdp, &s.behavior, &factors, 3).unwrap();
        let mut v = DVector::zeros(4);
        for _ in 0..10_000 {
            let next = gb.apply(&v);
            if (&next - &v).abs().max() < 1e-13 {
                v = next;
                break;
            }
            v = next;
        }
        assert!((q.as_vector() - v).abs().max() <= 1e-10);
    }

    #[test]
    fn generalized_bellman_matches_monte_carlo() {
        let s = two_loop_setup();
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let n = 3usize;
        let q = QTable::from_fn(2, 2, |st, a| 1.5 * st as f64 - 0.7 * a as f64 + 0.3);
        let exact = generalized_bellman(&q, &s.mdp, &s.behavior, &factors, n).unwrap();

        // Monte-Carlo oracle for the defining expectation: for each start
        // pair, X = Q(s,a) + sum_i gamma^i c_{1,i} Delta_i^Q over sampled
        // n-step behavior paths; E[X] = B(Q)(s,a).
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let paths_per_pair = 250_000usize;
        for s0 in 0..2 {
            for a0 in 0..2 {
                let (mut sum, mut sumsq) = (0.0, 0.0);
                for _ in 0..paths_per_pair {
                    let mut x = q.get(s0, a0);
                    let (mut st, mut at) = (s0, a0);
                    let mut weight = 1.0;
                    for i in 0..n {
                        let s_next = sample_row(&mut rng, s.mdp.transition(at), st);
                        let a_next = sample_policy(&mut rng, &s.behavior, s_next);
                        if i > 0 {
                            weight *= 0.9 * factors.c()[(st, at)];
                        }
                        let delta = s.mdp.reward(st, at)
                            + 0.9 * factors.rho()[(s_next, a_next)] * q.get(s_next, a_next)
                            - q.get(st, at);
                        x += weight * delta;
                        st = s_next;
                        at = a_next;
                    }
                    sum += x;
                    sumsq += x * x;
                }
                let mean = sum / paths_per_pair as f64;
                let var = (sumsq / paths_per_pair as f64 - mean * mean).max(0.0);
                let se = (var / paths_per_pair as f64).sqrt();
                let diff = (mean - exact.get(s0, a0)).abs();
                assert!(
                    diff <= 3.0 * se + 1e-9,
                    "pair ({s0},{a0}): MC {mean} vs exact {} (3se = {})",
                    exact.get(s0, a0),
                    3.0 * se
                );
            }
        }
    }

    fn sample_row<R: Rng>(rng: &mut R, p: &DMatrix<f64>, s: usize) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for s2 in 0..p.ncols() {
            acc += p[(s, s2)];
            if u < acc {
                return s2;
            }
        }
        p.ncols() - 1
    }

    fn sample_policy<R: Rng>(rng: &mut R, pi: &Policy, s: usize) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for a in 0..pi.n_actions() {
            acc += pi.prob(s, a);
            if u < acc {
                return a;
            }
        }
        pi.n_actions() - 1
    }

    #[test]
    fn pbe_tabular_reduces_to_q_fixed_point() {
        let s = two_loop_setup();
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let tab = FeatureMap::tabular(4);
        let w = pbe_fixed_point(&s.mdp, &s.behavior, &factors, &tab, &s.winfo_tab, 7).unwrap();
        let q_cr = q_fixed_point(&s.mdp, &s.behavior, &factors).unwrap();
        assert!((tab.expand(&w) - q_cr.as_vector()).abs().max() <= 1e-8);

        // On-policy ratios + tabular features reproduce Q^pi itself.
        let ratios = IsFactorTable::vanilla(&s.target, &s.behavior).unwrap();
        let w = pbe_fixed_point(&s.mdp, &s.behavior, &ratios, &tab, &s.winfo_tab, 8).unwrap();
        let q_pi = exact_q(&s.mdp, &s.target).unwrap();
        assert!((tab.expand(&w) - q_pi.as_vector()).abs().max() <= 1e-8);
    }

    #[test]
    fn pbe_matches_projected_iteration_oracle() {
        let s = two_loop_setup();
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let feats =
            FeatureMap::new(DMatrix::from_fn(4, 2, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let winfo = spectral_info(&feats, &s.mixing, &s.behavior).unwrap();
        // Smallest n with gamma_c < 1 on this instance is 7.
        let n = 7;
        let w = pbe_fixed_point(&s.mdp, &s.behavior, &factors, &feats, &winfo, n).unwrap();

        // Oracle: iterate the gamma_c-contraction Proj B from zero.
        let gb = GeneralizedBellman::new(&s.mdp, &s.behavior, &factors, n).unwrap();
        let proj = Projector::new(&feats, &winfo).unwrap();
        let mut v = DVector::zeros(4);
        for _ in 0..200_000 {
            let next = proj.apply_vec(&gb.apply(&v)).unwrap();
            if (&next - &v).abs().max() < 1e-14 {
                v = next;
                break;
            }
            v = next;
        }
        assert!((feats.expand(&w) - v).abs().max() <= 1e-8);
    }

    #[test]
    fn bias_bound_trivial_cases_and_exact_inequality() {
        let s = two_loop_setup();
        let tab = FeatureMap::tabular(4);
        // lambda = 1: sampling bias vanishes.
        let full =
            IsFactorTable::lambda_averaged(&s.target, &s.behavior, &DVector::from_element(2, 1.0))
                .unwrap();
        let bb = bias_bound(&s.mdp, &s.behavior, &s.target, &full, &tab, &s.winfo_tab, 8).unwrap();
        assert!(bb.sampling_bias_term.abs() <= 1e-12);
        assert!(bb.approx_term.abs() <= 1e-12, "tabular features have no approx error");

        // Exact check of the bound on a non-trivial configuration.
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let feats =
            FeatureMap::new(DMatrix::from_fn(4, 2, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let winfo = spectral_info(&feats, &s.mixing, &s.behavior).unwrap();
        let n = 7;
        let bb = bias_bound(&s.mdp, &s.behavior, &s.target, &factors, &feats, &winfo, n).unwrap();
        let w = pbe_fixed_point(&s.mdp, &s.behavior, &factors, &feats, &winfo, n).unwrap();
        let q_pi = exact_q(&s.mdp, &s.target).unwrap();
        let lhs = winfo.norm_vec(&(q_pi.as_vector() - feats.expand(&w)));
        assert!(
            lhs <= bb.total() + 1e-9,
            "bias bound violated: {lhs} > {}",
            bb.total()
        );
        // Specialized lambda form equals the general term.
        assert_abs_diff_eq!(
            bb.specialized_bias_term.unwrap(),
            bb.sampling_bias_term,
            epsilon = 1e-10
        );
    }

    #[test]
    fn projected_operator_contracts_at_rate_gamma_c() {
        let s = two_loop_setup();
        let lam = DVector::from_vec(vec![0.6, 0.3]);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let feats =
            FeatureMap::new(DMatrix::from_fn(4, 2, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let winfo = spectral_info(&feats, &s.mixing, &s.behavior).unwrap();
        let n = 8;
        let rep = stability_report(&factors, &winfo, 0.9, n).unwrap();
        assert!(rep.gamma_c < 1.0);
        let gb = GeneralizedBellman::new(&s.mdp, &s.behavior, &factors, n).unwrap();
        let proj = Projector::new(&feats, &winfo).unwrap();
        for _ in 0..200 {
            let q1 = DVector::from_fn(4, |_, _| rng.random::<f64>() * 20.0 - 10.0);
            let q2 = DVector::from_fn(4, |_, _| rng.random::<f64>() * 20.0 - 10.0);
            let lhs = winfo.norm_vec(
                &(proj.apply_vec(&gb.apply(&q1)).unwrap()
                    - proj.apply_vec(&gb.apply(&q2)).unwrap()),
            );
            let rhs = rep.gamma_c * winfo.norm_vec(&(&q1 - &q2));
            assert!(lhs <= rhs + 1e-9, "Lipschitz ratio violated: {lhs} > {rhs}");

            // Sup-norm contraction of B itself at rate gamma_tilde(n).
            let sup_lhs = (gb.apply(&q1) - gb.apply(&q2)).abs().max();
            let sup_rhs = rep.gamma_tilde_n * (&q1 - &q2).abs().max();
            assert!(sup_lhs <= sup_rhs + 1e-9);
        }
    }

    #[test]
    fn gamma_tilde_monotone_and_limit() {
        let s = two_loop_setup();
        // A c != rho table exercises the general limit formula.
        let ratios = IsFactorTable::vanilla(&s.target, &s.behavior).unwrap();
        let scaled =
            IsFactorTable::from_tables(ratios.rho() * 0.8, ratios.rho().clone(), &s.behavior)
                .unwrap();
        for factors in [&ratios, &scaled] {
            let mut prev = f64::INFINITY;
            for n in 1..=50 {
                let g = gamma_tilde(factors, 0.9, n);
                assert!(g < prev, "gamma_tilde must strictly decrease (n = {n})");
                prev = g;
            }
            let limit = 0.9 * (factors.d_rho_max() - factors.d_c_min())
                / (1.0 - 0.9 * factors.d_c_min());
            let tail = gamma_tilde(factors, 0.9, 200);
            let ksa = s.winfo_tab.ksa_min().sqrt();
            assert!(
                (tail / ksa - limit / ksa).abs() <= 1e-6,
                "limit mismatch: {tail} vs {limit}"
            );
        }
    }

    #[test]
    fn expected_update_vanishes_only_at_fixed_point() {
        let s = two_loop_setup();
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let feats =
            FeatureMap::new(DMatrix::from_fn(4, 2, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let winfo = spectral_info(&feats, &s.mixing, &s.behavior).unwrap();
        let n = 7;
        let rep = stability_report(&factors, &winfo, 0.9, n).unwrap();
        let w_star = pbe_fixed_point(&s.mdp, &s.behavior, &factors, &feats, &winfo, n).unwrap();
        let gb = GeneralizedBellman::new(&s.mdp, &s.behavior, &factors, n).unwrap();

        let at_star = expected_update(&gb, &feats, &winfo, &w_star).unwrap();
        assert!(at_star.norm() <= 1e-9, "F_bar(w*) = {}", at_star.norm());

        let floor = (1.0 - rep.gamma_c) * winfo.lambda_min();
        for _ in 0..50 {
            let mut dir = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            dir /= dir.norm();
            let f = expected_update(&gb, &feats, &winfo, &(&w_star + dir)).unwrap();
            // The drift inequality forces ||F_bar|| >= (1-gamma_c) lambda_min
            // at unit distance from the fixed point.
            assert!(f.norm() >= floor - 1e-9);
        }

        // Negative drift at 100 random points.
        for _ in 0..100 {
            let w = DVector::from_fn(2, |_, _| rng.random::<f64>() * 6.0 - 3.0);
            let f = expected_update(&gb, &feats, &winfo, &w).unwrap();
            let diff = &w - &w_star;
            let drift = diff.dot(&f);
            assert!(
                drift <= -floor * diff.norm_squared() + 1e-9,
                "drift {drift} vs bound {}",
                -floor * diff.norm_squared()
            );
        }
    }

    #[test]
    fn expected_update_matches_monte_carlo() {
        let s = two_loop_setup();
        let lam = DVector::from_element(2, 0.5);
        let factors = IsFactorTable::lambda_averaged(&s.target, &s.behavior, &lam).unwrap();
        let tab = FeatureMap::tabular(4);
        let n = 3usize;
        let gb = GeneralizedBellman::new(&s.mdp, &s.behavior, &factors, n).unwrap();
        let w = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let exact = expected_update(&gb, &tab, &s.winfo_tab, &w).unwrap();

        // 1e5 independent stationary windows of the sampled update direction.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let samples = 100_000usize;
        let mut sum = DVector::<f64>::zeros(4);
        let mut sumsq = DVector::<f64>::zeros(4);
        for _ in 0..samples {
            let s0 = sample_stationary(&mut rng, &s.mixing);
            let a0 = sample_policy(&mut rng, &s.behavior, s0);
            let mut f = DVector::<f64>::zeros(4);
            let phi0 = s.mdp.pair_index(s0, a0);
            let (mut st, mut at) = (s0, a0);
            let mut weight = 1.0;
            for i in 0..n {
                let s_next = sample_row(&mut rng, s.mdp.transition(at), st);
                let a_next = sample_policy(&mut rng, &s.behavior, s_next);
                if i > 0 {
                    weight *= 0.9 * factors.c()[(st, at)];
                }
                let delta = s.mdp.reward(st, at)
                    + 0.9 * factors.rho()[(s_next, a_next)] * w[s.mdp.pair_index(s_next, a_next)]
                    - w[s.mdp.pair_index(st, at)];
                f[phi0] += weight * delta;
                st = s_next;
                at = a_next;
            }
            sum += &f;
            sumsq.zip_apply(&f, |acc, x| *acc += x * x);
        }
        for j in 0..4 {
            let mean = sum[j] / samples as f64;
            let var = (sumsq[j] / samples as f64 - mean * mean).max(0.0);
            let se = (var / samples as f64).sqrt();
            assert!(
                (mean - exact[j]).abs() <= 3.0 * se + 1e-9,
                "component {j}: MC {mean} vs exact {} (3se {})",
                exact[j],
                3.0 * se
            );
        }
    }

    fn sample_stationary<R: Rng>(rng: &mut R, mixing: &crate::chain::MixingInfo) -> usize {
        let u: f64 = rng.random();
        let mu = mixing.stationary();
        let mut acc = 0.0;
        for (i, &p) in mu.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        mu.len() - 1
    }

    #[test]
    fn infeasible_n_reported_not_errored() {
        // gamma D_rho_max >= 1 makes the search hopeless: n_required = None.
        let mdp = gen_garnet(3, 2, 2, 0.95, 40).unwrap();
        let behavior = Policy::uniform(3, 2);
        let mixing = stationary_distribution(&mdp, &behavior).unwrap();
        let winfo = spectral_info(&FeatureMap::tabular(6), &mixing, &behavior).unwrap();
        let rho = DMatrix::from_element(3, 2, 1.2);
        let c = DMatrix::from_element(3, 2, 1.2);
        let factors = IsFactorTable::from_tables(c, rho, &behavior).unwrap();
        let rep = stability_report(&factors, &winfo, 0.95, 3).unwrap();
        assert!(!rep.condition3[1]);
        assert_eq!(rep.n_required, None);
    }
}

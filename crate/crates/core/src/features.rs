//! Linear value-function class: the feature matrix `Phi`, the
//! `K_SA`-weighted geometry, and projection onto `span(Phi)`.
//!
//! `K_SA` is the diagonal matrix with entries `mu(s) pi_b(a|s)` over
//! state-action pairs; `||Q||_{K_SA}` is the corresponding weighted l2 norm,
//! and the projection is `Proj = Phi (Phi' K Phi)^{-1} Phi' K`.

use nalgebra::{DMatrix, DVector, Dyn};
use serde::Deserialize;
use std::path::Path;

use crate::chain::MixingInfo;
use crate::error::{Error, Result};
use crate::mdp::{Policy, QTable};

/// Cap on the feature dimension for the dense symmetric eigensolve.
pub const FEATURE_DIM_CAP: usize = 100;

const RANK_TOL: f64 = 1e-10;

/// A full-column-rank feature matrix with rows `phi(s, a)` in pair order
/// `(s, a) -> s|A| + a`, normalized so `max_{s,a} ||phi(s,a)||_1 <= 1`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    /// Validates rank and enforces the sup-norm normalization, rescaling the
    /// whole matrix (with a warning) if `max ||phi(s,a)||_1 > 1`.
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(Error::InvalidFeature("empty feature matrix".into()));
        }
        if phi.ncols() > phi.nrows() {
            return Err(Error::InvalidFeature(format!(
                "more features ({}) than state-action pairs ({})",
                phi.ncols(),
                phi.nrows()
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeature("non-finite feature entry".into()));
        }
        let svs = phi.clone().singular_values();
        let (smax, smin) = (svs.max(), svs.min());
        if smin < RANK_TOL * smax {
            return Err(Error::InvalidFeature(format!(
                "columns are not linearly independent (sigma_min/sigma_max = {:.3e})",
                smin / smax
            )));
        }
        let inf_norm = (0..phi.nrows())
            .map(|p| phi.row(p).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let phi = if inf_norm > 1.0 + 1e-12 {
            log::warn!(
                "feature matrix has max row l1 norm {inf_norm:.6}; rescaling by 1/{inf_norm:.6}"
            );
            phi / inf_norm
        } else {
            phi
        };
        Ok(FeatureMap { phi })
    }

    /// Tabular features: the identity on state-action pairs.
    pub fn tabular(n_pairs: usize) -> FeatureMap {
        FeatureMap {
            phi: DMatrix::identity(n_pairs, n_pairs),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_pairs(&self) -> usize {
        self.phi.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `phi(s,a)' w` for the pair at flat index `p`.
    pub fn value(&self, p: usize, w: &DVector<f64>) -> f64 {
        self.phi.row(p).tr_dot(w)
    }

    /// `Phi w` as a flat pair-ordered vector.
    pub fn expand(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.phi * w
    }

    /// `Phi w` reshaped into a Q table.
    pub fn expand_q(&self, w: &DVector<f64>, n_states: usize, n_actions: usize) -> QTable {
        QTable::from_vector(n_states, n_actions, &self.expand(w))
    }

    pub fn load(path: &Path, n_pairs: usize) -> Result<FeatureMap> {
        #[derive(Deserialize)]
        struct FeatureFile {
            dim: usize,
            rows: Vec<Vec<f64>>,
        }
        let f: FeatureFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if f.rows.len() != n_pairs || f.rows.iter().any(|r| r.len() != f.dim) {
            return Err(Error::InvalidFeature(format!(
                "feature file must have {n_pairs} rows of length {}",
                f.dim
            )));
        }
        FeatureMap::new(DMatrix::from_fn(n_pairs, f.dim, |i, j| f.rows[i][j]))
    }
}

/// The `K_SA` diagonal together with its minimum entry and the minimum
/// eigenvalue of `Phi' K_SA Phi`.
#[derive(Debug, Clone)]
pub struct WeightMatrixInfo {
    ksa_diag: DVector<f64>,
    ksa_min: f64,
    lambda_min: f64,
}

impl WeightMatrixInfo {
    pub fn ksa_diag(&self) -> &DVector<f64> {
        &self.ksa_diag
    }

    pub fn ksa_min(&self) -> f64 {
        self.ksa_min
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// `||v||_{K_SA}` for a flat pair-ordered vector.
    pub fn norm_vec(&self, v: &DVector<f64>) -> f64 {
        v.iter()
            .zip(self.ksa_diag.iter())
            .map(|(x, k)| k * x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Assembles `K_SA` from the stationary distribution and the behavior
/// policy, and computes `lambda_min` of `Phi' K_SA Phi` by a symmetric
/// eigensolve.
pub fn spectral_info(
    features: &FeatureMap,
    mixing: &MixingInfo,
    behavior: &Policy,
) -> Result<WeightMatrixInfo> {
    let n_pairs = behavior.n_states() * behavior.n_actions();
    if features.n_pairs() != n_pairs {
        return Err(Error::DimensionMismatch(format!(
            "feature matrix has {} rows, expected {n_pairs}",
            features.n_pairs()
        )));
    }
    if features.dim() > FEATURE_DIM_CAP {
        return Err(Error::InvalidFeature(format!(
            "feature dimension {} exceeds the eigensolve cap of {FEATURE_DIM_CAP}",
            features.dim()
        )));
    }
    let mu = mixing.stationary();
    let na = behavior.n_actions();
    let ksa_diag = DVector::from_fn(n_pairs, |p, _| mu[p / na] * behavior.prob(p / na, p % na));
    if ksa_diag.iter().any(|&k| k <= 0.0) {
        return Err(Error::AssumptionViolation(
            "K_SA has a zero diagonal entry; behavior support or stationarity is degenerate"
                .into(),
        ));
    }
    let gram = weighted_gram(features, &ksa_diag);
    let lambda_min = gram.symmetric_eigen().eigenvalues.min();
    if lambda_min <= 0.0 {
        return Err(Error::InvalidFeature(format!(
            "Phi' K_SA Phi is not positive definite (lambda_min = {lambda_min:.3e})"
        )));
    }
    Ok(WeightMatrixInfo {
        ksa_min: ksa_diag.min(),
        ksa_diag,
        lambda_min,
    })
}

fn weighted_gram(features: &FeatureMap, ksa: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = features.matrix().clone();
    for p in 0..scaled.nrows() {
        let k = ksa[p];
        scaled.row_mut(p).scale_mut(k);
    }
    features.matrix().transpose() * scaled
}

/// `sqrt(sum_{s,a} mu(s) pi_b(a|s) Q(s,a)^2)`.
pub fn weighted_norm(q: &QTable, w: &WeightMatrixInfo) -> Result<f64> {
    let v = q.as_vector();
    if v.len() != w.ksa_diag.len() {
        return Err(Error::DimensionMismatch(format!(
            "Q has {} pairs, K_SA has {}",
            v.len(),
            w.ksa_diag.len()
        )));
    }
    Ok(w.norm_vec(&v))
}

/// Reusable projector onto `span(Phi)` in the `K_SA` geometry.
///
/// Keeps the LU factorization of the weighted Gram matrix so repeated
/// applications (fixed-point iterations, contraction sweeps) cost one
/// triangular solve each.
pub struct Projector {
    phi: DMatrix<f64>,
    phit_k: DMatrix<f64>,
    gram_lu: nalgebra::LU<f64, Dyn, Dyn>,
}

impl Projector {
    pub fn new(features: &FeatureMap, w: &WeightMatrixInfo) -> Result<Self> {
        if features.n_pairs() != w.ksa_diag.len() {
            return Err(Error::DimensionMismatch(
                "feature rows do not match K_SA dimension".into(),
            ));
        }
        let mut phit_k = features.matrix().transpose();
        for p in 0..phit_k.ncols() {
            phit_k.column_mut(p).scale_mut(w.ksa_diag[p]);
        }
        let gram = &phit_k * features.matrix();
        Ok(Projector {
            phi: features.matrix().clone(),
            phit_k,
            gram_lu: gram.lu(),
        })
    }

    /// Coefficient vector `(Phi' K Phi)^{-1} Phi' K v` of the projection.
    pub fn coefficients(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.gram_lu
            .solve(&(&self.phit_k * v))
            .ok_or_else(|| Error::InvalidFeature("weighted Gram matrix is singular".into()))
    }

    /// `Proj v` on flat pair-ordered vectors.
    pub fn apply_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.phi * self.coefficients(v)?)
    }
}

/// Projects a Q table onto the feature span in the `K_SA` geometry.
pub fn project(q: &QTable, features: &FeatureMap, w: &WeightMatrixInfo) -> Result<QTable> {
    let v = q.as_vector();
    if v.len() != features.n_pairs() {
        return Err(Error::DimensionMismatch(format!(
            "Q has {} pairs, features have {} rows",
            v.len(),
            features.n_pairs()
        )));
    }
    let proj = Projector::new(features, w)?.apply_vec(&v)?;
    Ok(QTable::from_vector(q.n_states(), q.n_actions(), &proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::stationary_distribution;
    use crate::mdp::{gen_garnet, Mdp};
    use crate::testkit;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_loop_setup() -> (Mdp, Policy, MixingInfo) {
        let mdp = Mdp::two_loop();
        let behavior = Policy::uniform(2, 2);
        let mixing = stationary_distribution(&mdp, &behavior).unwrap();
        (mdp, behavior, mixing)
    }

    fn random_features(n_pairs: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(DMatrix::from_fn(n_pairs, d, |_, _| rng.random::<f64>() - 0.5)).unwrap()
    }

    #[test]
    fn normalization_enforced_and_rank_checked() {
        let phi = DMatrix::from_row_slice(4, 2, &[3.0, 1.0, 0.5, 0.2, 1.0, -1.0, 0.0, 2.0]);
        let f = FeatureMap::new(phi).unwrap();
        let max_l1 = (0..4)
            .map(|p| f.matrix().row(p).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(max_l1, 1.0, epsilon = 1e-12);

        let dep = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, -1.0, -2.0]);
        assert!(matches!(FeatureMap::new(dep), Err(Error::InvalidFeature(_))));
    }

    #[test]
    fn weighted_norm_constants_and_brute_force() {
        let (mdp, behavior, mixing) = two_loop_setup();
        let feats = FeatureMap::tabular(4);
        let w = spectral_info(&feats, &mixing, &behavior).unwrap();

        assert_eq!(weighted_norm(&QTable::zeros(2, 2), &w).unwrap(), 0.0);
        let ones = QTable::from_fn(2, 2, |_, _| 1.0);
        assert_abs_diff_eq!(weighted_norm(&ones, &w).unwrap(), 1.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = QTable::from_fn(2, 2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let mut brute = 0.0;
        for s in 0..2 {
            for a in 0..2 {
                brute += mixing.stationary()[s] * behavior.prob(s, a) * q.get(s, a).powi(2);
            }
        }
        assert_abs_diff_eq!(weighted_norm(&q, &w).unwrap(), brute.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(mdp.gamma(), 0.9, epsilon = 0.0);
    }

    #[test]
    fn projection_identity_cases() {
        let (_, behavior, mixing) = two_loop_setup();
        let tab = FeatureMap::tabular(4);
        let w = spectral_info(&tab, &mixing, &behavior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = QTable::from_fn(2, 2, |_, _| rng.random::<f64>());
        let p = project(&q, &tab, &w).unwrap();
        assert!(p.linf_distance(&q) <= 1e-12, "tabular projection must be the identity");

        // A vector already in span(Phi) is unchanged.
        let feats = random_features(4, 2, 8);
        let w2 = spectral_info(&feats, &mixing, &behavior).unwrap();
        let coeff = DVector::from_vec(vec![0.7, -1.3]);
        let in_span = QTable::from_vector(2, 2, &feats.expand(&coeff));
        let back = project(&in_span, &feats, &w2).unwrap();
        assert!(back.linf_distance(&in_span) <= 1e-10);
    }

    #[test]
    fn projection_matches_normal_equations_oracle() {
        let (_, behavior, mixing) = two_loop_setup();
        let feats = random_features(4, 2, 21);
        let w = spectral_info(&feats, &mixing, &behavior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = DVector::from_fn(4, |_, _| rng.random::<f64>() * 2.0 - 1.0);

        // Oracle: assemble and solve the normal equations with the
        // independent elimination routine.
        let phi = feats.matrix();
        let k = w.ksa_diag();
        let mut gram = DMatrix::zeros(2, 2);
        let mut rhs = DVector::zeros(2);
        for p in 0..4 {
            for i in 0..2 {
                rhs[i] += k[p] * phi[(p, i)] * q[p];
                for j in 0..2 {
                    gram[(i, j)] += k[p] * phi[(p, i)] * phi[(p, j)];
                }
            }
        }
        let coeff = testkit::eliminate(&gram, &rhs);
        let oracle = phi * coeff;

        let qt = QTable::from_vector(2, 2, &q);
        let got = project(&qt, &feats, &w).unwrap().as_vector();
        assert!((got - oracle).abs().max() <= 1e-10);

        // Residual is K_SA-orthogonal to every feature column.
        let proj = project(&qt, &feats, &w).unwrap().as_vector();
        let resid = q - proj;
        for j in 0..2 {
            let ip: f64 = (0..4).map(|p| k[p] * resid[p] * phi[(p, j)]).sum();
            assert!(ip.abs() <= 1e-9, "column {j} inner product {ip}");
        }

        // Idempotence.
        let once = project(&qt, &feats, &w).unwrap();
        let twice = project(&once, &feats, &w).unwrap();
        assert!(twice.linf_distance(&once) <= 1e-10);
    }

    #[test]
    fn projection_nonexpansive_and_pythagorean() {
        let mdp = gen_garnet(4, 3, 2, 0.9, 9).unwrap();
        let behavior = Policy::uniform(4, 3);
        let mixing = stationary_distribution(&mdp, &behavior).unwrap();
        let feats = random_features(12, 4, 10);
        let w = spectral_info(&feats, &mixing, &behavior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let q1 = QTable::from_fn(4, 3, |_, _| rng.random::<f64>() * 10.0 - 5.0);
            let q2 = QTable::from_fn(4, 3, |_, _| rng.random::<f64>() * 10.0 - 5.0);
            let (p1, p2) = (
                project(&q1, &feats, &w).unwrap(),
                project(&q2, &feats, &w).unwrap(),
            );
            let dp = w.norm_vec(&(p1.as_vector() - p2.as_vector()));
            let dq = w.norm_vec(&(q1.as_vector() - q2.as_vector()));
            assert!(dp <= dq + 1e-12, "projection expanded: {dp} > {dq}");

            // ||q||^2 = ||Proj q||^2 + ||q - Proj q||^2 in the K_SA geometry.
            let total = weighted_norm(&q1, &w).unwrap().powi(2);
            let head = weighted_norm(&p1, &w).unwrap().powi(2);
            let tail = w.norm_vec(&(q1.as_vector() - p1.as_vector())).powi(2);
            assert_abs_diff_eq!(total, head + tail, epsilon = 1e-9);

            // Norm ordering against the sup norm.
            let kn = weighted_norm(&q1, &w).unwrap();
            let sup = q1.max_abs();
            assert!(kn <= sup + 1e-12);
            assert!(sup <= kn / w.ksa_min().sqrt() + 1e-12);
        }
    }

    #[test]
    fn spectral_info_special_cases() {
        let (_, behavior, mixing) = two_loop_setup();
        let tab = FeatureMap::tabular(4);
        let w = spectral_info(&tab, &mixing, &behavior).unwrap();
        assert_abs_diff_eq!(w.ksa_min(), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(w.lambda_min(), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(w.ksa_diag().iter().sum::<f64>(), 1.0, epsilon = 1e-10);

        // d = 1 with a constant feature c has lambda_min = c^2.
        let c = 0.8;
        let constant = FeatureMap::new(DMatrix::from_element(4, 1, c)).unwrap();
        let w1 = spectral_info(&constant, &mixing, &behavior).unwrap();
        assert_abs_diff_eq!(w1.lambda_min(), c * c, epsilon = 1e-12);
    }

    #[test]
    fn spectral_info_matches_inverse_power_iteration() {
        let mdp = gen_garnet(5, 2, 3, 0.9, 30).unwrap();
        let behavior = Policy::uniform(5, 2);
        let mixing = stationary_distribution(&mdp, &behavior).unwrap();
        let feats = random_features(10, 3, 31);
        let w = spectral_info(&feats, &mixing, &behavior).unwrap();

        let gram = weighted_gram(&feats, w.ksa_diag());
        let oracle = testkit::min_eigenvalue_inverse_power(&gram);
        assert_abs_diff_eq!(w.lambda_min(), oracle, epsilon = 1e-8);
    }
}

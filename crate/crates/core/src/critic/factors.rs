//! Generalized importance-sampling factor schemes.
//!
//! The multi-step TD update corrects off-policy data through two factor
//! tables `c(s, a)` and `rho(s, a)` in place of the raw likelihood ratio
//! `pi(a|s)/pi_b(a|s)`:
//!
//! * lambda-averaged: `c = rho = lambda(s) ratio + 1 - lambda(s)`,
//!   interpolating between no correction (`lambda = 0`, which evaluates the
//!   behavior policy) and full correction (`lambda = 1`, exact ratios with
//!   their variance blow-up).
//! * two-sided: `c = rho = clamp(ratio, l(s), u(s))` with the lower level
//!   `l(s)` solved per state so the behavior-weighted row sum equals one,
//!   which restores the bootstrapping power an upper truncation alone
//!   destroys.
//!
//! Both schemes make the per-state weighted sums `D_c = D_rho = I`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::Policy;

const BISECTION_TOL: f64 = 1e-12;

/// Which construction produced a factor table.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum FactorScheme {
    LambdaAveraged { lambda: Vec<f64> },
    TwoSided { lower: Vec<f64>, upper: Vec<f64> },
    /// Raw likelihood ratios `pi/pi_b` (lambda = 1 everywhere).
    Vanilla,
    /// No correction at all (`c = rho = 1`); the critic evaluates `pi_b`.
    OnPolicy,
    Custom,
}

/// Factor tables `c`, `rho` with the derived per-state diagonals
/// `D_c(s) = sum_a pi_b(a|s) c(s, a)` and `D_rho(s)` likewise.
#[derive(Debug, Clone)]
pub struct IsFactorTable {
    c: DMatrix<f64>,
    rho: DMatrix<f64>,
    scheme: FactorScheme,
    d_c: DVector<f64>,
    d_rho: DVector<f64>,
}

impl IsFactorTable {
    /// `c = rho = lambda(s) pi(a|s)/pi_b(a|s) + 1 - lambda(s)`.
    pub fn lambda_averaged(
        target: &Policy,
        behavior: &Policy,
        lambda: &DVector<f64>,
    ) -> Result<IsFactorTable> {
        check_pair(target, behavior)?;
        if lambda.len() != target.n_states() {
            return Err(Error::DimensionMismatch(format!(
                "lambda has {} entries for {} states",
                lambda.len(),
                target.n_states()
            )));
        }
        if lambda.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::InvalidInput("lambda entries must lie in [0, 1]".into()));
        }
        let table = DMatrix::from_fn(target.n_states(), target.n_actions(), |s, a| {
            lambda[s] * target.prob(s, a) / behavior.prob(s, a) + 1.0 - lambda[s]
        });
        Ok(Self::assemble(
            table.clone(),
            table,
            behavior,
            FactorScheme::LambdaAveraged {
                lambda: lambda.iter().copied().collect(),
            },
        ))
    }

    /// Two-sided truncation `c = rho = g_{l(s), u(s)}(pi/pi_b)` where each
    /// `l(s) in [0, 1]` is found by bisection so that
    /// `sum_a pi_b(a|s) g_{l(s), u(s)}(ratio) = 1`.
    pub fn two_sided(
        target: &Policy,
        behavior: &Policy,
        upper: &DVector<f64>,
    ) -> Result<IsFactorTable> {
        check_pair(target, behavior)?;
        let (ns, na) = (target.n_states(), target.n_actions());
        if upper.len() != ns {
            return Err(Error::DimensionMismatch(format!(
                "upper truncation has {} entries for {ns} states",
                upper.len()
            )));
        }
        if upper.iter().any(|&u| u < 1.0) {
            return Err(Error::InvalidInput("upper truncation levels must be >= 1".into()));
        }
        let mut table = DMatrix::zeros(ns, na);
        let mut lower = Vec::with_capacity(ns);
        for s in 0..ns {
            let u = upper[s];
            // Ratios sorted once per state; each row-sum evaluation is O(|A|).
            let mut pairs: Vec<(f64, f64)> = (0..na)
                .map(|a| (target.prob(s, a) / behavior.prob(s, a), behavior.prob(s, a)))
                .collect();
            pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
            let row_sum =
                |l: f64| -> f64 { pairs.iter().map(|&(r, w)| w * r.clamp(l, u)).sum() };
            // The row sum is continuous and non-decreasing in l, with
            // row_sum(0) <= 1 <= row_sum(1) whenever u >= 1; the guards below
            // only fire on numerically degenerate inputs.
            if row_sum(0.0) > 1.0 + 1e-12 {
                return Err(Error::InfeasibleTruncation {
                    state: s,
                    detail: format!("row sum {} > 1 even at l = 0", row_sum(0.0)),
                });
            }
            if row_sum(1.0) < 1.0 - 1e-12 {
                return Err(Error::InfeasibleTruncation {
                    state: s,
                    detail: format!("row sum {} < 1 even at l = 1", row_sum(1.0)),
                });
            }
            let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
            while hi - lo > BISECTION_TOL {
                let mid = 0.5 * (lo + hi);
                if row_sum(mid) <= 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lower.push(lo);
            for a in 0..na {
                table[(s, a)] = (target.prob(s, a) / behavior.prob(s, a)).clamp(lo, u);
            }
        }
        Ok(Self::assemble(
            table.clone(),
            table,
            behavior,
            FactorScheme::TwoSided {
                lower,
                upper: upper.iter().copied().collect(),
            },
        ))
    }

    /// Exact likelihood ratios `c = rho = pi/pi_b`.
    pub fn vanilla(target: &Policy, behavior: &Policy) -> Result<IsFactorTable> {
        check_pair(target, behavior)?;
        let table = DMatrix::from_fn(target.n_states(), target.n_actions(), |s, a| {
            target.prob(s, a) / behavior.prob(s, a)
        });
        Ok(Self::assemble(table.clone(), table, behavior, FactorScheme::Vanilla))
    }

    /// `c = rho = 1`: no correction, so the critic performs policy
    /// evaluation of the behavior policy itself.
    pub fn on_policy(behavior: &Policy) -> IsFactorTable {
        let table = DMatrix::from_element(behavior.n_states(), behavior.n_actions(), 1.0);
        Self::assemble(table.clone(), table, behavior, FactorScheme::OnPolicy)
    }

    /// Arbitrary non-negative tables with `c <= rho` entrywise.
    pub fn from_tables(
        c: DMatrix<f64>,
        rho: DMatrix<f64>,
        behavior: &Policy,
    ) -> Result<IsFactorTable> {
        if c.shape() != rho.shape()
            || c.nrows() != behavior.n_states()
            || c.ncols() != behavior.n_actions()
        {
            return Err(Error::DimensionMismatch(
                "factor tables must match the policy shape".into(),
            ));
        }
        if c.iter().chain(rho.iter()).any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("factors must be non-negative and finite".into()));
        }
        if c.iter().zip(rho.iter()).any(|(&ci, &ri)| ci > ri + 1e-12) {
            return Err(Error::InvalidInput(
                "factor tables must satisfy c(s,a) <= rho(s,a) everywhere".into(),
            ));
        }
        Ok(Self::assemble(c, rho, behavior, FactorScheme::Custom))
    }

    fn assemble(
        c: DMatrix<f64>,
        rho: DMatrix<f64>,
        behavior: &Policy,
        scheme: FactorScheme,
    ) -> IsFactorTable {
        let weighted = |t: &DMatrix<f64>| {
            DVector::from_fn(t.nrows(), |s, _| {
                (0..t.ncols()).map(|a| behavior.prob(s, a) * t[(s, a)]).sum()
            })
        };
        let d_c = weighted(&c);
        let d_rho = weighted(&rho);
        IsFactorTable {
            c,
            rho,
            scheme,
            d_c,
            d_rho,
        }
    }

    pub fn scheme(&self) -> &FactorScheme {
        &self.scheme
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn rho(&self) -> &DMatrix<f64> {
        &self.rho
    }

    /// Per-state diagonal `D_c(s) = sum_a pi_b(a|s) c(s, a)`.
    pub fn d_c(&self) -> &DVector<f64> {
        &self.d_c
    }

    pub fn d_rho(&self) -> &DVector<f64> {
        &self.d_rho
    }

    pub fn d_c_min(&self) -> f64 {
        self.d_c.min()
    }

    pub fn d_c_max(&self) -> f64 {
        self.d_c.max()
    }

    pub fn d_rho_min(&self) -> f64 {
        self.d_rho.min()
    }

    pub fn d_rho_max(&self) -> f64 {
        self.d_rho.max()
    }

    pub fn c_max(&self) -> f64 {
        self.c.max()
    }

    pub fn rho_max(&self) -> f64 {
        self.rho.max()
    }

    /// Whether the two tables coincide (selects the tighter variance
    /// parameter `L`).
    pub fn c_equals_rho(&self) -> bool {
        self.c == self.rho
    }

    pub fn n_states(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.c.ncols()
    }

    /// JSON dump of the tables and derived diagonals, for inspection.
    pub fn to_json_string(&self) -> Result<String> {
        let grid = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|s| m.row(s).iter().copied().collect())
                .collect()
        };
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "scheme": self.scheme,
            "c": grid(&self.c),
            "rho": grid(&self.rho),
            "d_c": self.d_c.iter().copied().collect::<Vec<f64>>(),
            "d_rho": self.d_rho.iter().copied().collect::<Vec<f64>>(),
            "c_max": self.c_max(),
            "rho_max": self.rho_max(),
        }))?)
    }
}

fn check_pair(target: &Policy, behavior: &Policy) -> Result<()> {
    if target.n_states() != behavior.n_states() || target.n_actions() != behavior.n_actions() {
        return Err(Error::DimensionMismatch(format!(
            "target policy is {}x{}, behavior is {}x{}",
            target.n_states(),
            target.n_actions(),
            behavior.n_states(),
            behavior.n_actions()
        )));
    }
    if !behavior.has_full_support() {
        return Err(Error::AssumptionViolation(
            "behavior policy must have full support (Assumption 1)".into(),
        ));
    }
    Ok(())
}

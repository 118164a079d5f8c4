//! Post-hoc prior precision (and observation noise) by maximizing the
//! Laplace evidence `-L(theta*) + (K/2) log alpha - (1/2) log det H`, where
//! the `(K/2) log(alpha / 2 pi)` normalizer of the Gaussian prior cancels the
//! `(K/2) log 2 pi` of the Gaussian integral.
//!
//! `H(alpha, sigma) = (sigma0^2 / sigma^2) H_data + alpha I`, so one
//! eigendecomposition of `H_data` serves every candidate.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{posterior_precision, HessianKind};
use crate::error::{Error, Result};
use crate::loss::{loss_value, Likelihood, LossContext};

pub const ALPHA_GRID_POINTS: usize = 41;
const LOG10_LO: f64 = -4.0;
const LOG10_HI: f64 = 4.0;
const MAX_ROUNDS: usize = 10;
const ROUND_TOL: f64 = 1e-6;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperOptResult {
    pub alpha: f64,
    /// Noise standard deviation; `None` for classification.
    pub sigma: Option<f64>,
    pub objective: f64,
    /// `(log10 alpha, objective)` of the last alpha grid, evaluated at the returned sigma.
    pub alpha_grid: Vec<(f64, f64)>,
    /// `(log10 sigma, objective)` of the last sigma grid (empty for classification).
    pub sigma_grid: Vec<(f64, f64)>,
    pub rounds: usize,
}

/// Evidence as a closed-form function of `(alpha, sigma)`.
struct Evidence {
    eig: Vec<f64>,
    k: f64,
    theta_sq: f64,
    /// Categorical: data NLL. Gaussian: `sigma0^2 * (data term - normalization)`.
    data: f64,
    /// Gaussian: `scale * N * C`.
    n_out: f64,
    sigma2_0: Option<f64>,
}

impl Evidence {
    fn eval(&self, alpha: f64, sigma2: Option<f64>) -> f64 {
        let (c, data) = match (self.sigma2_0, sigma2) {
            (Some(s0), Some(s)) => (
                s0 / s,
                self.data / s + 0.5 * self.n_out * (s.ln() + (2.0 * std::f64::consts::PI).ln()),
            ),
            _ => (1.0, self.data),
        };
        let mut log_det = 0.0;
        for &l in &self.eig {
            let e = c * l + alpha;
            if !(e > 0.0) {
                return f64::NEG_INFINITY;
            }
            log_det += e.ln();
        }
        let loss = data + 0.5 * alpha * self.theta_sq;
        -loss + 0.5 * self.k * alpha.ln() - 0.5 * log_det
    }
}

fn grid() -> Vec<f64> {
    (0..ALPHA_GRID_POINTS)
        .map(|i| LOG10_LO + (LOG10_HI - LOG10_LO) * i as f64 / (ALPHA_GRID_POINTS - 1) as f64)
        .collect()
}

/// Grid search then golden-section refinement of `f` over log10 values.
/// Returns `(argmax, max, grid values)`; the result is never below the grid best.
fn search_1d(f: impl Fn(f64) -> f64, what: &str) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    let xs = grid();
    let vals: Vec<(f64, f64)> = xs.iter().map(|&x| (x, f(x))).collect();
    let (best_i, &(best_x, best_v)) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty grid");
    if best_v == f64::NEG_INFINITY {
        return Err(Error::NotPositiveDefinite {
            hessian: if what == "alpha" {
                "every prior precision on the grid"
            } else {
                "every noise level on the grid"
            },
        });
    }
    let mut a = xs[best_i.saturating_sub(1)];
    let mut b = xs[(best_i + 1).min(xs.len() - 1)];
    // relative tolerance 1e-3 on the hyperparameter itself
    let tol = (1.0 + 1e-3f64).log10();
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let (gx, gv) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    if gv >= best_v {
        Ok((gx, gv, vals))
    } else {
        Ok((best_x, best_v, vals))
    }
}

/// Maximizes the evidence over `alpha` (and `sigma` for Gaussian likelihoods)
/// with `theta*` fixed. The data Hessian is assembled once at `theta*`.
pub fn optimize_hyperparameters(
    ctx: &LossContext,
    theta_star: &[f64],
    kind: HessianKind,
) -> Result<HyperOptResult> {
    let h_data = posterior_precision(&ctx.with_prior_precision(0.0), theta_star, kind)?;
    optimize_hyperparameters_with(ctx, theta_star, &h_data)
}

/// As [`optimize_hyperparameters`] with a precomputed data Hessian (prior
/// term excluded), evaluated at the noise level of `ctx`.
pub fn optimize_hyperparameters_with(
    ctx: &LossContext,
    theta_star: &[f64],
    h_data: &DMatrix<f64>,
) -> Result<HyperOptResult> {
    let k = ctx.num_params();
    if h_data.shape() != (k, k) {
        return Err(Error::DimensionMismatch {
            axis: "precision",
            expected: k,
            found: h_data.nrows(),
        });
    }
    let eig = SymmetricEigen::new(h_data.clone())
        .eigenvalues
        .as_slice()
        .to_vec();
    let flat = ctx.with_prior_precision(0.0);
    let l0 = loss_value(&flat, theta_star)?;
    let lower = flat.data_term_lower_bound();
    let sigma2_0 = ctx.likelihood().sigma2();
    let ev = Evidence {
        eig,
        k: k as f64,
        theta_sq: theta_star.iter().map(|t| t * t).sum(),
        data: match sigma2_0 {
            Some(s0) => (l0 - lower) * s0,
            None => l0,
        },
        n_out: ctx.scale() * (ctx.data().len() * ctx.arch().output_dim()) as f64,
        sigma2_0,
    };

    let mut alpha = ctx.prior_precision().max(1e-300);
    let mut sigma2 = sigma2_0;
    let mut prev = f64::NEG_INFINITY;
    let mut rounds = 0;
    let mut alpha_grid;
    let mut sigma_grid = Vec::new();
    let mut objective;
    loop {
        rounds += 1;
        if sigma2.is_some() {
            let a = alpha;
            let (ls, _, g) = search_1d(|ls| ev.eval(a, Some(10f64.powf(2.0 * ls))), "sigma")?;
            sigma2 = Some(10f64.powf(2.0 * ls));
            sigma_grid = g;
        }
        let s = sigma2;
        let (la, v, g) = search_1d(|la| ev.eval(10f64.powf(la), s), "alpha")?;
        alpha = 10f64.powf(la);
        alpha_grid = g;
        objective = v;
        if sigma2.is_none() || (objective - prev).abs() < ROUND_TOL || rounds >= MAX_ROUNDS {
            break;
        }
        prev = objective;
    }
    log::info!(
        "evidence optimum: alpha = {alpha:.4e}, sigma = {:?}, objective = {objective:.6} after {rounds} round(s)",
        sigma2.map(f64::sqrt)
    );
    Ok(HyperOptResult {
        alpha,
        sigma: sigma2.map(f64::sqrt),
        objective,
        alpha_grid,
        sigma_grid,
        rounds,
    })
}

impl HyperOptResult {
    /// Likelihood with the optimized noise level (unchanged for classification).
    pub fn likelihood(&self, base: Likelihood) -> Likelihood {
        match (base, self.sigma) {
            (Likelihood::Gaussian { .. }, Some(s)) => Likelihood::Gaussian { sigma2: s * s },
            (b, _) => b,
        }
    }
}

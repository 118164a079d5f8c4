//! MAP training, Hessian assembly and the Gaussian posterior `N(theta*, H^-1)`.

mod hyper;
mod train;

pub use hyper::{
    optimize_hyperparameters, optimize_hyperparameters_with, HyperOptResult, ALPHA_GRID_POINTS,
};
pub use train::{train_map, train_map_from, MapEstimate, Optimizer, OptimizerConfig};

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::binfile::{read_container, write_container};
use crate::error::{Error, Result};
use crate::loss::{
    hessian_dense, loss_value, symmetrize_checked, Likelihood, LossContext, DEFAULT_DENSE_LIMIT,
};
use crate::nn::{check_len, network_jacobian, MlpArchitecture, ParamVector};

/// Examples per partial sum; fixed so results do not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HessianKind {
    Exact,
    Ggn,
}

impl HessianKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HessianKind::Exact => "exact",
            HessianKind::Ggn => "ggn",
        }
    }
}

impl std::str::FromStr for HessianKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HessianKind::Exact),
            "ggn" => Ok(HessianKind::Ggn),
            _ => Err(Error::InvalidArgument(format!(
                "unknown Hessian kind {s:?}"
            ))),
        }
    }
}

/// `sum_n J_n^T Lambda_n J_n + alpha I`, with `J_n` and `Lambda_n` at `theta_star`.
pub fn ggn_hessian(ctx: &LossContext, theta_star: &[f64]) -> Result<DMatrix<f64>> {
    let k = ctx.num_params();
    if k > DEFAULT_DENSE_LIMIT {
        return Err(Error::DenseLimit {
            k,
            limit: DEFAULT_DENSE_LIMIT,
        });
    }
    check_len(ctx.arch(), theta_star)?;
    let data = ctx.data();
    let n = data.len();
    let likelihood = ctx.likelihood();
    let chunks: Vec<DMatrix<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| -> Result<DMatrix<f64>> {
            let mut acc = DMatrix::zeros(k, k);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = data.row(i);
                let j = network_jacobian(ctx.arch(), theta_star, x)?;
                let lam_j = match likelihood {
                    Likelihood::Gaussian { sigma2 } => &j / sigma2,
                    Likelihood::Categorical => {
                        let f = crate::nn::forward_one(ctx.arch(), theta_star, x);
                        let p = softmax(&f);
                        let pj = j.tr_mul(&p);
                        let mut out = j.clone();
                        for r in 0..p.len() {
                            for col in 0..k {
                                out[(r, col)] = p[r] * (j[(r, col)] - pj[col]);
                            }
                        }
                        out
                    }
                };
                acc.gemm_tr(1.0, &j, &lam_j, 1.0);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut h = DMatrix::zeros(k, k);
    for c in chunks {
        h += c;
    }
    h *= ctx.scale();
    for i in 0..k {
        h[(i, i)] += ctx.prior_precision();
    }
    symmetrize_checked(h, 1e-7)
}

fn softmax(f: &[f64]) -> DVector<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = DVector::from_iterator(f.len(), f.iter().map(|v| (v - m).exp()));
    let s = e.sum();
    e / s
}

/// Hessian of the requested kind at `theta_star`, prior term included.
pub fn posterior_precision(
    ctx: &LossContext,
    theta_star: &[f64],
    kind: HessianKind,
) -> Result<DMatrix<f64>> {
    match kind {
        HessianKind::Exact => hessian_dense(&ctx.plain(), theta_star),
        HessianKind::Ggn => ggn_hessian(ctx, theta_star),
    }
}

/// Gaussian posterior `N(theta*, H^-1)` with `H^-1 = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    arch: MlpArchitecture,
    theta_star: ParamVector,
    precision: DMatrix<f64>,
    alpha: f64,
    likelihood: Likelihood,
    hessian_kind: HessianKind,
    chol_cov: DMatrix<f64>,
}

pub fn fit_laplace(
    ctx: &LossContext,
    theta_star: &ParamVector,
    kind: HessianKind,
) -> Result<LaplacePosterior> {
    let h = posterior_precision(ctx, theta_star, kind)?;
    LaplacePosterior::from_precision(
        ctx.arch().clone(),
        theta_star.clone(),
        h,
        ctx.prior_precision(),
        ctx.likelihood(),
        kind,
    )
}

impl LaplacePosterior {
    /// Factorizes `precision`; fails if it is not symmetric positive definite
    /// or the covariance factor does not reproduce its inverse.
    pub fn from_precision(
        arch: MlpArchitecture,
        theta_star: ParamVector,
        precision: DMatrix<f64>,
        alpha: f64,
        likelihood: Likelihood,
        hessian_kind: HessianKind,
    ) -> Result<Self> {
        let k = arch.num_params();
        check_len(&arch, &theta_star)?;
        if precision.shape() != (k, k) {
            return Err(Error::DimensionMismatch {
                axis: "precision",
                expected: k,
                found: precision.nrows(),
            });
        }
        let scale = precision.amax().max(f64::MIN_POSITIVE);
        let asym = (&precision - precision.transpose()).amax() / scale;
        if asym > 1e-10 {
            return Err(Error::Asymmetric { asymmetry: asym });
        }
        let chol_cov = covariance_factor(&precision, hessian_kind)?;
        let cov = &chol_cov * chol_cov.transpose();
        let residual = (&precision * cov - DMatrix::<f64>::identity(k, k)).amax();
        if !(residual < 1e-6) {
            return Err(Error::IllConditioned { residual });
        }
        Ok(Self {
            arch,
            theta_star,
            precision,
            alpha,
            likelihood,
            hessian_kind,
            chol_cov,
        })
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn theta_star(&self) -> &ParamVector {
        &self.theta_star
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn prior_precision(&self) -> f64 {
        self.alpha
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn hessian_kind(&self) -> HessianKind {
        self.hessian_kind
    }

    /// Lower-triangular `L` with `L L^T = H^-1`.
    pub fn chol_cov(&self) -> &DMatrix<f64> {
        &self.chol_cov
    }

    pub fn num_params(&self) -> usize {
        self.theta_star.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol_cov * self.chol_cov.transpose()
    }

    /// `L z`, a tangent vector distributed as `N(0, H^-1)` for standard normal `z`.
    pub fn tangent(&self, z: &[f64]) -> Result<ParamVector> {
        let k = self.num_params();
        if z.len() != k {
            return Err(Error::DimensionMismatch {
                axis: "z",
                expected: k,
                found: z.len(),
            });
        }
        let mut out = vec![0.0; k];
        for i in 0..k {
            let mut s = 0.0;
            for j in 0..=i {
                s += self.chol_cov[(i, j)] * z[j];
            }
            out[i] = s;
        }
        Ok(ParamVector::new(out))
    }

    /// `theta* + L z`.
    pub fn sample(&self, z: &[f64]) -> Result<ParamVector> {
        let mut v = self.tangent(z)?;
        for (vi, t) in v.iter_mut().zip(self.theta_star.iter()) {
            *vi += t;
        }
        Ok(v)
    }

    /// `log det H` from the covariance factor.
    pub fn log_det_precision(&self) -> f64 {
        -2.0 * self.chol_cov.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Refit with new hyperparameters, reusing the data part of `H`.
    ///
    /// For a Gaussian likelihood the data part scales with `1 / sigma^2`.
    pub fn with_hyperparameters(&self, alpha: f64, likelihood: Likelihood) -> Result<Self> {
        let c = match (self.likelihood, likelihood) {
            (Likelihood::Gaussian { sigma2: old }, Likelihood::Gaussian { sigma2: new }) => {
                old / new
            }
            (Likelihood::Categorical, Likelihood::Categorical) => 1.0,
            _ => {
                return Err(Error::InvalidArgument(
                    "cannot switch between classification and regression".into(),
                ))
            }
        };
        let k = self.num_params();
        let mut h = &self.precision * c;
        for i in 0..k {
            h[(i, i)] += alpha - c * self.alpha;
        }
        Self::from_precision(
            self.arch.clone(),
            self.theta_star.clone(),
            h,
            alpha,
            likelihood,
            self.hessian_kind,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Map::new();
        header.insert("kind".into(), json!("laplace_posterior"));
        header.insert("version".into(), json!(1));
        header.insert("arch".into(), serde_json::to_value(&self.arch)?);
        header.insert("alpha".into(), json!(self.alpha));
        header.insert("likelihood".into(), likelihood_json(self.likelihood));
        header.insert(
            "sigma".into(),
            json!(self.likelihood.sigma2().map(f64::sqrt)),
        );
        header.insert("hessian_kind".into(), json!(self.hessian_kind));
        header.insert("k".into(), json!(self.num_params()));
        let chol = row_major(&self.chol_cov);
        let prec = row_major(&self.precision);
        write_container(
            path,
            header,
            &[
                ("theta_star", &self.theta_star),
                ("chol_cov", &chol),
                ("precision", &prec),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = read_container(path)?;
        if c.field("kind")? != "laplace_posterior" {
            return Err(Error::Format("not a posterior file".into()));
        }
        let arch: MlpArchitecture = serde_json::from_value(c.field("arch")?.clone())?;
        let alpha = c
            .field("alpha")?
            .as_f64()
            .ok_or_else(|| Error::Format("alpha is not a number".into()))?;
        let likelihood = likelihood_from_json(c.field("likelihood")?, c.field("sigma")?)?;
        let hessian_kind: HessianKind = serde_json::from_value(c.field("hessian_kind")?.clone())?;
        let k = arch.num_params();
        let theta_star = c.take("theta_star")?;
        let chol = c.take("chol_cov")?;
        let prec = c.take("precision")?;
        if theta_star.len() != k || chol.len() != k * k || prec.len() != k * k {
            return Err(Error::Format(format!("array sizes do not match K = {k}")));
        }
        Ok(Self {
            arch,
            theta_star: ParamVector::new(theta_star),
            precision: DMatrix::from_row_slice(k, k, &prec),
            alpha,
            likelihood,
            hessian_kind,
            chol_cov: DMatrix::from_row_slice(k, k, &chol),
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn likelihood_json(l: Likelihood) -> Value {
    match l {
        Likelihood::Gaussian { .. } => json!("gaussian"),
        Likelihood::Categorical => json!("categorical"),
    }
}

pub(crate) fn likelihood_from_json(kind: &Value, sigma: &Value) -> Result<Likelihood> {
    match (kind.as_str(), sigma.as_f64()) {
        (Some("gaussian"), Some(s)) if s > 0.0 => Ok(Likelihood::Gaussian { sigma2: s * s }),
        (Some("categorical"), _) => Ok(Likelihood::Categorical),
        _ => Err(Error::Format("invalid likelihood in header".into())),
    }
}

/// Lower `L` with `L L^T = H^-1`: `H = L_H L_H^T`, `Sigma = L_H^-T L_H^-1`,
/// then a second Cholesky of the symmetrized `Sigma`.
fn covariance_factor(h: &DMatrix<f64>, kind: HessianKind) -> Result<DMatrix<f64>> {
    let k = h.nrows();
    let hessian = kind.as_str();
    let chol = Cholesky::new(h.clone()).ok_or(Error::NotPositiveDefinite { hessian })?;
    let inv_l = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::NotPositiveDefinite { hessian })?;
    let sigma = inv_l.tr_mul(&inv_l);
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let l = Cholesky::new(sigma)
        .ok_or(Error::IllConditioned {
            residual: f64::INFINITY,
        })?
        .l();
    Ok(l)
}

/// `-L(theta*) + (K/2) log 2 pi - (1/2) log det H` with the normalized prior
/// `-log N(theta; 0, alpha^-1 I)` inside `L`, using the prior precision and
/// likelihood of `ctx`. Returns `-inf` when `h` is not positive definite.
pub fn log_marginal_likelihood(
    ctx: &LossContext,
    theta_star: &[f64],
    h: &DMatrix<f64>,
) -> Result<f64> {
    let k = ctx.num_params();
    if h.shape() != (k, k) {
        return Err(Error::DimensionMismatch {
            axis: "precision",
            expected: k,
            found: h.nrows(),
        });
    }
    let loss = loss_value(ctx, theta_star)?;
    let Some(chol) = Cholesky::new(h.clone()) else {
        log::warn!(
            "log marginal likelihood: H is not positive definite at alpha = {}",
            ctx.prior_precision()
        );
        return Ok(f64::NEG_INFINITY);
    };
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    // a flat (alpha = 0) prior is improper and carries no normalizer
    let alpha = ctx.prior_precision();
    let prior_norm = if alpha > 0.0 {
        0.5 * k as f64 * (alpha / (2.0 * std::f64::consts::PI)).ln()
    } else {
        0.0
    };
    Ok(-loss + prior_norm + 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det)
}

#[cfg(test)]
mod tests;

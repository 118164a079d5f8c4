//! Regularized negative log-posterior `L(theta)` and its derivatives.
//!
//! `L(theta) = scale * sum_n -log p(y_n | f(x_n)) + (alpha / 2) |theta|^2`.
//!
//! The Gaussian data term keeps its normalization constant
//! `C log(sigma sqrt(2 pi))` per example so that evidence maximization over
//! `sigma` is well posed. In linearized mode the network output is replaced by
//! `f_lin(x) = f_anchor(x) + J_anchor(x) (theta - anchor)`.

mod minibatch;

pub use minibatch::make_minibatch_ctx;

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::real::{Dual, Real};
use crate::nn::tape::{self, Scratch, Tape};
use crate::nn::{check_len, BatchInput, MlpArchitecture, ParamVector, Targets};

/// Largest `K` for which dense `K x K` matrices are assembled.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// Homoscedastic Gaussian with variance `sigma2`.
    Gaussian { sigma2: f64 },
    /// Softmax over the network outputs.
    Categorical,
}

impl Likelihood {
    pub fn is_classification(&self) -> bool {
        matches!(self, Likelihood::Categorical)
    }

    pub fn sigma2(&self) -> Option<f64> {
        match self {
            Likelihood::Gaussian { sigma2 } => Some(*sigma2),
            Likelihood::Categorical => None,
        }
    }
}

/// Anchor of a linearized context: `theta_star` plus the forward activations
/// of every example at `theta_star`.
#[derive(Debug)]
pub struct LinearAnchor {
    theta_star: ParamVector,
    tapes: Vec<Tape<f64>>,
}

impl LinearAnchor {
    pub fn theta_star(&self) -> &ParamVector {
        &self.theta_star
    }
}

#[derive(Debug, Clone)]
pub enum LossMode {
    Plain,
    Linearized(Arc<LinearAnchor>),
}

/// Dataset, likelihood and prior bundle. Immutable and cheap to clone.
#[derive(Debug, Clone)]
pub struct LossContext {
    arch: MlpArchitecture,
    data: Arc<BatchInput>,
    likelihood: Likelihood,
    prior_precision: f64,
    mode: LossMode,
    scale: f64,
    batch_indices: Option<Arc<Vec<usize>>>,
}

/// Value, gradient and a Hessian-vector product from a single pass.
#[derive(Debug, Clone)]
pub struct GradHvp {
    pub value: f64,
    pub gradient: ParamVector,
    pub hvp: ParamVector,
}

impl LossContext {
    pub fn new(
        arch: MlpArchitecture,
        data: BatchInput,
        likelihood: Likelihood,
        prior_precision: f64,
    ) -> Result<Self> {
        Self::from_shared(arch, Arc::new(data), likelihood, prior_precision)
    }

    pub fn from_shared(
        arch: MlpArchitecture,
        data: Arc<BatchInput>,
        likelihood: Likelihood,
        prior_precision: f64,
    ) -> Result<Self> {
        data.check_arch(&arch)?;
        match (data.targets(), likelihood) {
            (None, _) => {
                return Err(Error::InvalidArgument(
                    "a loss context needs targets".into(),
                ))
            }
            (Some(Targets::Values { .. }), Likelihood::Categorical) => {
                return Err(Error::InvalidArgument(
                    "categorical likelihood needs class labels".into(),
                ))
            }
            (Some(Targets::Classes { .. }), Likelihood::Gaussian { .. }) => {
                return Err(Error::InvalidArgument(
                    "Gaussian likelihood needs real-valued targets".into(),
                ))
            }
            _ => {}
        }
        if let Likelihood::Gaussian { sigma2 } = likelihood {
            if !(sigma2 > 0.0 && sigma2.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "sigma^2 must be positive, got {sigma2}"
                )));
            }
        }
        if !(prior_precision >= 0.0 && prior_precision.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior precision must be non-negative, got {prior_precision}"
            )));
        }
        Ok(Self {
            arch,
            data,
            likelihood,
            prior_precision,
            mode: LossMode::Plain,
            scale: 1.0,
            batch_indices: None,
        })
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn data(&self) -> &BatchInput {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<BatchInput> {
        Arc::clone(&self.data)
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn mode(&self) -> &LossMode {
        &self.mode
    }

    pub fn is_linearized(&self) -> bool {
        matches!(self.mode, LossMode::Linearized(_))
    }

    /// Anchor `theta_star` of a linearized context.
    pub fn anchor(&self) -> Option<&ParamVector> {
        match &self.mode {
            LossMode::Linearized(a) => Some(&a.theta_star),
            LossMode::Plain => None,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn batch_indices(&self) -> Option<&[usize]> {
        self.batch_indices.as_deref().map(|v| v.as_slice())
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    pub fn with_prior_precision(&self, alpha: f64) -> Self {
        Self {
            prior_precision: alpha,
            ..self.clone()
        }
    }

    pub fn with_likelihood(&self, likelihood: Likelihood) -> Result<Self> {
        if likelihood.is_classification() != self.likelihood.is_classification() {
            return Err(Error::InvalidArgument(
                "cannot switch between classification and regression".into(),
            ));
        }
        Ok(Self {
            likelihood,
            ..self.clone()
        })
    }

    /// Same data and hyperparameters, plain (non-linearized) loss.
    pub fn plain(&self) -> Self {
        Self {
            mode: LossMode::Plain,
            ..self.clone()
        }
    }

    /// Loss of the first-order model around `theta_star`.
    pub fn linearized(&self, theta_star: &ParamVector) -> Result<Self> {
        check_len(&self.arch, theta_star)?;
        let tapes = (0..self.data.len())
            .map(|n| {
                let mut t = Tape::<f64>::new(&self.arch);
                tape::forward(&self.arch, theta_star, self.data.row(n), &mut t);
                t
            })
            .collect();
        Ok(Self {
            mode: LossMode::Linearized(Arc::new(LinearAnchor {
                theta_star: theta_star.clone(),
                tapes,
            })),
            ..self.clone()
        })
    }

    /// Context over rows `idx` of this context's data with data-term factor
    /// `scale`. The prior term is never scaled.
    pub fn subset(&self, idx: &[usize], scale: f64) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::InvalidArgument(format!(
                "subset index {bad} out of range for {} rows",
                self.data.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid scale {scale}")));
        }
        let base = Self {
            data: Arc::new(self.data.select(idx)),
            mode: LossMode::Plain,
            scale,
            batch_indices: Some(Arc::new(idx.to_vec())),
            ..self.clone()
        };
        match &self.mode {
            LossMode::Plain => Ok(base),
            LossMode::Linearized(a) => {
                let tapes = idx.iter().map(|&i| a.tapes[i].clone()).collect();
                Ok(Self {
                    mode: LossMode::Linearized(Arc::new(LinearAnchor {
                        theta_star: a.theta_star.clone(),
                        tapes,
                    })),
                    ..base
                })
            }
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len(&self.arch, theta)
    }

    /// Lower bound of the data term per example (Gaussian normalization).
    fn log_norm_per_example(&self) -> f64 {
        match self.likelihood {
            Likelihood::Gaussian { sigma2 } => {
                0.5 * self.arch.output_dim() as f64 * (sigma2.ln() + LN_2PI)
            }
            Likelihood::Categorical => 0.0,
        }
    }

    /// `scale * N * C * log(sigma sqrt(2 pi))` for Gaussian, 0 otherwise.
    pub fn data_term_lower_bound(&self) -> f64 {
        self.scale * self.data.len() as f64 * self.log_norm_per_example()
    }
}

/// Per-example negative log-likelihood (without the Gaussian normalization)
/// and its gradient with respect to the network outputs.
fn point_loss<T: Real>(
    likelihood: Likelihood,
    targets: &Targets,
    n: usize,
    f: &[T],
    d_out: &mut [T],
) -> T {
    match (likelihood, targets) {
        (Likelihood::Gaussian { sigma2 }, Targets::Values { dim, values }) => {
            let y = &values[n * dim..(n + 1) * dim];
            let inv = 1.0 / sigma2;
            let mut l = T::zero();
            for c in 0..*dim {
                let r = f[c] - T::cst(y[c]);
                l += (r * r).scale(0.5 * inv);
                d_out[c] = r.scale(inv);
            }
            l
        }
        (Likelihood::Categorical, Targets::Classes { labels, .. }) => {
            let m = f.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
            let mut s = T::zero();
            for (d, v) in d_out.iter_mut().zip(f) {
                *d = (*v - T::cst(m)).exp();
                s += *d;
            }
            let inv_s = T::cst(1.0) / s;
            let y = labels[n];
            for d in d_out.iter_mut() {
                *d = *d * inv_s;
            }
            d_out[y] = d_out[y] - T::cst(1.0);
            T::cst(m) + s.ln() - f[y]
        }
        _ => unreachable!("targets validated at construction"),
    }
}

fn softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Applies the Hessian of the per-example NLL (w.r.t. the outputs) at `f`.
fn output_hessian_apply(likelihood: Likelihood, f: &[f64], u: &[f64], out: &mut [f64]) {
    match likelihood {
        Likelihood::Gaussian { sigma2 } => {
            for (o, v) in out.iter_mut().zip(u) {
                *o = v / sigma2;
            }
        }
        Likelihood::Categorical => {
            let p = softmax(f);
            let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            for c in 0..f.len() {
                out[c] = p[c] * (u[c] - pu);
            }
        }
    }
}

fn theta_norm(theta: &[f64]) -> f64 {
    theta.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Plain-mode value and gradient, generic over the scalar type.
fn plain_pass<T: Real>(ctx: &LossContext, theta: &[T]) -> Result<(T, Vec<T>)> {
    let arch = &ctx.arch;
    let targets = ctx.data.targets().expect("validated");
    let mut tape = Tape::<T>::new(arch);
    let mut scratch = Scratch::<T>::new(arch);
    let mut d_out = vec![T::zero(); arch.output_dim()];
    let mut grad = vec![T::zero(); theta.len()];
    let mut data = T::zero();
    for n in 0..ctx.data.len() {
        tape::forward(arch, theta, ctx.data.row(n), &mut tape);
        let l = point_loss(ctx.likelihood, targets, n, tape.output(), &mut d_out);
        if !l.re().is_finite() {
            let re: Vec<f64> = theta.iter().map(|t| t.re()).collect();
            return Err(Error::NonFinite {
                what: "loss",
                theta_norm: theta_norm(&re),
                index: Some(n),
            });
        }
        data += l;
        tape::backward(
            arch,
            theta,
            &tape,
            &d_out,
            ctx.scale,
            &mut grad,
            &mut scratch,
        );
    }
    let alpha = ctx.prior_precision;
    let mut sq = T::zero();
    for (g, t) in grad.iter_mut().zip(theta) {
        *g += t.scale(alpha);
        sq += *t * *t;
    }
    let value = data.scale(ctx.scale) + T::cst(ctx.data_term_lower_bound()) + sq.scale(0.5 * alpha);
    Ok((value, grad))
}

/// Linearized-mode value and gradient, plus `H v` when `v` is given.
fn linear_pass(
    ctx: &LossContext,
    anchor: &LinearAnchor,
    theta: &[f64],
    v: Option<&[f64]>,
) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
    let arch = &ctx.arch;
    let targets = ctx.data.targets().expect("validated");
    let star = anchor.theta_star.as_slice();
    let c = arch.output_dim();
    let delta: Vec<f64> = theta.iter().zip(star).map(|(a, b)| a - b).collect();
    let mut scratch = Scratch::<f64>::new(arch);
    let mut f_lin = vec![0.0; c];
    let mut jv = vec![0.0; c];
    let mut lam = vec![0.0; c];
    let mut d_out = vec![0.0; c];
    let mut grad = vec![0.0; theta.len()];
    let mut hv = v.map(|_| vec![0.0; theta.len()]);
    let mut data = 0.0;
    for (n, tp) in anchor.tapes.iter().enumerate() {
        tape::jvp(arch, star, tp, &delta, &mut f_lin, &mut scratch);
        for (fl, f0) in f_lin.iter_mut().zip(tp.output()) {
            *fl += f0;
        }
        let l = point_loss(ctx.likelihood, targets, n, &f_lin, &mut d_out);
        if !l.is_finite() {
            return Err(Error::NonFinite {
                what: "linearized loss",
                theta_norm: theta_norm(theta),
                index: Some(n),
            });
        }
        data += l;
        tape::backward(arch, star, tp, &d_out, ctx.scale, &mut grad, &mut scratch);
        if let (Some(v), Some(hv)) = (v, hv.as_mut()) {
            tape::jvp(arch, star, tp, v, &mut jv, &mut scratch);
            output_hessian_apply(ctx.likelihood, &f_lin, &jv, &mut lam);
            tape::backward(arch, star, tp, &lam, ctx.scale, hv, &mut scratch);
        }
    }
    let alpha = ctx.prior_precision;
    for (g, t) in grad.iter_mut().zip(theta) {
        *g += alpha * t;
    }
    if let (Some(v), Some(hv)) = (v, hv.as_mut()) {
        for (h, vi) in hv.iter_mut().zip(v) {
            *h += alpha * vi;
        }
    }
    let sq: f64 = theta.iter().map(|t| t * t).sum();
    let value = ctx.scale * data + ctx.data_term_lower_bound() + 0.5 * alpha * sq;
    Ok((value, grad, hv))
}

fn finite_or_err(what: &'static str, theta: &[f64], v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            theta_norm: theta_norm(theta),
            index: None,
        })
    }
}

/// `L(theta)`.
pub fn loss_value(ctx: &LossContext, theta: &[f64]) -> Result<f64> {
    Ok(value_and_gradient(ctx, theta)?.0)
}

pub fn value_and_gradient(ctx: &LossContext, theta: &[f64]) -> Result<(f64, ParamVector)> {
    ctx.check_theta(theta)?;
    let (value, grad) = match &ctx.mode {
        LossMode::Plain => plain_pass::<f64>(ctx, theta)?,
        LossMode::Linearized(a) => {
            let (value, grad, _) = linear_pass(ctx, a, theta, None)?;
            (value, grad)
        }
    };
    finite_or_err("gradient", theta, &grad)?;
    Ok((value, ParamVector::new(grad)))
}

/// `grad L(theta)`, prior term included.
pub fn loss_gradient(ctx: &LossContext, theta: &[f64]) -> Result<ParamVector> {
    Ok(value_and_gradient(ctx, theta)?.1)
}

/// Value, gradient and `H(theta) v` in one pass (forward-over-reverse for
/// the plain loss, JVP/VJP for the linearized loss).
pub fn gradient_and_hvp(ctx: &LossContext, theta: &[f64], v: &[f64]) -> Result<GradHvp> {
    ctx.check_theta(theta)?;
    if v.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            axis: "direction",
            expected: theta.len(),
            found: v.len(),
        });
    }
    let (value, gradient, hvp) = match &ctx.mode {
        LossMode::Plain => {
            let duals: Vec<Dual> = theta
                .iter()
                .zip(v)
                .map(|(&t, &d)| Dual::new(t, d))
                .collect();
            let (value, grad) = plain_pass::<Dual>(ctx, &duals)?;
            let g = grad.iter().map(|d| d.re).collect();
            let h = grad.iter().map(|d| d.eps).collect();
            (value.re, g, h)
        }
        LossMode::Linearized(a) => {
            let (value, g, h) = linear_pass(ctx, a, theta, Some(v))?;
            (value, g, h.expect("requested"))
        }
    };
    finite_or_err("gradient", theta, &gradient)?;
    finite_or_err("Hessian-vector product", theta, &hvp)?;
    Ok(GradHvp {
        value,
        gradient: ParamVector::new(gradient),
        hvp: ParamVector::new(hvp),
    })
}

/// `H(theta) v` without materializing `H`.
pub fn hvp(ctx: &LossContext, theta: &[f64], v: &[f64]) -> Result<ParamVector> {
    Ok(gradient_and_hvp(ctx, theta, v)?.hvp)
}

fn require_linearized(ctx: &LossContext) -> Result<()> {
    if ctx.is_linearized() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "context is not in linearized mode".into(),
        ))
    }
}

/// Gradient of the linearized loss; errors on a plain context.
pub fn linearized_loss_gradient(ctx: &LossContext, theta: &[f64]) -> Result<ParamVector> {
    require_linearized(ctx)?;
    loss_gradient(ctx, theta)
}

/// `J^T Lambda(f_lin) J v + alpha v`; errors on a plain context.
pub fn linearized_hvp(ctx: &LossContext, theta: &[f64], v: &[f64]) -> Result<ParamVector> {
    require_linearized(ctx)?;
    hvp(ctx, theta, v)
}

/// Dense Hessian assembled column by column from HVPs, then symmetrized.
pub fn hessian_dense(ctx: &LossContext, theta: &[f64]) -> Result<DMatrix<f64>> {
    hessian_dense_with_limit(ctx, theta, DEFAULT_DENSE_LIMIT)
}

pub fn hessian_dense_with_limit(
    ctx: &LossContext,
    theta: &[f64],
    limit: usize,
) -> Result<DMatrix<f64>> {
    let k = ctx.num_params();
    if k > limit {
        return Err(Error::DenseLimit { k, limit });
    }
    ctx.check_theta(theta)?;
    let cols: Vec<ParamVector> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            hvp(ctx, theta, &e)
        })
        .collect::<Result<_>>()?;
    let mut h = DMatrix::zeros(k, k);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..k {
            h[(i, j)] = col[i];
        }
    }
    symmetrize_checked(h, 1e-7)
}

/// Averages `h` with its transpose after checking the relative asymmetry.
pub(crate) fn symmetrize_checked(h: DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let asym = (&h - h.transpose()).amax() / scale;
    if asym > tol {
        return Err(Error::Asymmetric { asymmetry: asym });
    }
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{value_and_gradient, LossContext};
use crate::nn::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Full-batch gradient descent with optional heavy-ball momentum.
    GradientDescent {
        #[serde(default)]
        momentum: f64,
    },
    /// Adaptive moments with bias correction.
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    /// Stationarity threshold is `stationarity_factor * sqrt(K)`.
    #[serde(default = "default_stationarity")]
    pub stationarity_factor: f64,
}

fn default_stationarity() -> f64 {
    1e-3
}

impl OptimizerConfig {
    pub fn adam(lr: f64, epochs: usize) -> Self {
        Self {
            optimizer: Optimizer::Adam {
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_eps(),
            },
            lr,
            epochs,
            stationarity_factor: default_stationarity(),
        }
    }

    pub fn gradient_descent(lr: f64, epochs: usize, momentum: f64) -> Self {
        Self {
            optimizer: Optimizer::GradientDescent { momentum },
            lr,
            epochs,
            stationarity_factor: default_stationarity(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        match self.optimizer {
            Optimizer::GradientDescent { momentum } if !(0.0..1.0).contains(&momentum) => Err(
                Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")),
            ),
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::InvalidArgument(
                    "Adam needs beta1, beta2 in [0, 1) and eps > 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub theta_star: ParamVector,
    pub final_loss: f64,
    pub grad_norm: f64,
    /// `(epoch, loss)` before each update, then the final loss at `epochs`.
    pub trace: Vec<(usize, f64)>,
    pub stationary: bool,
}

/// Minimizes `L` from `ParamVector::init(arch, init_seed)`.
///
/// Weight decay comes only from the prior term in `ctx`.
pub fn train_map(ctx: &LossContext, init_seed: u64, cfg: &OptimizerConfig) -> Result<MapEstimate> {
    train_map_from(ctx, ParamVector::init(ctx.arch(), init_seed), cfg)
}

pub fn train_map_from(
    ctx: &LossContext,
    init: ParamVector,
    cfg: &OptimizerConfig,
) -> Result<MapEstimate> {
    cfg.validate()?;
    let k = ctx.num_params();
    let mut theta = init;
    let mut m = vec![0.0; k];
    let mut s = vec![0.0; k];
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut last_finite = None;
    let eval = |theta: &ParamVector, last: Option<usize>| -> Result<(f64, ParamVector)> {
        match value_and_gradient(ctx, theta) {
            Ok((v, g)) if v.is_finite() => Ok((v, g)),
            Ok(_) | Err(Error::NonFinite { .. }) => Err(Error::Diverged {
                last_finite_epoch: last,
            }),
            Err(e) => Err(e),
        }
    };
    for epoch in 0..cfg.epochs {
        let (value, grad) = eval(&theta, last_finite)?;
        trace.push((epoch, value));
        last_finite = Some(epoch);
        match cfg.optimizer {
            Optimizer::GradientDescent { momentum } => {
                for i in 0..k {
                    m[i] = momentum * m[i] + grad[i];
                    theta[i] -= cfg.lr * m[i];
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (epoch + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..k {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    s[i] = beta2 * s[i] + (1.0 - beta2) * grad[i] * grad[i];
                    theta[i] -= cfg.lr * (m[i] / c1) / ((s[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    let (final_loss, grad) = eval(&theta, last_finite)?;
    trace.push((cfg.epochs, final_loss));
    let grad_norm = grad.norm();
    let threshold = cfg.stationarity_factor * (k as f64).sqrt();
    let stationary = grad_norm < threshold;
    if !stationary {
        log::warn!("MAP estimate not stationary: |grad L| = {grad_norm:.3e} >= {threshold:.3e}");
    }
    Ok(MapEstimate {
        theta_star: theta,
        final_loss,
        grad_norm,
        trace,
        stationary,
    })
}

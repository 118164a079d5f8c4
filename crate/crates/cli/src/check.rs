//! Oracle diagnostics run by `riemlap check`.

use std::fmt;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use riemann_laplace::geometry::{
    expmap, general_geodesic_rhs, geodesic_rhs, normal_coordinate_map, speed_drift, GeodesicState,
    SolverOptions, GENERAL_RHS_LIMIT,
};
use riemann_laplace::laplace::{fit_laplace, train_map};
use riemann_laplace::loss::{gradient_and_hvp, loss_gradient, Likelihood, LossContext};
use riemann_laplace::nn::ParamVector;

use crate::config::ExperimentConfig;
use crate::experiment::ExperimentData;
use crate::CliError;

/// Largest `K` for which dense covariance checks run.
pub const CHECK_DENSE_LIMIT: usize = 1024;
/// Training points used by the checks.
const CHECK_POINTS: usize = 64;
const LEMMA_TOL: f64 = 1e-4;
const HVP_TOL: f64 = 1e-4;
const COVARIANCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Worst observed error.
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

impl CheckRow {
    fn measured(name: &'static str, value: f64, threshold: f64, detail: String) -> Self {
        let status = if value < threshold {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        Self {
            name,
            status,
            value: Some(value),
            threshold: Some(threshold),
            detail,
        }
    }

    fn skipped(name: &'static str, detail: String) -> Self {
        Self {
            name,
            status: CheckStatus::Skipped,
            value: None,
            threshold: None,
            detail,
        }
    }

    fn failed(name: &'static str, detail: String) -> Self {
        Self {
            name,
            status: CheckStatus::Fail,
            value: None,
            threshold: None,
            detail,
        }
    }
}

pub fn constant_speed_threshold(solver: &SolverOptions) -> f64 {
    50.0 * solver.rtol.min(1e-3)
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Runs the four oracle checks on the configured network and the first
/// training points of its dataset.
pub fn run_checks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<CheckRow>, CliError> {
    let data = ExperimentData::generate(cfg)?;
    let n = data.train.len().min(CHECK_POINTS);
    let train = data.train.select(&(0..n).collect::<Vec<_>>());
    let likelihood = match cfg.task() {
        riemann_laplace::datasets::Task::Classification => Likelihood::Categorical,
        riemann_laplace::datasets::Task::Regression => Likelihood::Gaussian {
            sigma2: cfg.noise_sigma.powi(2),
        },
    };
    let ctx = LossContext::new(cfg.arch.clone(), train, likelihood, cfg.prior_precision)?;
    let k = ctx.num_params();
    let map = train_map(&ctx, seed, &cfg.optimizer)?;
    let theta = map.theta_star;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        lemma_check(&ctx, &theta, &mut rng),
        speed_check(&ctx, &theta, &cfg.solver, &mut rng),
        hvp_check(&ctx, &theta, &mut rng)?,
        covariance_check(&ctx, &theta, k, cfg),
    ])
}

fn lemma_check(ctx: &LossContext, theta: &ParamVector, rng: &mut ChaCha8Rng) -> CheckRow {
    const NAME: &str = "lemma_equivalence";
    let k = ctx.num_params();
    if k > GENERAL_RHS_LIMIT {
        return CheckRow::skipped(
            NAME,
            format!("K = {k} exceeds the general-RHS limit {GENERAL_RHS_LIMIT}"),
        );
    }
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let c: Vec<f64> = theta
            .iter()
            .zip(randn(rng, k))
            .map(|(t, z)| t + 0.3 * z)
            .collect();
        let state = match GeodesicState::new(ParamVector::new(c), ParamVector::new(randn(rng, k))) {
            Ok(s) => s,
            Err(e) => return CheckRow::failed(NAME, e.to_string()),
        };
        match (geodesic_rhs(ctx, &state), general_geodesic_rhs(ctx, &state)) {
            (Ok(a), Ok(b)) => worst = worst.max(rel(&a.c_dot, &b.c_dot)),
            (Err(e), _) | (_, Err(e)) => return CheckRow::failed(NAME, e.to_string()),
        }
    }
    CheckRow::measured(
        NAME,
        worst,
        LEMMA_TOL,
        "10 random states, relative error of the acceleration".into(),
    )
}

fn speed_check(
    ctx: &LossContext,
    theta: &ParamVector,
    solver: &SolverOptions,
    rng: &mut ChaCha8Rng,
) -> CheckRow {
    const NAME: &str = "constant_speed";
    let threshold = constant_speed_threshold(solver);
    let opts = SolverOptions {
        keep_trajectory: true,
        ..*solver
    };
    let k = ctx.num_params();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let v: Vec<f64> = randn(rng, k)
            .iter()
            .map(|z| z / (k as f64).sqrt())
            .collect();
        let sol = match expmap(ctx, theta, &v, &opts) {
            Ok(s) => s,
            Err(e) => return CheckRow::failed(NAME, format!("expmap failed: {e}")),
        };
        match speed_drift(ctx, sol.trajectory.as_deref().unwrap_or_default()) {
            Ok(d) => worst = worst.max(d),
            Err(e) => return CheckRow::failed(NAME, e.to_string()),
        }
    }
    CheckRow::measured(
        NAME,
        worst,
        threshold,
        format!("3 geodesics, rtol = {:e}", solver.rtol),
    )
}

fn hvp_check(
    ctx: &LossContext,
    theta: &ParamVector,
    rng: &mut ChaCha8Rng,
) -> Result<CheckRow, CliError> {
    const NAME: &str = "hvp_vs_fd";
    let k = ctx.num_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t: Vec<f64> = theta
            .iter()
            .zip(randn(rng, k))
            .map(|(a, z)| a + 0.1 * z)
            .collect();
        let v = randn(rng, k);
        let hv = gradient_and_hvp(ctx, &t, &v)?.hvp;
        let shift = |s: f64| -> Vec<f64> { t.iter().zip(&v).map(|(a, b)| a + s * h * b).collect() };
        let gp = loss_gradient(ctx, &shift(1.0))?;
        let gm = loss_gradient(ctx, &shift(-1.0))?;
        let fd: Vec<f64> = gp
            .iter()
            .zip(gm.iter())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        worst = worst.max(rel(&hv, &fd));
    }
    Ok(CheckRow::measured(
        NAME,
        worst,
        HVP_TOL,
        "20 random (theta, v) pairs, central differences".into(),
    ))
}

fn covariance_check(
    ctx: &LossContext,
    theta: &ParamVector,
    k: usize,
    cfg: &ExperimentConfig,
) -> CheckRow {
    const NAME: &str = "covariance_identity";
    if k > CHECK_DENSE_LIMIT {
        return CheckRow::skipped(
            NAME,
            format!("K = {k} exceeds the dense check limit {CHECK_DENSE_LIMIT}"),
        );
    }
    let run = || -> riemann_laplace::Result<f64> {
        let post = fit_laplace(ctx, theta, cfg.laplace.hessian_kind)?;
        let a = normal_coordinate_map(ctx, theta)?;
        let aha: DMatrix<f64> = &a * post.precision() * &a;
        let chol = Cholesky::new(aha)
            .ok_or(riemann_laplace::Error::NotPositiveDefinite { hessian: "A H A" })?;
        let lhs = &a * chol.inverse() * &a;
        Ok((lhs - post.covariance()).amax())
    };
    match run() {
        Ok(err) => CheckRow::measured(
            NAME,
            err,
            COVARIANCE_TOL,
            "max |A (A H A)^-1 A - H^-1|".into(),
        ),
        Err(e) => CheckRow::failed(NAME, e.to_string()),
    }
}

pub fn print_table(rows: &[CheckRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<22} {:<6} {:>12} {:>12}  detail",
        "check", "status", "value", "threshold"
    )?;
    for r in rows {
        let num = |x: Option<f64>| x.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<22} {:<6} {:>12} {:>12}  {}",
            r.name,
            r.status,
            num(r.value),
            num(r.threshold),
            r.detail
        )?;
    }
    Ok(())
}

pub fn write_csv(rows: &[CheckRow], path: &std::path::Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(["check", "status", "value", "threshold", "detail"])
        .map_err(err)?;
    for r in rows {
        let num = |x: Option<f64>| x.map(|v| format!("{v:.17e}")).unwrap_or_default();
        w.write_record([
            r.name.to_string(),
            r.status.to_string(),
            num(r.value),
            num(r.threshold),
            r.detail.clone(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

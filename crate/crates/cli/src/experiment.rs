//! Per-seed pipeline: MAP, evidence tuning, posterior, samples, metrics.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use riemann_laplace::datasets::{bounding_box, generate, Task};
use riemann_laplace::laplace::{
    fit_laplace, optimize_hyperparameters, train_map, LaplacePosterior, MapEstimate,
};
use riemann_laplace::loss::{loss_value, Likelihood, LossContext};
use riemann_laplace::metrics::{
    classification_metrics, regression_metrics, MetricsReport, RegressionReport,
};
use riemann_laplace::nn::BatchInput;
use riemann_laplace::sampling::{
    draw_samples, fallback_rate, predictive_from_thetas, PosteriorSample, PredictFn,
    PredictiveResult, SamplingOptions,
};

use crate::config::{ExperimentConfig, Method};

/// Side length of the confidence heatmap grid.
pub const GRID: usize = 100;
/// Relative padding of the figure domain around the training inputs.
pub const PAD: f64 = 0.3;
const BAND_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionScores {
    pub report: RegressionReport,
    /// Mean width of the `mean +- 2 std` band over training and test inputs.
    pub band_width_train: f64,
    pub band_width_test: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scores {
    Classification(MetricsReport),
    Regression(RegressionScores),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub scores: Scores,
    /// Mean of `L(theta_s)` on the training set under the posterior's hyperparameters.
    pub mean_sample_loss: f64,
    pub fallback_rate: f64,
    /// Empty for `map`.
    pub samples: Vec<PosteriorSample>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FigureData {
    /// Max-probability on a `GRID x GRID` lattice, row `j` at `y[j]`.
    Confidence {
        xs: Vec<f64>,
        ys: Vec<f64>,
        conf: DMatrix<f64>,
    },
    /// Predictive mean and std along `xs`.
    Band {
        xs: Vec<f64>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub alpha: f64,
    pub sigma: Option<f64>,
    pub map: MapEstimate,
    pub methods: Vec<(Method, Result<MethodResult, String>)>,
    pub figures: Vec<(Method, FigureData)>,
    /// `(stage, seconds)`.
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: BatchInput,
    pub test: BatchInput,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig) -> riemann_laplace::Result<Self> {
        let (train, test) = generate(&cfg.dataset)?;
        let arch = &cfg.arch;
        if train.dim() != arch.input_dim() {
            return Err(riemann_laplace::Error::InvalidArgument(format!(
                "network expects {} inputs, data has {}",
                arch.input_dim(),
                train.dim()
            )));
        }
        if let Some(riemann_laplace::nn::Targets::Classes { n_classes, .. }) = train.targets() {
            if *n_classes > arch.output_dim() {
                return Err(riemann_laplace::Error::InvalidArgument(format!(
                    "network has {} outputs, data has {n_classes} classes",
                    arch.output_dim()
                )));
            }
        }
        Ok(Self { train, test })
    }
}

fn base_likelihood(cfg: &ExperimentConfig) -> Likelihood {
    match cfg.task() {
        Task::Classification => Likelihood::Categorical,
        Task::Regression => Likelihood::Gaussian {
            sigma2: cfg.noise_sigma * cfg.noise_sigma,
        },
    }
}

fn labels_of(x: &BatchInput) -> Option<&[usize]> {
    x.targets().and_then(|t| t.labels())
}

/// Runs every mode for one seed. Stage failures before sampling fail the
/// whole seed; a failing mode only fails its own row.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
    with_figures: bool,
) -> riemann_laplace::Result<SeedResult> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let train_ctx = LossContext::new(
        cfg.arch.clone(),
        data.train.clone(),
        base_likelihood(cfg),
        cfg.prior_precision,
    )?;
    let map = train_map(&train_ctx, seed, &cfg.optimizer)?;
    if !map.stationary {
        log::warn!(
            "seed {seed}: MAP gradient norm {:.3e} is above the stationarity threshold",
            map.grad_norm
        );
    }
    lap("train", &mut timings);
    let theta_star = &map.theta_star;
    let (alpha, likelihood) = if cfg.laplace.optimize_prior {
        let h = optimize_hyperparameters(&train_ctx, theta_star, cfg.laplace.hessian_kind)?;
        (h.alpha, h.likelihood(train_ctx.likelihood()))
    } else {
        (cfg.prior_precision, train_ctx.likelihood())
    };
    lap("hyperparameters", &mut timings);
    let post_ctx = train_ctx
        .with_prior_precision(alpha)
        .with_likelihood(likelihood)?;
    let post = fit_laplace(&post_ctx, theta_star, cfg.laplace.hessian_kind)?;
    lap("posterior", &mut timings);

    let opts = SamplingOptions {
        solver: cfg.solver,
        zero_tangent: cfg.zero_tangent,
    };
    let mut methods = Vec::with_capacity(cfg.modes.len());
    let mut figures = Vec::new();
    for &method in &cfg.modes {
        let start = Instant::now();
        let res = run_method(cfg, data, &post, &post_ctx, method, seed, &opts);
        let res = res.and_then(|mut r| {
            r.wall_time = start.elapsed().as_secs_f64();
            if with_figures {
                if let Some(fig) = figure_data(cfg, data, &post, method, &r.samples)? {
                    figures.push((method, fig));
                }
            }
            Ok(r)
        });
        if let Err(e) = &res {
            log::warn!("seed {seed}, {method}: {e}");
        }
        methods.push((method, res.map_err(|e| e.to_string())));
    }
    lap("methods", &mut timings);
    Ok(SeedResult {
        seed,
        alpha,
        sigma: likelihood.sigma2().map(f64::sqrt),
        map,
        methods,
        figures,
        timings,
    })
}

fn predict_fn(method: Method, post: &LaplacePosterior) -> PredictFn {
    if method.uses_linearized_predictive() {
        PredictFn::Linearized(post.theta_star().clone())
    } else {
        PredictFn::Plain
    }
}

fn thetas(post: &LaplacePosterior, samples: &[PosteriorSample]) -> Vec<Vec<f64>> {
    if samples.is_empty() {
        vec![post.theta_star().as_slice().to_vec()]
    } else {
        samples
            .iter()
            .map(|s| s.theta.as_slice().to_vec())
            .collect()
    }
}

fn predict(
    post: &LaplacePosterior,
    method: Method,
    samples: &[PosteriorSample],
    x: &BatchInput,
) -> riemann_laplace::Result<PredictiveResult> {
    let owned = thetas(post, samples);
    let refs: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
    predictive_from_thetas(
        post.arch(),
        &refs,
        x,
        post.likelihood(),
        &predict_fn(method, post),
    )
}

fn band_width(pred: &PredictiveResult) -> f64 {
    let (_, var) = pred.mixture_moments().expect("regression predictive");
    var.iter().map(|v| 4.0 * v.sqrt()).sum::<f64>() / var.len() as f64
}

fn run_method(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    post: &LaplacePosterior,
    ctx: &LossContext,
    method: Method,
    seed: u64,
    opts: &SamplingOptions,
) -> riemann_laplace::Result<MethodResult> {
    let samples = match method.sample_mode() {
        None => Vec::new(),
        Some(mode) => draw_samples(post, ctx, mode, cfg.samples, seed, opts)?,
    };
    let losses: Vec<f64> = thetas(post, &samples)
        .par_iter()
        .map(|t| loss_value(ctx, t))
        .collect::<riemann_laplace::Result<_>>()?;
    let mean_sample_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let pred = predict(post, method, &samples, &data.test)?;
    let scores = match cfg.task() {
        Task::Classification => {
            let labels = labels_of(&data.test).expect("classification data has labels");
            Scores::Classification(classification_metrics(&pred, labels, cfg.n_bins())?)
        }
        Task::Regression => {
            let targets = data.test.targets().expect("regression data has targets");
            let report = regression_metrics(&pred, targets)?;
            let on_train = predict(post, method, &samples, &data.train)?;
            Scores::Regression(RegressionScores {
                report,
                band_width_train: band_width(&on_train),
                band_width_test: band_width(&pred),
            })
        }
    };
    Ok(MethodResult {
        method,
        scores,
        mean_sample_loss,
        fallback_rate: if samples.is_empty() {
            0.0
        } else {
            fallback_rate(&samples)
        },
        samples,
        wall_time: 0.0,
    })
}

/// Padded axis range of the training inputs.
pub fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    let w = (hi - lo).max(1e-6);
    (lo - PAD * w, hi + PAD * w)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn figure_data(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    post: &LaplacePosterior,
    method: Method,
    samples: &[PosteriorSample],
) -> riemann_laplace::Result<Option<FigureData>> {
    let bbox = bounding_box(&data.train);
    match (cfg.task(), data.train.dim()) {
        (Task::Classification, 2) => {
            let (x0, x1) = padded_range(bbox[0].0, bbox[0].1);
            let (y0, y1) = padded_range(bbox[1].0, bbox[1].1);
            let xs = linspace(x0, x1, GRID);
            let ys = linspace(y0, y1, GRID);
            let mut pts = Vec::with_capacity(2 * GRID * GRID);
            for &y in &ys {
                for &x in &xs {
                    pts.push(x);
                    pts.push(y);
                }
            }
            let grid = BatchInput::inputs_only(2, pts)?;
            let PredictiveResult::Classification { probs } = predict(post, method, samples, &grid)?
            else {
                unreachable!("classification task");
            };
            let conf = DMatrix::from_fn(GRID, GRID, |j, i| probs.row(j * GRID + i).max());
            Ok(Some(FigureData::Confidence { xs, ys, conf }))
        }
        (Task::Regression, 1) => {
            let (x0, x1) = padded_range(bbox[0].0, bbox[0].1);
            let xs = linspace(x0, x1, BAND_POINTS);
            let grid = BatchInput::inputs_only(1, xs.clone())?;
            let pred = predict(post, method, samples, &grid)?;
            let (mean, var) = pred.mixture_moments().expect("regression predictive");
            Ok(Some(FigureData::Band {
                xs,
                mean: mean.iter().copied().collect(),
                std: var.iter().map(|v| v.sqrt()).collect(),
            }))
        }
        _ => Ok(None),
    }
}

/// Outcome of every seed in config order.
pub fn run_all(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
) -> Vec<(u64, Result<SeedResult, String>)> {
    let first = cfg.seeds[0];
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let r = run_seed(cfg, data, seed, cfg.figures && seed == first).map_err(|e| {
                log::error!("seed {seed} failed: {e}");
                e.to_string()
            });
            (seed, r)
        })
        .collect()
}

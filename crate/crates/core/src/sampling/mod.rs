//! Posterior samples (vanilla, Riemannian, linearized-Riemannian) and Monte
//! Carlo predictive distributions.

mod io;

pub use io::{load_samples, save_samples, write_sample_manifest};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{expmap, SolverOptions, SolverStats};
use crate::laplace::LaplacePosterior;
use crate::loss::{make_minibatch_ctx, Likelihood, LossContext};
use crate::nn::tape::{self, Scratch, Tape};
use crate::nn::{check_len, BatchInput, MlpArchitecture, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    /// `theta* + v`.
    Vanilla,
    /// `Exp_theta*(v)` under the metric of the network loss.
    Riem,
    /// `Exp_theta*(v)` under the metric of the linearized-model loss.
    LinRiem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Batching {
    Full,
    /// Fresh random batch of this size per sample.
    Batched(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleMode {
    kind: SampleKind,
    batching: Batching,
}

impl SampleMode {
    pub fn new(kind: SampleKind, batching: Batching) -> Result<Self> {
        match (kind, batching) {
            (SampleKind::Vanilla, Batching::Batched(_)) => Err(Error::InvalidArgument(
                "mini-batching applies only to riem and lin_riem".into(),
            )),
            (_, Batching::Batched(0)) => {
                Err(Error::InvalidArgument("batch size must be positive".into()))
            }
            _ => Ok(Self { kind, batching }),
        }
    }

    pub fn full(kind: SampleKind) -> Self {
        Self {
            kind,
            batching: Batching::Full,
        }
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn batching(&self) -> Batching {
        self.batching
    }
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            SampleKind::Vanilla => "vanilla",
            SampleKind::Riem => "riem",
            SampleKind::LinRiem => "lin_riem",
        };
        match self.batching {
            Batching::Full => f.write_str(base),
            Batching::Batched(b) => write!(f, "{base}_batched:{b}"),
        }
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    /// `vanilla`, `riem`, `lin_riem`, `riem_batched:B`, `lin_riem_batched:B`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown sample mode {s:?}"));
        let (head, batch) = match s.split_once(':') {
            Some((h, b)) => (h, Some(b.parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let (kind, batched) = match head {
            "vanilla" => (SampleKind::Vanilla, false),
            "riem" => (SampleKind::Riem, false),
            "lin_riem" => (SampleKind::LinRiem, false),
            "riem_batched" => (SampleKind::Riem, true),
            "lin_riem_batched" => (SampleKind::LinRiem, true),
            _ => return Err(bad()),
        };
        match (batched, batch) {
            (false, None) => Ok(Self::full(kind)),
            (true, Some(b)) => Self::new(kind, Batching::Batched(b)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub index: usize,
    pub theta: ParamVector,
    /// Initial velocity `L z`.
    pub v: ParamVector,
    pub mode: SampleMode,
    pub solver_stats: Option<SolverStats>,
    pub batch_indices: Option<Vec<usize>>,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SamplingOptions {
    pub solver: SolverOptions,
    /// Force `z = 0` (every sample is `theta*`); a test hook.
    pub zero_tangent: bool,
}

/// Independent RNG for sample `s`: stream `2s` draws `z`, stream `2s + 1`
/// draws the mini-batch.
fn sample_rng(master_seed: u64, s: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(2 * s as u64 + purpose);
    rng
}

/// Draws `n_samples` samples around `post.theta_star()`.
///
/// `ctx` supplies the loss whose metric the geodesics follow; it should carry
/// the same prior precision and likelihood as `post`. Solver failures fall
/// back to `theta* + v` with `fallback_used = true`.
pub fn draw_samples(
    post: &LaplacePosterior,
    ctx: &LossContext,
    mode: SampleMode,
    n_samples: usize,
    master_seed: u64,
    opts: &SamplingOptions,
) -> Result<Vec<PosteriorSample>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if ctx.arch() != post.arch() {
        return Err(Error::InvalidArgument(
            "context and posterior architectures differ".into(),
        ));
    }
    let theta_star = post.theta_star();
    let base = match mode.kind {
        SampleKind::Vanilla => None,
        SampleKind::Riem => Some(ctx.plain()),
        SampleKind::LinRiem => Some(ctx.linearized(theta_star)?),
    };
    let k = post.num_params();
    (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let z: Vec<f64> = if opts.zero_tangent {
                vec![0.0; k]
            } else {
                let mut rng = sample_rng(master_seed, s, 0);
                (0..k).map(|_| StandardNormal.sample(&mut rng)).collect()
            };
            let v = post.tangent(&z)?;
            let Some(base) = &base else {
                return Ok(PosteriorSample {
                    index: s,
                    theta: post.sample(&z)?,
                    v,
                    mode,
                    solver_stats: None,
                    batch_indices: None,
                    fallback_used: false,
                });
            };
            let local;
            let (geo_ctx, batch_indices) = match mode.batching {
                Batching::Full => (base, None),
                Batching::Batched(b) => {
                    let mut rng = sample_rng(master_seed, s, 1);
                    local = make_minibatch_ctx(base, b, &mut rng)?;
                    (&local, local.batch_indices().map(<[usize]>::to_vec))
                }
            };
            let (theta, solver_stats, fallback_used) =
                match expmap(geo_ctx, theta_star, &v, &opts.solver) {
                    Ok(sol) => (sol.endpoint, Some(sol.stats), false),
                    Err(e) => {
                        log::warn!("sample {s} ({mode}): geodesic failed ({e}); using theta* + v");
                        (post.sample(&z)?, None, true)
                    }
                };
            Ok(PosteriorSample {
                index: s,
                theta,
                v,
                mode,
                solver_stats,
                batch_indices,
                fallback_used,
            })
        })
        .collect()
}

pub fn fallback_rate(samples: &[PosteriorSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.fallback_used).count() as f64 / samples.len() as f64
}

/// How each sample turns an input into an output.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictFn {
    /// `f_theta(x)`.
    Plain,
    /// `f_anchor(x) + J_anchor(x) (theta - anchor)`.
    Linearized(ParamVector),
}

impl PredictFn {
    /// Plain network for vanilla and riem, linearized model for lin_riem.
    pub fn default_for(kind: SampleKind, theta_star: &ParamVector) -> Self {
        match kind {
            SampleKind::LinRiem => PredictFn::Linearized(theta_star.clone()),
            _ => PredictFn::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveResult {
    /// Average softmax, `N x C`.
    Classification { probs: DMatrix<f64> },
    /// Per-sample means (`S` matrices of shape `N x C`) and the shared noise variance.
    Regression {
        means: Vec<DMatrix<f64>>,
        sigma2: f64,
    },
}

impl PredictiveResult {
    pub fn len(&self) -> usize {
        match self {
            PredictiveResult::Classification { probs } => probs.nrows(),
            PredictiveResult::Regression { means, .. } => means[0].nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mixture mean and variance (`var of means + sigma^2`), both `N x C`.
    pub fn mixture_moments(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let PredictiveResult::Regression { means, sigma2 } = self else {
            return None;
        };
        let s = means.len() as f64;
        let mut mean = DMatrix::zeros(means[0].nrows(), means[0].ncols());
        for m in means {
            mean += m;
        }
        mean /= s;
        let mut var = DMatrix::zeros(mean.nrows(), mean.ncols());
        for m in means {
            let d = m - &mean;
            var += d.component_mul(&d);
        }
        var /= s;
        var.add_scalar_mut(*sigma2);
        Some((mean, var))
    }
}

/// Network outputs for every sample, `S` matrices of shape `N x C`.
pub fn sample_outputs(
    arch: &MlpArchitecture,
    thetas: &[&[f64]],
    x: &BatchInput,
    predict_fn: &PredictFn,
) -> Result<Vec<DMatrix<f64>>> {
    for t in thetas {
        check_len(arch, t)?;
    }
    let (n, c) = (x.len(), arch.output_dim());
    match predict_fn {
        PredictFn::Plain => thetas
            .par_iter()
            .map(|t| crate::nn::forward(arch, t, x))
            .collect(),
        PredictFn::Linearized(anchor) => {
            check_len(arch, anchor)?;
            let base = crate::nn::forward(arch, anchor, x)?;
            let tapes: Vec<Tape<f64>> = (0..n)
                .map(|i| {
                    let mut t = Tape::new(arch);
                    tape::forward(arch, anchor, x.row(i), &mut t);
                    t
                })
                .collect();
            thetas
                .par_iter()
                .map(|theta| {
                    let delta: Vec<f64> = theta
                        .iter()
                        .zip(anchor.iter())
                        .map(|(a, b)| a - b)
                        .collect();
                    let mut scratch = Scratch::new(arch);
                    let mut jv = vec![0.0; c];
                    let mut out = base.clone();
                    for (i, tp) in tapes.iter().enumerate() {
                        tape::jvp(arch, anchor, tp, &delta, &mut jv, &mut scratch);
                        for j in 0..c {
                            out[(i, j)] += jv[j];
                        }
                    }
                    Ok(out)
                })
                .collect()
        }
    }
}

/// Monte Carlo predictive over `samples` at inputs `x`.
pub fn predictive(
    arch: &MlpArchitecture,
    samples: &[PosteriorSample],
    x: &BatchInput,
    likelihood: Likelihood,
    predict_fn: &PredictFn,
) -> Result<PredictiveResult> {
    let thetas: Vec<&[f64]> = samples.iter().map(|s| s.theta.as_slice()).collect();
    predictive_from_thetas(arch, &thetas, x, likelihood, predict_fn)
}

pub fn predictive_from_thetas(
    arch: &MlpArchitecture,
    thetas: &[&[f64]],
    x: &BatchInput,
    likelihood: Likelihood,
    predict_fn: &PredictFn,
) -> Result<PredictiveResult> {
    if thetas.is_empty() {
        return Err(Error::InvalidArgument(
            "predictive needs at least one sample".into(),
        ));
    }
    let outputs = sample_outputs(arch, thetas, x, predict_fn)?;
    match likelihood {
        Likelihood::Gaussian { sigma2 } => Ok(PredictiveResult::Regression {
            means: outputs,
            sigma2,
        }),
        Likelihood::Categorical => {
            let mut probs = DMatrix::zeros(x.len(), arch.output_dim());
            for f in &outputs {
                for i in 0..f.nrows() {
                    let row: Vec<f64> = f.row(i).iter().copied().collect();
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        probs[(i, j)] += ej / z;
                    }
                }
            }
            probs /= thetas.len() as f64;
            Ok(PredictiveResult::Classification { probs })
        }
    }
}

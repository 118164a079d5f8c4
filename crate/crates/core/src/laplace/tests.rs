use super::*;
use crate::loss::hvp;
use crate::nn::{BatchInput, Targets};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `y = x w + 0.5 + sigma_true * eps` with a `[d, 1]` network.
fn linear_ctx(
    d: usize,
    n: usize,
    sigma_true: f64,
    sigma2: f64,
    alpha: f64,
    seed: u64,
) -> LossContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, d);
    let x = randn(&mut rng, n * d);
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let f: f64 = (0..d).map(|j| x[i * d + j] * w[j]).sum::<f64>() + 0.5;
            f + sigma_true * randn(&mut rng, 1)[0]
        })
        .collect();
    let data = BatchInput::new(d, x, Some(Targets::Values { dim: 1, values: y })).unwrap();
    let arch = MlpArchitecture::new(vec![d, 1]).unwrap();
    LossContext::new(arch, data, Likelihood::Gaussian { sigma2 }, alpha).unwrap()
}

fn class_ctx(widths: Vec<usize>, n: usize, alpha: f64, seed: u64) -> LossContext {
    let arch = MlpArchitecture::new(widths).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = arch.input_dim();
    let c = arch.output_dim();
    let x = randn(&mut rng, n * d);
    let labels = (0..n).map(|i| usize::from(x[i * d] > 0.0) % c).collect();
    let data = BatchInput::new(
        d,
        x,
        Some(Targets::Classes {
            n_classes: c,
            labels,
        }),
    )
    .unwrap();
    LossContext::new(arch, data, Likelihood::Categorical, alpha).unwrap()
}

fn design(ctx: &LossContext) -> DMatrix<f64> {
    let data = ctx.data();
    let d = data.dim();
    DMatrix::from_fn(
        data.len(),
        d + 1,
        |i, j| if j < d { data.row(i)[j] } else { 1.0 },
    )
}

fn targets(ctx: &LossContext) -> DVector<f64> {
    match ctx.data().targets().unwrap() {
        Targets::Values { values, .. } => DVector::from_column_slice(values),
        _ => unreachable!(),
    }
}

fn analytic_map(ctx: &LossContext) -> (DVector<f64>, DMatrix<f64>) {
    let s2 = ctx.likelihood().sigma2().unwrap();
    let x = design(ctx);
    let k = x.ncols();
    let a = x.transpose() * &x / s2 + DMatrix::identity(k, k) * ctx.prior_precision();
    let theta = a
        .clone()
        .cholesky()
        .unwrap()
        .solve(&(x.transpose() * targets(ctx) / s2));
    (theta, a)
}

#[test]
fn gd_converges_to_closed_form_minimizer() {
    let ctx = linear_ctx(2, 40, 0.3, 0.25, 1.0, 1);
    let (expected, _) = analytic_map(&ctx);
    let cfg = OptimizerConfig::gradient_descent(1e-3, 4000, 0.9);
    let map = train_map(&ctx, 3, &cfg).unwrap();
    let err = (DVector::from_column_slice(&map.theta_star) - expected).amax();
    assert!(err < 1e-6, "{err}");
    assert!(map.stationary);
    assert_eq!(map.trace.len(), 4001);
}

#[test]
fn adam_reaches_closed_form_minimizer() {
    let ctx = linear_ctx(2, 40, 0.3, 0.25, 1.0, 1);
    let (expected, _) = analytic_map(&ctx);
    let map = train_map(&ctx, 3, &OptimizerConfig::adam(1e-2, 5000)).unwrap();
    let err = (DVector::from_column_slice(&map.theta_star) - expected).amax();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn start_at_minimizer_is_stationary() {
    let ctx = linear_ctx(3, 25, 0.3, 0.25, 0.5, 2);
    let (expected, _) = analytic_map(&ctx);
    let cfg = OptimizerConfig::gradient_descent(1e-3, 50, 0.0);
    let map = train_map_from(&ctx, ParamVector::new(expected.as_slice().to_vec()), &cfg).unwrap();
    assert!(map.grad_norm < 1e-10, "{}", map.grad_norm);
    let first = map.trace[0].1;
    assert!(map
        .trace
        .iter()
        .all(|&(_, l)| (l - first).abs() < 1e-10 * first.abs()));
}

#[test]
fn divergence_reports_last_finite_epoch() {
    let ctx = linear_ctx(2, 40, 0.3, 0.01, 0.0, 3);
    let cfg = OptimizerConfig::gradient_descent(10.0, 10_000, 0.0);
    match train_map(&ctx, 1, &cfg) {
        Err(Error::Diverged {
            last_finite_epoch: Some(e),
        }) => assert!(e > 0),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn optimizer_config_is_validated() {
    let ctx = linear_ctx(2, 10, 0.3, 0.25, 1.0, 1);
    assert!(train_map(&ctx, 1, &OptimizerConfig::gradient_descent(-1.0, 5, 0.0)).is_err());
    assert!(train_map(&ctx, 1, &OptimizerConfig::gradient_descent(0.1, 5, 1.0)).is_err());
}

#[test]
fn ggn_equals_exact_hessian_for_linear_gaussian() {
    let ctx = linear_ctx(3, 30, 0.3, 0.2, 0.7, 4);
    let theta: Vec<f64> = (0..4).map(|i| 0.1 * i as f64).collect();
    let g = ggn_hessian(&ctx, &theta).unwrap();
    let e = hessian_dense(&ctx, &theta).unwrap();
    assert!((&g - &e).amax() < 1e-8 * e.amax());
    let pg = fit_laplace(&ctx, &ParamVector::new(theta.clone()), HessianKind::Ggn).unwrap();
    let pe = fit_laplace(&ctx, &ParamVector::new(theta), HessianKind::Exact).unwrap();
    assert!((pg.precision() - pe.precision()).amax() < 1e-8 * pe.precision().amax());
}

#[test]
fn ggn_is_prior_dominated_for_huge_alpha() {
    let ctx = class_ctx(vec![2, 5, 2], 20, 1e6, 1);
    let theta = ParamVector::init(ctx.arch(), 2);
    let g = ggn_hessian(&ctx, &theta).unwrap();
    let k = ctx.num_params();
    let diff = (&g - DMatrix::identity(k, k) * 1e6).amax();
    assert!(diff < 1e-3 * 1e6, "{diff}");
}

#[test]
fn ggn_equals_dense_hessian_of_linearized_loss() {
    let ctx = class_ctx(vec![2, 4, 2], 30, 0.5, 5);
    let theta = ParamVector::init(ctx.arch(), 6);
    let g = ggn_hessian(&ctx, &theta).unwrap();
    let lin = ctx.linearized(&theta).unwrap();
    let d = hessian_dense(&lin, &theta).unwrap();
    assert!((&g - &d).amax() < 1e-6 * d.amax());
}

#[test]
fn ggn_is_bitwise_thread_independent() {
    let ctx = class_ctx(vec![2, 6, 3], 100, 0.5, 5);
    let theta = ParamVector::init(ctx.arch(), 6);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let four = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let a = one.install(|| ggn_hessian(&ctx, &theta).unwrap());
    let b = four.install(|| ggn_hessian(&ctx, &theta).unwrap());
    assert!(a
        .iter()
        .zip(b.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn laplace_covariance_of_linear_model_is_closed_form() {
    let ctx = linear_ctx(2, 30, 0.3, 0.2, 0.7, 7);
    let (theta, a) = analytic_map(&ctx);
    let post = fit_laplace(
        &ctx,
        &ParamVector::new(theta.as_slice().to_vec()),
        HessianKind::Exact,
    )
    .unwrap();
    let expected = a.try_inverse().unwrap();
    assert!((post.covariance() - &expected).amax() < 1e-10 * expected.amax());
}

#[test]
fn identity_precision_gives_identity_factor() {
    let arch = MlpArchitecture::new(vec![2, 2]).unwrap();
    let k = arch.num_params();
    let post = LaplacePosterior::from_precision(
        arch,
        ParamVector::zeros(k),
        DMatrix::identity(k, k),
        1.0,
        Likelihood::Categorical,
        HessianKind::Ggn,
    )
    .unwrap();
    assert_eq!(post.chol_cov(), &DMatrix::<f64>::identity(k, k));
    assert_eq!(post.log_det_precision(), 0.0);
}

#[test]
fn construction_rejects_bad_precisions() {
    let arch = MlpArchitecture::new(vec![1, 1]).unwrap();
    let mk = |h: DMatrix<f64>| {
        LaplacePosterior::from_precision(
            arch.clone(),
            ParamVector::zeros(2),
            h,
            1.0,
            Likelihood::Categorical,
            HessianKind::Exact,
        )
    };
    assert!(matches!(
        mk(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])),
        Err(Error::NotPositiveDefinite { hessian: "exact" })
    ));
    assert!(matches!(
        mk(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])),
        Err(Error::Asymmetric { .. })
    ));
    assert!(matches!(
        mk(DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 1.0 - 1e-13, 1.0 - 1e-13, 1.0]
        )),
        Err(Error::IllConditioned { .. })
    ));
    assert!(mk(DMatrix::identity(3, 3)).is_err());
}

#[test]
fn exact_hessian_failure_advises_ggn() {
    // a wide net far from any minimum with no prior: the exact Hessian is indefinite
    let ctx = class_ctx(vec![2, 8, 2], 30, 0.0, 8);
    let mut theta = ParamVector::init(ctx.arch(), 9);
    for t in theta.iter_mut() {
        *t *= 3.0;
    }
    let err = fit_laplace(&ctx, &theta, HessianKind::Exact).unwrap_err();
    assert!(err.to_string().contains("GGN"), "{err}");
    assert!(fit_laplace(&ctx.with_prior_precision(1e-3), &theta, HessianKind::Ggn).is_ok());
}

#[test]
fn factor_reproduces_inverse_precision() {
    let ctx = class_ctx(vec![2, 6, 2], 40, 1.0, 3);
    let theta = ParamVector::init(ctx.arch(), 1);
    let post = fit_laplace(&ctx, &theta, HessianKind::Ggn).unwrap();
    let k = post.num_params();
    let r = (post.precision() * post.covariance() - DMatrix::<f64>::identity(k, k)).amax();
    assert!(r < 1e-6);
    let l = post.chol_cov();
    for i in 0..k {
        for j in i + 1..k {
            assert_eq!(l[(i, j)], 0.0);
        }
    }
}

#[test]
fn posterior_samples_have_the_right_mean() {
    let ctx = class_ctx(vec![2, 3, 2], 40, 1.0, 3);
    let theta = ParamVector::init(ctx.arch(), 1);
    let post = fit_laplace(&ctx, &theta, HessianKind::Ggn).unwrap();
    let k = post.num_params();
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mean = vec![0.0; k];
    for _ in 0..n {
        let s = post.sample(&randn(&mut rng, k)).unwrap();
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v / n as f64;
        }
    }
    let cov = post.covariance();
    for i in 0..k {
        let sd = cov[(i, i)].sqrt();
        assert!((mean[i] - theta[i]).abs() < 4.0 * sd / (n as f64).sqrt());
    }
}

#[test]
fn lml_matches_hand_computation() {
    // [1, 1] net, one point x = 1, y = 2, sigma = 1, alpha = 1
    let arch = MlpArchitecture::new(vec![1, 1]).unwrap();
    let data = BatchInput::new(
        1,
        vec![1.0],
        Some(Targets::Values {
            dim: 1,
            values: vec![2.0],
        }),
    )
    .unwrap();
    let ctx = LossContext::new(arch, data, Likelihood::Gaussian { sigma2: 1.0 }, 1.0).unwrap();
    let theta = [0.5, 0.25];
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let tau = 2.0 * std::f64::consts::PI;
    let r: f64 = 0.75 - 2.0;
    let loss = 0.5 * r * r + 0.5 * tau.ln() + 0.5 * (0.25 + 0.0625);
    // normalized prior: (K/2) log(alpha / 2 pi) = -log 2 pi
    let expected = -loss - tau.ln() + tau.ln() - 0.5 * 3.0f64.ln();
    let got = log_marginal_likelihood(&ctx, &theta, &h).unwrap();
    assert!((got - expected).abs() < 1e-14);
    let scaled = log_marginal_likelihood(&ctx, &theta, &(&h * 4.0)).unwrap();
    assert!((got - scaled - 4.0f64.ln()).abs() < 1e-12);
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert_eq!(
        log_marginal_likelihood(&ctx, &theta, &bad).unwrap(),
        f64::NEG_INFINITY
    );
}

#[test]
fn lml_goes_to_minus_infinity_with_alpha() {
    let ctx = class_ctx(vec![2, 3, 2], 20, 1.0, 2);
    let theta = ParamVector::init(ctx.arch(), 3);
    let mut last = f64::INFINITY;
    for alpha in [1e2, 1e4, 1e6, 1e8] {
        let c = ctx.with_prior_precision(alpha);
        let v = log_marginal_likelihood(&c, &theta, &ggn_hessian(&c, &theta).unwrap()).unwrap();
        assert!(v < last);
        last = v;
    }
    assert!(last < -1e6);
}

#[test]
fn lml_is_invariant_to_hidden_unit_permutation() {
    let ctx = class_ctx(vec![2, 3, 2], 25, 0.8, 4);
    let theta = ParamVector::init(ctx.arch(), 5);
    let mut layers = theta.unflatten(ctx.arch()).unwrap();
    let perm = [2usize, 0, 1];
    let w0 = layers[0].weights.clone();
    let b0 = layers[0].bias.clone();
    let w1 = layers[1].weights.clone();
    for (new, &old) in perm.iter().enumerate() {
        layers[0].weights.set_row(new, &w0.row(old));
        layers[0].bias[new] = b0[old];
        layers[1].weights.set_column(new, &w1.column(old));
    }
    let permuted = ParamVector::flatten(ctx.arch(), &layers).unwrap();
    assert_ne!(permuted, theta);
    let a = log_marginal_likelihood(&ctx, &theta, &ggn_hessian(&ctx, &theta).unwrap()).unwrap();
    let b =
        log_marginal_likelihood(&ctx, &permuted, &ggn_hessian(&ctx, &permuted).unwrap()).unwrap();
    assert!((a - b).abs() < 1e-10 * a.abs());
}

#[test]
fn hyperopt_objective_matches_direct_evaluation() {
    let ctx = class_ctx(vec![2, 4, 2], 30, 1.0, 6);
    let theta = ParamVector::init(ctx.arch(), 7);
    let res = optimize_hyperparameters(&ctx, &theta, HessianKind::Ggn).unwrap();
    let c = ctx.with_prior_precision(res.alpha);
    let direct = log_marginal_likelihood(&c, &theta, &ggn_hessian(&c, &theta).unwrap()).unwrap();
    assert!((res.objective - direct).abs() < 1e-8 * direct.abs());
    assert!(res.sigma.is_none());
    assert_eq!(res.alpha_grid.len(), ALPHA_GRID_POINTS);
    assert!(res.alpha_grid.iter().all(|&(_, v)| res.objective >= v));
}

#[test]
fn hyperopt_recovers_noise_level() {
    let ctx = linear_ctx(2, 500, 0.2, 1.0, 1.0, 12);
    let (theta, _) = analytic_map(&ctx);
    let res = optimize_hyperparameters(&ctx, theta.as_slice(), HessianKind::Ggn).unwrap();
    let sigma = res.sigma.unwrap();
    assert!((0.15..=0.25).contains(&sigma), "{sigma}");
    assert!(res.alpha_grid.iter().all(|&(_, v)| res.objective >= v));
    let c = ctx
        .with_prior_precision(res.alpha)
        .with_likelihood(Likelihood::Gaussian {
            sigma2: sigma * sigma,
        })
        .unwrap();
    let direct = log_marginal_likelihood(
        &c,
        theta.as_slice(),
        &ggn_hessian(&c, theta.as_slice()).unwrap(),
    )
    .unwrap();
    assert!((res.objective - direct).abs() < 1e-8 * direct.abs());
}

#[test]
fn hyperopt_argmax_holds_on_doubled_data() {
    let ctx = linear_ctx(2, 50, 0.3, 0.09, 1.0, 13);
    let idx: Vec<usize> = (0..50).chain(0..50).collect();
    let doubled = LossContext::new(
        ctx.arch().clone(),
        ctx.data().select(&idx),
        ctx.likelihood(),
        ctx.prior_precision(),
    )
    .unwrap();
    let (theta, _) = analytic_map(&doubled);
    let res = optimize_hyperparameters(&doubled, theta.as_slice(), HessianKind::Exact).unwrap();
    assert!(res.alpha_grid.iter().all(|&(_, v)| res.objective >= v));
}

#[test]
fn hyperopt_fails_when_no_grid_point_is_spd() {
    let ctx = class_ctx(vec![2, 2], 10, 1.0, 1);
    let k = ctx.num_params();
    let h = DMatrix::identity(k, k) * -1e5;
    assert!(matches!(
        optimize_hyperparameters_with(&ctx, &vec![0.0; k], &h),
        Err(Error::NotPositiveDefinite { .. })
    ));
}

#[test]
fn refit_matches_fresh_fit() {
    let ctx = linear_ctx(1, 20, 0.3, 0.09, 1.0, 2);
    let ctx = LossContext::new(
        MlpArchitecture::new(vec![1, 4, 1]).unwrap(),
        ctx.data().clone(),
        ctx.likelihood(),
        1.0,
    )
    .unwrap();
    let theta = ParamVector::init(ctx.arch(), 2);
    let post = fit_laplace(&ctx, &theta, HessianKind::Ggn).unwrap();
    let lik = Likelihood::Gaussian { sigma2: 0.25 };
    let refit = post.with_hyperparameters(3.0, lik).unwrap();
    let fresh = fit_laplace(
        &ctx.with_prior_precision(3.0).with_likelihood(lik).unwrap(),
        &theta,
        HessianKind::Ggn,
    )
    .unwrap();
    assert!((refit.precision() - fresh.precision()).amax() < 1e-10 * fresh.precision().amax());
    assert!(post
        .with_hyperparameters(1.0, Likelihood::Categorical)
        .is_err());
}

#[test]
fn posterior_file_roundtrip_is_exact() {
    let ctx = class_ctx(vec![2, 3, 2], 20, 1.0, 3);
    let theta = ParamVector::init(ctx.arch(), 4);
    let post = fit_laplace(&ctx, &theta, HessianKind::Ggn).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("posterior.bin");
    post.save(&p).unwrap();
    assert_eq!(LaplacePosterior::load(&p).unwrap(), post);

    let reg = linear_ctx(2, 20, 0.3, 0.09, 1.0, 2);
    let post = fit_laplace(&reg, &ParamVector::zeros(3), HessianKind::Exact).unwrap();
    post.save(&p).unwrap();
    assert_eq!(LaplacePosterior::load(&p).unwrap(), post);
}

#[test]
fn hvp_and_precision_agree_at_map() {
    let ctx = class_ctx(vec![2, 3, 2], 20, 20.0, 3);
    let theta = ParamVector::init(ctx.arch(), 4);
    let post = fit_laplace(&ctx, &theta, HessianKind::Exact).unwrap();
    let v: Vec<f64> = (0..post.num_params()).map(|i| (i as f64).sin()).collect();
    let hv = hvp(&ctx, &theta, &v).unwrap();
    let dense = post.precision() * DVector::from_column_slice(&v);
    assert!((DVector::from_column_slice(&hv) - dense).amax() < 1e-10);
}

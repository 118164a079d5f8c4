use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use riemann_laplace::binfile::{read_container, write_container};
use riemann_laplace::datasets::{generate, write_splits, DatasetSpec, Task};
use riemann_laplace::laplace::{
    fit_laplace, optimize_hyperparameters, train_map, LaplacePosterior,
};
use riemann_laplace::loss::{Likelihood, LossContext};
use riemann_laplace::metrics::{classification_metrics, regression_metrics};
use riemann_laplace::nn::{MlpArchitecture, ParamVector};
use riemann_laplace::sampling::{
    draw_samples, load_samples, predictive_from_thetas, save_samples, write_sample_manifest,
    PredictFn, SampleKind, SampleMode, SamplingOptions,
};
use serde_json::{json, Map};

use crate::check::{print_table, run_checks, write_csv, CheckStatus};
use crate::config::ExperimentConfig;
use crate::experiment::{run_all, ExperimentData};
use crate::report::write_outputs;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "riemlap",
    version,
    about = "Riemannian Laplace approximations for small networks"
)]
pub struct Cli {
    /// Seed for initialization, sampling and data generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train.csv and test.csv for a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the MAP network of a config; writes map.bin.
    Train { config: PathBuf },
    /// Fit the Laplace posterior around a MAP; writes posterior.bin.
    FitLaplace {
        config: PathBuf,
        #[arg(long)]
        map: PathBuf,
    },
    /// Draw posterior samples; writes samples_<mode>.bin and a CSV manifest.
    Sample {
        config: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        /// vanilla, riem, lin_riem, riem_batched:B or lin_riem_batched:B.
        #[arg(long)]
        mode: String,
        /// Number of samples (defaults to the config's `samples`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score the MAP or a sample set on the test split; writes metrics.json.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Use the linearized network for the predictive.
        #[arg(long)]
        linearized: bool,
    },
    /// Full multi-seed comparison; writes results.csv, summary.csv, manifest.json and figures.
    Experiment { config: PathBuf },
    /// Run the oracle checks; exit code 3 if any fails.
    Check { config: Option<PathBuf> },
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON dataset spec; overrides the flags below.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_parser = ["banana_like", "pinwheel", "gapped_sine"])]
    pub kind: Option<String>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

/// Dispatches a parsed command inside a pool of `cli.threads` workers.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match &cli.command {
        Command::GenData(args) => gen_data(args, cli.seed, &out("."), cli.force),
        Command::Train { config } => train(
            &ExperimentConfig::load(config)?,
            cli.seed,
            &out("."),
            cli.force,
        ),
        Command::FitLaplace { config, map } => {
            fit(&ExperimentConfig::load(config)?, map, &out("."), cli.force)
        }
        Command::Sample {
            config,
            posterior,
            mode,
            n,
        } => {
            let mode: SampleMode = mode
                .parse()
                .map_err(|e: riemann_laplace::Error| CliError::Usage(e.to_string()))?;
            sample(
                &ExperimentConfig::load(config)?,
                posterior,
                mode,
                *n,
                cli.seed,
                &out("."),
                cli.force,
            )
        }
        Command::Evaluate {
            config,
            posterior,
            samples,
            linearized,
        } => evaluate(
            &ExperimentConfig::load(config)?,
            posterior,
            samples.as_deref(),
            *linearized,
            &out("."),
            cli.force,
        ),
        Command::Experiment { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let dir = cli
                .out
                .clone()
                .or_else(|| cfg.outputs.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            experiment(&cfg, &dir, cli.force, cli.threads).map(|_| ())
        }
        Command::Check { config } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::toy(),
            };
            check(&cfg, cli.seed, cli.out.as_deref())
        }
    }
}

fn guard(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "refusing to overwrite {} (pass --force)",
            path.display()
        )));
    }
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub fn gen_data(args: &GenDataArgs, seed: u64, dir: &Path, force: bool) -> Result<(), CliError> {
    let spec = match (&args.spec, &args.kind) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<DatasetSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        (None, Some(kind)) => {
            let mut spec = match kind.as_str() {
                "banana_like" => DatasetSpec::banana_like(200, 1000, seed),
                "pinwheel" => DatasetSpec::pinwheel(seed),
                _ => DatasetSpec::gapped_sine(150, 100, seed),
            };
            spec.n_train = args.n_train.unwrap_or(spec.n_train);
            spec.n_test = args.n_test.unwrap_or(spec.n_test);
            spec
        }
        (None, None) => return Err(CliError::Usage("gen-data needs --spec or --kind".into())),
    };
    spec.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    for name in ["train.csv", "test.csv"] {
        guard(&dir.join(name), force)?;
    }
    prepare_dir(dir)?;
    let (train, test) = generate(&spec)?;
    write_splits(dir, &train, &test)?;
    println!(
        "wrote {} training and {} test rows to {}",
        train.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

fn base_ctx(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<LossContext, CliError> {
    let likelihood = match cfg.task() {
        Task::Classification => Likelihood::Categorical,
        Task::Regression => Likelihood::Gaussian {
            sigma2: cfg.noise_sigma.powi(2),
        },
    };
    Ok(LossContext::new(
        cfg.arch.clone(),
        data.train.clone(),
        likelihood,
        cfg.prior_precision,
    )?)
}

pub fn train(cfg: &ExperimentConfig, seed: u64, dir: &Path, force: bool) -> Result<(), CliError> {
    let (bin, trace) = (dir.join("map.bin"), dir.join("train_trace.csv"));
    guard(&bin, force)?;
    guard(&trace, force)?;
    let data = ExperimentData::generate(cfg)?;
    let ctx = base_ctx(cfg, &data)?;
    let map = train_map(&ctx, seed, &cfg.optimizer)?;
    prepare_dir(dir)?;
    let mut header = Map::new();
    header.insert("kind".into(), json!("map_estimate"));
    header.insert("version".into(), json!(1));
    header.insert("arch".into(), serde_json::to_value(&cfg.arch)?);
    header.insert("seed".into(), json!(seed));
    header.insert("final_loss".into(), json!(map.final_loss));
    header.insert("grad_norm".into(), json!(map.grad_norm));
    header.insert("stationary".into(), json!(map.stationary));
    write_container(&bin, header, &[("theta_star", map.theta_star.as_slice())])?;
    let mut w = csv::Writer::from_path(&trace).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(["epoch", "loss"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for (epoch, loss) in &map.trace {
        w.write_record([epoch.to_string(), format!("{loss:.17e}")])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    println!(
        "MAP loss {:.6e}, |grad| {:.3e}{}",
        map.final_loss,
        map.grad_norm,
        if map.stationary {
            ""
        } else {
            " (not stationary)"
        }
    );
    Ok(())
}

pub fn load_map(path: &Path, arch: &MlpArchitecture) -> Result<ParamVector, CliError> {
    let mut c = read_container(path)?;
    if c.field("kind")? != "map_estimate" {
        return Err(CliError::Runtime(format!(
            "{} is not a MAP file",
            path.display()
        )));
    }
    let stored: MlpArchitecture = serde_json::from_value(c.field("arch")?.clone())?;
    if &stored != arch {
        return Err(CliError::Config(format!(
            "{} was trained for a different architecture",
            path.display()
        )));
    }
    Ok(ParamVector::for_arch(arch, c.take("theta_star")?)?)
}

pub fn fit(
    cfg: &ExperimentConfig,
    map_path: &Path,
    dir: &Path,
    force: bool,
) -> Result<(), CliError> {
    let (bin, hyper) = (dir.join("posterior.bin"), dir.join("hyperparameters.json"));
    guard(&bin, force)?;
    guard(&hyper, force)?;
    let theta = load_map(map_path, &cfg.arch)?;
    let data = ExperimentData::generate(cfg)?;
    let ctx = base_ctx(cfg, &data)?;
    let kind = cfg.laplace.hessian_kind;
    let mut report = json!({ "optimized": cfg.laplace.optimize_prior });
    let ctx = if cfg.laplace.optimize_prior {
        let h = optimize_hyperparameters(&ctx, &theta, kind)?;
        report["alpha"] = json!(h.alpha);
        report["sigma"] = json!(h.sigma);
        report["log_marginal_likelihood"] = json!(h.objective);
        report["alpha_grid"] = json!(h.alpha_grid);
        report["sigma_grid"] = json!(h.sigma_grid);
        ctx.with_prior_precision(h.alpha)
            .with_likelihood(h.likelihood(ctx.likelihood()))?
    } else {
        report["alpha"] = json!(cfg.prior_precision);
        report["sigma"] = json!(ctx.likelihood().sigma2().map(f64::sqrt));
        ctx
    };
    let post = fit_laplace(&ctx, &theta, kind)?;
    prepare_dir(dir)?;
    post.save(&bin)?;
    std::fs::write(&hyper, serde_json::to_string_pretty(&report)?)?;
    println!(
        "posterior: K = {}, alpha = {:.6e}, log det H = {:.6e}",
        post.num_params(),
        post.prior_precision(),
        post.log_det_precision()
    );
    Ok(())
}

fn posterior_ctx(
    cfg: &ExperimentConfig,
    post: &LaplacePosterior,
) -> Result<(ExperimentData, LossContext), CliError> {
    if post.arch() != &cfg.arch {
        return Err(CliError::Config(
            "posterior architecture differs from the config".into(),
        ));
    }
    let data = ExperimentData::generate(cfg)?;
    let ctx = LossContext::new(
        cfg.arch.clone(),
        data.train.clone(),
        post.likelihood(),
        post.prior_precision(),
    )?;
    Ok((data, ctx))
}

pub fn sample(
    cfg: &ExperimentConfig,
    posterior: &Path,
    mode: SampleMode,
    n: Option<usize>,
    seed: u64,
    dir: &Path,
    force: bool,
) -> Result<(), CliError> {
    let tag = mode.to_string().replace(':', "_b");
    let (bin, manifest) = (
        dir.join(format!("samples_{tag}.bin")),
        dir.join(format!("samples_{tag}.csv")),
    );
    guard(&bin, force)?;
    guard(&manifest, force)?;
    let post = LaplacePosterior::load(posterior)?;
    let (_, ctx) = posterior_ctx(cfg, &post)?;
    let opts = SamplingOptions {
        solver: cfg.solver,
        zero_tangent: cfg.zero_tangent,
    };
    let samples = draw_samples(&post, &ctx, mode, n.unwrap_or(cfg.samples), seed, &opts)?;
    prepare_dir(dir)?;
    save_samples(&bin, post.arch(), &samples)?;
    write_sample_manifest(&manifest, &ctx, &samples)?;
    let fallbacks = samples.iter().filter(|s| s.fallback_used).count();
    println!(
        "drew {} {mode} samples ({fallbacks} fallbacks)",
        samples.len()
    );
    Ok(())
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    posterior: &Path,
    samples: Option<&Path>,
    linearized: bool,
    dir: &Path,
    force: bool,
) -> Result<(), CliError> {
    let path = dir.join("metrics.json");
    guard(&path, force)?;
    let post = LaplacePosterior::load(posterior)?;
    let (data, _) = posterior_ctx(cfg, &post)?;
    let (thetas, mode) = match samples {
        None => (vec![post.theta_star().as_slice().to_vec()], None),
        Some(p) => {
            let (arch, s) = load_samples(p)?;
            if &arch != post.arch() {
                return Err(CliError::Config(
                    "samples and posterior architectures differ".into(),
                ));
            }
            let mode = s
                .first()
                .map(|x| x.mode)
                .ok_or_else(|| CliError::Runtime("empty sample file".into()))?;
            (
                s.into_iter().map(|x| x.theta.into_vec()).collect(),
                Some(mode),
            )
        }
    };
    let lin = linearized || mode.is_some_and(linearized_by_default);
    let method = mode.map_or_else(|| "map".to_string(), |m| m.to_string());
    let predict = if lin {
        PredictFn::Linearized(post.theta_star().clone())
    } else {
        PredictFn::Plain
    };
    let refs: Vec<&[f64]> = thetas.iter().map(Vec::as_slice).collect();
    let pred = predictive_from_thetas(post.arch(), &refs, &data.test, post.likelihood(), &predict)?;
    let mut report = match cfg.task() {
        Task::Classification => {
            let labels = data
                .test
                .targets()
                .and_then(|t| t.labels())
                .expect("labels");
            classification_metrics(&pred, labels, cfg.n_bins())?.to_json()
        }
        Task::Regression => serde_json::to_value(regression_metrics(
            &pred,
            data.test.targets().expect("targets"),
        )?)?,
    };
    report["method"] = json!(method);
    report["linearized_predictive"] = json!(lin);
    report["n_samples"] = json!(thetas.len());
    prepare_dir(dir)?;
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Runs every seed and writes the output directory. Fails (after writing
/// partial results) when every seed failed.
pub fn experiment(
    cfg: &ExperimentConfig,
    dir: &Path,
    force: bool,
    threads: usize,
) -> Result<PathBuf, CliError> {
    guard(&dir.join("results.csv"), force)?;
    let start = Instant::now();
    let data = ExperimentData::generate(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let outcomes = run_all(cfg, &data);
    prepare_dir(dir)?;
    let written = write_outputs(
        dir,
        cfg,
        &data,
        &outcomes,
        threads,
        start.elapsed().as_secs_f64(),
    )?;
    let failed = outcomes.iter().filter(|(_, r)| r.is_err()).count();
    println!(
        "{} seeds, {failed} failed; {} result rows in {}",
        outcomes.len(),
        written.rows.len(),
        dir.display()
    );
    if failed == outcomes.len() {
        return Err(CliError::Runtime("every seed failed".into()));
    }
    Ok(dir.join("results.csv"))
}

pub fn check(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let rows = run_checks(cfg, seed)?;
    print_table(&rows, &mut std::io::stdout())?;
    if let Some(dir) = out {
        prepare_dir(dir)?;
        write_csv(&rows, &dir.join("check.csv"))?;
    }
    let failed = rows
        .iter()
        .filter(|r| r.status == CheckStatus::Fail)
        .count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} check(s) failed")));
    }
    Ok(())
}

/// Whether the mode's default predictive is the linearized network.
pub fn linearized_by_default(mode: SampleMode) -> bool {
    mode.kind() == SampleKind::LinRiem
}

//! Result tables, manifest and figures of an experiment directory.

use std::path::{Path, PathBuf};

use riemann_laplace::datasets::Task;
use riemann_laplace::loss::{Likelihood, LossContext};
use riemann_laplace::sampling::write_sample_manifest;
use serde_json::json;

use crate::config::{ExperimentConfig, Method};
use crate::experiment::{ExperimentData, FigureData, Scores, SeedResult};
use crate::{svg, CliError};

pub const RESULT_COLUMNS: [&str; 18] = [
    "seed",
    "method",
    "status",
    "alpha",
    "sigma",
    "map_loss",
    "mean_sample_loss",
    "fallback_rate",
    "accuracy",
    "nll",
    "brier",
    "ece",
    "mce",
    "n_bins",
    "auroc",
    "rmse",
    "band_width_train",
    "band_width_test",
];

const CLASSIFICATION_SUMMARY: [&str; 6] =
    ["accuracy", "nll", "brier", "ece", "mce", "mean_sample_loss"];
const REGRESSION_SUMMARY: [&str; 5] = [
    "nll",
    "rmse",
    "band_width_train",
    "band_width_test",
    "mean_sample_loss",
];

/// One line of `results.csv`; numeric cells are empty when not applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub method: String,
    pub status: String,
    pub values: Vec<Option<f64>>,
}

impl ResultRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        let i = RESULT_COLUMNS.iter().position(|c| *c == column)?;
        self.values[i - 3]
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.seed.to_string(),
            self.method.clone(),
            self.status.clone(),
        ];
        r.extend(self.values.iter().map(|v| v.map(fmt).unwrap_or_default()));
        r
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn result_rows(
    cfg: &ExperimentConfig,
    outcomes: &[(u64, Result<SeedResult, String>)],
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Err(e) => {
                for m in &cfg.modes {
                    rows.push(ResultRow {
                        seed: *seed,
                        method: m.to_string(),
                        status: format!("error: {e}"),
                        values: vec![None; RESULT_COLUMNS.len() - 3],
                    });
                }
            }
            Ok(s) => {
                for (m, r) in &s.methods {
                    let mut v = vec![None; RESULT_COLUMNS.len() - 3];
                    let mut set = |col: &str, x: f64| {
                        let i = RESULT_COLUMNS
                            .iter()
                            .position(|c| *c == col)
                            .expect("known column");
                        v[i - 3] = Some(x);
                    };
                    set("alpha", s.alpha);
                    if let Some(sig) = s.sigma {
                        set("sigma", sig);
                    }
                    set("map_loss", s.map.final_loss);
                    let status = match r {
                        Err(e) => format!("error: {e}"),
                        Ok(r) => {
                            set("mean_sample_loss", r.mean_sample_loss);
                            set("fallback_rate", r.fallback_rate);
                            match &r.scores {
                                Scores::Classification(c) => {
                                    set("accuracy", c.accuracy);
                                    set("nll", c.nll);
                                    set("brier", c.brier);
                                    set("ece", c.ece);
                                    set("mce", c.mce);
                                    set("n_bins", c.n_bins as f64);
                                    if let Some(a) = c.auroc {
                                        set("auroc", a);
                                    }
                                }
                                Scores::Regression(g) => {
                                    set("nll", g.report.nll);
                                    set("rmse", g.report.rmse);
                                    set("band_width_train", g.band_width_train);
                                    set("band_width_test", g.band_width_test);
                                }
                            }
                            "ok".into()
                        }
                    };
                    rows.push(ResultRow {
                        seed: *seed,
                        method: m.to_string(),
                        status,
                        values: v,
                    });
                }
            }
        }
    }
    rows
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(RESULT_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if header != RESULT_COLUMNS {
        return Err(CliError::Runtime(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let parse = |s: &str| -> Result<Option<f64>, CliError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| CliError::Runtime(format!("bad number `{s}`")))
            }
        };
        rows.push(ResultRow {
            seed: rec[0]
                .parse()
                .map_err(|_| CliError::Runtime(format!("bad seed `{}`", &rec[0])))?,
            method: rec[1].to_string(),
            status: rec[2].to_string(),
            values: rec.iter().skip(3).map(parse).collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}

/// Mean and standard error (`std / sqrt(n)`, `n - 1` in the std) of a column.
pub fn mean_and_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt() / n.sqrt()))
}

pub fn summary_columns(task: Task) -> &'static [&'static str] {
    match task {
        Task::Classification => &CLASSIFICATION_SUMMARY,
        Task::Regression => &REGRESSION_SUMMARY,
    }
}

/// One row per mode: `method, n_seeds, <metric>_mean, <metric>_se, ...`.
pub fn write_summary(
    path: &Path,
    cfg: &ExperimentConfig,
    rows: &[ResultRow],
) -> Result<(), CliError> {
    let cols = summary_columns(cfg.task());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["method".to_string(), "n_seeds".to_string()];
    for c in cols {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_se"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for m in &cfg.modes {
        let name = m.to_string();
        let ok: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.method == name && r.is_ok())
            .collect();
        let mut rec = vec![name, ok.len().to_string()];
        for c in cols {
            let xs: Vec<f64> = ok.iter().filter_map(|r| r.get(c)).collect();
            if xs.is_empty() {
                rec.extend([String::new(), String::new()]);
            } else {
                let (mean, se) = mean_and_se(&xs);
                rec.push(fmt(mean));
                rec.push(se.map(fmt).unwrap_or_default());
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn file_tag(m: Method) -> String {
    m.to_string().replace(':', "_b")
}

fn write_figure(
    path: &Path,
    m: Method,
    fig: &FigureData,
    data: &ExperimentData,
) -> Result<(), CliError> {
    let text = match fig {
        FigureData::Confidence { xs, ys, conf } => {
            let (labels, n_classes) = match data.train.targets() {
                Some(riemann_laplace::nn::Targets::Classes { labels, n_classes }) => {
                    (labels.as_slice(), *n_classes)
                }
                _ => (&[][..], 2),
            };
            let pts: Vec<(f64, f64, usize)> = (0..data.train.len())
                .map(|i| {
                    (
                        data.train.row(i)[0],
                        data.train.row(i)[1],
                        labels.get(i).copied().unwrap_or(0),
                    )
                })
                .collect();
            svg::confidence_heatmap(
                &format!("{m}: max predictive probability"),
                xs,
                ys,
                |j, i| conf[(j, i)],
                n_classes,
                &pts,
            )
        }
        FigureData::Band { xs, mean, std } => {
            let ys = match data.train.targets() {
                Some(riemann_laplace::nn::Targets::Values { values, .. }) => values.clone(),
                _ => vec![0.0; data.train.len()],
            };
            let pts: Vec<(f64, f64)> = data.train.inputs().iter().copied().zip(ys).collect();
            svg::predictive_band(
                &format!("{m}: predictive mean +- 2 std"),
                xs,
                mean,
                std,
                &pts,
            )
        }
    };
    std::fs::write(path, text)?;
    Ok(())
}

pub struct WrittenOutputs {
    pub rows: Vec<ResultRow>,
    pub files: Vec<PathBuf>,
    pub figures: Vec<PathBuf>,
}

/// Writes everything under `dir`; every path is returned relative to `dir`.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    outcomes: &[(u64, Result<SeedResult, String>)],
    threads: usize,
    wall_time: f64,
) -> Result<WrittenOutputs, CliError> {
    std::fs::create_dir_all(dir.join("samples"))?;
    let rows = result_rows(cfg, outcomes);
    write_results(&dir.join("results.csv"), &rows)?;
    write_summary(&dir.join("summary.csv"), cfg, &rows)?;
    let mut files = vec![PathBuf::from("results.csv"), PathBuf::from("summary.csv")];
    let mut figures = Vec::new();
    let mut seeds_json = Vec::new();
    for (seed, outcome) in outcomes {
        let s = match outcome {
            Err(e) => {
                seeds_json.push(json!({ "seed": seed, "status": "error", "error": e }));
                continue;
            }
            Ok(s) => s,
        };
        let likelihood = match s.sigma {
            Some(sig) => Likelihood::Gaussian { sigma2: sig * sig },
            None => Likelihood::Categorical,
        };
        let ctx = LossContext::new(cfg.arch.clone(), data.train.clone(), likelihood, s.alpha)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut methods_json = Vec::new();
        for (m, r) in &s.methods {
            match r {
                Ok(r) => {
                    if !r.samples.is_empty() {
                        let rel = PathBuf::from(format!("samples/seed{seed}_{}.csv", file_tag(*m)));
                        write_sample_manifest(&dir.join(&rel), &ctx, &r.samples)
                            .map_err(|e| CliError::Runtime(e.to_string()))?;
                        files.push(rel);
                    }
                    methods_json
                        .push(json!({ "method": m, "status": "ok", "wall_time_s": r.wall_time }));
                }
                Err(e) => methods_json.push(json!({ "method": m, "status": "error", "error": e })),
            }
        }
        for (m, fig) in &s.figures {
            let kind = match fig {
                FigureData::Confidence { .. } => "confidence",
                FigureData::Band { .. } => "band",
            };
            let rel = PathBuf::from(format!("figures/{kind}_{}.svg", file_tag(*m)));
            std::fs::create_dir_all(dir.join("figures"))?;
            write_figure(&dir.join(&rel), *m, fig, data)?;
            figures.push(rel);
        }
        let timings: serde_json::Map<String, serde_json::Value> = s
            .timings
            .iter()
            .map(|(k, v)| (k.clone(), json!(v)))
            .collect();
        seeds_json.push(json!({
            "seed": seed,
            "status": "ok",
            "alpha": s.alpha,
            "sigma": s.sigma,
            "map_loss": s.map.final_loss,
            "map_grad_norm": s.map.grad_norm,
            "map_stationary": s.map.stationary,
            "wall_time_s": timings,
            "methods": methods_json,
        }));
    }
    files.extend(figures.iter().cloned());
    let manifest = json!({
        "config_hash": cfg.hash(),
        "config": cfg,
        "versions": {
            "riemann-laplace": env!("CARGO_PKG_VERSION"),
            "riemlap": env!("CARGO_PKG_VERSION"),
        },
        "threads": threads,
        "wall_time_s": wall_time,
        "seeds": seeds_json,
        "files": files,
        "figures": figures,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(WrittenOutputs {
        rows,
        files,
        figures,
    })
}

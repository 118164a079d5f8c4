use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use super::{PosteriorSample, SampleMode};
use crate::binfile::{read_container, write_container};
use crate::error::{Error, Result};
use crate::geometry::SolverStats;
use crate::loss::{loss_value, LossContext};
use crate::nn::{MlpArchitecture, ParamVector};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    index: usize,
    mode: String,
    fallback_used: bool,
    /// `[accepted, rejected, rhs_evaluations]`.
    stats: Option<[usize; 3]>,
    batch_indices: Option<Vec<usize>>,
}

/// Same container as the posterior file; arrays `theta` and `v` hold the
/// samples back to back (`S * K` values each).
pub fn save_samples(
    path: &Path,
    arch: &MlpArchitecture,
    samples: &[PosteriorSample],
) -> Result<()> {
    let meta: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta {
            index: s.index,
            mode: s.mode.to_string(),
            fallback_used: s.fallback_used,
            stats: s
                .solver_stats
                .map(|st| [st.steps_accepted, st.steps_rejected, st.rhs_evaluations]),
            batch_indices: s.batch_indices.clone(),
        })
        .collect();
    let mut header = Map::new();
    header.insert("kind".into(), json!("posterior_samples"));
    header.insert("version".into(), json!(1));
    header.insert("arch".into(), serde_json::to_value(arch)?);
    header.insert("k".into(), json!(arch.num_params()));
    header.insert("samples".into(), serde_json::to_value(meta)?);
    let theta: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.theta.iter().copied())
        .collect();
    let v: Vec<f64> = samples.iter().flat_map(|s| s.v.iter().copied()).collect();
    write_container(path, header, &[("theta", &theta), ("v", &v)])
}

pub fn load_samples(path: &Path) -> Result<(MlpArchitecture, Vec<PosteriorSample>)> {
    let mut c = read_container(path)?;
    if c.field("kind")? != "posterior_samples" {
        return Err(Error::Format("not a samples file".into()));
    }
    let arch: MlpArchitecture = serde_json::from_value(c.field("arch")?.clone())?;
    let meta: Vec<SampleMeta> = serde_json::from_value(c.field("samples")?.clone())?;
    let k = arch.num_params();
    let theta = c.take("theta")?;
    let v = c.take("v")?;
    if theta.len() != meta.len() * k || v.len() != meta.len() * k {
        return Err(Error::Format(format!(
            "array sizes do not match {} samples of K = {k}",
            meta.len()
        )));
    }
    let samples = meta
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(PosteriorSample {
                index: m.index,
                theta: ParamVector::new(theta[i * k..(i + 1) * k].to_vec()),
                v: ParamVector::new(v[i * k..(i + 1) * k].to_vec()),
                mode: m.mode.parse::<SampleMode>()?,
                solver_stats: m.stats.map(|[a, r, e]| SolverStats {
                    steps_accepted: a,
                    steps_rejected: r,
                    rhs_evaluations: e,
                }),
                batch_indices: m.batch_indices,
                fallback_used: m.fallback_used,
            })
        })
        .collect::<Result<_>>()?;
    Ok((arch, samples))
}

/// CSV with columns `sample_id, mode, v_norm, loss, fallback_used, steps`;
/// `loss` is `L(theta_s)` under `ctx`, `steps` is empty for vanilla samples.
pub fn write_sample_manifest(
    path: &Path,
    ctx: &LossContext,
    samples: &[PosteriorSample],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record([
        "sample_id",
        "mode",
        "v_norm",
        "loss",
        "fallback_used",
        "steps",
    ])
    .map_err(|e| Error::Format(e.to_string()))?;
    for s in samples {
        let loss = loss_value(ctx, &s.theta)?;
        let steps = s
            .solver_stats
            .map(|st| st.steps_accepted.to_string())
            .unwrap_or_default();
        w.write_record([
            s.index.to_string(),
            s.mode.to_string(),
            format!("{:.17e}", s.v.norm()),
            format!("{loss:.17e}"),
            s.fallback_used.to_string(),
            steps,
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

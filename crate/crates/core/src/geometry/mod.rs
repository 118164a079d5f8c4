//! Loss-pullback metric `M(theta) = I + grad L grad L^T`, its geodesics and
//! the exponential map.

pub mod ode;

pub use ode::SolverStats;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{gradient_and_hvp, loss_gradient, loss_value, LossContext, DEFAULT_DENSE_LIMIT};
use crate::nn::{check_len, ParamVector};

/// Largest `K` accepted by [`general_geodesic_rhs`].
pub const GENERAL_RHS_LIMIT: usize = 64;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicState {
    pub c: ParamVector,
    pub c_dot: ParamVector,
}

impl GeodesicState {
    pub fn new(c: ParamVector, c_dot: ParamVector) -> Result<Self> {
        if c.len() != c_dot.len() {
            return Err(Error::DimensionMismatch {
                axis: "velocity",
                expected: c.len(),
                found: c_dot.len(),
            });
        }
        Ok(Self { c, c_dot })
    }

    fn from_flat(y: &[f64]) -> Self {
        let k = y.len() / 2;
        Self {
            c: ParamVector::new(y[..k].to_vec()),
            c_dot: ParamVector::new(y[k..].to_vec()),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut y = self.c.as_slice().to_vec();
        y.extend_from_slice(&self.c_dot);
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    pub t_span: (f64, f64),
    pub max_steps: usize,
    pub initial_step: f64,
    /// Keep every accepted node (off by default; memory is `O(K)` per node).
    pub keep_trajectory: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-3,
            atol: 1e-6,
            t_span: (0.0, 1.0),
            max_steps: 10_000,
            initial_step: 1e-2,
            keep_trajectory: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.rtol) || !pos(self.atol) || !pos(self.initial_step) {
            return Err(Error::InvalidArgument(
                "rtol, atol and initial_step must be positive".into(),
            ));
        }
        if !(self.t_span.0 < self.t_span.1) || !self.t_span.1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid time span {:?}",
                self.t_span
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicSolution {
    /// `c(t_end)`.
    pub endpoint: ParamVector,
    /// `c_dot(t_end)`.
    pub velocity: ParamVector,
    pub trajectory: Option<Vec<(f64, GeodesicState)>>,
    pub stats: SolverStats,
}

/// Dense `M(theta)`; for tests and small `K` only.
pub fn metric(ctx: &LossContext, theta: &[f64]) -> Result<DMatrix<f64>> {
    let k = ctx.num_params();
    if k > DEFAULT_DENSE_LIMIT {
        return Err(Error::DenseLimit {
            k,
            limit: DEFAULT_DENSE_LIMIT,
        });
    }
    let g = DVector::from_vec(loss_gradient(ctx, theta)?.into_vec());
    Ok(DMatrix::identity(k, k) + &g * g.transpose())
}

/// `M u = u + grad <grad, u>`.
pub fn metric_apply(grad: &[f64], u: &[f64]) -> ParamVector {
    let gu = dot(grad, u);
    ParamVector::new(u.iter().zip(grad).map(|(ui, gi)| ui + gi * gu).collect())
}

/// `M^-1 u = u - grad <grad, u> / (1 + |grad|^2)` (Sherman–Morrison).
pub fn metric_inverse_apply(grad: &[f64], u: &[f64]) -> ParamVector {
    let s = dot(grad, u) / (1.0 + dot(grad, grad));
    ParamVector::new(u.iter().zip(grad).map(|(ui, gi)| ui - gi * s).collect())
}

/// Coefficient `beta` with `A = I - beta g g^T`, `A = M^{-1/2}`; zero for a
/// vanishing gradient.
fn normal_coefficient(grad: &[f64]) -> f64 {
    let g2 = dot(grad, grad);
    if g2.sqrt() < 1e-14 {
        return 0.0;
    }
    (1.0 - 1.0 / (1.0 + g2).sqrt()) / g2
}

/// `A = M^{-1/2} = I - (1 - (1 + |g|^2)^{-1/2}) g g^T / |g|^2` at `theta`.
pub fn normal_coordinate_map(ctx: &LossContext, theta: &[f64]) -> Result<DMatrix<f64>> {
    let k = ctx.num_params();
    if k > DEFAULT_DENSE_LIMIT {
        return Err(Error::DenseLimit {
            k,
            limit: DEFAULT_DENSE_LIMIT,
        });
    }
    let g = DVector::from_vec(loss_gradient(ctx, theta)?.into_vec());
    let beta = normal_coefficient(g.as_slice());
    Ok(DMatrix::identity(k, k) - &g * g.transpose() * beta)
}

/// `A v_bar` in `O(K)`, with `A` the normal-coordinate map for gradient `grad`.
pub fn normal_coordinates_apply(grad: &[f64], v_bar: &[f64]) -> ParamVector {
    let s = normal_coefficient(grad) * dot(grad, v_bar);
    ParamVector::new(v_bar.iter().zip(grad).map(|(v, g)| v - g * s).collect())
}

/// Riemannian squared speed `<c_dot, M(c) c_dot>`.
pub fn speed(ctx: &LossContext, c: &[f64], c_dot: &[f64]) -> Result<f64> {
    let g = loss_gradient(ctx, c)?;
    let gc = dot(&g, c_dot);
    Ok(dot(c_dot, c_dot) + gc * gc)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes `(c_dot, c_ddot)` into `dy` for the flat state `y = (c, c_dot)`:
/// `c_ddot = -grad L <c_dot, H c_dot> / (1 + |grad L|^2)`.
fn rhs_into(ctx: &LossContext, y: &[f64], dy: &mut [f64]) -> Result<()> {
    let k = y.len() / 2;
    let (c, c_dot) = y.split_at(k);
    let gh = gradient_and_hvp(ctx, c, c_dot)?;
    let quad = dot(c_dot, &gh.hvp);
    let s = quad / (1.0 + dot(&gh.gradient, &gh.gradient));
    dy[..k].copy_from_slice(c_dot);
    for (d, g) in dy[k..].iter_mut().zip(gh.gradient.iter()) {
        *d = -g * s;
    }
    if dy[k..].iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "geodesic acceleration",
            theta_norm: dot(c, c).sqrt(),
            index: None,
        })
    }
}

fn check_state(ctx: &LossContext, state: &GeodesicState) -> Result<()> {
    check_len(ctx.arch(), &state.c)?;
    check_len(ctx.arch(), &state.c_dot)?;
    if !state
        .c
        .iter()
        .chain(state.c_dot.iter())
        .all(|x| x.is_finite())
    {
        return Err(Error::NonFinite {
            what: "geodesic state",
            theta_norm: state.c.norm(),
            index: None,
        });
    }
    Ok(())
}

/// Time derivative `(c_dot, c_ddot)` of the simplified geodesic system. One
/// gradient and one Hessian-vector product per call.
pub fn geodesic_rhs(ctx: &LossContext, state: &GeodesicState) -> Result<GeodesicState> {
    check_state(ctx, state)?;
    let y = state.to_flat();
    let mut dy = vec![0.0; y.len()];
    rhs_into(ctx, &y, &mut dy)?;
    Ok(GeodesicState::from_flat(&dy))
}

/// Geodesic derivative from the Christoffel symbols of the dense metric,
/// with metric derivatives by central differences (`h = 1e-5`). Test oracle.
///
/// `c_ddot = -1/2 M^-1 w`, `w_l = 2 sum_i c_dot_i (d_i M c_dot)_l - c_dot^T (d_l M) c_dot`.
pub fn general_geodesic_rhs(ctx: &LossContext, state: &GeodesicState) -> Result<GeodesicState> {
    check_state(ctx, state)?;
    let k = ctx.num_params();
    if k > GENERAL_RHS_LIMIT {
        return Err(Error::DenseLimit {
            k,
            limit: GENERAL_RHS_LIMIT,
        });
    }
    let cd = DVector::from_column_slice(&state.c_dot);
    let mut first = DVector::zeros(k);
    let mut second = DVector::zeros(k);
    for i in 0..k {
        let mut p = state.c.clone();
        let mut m = state.c.clone();
        p[i] += FD_STEP;
        m[i] -= FD_STEP;
        let d_m = (metric(ctx, &p)? - metric(ctx, &m)?) / (2.0 * FD_STEP);
        let dmc = &d_m * &cd;
        first += dmc.clone() * cd[i];
        second[i] = cd.dot(&dmc);
    }
    let w = first * 2.0 - second;
    let chol = metric(ctx, &state.c)?
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { hessian: "metric" })?;
    let acc = chol.solve(&w) * -0.5;
    Ok(GeodesicState {
        c: state.c_dot.clone(),
        c_dot: ParamVector::new(acc.as_slice().to_vec()),
    })
}

/// `Exp_theta0(v)`: integrates the geodesic system from `(theta0, v)` over
/// `opts.t_span` with Dormand–Prince 5(4).
///
/// The solver state is the deviation `(c - theta0 - (t - t0) v, c_dot - v)`
/// from the straight line, so a vanishing acceleration reproduces
/// `theta0 + v` bit for bit. Tolerances are applied to the actual state.
pub fn expmap(
    ctx: &LossContext,
    theta0: &[f64],
    v: &[f64],
    opts: &SolverOptions,
) -> Result<GeodesicSolution> {
    opts.validate()?;
    let state = GeodesicState::new(
        ParamVector::new(theta0.to_vec()),
        ParamVector::new(v.to_vec()),
    )?;
    check_state(ctx, &state)?;
    let k = theta0.len();
    let t0 = opts.t_span.0;
    let ode_opts = ode::OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        t0,
        t1: opts.t_span.1,
        max_steps: opts.max_steps,
        initial_step: opts.initial_step,
    };
    let actual = |t: f64, i: usize, d: f64| {
        if i < k {
            theta0[i] + (t - t0) * v[i] + d
        } else {
            v[i - k] + d
        }
    };
    let to_state = |t: f64, dev: &[f64]| {
        let y: Vec<f64> = dev
            .iter()
            .enumerate()
            .map(|(i, &d)| actual(t, i, d))
            .collect();
        GeodesicState::from_flat(&y)
    };
    let mut full = vec![0.0; 2 * k];
    let rhs = |t: f64, dev: &[f64], d_dev: &mut [f64]| {
        for (i, (f, &d)) in full.iter_mut().zip(dev).enumerate() {
            *f = actual(t, i, d);
        }
        rhs_into(ctx, &full, d_dev)?;
        // d/dt of the deviation: c_dot - v, c_ddot
        for i in 0..k {
            d_dev[i] = dev[k + i];
        }
        Ok(())
    };
    let sol = ode::dopri5_shifted(
        rhs,
        actual,
        &vec![0.0; 2 * k],
        &ode_opts,
        opts.keep_trajectory,
    )
    .map_err(|e| match e {
        Error::Solver {
            t,
            steps,
            reason,
            last_state,
        } => Error::Solver {
            t,
            steps,
            reason,
            last_state: to_state(t, &last_state).to_flat(),
        },
        other => other,
    })?;
    let trajectory = sol.nodes.map(|nodes| {
        nodes
            .into_iter()
            .map(|(t, dev)| (t, to_state(t, &dev)))
            .collect()
    });
    let end = to_state(opts.t_span.1, &sol.y);
    Ok(GeodesicSolution {
        endpoint: end.c,
        velocity: end.c_dot,
        trajectory,
        stats: sol.stats,
    })
}

/// Relative drift `max_t |s(t) - s(0)| / s(0)` of the Riemannian speed over
/// the stored nodes; zero for a zero-speed start.
pub fn speed_drift(ctx: &LossContext, trajectory: &[(f64, GeodesicState)]) -> Result<f64> {
    let Some((_, first)) = trajectory.first() else {
        return Ok(0.0);
    };
    let s0 = speed(ctx, &first.c, &first.c_dot)?;
    if s0 == 0.0 {
        return Ok(0.0);
    }
    let mut worst: f64 = 0.0;
    for (_, st) in trajectory {
        worst = worst.max((speed(ctx, &st.c, &st.c_dot)? - s0).abs() / s0);
    }
    Ok(worst)
}

/// CSV with columns `t, dist, speed, loss`, where `dist = |c(t) - base|`.
pub fn write_trajectory_csv(
    path: &Path,
    ctx: &LossContext,
    base: &[f64],
    trajectory: &[(f64, GeodesicState)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "dist", "speed", "loss"])
        .map_err(csv_err)?;
    for (t, st) in trajectory {
        let dist =
            st.c.iter()
                .zip(base)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        let s = speed(ctx, &st.c, &st.c_dot)?;
        let l = loss_value(ctx, &st.c)?;
        w.write_record([t, &dist, &s, &l].map(|x| format!("{x:.17e}")))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

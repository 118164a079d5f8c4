//! Dormand–Prince 5(4) with FSAL and a PI step-size controller.

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights (also the last stage's coefficients).
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Fifth minus fourth order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const BETA: f64 = 0.04;
const EXPO: f64 = 0.2 - 0.75 * BETA;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub t0: f64,
    pub t1: f64,
    pub max_steps: usize,
    pub initial_step: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evaluations: usize,
}

pub struct OdeSolution {
    pub y: Vec<f64>,
    pub stats: SolverStats,
    /// Accepted nodes `(t, y)` including the initial point, when requested.
    pub nodes: Option<Vec<(f64, Vec<f64>)>>,
}

/// Integrates `y' = f(t, y)` from `t0` to `t1`.
pub fn dopri5<F>(f: F, y0: &[f64], opts: &OdeOptions, keep_nodes: bool) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    dopri5_shifted(f, |_, _, y| y, y0, opts, keep_nodes)
}

/// As [`dopri5`] for a state stored relative to a known reference; `actual(t, i, y_i)`
/// recovers component `i` of the true state for the tolerance scale.
pub fn dopri5_shifted<F, G>(
    mut f: F,
    actual: G,
    y0: &[f64],
    opts: &OdeOptions,
    keep_nodes: bool,
) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    G: Fn(f64, usize, f64) -> f64,
{
    let n = y0.len();
    let mut stats = SolverStats::default();
    let mut t = opts.t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut nodes = keep_nodes.then(|| vec![(t, y.clone())]);
    let fail = |t: f64, steps: usize, reason: String, y: &[f64]| Error::Solver {
        t,
        steps,
        reason,
        last_state: y.to_vec(),
    };

    f(t, &y, &mut k[0]).map_err(|e| fail(t, 0, e.to_string(), &y))?;
    stats.rhs_evaluations += 1;

    let mut h = opts.initial_step.min(opts.t1 - opts.t0);
    let mut err_prev: f64 = 1e-4;
    let mut rejected_last = false;

    while t < opts.t1 {
        let steps = stats.steps_accepted + stats.steps_rejected;
        if steps >= opts.max_steps {
            return Err(fail(
                t,
                steps,
                format!("max_steps = {} exceeded", opts.max_steps),
                &y,
            ));
        }
        let last = t + h >= opts.t1;
        if last {
            h = opts.t1 - t;
        }
        if h <= f64::EPSILON * t.abs().max(1.0) {
            return Err(fail(
                t,
                steps,
                format!("step size underflow (h = {h:.3e})"),
                &y,
            ));
        }

        let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
        let mut stage_err = None;
        for (s, a) in rows.iter().enumerate() {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, aj) in a.iter().enumerate() {
                    acc += aj * k[j][i];
                }
                tmp[i] = y[i] + h * acc;
            }
            if let Err(e) = f(t + C[s + 1] * h, &tmp, &mut k[s + 1]) {
                stage_err = Some(e);
                break;
            }
            stats.rhs_evaluations += 1;
        }
        if let Some(e) = stage_err {
            return Err(fail(t, steps, e.to_string(), &y));
        }
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..6 {
                acc += B[j] * k[j][i];
            }
            y_new[i] = y[i] + h * acc;
        }
        f(t + h, &y_new, &mut k[6]).map_err(|e| fail(t, steps, e.to_string(), &y))?;
        stats.rhs_evaluations += 1;

        let mut sq = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for j in 0..7 {
                e += E[j] * k[j][i];
            }
            let mag = actual(t, i, y[i])
                .abs()
                .max(actual(t + h, i, y_new[i]).abs());
            let scale = opts.atol + opts.rtol * mag;
            let r = h * e / scale;
            sq += r * r;
        }
        let err = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
        if !err.is_finite() {
            return Err(fail(t, steps, "non-finite error estimate".into(), &y));
        }

        if err <= 1.0 {
            stats.steps_accepted += 1;
            t = if last { opts.t1 } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            if let Some(nodes) = nodes.as_mut() {
                nodes.push((t, y.clone()));
            }
            let mut fac = if err == 0.0 {
                FAC_MAX
            } else {
                SAFETY * err.powf(-EXPO) * err_prev.powf(BETA)
            };
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if rejected_last {
                fac = fac.min(1.0);
            }
            err_prev = err.max(1e-4);
            rejected_last = false;
            h *= fac;
        } else {
            stats.steps_rejected += 1;
            let fac = (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
            h *= fac;
            rejected_last = true;
        }
    }
    Ok(OdeSolution { y, stats, nodes })
}

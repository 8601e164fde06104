//! Rollout-based computation of the robustness buffer delta(x).
//!
//! A candidate buffer is scored by simulating the filtered closed-loop FoM
//! over a finite horizon and taking the worst value of
//! `hdot + violation_rate * h` along the way (the margin). The buffer is
//! then driven by the proportional update
//! `delta <- max(0, delta - eta * margin)` until the margin enters the
//! acceptance band, the iteration budget runs out, or the buffer exceeds
//! the cap (no finite buffer certifies the rollout).

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::barrier::{h_series, hdot_series, safety_filter, BarrierSpec};
use crate::dynamics::{
    rk4_step_res, state_ok, Controller, FomState, LayeredSystem, RomState, Trajectory,
};
use crate::error::{Error, Result};
use crate::util::sig9;

/// Lower edge of the convergence band on the margin. The upper edge is the
/// configured tolerance; the lower edge is kept near zero so a converged
/// buffer never certifies a rollout with a materially negative margin
/// (a margin floor of -f bounds the barrier dip by -f / violation_rate).
pub const MARGIN_FLOOR: f64 = 1e-7;

/// Rollout and iteration parameters for the buffer optimization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Rollout horizon in seconds.
    pub horizon_t: f64,
    /// Step size of the proportional buffer update.
    pub eta: f64,
    /// Iteration budget.
    pub max_iters: usize,
    /// Integration and filter-evaluation step.
    pub dt: f64,
    /// Upper edge of the margin acceptance band.
    pub tol: f64,
    /// Buffers above this are treated as unsolvable instances.
    pub delta_cap: f64,
    /// Rate used inside the margin (the RoM rate by default; switchable to
    /// the full-order rate).
    pub violation_rate: f64,
}

impl PredictorConfig {
    pub fn with_defaults(violation_rate: f64) -> Self {
        Self {
            horizon_t: 2.0,
            eta: 1.0,
            max_iters: 100,
            dt: 1e-2,
            tol: 1e-3,
            delta_cap: 5.0,
            violation_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon_t", self.horizon_t),
            ("eta", self.eta),
            ("dt", self.dt),
            ("tol", self.tol),
            ("delta_cap", self.delta_cap),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::Config(format!(
                    "predictor {name} must be positive, got {value}"
                )));
            }
        }
        if self.max_iters < 1 {
            return Err(Error::Config("predictor max_iters must be >= 1".into()));
        }
        if !(self.violation_rate >= 0.0) {
            return Err(Error::Config(format!(
                "predictor violation_rate must be >= 0, got {}",
                self.violation_rate
            )));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.horizon_t / self.dt).round() as usize
    }
}

/// Source of the buffer fed to the filter at each visited state.
pub trait DeltaProvider: Sync {
    fn delta(&self, x: &DVector<f64>) -> f64;
}

/// State-independent buffer.
pub struct ConstantDelta(pub f64);

impl DeltaProvider for ConstantDelta {
    fn delta(&self, _x: &DVector<f64>) -> f64 {
        self.0
    }
}

/// Adapter turning a closure into a buffer source.
pub struct FnDelta<F>(pub F);

impl<F> DeltaProvider for FnDelta<F>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    fn delta(&self, x: &DVector<f64>) -> f64 {
        (self.0)(x)
    }
}

/// Integrate the filtered closed loop for `n_steps` of `dt`, evaluating the
/// buffer and the filter at each sample and holding the command between
/// samples. Produces `n_steps + 1` samples.
pub(crate) fn closed_loop_rollout<D>(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    mut delta_at: D,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory>
where
    D: FnMut(&DVector<f64>) -> Result<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("rollout dt must be positive, got {dt}")));
    }
    if x0.len() != sys.fom.dim_state {
        return Err(Error::Shape(format!(
            "rollout start has length {}, FoM state is {}",
            x0.len(),
            sys.fom.dim_state
        )));
    }
    if !state_ok(x0) {
        return Err(Error::Divergence { step: 0, t: 0.0 });
    }
    let mut traj = Trajectory::with_capacity(n_steps + 1);
    let mut x = x0.clone();
    for step in 0..=n_steps {
        let t = step as f64 * dt;
        let delta = delta_at(&x)?;
        let z = RomState(sys.project_state(&x));
        let v = safety_filter(b, &sys.rom, &z, k_nominal, delta)?.v;
        traj.push(t, x.clone(), v.clone(), delta);
        if step < n_steps {
            x = rk4_step_res(&|_, xx: &DVector<f64>| sys.closed_loop_field(xx, &v), t, &x, dt)?;
            if !state_ok(&x) {
                return Err(Error::Divergence {
                    step: step + 1,
                    t: t + dt,
                });
            }
        }
    }
    Ok(traj)
}

/// A scored rollout: the margin is the minimum of
/// `hdot + violation_rate * h` over the samples.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub margin_e: f64,
    pub worst_time: f64,
    pub min_h: f64,
}

/// Roll the filtered closed loop from x0 under the given buffer source and
/// score it.
pub fn rollout_margin(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    x0: &FomState,
    delta_provider: &dyn DeltaProvider,
    cfg: &PredictorConfig,
) -> Result<RolloutResult> {
    cfg.validate()?;
    let traj = closed_loop_rollout(
        sys,
        b,
        k_nominal,
        |x| Ok(delta_provider.delta(x)),
        &x0.0,
        cfg.dt,
        cfg.n_steps(),
    )?;
    score_rollout(sys, b, traj, cfg.violation_rate)
}

pub(crate) fn score_rollout(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    trajectory: Trajectory,
    violation_rate: f64,
) -> Result<RolloutResult> {
    let hs = h_series(b, sys, &trajectory)?;
    let hds = hdot_series(b, sys, &trajectory)?;
    let mut margin_e = f64::INFINITY;
    let mut worst_time = 0.0;
    let mut min_h = f64::INFINITY;
    for k in 0..trajectory.len() {
        let q = hds[k] + violation_rate * hs[k];
        if q < margin_e {
            margin_e = q;
            worst_time = trajectory.times[k];
        }
        min_h = min_h.min(hs[k]);
    }
    Ok(RolloutResult {
        trajectory,
        margin_e,
        worst_time,
        min_h,
    })
}

/// Result of the iterative buffer optimization at a single state.
/// `delta` is `f64::INFINITY` when no buffer below the cap certifies the
/// rollout (the unsolvable region).
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaOutcome {
    pub delta: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_margin: f64,
}

impl DeltaOutcome {
    pub fn is_infeasible(&self) -> bool {
        self.delta.is_infinite()
    }

    fn infeasible(iterations: usize, final_margin: f64) -> Self {
        Self {
            delta: f64::INFINITY,
            iterations,
            converged: false,
            final_margin,
        }
    }
}

fn margin_accepts(e: f64, delta: f64, tol: f64) -> bool {
    (e >= -MARGIN_FLOOR && e <= tol) || (e > tol && delta == 0.0)
}

/// Iterate `delta <- max(0, delta - eta * margin)` from zero, holding the
/// buffer constant within each rollout, until the margin is accepted or the
/// budget runs out. Divergent rollouts and buffers beyond the cap are
/// reported as unsolvable, not as errors.
pub fn optimize_delta(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    x0: &FomState,
    cfg: &PredictorConfig,
) -> Result<DeltaOutcome> {
    cfg.validate()?;
    let mut delta = 0.0f64;
    let mut last_margin = f64::NAN;
    for iter in 1..=cfg.max_iters {
        let margin = match rollout_margin(sys, b, k_nominal, x0, &ConstantDelta(delta), cfg) {
            Ok(r) => r.margin_e,
            Err(Error::Divergence { .. }) => {
                return Ok(DeltaOutcome::infeasible(iter, f64::NEG_INFINITY))
            }
            Err(e) => return Err(e),
        };
        last_margin = margin;
        if margin_accepts(margin, delta, cfg.tol) {
            return Ok(DeltaOutcome {
                delta,
                iterations: iter,
                converged: true,
                final_margin: margin,
            });
        }
        delta = (delta - cfg.eta * margin).max(0.0);
        if delta > cfg.delta_cap {
            return Ok(DeltaOutcome::infeasible(iter, margin));
        }
    }
    Ok(DeltaOutcome {
        delta,
        iterations: cfg.max_iters,
        converged: false,
        final_margin: last_margin,
    })
}

/// One proportional update of a running buffer estimate at the current
/// state, followed by the filter solve with the updated buffer. The
/// estimate is clamped to `[0, delta_cap]`.
pub fn realtime_step(
    delta_estimate: f64,
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    x: &FomState,
    cfg: &PredictorConfig,
) -> Result<(DVector<f64>, f64)> {
    cfg.validate()?;
    if !(delta_estimate >= 0.0) {
        return Err(Error::Config(format!(
            "delta estimate must be >= 0, got {delta_estimate}"
        )));
    }
    let r = rollout_margin(sys, b, k_nominal, x, &ConstantDelta(delta_estimate), cfg)?;
    let new_delta = (delta_estimate - cfg.eta * r.margin_e)
        .max(0.0)
        .min(cfg.delta_cap);
    let z = RomState(sys.project_state(&x.0));
    let v = safety_filter(b, &sys.rom, &z, k_nominal, new_delta)?.v;
    Ok((v, new_delta))
}

/// One axis of a rectangular state grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// Rectangular grid over the full-order state space, indexed row-major
/// with the last axis fastest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<GridAxis>,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("grid needs at least one axis".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.count == 0 {
                return Err(Error::Config(format!("grid axis {i} has zero points")));
            }
            if !(a.min.is_finite() && a.max.is_finite() && a.max >= a.min) {
                return Err(Error::Config(format!(
                    "grid axis {i} has invalid range [{}, {}]",
                    a.min, a.max
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, index: usize) -> DVector<f64> {
        let mut coords = vec![0.0; self.axes.len()];
        let mut rem = index;
        for (d, axis) in self.axes.iter().enumerate().rev() {
            let k = rem % axis.count;
            rem /= axis.count;
            coords[d] = if axis.count == 1 {
                axis.min
            } else {
                axis.min + (axis.max - axis.min) * k as f64 / (axis.count - 1) as f64
            };
        }
        DVector::from_vec(coords)
    }
}

/// Run the buffer optimization at every grid node, in parallel, with
/// results ordered by node index regardless of scheduling.
pub fn tabulate_delta(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    grid: &Grid,
    cfg: &PredictorConfig,
) -> Result<Vec<DeltaOutcome>> {
    grid.validate()?;
    cfg.validate()?;
    (0..grid.len())
        .into_par_iter()
        .map(|i| optimize_delta(sys, b, k_nominal, &FomState(grid.node(i)), cfg))
        .collect()
}

/// CSV export `x_0..,delta,iterations,converged,final_margin` with `inf`
/// marking unsolvable nodes.
pub fn write_delta_table_csv<W: Write>(
    grid: &Grid,
    outcomes: &[DeltaOutcome],
    w: &mut W,
) -> Result<()> {
    if outcomes.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} outcomes for a {}-node grid",
            outcomes.len(),
            grid.len()
        )));
    }
    let mut header = String::new();
    for d in 0..grid.axes.len() {
        header.push_str(&format!("x_{d},"));
    }
    header.push_str("delta,iterations,converged,final_margin");
    writeln!(w, "{header}")?;
    for (i, out) in outcomes.iter().enumerate() {
        let node = grid.node(i);
        let mut row = String::new();
        for c in node.iter() {
            row.push_str(&sig9(*c));
            row.push(',');
        }
        row.push_str(&format!(
            "{},{},{},{}",
            sig9(out.delta),
            out.iterations,
            out.converged,
            sig9(out.final_margin)
        ));
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Buffer policy applied by the closed-loop simulator.
pub enum FilterPolicy<'a> {
    /// Plain RoM filter, no buffer.
    Nominal,
    /// Constant buffer.
    ConstantDelta(f64),
    /// Re-solve the buffer optimization to convergence at every control
    /// instant (receding horizon). Unsolvable instants abort the run.
    Optimized(PredictorConfig),
    /// One proportional update per control instant from a running estimate.
    Realtime(PredictorConfig),
    /// State-dependent buffer, e.g. a trained network.
    Provider(&'a dyn DeltaProvider),
}

/// Simulate the filtered closed loop from x0 for `duration` seconds at
/// control step `dt` under the given buffer policy.
pub fn simulate_policy(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    policy: &FilterPolicy,
    x0: &FomState,
    dt: f64,
    duration: f64,
) -> Result<Trajectory> {
    if !(duration >= 0.0) {
        return Err(Error::Config(format!(
            "simulation duration must be >= 0, got {duration}"
        )));
    }
    let n_steps = (duration / dt).round() as usize;
    match policy {
        FilterPolicy::Nominal => {
            closed_loop_rollout(sys, b, k_nominal, |_| Ok(0.0), &x0.0, dt, n_steps)
        }
        FilterPolicy::ConstantDelta(d) => {
            if !(*d >= 0.0) {
                return Err(Error::Config(format!("constant delta must be >= 0, got {d}")));
            }
            closed_loop_rollout(sys, b, k_nominal, |_| Ok(*d), &x0.0, dt, n_steps)
        }
        FilterPolicy::Provider(p) => {
            closed_loop_rollout(sys, b, k_nominal, |x| Ok(p.delta(x)), &x0.0, dt, n_steps)
        }
        FilterPolicy::Optimized(cfg) => closed_loop_rollout(
            sys,
            b,
            k_nominal,
            |x| {
                let out = optimize_delta(sys, b, k_nominal, &FomState(x.clone()), cfg)?;
                if out.is_infeasible() {
                    Err(Error::DeltaInfeasible)
                } else {
                    Ok(out.delta)
                }
            },
            &x0.0,
            dt,
            n_steps,
        ),
        FilterPolicy::Realtime(cfg) => {
            let mut estimate = 0.0f64;
            closed_loop_rollout(
                sys,
                b,
                k_nominal,
                |x| {
                    let r =
                        rollout_margin(sys, b, k_nominal, &FomState(x.clone()), &ConstantDelta(estimate), cfg)?;
                    estimate = (estimate - cfg.eta * r.margin_e)
                        .max(0.0)
                        .min(cfg.delta_cap);
                    Ok(estimate)
                },
                &x0.0,
                dt,
                n_steps,
            )
        }
    }
}

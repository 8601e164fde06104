//! Numerical estimation of tracking-function constants and verification of
//! the layered safety conditions along trajectories.
//!
//! The tracking function is V(x) = rho ||project_input(x) - v_filter(x)||
//! with rho = 1: the norm of the velocity-tracking error against the
//! filtered command. Rolled trajectories give (V, Vdot) scatter; the
//! tightest envelope `Vdot <= -lambda V + mu` is fitted from its upper
//! hull. The constants feed the certified safe sets
//! `H(x) = (alpha_x - alpha) h + [delta0] - (C_h / rho) V >= 0` and the
//! buffer floor `delta0 >= C_h mu / (alpha_x rho)`.

use serde::{Deserialize, Serialize};

use crate::barrier::{h_series, safety_filter, BarrierSpec};
use crate::dynamics::{Controller, FomState, LayeredSystem, RomState, Trajectory};
use crate::error::{Error, Result};
use crate::predictor::{closed_loop_rollout, PredictorConfig};

/// Tag of the only implemented tracking function.
pub const TRACKING_FN_PSI_ERROR_NORM: &str = "psi-error-norm";

/// Estimated tracking constants: decay rate lambda, steady-state offset mu,
/// error scaling rho, and the Lie-derivative bound C_h.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingCertificate {
    pub rho: f64,
    pub lambda: f64,
    pub mu: f64,
    pub c_h: f64,
    pub tracking_fn: String,
}

impl TrackingCertificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("certificate JSON: {e}")))
    }
}

/// Estimation parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateConfig {
    /// Simulated length of each estimation trajectory, seconds.
    pub duration: f64,
    /// Integration and filter step.
    pub dt: f64,
    /// Samples with V below this are excluded from the envelope fit
    /// (V is nondifferentiable at zero error).
    pub v_floor: f64,
    /// Allowed envelope slack when validating the fit.
    pub envelope_slack: f64,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self {
            duration: 5.0,
            dt: 1e-2,
            v_floor: 1e-8,
            envelope_slack: 1e-6,
        }
    }
}

/// V(x) with rho = 1: the input-projection error against the filtered
/// command computed with the given buffer.
pub fn tracking_error(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    delta: f64,
    x: &FomState,
) -> Result<f64> {
    let z = RomState(sys.project_state(&x.0));
    let v = safety_filter(b, &sys.rom, &z, k_nominal, delta)?.v;
    Ok((sys.project_input(&x.0) - v).norm())
}

/// Max of ||Lgh(project_state(x))|| over samples in the safe set.
pub fn estimate_ch(b: &BarrierSpec, sys: &LayeredSystem, samples: &[FomState]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("estimate_ch: empty sample set".into()));
    }
    let mut c_h = f64::NEG_INFINITY;
    let mut used = 0usize;
    for x in samples {
        let z = sys.project_state(&x.0);
        if b.h(&z) < 0.0 {
            continue;
        }
        let (_, lgh) = crate::barrier::lie_derivatives(b, &sys.rom, &RomState(z))?;
        c_h = c_h.max(lgh.norm());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Precondition(
            "estimate_ch: no samples inside the safe set".into(),
        ));
    }
    Ok(c_h)
}

/// Least-squares line through the upper convex hull of (V, Vdot) points.
/// Returns (slope, intercept).
fn upper_envelope_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // Andrew monotone chain, upper hull.
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in &sorted {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let n = hull.len() as f64;
    let sx: f64 = hull.iter().map(|p| p.0).sum();
    let sy: f64 = hull.iter().map(|p| p.1).sum();
    let sxx: f64 = hull.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = hull.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Some((slope, intercept))
}

/// Roll trajectories from the given starts under the constant-buffer filter,
/// difference V along them, and fit the tightest (lambda, mu) with
/// `Vdot <= -lambda V + mu` holding at every retained sample. Degenerate
/// data (V identically zero) yields lambda = +inf, mu = 0.
pub fn estimate_tracking_constants(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    delta0: f64,
    x0_samples: &[FomState],
    cfg: &CertificateConfig,
) -> Result<TrackingCertificate> {
    if x0_samples.is_empty() {
        return Err(Error::Precondition(
            "estimate_tracking_constants: empty start set".into(),
        ));
    }
    if !(cfg.duration > 0.0 && cfg.dt > 0.0) {
        return Err(Error::Config("certificate duration and dt must be positive".into()));
    }
    let n_steps = (cfg.duration / cfg.dt).round().max(2.0) as usize;
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut c_h = f64::NEG_INFINITY;
    for x0 in x0_samples {
        let traj = closed_loop_rollout(
            sys,
            b,
            k_nominal,
            |_| Ok(delta0),
            &x0.0,
            cfg.dt,
            n_steps,
        )?;
        // V from the recorded filtered inputs.
        let v_series: Vec<f64> = traj
            .states
            .iter()
            .zip(&traj.inputs)
            .map(|(x, v)| (sys.project_input(x) - v).norm())
            .collect();
        for k in 1..traj.len() - 1 {
            let v = v_series[k];
            let vdot = (v_series[k + 1] - v_series[k - 1]) / (2.0 * cfg.dt);
            if v >= cfg.v_floor {
                points.push((v, vdot));
            }
        }
        for x in &traj.states {
            let z = sys.project_state(x);
            if b.h(&z) >= 0.0 {
                let (_, lgh) =
                    crate::barrier::lie_derivatives(b, &sys.rom, &RomState(z))?;
                c_h = c_h.max(lgh.norm());
            }
        }
    }
    if c_h == f64::NEG_INFINITY {
        return Err(Error::Precondition(
            "estimate_tracking_constants: no safe samples for the C_h bound".into(),
        ));
    }
    if points.is_empty() {
        // Exact tracking throughout: any decay rate works, no offset.
        return Ok(TrackingCertificate {
            rho: 1.0,
            lambda: f64::INFINITY,
            mu: 0.0,
            c_h,
            tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
        });
    }
    let (lambda, fitted_intercept) = match upper_envelope_line(&points) {
        Some((slope, intercept)) => ((-slope).max(1e-9), intercept),
        None => (1e-9, 0.0),
    };
    // Inflate the intercept so the envelope covers every retained sample.
    let cover = points
        .iter()
        .map(|(v, vdot)| vdot + lambda * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mu = fitted_intercept.max(cover).max(0.0);
    Ok(TrackingCertificate {
        rho: 1.0,
        lambda,
        mu,
        c_h,
        tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
    })
}

/// Smallest constant buffer the certificate supports: C_h mu / (alpha_x rho).
pub fn delta0_lower_bound(cert: &TrackingCertificate, alpha_x: f64) -> f64 {
    cert.c_h * cert.mu / (alpha_x * cert.rho)
}

/// Membership and margin of the exponential-tracking safe set:
/// H(x) = (alpha_x - alpha) h(z) - (C_h / rho) V(x) >= 0.
pub fn in_safe_set_s(
    x: &FomState,
    cert: &TrackingCertificate,
    b: &BarrierSpec,
    sys: &LayeredSystem,
    k_nominal: &Controller,
) -> Result<(bool, f64)> {
    let z = sys.project_state(&x.0);
    let v = tracking_error(sys, b, k_nominal, 0.0, x)?;
    let margin = (b.alpha_x - b.alpha) * b.h(&z) - cert.c_h / cert.rho * v;
    Ok((margin >= 0.0, margin))
}

/// Membership and margin of the buffered safe set: both
/// `H_delta0(x) = (alpha_x - alpha) h(z) + delta0 - (C_h / rho) V(x) >= 0`
/// and h(z) >= 0 must hold. The margin reported is H_delta0.
pub fn in_safe_set_s_delta0(
    x: &FomState,
    delta0: f64,
    cert: &TrackingCertificate,
    b: &BarrierSpec,
    sys: &LayeredSystem,
    k_nominal: &Controller,
) -> Result<(bool, f64)> {
    if !(delta0 >= 0.0) {
        return Err(Error::Config(format!("delta0 must be >= 0, got {delta0}")));
    }
    let z = sys.project_state(&x.0);
    let h = b.h(&z);
    let v = tracking_error(sys, b, k_nominal, delta0, x)?;
    let margin = (b.alpha_x - b.alpha) * h + delta0 - cert.c_h / cert.rho * v;
    Ok((margin >= 0.0 && h >= 0.0, margin))
}

/// Verdict of checking the buffered barrier condition along a trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct CertificateReport {
    /// lambda >= alpha_x holds for the supplied certificate.
    pub lambda_ok: bool,
    /// delta0 >= C_h mu / (alpha_x rho) holds.
    pub delta0_ok: bool,
    pub hypotheses_hold: bool,
    /// Worst value of Hdot + alpha H stayed above -tol.
    pub barrier_condition_ok: bool,
    /// min h along the trajectory stayed above -1e-6.
    pub stays_safe: bool,
    pub worst_residual: f64,
    pub worst_residual_time: f64,
    pub worst_residual_state: Vec<f64>,
    pub min_h: f64,
    pub min_h_time: f64,
    pub min_h_state: Vec<f64>,
    pub residuals: Vec<f64>,
    pub delta0: f64,
    pub delta0_bound: f64,
    pub residual_tol: f64,
}

impl CertificateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Finite-difference `H_delta0` along a densely sampled trajectory and
/// check `Hdot_delta0 + alpha H_delta0 >= -tol` at interior samples,
/// together with the certificate hypotheses. V is computed from the
/// recorded inputs.
pub fn verify_barrier_condition(
    traj: &Trajectory,
    sys: &LayeredSystem,
    b: &BarrierSpec,
    cert: &TrackingCertificate,
    delta0: f64,
    residual_tol: f64,
) -> Result<CertificateReport> {
    if traj.len() < 3 {
        return Err(Error::Precondition(
            "verify_barrier_condition: need at least 3 samples".into(),
        ));
    }
    let dt = traj.dt();
    if dt > 1e-2 + 1e-12 {
        return Err(Error::Precondition(format!(
            "verify_barrier_condition: trajectory must be sampled at dt <= 1e-2, got {dt}"
        )));
    }
    let hs = h_series(b, sys, traj)?;
    let big_h: Vec<f64> = traj
        .states
        .iter()
        .zip(&traj.inputs)
        .zip(&hs)
        .map(|((x, v), h)| {
            let err = (sys.project_input(x) - v).norm();
            (b.alpha_x - b.alpha) * h + delta0 - cert.c_h / cert.rho * err
        })
        .collect();
    let mut residuals = Vec::with_capacity(traj.len().saturating_sub(2));
    let mut worst = (f64::INFINITY, 0.0f64, 0usize);
    for k in 1..traj.len() - 1 {
        let hdot = (big_h[k + 1] - big_h[k - 1]) / (2.0 * dt);
        let r = hdot + b.alpha * big_h[k];
        residuals.push(r);
        if r < worst.0 {
            worst = (r, traj.times[k], k);
        }
    }
    let (min_h, min_h_idx) = hs
        .iter()
        .enumerate()
        .fold((f64::INFINITY, 0usize), |acc, (i, h)| {
            if *h < acc.0 {
                (*h, i)
            } else {
                acc
            }
        });
    let delta0_bound = delta0_lower_bound(cert, b.alpha_x);
    let lambda_ok = cert.lambda >= b.alpha_x;
    let delta0_ok = delta0 >= delta0_bound;
    Ok(CertificateReport {
        lambda_ok,
        delta0_ok,
        hypotheses_hold: lambda_ok && delta0_ok,
        barrier_condition_ok: worst.0 >= -residual_tol,
        stays_safe: min_h >= -1e-6,
        worst_residual: worst.0,
        worst_residual_time: worst.1,
        worst_residual_state: traj.states[worst.2].iter().cloned().collect(),
        min_h,
        min_h_time: traj.times[min_h_idx],
        min_h_state: traj.states[min_h_idx].iter().cloned().collect(),
        residuals,
        delta0,
        delta0_bound,
        residual_tol,
    })
}

/// Convenience: simulate under a constant buffer and verify the result.
pub fn simulate_and_verify(
    sys: &LayeredSystem,
    b: &BarrierSpec,
    k_nominal: &Controller,
    cert: &TrackingCertificate,
    delta0: f64,
    x0: &FomState,
    duration: f64,
    dt: f64,
    residual_tol: f64,
) -> Result<(Trajectory, CertificateReport)> {
    let cfg = PredictorConfig {
        horizon_t: duration.max(dt),
        dt,
        ..PredictorConfig::with_defaults(b.alpha)
    };
    let n_steps = (cfg.horizon_t / cfg.dt).round() as usize;
    let traj = closed_loop_rollout(sys, b, k_nominal, |_| Ok(delta0), &x0.0, dt, n_steps)?;
    let report = verify_barrier_condition(&traj, sys, b, cert, delta0, residual_tol)?;
    Ok((traj, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{halfspace_barrier, hdot_fom, obstacle_barrier, ObstacleField};
    use crate::dynamics::{constant_controller, make_double_integrator};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn starts(list: &[[f64; 2]]) -> Vec<FomState> {
        list.iter().map(|s| FomState::from_slice(s)).collect()
    }

    #[test]
    fn ch_is_one_for_halfspace_and_obstacles() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let samples = starts(&[[1.0, 0.0], [2.0, -1.0], [0.5, 3.0]]);
        assert_relative_eq!(estimate_ch(&b, &sys, &samples).unwrap(), 1.0);

        let sys2 = make_double_integrator(2, 2.0).unwrap();
        let field =
            ObstacleField::new(vec![DVector::from_row_slice(&[0.0, 0.0])], vec![1.0]).unwrap();
        let b2 = obstacle_barrier(field, 1.0, 2.0).unwrap();
        let samples2 = vec![
            FomState::from_slice(&[2.0, 0.0, 0.0, 0.0]),
            FomState::from_slice(&[0.0, 3.0, 1.0, -1.0]),
        ];
        assert_relative_eq!(estimate_ch(&b2, &sys2, &samples2).unwrap(), 1.0);
    }

    #[test]
    fn ch_rejects_empty_samples() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        assert!(matches!(
            estimate_ch(&b, &sys, &[]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn exponential_tracking_recovers_gain_and_zero_offset() {
        // Constant command far from the boundary: the filter passes it
        // through, V decays exactly at rate k_v.
        let k_v = 2.0;
        let sys = make_double_integrator(1, k_v).unwrap();
        let b = halfspace_barrier(1.0, 3.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[0.5]));
        let x0s = starts(&[[50.0, -1.0], [60.0, 2.0], [55.0, 0.9]]);
        let cfg = CertificateConfig {
            duration: 3.0,
            ..CertificateConfig::default()
        };
        let cert = estimate_tracking_constants(&sys, &b, &k, 0.0, &x0s, &cfg).unwrap();
        assert!(
            (cert.lambda - k_v).abs() / k_v < 0.02,
            "lambda = {}",
            cert.lambda
        );
        assert!(cert.mu.abs() < 1e-3, "mu = {}", cert.mu);
        assert_relative_eq!(cert.c_h, 1.0);
        assert_eq!(cert.rho, 1.0);
    }

    #[test]
    fn zero_error_data_is_degenerate() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[0.5]));
        // Start with zero tracking error against the constant command.
        let x0s = starts(&[[50.0, 0.5]]);
        let cert = estimate_tracking_constants(
            &sys,
            &b,
            &k,
            0.0,
            &x0s,
            &CertificateConfig::default(),
        )
        .unwrap();
        assert!(cert.lambda.is_infinite());
        assert_eq!(cert.mu, 0.0);
    }

    #[test]
    fn slewing_reference_forces_positive_mu() {
        // Near the boundary the filter output -alpha z + delta slews with
        // the state, leaving a persistent tracking offset.
        let sys = make_double_integrator(1, 3.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let x0s = starts(&[[1.0, -1.0], [2.0, -0.5], [0.5, -0.8], [1.5, 0.4]]);
        let cert = estimate_tracking_constants(
            &sys,
            &b,
            &k,
            0.0,
            &x0s,
            &CertificateConfig::default(),
        )
        .unwrap();
        assert!(cert.mu > 0.0, "mu = {}", cert.mu);
        // Envelope holds on held-out trajectories at >= 99% of samples.
        let held_out = starts(&[[1.2, -0.7], [0.8, -0.3]]);
        let mut total = 0usize;
        let mut ok = 0usize;
        for x0 in &held_out {
            let traj = closed_loop_rollout(&sys, &b, &k, |_| Ok(0.0), &x0.0, 1e-2, 500).unwrap();
            let v: Vec<f64> = traj
                .states
                .iter()
                .zip(&traj.inputs)
                .map(|(x, vv)| (sys.project_input(x) - vv).norm())
                .collect();
            for k_ in 1..traj.len() - 1 {
                let vdot = (v[k_ + 1] - v[k_ - 1]) / (2.0 * 1e-2);
                total += 1;
                if vdot <= -cert.lambda * v[k_] + cert.mu + 1e-6 {
                    ok += 1;
                }
            }
        }
        assert!(
            ok as f64 / total as f64 >= 0.99,
            "envelope held at {ok}/{total}"
        );
    }

    #[test]
    fn delta0_bound_formula() {
        let cert = TrackingCertificate {
            rho: 1.0,
            lambda: 3.0,
            mu: 0.5,
            c_h: 1.0,
            tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
        };
        assert_relative_eq!(delta0_lower_bound(&cert, 2.0), 0.25);
        let zero_mu = TrackingCertificate { mu: 0.0, ..cert.clone() };
        assert_eq!(delta0_lower_bound(&zero_mu, 2.0), 0.0);
        let scaled = TrackingCertificate { rho: 2.0, ..cert };
        assert_relative_eq!(delta0_lower_bound(&scaled, 2.0), 0.125);
    }

    #[test]
    fn safe_set_membership_cases() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let cert = TrackingCertificate {
            rho: 1.0,
            lambda: 2.0,
            mu: 0.0,
            c_h: 1.0,
            tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
        };
        // Interior state with matching velocity: V = |x2 - k_sf|, pick x2
        // equal to the passed-through command.
        let x = FomState::from_slice(&[2.0, -0.5]);
        let (member, margin) = in_safe_set_s(&x, &cert, &b, &sys, &k).unwrap();
        assert!(member);
        assert_relative_eq!(margin, 2.0); // (2-1)*2 - 0
        // Boundary h = 0 with tracking error: not a member.
        let xb = FomState::from_slice(&[0.0, -0.5]);
        let (member_b, margin_b) = in_safe_set_s(&xb, &cert, &b, &sys, &k).unwrap();
        assert!(!member_b);
        assert!(margin_b < 0.0);
    }

    #[test]
    fn buffered_set_grows_with_delta0() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let cert = TrackingCertificate {
            rho: 1.0,
            lambda: 2.0,
            mu: 0.0,
            c_h: 1.0,
            tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
        };
        // delta0 = 0 reduces to S intersected with the safe set.
        let x = FomState::from_slice(&[2.0, -0.5]);
        let (m0, h0) = in_safe_set_s_delta0(&x, 0.0, &cert, &b, &sys, &k).unwrap();
        let (ms, hs) = in_safe_set_s(&x, &cert, &b, &sys, &k).unwrap();
        assert_eq!(m0, ms);
        assert_relative_eq!(h0, hs);
        // Membership is monotone in delta0 for states already in the safe
        // set; note the filter command itself shifts with delta0, but on
        // this scalar example the margin gain dominates.
        let probe = FomState::from_slice(&[1.0, -1.4]);
        let mut last_margin = f64::NEG_INFINITY;
        for d in [0.0, 0.5, 1.0, 2.0] {
            let (_, m) = in_safe_set_s_delta0(&probe, d, &cert, &b, &sys, &k).unwrap();
            assert!(m >= last_margin - 1e-12, "margin shrank at delta0 = {d}");
            last_margin = m;
        }
    }

    #[test]
    fn safe_set_margin_matches_finite_difference_of_h_part() {
        // Along a trajectory, FD of the h-dependent part of the margin
        // matches the analytic barrier rate.
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let v = DVector::from_row_slice(&[0.2]);
        let dt = 1e-3;
        let traj = crate::dynamics::integrate(
            |_, x: &DVector<f64>| sys.closed_loop_field(x, &v).unwrap(),
            &DVector::from_row_slice(&[1.0, -0.6]),
            dt,
            400,
        )
        .unwrap();
        for k in (1..traj.len() - 1).step_by(37) {
            let x = FomState(traj.states[k].clone());
            let xdot = sys.closed_loop_field(&x.0, &v).unwrap();
            let analytic = (b.alpha_x - b.alpha) * hdot_fom(&b, &sys, &x, &xdot).unwrap();
            let hp = b.h(&sys.project_state(&traj.states[k + 1]));
            let hm = b.h(&sys.project_state(&traj.states[k - 1]));
            let fd = (b.alpha_x - b.alpha) * (hp - hm) / (2.0 * dt);
            assert!((analytic - fd).abs() < 1e-4);
        }
    }

    #[test]
    fn verify_requires_dense_sampling() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let cert = TrackingCertificate {
            rho: 1.0,
            lambda: 3.0,
            mu: 0.0,
            c_h: 1.0,
            tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
        };
        let traj = closed_loop_rollout(
            &sys,
            &b,
            &k,
            |_| Ok(0.0),
            &DVector::from_row_slice(&[2.0, 0.0]),
            0.05,
            100,
        )
        .unwrap();
        assert!(matches!(
            verify_barrier_condition(&traj, &sys, &b, &cert, 0.0, 1e-3),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn verify_passes_at_interior_equilibrium() {
        // k(z) = 0 at a comfortably safe state: nothing moves, H is
        // constant, the condition holds trivially.
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[0.0]));
        let cert = TrackingCertificate {
            rho: 1.0,
            lambda: 2.0,
            mu: 0.0,
            c_h: 1.0,
            tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
        };
        let traj = closed_loop_rollout(
            &sys,
            &b,
            &k,
            |_| Ok(0.0),
            &DVector::from_row_slice(&[3.0, 0.0]),
            1e-2,
            300,
        )
        .unwrap();
        let report = verify_barrier_condition(&traj, &sys, &b, &cert, 0.0, 1e-3).unwrap();
        assert!(report.barrier_condition_ok, "worst {}", report.worst_residual);
        assert!(report.stays_safe);
        assert!(report.hypotheses_hold);
    }

    #[test]
    fn verify_passes_under_satisfied_hypotheses() {
        // Fast tracking (lambda >= alpha_x) with the buffer at its floor:
        // the barrier condition holds along the whole trajectory.
        let sys = make_double_integrator(1, 3.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let starts = starts(&[[2.0, -1.0], [1.0, -0.5], [0.5, -1.5], [3.0, 0.5]]);
        let cfg = CertificateConfig::default();
        let cert0 = estimate_tracking_constants(&sys, &b, &k, 0.0, &starts, &cfg).unwrap();
        let d0 = delta0_lower_bound(&cert0, b.alpha_x);
        let cert = estimate_tracking_constants(&sys, &b, &k, d0, &starts, &cfg).unwrap();
        let delta0 = delta0_lower_bound(&cert, b.alpha_x);
        assert!(cert.lambda >= b.alpha_x, "lambda = {}", cert.lambda);
        let (_, report) = simulate_and_verify(
            &sys,
            &b,
            &k,
            &cert,
            delta0,
            &FomState::from_slice(&[2.0, 0.0]),
            10.0,
            1e-2,
            1e-3,
        )
        .unwrap();
        assert!(report.hypotheses_hold);
        assert!(report.barrier_condition_ok, "worst {}", report.worst_residual);
        assert!(report.stays_safe, "min h {}", report.min_h);
    }

    #[test]
    fn verify_flags_failed_hypotheses_and_finds_witness() {
        // Slow tracking (lambda < alpha_x) without a buffer: the report
        // flags the failed hypothesis and the trajectory leaves the safe
        // set even though it starts inside S.
        let sys = make_double_integrator(1, 1.5).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let starts = starts(&[[2.0, -1.0], [1.0, -0.5], [0.5, -1.5], [3.0, 0.5]]);
        let cert =
            estimate_tracking_constants(&sys, &b, &k, 0.0, &starts, &CertificateConfig::default())
                .unwrap();
        assert!(cert.lambda < b.alpha_x, "lambda = {}", cert.lambda);
        let x0 = FomState::from_slice(&[2.0, 0.0]);
        let (member, _) = in_safe_set_s(&x0, &cert, &b, &sys, &k).unwrap();
        assert!(member);
        let (_, report) =
            simulate_and_verify(&sys, &b, &k, &cert, 0.0, &x0, 10.0, 1e-2, 1e-3).unwrap();
        assert!(!report.lambda_ok);
        assert!(!report.hypotheses_hold);
        assert!(!report.stays_safe, "expected a violation witness");
        assert!(report.min_h < 0.0);
        assert!(report.min_h_state[0] < 0.0);
    }

    #[test]
    fn certificate_json_round_trip() {
        let cert = TrackingCertificate {
            rho: 1.0,
            lambda: 2.5,
            mu: 0.125,
            c_h: 1.0,
            tracking_fn: TRACKING_FN_PSI_ERROR_NORM.into(),
        };
        let back = TrackingCertificate::from_json(&cert.to_json()).unwrap();
        assert_eq!(cert, back);
    }
}

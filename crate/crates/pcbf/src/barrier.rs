//! Barrier functions on the reduced model, Lie derivatives, and the
//! closed-form minimum-deviation safety filter.
//!
//! The filter solves `min 1/2 ||v - k(z)||^2` subject to
//! `Lfh(z) + Lgh(z) v >= -alpha h(z) + delta` over an unconstrained input
//! set, which has the exact single-constraint projection solution. `delta`
//! is the predictive buffer; `delta = 0` recovers the nominal filter.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DVector, RowDVector};

use crate::dynamics::{ControlAffineModel, Controller, FomState, LayeredSystem, RomState, Trajectory};
use crate::error::{Error, Result};

/// Roundoff allowance on the constraint value of the closed-form solution.
pub const FEASIBILITY_TOL: f64 = 1e-9;

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&DVector<f64>) -> Result<RowDVector<f64>> + Send + Sync>;

/// A barrier function h with its gradient and the class-K rates: `alpha`
/// governs the RoM filter, `alpha_x > alpha` the full-order condition.
#[derive(Clone)]
pub struct BarrierSpec {
    eval: ScalarFn,
    gradient: GradientFn,
    pub alpha: f64,
    pub alpha_x: f64,
}

impl BarrierSpec {
    pub fn new(eval: ScalarFn, gradient: GradientFn, alpha: f64, alpha_x: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(alpha_x > alpha) {
            return Err(Error::Config(format!(
                "alpha_x must exceed alpha, got alpha_x = {alpha_x}, alpha = {alpha}"
            )));
        }
        Ok(Self {
            eval,
            gradient,
            alpha,
            alpha_x,
        })
    }

    pub fn h(&self, z: &DVector<f64>) -> f64 {
        (self.eval)(z)
    }

    pub fn grad(&self, z: &DVector<f64>) -> Result<RowDVector<f64>> {
        (self.gradient)(z)
    }

    /// Worst relative disagreement between the stored gradient and a central
    /// finite difference of h over the given probe points.
    pub fn gradient_consistency(&self, probes: &[DVector<f64>]) -> Result<f64> {
        let step = 1e-6;
        let mut worst = 0.0f64;
        for z in probes {
            let g = self.grad(z)?;
            for j in 0..z.len() {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += step;
                zm[j] -= step;
                let fd = (self.h(&zp) - self.h(&zm)) / (2.0 * step);
                let denom = g[j].abs().max(fd.abs()).max(1.0);
                worst = worst.max((g[j] - fd).abs() / denom);
            }
        }
        Ok(worst)
    }
}

/// Keep-right-of-the-origin constraint for a scalar RoM: h(z) = z.
pub fn halfspace_barrier(alpha: f64, alpha_x: f64) -> Result<BarrierSpec> {
    BarrierSpec::new(
        Arc::new(|z: &DVector<f64>| z[0]),
        Arc::new(|z: &DVector<f64>| {
            let mut g = RowDVector::zeros(z.len());
            g[0] = 1.0;
            Ok(g)
        }),
        alpha,
        alpha_x,
    )
}

/// Disc obstacles: centers and radii of equal length.
#[derive(Clone, Debug)]
pub struct ObstacleField {
    pub centers: Vec<DVector<f64>>,
    pub radii: Vec<f64>,
}

impl ObstacleField {
    pub fn new(centers: Vec<DVector<f64>>, radii: Vec<f64>) -> Result<Self> {
        if centers.is_empty() || centers.len() != radii.len() {
            return Err(Error::Config(format!(
                "obstacle field needs matching non-empty centers/radii, got {}/{}",
                centers.len(),
                radii.len()
            )));
        }
        if radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("obstacle radii must be positive".into()));
        }
        let dim = centers[0].len();
        if centers.iter().any(|c| c.len() != dim) {
            return Err(Error::Config("obstacle centers must share a dimension".into()));
        }
        Ok(Self { centers, radii })
    }

    /// Lowest-index obstacle attaining the minimal clearance at z.
    fn active(&self, z: &DVector<f64>) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, (c, r)) in self.centers.iter().zip(&self.radii).enumerate() {
            let d = (z - c).norm() - r;
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

/// Distance to the closest obstacle rim: h(z) = min_i (||z - c_i|| - r_i).
/// The gradient follows the active obstacle (ties broken by lowest index)
/// and is undefined exactly at a center.
pub fn obstacle_barrier(field: ObstacleField, alpha: f64, alpha_x: f64) -> Result<BarrierSpec> {
    let eval_field = field.clone();
    let grad_field = field;
    BarrierSpec::new(
        Arc::new(move |z: &DVector<f64>| eval_field.active(z).1),
        Arc::new(move |z: &DVector<f64>| {
            let (j, _) = grad_field.active(z);
            let diff = z - &grad_field.centers[j];
            let norm = diff.norm();
            if norm == 0.0 {
                return Err(Error::Singularity);
            }
            Ok((diff / norm).transpose())
        }),
        alpha,
        alpha_x,
    )
}

/// Lie derivatives of h along the RoM: (Lfh, Lgh) = (grad f, grad g).
pub fn lie_derivatives(
    b: &BarrierSpec,
    rom: &ControlAffineModel,
    z: &RomState,
) -> Result<(f64, RowDVector<f64>)> {
    let g = b.grad(&z.0)?;
    if g.len() != rom.dim_state {
        return Err(Error::Shape(format!(
            "barrier gradient has length {}, RoM state is {}",
            g.len(),
            rom.dim_state
        )));
    }
    let lfh = (&g * rom.drift(&z.0)?)[0];
    let lgh = &g * rom.actuation(&z.0)?;
    Ok((lfh, RowDVector::from_iterator(lgh.len(), lgh.iter().cloned())))
}

/// Outcome of one filter solve.
#[derive(Clone, Debug)]
pub struct FilterResult {
    /// The filtered input.
    pub v: DVector<f64>,
    /// Lfh + Lgh v + alpha h - delta at the solution.
    pub constraint_value: f64,
    /// Whether the constraint is active at the solution.
    pub active: bool,
    /// The unfiltered nominal command k(z).
    pub nominal_v: DVector<f64>,
}

/// Closed-form minimum-deviation safety filter with buffer `delta`.
///
/// With a = Lgh and b0 = Lfh + alpha h - delta the solution is
/// `v* = k(z) + max(0, -(b0 + a k(z))) a^T / ||a||^2`; when `a = 0` the
/// nominal command passes through if the constraint already holds, and the
/// instance is infeasible otherwise.
pub fn safety_filter(
    b: &BarrierSpec,
    rom: &ControlAffineModel,
    z: &RomState,
    k_nominal: &Controller,
    delta: f64,
) -> Result<FilterResult> {
    if !(delta >= 0.0) {
        return Err(Error::Config(format!("delta must be >= 0, got {delta}")));
    }
    let (lfh, lgh) = lie_derivatives(b, rom, z)?;
    let k = k_nominal(&z.0);
    if k.len() != rom.dim_input {
        return Err(Error::Shape(format!(
            "nominal controller returned length {}, RoM input is {}",
            k.len(),
            rom.dim_input
        )));
    }
    let b0 = lfh + b.alpha * b.h(&z.0) - delta;
    let a_sq = lgh.norm_squared();
    let v = if a_sq == 0.0 {
        if b0 >= 0.0 {
            k.clone()
        } else {
            return Err(Error::FilterInfeasible { residual: b0 });
        }
    } else {
        let slack = b0 + (&lgh * &k)[0];
        let multiplier = (-slack).max(0.0) / a_sq;
        &k + multiplier * lgh.transpose()
    };
    let constraint_value = b0 + (&lgh * &v)[0];
    Ok(FilterResult {
        active: constraint_value <= FEASIBILITY_TOL,
        constraint_value,
        v,
        nominal_v: k,
    })
}

/// Barrier rate along the FoM: grad h(z) J_proj(x) xdot with z the
/// projected state. On projection-consistent systems this equals
/// Lfh(z) + Lgh(z) project_input(x).
pub fn hdot_fom(
    b: &BarrierSpec,
    sys: &LayeredSystem,
    x: &FomState,
    xdot: &DVector<f64>,
) -> Result<f64> {
    if xdot.len() != sys.fom.dim_state {
        return Err(Error::Shape(format!(
            "state derivative has length {}, FoM state is {}",
            xdot.len(),
            sys.fom.dim_state
        )));
    }
    let z = sys.project_state(&x.0);
    let g = b.grad(&z)?;
    let jac = sys.projection_jacobian_at(&x.0);
    if jac.nrows() != z.len() || jac.ncols() != xdot.len() {
        return Err(Error::Shape(format!(
            "projection Jacobian is {}x{}, expected {}x{}",
            jac.nrows(),
            jac.ncols(),
            z.len(),
            xdot.len()
        )));
    }
    Ok((&g * (jac * xdot))[0])
}

/// h(project_state(x_t)) at every trajectory sample.
pub fn h_series(b: &BarrierSpec, sys: &LayeredSystem, traj: &Trajectory) -> Result<Vec<f64>> {
    traj.states
        .iter()
        .map(|x| {
            let z = sys.project_state(x);
            Ok(b.h(&z))
        })
        .collect()
}

/// Barrier rate at every sample, using the recorded input as the active
/// zero-order-hold command.
pub fn hdot_series(b: &BarrierSpec, sys: &LayeredSystem, traj: &Trajectory) -> Result<Vec<f64>> {
    traj.states
        .iter()
        .zip(&traj.inputs)
        .map(|(x, v)| {
            let xdot = sys.closed_loop_field(x, v)?;
            hdot_fom(b, sys, &FomState(x.clone()), &xdot)
        })
        .collect()
}

/// Trajectory CSV export including the h and hdot diagnostic columns.
pub fn write_trajectory_csv<W: Write>(
    traj: &Trajectory,
    sys: &LayeredSystem,
    b: &BarrierSpec,
    w: &mut W,
) -> Result<()> {
    let h = h_series(b, sys, traj)?;
    let hdot = hdot_series(b, sys, traj)?;
    traj.write_csv(&h, &hdot, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{constant_controller, make_double_integrator, make_single_integrator};
    use approx::assert_relative_eq;

    fn unit_disc_at_origin() -> ObstacleField {
        ObstacleField::new(vec![DVector::from_row_slice(&[0.0, 0.0])], vec![1.0]).unwrap()
    }

    #[test]
    fn halfspace_values() {
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        assert_eq!(b.h(&DVector::from_row_slice(&[0.5])), 0.5);
        assert_eq!(b.h(&DVector::from_row_slice(&[0.0])), 0.0);
        for z in [-3.0, 0.0, 7.0] {
            let g = b.grad(&DVector::from_row_slice(&[z])).unwrap();
            assert_eq!(g[0], 1.0);
        }
    }

    #[test]
    fn rates_validated() {
        assert!(matches!(halfspace_barrier(-0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(halfspace_barrier(1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(halfspace_barrier(1.0, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn obstacle_distance_and_gradient() {
        let b = obstacle_barrier(unit_disc_at_origin(), 1.0, 2.0).unwrap();
        let z = DVector::from_row_slice(&[2.0, 0.0]);
        assert_relative_eq!(b.h(&z), 1.0);
        let g = b.grad(&z).unwrap();
        assert_relative_eq!(g[0], 1.0);
        assert_relative_eq!(g[1], 0.0);
    }

    #[test]
    fn obstacle_tie_break_lowest_index() {
        let field = ObstacleField::new(
            vec![
                DVector::from_row_slice(&[-1.0, 0.0]),
                DVector::from_row_slice(&[1.0, 0.0]),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let b = obstacle_barrier(field, 1.0, 2.0).unwrap();
        // z equidistant from both centers: gradient points away from center 0
        let g = b.grad(&DVector::from_row_slice(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(g[0], 1.0);
        assert_relative_eq!(g[1], 0.0);
    }

    #[test]
    fn obstacle_singularity_at_center() {
        let b = obstacle_barrier(unit_disc_at_origin(), 1.0, 2.0).unwrap();
        assert!(matches!(
            b.grad(&DVector::from_row_slice(&[0.0, 0.0])),
            Err(Error::Singularity)
        ));
    }

    #[test]
    fn obstacle_gradient_unit_norm() {
        let field = ObstacleField::new(
            vec![
                DVector::from_row_slice(&[1.0, 2.0]),
                DVector::from_row_slice(&[-2.0, 0.5]),
            ],
            vec![0.7, 1.3],
        )
        .unwrap();
        let b = obstacle_barrier(field, 1.0, 2.0).unwrap();
        let mut s = 1u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 33) as f64 / (1u64 << 31) as f64) * 8.0 - 4.0
        };
        for _ in 0..200 {
            let z = DVector::from_row_slice(&[next(), next()]);
            if let Ok(g) = b.grad(&z) {
                assert_relative_eq!(g.norm(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn obstacle_gradient_matches_finite_difference() {
        let field = ObstacleField::new(
            vec![
                DVector::from_row_slice(&[1.0, 2.0]),
                DVector::from_row_slice(&[-2.0, 0.5]),
            ],
            vec![0.7, 1.3],
        )
        .unwrap();
        let b = obstacle_barrier(field, 1.0, 2.0).unwrap();
        // Probe away from the nonsmooth tie set.
        let probes = vec![
            DVector::from_row_slice(&[3.0, 3.0]),
            DVector::from_row_slice(&[1.5, 1.1]),
            DVector::from_row_slice(&[-3.4, 0.2]),
        ];
        assert!(b.gradient_consistency(&probes).unwrap() < 1e-5);
    }

    #[test]
    fn lie_derivatives_single_integrator() {
        let rom = make_single_integrator(1).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        for z in [-2.0, 0.0, 3.5] {
            let (lfh, lgh) = lie_derivatives(&b, &rom, &RomState::from_slice(&[z])).unwrap();
            assert_eq!(lfh, 0.0);
            assert_eq!(lgh[0], 1.0);
        }
    }

    #[test]
    fn lie_derivatives_obstacle_2d() {
        let rom = make_single_integrator(2).unwrap();
        let b = obstacle_barrier(unit_disc_at_origin(), 1.0, 2.0).unwrap();
        let (lfh, lgh) =
            lie_derivatives(&b, &rom, &RomState::from_slice(&[2.0, 0.0])).unwrap();
        assert_eq!(lfh, 0.0);
        assert_relative_eq!(lgh[0], 1.0);
        assert_relative_eq!(lgh[1], 0.0);
    }

    #[test]
    fn filter_example_values() {
        // Scalar halfspace, alpha = 1, k(z) = -1/2, delta = 0.
        let rom = make_single_integrator(1).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let r = safety_filter(&b, &rom, &RomState::from_slice(&[0.25]), &k, 0.0).unwrap();
        assert_relative_eq!(r.v[0], -0.25, epsilon = 1e-12);
        assert!(r.active);
        let r = safety_filter(&b, &rom, &RomState::from_slice(&[1.0]), &k, 0.0).unwrap();
        assert_relative_eq!(r.v[0], -0.5, epsilon = 1e-12);
        assert!(!r.active);
        assert_eq!(r.v, r.nominal_v);
    }

    #[test]
    fn filter_active_constraint_is_tight() {
        let rom = make_single_integrator(1).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        // Large delta forces the constraint to bind; KKT makes it exactly 0.
        let r = safety_filter(&b, &rom, &RomState::from_slice(&[1.0]), &k, 4.0).unwrap();
        assert!(r.active);
        assert!(r.constraint_value.abs() <= FEASIBILITY_TOL);
        assert!(r.constraint_value >= -FEASIBILITY_TOL);
    }

    #[test]
    fn filter_infeasible_when_lgh_vanishes() {
        // A barrier whose gradient annihilates g: h depends only on z[0]
        // while the single actuated channel is z[1].
        let rom = ControlAffineModel::new(
            2,
            1,
            Arc::new(|_: &DVector<f64>| DVector::zeros(2)),
            Arc::new(|_: &DVector<f64>| {
                nalgebra::DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
            }),
        );
        let b = BarrierSpec::new(
            Arc::new(|z: &DVector<f64>| z[0]),
            Arc::new(|_z: &DVector<f64>| Ok(RowDVector::from_row_slice(&[1.0, 0.0]))),
            1.0,
            2.0,
        )
        .unwrap();
        let k = constant_controller(DVector::from_row_slice(&[0.0]));
        // h = -1 < 0, so b0 = alpha h < 0 with Lgh = 0: infeasible.
        let err = safety_filter(&b, &rom, &RomState::from_slice(&[-1.0, 0.0]), &k, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::FilterInfeasible { .. }));
        // h = +1 passes the nominal through.
        let ok = safety_filter(&b, &rom, &RomState::from_slice(&[1.0, 0.0]), &k, 0.0).unwrap();
        assert_eq!(ok.v, ok.nominal_v);
    }

    #[test]
    fn filter_rejects_negative_delta() {
        let rom = make_single_integrator(1).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[0.0]));
        assert!(matches!(
            safety_filter(&b, &rom, &RomState::from_slice(&[1.0]), &k, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hdot_fom_scalar_cases() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let x = FomState::from_slice(&[1.0, -0.3]);
        let v = DVector::from_row_slice(&[0.0]);
        let xdot = sys.closed_loop_field(&x.0, &v).unwrap();
        assert_relative_eq!(hdot_fom(&b, &sys, &x, &xdot).unwrap(), -0.3);
        let rest = FomState::from_slice(&[1.0, 0.0]);
        let xdot0 = sys.closed_loop_field(&rest.0, &v).unwrap();
        assert_relative_eq!(hdot_fom(&b, &sys, &rest, &xdot0).unwrap(), 0.0);
    }

    #[test]
    fn hdot_fom_equals_lie_form_on_consistent_systems() {
        let sys = make_double_integrator(2, 1.5).unwrap();
        let field = ObstacleField::new(vec![DVector::from_row_slice(&[0.0, 0.0])], vec![0.5])
            .unwrap();
        let b = obstacle_barrier(field, 1.0, 2.0).unwrap();
        let x = FomState::from_slice(&[2.0, 1.0, -0.4, 0.3]);
        let v = DVector::from_row_slice(&[0.1, -0.2]);
        let xdot = sys.closed_loop_field(&x.0, &v).unwrap();
        let lhs = hdot_fom(&b, &sys, &x, &xdot).unwrap();
        let z = RomState(sys.project_state(&x.0));
        let (lfh, lgh) = lie_derivatives(&b, &sys.rom, &z).unwrap();
        let rhs = lfh + (&lgh * sys.project_input(&x.0))[0];
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn hdot_matches_finite_difference_along_trajectory() {
        let sys = make_double_integrator(1, 2.0).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let v = DVector::from_row_slice(&[0.4]);
        let dt = 1e-3;
        let traj = crate::dynamics::integrate(
            |_, x: &DVector<f64>| sys.closed_loop_field(x, &v).unwrap(),
            &DVector::from_row_slice(&[1.0, -1.0]),
            dt,
            500,
        )
        .unwrap();
        for k in 1..traj.len() - 1 {
            let x = FomState(traj.states[k].clone());
            let xdot = sys.closed_loop_field(&x.0, &v).unwrap();
            let analytic = hdot_fom(&b, &sys, &x, &xdot).unwrap();
            let hp = b.h(&sys.project_state(&traj.states[k + 1]));
            let hm = b.h(&sys.project_state(&traj.states[k - 1]));
            let fd = (hp - hm) / (2.0 * dt);
            assert!(
                (analytic - fd).abs() < 5.0 * dt * dt + 1e-9,
                "k = {k}: {analytic} vs {fd}"
            );
        }
    }
}

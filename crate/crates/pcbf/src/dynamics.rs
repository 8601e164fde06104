//! Control-affine reduced/full-order models, their layered coupling, and
//! fixed-step integration of closed-loop trajectories.
//!
//! The reduced-order model (RoM) `zdot = f(z) + g(z) v` carries the safety
//! constraint; the full-order model (FoM) `xdot = F(x) + G(x) u` tracks RoM
//! commands through a controller `u = K(x, v)`. The two are related by a
//! state projection `z = project_state(x)` and an input projection
//! `v = project_input(x)`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::util::sig9;

/// State-norm cap during integration; beyond this the trajectory is
/// treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Central finite-difference step for projection Jacobians.
pub const FD_STEP: f64 = 1e-6;

pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Tracking controller u = K(x, v).
pub type TrackingFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Nominal RoM feedback v = k(z).
pub type Controller = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Reduced-order state z.
#[derive(Clone, Debug, PartialEq)]
pub struct RomState(pub DVector<f64>);

/// Full-order state x.
#[derive(Clone, Debug, PartialEq)]
pub struct FomState(pub DVector<f64>);

impl RomState {
    pub fn from_slice(v: &[f64]) -> Self {
        Self(DVector::from_row_slice(v))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl FomState {
    pub fn from_slice(v: &[f64]) -> Self {
        Self(DVector::from_row_slice(v))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

/// Control-affine model `xdot = drift(x) + actuation(x) u`.
#[derive(Clone)]
pub struct ControlAffineModel {
    pub dim_state: usize,
    pub dim_input: usize,
    drift: VectorFn,
    actuation: MatrixFn,
}

impl ControlAffineModel {
    pub fn new(dim_state: usize, dim_input: usize, drift: VectorFn, actuation: MatrixFn) -> Self {
        Self {
            dim_state,
            dim_input,
            drift,
            actuation,
        }
    }

    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim_state {
            return Err(Error::Shape(format!(
                "drift: state has length {}, model expects {}",
                x.len(),
                self.dim_state
            )));
        }
        let out = (self.drift)(x);
        if out.len() != self.dim_state {
            return Err(Error::Shape(format!(
                "drift returned length {}, expected {}",
                out.len(),
                self.dim_state
            )));
        }
        Ok(out)
    }

    pub fn actuation(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x.len() != self.dim_state {
            return Err(Error::Shape(format!(
                "actuation: state has length {}, model expects {}",
                x.len(),
                self.dim_state
            )));
        }
        let out = (self.actuation)(x);
        if out.nrows() != self.dim_state || out.ncols() != self.dim_input {
            return Err(Error::Shape(format!(
                "actuation returned {}x{}, expected {}x{}",
                out.nrows(),
                out.ncols(),
                self.dim_state,
                self.dim_input
            )));
        }
        Ok(out)
    }

    /// Full field drift(x) + actuation(x) u.
    pub fn field(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.dim_input {
            return Err(Error::Shape(format!(
                "field: input has length {}, model expects {}",
                u.len(),
                self.dim_input
            )));
        }
        Ok(self.drift(x)? + self.actuation(x)? * u)
    }
}

/// The layered stack: RoM, FoM, tracking controller, and the projections
/// tying their state and input spaces together.
#[derive(Clone)]
pub struct LayeredSystem {
    pub rom: ControlAffineModel,
    pub fom: ControlAffineModel,
    tracking: TrackingFn,
    project_state: VectorFn,
    project_input: VectorFn,
    projection_jacobian: Option<MatrixFn>,
}

impl LayeredSystem {
    pub fn new(
        rom: ControlAffineModel,
        fom: ControlAffineModel,
        tracking: TrackingFn,
        project_state: VectorFn,
        project_input: VectorFn,
    ) -> Self {
        Self {
            rom,
            fom,
            tracking,
            project_state,
            project_input,
            projection_jacobian: None,
        }
    }

    /// Attach an analytic Jacobian of the state projection; otherwise a
    /// central finite difference with step [`FD_STEP`] is used.
    pub fn with_projection_jacobian(mut self, jacobian: MatrixFn) -> Self {
        self.projection_jacobian = Some(jacobian);
        self
    }

    pub fn project_state(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.project_state)(x)
    }

    pub fn project_input(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.project_input)(x)
    }

    pub fn tracking(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        (self.tracking)(x, v)
    }

    /// Jacobian of the state projection at x, analytic or finite-difference.
    pub fn projection_jacobian_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(jac) = &self.projection_jacobian {
            return jac(x);
        }
        let n = self.rom.dim_state;
        let m = x.len();
        let mut out = DMatrix::zeros(n, m);
        let mut xp = x.clone();
        let mut xm = x.clone();
        for j in 0..m {
            xp[j] = x[j] + FD_STEP;
            xm[j] = x[j] - FD_STEP;
            let col = (self.project_state(&xp) - self.project_state(&xm)) / (2.0 * FD_STEP);
            out.set_column(j, &col);
            xp[j] = x[j];
            xm[j] = x[j];
        }
        out
    }

    /// Partially closed-loop FoM field F(x) + G(x) K(x, v).
    pub fn closed_loop_field(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.fom.dim_state {
            return Err(Error::Shape(format!(
                "closed_loop_field: state has length {}, expected {}",
                x.len(),
                self.fom.dim_state
            )));
        }
        if v.len() != self.rom.dim_input {
            return Err(Error::Shape(format!(
                "closed_loop_field: RoM input has length {}, expected {}",
                v.len(),
                self.rom.dim_input
            )));
        }
        let u = self.tracking(x, v);
        self.fom.field(x, &u)
    }
}

/// F(x) + G(x) K(x, v) at a full-order state.
pub fn fom_closed_loop_field(
    sys: &LayeredSystem,
    x: &FomState,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    sys.closed_loop_field(&x.0, v)
}

/// Residuals of the projection-consistency conditions over a sample set.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ProjectionReport {
    pub max_residual_dynamics: f64,
    pub max_residual_actuation: f64,
    pub pass: bool,
}

/// Check that the state projection commutes with the dynamics:
/// `J_proj(x) F(x) = f(z) + g(z) project_input(x)` and `J_proj(x) G(x) = 0`,
/// with z the projected state.
pub fn check_projection_consistency(
    sys: &LayeredSystem,
    samples: &[FomState],
    tol: f64,
) -> Result<ProjectionReport> {
    if samples.is_empty() {
        return Err(Error::Precondition(
            "check_projection_consistency: empty sample set".into(),
        ));
    }
    let mut max_dyn = 0.0f64;
    let mut max_act = 0.0f64;
    for x in samples {
        let jac = sys.projection_jacobian_at(&x.0);
        if jac.nrows() != sys.rom.dim_state || jac.ncols() != sys.fom.dim_state {
            return Err(Error::Shape(format!(
                "projection Jacobian is {}x{}, expected {}x{}",
                jac.nrows(),
                jac.ncols(),
                sys.rom.dim_state,
                sys.fom.dim_state
            )));
        }
        let z = sys.project_state(&x.0);
        let psi = sys.project_input(&x.0);
        if psi.len() != sys.rom.dim_input {
            return Err(Error::Shape(format!(
                "project_input returned length {}, expected {}",
                psi.len(),
                sys.rom.dim_input
            )));
        }
        let lhs = &jac * sys.fom.drift(&x.0)?;
        let rhs = sys.rom.drift(&z)? + sys.rom.actuation(&z)? * psi;
        max_dyn = max_dyn.max((lhs - rhs).norm());
        max_act = max_act.max((&jac * sys.fom.actuation(&x.0)?).norm());
    }
    Ok(ProjectionReport {
        max_residual_dynamics: max_dyn,
        max_residual_actuation: max_act,
        pass: max_dyn <= tol && max_act <= tol,
    })
}

/// Kinematic single integrator `zdot = v` in dimension n.
pub fn make_single_integrator(n: usize) -> Result<ControlAffineModel> {
    if n == 0 {
        return Err(Error::Config("single integrator needs n >= 1".into()));
    }
    Ok(ControlAffineModel::new(
        n,
        n,
        Arc::new(move |_| DVector::zeros(n)),
        Arc::new(move |_| DMatrix::identity(n, n)),
    ))
}

/// Double integrator FoM tracking a single-integrator RoM through the
/// velocity controller `K(x, v) = -k_v (project_input(x) - v)`. The state
/// projection takes the first n entries (positions), the input projection
/// the last n (velocities).
pub fn make_double_integrator(n: usize, k_v: f64) -> Result<LayeredSystem> {
    if n == 0 {
        return Err(Error::Config("double integrator needs n >= 1".into()));
    }
    if !(k_v > 0.0) {
        return Err(Error::Config(format!(
            "tracking gain k_v must be positive, got {k_v}"
        )));
    }
    let rom = make_single_integrator(n)?;
    let fom = ControlAffineModel::new(
        2 * n,
        n,
        Arc::new(move |x: &DVector<f64>| {
            let mut out = DVector::zeros(2 * n);
            out.rows_mut(0, n).copy_from(&x.rows(n, n));
            out
        }),
        Arc::new(move |_: &DVector<f64>| {
            let mut g = DMatrix::zeros(2 * n, n);
            g.view_mut((n, 0), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            g
        }),
    );
    let tracking: TrackingFn = Arc::new(move |x: &DVector<f64>, v: &DVector<f64>| {
        -k_v * (x.rows(n, n).into_owned() - v)
    });
    let project_state: VectorFn = Arc::new(move |x: &DVector<f64>| x.rows(0, n).into_owned());
    let project_input: VectorFn = Arc::new(move |x: &DVector<f64>| x.rows(n, n).into_owned());
    let jacobian: MatrixFn = Arc::new(move |_: &DVector<f64>| {
        let mut j = DMatrix::zeros(n, 2 * n);
        j.view_mut((0, 0), (n, n))
            .copy_from(&DMatrix::identity(n, n));
        j
    });
    Ok(
        LayeredSystem::new(rom, fom, tracking, project_state, project_input)
            .with_projection_jacobian(jacobian),
    )
}

/// Constant RoM command.
pub fn constant_controller(value: DVector<f64>) -> Controller {
    Arc::new(move |_| value.clone())
}

/// Saturated proportional controller toward the origin:
/// `k(z) = -min(v_max / (k_p ||z||), 1) k_p z`.
pub fn saturated_proportional(k_p: f64, v_max: f64) -> Controller {
    Arc::new(move |z: &DVector<f64>| {
        let raw = k_p * z.norm();
        let scale = if raw > v_max { v_max / raw } else { 1.0 };
        -scale * k_p * z
    })
}

/// Uniformly sampled closed-loop (or open-loop) trajectory. All sequences
/// have equal length; `inputs` holds the RoM command active from each
/// sample on, `deltas` the buffer fed to the filter at that instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub deltas: Vec<f64>,
}

impl Trajectory {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            inputs: Vec::with_capacity(n),
            deltas: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, t: f64, x: DVector<f64>, v: DVector<f64>, delta: f64) {
        self.times.push(t);
        self.states.push(x);
        self.inputs.push(v);
        self.deltas.push(delta);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() >= 2 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |v| v.len())
    }

    /// Write `t,x_0..,v_0..,delta,h,hdot` rows; the per-sample h and hdot
    /// columns are supplied by the caller (see `barrier::h_series`).
    pub fn write_csv<W: Write>(&self, h: &[f64], hdot: &[f64], w: &mut W) -> Result<()> {
        if h.len() != self.len() || hdot.len() != self.len() {
            return Err(Error::Shape(format!(
                "h/hdot series length {}/{} does not match trajectory length {}",
                h.len(),
                hdot.len(),
                self.len()
            )));
        }
        let n = self.state_dim();
        let m = self.input_dim();
        let mut header = String::from("t");
        for i in 0..n {
            header.push_str(&format!(",x_{i}"));
        }
        for i in 0..m {
            header.push_str(&format!(",v_{i}"));
        }
        header.push_str(",delta,h,hdot");
        writeln!(w, "{header}")?;
        for k in 0..self.len() {
            let mut row = sig9(self.times[k]);
            for c in self.states[k].iter() {
                row.push(',');
                row.push_str(&sig9(*c));
            }
            for c in self.inputs[k].iter() {
                row.push(',');
                row.push_str(&sig9(*c));
            }
            row.push(',');
            row.push_str(&sig9(self.deltas[k]));
            row.push(',');
            row.push_str(&sig9(h[k]));
            row.push(',');
            row.push_str(&sig9(hdot[k]));
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Read a trajectory back from the CSV layout written by `write_csv`.
    /// The h/hdot columns are ignored (they are derivable).
    pub fn read_csv<R: BufRead>(r: R) -> Result<Trajectory> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err(Error::Format("first column must be t".into()));
        }
        let n = cols.iter().filter(|c| c.starts_with("x_")).count();
        let m = cols.iter().filter(|c| c.starts_with("v_")).count();
        let expected = 1 + n + m + 3;
        if cols.len() != expected || n == 0 {
            return Err(Error::Format(format!(
                "unexpected trajectory header: {header}"
            )));
        }
        let mut traj = Trajectory::with_capacity(16);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", lineno + 2)))?;
            if fields.len() != expected {
                return Err(Error::Format(format!(
                    "row {} has {} fields, expected {expected}",
                    lineno + 2,
                    fields.len()
                )));
            }
            traj.push(
                fields[0],
                DVector::from_row_slice(&fields[1..1 + n]),
                DVector::from_row_slice(&fields[1 + n..1 + n + m]),
                fields[1 + n + m],
            );
        }
        Ok(traj)
    }
}

pub(crate) fn state_ok(x: &DVector<f64>) -> bool {
    x.iter().all(|c| c.is_finite()) && x.norm() <= DIVERGENCE_NORM
}

/// One classical RK4 step of a field that may fail (shape errors propagate).
pub(crate) fn rk4_step_res<F>(field: &F, t: f64, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = field(t, x)?;
    let k2 = field(t + 0.5 * dt, &(x + (0.5 * dt) * &k1))?;
    let k3 = field(t + 0.5 * dt, &(x + (0.5 * dt) * &k2))?;
    let k4 = field(t + dt, &(x + dt * &k3))?;
    Ok(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Fixed-step classical Runge-Kutta integration of `xdot = field(t, x)`.
/// The result has `n_steps + 1` samples at uniform spacing `dt`; the input
/// and delta channels are filled with empty vectors and zeros.
pub fn integrate<F>(field: F, x0: &DVector<f64>, dt: f64, n_steps: usize) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("integrate: dt must be positive, got {dt}")));
    }
    if n_steps < 1 {
        return Err(Error::Config("integrate: n_steps must be >= 1".into()));
    }
    if !state_ok(x0) {
        return Err(Error::Divergence { step: 0, t: 0.0 });
    }
    let lifted = |t: f64, x: &DVector<f64>| Ok(field(t, x));
    let mut traj = Trajectory::with_capacity(n_steps + 1);
    let mut x = x0.clone();
    traj.push(0.0, x.clone(), DVector::zeros(0), 0.0);
    for step in 1..=n_steps {
        let t_prev = (step - 1) as f64 * dt;
        x = rk4_step_res(&lifted, t_prev, &x, dt)?;
        if !state_ok(&x) {
            return Err(Error::Divergence {
                step,
                t: step as f64 * dt,
            });
        }
        traj.push(step as f64 * dt, x.clone(), DVector::zeros(0), 0.0);
    }
    Ok(traj)
}

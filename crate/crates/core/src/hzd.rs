//! Virtual constraints, feedback-linearizing output tracking, and limit-cycle analysis
//! through the step-to-step return map.
//!
//! Six outputs are regulated: stance hip, stance length joint, swing hip and swing
//! length joint follow Bezier curves of the phase, and both feet are held level
//! (absolute foot angle zero). With six actuators this makes the decoupling matrix
//! square.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bezier;
use crate::chart::{self, MinState, NM, NX};
use crate::dynamics::{guard, impact, ContactForce};
use crate::error::{Error, Result};
use crate::integrate::{
    integrate_step, trajectory_header, Controller, StepEvent, StepOptions, Trajectory,
};
use crate::model::{leg_kinematics, Leg, ModelKind, ModelParams, Torques, WalkerState, BASE_X};

pub const N_OUT: usize = 6;
pub const N_BEZIER: usize = 4;
/// Minimal coordinates driven by Bezier curves.
pub const BEZIER_JOINTS: [usize; N_BEZIER] = [1, 2, 4, 5];

pub type OutVec = SVector<f64, N_OUT>;
pub type OutJacobian = SMatrix<f64, N_OUT, NM>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// Angle of the hip-to-stance-foot line, positive when the foot is behind the hip.
    StanceAngle,
    /// Time since the start of the step.
    Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualConstraint {
    pub bezier_degree: usize,
    /// One row of `bezier_degree + 1` coefficients per entry of [`BEZIER_JOINTS`].
    pub coeffs: Vec<Vec<f64>>,
    pub phase_kind: PhaseKind,
    /// Values of the phase quantity at `s = 0` and `s = 1`.
    pub phase_range: [f64; 2],
}

impl VirtualConstraint {
    pub fn validate(&self) -> Result<()> {
        if self.bezier_degree < 3 {
            return Err(Error::InvalidParams(format!(
                "bezier degree must be at least 3, got {}",
                self.bezier_degree
            )));
        }
        if self.coeffs.len() != N_BEZIER {
            return Err(Error::shape("constraint rows", N_BEZIER, self.coeffs.len()));
        }
        for row in &self.coeffs {
            if row.len() != self.bezier_degree + 1 {
                return Err(Error::shape(
                    "bezier coefficients",
                    self.bezier_degree + 1,
                    row.len(),
                ));
            }
            if row.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParams("non-finite bezier coefficient".into()));
            }
        }
        let [lo, hi] = self.phase_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParams(format!(
                "phase range must be increasing, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    fn span(&self) -> f64 {
        self.phase_range[1] - self.phase_range[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            kp: 100.0,
            kd: 20.0,
        }
    }
}

/// Stance angle with its gradient over minimal positions, its rate, and the
/// velocity-product part of its second derivative.
#[derive(Debug, Clone)]
pub struct StanceAngle {
    pub value: f64,
    pub grad: SVector<f64, NM>,
    pub rate: f64,
    pub bias: f64,
}

pub fn stance_angle(params: &ModelParams, x: &MinState) -> StanceAngle {
    let s = chart::to_full(params, x, Leg::Left, 0.0);
    let foot = leg_kinematics(params, &s.q, &s.qd, Leg::Left).foot;
    let r = foot.pos - s.q.fixed_rows::<2>(0);
    let r2 = r.norm_squared();
    // angle = -atan2(r_x, -r_z)
    let grad = SVector::<f64, NM>::from_fn(|i, _| {
        let k = chart::full_index(i, Leg::Left);
        -(-r.y * foot.jac[(0, k)] + r.x * foot.jac[(1, k)]) / r2
    });
    let rate = grad.dot(&x.fixed_rows::<NM>(NM));
    let rdot = foot.jac * s.qd - s.qd.fixed_rows::<2>(0);
    let bias = -(-r.y * foot.bias.x + r.x * foot.bias.y) / r2 - 2.0 * r.dot(&rdot) * rate / r2;
    StanceAngle {
        value: -r.x.atan2(-r.y),
        grad,
        rate,
        bias,
    }
}

/// Normalized phase, clamped to `[0, 1]`.
pub fn phase(params: &ModelParams, vc: &VirtualConstraint, state: &WalkerState, t: f64) -> f64 {
    let v = match vc.phase_kind {
        PhaseKind::StanceAngle => stance_angle(params, &chart::from_full(state)).value,
        PhaseKind::Time => t,
    };
    ((v - vc.phase_range[0]) / vc.span()).clamp(0.0, 1.0)
}

/// Phase (unclamped) with its gradient, rate and acceleration bias.
#[derive(Debug, Clone)]
pub struct PhaseEval {
    pub s: f64,
    pub grad: SVector<f64, NM>,
    pub rate: f64,
    pub bias: f64,
}

pub fn phase_eval(params: &ModelParams, vc: &VirtualConstraint, x: &MinState, t: f64) -> PhaseEval {
    let span = vc.span();
    match vc.phase_kind {
        PhaseKind::StanceAngle => {
            let a = stance_angle(params, x);
            PhaseEval {
                s: (a.value - vc.phase_range[0]) / span,
                grad: a.grad / span,
                rate: a.rate / span,
                bias: a.bias / span,
            }
        }
        PhaseKind::Time => PhaseEval {
            s: (t - vc.phase_range[0]) / span,
            grad: SVector::zeros(),
            rate: 1.0 / span,
            bias: 0.0,
        },
    }
}

/// Constant part of the outputs: `y = selection * q - desired(s)`.
pub fn output_selection(kind: ModelKind) -> OutJacobian {
    let knee = match kind {
        ModelKind::VirtualKnee => -1.0,
        ModelKind::Prismatic => 0.0,
    };
    let mut h = OutJacobian::zeros();
    for (row, &j) in BEZIER_JOINTS.iter().enumerate() {
        h[(row, j)] = 1.0;
    }
    for (row, first) in [(4, 1), (5, 4)] {
        h[(row, 0)] = 1.0;
        h[(row, first)] = 1.0;
        h[(row, first + 1)] = knee;
        h[(row, first + 2)] = 1.0;
    }
    h
}

/// Desired outputs and their first two phase derivatives.
pub fn desired(vc: &VirtualConstraint, s: f64) -> (OutVec, OutVec, OutVec) {
    let mut h = OutVec::zeros();
    let mut d1 = OutVec::zeros();
    let mut d2 = OutVec::zeros();
    for (row, c) in vc.coeffs.iter().enumerate() {
        let (v, a, b) = bezier::eval(c, s);
        h[row] = v;
        d1[row] = a;
        d2[row] = b;
    }
    (h, d1, d2)
}

#[derive(Debug, Clone)]
pub struct Outputs {
    pub y: OutVec,
    pub dy: OutVec,
    pub jac: OutJacobian,
    /// `yddot = jac * qddot - curvature`.
    pub curvature: OutVec,
    pub s: f64,
}

pub fn outputs_min(params: &ModelParams, vc: &VirtualConstraint, x: &MinState, t: f64) -> Outputs {
    let ph = phase_eval(params, vc, x, t);
    let (h, d1, d2) = desired(vc, ph.s);
    let sel = output_selection(params.kind);
    let q = x.fixed_rows::<NM>(0);
    let qd = x.fixed_rows::<NM>(NM);
    let jac = sel - d1 * ph.grad.transpose();
    Outputs {
        y: sel * q - h,
        dy: sel * qd - d1 * ph.rate,
        jac,
        curvature: d2 * ph.rate * ph.rate + d1 * ph.bias,
        s: ph.s,
    }
}

/// Outputs of a full state, checking that the output Jacobian has full row rank.
pub fn outputs(
    params: &ModelParams,
    vc: &VirtualConstraint,
    state: &WalkerState,
    t: f64,
) -> Result<Outputs> {
    let out = outputs_min(params, vc, &chart::from_full(state), t);
    let sv = out.jac.singular_values();
    if sv.min() <= 1e-9 * sv.max().max(1.0) {
        return Err(Error::Degenerate(format!(
            "output Jacobian rank deficient at q = {:?}",
            state.q.as_slice()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FlTorque {
    /// Stance/swing ordered torques after saturation.
    pub u: Torques,
    /// Torques before saturation.
    pub requested: Torques,
    pub saturated: bool,
}

/// Feedback-linearizing torques imposing `yddot = -kp y - kd ydot` (minimal chart).
pub fn fl_controller_min(
    params: &ModelParams,
    vc: &VirtualConstraint,
    gains: &Gains,
    x: &MinState,
    t: f64,
) -> Result<FlTorque> {
    let out = outputs_min(params, vc, x, t);
    let aff = chart::affine(params, x)?;
    let decoupling = out.jac * aff.response;
    let rhs = -gains.kp * out.y - gains.kd * out.dy + out.curvature - out.jac * aff.drift;
    let requested = decoupling
        .lu()
        .solve(&rhs)
        .filter(|u| u.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("decoupling matrix".into()))?;
    let limits = params.actuator_limits();
    let u = requested.zip_map(&limits, |v, l| v.clamp(-l, l));
    Ok(FlTorque {
        saturated: u != requested,
        u,
        requested,
    })
}

/// Closed-loop vector field of the minimal chart under unsaturated tracking torques.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub xdot: MinState,
    /// Stance/swing ordered torques (not clamped).
    pub u: Torques,
    pub grf: ContactForce,
}

pub fn closed_loop_min(
    params: &ModelParams,
    vc: &VirtualConstraint,
    gains: &Gains,
    x: &MinState,
    t: f64,
) -> Result<ClosedLoop> {
    let out = outputs_min(params, vc, x, t);
    let aff = chart::affine(params, x)?;
    let rhs = -gains.kp * out.y - gains.kd * out.dy + out.curvature - out.jac * aff.drift;
    let u = (out.jac * aff.response)
        .lu()
        .solve(&rhs)
        .filter(|u| u.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("decoupling matrix".into()))?;
    let mut xdot = MinState::zeros();
    xdot.fixed_rows_mut::<NM>(0)
        .copy_from(&x.fixed_rows::<NM>(NM));
    xdot.fixed_rows_mut::<NM>(NM)
        .copy_from(&(aff.drift + aff.response * u));
    Ok(ClosedLoop {
        xdot,
        grf: aff.full.contact(&u),
        u,
    })
}

/// Feedback-linearizing torques for a full state, in left/right order.
pub fn fl_controller(
    params: &ModelParams,
    vc: &VirtualConstraint,
    state: &WalkerState,
    gains: &Gains,
    t: f64,
) -> Result<(Torques, bool)> {
    let fl = fl_controller_min(params, vc, gains, &chart::from_full(state), t)?;
    Ok((chart::torques_to_full(&fl.u, state.stance), fl.saturated))
}

/// Closed-loop tracking of a virtual constraint.
#[derive(Debug, Clone)]
pub struct HzdController {
    pub params: ModelParams,
    pub vc: VirtualConstraint,
    pub gains: Gains,
}

impl Controller for HzdController {
    fn torque(&self, t: f64, state: &WalkerState) -> Result<Torques> {
        fl_controller(&self.params, &self.vc, state, &self.gains, t).map(|r| r.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnMapOptions {
    pub step: StepOptions,
    /// Longest allowed step duration (s).
    pub t_max: f64,
}

impl Default for ReturnMapOptions {
    fn default() -> Self {
        Self {
            step: StepOptions {
                record: false,
                ..StepOptions::default()
            },
            t_max: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    /// Pre-impact minimal state at the next touchdown.
    pub x_next: MinState,
    pub duration: f64,
    /// Horizontal distance from the stance foot to the swing foot at touchdown.
    pub step_length: f64,
    pub trajectory: Trajectory,
}

/// Impact followed by one closed-loop stance phase, in minimal coordinates.
pub fn return_map(
    params: &ModelParams,
    vc: &VirtualConstraint,
    gains: &Gains,
    x: &MinState,
    opts: &ReturnMapOptions,
) -> Result<StepResult> {
    let post = chart::impact_map_unchecked(params, x);
    if post.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepFailure {
            reason: "impact map failed".into(),
            samples: 0,
        });
    }
    let start = chart::to_full(params, &post, Leg::Left, 0.0);
    let controller = HzdController {
        params: params.clone(),
        vc: vc.clone(),
        gains: *gains,
    };
    let out = integrate_step(params, &start, &controller, opts.t_max, &opts.step)?;
    if out.event != StepEvent::Touchdown {
        return Err(Error::StepFailure {
            reason: format!("{:?} at t = {:.4} s", out.event, out.t).to_lowercase(),
            samples: out.trajectory.len(),
        });
    }
    let swing = leg_kinematics(params, &out.state.q, &out.state.qd, Leg::Right).foot;
    Ok(StepResult {
        x_next: chart::from_full(&out.state),
        duration: out.t - opts.step.t0,
        step_length: swing.pos.x,
        trajectory: out.trajectory,
    })
}

/// One application of the step-to-step map on full states: the pre-impact state
/// must lie on the guard with the swing foot descending.
pub fn poincare_map(
    params: &ModelParams,
    vc: &VirtualConstraint,
    gains: &Gains,
    x_on_guard: &WalkerState,
    opts: &ReturnMapOptions,
) -> Result<WalkerState> {
    let post = impact(params, x_on_guard)?.post;
    let controller = HzdController {
        params: params.clone(),
        vc: vc.clone(),
        gains: *gains,
    };
    let out = integrate_step(params, &post, &controller, opts.t_max, &opts.step)?;
    if out.event != StepEvent::Touchdown {
        return Err(Error::StepFailure {
            reason: format!("{:?} at t = {:.4} s", out.event, out.t).to_lowercase(),
            samples: out.trajectory.len(),
        });
    }
    Ok(out.state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Finite-difference perturbation for the Jacobian.
    pub fd_step: f64,
    /// Smallest backtracking fraction.
    pub min_step: f64,
    pub map: ReturnMapOptions,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            fd_step: 1e-6,
            min_step: 1.0 / 64.0,
            map: ReturnMapOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitCycle {
    /// Pre-impact state on the guard, stance foot at the origin.
    pub x_star: WalkerState,
    pub period: f64,
    pub step_length: f64,
    pub avg_velocity: f64,
    /// Floquet multipliers as `[re, im]`, filled by [`floquet_stability`].
    pub floquet: Vec<[f64; 2]>,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub failure: Option<String>,
}

impl LimitCycle {
    pub fn min_state(&self) -> MinState {
        chart::from_full(&self.x_star)
    }
}

/// Central-difference Jacobian of `f`; columns are evaluated in parallel and
/// assembled by index.
pub fn fd_jacobian<F>(f: F, x: &MinState, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&MinState) -> Result<MinState> + Sync,
{
    let cols: Vec<Result<MinState>> = (0..NX)
        .into_par_iter()
        .map(|j| {
            let mut xp = *x;
            let mut xm = *x;
            xp[j] += h;
            xm[j] -= h;
            Ok((f(&xp)? - f(&xm)?) / (2.0 * h))
        })
        .collect();
    let mut jac = DMatrix::zeros(NX, NX);
    for (j, c) in cols.into_iter().enumerate() {
        jac.set_column(j, &c?);
    }
    Ok(jac)
}

/// Damped Newton search for a fixed point of the return map.
pub fn find_limit_cycle(
    params: &ModelParams,
    vc: &VirtualConstraint,
    gains: &Gains,
    x_guess: &WalkerState,
    opts: &NewtonOptions,
) -> Result<LimitCycle> {
    vc.validate()?;
    let map = |x: &MinState| return_map(params, vc, gains, x, &opts.map);
    let mut x = chart::from_full(x_guess);
    let mut iterations = 0;
    let failed = |x: &MinState, residual: f64, iterations: usize, e: String| LimitCycle {
        x_star: chart::to_full(params, x, Leg::Left, 0.0),
        period: f64::NAN,
        step_length: f64::NAN,
        avg_velocity: f64::NAN,
        floquet: Vec::new(),
        residual,
        converged: false,
        iterations,
        failure: Some(e),
    };
    let mut step = match map(&x) {
        Ok(s) => s,
        Err(e) => return Ok(failed(&x, f64::INFINITY, 0, e.to_string())),
    };
    let mut residual = (step.x_next - x).norm();
    let mut failure = None;
    while residual > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let jac = match fd_jacobian(|x| map(x).map(|s| s.x_next), &x, opts.fd_step) {
            Ok(j) => j,
            Err(e) => {
                failure = Some(format!("jacobian: {e}"));
                break;
            }
        };
        let lhs = jac - DMatrix::identity(NX, NX);
        let f = nalgebra::DVector::from_column_slice((step.x_next - x).as_slice());
        let Some(dx) = lhs.lu().solve(&(-f)) else {
            failure = Some("singular Newton matrix".into());
            break;
        };
        let dx = MinState::from_column_slice(dx.as_slice());
        let mut lambda = 1.0;
        let mut accepted = None;
        while lambda >= opts.min_step {
            let trial = x + lambda * dx;
            if let Ok(s) = map(&trial) {
                let r = (s.x_next - trial).norm();
                if r < residual {
                    accepted = Some((trial, s, r));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, s, r)) => {
                x = trial;
                step = s;
                residual = r;
            }
            None => {
                failure = Some("line search failed".into());
                break;
            }
        }
    }
    let converged = residual <= opts.tol;
    if !converged && failure.is_none() {
        failure = Some(format!("no convergence in {iterations} iterations"));
    }
    Ok(LimitCycle {
        x_star: chart::to_full(params, &x, Leg::Left, 0.0),
        period: step.duration,
        step_length: step.step_length,
        avg_velocity: step.step_length / step.duration,
        floquet: Vec::new(),
        residual,
        converged,
        iterations,
        failure,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stability {
    pub multipliers: Vec<[f64; 2]>,
    pub spectral_radius: f64,
    pub stable: bool,
}

/// Eigenvalues of the return-map Jacobian at the fixed point, largest magnitude first.
pub fn floquet_stability(
    params: &ModelParams,
    vc: &VirtualConstraint,
    gains: &Gains,
    lc: &LimitCycle,
    opts: &NewtonOptions,
) -> Result<Stability> {
    if !lc.converged {
        return Err(Error::StabilityUndetermined(
            "limit cycle not converged".into(),
        ));
    }
    let jac = fd_jacobian(
        |x| return_map(params, vc, gains, x, &opts.map).map(|s| s.x_next),
        &lc.min_state(),
        opts.fd_step,
    )
    .map_err(|e| Error::StabilityUndetermined(e.to_string()))?;
    Ok(stability_of(&jac))
}

pub fn stability_of(jac: &DMatrix<f64>) -> Stability {
    let mut multipliers: Vec<[f64; 2]> = jac
        .complex_eigenvalues()
        .iter()
        .map(|c| [c.re, c.im])
        .collect();
    let mag = |m: &[f64; 2]| m[0].hypot(m[1]);
    multipliers.sort_by(|a, b| mag(b).total_cmp(&mag(a)));
    let spectral_radius = multipliers.first().map(mag).unwrap_or(0.0);
    Stability {
        stable: spectral_radius < 1.0 - 1e-6,
        spectral_radius,
        multipliers,
    }
}

/// Runs the closed loop for `steps` consecutive steps from a pre-impact state.
pub fn replay(
    params: &ModelParams,
    vc: &VirtualConstraint,
    gains: &Gains,
    x0: &MinState,
    steps: usize,
    opts: &ReturnMapOptions,
) -> Result<Vec<StepResult>> {
    let mut x = *x0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = return_map(params, vc, gains, &x, opts)?;
        x = s.x_next;
        out.push(s);
    }
    Ok(out)
}

/// Simulates consecutive steps in world coordinates, concatenating the trajectories.
pub fn walk(
    params: &ModelParams,
    controller: &HzdController,
    start: &WalkerState,
    steps: usize,
    opts: &ReturnMapOptions,
) -> Result<(Trajectory, WalkerState)> {
    let mut traj = Trajectory::default();
    let mut state = start.clone();
    let mut t0 = 0.0;
    for _ in 0..steps {
        let post = if guard(params, &state) <= crate::dynamics::IMPACT_HEIGHT_TOL {
            impact(params, &state)?.post
        } else {
            state.clone()
        };
        let step_opts = StepOptions {
            record: true,
            ..opts.step.clone()
        };
        let out = integrate_step(params, &post, controller, opts.t_max, &step_opts)?;
        for mut s in out.trajectory.samples {
            s.t += t0;
            traj.samples.push(s);
        }
        if out.event != StepEvent::Touchdown {
            return Err(Error::StepFailure {
                reason: format!("{:?} at t = {:.4} s", out.event, t0 + out.t).to_lowercase(),
                samples: traj.len(),
            });
        }
        t0 += out.t;
        state = out.state;
    }
    Ok((traj, state))
}

/// Return error of one closed-loop step started on a limit cycle, measured in
/// the source coordinates and again after mapping both states to prismatic legs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepClosure {
    pub source: f64,
    pub mapped: f64,
}

pub fn step_closure(
    params: &ModelParams,
    controller: &HzdController,
    lc: &LimitCycle,
    map: &crate::mapping::JointMap,
    opts: &ReturnMapOptions,
) -> Result<StepClosure> {
    let (_, end) = walk(params, controller, &lc.x_star, 1, opts)?;
    let gap = |a: &WalkerState, b: &WalkerState| (chart::from_full(a) - chart::from_full(b)).abs().max();
    let (start_m, end_m) = match params.kind {
        ModelKind::VirtualKnee => (
            crate::mapping::map_walker_state(map, &lc.x_star)?,
            crate::mapping::map_walker_state(map, &end)?,
        ),
        ModelKind::Prismatic => (lc.x_star.clone(), end.clone()),
    };
    Ok(StepClosure {
        source: gap(&end, &lc.x_star),
        mapped: gap(&end_m, &start_m),
    })
}

/// Average forward speed of a world-frame trajectory.
pub fn average_speed(traj: &Trajectory) -> f64 {
    match (traj.samples.first(), traj.samples.last()) {
        (Some(a), Some(b)) if b.t > a.t => (b.state.q[BASE_X] - a.state.q[BASE_X]) / (b.t - a.t),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitCycleReport {
    pub command: [f64; 2],
    pub period: f64,
    pub avg_velocity: f64,
    pub residual: f64,
    pub floquet: Vec<[f64; 2]>,
    pub converged: bool,
    pub stable: Option<bool>,
}

impl LimitCycleReport {
    pub fn new(command: [f64; 2], lc: &LimitCycle, stability: Option<&Stability>) -> Self {
        Self {
            command,
            period: lc.period,
            avg_velocity: lc.avg_velocity,
            residual: lc.residual,
            floquet: stability
                .map(|s| s.multipliers.clone())
                .unwrap_or_else(|| lc.floquet.clone()),
            converged: lc.converged,
            stable: stability.map(|s| s.stable),
        }
    }
}

/// Writes `t` followed by position/velocity pairs for every coordinate.
pub fn write_phase_portrait_csv<W: Write>(
    kind: ModelKind,
    traj: &Trajectory,
    out: W,
) -> Result<()> {
    let names = trajectory_header(kind);
    let q_names = &names[1..10];
    let mut header = vec!["t".to_string()];
    for n in q_names {
        header.push(n.clone());
        header.push(format!("d{n}"));
    }
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(fmt)?;
    for s in &traj.samples {
        let mut row = vec![s.t.to_string()];
        for i in 0..q_names.len() {
            row.push(s.state.q[i].to_string());
            row.push(s.state.qd[i].to_string());
        }
        w.write_record(&row).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn save_phase_portrait_csv(kind: ModelKind, traj: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_phase_portrait_csv(kind, traj, std::io::BufWriter::new(file))
}

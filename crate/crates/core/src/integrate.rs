//! Adaptive Dormand-Prince integration of one continuous stance phase with
//! touchdown and fall detection.

use std::io::Write;
use std::path::Path;

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{guard, stance_dynamics};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelParams, Torques, WalkerState, BASE_PITCH, BASE_Z, NQ};

/// Pitch magnitude beyond which the walker counts as fallen (rad).
pub const FALL_PITCH: f64 = 0.8;

/// Joint torques as a function of step-local time and state.
pub trait Controller {
    fn torque(&self, t: f64, state: &WalkerState) -> Result<Torques>;
}

impl<F> Controller for F
where
    F: Fn(f64, &WalkerState) -> Torques,
{
    fn torque(&self, t: f64, state: &WalkerState) -> Result<Torques> {
        Ok(self(t, state))
    }
}

/// Zero torque on every joint.
pub struct Passive;

impl Controller for Passive {
    fn torque(&self, _t: f64, _state: &WalkerState) -> Result<Torques> {
        Ok(Torques::zeros())
    }
}

pub fn has_fallen(params: &ModelParams, state: &WalkerState) -> bool {
    state.q[BASE_Z] < params.fall_height() || state.q[BASE_PITCH].abs() > FALL_PITCH
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEvent {
    Touchdown,
    Timeout,
    Fall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Time of the initial state.
    pub t0: f64,
    /// Swing-foot height that must be exceeded before touchdown can trigger (m).
    pub arm_height: f64,
    /// Treat the touchdown guard as armed from the start.
    pub initially_armed: bool,
    /// Largest allowed step (s).
    pub max_step: f64,
    /// Keep every accepted step in the trajectory.
    pub record: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-11,
            t0: 0.0,
            arm_height: 5e-3,
            initially_armed: false,
            max_step: 0.02,
            record: true,
        }
    }
}

/// Time tolerance of touchdown localization (s).
pub const EVENT_TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub state: WalkerState,
    pub tau: Torques,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub event: StepEvent,
    pub t: f64,
    /// State at the end of the phase; on touchdown this lies on the guard, pre-impact.
    pub state: WalkerState,
    pub trajectory: Trajectory,
}

type Y = SVector<f64, { 2 * NQ }>;

fn pack(s: &WalkerState) -> Y {
    let mut y = Y::zeros();
    y.fixed_rows_mut::<NQ>(0).copy_from(&s.q);
    y.fixed_rows_mut::<NQ>(NQ).copy_from(&s.qd);
    y
}

fn unpack(y: &Y, like: &WalkerState) -> WalkerState {
    WalkerState {
        q: y.fixed_rows::<NQ>(0).into_owned(),
        qd: y.fixed_rows::<NQ>(NQ).into_owned(),
        stance: like.stance,
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct System<'a> {
    params: &'a ModelParams,
    controller: &'a dyn Controller,
    template: WalkerState,
}

impl System<'_> {
    fn rhs(&self, t: f64, y: &Y) -> Result<(Y, Torques)> {
        let s = unpack(y, &self.template);
        if !s.is_finite() {
            return Err(Error::Divergence { t });
        }
        let tau = self.controller.torque(t, &s)?;
        let acc = stance_dynamics(self.params, &s, &tau)?;
        let mut dy = Y::zeros();
        dy.fixed_rows_mut::<NQ>(0).copy_from(&s.qd);
        dy.fixed_rows_mut::<NQ>(NQ).copy_from(&acc.qdd);
        Ok((dy, tau))
    }

    /// One Dormand-Prince step; returns the fifth-order solution and the error estimate.
    fn step(&self, t: f64, y: &Y, k0: &Y, h: f64) -> Result<(Y, Y)> {
        let mut k = [Y::zeros(); 7];
        k[0] = *k0;
        for i in 1..7 {
            let mut yi = *y;
            for (j, kj) in k.iter().enumerate().take(i) {
                if A[i][j] != 0.0 {
                    yi += h * A[i][j] * kj;
                }
            }
            k[i] = self.rhs(t + C[i] * h, &yi)?.0;
        }
        let mut y5 = *y;
        let mut err = Y::zeros();
        for i in 0..7 {
            y5 += h * B5[i] * k[i];
            err += h * (B5[i] - B4[i]) * k[i];
        }
        Ok((y5, err))
    }
}

/// Integrates one stance phase from `x0` until touchdown of the swing foot, a fall,
/// or `opts.t0 + t_max`.
pub fn integrate_step(
    params: &ModelParams,
    x0: &WalkerState,
    controller: &dyn Controller,
    t_max: f64,
    opts: &StepOptions,
) -> Result<StepOutcome> {
    if !(t_max > 0.0) {
        return Err(Error::Domain(format!(
            "t_max must be positive, got {t_max}"
        )));
    }
    if !x0.is_finite() {
        return Err(Error::InvalidState("non-finite initial state".into()));
    }
    let sys = System {
        params,
        controller,
        template: x0.clone(),
    };
    let t_end = opts.t0 + t_max;
    let mut t = opts.t0;
    let mut y = pack(x0);
    let (mut k0, tau0) = sys.rhs(t, &y)?;
    let mut trajectory = Trajectory::default();
    let push = |traj: &mut Trajectory, t: f64, y: &Y, tau: Torques| {
        traj.samples.push(Sample {
            t,
            state: unpack(y, x0),
            tau,
        })
    };
    push(&mut trajectory, t, &y, tau0);
    if has_fallen(params, x0) {
        return Ok(StepOutcome {
            event: StepEvent::Fall,
            t,
            state: x0.clone(),
            trajectory,
        });
    }

    let mut armed = opts.initially_armed || guard(params, x0) > opts.arm_height;
    let scale =
        |y: &Y, y1: &Y| Y::from_fn(|i, _| opts.atol + opts.rtol * y[i].abs().max(y1[i].abs()));
    let mut h = (1e-4_f64).min(opts.max_step).min(t_max);
    loop {
        let min_h = 1e-13 * t.abs().max(1.0);
        if h < min_h {
            return Err(Error::Stiffness { t, h });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        let (y1, err) = match sys.step(t, &y, &k0, h) {
            Ok(r) => r,
            Err(Error::Singular(_)) | Err(Error::Divergence { .. }) => {
                h *= 0.25;
                continue;
            }
            Err(e) => return Err(e),
        };
        let sc = scale(&y, &y1);
        let norm = (err.component_div(&sc).norm_squared() / (2 * NQ) as f64).sqrt();
        if !norm.is_finite() || norm > 1.0 {
            let factor = if norm.is_finite() {
                (0.9 * norm.powf(-0.2)).clamp(0.1, 0.5)
            } else {
                0.1
            };
            h *= factor;
            continue;
        }
        let t1 = if last { t_end } else { t + h };
        let s1 = unpack(&y1, x0);
        if !s1.is_finite() {
            return Err(Error::Divergence { t: t1 });
        }
        let g1 = guard(params, &s1);
        if armed && g1 <= 0.0 {
            let (tc, yc) = locate_touchdown(&sys, t, &y, &k0, t1 - t)?;
            let (_, tau) = sys.rhs(tc, &yc)?;
            push(&mut trajectory, tc, &yc, tau);
            return Ok(StepOutcome {
                event: StepEvent::Touchdown,
                t: tc,
                state: unpack(&yc, x0),
                trajectory,
            });
        }
        let (k1, tau1) = sys.rhs(t1, &y1)?;
        t = t1;
        y = y1;
        k0 = k1;
        if opts.record || last {
            push(&mut trajectory, t, &y, tau1);
        }
        if !armed && g1 > opts.arm_height {
            armed = true;
        }
        if has_fallen(params, &s1) {
            if !opts.record {
                push(&mut trajectory, t, &y, tau1);
            }
            return Ok(StepOutcome {
                event: StepEvent::Fall,
                t,
                state: s1,
                trajectory,
            });
        }
        if last {
            return Ok(StepOutcome {
                event: StepEvent::Timeout,
                t,
                state: s1,
                trajectory,
            });
        }
        let factor = if norm == 0.0 {
            5.0
        } else {
            (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = (h * factor).min(opts.max_step);
    }
}

/// Illinois regula falsi on the guard along exact sub-steps from `(t, y)`.
fn locate_touchdown(sys: &System, t: f64, y: &Y, k0: &Y, h: f64) -> Result<(f64, Y)> {
    let g_at = |dt: f64| -> Result<(f64, Y)> {
        if dt == 0.0 {
            return Ok((guard(sys.params, &unpack(y, &sys.template)), *y));
        }
        let (yc, _) = sys.step(t, y, k0, dt)?;
        Ok((guard(sys.params, &unpack(&yc, &sys.template)), yc))
    };
    let (mut a, mut b) = (0.0, h);
    let (mut ga, ya) = g_at(a)?;
    let (mut gb, mut yb) = g_at(b)?;
    if ga <= 0.0 {
        // Already on or below the guard at the start of the step.
        return Ok((t, ya));
    }
    let mut side = 0i8;
    for _ in 0..200 {
        if b - a <= EVENT_TIME_TOL && gb.abs() <= 1e-10 {
            break;
        }
        if b - a <= 1e-14 * t.abs().max(1.0) {
            break;
        }
        let mut m = b - gb * (b - a) / (gb - ga);
        if !(m > a && m < b) {
            m = 0.5 * (a + b);
        }
        let (gm, ym) = g_at(m)?;
        if gm > 0.0 {
            a = m;
            ga = gm;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        } else {
            b = m;
            gb = gm;
            yb = ym;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
    }
    Ok((t + b, yb))
}

/// Column names of the trajectory CSV: time, positions, velocities, torques.
pub fn trajectory_header(kind: ModelKind) -> Vec<String> {
    let length = match kind {
        ModelKind::VirtualKnee => "knee",
        ModelKind::Prismatic => "slide",
    };
    let mut q = vec!["x".to_string(), "z".into(), "pitch".into()];
    for side in ["l", "r"] {
        for joint in ["hip", length, "ankle"] {
            q.push(format!("{joint}_{side}"));
        }
    }
    let mut cols = vec!["t".to_string()];
    cols.extend(q.iter().cloned());
    cols.extend(q.iter().map(|n| format!("d{n}")));
    for side in ["l", "r"] {
        for joint in ["hip", length, "ankle"] {
            cols.push(format!("tau_{joint}_{side}"));
        }
    }
    cols
}

pub fn write_trajectory_csv<W: Write>(kind: ModelKind, traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(trajectory_header(kind)).map_err(fmt)?;
    for s in &traj.samples {
        let row: Vec<String> = std::iter::once(s.t)
            .chain(s.state.q.iter().copied())
            .chain(s.state.qd.iter().copied())
            .chain(s.tau.iter().copied())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn save_trajectory_csv(kind: ModelKind, traj: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trajectory_csv(kind, traj, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::total_energy;
    use crate::model::{leg_kinematics, Leg, QVec, KNEE};

    fn upright(params: &ModelParams) -> WalkerState {
        let mut q = QVec::zeros();
        let len = match params.kind {
            ModelKind::Prismatic => 0.7,
            ModelKind::VirtualKnee => 0.6,
        };
        q[Leg::Left.offset() + KNEE] = len;
        q[Leg::Right.offset() + KNEE] = len;
        let mut s = WalkerState::new(q, QVec::zeros(), Leg::Left);
        let foot = leg_kinematics(params, &s.q, &s.qd, Leg::Left).foot.pos;
        s.q[0] -= foot.x;
        s.q[1] -= foot.y;
        s
    }

    #[test]
    fn fallen_start_ends_immediately() {
        let params = ModelParams::prismatic();
        let mut s = upright(&params);
        s.q[BASE_PITCH] = 1.0;
        let out = integrate_step(&params, &s, &Passive, 1.0, &StepOptions::default()).unwrap();
        assert_eq!(out.event, StepEvent::Fall);
        assert_eq!(out.t, 0.0);
    }

    #[test]
    fn passive_swing_conserves_energy() {
        let params = ModelParams::default();
        let mut s = upright(&params);
        s.q[Leg::Right.offset()] = 0.6;
        s.q[Leg::Right.offset() + KNEE] = 1.2;
        s.qd[BASE_PITCH] = 0.3;
        let v = leg_kinematics(&params, &s.q, &s.qd, Leg::Left)
            .foot
            .velocity(&s.qd);
        s.qd[0] -= v.x;
        s.qd[1] -= v.y;
        let e0 = total_energy(&params, &s);
        let out = integrate_step(&params, &s, &Passive, 0.1, &StepOptions::default()).unwrap();
        let e1 = total_energy(&params, &out.state);
        assert!((e1 - e0).abs() < 1e-7, "drift {}", e1 - e0);
    }

    #[test]
    fn header_has_one_column_per_value() {
        assert_eq!(
            trajectory_header(ModelKind::Prismatic).len(),
            1 + 2 * NQ + 6
        );
    }
}

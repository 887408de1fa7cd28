//! Planar biped model: parameters, generalized coordinates and forward kinematics.
//!
//! The floating base is a point mass at the hip carrying a pitching torso. Each leg
//! has a hip pitch joint, a length joint (revolute knee or prismatic slide) and an
//! ankle pitch joint driving a small foot body. Generalized coordinates are
//!
//! ```text
//! q = [x, z, pitch, hip_L, knee_L, ankle_L, hip_R, knee_R, ankle_R]
//! ```
//!
//! Angles follow the convention that a link at absolute angle `a` points along
//! `(sin a, -cos a)`, so `a = 0` hangs straight down and positive angles swing the
//! link forward (counter-clockwise in the x-z plane).

use nalgebra::{SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NQ: usize = 9;
pub const NU: usize = 6;

pub type QVec = SVector<f64, NQ>;
pub type Torques = SVector<f64, NU>;
pub type PointJacobian = SMatrix<f64, 2, NQ>;

pub const BASE_X: usize = 0;
pub const BASE_Z: usize = 1;
pub const BASE_PITCH: usize = 2;

/// Joint slots within a leg block.
pub const HIP: usize = 0;
pub const KNEE: usize = 1;
pub const ANKLE: usize = 2;

/// Radius of gyration of the foot body about the ankle (m); the foot inertia is
/// `m_leg * FOOT_GYRATION_RADIUS^2`.
pub const FOOT_GYRATION_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    VirtualKnee,
    Prismatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leg {
    Left,
    Right,
}

impl Leg {
    pub fn other(self) -> Leg {
        match self {
            Leg::Left => Leg::Right,
            Leg::Right => Leg::Left,
        }
    }

    /// Index of this leg's hip coordinate in `q`.
    pub fn offset(self) -> usize {
        match self {
            Leg::Left => 3,
            Leg::Right => 6,
        }
    }

    /// Index of this leg's first actuator in the torque vector.
    pub fn actuator_offset(self) -> usize {
        self.offset() - 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// Thigh length (m).
    pub l1: f64,
    /// Shank length (m).
    pub l2: f64,
    /// Prismatic travel limits (m).
    pub slide_min: f64,
    pub slide_max: f64,
    /// Hip/base mass (kg) and pitch inertia (kg m^2).
    pub m_base: f64,
    pub i_base: f64,
    /// Lumped per-leg mass (kg).
    pub m_leg: f64,
    pub g: f64,
    pub mu: f64,
    /// Torque limit of revolute joints (N m).
    pub tau_max: f64,
    /// Force limit of prismatic joints (N).
    pub force_max: f64,
    pub kind: ModelKind,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            l1: 0.4,
            l2: 0.4,
            slide_min: 0.45,
            slide_max: 0.79,
            m_base: 10.0,
            i_base: 0.5,
            m_leg: 1e-3,
            g: 9.81,
            mu: 0.8,
            tau_max: 100.0,
            force_max: 400.0,
            kind: ModelKind::VirtualKnee,
        }
    }
}

impl ModelParams {
    pub fn prismatic() -> Self {
        Self {
            kind: ModelKind::Prismatic,
            ..Self::default()
        }
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.l1,
            self.l2,
            self.slide_min,
            self.slide_max,
            self.m_base,
            self.i_base,
            self.m_leg,
            self.g,
            self.mu,
            self.tau_max,
            self.force_max,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite parameter".into()));
        }
        if self.l1 <= 0.0 || self.l2 <= 0.0 {
            return Err(Error::InvalidParams(
                "segment lengths must be positive".into(),
            ));
        }
        if !(0.0 < self.slide_min
            && self.slide_min < self.slide_max
            && self.slide_max <= self.l1 + self.l2)
        {
            return Err(Error::InvalidParams(format!(
                "slide limits must satisfy 0 < {} < {} <= {}",
                self.slide_min,
                self.slide_max,
                self.l1 + self.l2
            )));
        }
        if self.m_base <= 0.0 || self.i_base <= 0.0 {
            return Err(Error::InvalidParams(
                "base mass and inertia must be positive".into(),
            ));
        }
        if self.m_leg < 0.0 {
            return Err(Error::InvalidParams("leg mass must be non-negative".into()));
        }
        if self.mu <= 0.0 {
            return Err(Error::InvalidParams(
                "friction coefficient must be positive".into(),
            ));
        }
        if self.tau_max <= 0.0 || self.force_max <= 0.0 {
            return Err(Error::InvalidParams(
                "actuator limits must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.m_base + 2.0 * self.m_leg
    }

    pub fn foot_inertia(&self) -> f64 {
        self.m_leg * FOOT_GYRATION_RADIUS * FOOT_GYRATION_RADIUS
    }

    /// Height below which the base counts as fallen.
    pub fn fall_height(&self) -> f64 {
        0.45 * (self.l1 + self.l2)
    }

    /// Knee angle interval that keeps the hip-foot distance within the slide limits.
    pub fn knee_range(&self) -> (f64, f64) {
        let c = |len: f64| {
            ((len * len - self.l1 * self.l1 - self.l2 * self.l2) / (2.0 * self.l1 * self.l2))
                .clamp(-1.0, 1.0)
                .acos()
        };
        (c(self.slide_max), c(self.slide_min))
    }

    /// Actuator limit for joint slot `slot`.
    pub fn actuator_limit(&self, slot: usize) -> f64 {
        if slot == KNEE && self.kind == ModelKind::Prismatic {
            self.force_max
        } else {
            self.tau_max
        }
    }

    pub fn actuator_limits(&self) -> Torques {
        Torques::from_fn(|i, _| self.actuator_limit(i % 3))
    }
}

/// Configuration and velocity of the walker plus the current stance label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerState {
    pub q: QVec,
    pub qd: QVec,
    pub stance: Leg,
}

impl WalkerState {
    pub fn new(q: QVec, qd: QVec, stance: Leg) -> Self {
        Self { q, qd, stance }
    }

    pub fn swing(&self) -> Leg {
        self.stance.other()
    }

    pub fn joint(&self, leg: Leg, slot: usize) -> f64 {
        self.q[leg.offset() + slot]
    }

    pub fn joint_rate(&self, leg: Leg, slot: usize) -> f64 {
        self.qd[leg.offset() + slot]
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::InvalidState("non-finite coordinate".into()));
        }
        for leg in [Leg::Left, Leg::Right] {
            let v = self.joint(leg, KNEE);
            match params.kind {
                ModelKind::Prismatic => {
                    let tol = 1e-9;
                    if v < params.slide_min - tol || v > params.slide_max + tol {
                        return Err(Error::InvalidState(format!(
                            "{leg:?} slide {v} outside [{}, {}]",
                            params.slide_min, params.slide_max
                        )));
                    }
                }
                ModelKind::VirtualKnee => {
                    if !(v > 0.0 && v < std::f64::consts::PI) {
                        return Err(Error::InvalidState(format!(
                            "{leg:?} knee angle {v} outside (0, pi)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Position of a point, its Jacobian `dp/dq` and the velocity-product term `Jdot * qd`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointKin {
    pub pos: Vector2<f64>,
    pub jac: PointJacobian,
    pub bias: Vector2<f64>,
}

impl PointKin {
    fn base(q: &QVec) -> Self {
        let mut jac = PointJacobian::zeros();
        jac[(0, BASE_X)] = 1.0;
        jac[(1, BASE_Z)] = 1.0;
        Self {
            pos: Vector2::new(q[BASE_X], q[BASE_Z]),
            jac,
            bias: Vector2::zeros(),
        }
    }

    pub fn velocity(&self, qd: &QVec) -> Vector2<f64> {
        self.jac * qd
    }

    /// Appends a link of the given length along absolute angle `sum(c_i q_i)`.
    fn push_link(&self, q: &QVec, qd: &QVec, length: Length, angle: &AngleRow) -> Self {
        let a = angle.value(q);
        let ad = angle.rate(qd);
        let dir = Vector2::new(a.sin(), -a.cos());
        let perp = Vector2::new(a.cos(), a.sin());
        let (len, len_rate) = match length {
            Length::Fixed(l) => (l, 0.0),
            Length::Joint(j) => (q[j], qd[j]),
        };
        let mut next = self.clone();
        next.pos += len * dir;
        for (i, c) in angle.coeffs.iter().enumerate() {
            if *c != 0.0 {
                let col = len * c * perp;
                next.jac[(0, i)] += col.x;
                next.jac[(1, i)] += col.y;
            }
        }
        if let Length::Joint(j) = length {
            next.jac[(0, j)] += dir.x;
            next.jac[(1, j)] += dir.y;
        }
        next.bias += -len * ad * ad * dir + 2.0 * len_rate * ad * perp;
        next
    }
}

#[derive(Debug, Clone, Copy)]
enum Length {
    Fixed(f64),
    Joint(usize),
}

/// Absolute angle expressed as a linear row over `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleRow {
    pub coeffs: QVec,
}

impl AngleRow {
    fn new(entries: &[(usize, f64)]) -> Self {
        let mut coeffs = QVec::zeros();
        for &(i, c) in entries {
            coeffs[i] += c;
        }
        Self { coeffs }
    }

    pub fn value(&self, q: &QVec) -> f64 {
        self.coeffs.dot(q)
    }

    pub fn rate(&self, qd: &QVec) -> f64 {
        self.coeffs.dot(qd)
    }
}

/// Kinematics of one leg.
#[derive(Debug, Clone)]
pub struct LegKin {
    /// Knee point; absent for the prismatic leg.
    pub knee: Option<PointKin>,
    pub foot: PointKin,
    /// Absolute angle of the foot body.
    pub foot_angle: AngleRow,
}

pub fn leg_kinematics(params: &ModelParams, q: &QVec, qd: &QVec, leg: Leg) -> LegKin {
    let b = leg.offset();
    let hip = PointKin::base(q);
    let thigh = AngleRow::new(&[(BASE_PITCH, 1.0), (b + HIP, 1.0)]);
    match params.kind {
        ModelKind::VirtualKnee => {
            let knee = hip.push_link(q, qd, Length::Fixed(params.l1), &thigh);
            let shank = AngleRow::new(&[(BASE_PITCH, 1.0), (b + HIP, 1.0), (b + KNEE, -1.0)]);
            let foot = knee.push_link(q, qd, Length::Fixed(params.l2), &shank);
            let foot_angle = AngleRow::new(&[
                (BASE_PITCH, 1.0),
                (b + HIP, 1.0),
                (b + KNEE, -1.0),
                (b + ANKLE, 1.0),
            ]);
            LegKin {
                knee: Some(knee),
                foot,
                foot_angle,
            }
        }
        ModelKind::Prismatic => {
            let foot = hip.push_link(q, qd, Length::Joint(b + KNEE), &thigh);
            let foot_angle = AngleRow::new(&[(BASE_PITCH, 1.0), (b + HIP, 1.0), (b + ANKLE, 1.0)]);
            LegKin {
                knee: None,
                foot,
                foot_angle,
            }
        }
    }
}

pub fn foot_point(params: &ModelParams, state: &WalkerState, leg: Leg) -> PointKin {
    leg_kinematics(params, &state.q, &state.qd, leg).foot
}

/// Hip-to-foot distance of a leg.
pub fn leg_length(params: &ModelParams, q: &QVec, leg: Leg) -> f64 {
    let kin = leg_kinematics(params, q, &QVec::zeros(), leg);
    (kin.foot.pos - Vector2::new(q[BASE_X], q[BASE_Z])).norm()
}

/// Absolute angle of the hip-to-foot line of `leg`, measured from straight down.
pub fn leg_angle(params: &ModelParams, q: &QVec, leg: Leg) -> f64 {
    let kin = leg_kinematics(params, q, &QVec::zeros(), leg);
    let r = kin.foot.pos - Vector2::new(q[BASE_X], q[BASE_Z]);
    r.x.atan2(-r.y)
}

//! Floating-base Lagrangian dynamics, pinned-foot stance phase, touchdown guard and
//! rigid plastic impact.

use nalgebra::{SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    leg_kinematics, Leg, ModelKind, ModelParams, PointKin, QVec, Torques, WalkerState, BASE_PITCH,
    BASE_X, BASE_Z, NQ, NU,
};

pub type MassMatrix = SMatrix<f64, NQ, NQ>;
pub type Actuation = SMatrix<f64, NQ, NU>;

type Kkt = SMatrix<f64, 11, 11>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactForce {
    pub normal: f64,
    pub tangential: f64,
}

impl ContactForce {
    fn from_vec(f: Vector2<f64>) -> Self {
        Self {
            normal: f.y,
            tangential: f.x,
        }
    }
}

/// `M(q) qdd + h(q, qd) = S tau + J^T F`.
#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub mass: MassMatrix,
    pub bias: QVec,
}

/// A point mass together with its kinematics.
struct MassPoint {
    mass: f64,
    kin: PointKin,
}

struct Bodies {
    points: Vec<MassPoint>,
    /// (inertia, angle row coefficients)
    rotors: Vec<(f64, QVec)>,
}

fn bodies(params: &ModelParams, q: &QVec, qd: &QVec) -> Bodies {
    let mut points = Vec::with_capacity(5);
    let mut rotors = Vec::with_capacity(3);
    let mut base_jac = SMatrix::<f64, 2, NQ>::zeros();
    base_jac[(0, BASE_X)] = 1.0;
    base_jac[(1, BASE_Z)] = 1.0;
    points.push(MassPoint {
        mass: params.m_base,
        kin: PointKin {
            pos: Vector2::new(q[BASE_X], q[BASE_Z]),
            jac: base_jac,
            bias: Vector2::zeros(),
        },
    });
    let mut pitch = QVec::zeros();
    pitch[BASE_PITCH] = 1.0;
    rotors.push((params.i_base, pitch));
    for leg in [Leg::Left, Leg::Right] {
        let kin = leg_kinematics(params, q, qd, leg);
        match params.kind {
            ModelKind::VirtualKnee => {
                points.push(MassPoint {
                    mass: 0.5 * params.m_leg,
                    kin: kin.knee.expect("knee model has a knee point"),
                });
                points.push(MassPoint {
                    mass: 0.5 * params.m_leg,
                    kin: kin.foot,
                });
            }
            ModelKind::Prismatic => points.push(MassPoint {
                mass: params.m_leg,
                kin: kin.foot,
            }),
        }
        rotors.push((params.foot_inertia(), kin.foot_angle.coeffs));
    }
    Bodies { points, rotors }
}

fn check_finite(state: &WalkerState) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidState("non-finite coordinate".into()))
    }
}

/// Selection matrix mapping the six joint torques onto the joint coordinates.
pub fn actuation() -> Actuation {
    let mut s = Actuation::zeros();
    for j in 0..NU {
        s[(3 + j, j)] = 1.0;
    }
    s
}

pub fn dynamics_terms(params: &ModelParams, state: &WalkerState) -> Result<DynamicsTerms> {
    check_finite(state)?;
    Ok(terms_unchecked(params, &state.q, &state.qd))
}

fn terms_unchecked(params: &ModelParams, q: &QVec, qd: &QVec) -> DynamicsTerms {
    let b = bodies(params, q, qd);
    let mut mass = MassMatrix::zeros();
    let mut bias = QVec::zeros();
    for p in &b.points {
        let jt = p.kin.jac.transpose();
        mass += p.mass * jt * p.kin.jac;
        bias += p.mass * jt * p.kin.bias;
        bias += p.mass * params.g * p.kin.jac.row(1).transpose();
    }
    for (inertia, row) in &b.rotors {
        mass += *inertia * row * row.transpose();
    }
    DynamicsTerms { mass, bias }
}

pub fn kinetic_energy(params: &ModelParams, state: &WalkerState) -> f64 {
    let t = terms_unchecked(params, &state.q, &state.qd);
    0.5 * state.qd.dot(&(t.mass * state.qd))
}

pub fn potential_energy(params: &ModelParams, state: &WalkerState) -> f64 {
    bodies(params, &state.q, &state.qd)
        .points
        .iter()
        .map(|p| p.mass * params.g * p.kin.pos.y)
        .sum()
}

pub fn total_energy(params: &ModelParams, state: &WalkerState) -> f64 {
    kinetic_energy(params, state) + potential_energy(params, state)
}

/// Angular momentum about a ground point, counter-clockwise positive in the x-z plane.
pub fn angular_momentum(params: &ModelParams, state: &WalkerState, about: Vector2<f64>) -> f64 {
    let b = bodies(params, &state.q, &state.qd);
    let linear: f64 = b
        .points
        .iter()
        .map(|p| {
            let r = p.kin.pos - about;
            let v = p.kin.jac * state.qd;
            p.mass * (r.x * v.y - r.y * v.x)
        })
        .sum();
    let spin: f64 = b.rotors.iter().map(|(i, row)| i * row.dot(&state.qd)).sum();
    linear + spin
}

/// Center of mass position and velocity.
pub fn center_of_mass(params: &ModelParams, state: &WalkerState) -> (Vector2<f64>, Vector2<f64>) {
    let b = bodies(params, &state.q, &state.qd);
    let m: f64 = b.points.iter().map(|p| p.mass).sum();
    let pos = b
        .points
        .iter()
        .map(|p| p.mass * p.kin.pos)
        .sum::<Vector2<f64>>()
        / m;
    let vel = b
        .points
        .iter()
        .map(|p| p.mass * (p.kin.jac * state.qd))
        .sum::<Vector2<f64>>()
        / m;
    (pos, vel)
}

/// Stance-phase accelerations as an affine function of the joint torques:
/// `qdd = drift + response * tau`, and likewise for the contact force.
#[derive(Debug, Clone)]
pub struct StanceAffine {
    pub drift: QVec,
    pub response: SMatrix<f64, NQ, NU>,
    pub force_drift: Vector2<f64>,
    pub force_response: SMatrix<f64, 2, NU>,
}

impl StanceAffine {
    pub fn accel(&self, tau: &Torques) -> QVec {
        self.drift + self.response * tau
    }

    pub fn contact(&self, tau: &Torques) -> ContactForce {
        ContactForce::from_vec(self.force_drift + self.force_response * tau)
    }
}

fn kkt_matrix(mass: &MassMatrix, jac: &SMatrix<f64, 2, NQ>) -> Kkt {
    let mut k = Kkt::zeros();
    k.fixed_view_mut::<NQ, NQ>(0, 0).copy_from(mass);
    k.fixed_view_mut::<NQ, 2>(0, NQ)
        .copy_from(&(-jac.transpose()));
    k.fixed_view_mut::<2, NQ>(NQ, 0).copy_from(jac);
    k
}

pub fn stance_affine(params: &ModelParams, state: &WalkerState) -> Result<StanceAffine> {
    check_finite(state)?;
    let terms = terms_unchecked(params, &state.q, &state.qd);
    let foot = leg_kinematics(params, &state.q, &state.qd, state.stance).foot;
    let lu = kkt_matrix(&terms.mass, &foot.jac).lu();
    let mut rhs = SMatrix::<f64, 11, 7>::zeros();
    rhs.fixed_view_mut::<NQ, 1>(0, 0).copy_from(&(-terms.bias));
    rhs.fixed_view_mut::<2, 1>(NQ, 0).copy_from(&(-foot.bias));
    rhs.fixed_view_mut::<NQ, NU>(0, 1).copy_from(&actuation());
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("constrained mass matrix".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("constrained mass matrix".into()));
    }
    Ok(StanceAffine {
        drift: sol.fixed_view::<NQ, 1>(0, 0).into_owned(),
        response: sol.fixed_view::<NQ, NU>(0, 1).into_owned(),
        force_drift: sol.fixed_view::<2, 1>(NQ, 0).into_owned(),
        force_response: sol.fixed_view::<2, NU>(NQ, 1).into_owned(),
    })
}

#[derive(Debug, Clone)]
pub struct StanceAccel {
    pub qdd: QVec,
    pub grf: ContactForce,
}

/// Continuous dynamics with the stance foot pinned to the ground.
pub fn stance_dynamics(
    params: &ModelParams,
    state: &WalkerState,
    tau: &Torques,
) -> Result<StanceAccel> {
    check_finite(state)?;
    let terms = terms_unchecked(params, &state.q, &state.qd);
    let foot = leg_kinematics(params, &state.q, &state.qd, state.stance).foot;
    let mut rhs = SVector::<f64, 11>::zeros();
    rhs.fixed_view_mut::<NQ, 1>(0, 0)
        .copy_from(&(actuation() * tau - terms.bias));
    rhs.fixed_view_mut::<2, 1>(NQ, 0).copy_from(&(-foot.bias));
    let sol = kkt_matrix(&terms.mass, &foot.jac)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("constrained mass matrix".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("constrained mass matrix".into()));
    }
    Ok(StanceAccel {
        qdd: sol.fixed_view::<NQ, 1>(0, 0).into_owned(),
        grf: ContactForce::from_vec(sol.fixed_view::<2, 1>(NQ, 0).into_owned()),
    })
}

/// Signed height of the swing foot above the ground.
pub fn guard(params: &ModelParams, state: &WalkerState) -> f64 {
    leg_kinematics(params, &state.q, &state.qd, state.swing())
        .foot
        .pos
        .y
}

/// Vertical velocity of the swing foot.
pub fn guard_rate(params: &ModelParams, state: &WalkerState) -> f64 {
    let foot = leg_kinematics(params, &state.q, &state.qd, state.swing()).foot;
    (foot.jac * state.qd).y
}

/// Same configuration with the stance label swapped.
pub fn relabel(state: &WalkerState) -> WalkerState {
    WalkerState {
        q: state.q,
        qd: state.qd,
        stance: state.stance.other(),
    }
}

/// Height tolerance for a state to count as on the guard.
pub const IMPACT_HEIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Impact {
    pub post: WalkerState,
    /// Ground impulse on the new stance foot (N s), x then z.
    pub impulse: Vector2<f64>,
}

/// Rigid plastic touchdown of the swing foot; the old stance foot is released.
pub fn impact_map(params: &ModelParams, pre: &WalkerState) -> Result<WalkerState> {
    impact(params, pre).map(|i| i.post)
}

pub fn impact(params: &ModelParams, pre: &WalkerState) -> Result<Impact> {
    check_finite(pre)?;
    let height = guard(params, pre);
    if height > IMPACT_HEIGHT_TOL {
        return Err(Error::NotAnImpact(format!(
            "swing foot is {height:.3e} m above ground"
        )));
    }
    let rate = guard_rate(params, pre);
    if rate > 0.0 {
        return Err(Error::NotAnImpact(format!(
            "swing foot ascending at {rate:.3e} m/s"
        )));
    }
    let terms = terms_unchecked(params, &pre.q, &pre.qd);
    let foot = leg_kinematics(params, &pre.q, &pre.qd, pre.swing()).foot;
    let mut rhs = SVector::<f64, 11>::zeros();
    rhs.fixed_view_mut::<NQ, 1>(0, 0)
        .copy_from(&(terms.mass * pre.qd));
    let sol = kkt_matrix(&terms.mass, &foot.jac)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("impact system".into()))?;
    Ok(Impact {
        post: WalkerState {
            q: pre.q,
            qd: sol.fixed_view::<NQ, 1>(0, 0).into_owned(),
            stance: pre.swing(),
        },
        impulse: sol.fixed_view::<2, 1>(NQ, 0).into_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HIP, KNEE};
    use approx::assert_relative_eq;

    fn standing(params: &ModelParams) -> WalkerState {
        // Stance leg vertical below the hip, swing leg slightly bent.
        let mut q = QVec::zeros();
        match params.kind {
            ModelKind::VirtualKnee => {
                q[Leg::Left.offset() + KNEE] = 0.5;
                q[Leg::Left.offset() + HIP] = 0.25;
                q[Leg::Left.offset() + 2] = -0.25;
                q[Leg::Right.offset() + KNEE] = 0.8;
                q[Leg::Right.offset() + HIP] = 0.1;
            }
            ModelKind::Prismatic => {
                q[Leg::Left.offset() + KNEE] = 0.7;
                q[Leg::Right.offset() + KNEE] = 0.6;
                q[Leg::Right.offset() + HIP] = 0.1;
            }
        }
        let mut s = WalkerState::new(q, QVec::zeros(), Leg::Left);
        let foot = leg_kinematics(params, &s.q, &s.qd, Leg::Left).foot.pos;
        s.q[BASE_X] -= foot.x;
        s.q[BASE_Z] -= foot.y;
        s
    }

    #[test]
    fn rest_bias_is_pure_gravity() {
        for params in [ModelParams::default(), ModelParams::prismatic()] {
            let s = standing(&params);
            let t = dynamics_terms(&params, &s).unwrap();
            assert_eq!(t.bias[BASE_X], 0.0);
            assert_relative_eq!(
                t.bias[BASE_Z],
                params.total_mass() * params.g,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn contact_force_matches_momentum_rate() {
        for params in [ModelParams::default(), ModelParams::prismatic()] {
            let mut s = standing(&params);
            s.qd[Leg::Right.offset() + HIP] = 0.7;
            let tau = Torques::from_column_slice(&[2.0, -5.0, 0.1, -1.0, 3.0, 0.0]);
            let out = stance_dynamics(&params, &s, &tau).unwrap();
            let b = bodies(&params, &s.q, &s.qd);
            let rate: Vector2<f64> = b
                .points
                .iter()
                .map(|p| p.mass * (p.kin.jac * out.qdd + p.kin.bias))
                .sum();
            let weight = params.total_mass() * params.g;
            assert_relative_eq!(out.grf.tangential, rate.x, epsilon = 1e-9);
            assert_relative_eq!(out.grf.normal, rate.y + weight, epsilon = 1e-9);
        }
    }

    #[test]
    fn holding_torques_carry_weight_over_the_foot() {
        let params = ModelParams::prismatic();
        let mut s = standing(&params);
        // Both legs vertical: all mass on the line through the stance foot.
        s.q[Leg::Right.offset() + HIP] = 0.0;
        let affine = stance_affine(&params, &s).unwrap();
        let sub = affine.response.fixed_view::<6, 6>(3, 0).into_owned();
        let tau = sub
            .lu()
            .solve(&(-affine.drift.fixed_view::<6, 1>(3, 0).into_owned()))
            .unwrap();
        let acc = affine.accel(&tau);
        let grf = affine.contact(&tau);
        assert!(acc.norm() < 1e-9, "{acc}");
        assert_relative_eq!(grf.normal, params.total_mass() * params.g, epsilon = 1e-9);
        assert!(grf.tangential.abs() < 1e-9);
    }

    #[test]
    fn stance_foot_does_not_accelerate() {
        let params = ModelParams::default();
        let mut s = standing(&params);
        s.qd = QVec::from_column_slice(&[0.2, -0.1, 0.3, 0.5, -0.4, 0.1, 1.0, 0.2, -0.3]);
        // make the velocity consistent with the pinned foot
        let foot = leg_kinematics(&params, &s.q, &s.qd, Leg::Left).foot;
        let v = foot.jac * s.qd;
        s.qd[BASE_X] -= v.x;
        s.qd[BASE_Z] -= v.y;
        let tau = Torques::from_column_slice(&[3.0, -2.0, 0.01, 0.5, 0.1, 0.0]);
        let out = stance_dynamics(&params, &s, &tau).unwrap();
        let foot = leg_kinematics(&params, &s.q, &s.qd, Leg::Left).foot;
        let acc = foot.jac * out.qdd + foot.bias;
        assert!(acc.norm() <= 1e-8);
    }

    #[test]
    fn impact_without_momentum_only_relabels() {
        let params = ModelParams::default();
        let mut s = standing(&params);
        // put the swing foot on the ground
        s.q[Leg::Right.offset() + HIP] = -0.3;
        let (lo, _) = params.knee_range();
        s.q[Leg::Right.offset() + KNEE] = lo;
        // find hip angle that touches the ground by bisection on height
        let h = |hip: f64| {
            let mut t = s.clone();
            t.q[Leg::Right.offset() + HIP] = hip;
            guard(&params, &t)
        };
        let (mut a, mut b) = (-1.2, 0.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if h(m) > 0.0 {
                a = m
            } else {
                b = m
            }
        }
        s.q[Leg::Right.offset() + HIP] = a;
        let post = impact_map(&params, &s).unwrap();
        assert_eq!(post.q, s.q);
        assert_eq!(post.qd, QVec::zeros());
        assert_eq!(post.stance, Leg::Right);
    }

    #[test]
    fn ascending_foot_is_not_an_impact() {
        let params = ModelParams::prismatic();
        let mut s = standing(&params);
        // lower the swing foot to the ground
        let gap = guard(&params, &s);
        s.q[Leg::Right.offset() + KNEE] += gap / (s.q[Leg::Right.offset() + HIP]).cos();
        assert!(guard(&params, &s).abs() < 1e-9);
        s.qd[Leg::Right.offset() + KNEE] = -0.5; // retracting: foot moves up
        assert!(matches!(
            impact_map(&params, &s),
            Err(Error::NotAnImpact(_))
        ));
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let params = ModelParams::default();
        let mut s = standing(&params);
        s.qd[3] = f64::NAN;
        assert!(matches!(
            dynamics_terms(&params, &s),
            Err(Error::InvalidState(_))
        ));
    }
}

//! Stance-relative minimal coordinates.
//!
//! With the stance foot pinned, the walker is described by the base pitch and the
//! six joints listed stance leg first, plus their rates:
//!
//! ```text
//! x = [pitch, st_hip, st_len, st_ankle, sw_hip, sw_len, sw_ankle, (rates...)]
//! ```
//!
//! Torques in this chart follow the same stance-then-swing order.

use nalgebra::{SVector, Vector2};

use crate::dynamics::{impact, stance_affine, stance_dynamics, ContactForce, StanceAffine};
use crate::error::Result;
use crate::model::{
    leg_kinematics, Leg, ModelParams, QVec, Torques, WalkerState, BASE_PITCH, BASE_X, BASE_Z, NQ,
};

pub const NM: usize = 7;
pub const NX: usize = 2 * NM;

pub type MinState = SVector<f64, NX>;
pub type MinConfig = SVector<f64, NM>;

/// Index in `q` of minimal coordinate `i` for the given stance leg.
pub fn full_index(i: usize, stance: Leg) -> usize {
    match i {
        0 => BASE_PITCH,
        1..=3 => stance.offset() + i - 1,
        _ => stance.other().offset() + i - 4,
    }
}

/// Reorders a torque vector from stance/swing order to left/right order.
pub fn torques_to_full(u: &Torques, stance: Leg) -> Torques {
    let mut tau = Torques::zeros();
    for j in 0..3 {
        tau[stance.actuator_offset() + j] = u[j];
        tau[stance.other().actuator_offset() + j] = u[3 + j];
    }
    tau
}

pub fn torques_from_full(tau: &Torques, stance: Leg) -> Torques {
    let mut u = Torques::zeros();
    for j in 0..3 {
        u[j] = tau[stance.actuator_offset() + j];
        u[3 + j] = tau[stance.other().actuator_offset() + j];
    }
    u
}

pub fn from_full(state: &WalkerState) -> MinState {
    MinState::from_fn(|i, _| {
        let k = full_index(i % NM, state.stance);
        if i < NM {
            state.q[k]
        } else {
            state.qd[k]
        }
    })
}

/// Full state with the stance foot resting at `(foot_x, 0)`.
pub fn to_full(params: &ModelParams, x: &MinState, stance: Leg, foot_x: f64) -> WalkerState {
    let mut q = QVec::zeros();
    let mut qd = QVec::zeros();
    for i in 0..NM {
        let k = full_index(i, stance);
        q[k] = x[i];
        qd[k] = x[NM + i];
    }
    let foot = leg_kinematics(params, &q, &qd, stance).foot;
    q[BASE_X] = foot_x - foot.pos.x;
    q[BASE_Z] = -foot.pos.y;
    let v = foot.jac * qd;
    qd[BASE_X] = -v.x;
    qd[BASE_Z] = -v.y;
    WalkerState::new(q, qd, stance)
}

/// Stance foot position and swing foot position relative to it.
pub fn swing_foot(params: &ModelParams, x: &MinState) -> (Vector2<f64>, Vector2<f64>) {
    let s = to_full(params, x, Leg::Left, 0.0);
    let kin = leg_kinematics(params, &s.q, &s.qd, Leg::Right).foot;
    (kin.pos, kin.jac * s.qd)
}

pub struct MinDynamics {
    pub xdot: MinState,
    pub grf: ContactForce,
}

pub fn dynamics(params: &ModelParams, x: &MinState, u: &Torques) -> Result<MinDynamics> {
    let s = to_full(params, x, Leg::Left, 0.0);
    let acc = stance_dynamics(params, &s, &torques_to_full(u, Leg::Left))?;
    let mut xdot = MinState::zeros();
    for i in 0..NM {
        xdot[i] = x[NM + i];
        xdot[NM + i] = acc.qdd[full_index(i, Leg::Left)];
    }
    Ok(MinDynamics { xdot, grf: acc.grf })
}

/// Affine torque response of the minimal accelerations, in the chart's orders.
pub struct MinAffine {
    pub drift: MinConfig,
    pub response: nalgebra::SMatrix<f64, NM, 6>,
    pub full: StanceAffine,
}

pub fn affine(params: &ModelParams, x: &MinState) -> Result<MinAffine> {
    let s = to_full(params, x, Leg::Left, 0.0);
    let full = stance_affine(params, &s)?;
    // Left is stance, so actuator order already matches stance/swing order.
    let drift = MinConfig::from_fn(|i, _| full.drift[full_index(i, Leg::Left)]);
    let response = nalgebra::SMatrix::<f64, NM, 6>::from_fn(|i, j| {
        full.response[(full_index(i, Leg::Left), j)]
    });
    Ok(MinAffine {
        drift,
        response,
        full,
    })
}

/// Impact of the swing foot followed by relabeling: the result is expressed with
/// the former swing leg as the stance leg.
pub fn impact_map(params: &ModelParams, x: &MinState) -> Result<MinState> {
    let s = to_full(params, x, Leg::Left, 0.0);
    let post = impact(params, &s)?.post;
    Ok(from_full(&post))
}

/// Impact map without the guard preconditions, for use inside optimizers where the
/// guard is imposed as a separate constraint.
pub fn impact_map_unchecked(params: &ModelParams, x: &MinState) -> MinState {
    let s = to_full(params, x, Leg::Left, 0.0);
    let terms = crate::dynamics::dynamics_terms(params, &s);
    let Ok(terms) = terms else {
        return MinState::from_element(f64::NAN);
    };
    let foot = leg_kinematics(params, &s.q, &s.qd, Leg::Right).foot;
    let mut k = nalgebra::SMatrix::<f64, 11, 11>::zeros();
    k.fixed_view_mut::<NQ, NQ>(0, 0).copy_from(&terms.mass);
    k.fixed_view_mut::<NQ, 2>(0, NQ)
        .copy_from(&(-foot.jac.transpose()));
    k.fixed_view_mut::<2, NQ>(NQ, 0).copy_from(&foot.jac);
    let mut rhs = SVector::<f64, 11>::zeros();
    rhs.fixed_rows_mut::<NQ>(0).copy_from(&(terms.mass * s.qd));
    let Some(sol) = k.lu().solve(&rhs) else {
        return MinState::from_element(f64::NAN);
    };
    let post = WalkerState::new(s.q, sol.fixed_rows::<NQ>(0).into_owned(), Leg::Right);
    from_full(&post)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::guard;
    use approx::assert_relative_eq;

    fn sample() -> MinState {
        MinState::from_column_slice(&[
            0.05, 0.2, 0.6, -0.1, -0.3, 0.9, 0.2, 0.4, -0.2, 0.3, 0.1, 0.5, -0.6, 0.05,
        ])
    }

    #[test]
    fn round_trip_through_full_state() {
        let params = ModelParams::default();
        for stance in [Leg::Left, Leg::Right] {
            let s = to_full(&params, &sample(), stance, 0.3);
            assert_eq!(from_full(&s), sample());
            let foot = leg_kinematics(&params, &s.q, &s.qd, stance).foot;
            assert_relative_eq!(foot.pos.x, 0.3, epsilon = 1e-14);
            assert_relative_eq!(foot.pos.y, 0.0, epsilon = 1e-14);
            assert!((foot.jac * s.qd).norm() < 1e-14);
        }
    }

    #[test]
    fn swing_foot_height_is_the_guard() {
        let params = ModelParams::default();
        let (pos, _) = swing_foot(&params, &sample());
        let s = to_full(&params, &sample(), Leg::Left, 0.0);
        assert_relative_eq!(pos.y, guard(&params, &s), epsilon = 1e-14);
    }

    #[test]
    fn torque_reordering_round_trips() {
        let u = Torques::from_column_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let full = torques_to_full(&u, Leg::Right);
        assert_eq!(full[0], 4.0);
        assert_eq!(torques_from_full(&full, Leg::Right), u);
    }
}

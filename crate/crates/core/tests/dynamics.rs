use gaitlab_core::chart::{self, MinState, NM};
use gaitlab_core::dynamics::{
    angular_momentum, dynamics_terms, guard, guard_rate, impact, kinetic_energy, relabel, total_energy,
};
use gaitlab_core::integrate::{integrate_step, Passive, StepOptions};
use gaitlab_core::model::{leg_angle, leg_kinematics, Leg, ModelKind, ModelParams, QVec, WalkerState, KNEE};
use proptest::prelude::*;

fn params_of(prismatic: bool) -> ModelParams {
    if prismatic {
        ModelParams::prismatic()
    } else {
        ModelParams::default()
    }
}

/// Length coordinate for a fraction of the model's admissible range.
fn length_coord(params: &ModelParams, frac: f64) -> f64 {
    let (lo, hi) = match params.kind {
        ModelKind::VirtualKnee => params.knee_range(),
        ModelKind::Prismatic => (params.slide_min, params.slide_max),
    };
    lo + frac * (hi - lo)
}

prop_compose! {
    fn any_state(max_rate: f64)(
        prismatic in any::<bool>(),
        base in prop::array::uniform3(-0.5..0.5f64),
        hips in prop::array::uniform2(-1.2..1.2f64),
        lengths in prop::array::uniform2(0.0..1.0f64),
        ankles in prop::array::uniform2(-0.6..0.6f64),
        rates in prop::array::uniform9(-max_rate..max_rate),
        right_stance in any::<bool>(),
    ) -> (ModelParams, WalkerState) {
        let params = params_of(prismatic);
        let mut q = QVec::zeros();
        q[0] = base[0];
        q[1] = 0.7 + base[1];
        q[2] = base[2];
        for (k, leg) in [Leg::Left, Leg::Right].into_iter().enumerate() {
            q[leg.offset()] = hips[k];
            q[leg.offset() + KNEE] = length_coord(&params, lengths[k]);
            q[leg.offset() + 2] = ankles[k];
        }
        let stance = if right_stance { Leg::Right } else { Leg::Left };
        (params, WalkerState::new(q, QVec::from(rates), stance))
    }
}

prop_compose! {
    /// Double-contact pose with the leg lines mirrored about the vertical.
    fn pre_impact()(
        prismatic in any::<bool>(),
        pitch in -0.3..0.3f64,
        stance_hip in -0.6..0.0f64,
        frac in 0.2..0.9f64,
        ankles in prop::array::uniform2(-0.3..0.3f64),
        rates in prop::array::uniform7(-1.5..1.5f64),
    ) -> (ModelParams, WalkerState) {
        let params = params_of(prismatic);
        let length = length_coord(&params, frac);
        let mut x = MinState::zeros();
        x[0] = pitch;
        x[1] = stance_hip;
        x[2] = length;
        x[3] = ankles[0];
        x[5] = length;
        x[6] = ankles[1];
        for (k, r) in rates.iter().enumerate() {
            x[NM + k] = *r;
        }
        // Equal lengths give equal hip-to-leg-line offsets, so mirroring is a hip shift.
        let lean = leg_angle(&params, &chart::to_full(&params, &x, Leg::Left, 0.0).q, Leg::Left);
        x[4] = stance_hip - 2.0 * lean;
        (params.clone(), chart::to_full(&params, &x, Leg::Left, 0.0))
    }
}

proptest! {
    #[test]
    fn mass_matrix_is_symmetric_positive_definite((params, state) in any_state(3.0)) {
        let m = dynamics_terms(&params, &state).unwrap().mass;
        prop_assert!((m - m.transpose()).abs().max() <= 1e-12 * m.abs().max());
        let min = m.symmetric_eigenvalues().min();
        prop_assert!(min > 0.0, "min eigenvalue {min}");
    }

    #[test]
    fn relabelling_twice_is_the_identity((_, state) in any_state(3.0)) {
        prop_assert_eq!(relabel(&relabel(&state)), state);
    }

    #[test]
    fn impact_keeps_momentum_and_loses_energy((params, pre) in pre_impact()) {
        prop_assert!(guard(&params, &pre).abs() <= 1e-12);
        prop_assume!(guard_rate(&params, &pre) < -1e-3);
        let foot = leg_kinematics(&params, &pre.q, &pre.qd, pre.swing()).foot.pos;
        let post = impact(&params, &pre).unwrap().post;
        let before = angular_momentum(&params, &pre, foot);
        let after = angular_momentum(&params, &post, foot);
        prop_assert!((after - before).abs() <= 1e-8, "momentum {before} -> {after}");
        let (e0, e1) = (kinetic_energy(&params, &pre), kinetic_energy(&params, &post));
        prop_assert!(e1 <= e0 + 1e-12, "kinetic energy {e0} -> {e1}");
        prop_assert_eq!(post.stance, pre.swing());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn passive_motion_conserves_energy((params, mut state) in any_state(1.0)) {
        // Pin the stance foot by cancelling its velocity through the base.
        let v = leg_kinematics(&params, &state.q, &state.qd, state.stance).foot.velocity(&state.qd);
        state.qd[0] -= v.x;
        state.qd[1] -= v.y;
        let foot = leg_kinematics(&params, &state.q, &state.qd, state.stance).foot.pos;
        state.q[0] -= foot.x;
        state.q[1] -= foot.y;
        let e0 = total_energy(&params, &state);
        let out = integrate_step(&params, &state, &Passive, 0.5, &StepOptions::default());
        let out = out.unwrap();
        prop_assume!(out.t > 1e-3);
        let drift = (total_energy(&params, &out.state) - e0).abs() / out.t;
        prop_assert!(drift <= 1e-6, "drift {drift} J/s over {} s ({:?})", out.t, out.event);
    }
}

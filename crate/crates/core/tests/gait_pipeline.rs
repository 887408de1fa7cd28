//! Properties of the solved 0.4 m/s gait and its closed-loop limit cycle.

use std::sync::OnceLock;

use gaitlab_core::chart::{self, MinState};
use gaitlab_core::dynamics::{guard, impact};
use gaitlab_core::gaitopt::{
    build_nlp, frame_of_state, solve_gait, to_gait_frames, Command, Gait, GaitSolution, NlpSettings,
};
use gaitlab_core::hzd::{
    closed_loop_min, fd_jacobian, find_limit_cycle, floquet_stability, outputs, poincare_map,
    return_map, stability_of, walk, HzdController, LimitCycle, NewtonOptions, ReturnMapOptions,
};
use gaitlab_core::integrate::{integrate_step, StepEvent, StepOptions};
use gaitlab_core::mapping::{map_walker_state, JointMap};
use gaitlab_core::model::{Leg, ModelParams, QVec, WalkerState};

struct Solved {
    params: ModelParams,
    settings: NlpSettings,
    sol: GaitSolution,
    gait: Gait,
    lc: LimitCycle,
}

fn solved() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| {
        let params = ModelParams::default();
        let settings = NlpSettings::default();
        let nlp = build_nlp(&params, Command::new(0.4, 0.0), &settings).unwrap();
        let sol = solve_gait(&nlp, &settings, None).unwrap();
        assert!(sol.converged, "{}", sol.status);
        let gait = to_gait_frames(&params, &JointMap::from_params(&params), &sol).unwrap();
        let lc = find_limit_cycle(
            &params,
            &sol.virtual_constraint,
            &settings.gains,
            &sol.boundary_walker_state(&params),
            &NewtonOptions::default(),
        )
        .unwrap();
        Solved {
            params,
            settings,
            sol,
            gait,
            lc,
        }
    })
}

fn controller(s: &Solved) -> HzdController {
    HzdController {
        params: s.params.clone(),
        vc: s.sol.virtual_constraint.clone(),
        gains: s.settings.gains,
    }
}

#[test]
fn frames_close_through_the_impact() {
    let s = solved();
    assert_eq!(s.gait.frames.len(), 42);
    let map = JointMap::from_params(&s.params);
    let (lo, hi) = (s.params.slide_min, s.params.slide_max);
    // Bounds hold to the solver's feasibility tolerance.
    let tol = s.settings.solver.constraint_tol;
    for f in &s.gait.frames {
        assert!(f.iter().all(|v| v.is_finite()));
        for slide in [f[3], f[6]] {
            assert!(slide >= lo - tol && slide <= hi + tol, "slide {slide}");
        }
    }
    let post = chart::impact_map(&s.params, &s.sol.boundary_state()).unwrap();
    let chart_gap = (post - s.sol.state(0)).abs().max();
    assert!(chart_gap <= s.settings.solver.constraint_tol, "chart gap {chart_gap}");

    let mapped = map_walker_state(&map, &chart::to_full(&s.params, &post, Leg::Left, 0.0)).unwrap();
    let first = &s.gait.frames[0];
    let frame_gap = frame_of_state(&mapped)
        .iter()
        .zip(first)
        .skip(1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(frame_gap <= 10.0 * s.settings.solver.constraint_tol, "frame gap {frame_gap}");
}

#[test]
fn replay_matches_the_transcription() {
    let s = solved();
    let x = s.sol.boundary_state();
    let step = return_map(&s.params, &s.sol.virtual_constraint, &s.settings.gains, &x, &ReturnMapOptions::default())
        .unwrap();
    assert!((step.duration - s.sol.period).abs() <= 1e-3, "{} vs {}", step.duration, s.sol.period);
    let rel = (step.x_next - x).norm() / x.norm();
    assert!(rel <= 1e-2, "relative boundary gap {rel}");
}

#[test]
fn stance_foot_stays_loaded() {
    let s = solved();
    let n = s.sol.states.len();
    for k in 0..n {
        let t = k as f64 * s.sol.period / (n - 1) as f64;
        let cl = closed_loop_min(&s.params, &s.sol.virtual_constraint, &s.settings.gains, &s.sol.state(k), t)
            .unwrap();
        assert!(cl.grf.normal > 0.0, "node {k}: normal force {}", cl.grf.normal);
    }
}

#[test]
fn limit_cycle_tracks_the_command() {
    let s = solved();
    assert!(s.lc.converged);
    assert!(s.lc.residual <= 1e-6 && s.lc.period > 0.0);
    assert!((s.lc.avg_velocity - 0.4).abs() <= 0.05 * 0.4, "{}", s.lc.avg_velocity);

    let again = find_limit_cycle(
        &s.params,
        &s.sol.virtual_constraint,
        &s.settings.gains,
        &s.lc.x_star,
        &NewtonOptions::default(),
    )
    .unwrap();
    assert!(again.converged && again.iterations <= 2, "{} iterations", again.iterations);
}

#[test]
fn touchdown_time_is_the_period() {
    let s = solved();
    let post = impact(&s.params, &s.lc.x_star).unwrap().post;
    let out = integrate_step(&s.params, &post, &controller(s), 3.0, &StepOptions::default()).unwrap();
    assert_eq!(out.event, StepEvent::Touchdown);
    assert!((out.t - s.lc.period).abs() <= 1e-4);
    assert!(guard(&s.params, &out.state).abs() <= 1e-8);
}

#[test]
fn multipliers_are_stable_and_consistent() {
    let s = solved();
    let (vc, gains) = (&s.sol.virtual_constraint, &s.settings.gains);
    let newton = NewtonOptions::default();
    let base = floquet_stability(&s.params, vc, gains, &s.lc, &newton).unwrap();
    assert!(base.stable && base.spectral_radius < 1.0);

    let halved = NewtonOptions {
        fd_step: newton.fd_step / 2.0,
        ..newton.clone()
    };
    let fine = floquet_stability(&s.params, vc, gains, &s.lc, &halved).unwrap();
    let change = (fine.spectral_radius - base.spectral_radius).abs() / base.spectral_radius;
    assert!(change < 0.1, "radius {} vs {}", base.spectral_radius, fine.spectral_radius);

    let map = |x: &MinState| return_map(&s.params, vc, gains, x, &newton.map).map(|r| r.x_next);
    let twice = fd_jacobian(|x| map(&map(x)?), &s.lc.min_state(), newton.fd_step).unwrap();
    let squared = stability_of(&twice).spectral_radius;
    let expected = base.spectral_radius.powi(2);
    assert!((squared - expected).abs() <= 0.05 * expected, "{squared} vs {expected}");
}

#[test]
fn return_map_lands_on_the_guard() {
    let s = solved();
    let mut x = s.lc.x_star.clone();
    x.qd *= 1.01;
    let next = poincare_map(&s.params, &s.sol.virtual_constraint, &s.settings.gains, &x, &ReturnMapOptions::default())
        .unwrap();
    assert!(guard(&s.params, &next).abs() <= 1e-8);
}

#[test]
fn twenty_steps_stay_on_the_cycle() {
    let s = solved();
    let ctrl = controller(s);
    let target = s.lc.min_state();
    let mut state = s.lc.x_star.clone();
    for step in 0..20 {
        let (_, end) = walk(&s.params, &ctrl, &state, 1, &ReturnMapOptions::default()).unwrap();
        let drift = (chart::from_full(&end) - target).abs().max();
        assert!(drift <= 1e-3, "step {step}: drift {drift}");
        state = end;
    }
}

#[test]
fn outputs_stay_in_the_tracking_tube() {
    let s = solved();
    let post = impact(&s.params, &s.lc.x_star).unwrap().post;
    let out = integrate_step(&s.params, &post, &controller(s), 3.0, &StepOptions::default()).unwrap();
    let y0 = outputs(&s.params, &s.sol.virtual_constraint, &post, 0.0).unwrap().y.norm();
    let worst = out
        .trajectory
        .samples
        .iter()
        .map(|p| outputs(&s.params, &s.sol.virtual_constraint, &p.state, p.t).unwrap().y.norm())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-4 + y0, "worst output {worst}, initial {y0}");
}

#[test]
fn fallen_guess_does_not_converge() {
    let s = solved();
    let mut q = QVec::zeros();
    q[1] = 0.1;
    q[Leg::Left.offset() + 1] = 1.0;
    q[Leg::Right.offset() + 1] = 1.0;
    let fallen = WalkerState::new(q, QVec::zeros(), Leg::Left);
    let lc = find_limit_cycle(
        &s.params,
        &s.sol.virtual_constraint,
        &s.settings.gains,
        &fallen,
        &NewtonOptions::default(),
    )
    .unwrap();
    assert!(!lc.converged);
    assert!(lc.failure.is_some());
}

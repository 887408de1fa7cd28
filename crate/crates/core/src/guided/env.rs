//! Planar walking environment stepped at a fixed control interval.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chart::{self, MinState, NM};
use crate::dynamics::{guard, impact, stance_dynamics};
use crate::error::{Error, Result};
use crate::gaitopt::frame_manifest;
use crate::guided::observation::{
    assemble_observation, stance_first_joints, Observation, ObservationProfile, Terrain,
};
use crate::guided::reward::{check_termination, pd_torque, PdGains, Termination, TerminationConfig};
use crate::integrate::{integrate_step, Controller, StepEvent, StepOptions};
use crate::model::{Leg, ModelKind, ModelParams, Torques, WalkerState, BASE_X, BASE_Z, NU};

/// Swing-foot height that arms touchdown detection (m).
const ARM_HEIGHT: f64 = 5e-3;
/// Depth an unarmed swing foot may sink before the episode counts as failed (m).
const SCUFF_DEPTH: f64 = 0.01;
/// Touchdowns allowed within one control interval.
const MAX_IMPACTS_PER_STEP: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub params: ModelParams,
    pub profile: ObservationProfile,
    pub termination: TerminationConfig,
    /// Stance-first PD gains.
    pub pd: PdGains,
    /// Stance-first joint targets for a zero action. The stance slide target sits
    /// above the standing length by roughly the static sag under body weight.
    pub nominal: Vec<f64>,
    /// Per-joint scale from policy output to target offset.
    pub action_scale: Vec<f64>,
    /// Uniform half-width of the reset perturbation on joint positions and rates.
    pub init_noise: f64,
    pub rtol: f64,
    /// Terminate when the stance foot would lift off or slip.
    pub contact_checks: bool,
    pub terrain: Terrain,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            params: ModelParams {
                m_leg: 0.3,
                ..ModelParams::prismatic()
            },
            profile: ObservationProfile::default(),
            termination: TerminationConfig::default(),
            pd: PdGains {
                kp: vec![150.0, 3000.0, 5.0, 100.0, 1000.0, 5.0],
                kd: vec![10.0, 150.0, 0.2, 4.0, 50.0, 0.2],
            },
            nominal: vec![0.0, 0.735, 0.0, 0.0, 0.68, 0.0],
            action_scale: vec![0.25, 0.03, 0.25, 0.25, 0.05, 0.25],
            init_noise: 0.02,
            rtol: 1e-6,
            contact_checks: true,
            terrain: Terrain::Flat,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.kind != ModelKind::Prismatic {
            return Err(Error::Config("the environment simulates the prismatic model".into()));
        }
        for (what, len) in [
            ("pd.kp", self.pd.kp.len()),
            ("pd.kd", self.pd.kd.len()),
            ("nominal", self.nominal.len()),
            ("action_scale", self.action_scale.len()),
        ] {
            if len != NU {
                return Err(Error::shape(what, NU, len));
            }
        }
        if !(self.termination.dt > 0.0 && self.termination.episode_seconds > 0.0) {
            return Err(Error::Config("dt and episode length must be positive".into()));
        }
        Ok(())
    }

    /// Stance-first actuator limits.
    pub fn limits(&self) -> Vec<f64> {
        let l = self.params.actuator_limits();
        (0..NU).map(|i| l[i]).collect()
    }

    pub fn targets(&self, action: &[f64]) -> Vec<f64> {
        (0..NU)
            .map(|i| self.nominal[i] + self.action_scale[i] * action[i])
            .collect()
    }

    /// Upright pose at the nominal joint targets, at rest, stance foot at the origin.
    pub fn standing_state(&self) -> WalkerState {
        let mut x = MinState::zeros();
        for i in 0..NU {
            x[1 + i] = self.nominal[i];
        }
        chart::to_full(&self.params, &x, Leg::Left, 0.0)
    }
}

/// Minimal-chart state of a library frame.
pub fn min_state_of_frame(frame: &[f64]) -> Result<MinState> {
    let width = frame_manifest().len();
    if frame.len() != width {
        return Err(Error::shape("library frame", width, frame.len()));
    }
    // Frame: base_z, pitch, 6 joints, base_vx, base_vz, pitch_rate, 6 joint rates.
    let mut x = MinState::zeros();
    for i in 0..NM {
        x[i] = frame[1 + i];
        x[NM + i] = frame[NM + 3 + i];
    }
    Ok(x)
}

/// Full state of a library frame with the stance foot pinned at `(foot_x, 0)`.
pub fn state_from_frame(params: &ModelParams, frame: &[f64], foot_x: f64) -> Result<WalkerState> {
    Ok(chart::to_full(params, &min_state_of_frame(frame)?, Leg::Left, foot_x))
}

/// How the joints are driven during one control interval.
pub enum Actuation<'a> {
    /// Stance-first PD targets.
    Targets(&'a [f64]),
    /// A torque law evaluated continuously; time is measured from the last touchdown.
    Controller(&'a dyn Controller),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub termination: Termination,
    /// Stance-first torques at the end of the interval.
    pub tau: [f64; NU],
    pub impacts: usize,
    /// Why the episode failed, when it did.
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Env {
    pub config: EnvConfig,
    pub state: WalkerState,
    pub command: [f64; 2],
    pub prev_action: [f64; NU],
    pub steps: usize,
    /// Time since the last touchdown (s).
    pub t_local: f64,
    armed: bool,
    limits: Vec<f64>,
}

struct PdLaw<'a> {
    targets: &'a [f64],
    gains: &'a PdGains,
    limits: &'a [f64],
}

impl Controller for PdLaw<'_> {
    fn torque(&self, _t: f64, state: &WalkerState) -> Result<Torques> {
        let (q, qd) = stance_first_joints(state);
        let out = pd_torque(self.targets, &q, &qd, self.gains, self.limits)?;
        Ok(chart::torques_to_full(
            &Torques::from_column_slice(&out.tau),
            state.stance,
        ))
    }
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let state = config.standing_state();
        let limits = config.limits();
        let mut env = Self {
            config,
            state,
            command: [0.0; 2],
            prev_action: [0.0; NU],
            steps: 0,
            t_local: 0.0,
            armed: false,
            limits,
        };
        env.armed = guard(&env.config.params, &env.state) > ARM_HEIGHT;
        Ok(env)
    }

    pub fn reset(&mut self, start: WalkerState, command: [f64; 2]) {
        self.armed = guard(&self.config.params, &start) > ARM_HEIGHT;
        self.state = start;
        self.command = command;
        self.prev_action = [0.0; NU];
        self.steps = 0;
        self.t_local = 0.0;
    }

    /// Standing start with uniform noise on joint positions and rates.
    pub fn reset_standing<R: Rng>(&mut self, command: [f64; 2], rng: &mut R) {
        let s = perturb(&self.config, &self.config.standing_state(), rng);
        self.reset(s, command);
    }

    pub fn observation(&self) -> Result<Observation> {
        assemble_observation(
            &self.config.profile,
            &self.state,
            [self.command[0], self.command[1], 0.0, 0.0],
            &self.prev_action,
            &self.config.terrain,
        )
    }

    pub fn base_height(&self) -> f64 {
        self.state.q[BASE_Z] - self.config.terrain.height(self.state.q[BASE_X])
    }

    fn fail(&self, reason: String, impacts: usize) -> StepInfo {
        StepInfo {
            termination: Termination::Fell,
            tau: [0.0; NU],
            impacts,
            failure: Some(reason),
        }
    }

    /// Advances one control interval. `action` is recorded as the previous action.
    pub fn step(&mut self, actuation: Actuation, action: &[f64]) -> Result<StepInfo> {
        if action.len() != NU {
            return Err(Error::shape("action", NU, action.len()));
        }
        let params = &self.config.params;
        let pd;
        let controller: &dyn Controller = match actuation {
            Actuation::Targets(t) => {
                if t.len() != NU {
                    return Err(Error::shape("joint targets", NU, t.len()));
                }
                pd = PdLaw {
                    targets: t,
                    gains: &self.config.pd,
                    limits: &self.limits,
                };
                &pd
            }
            Actuation::Controller(c) => c,
        };
        self.prev_action.copy_from_slice(action);
        self.steps += 1;
        let mut remaining = self.config.termination.dt;
        let mut impacts = 0;
        while remaining > 1e-12 {
            let opts = StepOptions {
                rtol: self.config.rtol,
                atol: 1e-3 * self.config.rtol,
                t0: self.t_local,
                arm_height: ARM_HEIGHT,
                initially_armed: self.armed,
                max_step: self.config.termination.dt,
                record: false,
            };
            let out = match integrate_step(params, &self.state, controller, remaining, &opts) {
                Ok(o) => o,
                Err(e) => return Ok(self.fail(format!("integration: {e}"), impacts)),
            };
            remaining -= out.t - self.t_local;
            self.t_local = out.t;
            self.state = out.state;
            match out.event {
                StepEvent::Timeout => break,
                StepEvent::Fall => return Ok(self.fail("fell".into(), impacts)),
                StepEvent::Touchdown => {
                    impacts += 1;
                    if impacts > MAX_IMPACTS_PER_STEP {
                        return Ok(self.fail("touchdown chatter".into(), impacts));
                    }
                    match impact(params, &self.state) {
                        Ok(i) => self.state = i.post,
                        Err(e) => return Ok(self.fail(format!("impact: {e}"), impacts)),
                    }
                    self.t_local = 0.0;
                    self.armed = false;
                }
            }
        }
        let height = guard(params, &self.state);
        self.armed |= height > ARM_HEIGHT;
        if !self.armed && height < -SCUFF_DEPTH {
            return Ok(self.fail("swing foot below ground".into(), impacts));
        }
        let tau_full = controller.torque(self.t_local, &self.state)?;
        if self.config.contact_checks {
            match stance_dynamics(params, &self.state, &tau_full) {
                Ok(acc) => {
                    let f = acc.grf;
                    if f.normal < 0.0 {
                        return Ok(self.fail("stance foot lifted".into(), impacts));
                    }
                    if f.tangential.abs() > params.mu * f.normal {
                        return Ok(self.fail("stance foot slipped".into(), impacts));
                    }
                }
                Err(e) => return Ok(self.fail(format!("dynamics: {e}"), impacts)),
            }
        }
        let u = chart::torques_from_full(&tau_full, self.state.stance);
        let mut tau = [0.0; NU];
        tau.copy_from_slice(u.as_slice());
        Ok(StepInfo {
            termination: check_termination(&self.state, self.steps, &self.config.termination),
            tau,
            impacts,
            failure: None,
        })
    }
}

/// Uniform perturbation of joint positions and rates, keeping the stance foot pinned.
/// Position draws that would sink the swing foot past half the scuff allowance are redrawn.
pub fn perturb<R: Rng>(config: &EnvConfig, state: &WalkerState, rng: &mut R) -> WalkerState {
    const MAX_DRAWS: usize = 64;
    let a = config.init_noise;
    let p = &config.params;
    let base = chart::from_full(state);
    let foot = crate::model::foot_point(p, state, state.stance).pos.x;
    if !(a > 0.0) {
        return state.clone();
    }
    let floor = guard(p, state).min(0.0) - 0.5 * SCUFF_DEPTH;
    let mut x = base;
    for _ in 0..MAX_DRAWS {
        x = base;
        for i in 1..NM {
            x[i] += rng.gen_range(-a..=a);
        }
        for slide in [2, 5] {
            x[slide] = x[slide].clamp(p.slide_min, p.slide_max);
        }
        if guard(p, &chart::to_full(p, &x, state.stance, foot)) >= floor {
            break;
        }
        x = base;
    }
    for i in 1..NM {
        x[NM + i] += rng.gen_range(-a..=a);
    }
    chart::to_full(p, &x, state.stance, foot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaitopt::frame_of_state;

    #[test]
    fn standing_pose_rests_on_the_stance_foot() {
        let cfg = EnvConfig::default();
        let s = cfg.standing_state();
        assert!((s.q[BASE_Z] - 0.735).abs() < 1e-12);
        assert!((guard(&cfg.params, &s) - 0.055).abs() < 1e-12);
    }

    #[test]
    fn zero_action_holds_the_standing_pose() {
        let cfg = EnvConfig::default();
        let mut env = Env::new(cfg.clone()).unwrap();
        let targets = cfg.targets(&[0.0; NU]);
        for _ in 0..50 {
            let info = env.step(Actuation::Targets(&targets), &[0.0; NU]).unwrap();
            assert_eq!(info.termination, Termination::Running, "{:?}", info.failure);
        }
        assert!((env.state.q[BASE_Z] - 0.7).abs() < 0.05);
    }

    #[test]
    fn frames_round_trip_through_states() {
        let cfg = EnvConfig::default();
        let s = cfg.standing_state();
        let frame = frame_of_state(&s);
        let back = state_from_frame(&cfg.params, &frame, 0.0).unwrap();
        assert!((back.q - s.q).abs().max() < 1e-12);
        assert!((back.qd - s.qd).abs().max() < 1e-12);
    }
}
